//! Binary checkpoints, little-endian throughout:
//!
//! ```text
//! magic "MFFCKPT1" | version u16 | config: u32 length + UTF-8 TOML
//! parameters: u32 count, then per tensor
//!     u16 name length | name | u8 ndim | ndim × u32 dims | f64 payload
//! optimizer: same framing ("m.<name>", "v.<name>", "optim.step")
//! rng state: 4 × u64
//! ```
//!
//! Teacher parameters, when present, follow the model parameters in the
//! first tensor block under the prefix `teacher.`.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::TrainState;

pub const CKPT_MAGIC: &[u8; 8] = b"MFFCKPT1";
pub const CKPT_VERSION: u16 = 1;
const TEACHER_PREFIX: &str = "teacher.";
const STEP_TENSOR: &str = "optim.step";

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_block(out: &mut Vec<u8>, tensors: &[(String, &Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        put_tensor(out, name, t);
    }
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let text = state.config.canonical_text();
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let mut params: Vec<(String, &Tensor)> = state
        .model
        .params
        .entries()
        .iter()
        .map(|e| (e.name.clone(), &e.value))
        .collect();
    if let Some(t) = &state.teacher {
        params.extend(
            t.params
                .entries()
                .iter()
                .map(|e| (format!("{TEACHER_PREFIX}{}", e.name), &e.value)),
        );
    }
    put_block(&mut out, &params);

    let step = Tensor::scalar(state.opt.step as f64);
    let entries = state.model.params.entries();
    let mut moments: Vec<(String, &Tensor)> = Vec::with_capacity(2 * entries.len() + 1);
    moments.extend(
        entries
            .iter()
            .zip(&state.opt.m)
            .map(|(e, m)| (format!("m.{}", e.name), m)),
    );
    moments.extend(
        entries
            .iter()
            .zip(&state.opt.v)
            .map(|(e, v)| (format!("v.{}", e.name), v)),
    );
    moments.push((STEP_TENSOR.to_string(), &step));
    put_block(&mut out, &moments);

    for w in state.rng.state() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(state))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(Error::Length {
                expected: (self.at + n) as u64,
                actual: self.bytes.len() as u64,
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = self.u8()? as usize;
        let dims: Vec<usize> = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let numel: usize = dims.iter().product();
        let raw = self.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }

    fn block(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.tensor()).collect()
    }
}

/// Expects exactly the tensors named by `names`, in order.
fn take_named(block: &mut std::vec::IntoIter<(String, Tensor)>, names: &[String]) -> Result<Vec<(String, Tensor)>> {
    names
        .iter()
        .map(|n| {
            let (name, t) = block
                .next()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{n}`")))?;
            if &name != n {
                return Err(Error::Format(format!("expected tensor `{n}`, found `{name}`")));
            }
            Ok((name, t))
        })
        .collect()
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config = ExperimentConfig::parse(text)?;
    let mut state = TrainState::skeleton(config)?;

    let names = |prefix: &str, s: &crate::nn::ParamStore| -> Vec<String> {
        s.entries().iter().map(|e| format!("{prefix}{}", e.name)).collect()
    };
    let mut params = r.block()?.into_iter();
    let model_names = names("", &state.model.params);
    state.model.params.load_values(take_named(&mut params, &model_names)?)?;
    if let Some(t) = state.teacher.as_mut() {
        let tn = names(TEACHER_PREFIX, &t.params);
        let values = take_named(&mut params, &tn)?
            .into_iter()
            .map(|(n, v)| (n[TEACHER_PREFIX.len()..].to_string(), v))
            .collect();
        t.params.load_values(values)?;
    }
    if let Some((extra, _)) = params.next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}`")));
    }

    let mut moments = r.block()?.into_iter();
    for (prefix, slot) in [("m.", &mut state.opt.m), ("v.", &mut state.opt.v)] {
        let got = take_named(&mut moments, &names(prefix, &state.model.params))?;
        for ((_, t), dst) in got.into_iter().zip(slot.iter_mut()) {
            if t.shape() != dst.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_checkpoint",
                    lhs: dst.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *dst = t;
        }
    }
    let step = take_named(&mut moments, &[STEP_TENSOR.to_string()])?.pop().unwrap().1;
    let step = step.data()[0];
    if step.fract() != 0.0 || step < 0.0 {
        return Err(Error::Format(format!("invalid step count {step}")));
    }
    state.opt.step = step as u64;
    if let Some((extra, _)) = moments.next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}`")));
    }

    let s = [r.u64()?, r.u64()?, r.u64()?, r.u64()?];
    state.rng = Rng::from_state(s);
    if r.at != bytes.len() {
        return Err(Error::Length {
            expected: r.at as u64,
            actual: bytes.len() as u64,
        });
    }
    Ok(state)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    parse_checkpoint(&std::fs::read(path)?)
}
