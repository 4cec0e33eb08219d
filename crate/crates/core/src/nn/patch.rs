//! Patch tokenisation. Images are `[B,C,H,W]`; patches are `[B,N,P·P·C]`
//! with patches in row-major grid order and, within a patch, pixel-major
//! (row, column) order with channels innermost.

use crate::autodiff::{permute_tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::blocks::{linear, LinearParams};
use super::params::{Graph, ParamStore};

fn grid(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::invalid("patchify", format!("expected [B,C,H,W], got {shape:?}")));
    }
    let (c, h, w) = (shape[1], shape[2], shape[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::invalid(
            "patchify",
            format!("image {h}x{w} not divisible by patch size {p}"),
        ));
    }
    Ok((shape[0], c, h / p, w / p))
}

pub fn patchify(images: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, gh, gw) = grid(images.shape(), p)?;
    let x = images.reshape(&[b, c, gh, p, gw, p])?;
    let x = permute_tensor(&x, &[0, 2, 4, 3, 5, 1]);
    x.reshape(&[b, gh * gw, p * p * c])
}

/// Exact inverse of [`patchify`] for an `h × w` image with `c` channels.
pub fn unpatchify(patches: &Tensor, p: usize, c: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = patches.shape();
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || s.len() != 3 || s[1] != (h / p) * (w / p) || s[2] != p * p * c {
        return Err(Error::invalid(
            "unpatchify",
            format!("patches {s:?} do not tile a {c}x{h}x{w} image with patch {p}"),
        ));
    }
    let (b, gh, gw) = (s[0], h / p, w / p);
    let x = patches.reshape(&[b, gh, gw, p, p, c])?;
    let x = permute_tensor(&x, &[0, 5, 1, 3, 2, 4]);
    x.reshape(&[b, c, h, w])
}

/// [`patchify`] recorded on the tape.
pub fn patchify_var(g: &mut Graph, images: Var, p: usize) -> Result<Var> {
    let (b, c, gh, gw) = grid(g.shape(images), p)?;
    let x = g.reshape(images, &[b, c, gh, p, gw, p])?;
    let x = g.permute(x, &[0, 2, 4, 3, 5, 1])?;
    g.reshape(x, &[b, gh * gw, p * p * c])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchEmbedParams {
    pub proj: LinearParams,
    pub patch: usize,
    pub channels: usize,
}

impl PatchEmbedParams {
    pub fn new(store: &mut ParamStore, name: &str, patch: usize, channels: usize, d: usize, rng: &mut Rng) -> Self {
        Self {
            proj: LinearParams::new(store, &format!("{name}.proj"), patch * patch * channels, d, rng),
            patch,
            channels,
        }
    }
}

pub fn patch_embed(g: &mut Graph, p: &PatchEmbedParams, images: Var) -> Result<Var> {
    let patches = patchify_var(g, images, p.patch)?;
    linear(g, &p.proj, patches)
}
