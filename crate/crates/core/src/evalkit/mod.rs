//! Downstream evaluation: linear probing of frozen mean-pooled features and
//! end-to-end fine-tuning with a linear head.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::MimModel;
use crate::nn::{linear, Graph, LinearParams, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{adamw_step, AdamWConfig, OptimState};

/// Images per encoder pass when extracting features.
const FEATURE_CHUNK: usize = 256;

/// Mean over tokens of the last encoder layer (after its layer norm),
/// `[B,D]`. The encoder sees every patch.
pub fn extract_features(model: &MimModel, images: &Tensor) -> Result<Tensor> {
    let last = model.config.encoder.depth - 1;
    let tokens = model.encode_full(images, &[last])?.pop().unwrap();
    Ok(mean_tokens(&tokens))
}

fn mean_tokens(tokens: &Tensor) -> Tensor {
    let (b, n, d) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let mut out = vec![0.0; b * d];
    for (i, sample) in tokens.data().chunks(n * d).enumerate() {
        let row = &mut out[i * d..(i + 1) * d];
        for tok in sample.chunks(d) {
            row.iter_mut().zip(tok).for_each(|(o, v)| *o += v);
        }
        row.iter_mut().for_each(|o| *o /= n as f64);
    }
    Tensor::new([b, d], out).expect("pooled shape matches data")
}

/// Features of `indices` in dataset order, extracted in chunks.
pub fn dataset_features(model: &MimModel, data: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let d = model.config.encoder.dim;
    let mut out = Vec::with_capacity(indices.len() * d);
    for chunk in indices.chunks(FEATURE_CHUNK) {
        out.extend_from_slice(extract_features(model, &data.batch(chunk))?.data());
    }
    Tensor::new([indices.len(), d], out)
}

/// Mean softmax cross-entropy of `logits` `[B,K]` against class indices.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
        return Err(Error::invalid(
            "softmax_cross_entropy",
            format!("logits {s:?} for {} labels", labels.len()),
        ));
    }
    let (b, k) = (s[0], s[1]);
    let z = g.value(logits);
    let maxes: Vec<f64> = z
        .data()
        .chunks(k)
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let maxes = g.constant(Tensor::new([b, 1], maxes)?);
    let shifted = g.sub(logits, maxes)?;
    let e = g.exp(shifted)?;
    let total = g.sum(e, &[1], true)?;
    let log_total = g.ln(total)?;
    let log_p = g.sub(shifted, log_total)?;
    let mut onehot = vec![0.0; b * k];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * k + l] = 1.0;
    }
    let onehot = g.constant(Tensor::new([b, k], onehot)?);
    let picked = g.mul(log_p, onehot)?;
    let total = g.sum_all(picked)?;
    g.scale(total, -1.0 / b as f64)
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0
        })
        .collect()
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

fn check_split(labels: &[usize], train: &[usize], eval: &[usize], classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::invalid("probe", format!("{classes} classes")));
    }
    if train.is_empty() || eval.is_empty() {
        return Err(Error::invalid("probe", "empty train or eval split"));
    }
    let mut seen = vec![false; labels.len()];
    for &i in train {
        if i >= labels.len() || seen[i] {
            return Err(Error::invalid(
                "probe",
                format!("train index {i} out of range or repeated"),
            ));
        }
        seen[i] = true;
    }
    for &i in eval {
        if i >= labels.len() || seen[i] {
            return Err(Error::invalid(
                "probe",
                format!("eval index {i} out of range or shared with train"),
            ));
        }
        seen[i] = true;
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid("probe", format!("label {l} for {classes} classes")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr: 1e-2,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub top1: f64,
    pub train_top1: f64,
    pub epochs: usize,
    pub pooling: String,
}

fn minibatches(n: usize, size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Trains a softmax-regression head on frozen `features` `[N,D]`. Features
/// are standardized with train-split statistics.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    train: &[usize],
    eval: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let s = features.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::invalid(
            "linear_probe",
            format!("features {s:?} for {} labels", labels.len()),
        ));
    }
    check_split(labels, train, eval, classes)?;
    if !features.is_finite() {
        return Err(Error::NonFinite { op: "linear_probe" });
    }
    let d = s[1];
    let rows = |idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .flat_map(|&i| features.data()[i * d..(i + 1) * d].iter().copied())
            .collect()
    };
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for &i in train {
        mean.iter_mut()
            .zip(&features.data()[i * d..])
            .for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    for &i in train {
        var.iter_mut()
            .zip(&features.data()[i * d..])
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2));
    }
    let std: Vec<f64> = var.iter().map(|v| (v / train.len() as f64).sqrt().max(1e-8)).collect();
    let standardize = |mut x: Vec<f64>| -> Vec<f64> {
        for row in x.chunks_mut(d) {
            row.iter_mut()
                .zip(&mean)
                .zip(&std)
                .for_each(|((v, m), s)| *v = (*v - m) / s);
        }
        x
    };
    let xtr = standardize(rows(train));
    let xev = standardize(rows(eval));
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let yev: Vec<usize> = eval.iter().map(|&i| labels[i]).collect();

    let mut store = ParamStore::new();
    let head = LinearParams::zeros(&mut store, "probe.head", d, classes);
    let mut opt = OptimState::new(
        &store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            beta2: 0.999,
            ..AdamWConfig::default()
        },
    );
    let mut rng = Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        for batch in minibatches(train.len(), cfg.batch_size, &mut rng) {
            let x: Vec<f64> = batch
                .iter()
                .flat_map(|&i| xtr[i * d..(i + 1) * d].iter().copied())
                .collect();
            let y: Vec<usize> = batch.iter().map(|&i| ytr[i]).collect();
            let grads = {
                let mut g = Graph::new(&store);
                let xv = g.constant(Tensor::new([batch.len(), d], x)?);
                let logits = linear(&mut g, &head, xv)?;
                let loss = softmax_cross_entropy(&mut g, logits, &y)?;
                let grads = g.backward(loss)?;
                g.param_grads(&grads)
            };
            adamw_step(&mut opt, &mut store, &grads, cfg.lr)?;
        }
    }
    let predict = |x: &[f64], n: usize| -> Result<Vec<usize>> {
        let mut g = Graph::frozen(&store);
        let xv = g.constant(Tensor::new([n, d], x.to_vec())?);
        let logits = linear(&mut g, &head, xv)?;
        Ok(argmax_rows(g.value(logits)))
    };
    Ok(ProbeResult {
        top1: accuracy(&predict(&xev, eval.len())?, &yev),
        train_top1: accuracy(&predict(&xtr, train.len())?, &ytr),
        epochs: cfg.epochs,
        pooling: "mean".into(),
    })
}

/// Extracts features of the whole dataset and probes them.
pub fn probe_encoder(
    model: &MimModel,
    data: &Dataset,
    train: &[usize],
    eval: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let all: Vec<usize> = (0..data.len()).collect();
    let features = dataset_features(model, data, &all)?;
    let labels = data.batch_labels(&all);
    linear_probe(&features, &labels, data.classes, train, eval, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.05,
            seed: 0,
        }
    }
}

/// Mirrors each image left-right with probability one half.
fn random_hflip(images: &mut Tensor, rng: &mut Rng) {
    let s = images.shape().to_vec();
    let (per, w) = (s[1] * s[2] * s[3], s[3]);
    for img in images.data_mut().chunks_mut(per) {
        if rng.uniform() < 0.5 {
            img.chunks_mut(w).for_each(<[f64]>::reverse);
        }
    }
}

fn classify(g: &mut Graph, model: &MimModel, head: &LinearParams, images: &Tensor) -> Result<Var> {
    let x = g.constant(images.clone());
    let tokens = model.embed(g, x)?;
    let last = model.config.encoder.depth - 1;
    let feats = model.encode_with_taps(g, tokens, &[last])?[0];
    let pooled = g.mean(feats, &[1], false)?;
    linear(g, head, pooled)
}

/// Fine-tunes the encoder with a fresh linear head on `train` and reports
/// top-1 on `eval`. Decoder and fusion parameters never enter the graph.
/// The input model is left unchanged.
pub fn finetune(
    model: &MimModel,
    data: &Dataset,
    train: &[usize],
    eval: &[usize],
    cfg: &FinetuneConfig,
) -> Result<ProbeResult> {
    let labels = data.batch_labels(&(0..data.len()).collect::<Vec<_>>());
    check_split(&labels, train, eval, data.classes)?;
    if data.height != model.config.image_size || data.channels != model.config.channels {
        return Err(Error::config("model.image_size", "dataset does not match the model"));
    }
    let mut work = model.clone();
    let head = LinearParams::zeros(
        &mut work.params,
        "finetune.head",
        model.config.encoder.dim,
        data.classes,
    );
    let mut opt = OptimState::new(
        &work.params,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            beta2: 0.999,
            ..AdamWConfig::default()
        },
    );
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut train_hits = 0usize;
    for epoch in 0..cfg.epochs {
        let last_epoch = epoch + 1 == cfg.epochs;
        for batch in minibatches(train.len(), cfg.batch_size, &mut rng) {
            let idx: Vec<usize> = batch.iter().map(|&i| train[i]).collect();
            let mut images = data.batch(&idx);
            random_hflip(&mut images, &mut rng);
            let y = data.batch_labels(&idx);
            let grads = {
                let mut g = Graph::new(&work.params);
                let logits = classify(&mut g, &work, &head, &images)?;
                if last_epoch {
                    train_hits += argmax_rows(g.value(logits))
                        .iter()
                        .zip(&y)
                        .filter(|(p, l)| p == l)
                        .count();
                }
                let loss = softmax_cross_entropy(&mut g, logits, &y)?;
                if !g.value(loss).item().is_finite() {
                    return Err(Error::NonFinite { op: "finetune" });
                }
                let grads = g.backward(loss)?;
                g.param_grads(&grads)
            };
            adamw_step(&mut opt, &mut work.params, &grads, cfg.lr)?;
        }
    }
    let mut hits = 0usize;
    for chunk in eval.chunks(FEATURE_CHUNK) {
        let mut g = Graph::frozen(&work.params);
        let logits = classify(&mut g, &work, &head, &data.batch(chunk))?;
        let y = data.batch_labels(chunk);
        hits += argmax_rows(g.value(logits))
            .iter()
            .zip(&y)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(ProbeResult {
        top1: hits as f64 / eval.len() as f64,
        train_top1: if cfg.epochs == 0 {
            0.0
        } else {
            train_hits as f64 / train.len() as f64
        },
        epochs: cfg.epochs,
        pooling: "mean".into(),
    })
}

/// Result file of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub protocol: String,
    pub fraction: f64,
    pub epochs: usize,
    pub top1: f64,
    pub seed: u64,
    pub checkpoint: String,
    pub config_hash: String,
    pub version: String,
}

impl EvalRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }
}
