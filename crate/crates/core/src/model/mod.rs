//! Masked image modelling with optional multi-level feature fusion between
//! encoder and decoder.

mod config;
mod mask;
mod targets;

pub use config::{DecoderConfig, EncoderConfig, FusionKind, MffConfig, ModelConfig, ProjectionKind, TargetMode};
pub use mask::{random_mask, visible_count, MaskPlan};
pub use targets::{lowpass_targets, normalize_targets, TARGET_EPS};

pub use crate::nn::{patchify, unpatchify};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{
    layer_norm, linear, patch_embed, sincos_pos_embed, transformer_block, BlockParams, Graph, LayerNormParams,
    LinearParams, ParamId, ParamStore, PatchEmbedParams,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub embed: PatchEmbedParams,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Identity,
    Linear(LinearParams),
    /// Linear, GELU, linear.
    Nonlinear(LinearParams, LinearParams),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fusion {
    WeightedAverage {
        logits: ParamId,
    },
    /// A learnable query attends over the layer axis at every token.
    Attention {
        query: ParamId,
        key: LinearParams,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MffParams {
    pub projections: Vec<Projection>,
    pub fusion: Fusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub embed: LinearParams,
    pub mask_token: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
    pub head: LinearParams,
}

/// Model parameters plus the typed layout that addresses them.
#[derive(Clone, Debug, PartialEq)]
pub struct MimModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
    pub mff: Option<MffParams>,
    enc_pos: Tensor,
    dec_pos: Tensor,
}

/// Result of one training forward pass.
pub struct Forward {
    pub loss: Var,
    /// Fusion weights (token-averaged for attention fusion).
    pub alpha: Option<Vec<f64>>,
    pub taps: Vec<Var>,
}

fn blocks(
    store: &mut ParamStore,
    prefix: &str,
    dim: usize,
    depth: usize,
    heads: usize,
    mlp_ratio: usize,
    rng: &mut Rng,
) -> Result<Vec<BlockParams>> {
    (0..depth)
        .map(|i| BlockParams::new(store, &format!("{prefix}.blocks.{i}"), dim, heads, dim * mlp_ratio, rng))
        .collect()
}

impl MimModel {
    /// Registers encoder, decoder and fusion parameters in that order, so a
    /// fusion variant shares the encoder/decoder initialisation of the plain
    /// model drawn from the same seed.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let (e, d) = (&config.encoder, &config.decoder);
        let encoder = EncoderParams {
            embed: PatchEmbedParams::new(
                &mut store,
                "encoder.patch_embed",
                config.patch,
                config.channels,
                e.dim,
                rng,
            ),
            blocks: blocks(&mut store, "encoder", e.dim, e.depth, e.heads, e.mlp_ratio, rng)?,
            norm: LayerNormParams::new(&mut store, "encoder.norm", e.dim),
        };
        let embed = LinearParams::new(&mut store, "decoder.embed", e.dim, d.dim, rng);
        let mask_token = Tensor::from_fn(&[d.dim], |_| rng.trunc_normal(0.02));
        let mask_token = store.add("decoder.mask_token", mask_token, false);
        let decoder = DecoderParams {
            embed,
            mask_token,
            blocks: blocks(&mut store, "decoder", d.dim, d.depth, d.heads, d.mlp_ratio, rng)?,
            norm: LayerNormParams::new(&mut store, "decoder.norm", d.dim),
            head: LinearParams::new(&mut store, "decoder.head", d.dim, config.target_dim(), rng),
        };
        let mff = config.mff.as_ref().map(|m| Self::mff_params(&mut store, m, e.dim, rng));
        let g = config.grid();
        Ok(Self {
            enc_pos: sincos_pos_embed(g, g, e.dim)?,
            dec_pos: sincos_pos_embed(g, g, d.dim)?,
            config,
            params: store,
            encoder,
            decoder,
            mff,
        })
    }

    fn mff_params(store: &mut ParamStore, m: &MffConfig, dim: usize, rng: &mut Rng) -> MffParams {
        let projections = m
            .layers
            .iter()
            .map(|&l| {
                let name = format!("mff.proj.{l}");
                match m.projection {
                    ProjectionKind::None => Projection::Identity,
                    ProjectionKind::Linear => Projection::Linear(LinearParams::identity(store, &name, dim)),
                    ProjectionKind::Nonlinear => Projection::Nonlinear(
                        LinearParams::identity(store, &format!("{name}.fc1"), dim),
                        LinearParams::identity(store, &format!("{name}.fc2"), dim),
                    ),
                }
            })
            .collect();
        let fusion = match m.fusion {
            FusionKind::WeightedAverage => Fusion::WeightedAverage {
                logits: store.add("mff.logits", Tensor::zeros(&[m.layers.len()]), false),
            },
            FusionKind::Attention => Fusion::Attention {
                query: store.add("mff.query", Tensor::zeros(&[dim]), false),
                key: LinearParams::new(store, "mff.key", dim, dim, rng),
            },
        };
        MffParams { projections, fusion }
    }

    /// Parameters reached by the encoder alone.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.params
            .ids()
            .filter(|&id| self.params.entry(id).name.starts_with("encoder."))
            .collect()
    }

    fn check_images(&self, images: &Tensor) -> Result<usize> {
        let c = &self.config;
        let expect = [images.shape()[0], c.channels, c.image_size, c.image_size];
        if images.ndim() != 4 || images.shape() != expect {
            return Err(Error::ShapeMismatch {
                op: "model_input",
                lhs: images.shape().to_vec(),
                rhs: expect.to_vec(),
            });
        }
        Ok(expect[0])
    }

    /// Patch tokens plus positional embedding, `[B,N,D]`.
    pub fn embed(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let tokens = patch_embed(g, &self.encoder.embed, images)?;
        let pos = g.constant(self.enc_pos.clone());
        g.add(tokens, pos)
    }

    /// Runs every encoder block and returns the outputs of `layers` in order.
    /// The last layer is captured after the final layer norm, earlier layers
    /// raw.
    pub fn encode_with_taps(&self, g: &mut Graph, tokens: Var, layers: &[usize]) -> Result<Vec<Var>> {
        let depth = self.encoder.blocks.len();
        if let Some(&bad) = layers.iter().find(|&&l| l >= depth) {
            return Err(Error::invalid(
                "encode_with_taps",
                format!("layer {bad} >= depth {depth}"),
            ));
        }
        let mut outs = vec![None; depth];
        let mut x = tokens;
        for (i, block) in self.encoder.blocks.iter().enumerate() {
            x = transformer_block(g, block, x)?;
            if i + 1 == depth {
                x = layer_norm(g, &self.encoder.norm, x)?;
            }
            outs[i] = Some(x);
        }
        Ok(layers.iter().map(|&l| outs[l].unwrap()).collect())
    }

    /// Fuses the taps of the configured layer set; without fusion the single
    /// tap passes through.
    pub fn fuse(&self, g: &mut Graph, taps: &[Var]) -> Result<(Var, Option<Var>)> {
        match (&self.mff, &self.config.mff) {
            (Some(p), Some(c)) => mff_fuse(g, p, c, taps),
            _ => match taps {
                [t] => Ok((*t, None)),
                _ => Err(Error::invalid("fuse", format!("expected one tap, got {}", taps.len()))),
            },
        }
    }

    /// Decoder over visible fused tokens; returns predictions on the full
    /// grid, `[B,N,K]`.
    pub fn decode(&self, g: &mut Graph, fused: Var, plans: &[MaskPlan]) -> Result<Var> {
        let n = self.config.num_patches();
        let shape = g.shape(fused).to_vec();
        let consistent = shape.len() == 3
            && plans.len() == shape[0]
            && plans
                .iter()
                .all(|p| p.num_patches() == n && p.visible.len() == shape[1]);
        if !consistent {
            return Err(Error::invalid(
                "decode",
                format!(
                    "{} mask plans inconsistent with tokens {shape:?} on {n} patches",
                    plans.len()
                ),
            ));
        }
        let (b, v) = (shape[0], shape[1]);
        let dd = self.config.decoder.dim;
        let d = &self.decoder;
        let x = linear(g, &d.embed, fused)?;
        let token = g.param(d.mask_token);
        let zeros = g.constant(Tensor::zeros(&[b, n - v, dd]));
        let masked = g.add(zeros, token)?;
        let x = g.concat(&[x, masked], 1)?;
        let restore: Vec<Vec<usize>> = plans.iter().map(|p| p.restore.clone()).collect();
        let x = g.gather_rows(x, &restore)?;
        let pos = g.constant(self.dec_pos.clone());
        let mut x = g.add(x, pos)?;
        for block in &d.blocks {
            x = transformer_block(g, block, x)?;
        }
        let x = layer_norm(g, &d.norm, x)?;
        linear(g, &d.head, x)
    }

    /// One independent mask plan per sample.
    pub fn draw_plans(&self, batch: usize, rng: &mut Rng) -> Result<Vec<MaskPlan>> {
        (0..batch)
            .map(|_| random_mask(self.config.num_patches(), self.config.mask_ratio, rng))
            .collect()
    }

    /// Reconstruction targets `[B,N,K]` for the configured target mode.
    pub fn targets(&self, images: &Tensor, teacher: Option<&MimModel>) -> Result<Tensor> {
        self.check_images(images)?;
        let p = self.config.patch;
        match self.config.target_mode {
            TargetMode::RawPixels => patchify(images, p),
            TargetMode::RawPixelsNormalized => Ok(normalize_targets(&patchify(images, p)?)),
            TargetMode::LowpassNormalized => {
                let low = lowpass_targets(images, self.config.lowpass_cutoff)?;
                Ok(normalize_targets(&patchify(&low, p)?))
            }
            TargetMode::FeatureRegression => {
                let teacher =
                    teacher.ok_or_else(|| Error::invalid("targets", "feature regression needs a teacher model"))?;
                let last = teacher.config.encoder.depth - 1;
                let mut feats = teacher.encode_full(images, &[last])?;
                let f = feats.pop().unwrap();
                if f.shape()[2] != self.config.target_dim() {
                    return Err(Error::ShapeMismatch {
                        op: "targets",
                        lhs: f.shape().to_vec(),
                        rhs: vec![self.config.target_dim()],
                    });
                }
                Ok(f)
            }
        }
    }

    /// Full pipeline with fixed mask plans and targets.
    pub fn forward_with_plans(
        &self,
        g: &mut Graph,
        images: &Tensor,
        targets: &Tensor,
        plans: &[MaskPlan],
    ) -> Result<Forward> {
        let b = self.check_images(images)?;
        if plans.len() != b {
            return Err(Error::invalid(
                "forward",
                format!("{} mask plans for batch {b}", plans.len()),
            ));
        }
        let x = g.constant(images.clone());
        let tokens = self.embed(g, x)?;
        let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let tokens = g.gather_rows(tokens, &visible)?;
        let taps = self.encode_with_taps(g, tokens, &self.config.tap_layers())?;
        let (fused, alpha) = self.fuse(g, &taps)?;
        let pred = self.decode(g, fused, plans)?;
        let target = g.constant(targets.clone());
        let loss = mim_loss(g, pred, target, plans)?;
        let alpha = alpha.map(|a| mean_alpha(g.value(a)));
        Ok(Forward { loss, alpha, taps })
    }

    /// Draws mask plans from `rng`, builds targets and runs the pipeline.
    pub fn forward_train(
        &self,
        g: &mut Graph,
        images: &Tensor,
        teacher: Option<&MimModel>,
        rng: &mut Rng,
    ) -> Result<Forward> {
        let b = self.check_images(images)?;
        let plans = self.draw_plans(b, rng)?;
        let targets = self.targets(images, teacher)?;
        self.forward_with_plans(g, images, &targets, &plans)
    }

    /// Unmasked encoder outputs of `layers` as plain tensors `[B,N,D]`.
    pub fn encode_full(&self, images: &Tensor, layers: &[usize]) -> Result<Vec<Tensor>> {
        self.check_images(images)?;
        let mut g = Graph::frozen(&self.params);
        let x = g.constant(images.clone());
        let tokens = self.embed(&mut g, x)?;
        let taps = self.encode_with_taps(&mut g, tokens, layers)?;
        Ok(taps.into_iter().map(|t| g.value(t).clone()).collect())
    }

    /// Current fusion weights, `softmax(logits)`, for weighted-average fusion.
    pub fn fusion_weights(&self) -> Option<Vec<f64>> {
        match self.mff.as_ref()?.fusion {
            Fusion::WeightedAverage { logits } => {
                let t = crate::autodiff::softmax_forward(self.params.get(logits), 0);
                Some(t.into_data())
            }
            Fusion::Attention { .. } => None,
        }
    }
}

/// Averages fusion weights over every axis but the last.
fn mean_alpha(a: &Tensor) -> Vec<f64> {
    let k = *a.shape().last().unwrap();
    let rows = a.numel() / k;
    let mut out = vec![0.0; k];
    for row in a.data().chunks(k) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    if rows > 1 {
        for o in &mut out {
            *o /= rows as f64;
        }
    }
    out
}

fn project(g: &mut Graph, p: &Projection, x: Var) -> Result<Var> {
    match p {
        Projection::Identity => Ok(x),
        Projection::Linear(l) => linear(g, l, x),
        Projection::Nonlinear(a, b) => {
            let h = linear(g, a, x)?;
            let h = g.gelu(h)?;
            linear(g, b, h)
        }
    }
}

/// Projects each tap and combines them. Returns the fused tokens and the
/// fusion weights (`[k]` for weighted average, `[B,N,k]` for attention).
pub fn mff_fuse(g: &mut Graph, params: &MffParams, config: &MffConfig, taps: &[Var]) -> Result<(Var, Option<Var>)> {
    let k = config.layers.len();
    if taps.len() != k || params.projections.len() != k {
        return Err(Error::invalid(
            "mff_fuse",
            format!("{} taps for a layer set of size {k}", taps.len()),
        ));
    }
    let mut projected = Vec::with_capacity(k);
    for (i, (&tap, proj)) in taps.iter().zip(&params.projections).enumerate() {
        let tap = if config.detach_shallow && i + 1 < k {
            g.stop_gradient(tap)?
        } else {
            tap
        };
        projected.push(project(g, proj, tap)?);
    }
    match params.fusion {
        Fusion::WeightedAverage { logits } => {
            let w = g.param(logits);
            let alpha = g.softmax(w, 0)?;
            let mut acc: Option<Var> = None;
            for (i, &p) in projected.iter().enumerate() {
                let a = g.slice(alpha, 0, i, i + 1)?;
                let term = g.mul(p, a)?;
                acc = Some(match acc {
                    None => term,
                    Some(s) => g.add(s, term)?,
                });
            }
            Ok((acc.unwrap(), Some(alpha)))
        }
        Fusion::Attention { query, key } => {
            let q = g.param(query);
            let d = *g.shape(projected[0]).last().unwrap();
            let mut scores = Vec::with_capacity(k);
            for &p in &projected {
                let kv = linear(g, &key, p)?;
                let s = g.mul(kv, q)?;
                let s = g.sum(s, &[2], true)?;
                scores.push(g.scale(s, 1.0 / (d as f64).sqrt())?);
            }
            let scores = g.concat(&scores, 2)?;
            let alpha = g.softmax(scores, 2)?;
            let mut acc: Option<Var> = None;
            for (i, &p) in projected.iter().enumerate() {
                let a = g.slice(alpha, 2, i, i + 1)?;
                let term = g.mul(p, a)?;
                acc = Some(match acc {
                    None => term,
                    Some(s) => g.add(s, term)?,
                });
            }
            Ok((acc.unwrap(), Some(alpha)))
        }
    }
}

/// Mean squared error over the masked patches of every sample.
pub fn mim_loss(g: &mut Graph, pred: Var, target: Var, plans: &[MaskPlan]) -> Result<Var> {
    if plans.is_empty() || plans.iter().any(|p| p.masked.is_empty()) {
        return Err(Error::invalid("mim_loss", "empty mask set"));
    }
    if g.shape(pred) != g.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "mim_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let masked: Vec<Vec<usize>> = plans.iter().map(|p| p.masked.clone()).collect();
    let p = g.gather_rows(pred, &masked)?;
    let t = g.gather_rows(target, &masked)?;
    let d = g.sub(p, t)?;
    let sq = g.mul(d, d)?;
    g.mean_all(sq)
}

#[cfg(test)]
mod tests;
