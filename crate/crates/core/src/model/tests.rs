use super::*;
use crate::testutil::{param_grad_check, random};

fn tiny(mff: Option<MffConfig>) -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 2,
        patch: 2,
        encoder: EncoderConfig {
            dim: 8,
            depth: 3,
            heads: 2,
            mlp_ratio: 2,
        },
        decoder: DecoderConfig {
            dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
        },
        mask_ratio: 0.75,
        target_mode: TargetMode::RawPixelsNormalized,
        lowpass_cutoff: 0.5,
        mff,
    }
}

fn mff(layers: &[usize], projection: ProjectionKind, fusion: FusionKind, detach: bool) -> Option<MffConfig> {
    Some(MffConfig {
        layers: layers.to_vec(),
        projection,
        fusion,
        detach_shallow: detach,
    })
}

fn perturb(store: &mut ParamStore, s: f64, rng: &mut Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += s * rng.normal();
        }
    }
}

fn images(b: usize, cfg: &ModelConfig, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(&[b, cfg.channels, cfg.image_size, cfg.image_size], |_| rng.uniform())
}

#[test]
fn patchify_shapes_and_constant_rows() {
    let img = Tensor::full(&[1, 1, 8, 8], 0.3);
    let p = patchify(&img, 4).unwrap();
    assert_eq!(p.shape(), [1, 4, 16]);
    assert!(p.data().iter().all(|&v| v == 0.3));
}

#[test]
fn normalize_targets_examples() {
    let c = normalize_targets(&Tensor::full(&[1, 2, 5], 7.0));
    assert!(c.data().iter().all(|v| v.abs() < 1e-9));

    let two = normalize_targets(&Tensor::new([1, 1, 2], vec![0.0, 1.0]).unwrap());
    assert!((two.data()[0] + 1.0).abs() < 1e-3 && (two.data()[1] - 1.0).abs() < 1e-3);

    let mut rng = Rng::seed_from_u64(1);
    let t = normalize_targets(&random(&[3, 4, 12], &mut rng));
    for row in t.data().chunks(12) {
        let mean = row.iter().sum::<f64>() / 12.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn lowpass_examples() {
    let mut rng = Rng::seed_from_u64(2);
    let img = random(&[2, 3, 8, 8], &mut rng);
    let same = lowpass_targets(&img, 1.0).unwrap();
    for (a, b) in same.data().iter().zip(img.data()) {
        assert!((a - b).abs() < 1e-9);
    }

    let flat = Tensor::full(&[1, 1, 8, 8], 0.7);
    for cutoff in [0.05, 0.5, 1.0] {
        let out = lowpass_targets(&flat, cutoff).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-9));
    }

    // Horizontal frequency 3/8 cycles per pixel sits at radius 0.75/sqrt(2).
    let wave = Tensor::from_fn(&[1, 1, 8, 8], |i| {
        (2.0 * std::f64::consts::PI * 3.0 * (i % 8) as f64 / 8.0 + 0.4).sin()
    });
    let out = lowpass_targets(&wave, 0.5).unwrap();
    assert!(out.max_abs() < 1e-9, "{}", out.max_abs());
    let kept = lowpass_targets(&wave, 0.6).unwrap();
    assert!((kept.max_abs() - wave.max_abs()).abs() < 1e-9);

    assert!(lowpass_targets(&img, 0.0).is_err());
    assert!(lowpass_targets(&img, 1.5).is_err());
}

#[test]
fn mask_counts_and_determinism() {
    let plan = random_mask(196, 0.75, &mut Rng::seed_from_u64(3)).unwrap();
    assert_eq!((plan.visible.len(), plan.masked.len()), (49, 147));
    let again = random_mask(196, 0.75, &mut Rng::seed_from_u64(3)).unwrap();
    assert_eq!(plan, again);
    assert!(random_mask(10, 0.0, &mut Rng::seed_from_u64(3)).is_err());
    assert!(random_mask(10, 1.0, &mut Rng::seed_from_u64(3)).is_err());
}

#[test]
fn mask_partitions_exhaustively() {
    let mut rng = Rng::seed_from_u64(4);
    for n in 2..=256 {
        for ratio in [0.25, 0.5, 0.75] {
            let vis = visible_count(n, ratio);
            let expect = ((1.0 - ratio) * n as f64).ceil() as usize;
            assert_eq!(vis, expect);
            let res = random_mask(n, ratio, &mut rng);
            if vis == 0 || vis == n {
                assert!(res.is_err(), "n={n} ratio={ratio}");
                continue;
            }
            let plan = res.unwrap();
            let mut seen = vec![0u8; n];
            for &i in plan.visible.iter().chain(&plan.masked) {
                seen[i] += 1;
            }
            assert!(seen.iter().all(|&c| c == 1));
            let order: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
            for (j, &r) in plan.restore.iter().enumerate() {
                assert_eq!(order[r], j);
            }
        }
    }
}

#[test]
fn config_validation_names_keys() {
    let mut c = tiny(None);
    c.patch = 3;
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "model.patch"));
    let mut c = tiny(None);
    c.encoder.heads = 3;
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "model.encoder.heads"));
    let c = tiny(mff(&[0, 1], ProjectionKind::None, FusionKind::WeightedAverage, false));
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "model.mff.layers"));
    let c = tiny(mff(
        &[1, 0, 2],
        ProjectionKind::None,
        FusionKind::WeightedAverage,
        false,
    ));
    assert!(c.validate().is_err());
    let mut c = tiny(None);
    c.mask_ratio = 0.01;
    assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "model.mask_ratio"));
}

#[test]
fn default_layer_sets() {
    assert_eq!(MffConfig::default_layers(12), vec![0, 2, 4, 6, 8, 11]);
    assert_eq!(MffConfig::default_layers(6), vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(MffConfig::default_layers(4), vec![0, 1, 2, 3]);
    assert_eq!(MffConfig::default_layers(8), vec![0, 1, 3, 4, 6, 7]);
    assert_eq!(MffConfig::default_layers(1), vec![0]);
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn taps_are_pure_reads() {
    let mut rng = Rng::seed_from_u64(5);
    let cfg = tiny(None);
    let model = MimModel::new(cfg.clone(), &mut rng).unwrap();
    let img = images(2, &cfg, &mut rng);
    let mut g = Graph::new(&model.params);
    let x = g.constant(img.clone());
    let tokens = model.embed(&mut g, x).unwrap();
    let single = model.encode_with_taps(&mut g, tokens, &[2]).unwrap();
    let all = model.encode_with_taps(&mut g, tokens, &[0, 1, 2]).unwrap();
    assert_eq!(single.len(), 1);
    assert_eq!(g.value(single[0]), g.value(all[2]));
    for &t in &all {
        assert_eq!(g.shape(t), [2, 16, 8]);
    }
    let full = model.encode_full(&img, &[2]).unwrap();
    assert_eq!(&full[0], g.value(single[0]));
}

fn random_taps(g: &mut Graph, k: usize, rng: &mut Rng) -> Vec<Var> {
    (0..k).map(|_| g.variable(random(&[2, 3, 8], rng))).collect()
}

#[test]
fn single_tap_fusion_is_identity() {
    let mut rng = Rng::seed_from_u64(6);
    let cfg = tiny(mff(&[2], ProjectionKind::None, FusionKind::WeightedAverage, false));
    let model = MimModel::new(cfg, &mut rng).unwrap();
    let mut g = Graph::new(&model.params);
    let taps = random_taps(&mut g, 1, &mut rng);
    let (out, alpha) = model.fuse(&mut g, &taps).unwrap();
    assert_eq!(g.value(out), g.value(taps[0]));
    assert_eq!(g.value(alpha.unwrap()).data(), &[1.0]);
}

#[test]
fn fusion_convexity_examples() {
    let mut rng = Rng::seed_from_u64(7);
    let cfg = tiny(mff(&[0, 2], ProjectionKind::Linear, FusionKind::WeightedAverage, false));
    let mut model = MimModel::new(cfg, &mut rng).unwrap();

    let mut g = Graph::new(&model.params);
    let a = g.variable(random(&[2, 3, 8], &mut rng));
    let (out, _) = model.fuse(&mut g, &[a, a]).unwrap();
    assert_eq!(g.value(out), g.value(a));

    let Fusion::WeightedAverage { logits } = model.mff.as_ref().unwrap().fusion else {
        unreachable!()
    };
    model.params.get_mut(logits).data_mut()[0] = 3f64.ln();
    let mut g = Graph::new(&model.params);
    let taps = random_taps(&mut g, 2, &mut rng);
    let (out, _) = model.fuse(&mut g, &taps).unwrap();
    let (av, bv) = (g.value(taps[0]).data(), g.value(taps[1]).data());
    for ((o, x), y) in g.value(out).data().iter().zip(av).zip(bv) {
        assert!((o - (0.75 * x + 0.25 * y)).abs() < 1e-12);
        assert!(*o >= x.min(*y) - 1e-12 && *o <= x.max(*y) + 1e-12);
    }
}

#[test]
fn attention_fusion_starts_uniform() {
    let mut rng = Rng::seed_from_u64(8);
    let cfg = tiny(mff(&[0, 1, 2], ProjectionKind::Nonlinear, FusionKind::Attention, false));
    let model = MimModel::new(cfg, &mut rng).unwrap();
    let mut g = Graph::new(&model.params);
    let taps = random_taps(&mut g, 3, &mut rng);
    let (out, alpha) = model.fuse(&mut g, &taps).unwrap();
    assert_eq!(g.shape(out), [2, 3, 8]);
    let alpha = g.value(alpha.unwrap());
    assert_eq!(alpha.shape(), [2, 3, 3]);
    assert!(alpha.data().iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn identity_projections_pass_taps_at_init() {
    let mut rng = Rng::seed_from_u64(9);
    let cfg = tiny(mff(&[1, 2], ProjectionKind::Linear, FusionKind::WeightedAverage, false));
    let model = MimModel::new(cfg, &mut rng).unwrap();
    let Projection::Linear(p) = model.mff.as_ref().unwrap().projections[0] else {
        unreachable!()
    };
    let mut g = Graph::new(&model.params);
    let x = g.variable(random(&[2, 3, 8], &mut rng));
    let y = linear(&mut g, &p, x).unwrap();
    assert_eq!(g.value(x), g.value(y));
    assert_eq!(model.fusion_weights().unwrap(), vec![0.5, 0.5]);
}

/// Gradients of the full pipeline with the fusion branch reading either the
/// detached tap or a constant copy of it.
fn detach_grads(model: &MimModel, img: &Tensor, plans: &[MaskPlan], constant_copy: bool) -> Vec<Tensor> {
    let mut g = Graph::new(&model.params);
    let x = g.constant(img.clone());
    let tokens = model.embed(&mut g, x).unwrap();
    let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
    let tokens = g.gather_rows(tokens, &visible).unwrap();
    let mut taps = model.encode_with_taps(&mut g, tokens, &[0, 2]).unwrap();
    let mut cfg = model.config.mff.clone().unwrap();
    if constant_copy {
        let v = g.value(taps[0]).clone();
        taps[0] = g.constant(v);
        cfg.detach_shallow = false;
    }
    let (fused, _) = mff_fuse(&mut g, model.mff.as_ref().unwrap(), &cfg, &taps).unwrap();
    let pred = model.decode(&mut g, fused, plans).unwrap();
    let target = g.constant(model.targets(img, None).unwrap());
    let loss = mim_loss(&mut g, pred, target, plans).unwrap();
    let grads = g.backward(loss).unwrap();
    g.param_grads(&grads)
}

#[test]
fn detached_taps_match_constant_copy_oracle() {
    let mut rng = Rng::seed_from_u64(10);
    for projection in [ProjectionKind::None, ProjectionKind::Linear, ProjectionKind::Nonlinear] {
        let cfg = tiny(mff(&[0, 2], projection, FusionKind::WeightedAverage, true));
        let mut model = MimModel::new(cfg.clone(), &mut rng).unwrap();
        perturb(&mut model.params, 0.1, &mut rng);
        let img = images(2, &cfg, &mut rng);
        let plans = model.draw_plans(2, &mut rng).unwrap();
        let detached = detach_grads(&model, &img, &plans, false);
        let oracle = detach_grads(&model, &img, &plans, true);
        let layer0 = model.encoder.blocks[0].mlp.fc1.weight;
        assert!(detached[layer0.index()].max_abs() > 0.0);
        for (a, b) in detached.iter().zip(&oracle) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
            }
        }
    }
}

#[test]
fn decode_shape_and_permutation_oracle() {
    let mut rng = Rng::seed_from_u64(11);
    let cfg = tiny(None);
    let mut model = MimModel::new(cfg, &mut rng).unwrap();
    perturb(&mut model.params, 0.2, &mut rng);
    let plans = model.draw_plans(2, &mut rng).unwrap();
    let fused = random(&[2, 4, 8], &mut rng);

    let mut g = Graph::new(&model.params);
    let f = g.constant(fused.clone());
    let out = model.decode(&mut g, f, &plans).unwrap();
    assert_eq!(g.shape(out), [2, 16, 8]);
    let reference = g.value(out).clone();

    // Reverse the visible order of every sample and the token rows with it.
    let perm = [3, 2, 1, 0];
    let permuted_plans: Vec<MaskPlan> = plans
        .iter()
        .map(|p| {
            let mut order: Vec<usize> = perm.iter().map(|&i| p.visible[i]).collect();
            order.extend(&p.masked);
            MaskPlan::from_order(order, 4).unwrap()
        })
        .collect();
    let permuted = Tensor::from_fn(&[2, 4, 8], |i| {
        let (b, r, c) = (i / 32, (i / 8) % 4, i % 8);
        fused.data()[b * 32 + perm[r] * 8 + c]
    });
    let mut g = Graph::new(&model.params);
    let f = g.constant(permuted);
    let out = model.decode(&mut g, f, &permuted_plans).unwrap();
    for (a, b) in g.value(out).data().iter().zip(reference.data()) {
        assert!((a - b).abs() < 1e-12);
    }

    let mut g = Graph::new(&model.params);
    let f = g.constant(random(&[2, 5, 8], &mut rng));
    assert!(model.decode(&mut g, f, &plans).is_err());
}

#[test]
fn mim_loss_examples() {
    let store = ParamStore::new();
    let mut rng = Rng::seed_from_u64(12);
    let plans = vec![
        random_mask(6, 0.5, &mut rng).unwrap(),
        random_mask(6, 0.5, &mut rng).unwrap(),
    ];
    let target = random(&[2, 6, 3], &mut rng);

    let mut g = Graph::new(&store);
    let p = g.constant(target.clone());
    let t = g.constant(target.clone());
    let l = mim_loss(&mut g, p, t, &plans).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let pred = random(&[2, 6, 3], &mut rng);
    let base = {
        let p = g.constant(pred.clone());
        let l = mim_loss(&mut g, p, t, &plans).unwrap();
        g.value(l).item()
    };
    let mut bumped = pred.clone();
    for (b, plan) in plans.iter().enumerate() {
        for &v in &plan.visible {
            for c in 0..3 {
                bumped.data_mut()[(b * 6 + v) * 3 + c] += 100.0 * rng.normal();
            }
        }
    }
    let p = g.constant(bumped);
    let l = mim_loss(&mut g, p, t, &plans).unwrap();
    assert_eq!(g.value(l).item(), base);

    let one = vec![MaskPlan::from_order(vec![0, 1, 2, 3], 3).unwrap()];
    let mut g = Graph::new(&store);
    let p = g.constant(Tensor::ones(&[1, 4, 5]));
    let t = g.constant(Tensor::zeros(&[1, 4, 5]));
    let l = mim_loss(&mut g, p, t, &one).unwrap();
    assert_eq!(g.value(l).item(), 1.0);
}

#[test]
fn reduction_to_plain_autoencoder_forward() {
    let cfg = tiny(None);
    let reduced = tiny(mff(&[2], ProjectionKind::None, FusionKind::WeightedAverage, false));
    let plain = MimModel::new(cfg.clone(), &mut Rng::seed_from_u64(13)).unwrap();
    let fused = MimModel::new(reduced, &mut Rng::seed_from_u64(13)).unwrap();
    let img = images(3, &cfg, &mut Rng::seed_from_u64(14));

    let mut g1 = Graph::new(&plain.params);
    let a = plain
        .forward_train(&mut g1, &img, None, &mut Rng::seed_from_u64(15))
        .unwrap();
    let mut g2 = Graph::new(&fused.params);
    let b = fused
        .forward_train(&mut g2, &img, None, &mut Rng::seed_from_u64(15))
        .unwrap();
    assert_eq!(g1.value(a.loss).item(), g2.value(b.loss).item());
    assert_eq!(b.alpha, Some(vec![1.0]));

    let ga = g1.param_grads(&g1.backward(a.loss).unwrap());
    let gb = g2.param_grads(&g2.backward(b.loss).unwrap());
    assert_eq!(&gb[..ga.len()], &ga[..]);
    assert!(gb[ga.len()..].iter().all(|t| t.max_abs() == 0.0));
}

#[test]
fn target_modes_have_expected_shapes() {
    let mut rng = Rng::seed_from_u64(16);
    for mode in [
        TargetMode::RawPixels,
        TargetMode::RawPixelsNormalized,
        TargetMode::LowpassNormalized,
        TargetMode::FeatureRegression,
    ] {
        let mut cfg = tiny(mff(&[0, 2], ProjectionKind::Linear, FusionKind::WeightedAverage, false));
        cfg.target_mode = mode;
        let model = MimModel::new(cfg.clone(), &mut rng).unwrap();
        let teacher = MimModel::new(cfg.clone(), &mut rng).unwrap();
        let img = images(2, &cfg, &mut rng);
        let t = model.targets(&img, Some(&teacher)).unwrap();
        assert_eq!(t.shape(), [2, 16, cfg.target_dim()]);
        let mut g = Graph::new(&model.params);
        let fwd = model.forward_train(&mut g, &img, Some(&teacher), &mut rng).unwrap();
        assert!(g.value(fwd.loss).item().is_finite());
        let alpha = fwd.alpha.unwrap();
        assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let mut cfg = tiny(None);
    cfg.target_mode = TargetMode::FeatureRegression;
    let model = MimModel::new(cfg.clone(), &mut rng).unwrap();
    assert!(model.targets(&images(1, &cfg, &mut rng), None).is_err());
}

#[test]
fn fusion_decoder_and_loss_pass_gradient_checks() {
    let mut rng = Rng::seed_from_u64(17);
    for (projection, fusion) in [
        (ProjectionKind::None, FusionKind::WeightedAverage),
        (ProjectionKind::Linear, FusionKind::WeightedAverage),
        (ProjectionKind::Nonlinear, FusionKind::Attention),
    ] {
        let cfg = tiny(mff(&[0, 1, 2], projection, fusion, false));
        let mut model = MimModel::new(cfg, &mut rng).unwrap();
        perturb(&mut model.params, 0.3, &mut rng);
        let (p, c) = (model.mff.clone().unwrap(), model.config.mff.clone().unwrap());
        let x = random(&[3, 2, 3, 8], &mut rng);
        let err = param_grad_check(
            &model.params,
            &x,
            |g, v| {
                let taps: Vec<Var> = (0..3)
                    .map(|i| {
                        let s = g.slice(v, 0, i, i + 1)?;
                        g.reshape(s, &[2, 3, 8])
                    })
                    .collect::<Result<_>>()?;
                Ok(mff_fuse(g, &p, &c, &taps)?.0)
            },
            8,
        )
        .unwrap();
        assert!(err < 1e-5, "{projection:?} {fusion:?}: {err}");
    }

    let cfg = tiny(None);
    let mut model = MimModel::new(cfg, &mut rng).unwrap();
    perturb(&mut model.params, 0.3, &mut rng);
    let plans = model.draw_plans(2, &mut rng).unwrap();
    let x = random(&[2, 4, 8], &mut rng);
    let err = param_grad_check(&model.params, &x, |g, v| model.decode(g, v, &plans), 6).unwrap();
    assert!(err < 1e-5, "decode {err}");

    let target = random(&[2, 16, 8], &mut rng);
    let x = random(&[2, 16, 8], &mut rng);
    let store = ParamStore::new();
    let err = param_grad_check(
        &store,
        &x,
        |g, v| {
            let t = g.constant(target.clone());
            mim_loss(g, v, t, &plans)
        },
        64,
    )
    .unwrap();
    assert!(err < 1e-6, "loss {err}");
}
