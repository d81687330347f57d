use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{grad_check, GradCheckOptions, Mode};

fn small_cfg(kind: TemporalKind) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        temporal_kind: kind,
        seed: 3,
        ..Default::default()
    }
}

fn random_features(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn eval_positions(model: &Model, feats: &Tensor) -> Vec<f64> {
    let mut g = Graph::new(Mode::Eval, 0);
    let out = forward_with(&mut g, &Binder::new(&model.params), &model.config, feats).unwrap();
    g.forward(out.positions).unwrap().to_vec()
}

#[test]
fn stage_shapes() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone(), 16, 10).unwrap();
    let p = Binder::new(&model.params);
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(random_features(&[8, 10, 16], 1));
    let e = embed(&mut g, &p, &cfg, x).unwrap();
    assert_eq!(g.shape(e), &[8, 10, 32]);
    let t = temporal_encode(&mut g, &p, &cfg, e).unwrap();
    assert_eq!(g.shape(t), &[8, 32]);
    let t3 = g.reshape(t, &[1, 8, 32]).unwrap();
    let c = cross_encode(&mut g, &p, &cfg, t3).unwrap();
    assert_eq!(g.shape(c), &[1, 8, 32]);

    let mut g = Graph::new(Mode::Eval, 0);
    let out = forward_with(&mut g, &p, &cfg, &random_features(&[22, 5, 10, 16], 2)).unwrap();
    assert_eq!(g.shape(out.positions), &[22, 5]);
    let pos = g.forward(out.positions).unwrap();
    for row in pos.chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }
}

#[test]
fn feature_count_mismatch_is_rejected() {
    let model = Model::new(small_cfg(TemporalKind::Mixer), 4, 3).unwrap();
    let mut g = Graph::new(Mode::Eval, 0);
    let res = forward_with(&mut g, &Binder::new(&model.params), &model.config, &random_features(&[2, 3, 3, 5], 0));
    assert!(matches!(res, Err(StageError::Config(_))));
}

#[test]
fn identical_rows_embed_identically_and_zero_input_ignores_first_layer() {
    let cfg = small_cfg(TemporalKind::Mixer);
    let model = Model::new(cfg.clone(), 4, 3).unwrap();
    let mut feats = random_features(&[2, 3, 4], 5);
    let row: Vec<f64> = feats.data()[..12].to_vec();
    feats.data_mut()[12..].copy_from_slice(&row);
    let mut g = Graph::new(Mode::Eval, 0);
    let x = g.constant(feats);
    let e = embed(&mut g, &Binder::new(&model.params), &cfg, x).unwrap();
    let v = g.forward(e).unwrap();
    assert_eq!(v[..24], v[24..]);

    let run = |params: &ParamStore| {
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.constant(Tensor::zeros(&[1, 3, 4]));
        let e = embed(&mut g, &Binder::new(params), &cfg, x).unwrap();
        g.forward(e).unwrap().to_vec()
    };
    let mut other = model.params.clone();
    for v in other.get_mut("embed.l1.w").unwrap().data_mut() {
        *v *= -3.0;
    }
    assert_eq!(run(&model.params), run(&other));
}

#[test]
fn positions_are_permutation_equivariant() {
    for kind in [TemporalKind::Mixer, TemporalKind::Lstm] {
        let model = Model::new(small_cfg(kind), 4, 3).unwrap();
        let feats = random_features(&[3, 5, 3, 4], 9);
        let perm = [3, 0, 4, 1, 2];
        let base = eval_positions(&model, &feats);
        let mut permuted = Vec::new();
        for d in 0..3 {
            for &p in &perm {
                let s = (d * 5 + p) * 12;
                permuted.extend_from_slice(&feats.data()[s..s + 12]);
            }
        }
        let got = eval_positions(&model, &Tensor::new(vec![3, 5, 3, 4], permuted).unwrap());
        for d in 0..3 {
            for (j, &p) in perm.iter().enumerate() {
                assert!((got[d * 5 + j] - base[d * 5 + p]).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn temporal_stage_is_stock_local() {
    for kind in [TemporalKind::Mixer, TemporalKind::Lstm] {
        let cfg = small_cfg(kind);
        let model = Model::new(cfg.clone(), 4, 3).unwrap();
        let temporal = |feats: Tensor| {
            let mut g = Graph::new(Mode::Eval, 0);
            let out = forward_with(&mut g, &Binder::new(&model.params), &cfg, &feats).unwrap();
            g.forward(out.temporal).unwrap().to_vec()
        };
        let feats = random_features(&[2, 4, 3, 4], 1);
        let mut changed = feats.clone();
        // instrument 2 on both days
        for d in 0..2 {
            let s = (d * 4 + 2) * 12;
            for v in &mut changed.data_mut()[s..s + 12] {
                *v += 0.7;
            }
        }
        let (a, b) = (temporal(feats), temporal(changed));
        for d in 0..2 {
            for i in 0..4 {
                let r = (d * 4 + i) * 8..(d * 4 + i + 1) * 8;
                if i == 2 {
                    assert_ne!(a[r.clone()], b[r]);
                } else {
                    assert_eq!(a[r.clone()], b[r]);
                }
            }
        }
    }
}

#[test]
fn single_instrument_takes_everything() {
    let model = Model::new(small_cfg(TemporalKind::Mixer), 4, 3).unwrap();
    let pos = eval_positions(&model, &random_features(&[4, 1, 3, 4], 2));
    assert_eq!(pos, vec![1.0; 4]);
}

#[test]
fn identical_instruments_get_uniform_weights() {
    let model = Model::new(small_cfg(TemporalKind::Mixer), 4, 3).unwrap();
    let one = random_features(&[1, 1, 3, 4], 4);
    let mut data = Vec::new();
    for _ in 0..6 {
        data.extend_from_slice(one.data());
    }
    let pos = eval_positions(&model, &Tensor::new(vec![1, 6, 3, 4], data).unwrap());
    for w in pos {
        assert!((w - 1.0 / 6.0).abs() < 1e-12);
    }
}

#[test]
fn forward_is_reproducible_in_both_modes() {
    let model = Model::new(small_cfg(TemporalKind::Mixer), 4, 3).unwrap();
    let feats = random_features(&[3, 4, 3, 4], 8);
    let run = |mode, seed| {
        let mut g = Graph::new(mode, seed);
        let out = forward_with(&mut g, &Binder::new(&model.params), &model.config, &feats).unwrap();
        g.forward(out.positions).unwrap().to_vec()
    };
    assert_eq!(run(Mode::Eval, 0), run(Mode::Eval, 0));
    assert_eq!(run(Mode::Train, 4), run(Mode::Train, 4));
    assert_ne!(run(Mode::Train, 4), run(Mode::Train, 5));
}

#[test]
fn every_parameter_receives_gradient() {
    for kind in [TemporalKind::Mixer, TemporalKind::Lstm] {
        let model = Model::new(small_cfg(kind), 4, 3).unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let out = forward_with(&mut g, &Binder::new(&model.params), &model.config, &random_features(&[3, 5, 3, 4], 3)).unwrap();
        let r = g.constant(random_features(&[3, 5], 4));
        let pr = g.mul(out.positions, r).unwrap();
        let loss = g.sum_all(pr).unwrap();
        g.forward(loss).unwrap();
        let grads = g.grad_backward(loss, &model.params).unwrap();
        for (name, t) in grads.iter() {
            assert!(t.l2_norm_sq() > 0.0, "{kind:?}: no gradient reaches {name}");
        }
    }
}

#[test]
fn full_model_passes_grad_check() {
    let cfg = ModelConfig {
        d_model: 4,
        n_heads: 2,
        temporal_layers: 2,
        seed: 1,
        ..Default::default()
    };
    let model = Model::new(cfg.clone(), 3, 3).unwrap();
    let feats = random_features(&[2, 3, 3, 3], 6);
    let weights = random_features(&[2, 3], 7);
    let report = grad_check::<_, StageError>(
        |p| {
            let mut g = Graph::new(Mode::Train, 11);
            let out = forward_with(&mut g, &Binder::new(p), &cfg, &feats)?;
            let w = g.constant(weights.clone());
            let pr = g.mul(out.positions, w)?;
            let loss = g.sum_all(pr)?;
            Ok((g, loss))
        },
        &model.params,
        GradCheckOptions::five_point(),
    )
    .unwrap();
    assert!(report.passed, "{:?}", report.failures().collect::<Vec<_>>());
}

#[test]
fn frozen_parameters_become_constants() {
    let cfg = small_cfg(TemporalKind::Mixer);
    let model = Model::new(cfg.clone(), 4, 3).unwrap();
    let mut trainable = ParamStore::new(0);
    let mut frozen = ParamStore::new(0);
    for (name, t) in model.params.iter() {
        let dst = if name.starts_with("sizer.") { &mut trainable } else { &mut frozen };
        dst.insert(name, t.clone()).unwrap();
    }
    let mut g = Graph::new(Mode::Eval, 0);
    let out = forward_with(&mut g, &Binder::with_frozen(&trainable, &frozen), &cfg, &random_features(&[2, 3, 3, 4], 1)).unwrap();
    let loss = g.sum_all(out.scores).unwrap();
    let split = g.forward(loss).unwrap()[0];
    let grads = g.grad_backward(loss, &trainable).unwrap();
    assert!(grads.iter().all(|(n, _)| n.starts_with("sizer.")));
    assert!(grads.global_norm() > 0.0);

    let mut g = Graph::new(Mode::Eval, 0);
    let out = forward_with(&mut g, &Binder::new(&model.params), &cfg, &random_features(&[2, 3, 3, 4], 1)).unwrap();
    let loss = g.sum_all(out.scores).unwrap();
    assert_eq!(g.forward(loss).unwrap()[0], split);
}

#[test]
fn checkpoint_round_trips_at_storage_precision() {
    let model = Model::new(small_cfg(TemporalKind::Lstm), 4, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let meta = CheckpointMeta {
        model: model.config.clone(),
        n_features: 4,
        lookback: 3,
        seed: 0,
        epoch: 2.5,
        extra: serde_json::json!({"regime": "end_to_end"}),
        tensors: Vec::new(),
    };
    save_checkpoint(dir.path(), &meta, &model.params).unwrap();
    let (back, params) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.epoch, 2.5);
    assert_eq!(back.model, model.config);
    assert_eq!(params.len(), model.params.len());
    for (name, t) in model.params.iter() {
        let stored: Vec<f64> = t.data().iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(params.get(name).unwrap().data(), &stored[..]);
    }
    // a second save of the loaded parameters is byte-identical
    let dir2 = tempfile::tempdir().unwrap();
    save_checkpoint(dir2.path(), &back, &params).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("params.bin")).unwrap(),
        std::fs::read(dir2.path().join("params.bin")).unwrap()
    );
}

