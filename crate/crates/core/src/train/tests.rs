use super::*;
use crate::attention::attention_map;
use crate::data::{generate, SyntheticSpec};
use crate::model::{ConvLayer, EncoderConfig};

fn tiny_data(classes: usize, per: usize) -> Dataset {
    generate(
        &SyntheticSpec {
            classes,
            height: 16,
            width: 16,
            glyph_size: 6,
            blob_size: 3,
            clutter_blobs: 2,
            seed: 4,
            ..SyntheticSpec::default()
        },
        per,
    )
    .unwrap()
}

fn tiny_encoder(seed: u64) -> Encoder {
    Encoder::new(
        EncoderConfig {
            input_shape: [1, 16, 16],
            layers: vec![ConvLayer::block(4), ConvLayer::block(6)],
            attention_layer: 1,
            embedding_dim: 6,
            bounded_embedding: true,
        },
        seed,
    )
    .unwrap()
}

fn tiny_cfg(arch: Architecture) -> TrainConfig {
    TrainConfig {
        attention_layer: 1,
        batch_size: 4,
        val_per_class: 2,
        ..TrainConfig::new(arch)
    }
}

fn params_bits(enc: &Encoder) -> Vec<u64> {
    enc.parameters().iter().flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits())).collect()
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let data = tiny_data(3, 4);
    for arch in Architecture::all() {
        let mut enc = tiny_encoder(1);
        let before = params_bits(&enc);
        let cfg = TrainConfig { lr: 0.0, ..tiny_cfg(arch) };
        let mut opt = OptimizerState::new(cfg.optimizer, &enc);
        let batch = sample_tuples(&data, arch, 4, 3).unwrap();
        train_step(&mut enc, &data, &batch, &cfg, &mut opt).unwrap();
        assert_eq!(params_bits(&enc), before, "{arch}");
    }
}

#[test]
fn gamma_zero_matches_metric_only_step() {
    let data = tiny_data(3, 4);
    for arch in Architecture::all() {
        let cfg = TrainConfig { gamma: 0.0, ..tiny_cfg(arch) };
        let mut a = tiny_encoder(2);
        let mut b = tiny_encoder(2);
        let mut oa = OptimizerState::new(cfg.optimizer, &a);
        let mut ob = OptimizerState::new(cfg.optimizer, &b);
        for step in 0..3 {
            let batch = sample_tuples(&data, arch, 4, step).unwrap();
            let la = train_step(&mut a, &data, &batch, &cfg, &mut oa).unwrap();
            let lb = metric_only_step(&mut b, &data, &batch, &cfg, &mut ob).unwrap();
            assert_eq!(la.loss_ml.to_bits(), lb.loss_ml.to_bits());
        }
        assert_eq!(params_bits(&a), params_bits(&b), "{arch}");
    }
}

#[test]
fn total_gradient_is_additive() {
    let data = tiny_data(3, 4);
    for arch in Architecture::all() {
        let cfg = TrainConfig { gamma: 0.35, ..tiny_cfg(arch) };
        let enc = tiny_encoder(5);
        let batch = sample_tuples(&data, arch, 4, 8).unwrap();
        let (lt, total) = batch_gradients(&enc, &data, &batch, &cfg, Objective::Total).unwrap();
        let (lm, ml) = batch_gradients(&enc, &data, &batch, &cfg, Objective::MetricOnly).unwrap();
        let (ls, sm) = batch_gradients(&enc, &data, &batch, &cfg, Objective::MiningOnly).unwrap();
        assert_eq!(lt.loss_ml, lm.loss_ml);
        assert_eq!(lt.loss_sm, ls.loss_sm);
        let mut worst: f64 = 0.0;
        for ((t, m), s) in total.iter().zip(&ml).zip(&sm) {
            for ((t, m), s) in t.iter().zip(m).zip(s) {
                worst = worst.max((t - (m + cfg.gamma * s)).abs());
            }
        }
        assert!(worst < 1e-9, "{arch}: {worst}");
        assert!(sm.iter().flatten().any(|&x| x != 0.0), "{arch}: mining gradient vanished");
    }
}

#[test]
fn detaching_w_keeps_map_values() {
    let data = tiny_data(3, 3);
    let enc = tiny_encoder(7);
    let images: Vec<Tensor> = [0usize, 1, 4].iter().map(|&i| data.samples[i].image.clone()).collect();
    let maps = |detach: bool| {
        let g = Graph::new();
        let b = enc.bind(&g, true);
        let att = attend(&b, &images, WeightArch::Triplet, detach, true).unwrap();
        att.maps.iter().map(|m| m.map.to_vec()).collect::<Vec<_>>()
    };
    let (a, b) = (maps(true), maps(false));
    for (x, y) in a.iter().zip(&b) {
        for (p, q) in x.iter().zip(y) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }
    // the map itself is the same function of A either way
    let g = Graph::new();
    let bound = enc.bind(&g, false);
    let e = bound.encode(&images[0]).unwrap();
    let s = g.sum(&e.embedding).unwrap();
    assert!(attention_map(&g, &s, &e.feature_map, false).is_ok());
}

#[test]
fn overfits_a_fixed_batch() {
    let data = tiny_data(3, 3);
    let mut enc = tiny_encoder(3);
    let cfg = TrainConfig {
        lr: 1e-2,
        ..tiny_cfg(Architecture::Triplet)
    };
    let batch = sample_tuples(&data, Architecture::Triplet, 4, 1).unwrap();
    let mut opt = OptimizerState::new(cfg.optimizer, &enc);
    let first = train_step(&mut enc, &data, &batch, &cfg, &mut opt).unwrap();
    let mut last = first;
    for _ in 1..50 {
        last = train_step(&mut enc, &data, &batch, &cfg, &mut opt).unwrap();
    }
    assert!(first.loss_ml > 0.0);
    assert!(last.loss_ml < 0.1 * first.loss_ml, "{} -> {}", first.loss_ml, last.loss_ml);
}

#[test]
fn fit_is_deterministic() {
    let data = tiny_data(3, 5);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 9,
        ..tiny_cfg(Architecture::Quadruplet)
    };
    let run = || {
        let mut enc = tiny_encoder(cfg.seed);
        let mut seen = Vec::new();
        let log = fit(&mut enc, &data, &cfg, &mut |r, _| {
            seen.push(r.to_string());
            Ok(())
        })
        .unwrap();
        (log, seen, params_bits(&enc))
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.0.records.len(), 2);
    assert!(a.1[0].starts_with("epoch=1 loss_ml="));
}

#[test]
fn zero_epochs_leave_encoder_untouched() {
    let data = tiny_data(3, 5);
    let mut enc = tiny_encoder(1);
    let before = params_bits(&enc);
    let cfg = TrainConfig {
        epochs: 0,
        ..tiny_cfg(Architecture::Siamese)
    };
    let log = fit(&mut enc, &data, &cfg, &mut |_, _| Ok(())).unwrap();
    assert!(log.records.is_empty());
    assert_eq!(params_bits(&enc), before);
}

#[test]
fn config_errors() {
    let data = tiny_data(3, 4);
    let mut enc = tiny_encoder(1);
    let bad = [
        TrainConfig { gamma: -0.1, ..tiny_cfg(Architecture::Triplet) },
        TrainConfig { lr: f64::NAN, ..tiny_cfg(Architecture::Triplet) },
        TrainConfig { batch_size: 0, ..tiny_cfg(Architecture::Triplet) },
        TrainConfig { attention_layer: 0, ..tiny_cfg(Architecture::Triplet) },
        TrainConfig {
            metric: MetricLossConfig::new(MetricLossKind::Contrastive),
            ..tiny_cfg(Architecture::Triplet)
        },
    ];
    for cfg in bad {
        assert!(fit(&mut enc, &data, &cfg, &mut |_, _| Ok(())).is_err());
    }
    let cfg = tiny_cfg(Architecture::Triplet);
    let batch = sample_tuples(&data, Architecture::Siamese, 2, 0).unwrap();
    let mut opt = OptimizerState::new(cfg.optimizer, &enc);
    assert!(train_step(&mut enc, &data, &batch, &cfg, &mut opt).is_err());
}

#[test]
fn sgd_moves_against_the_gradient() {
    let data = tiny_data(3, 4);
    let enc0 = tiny_encoder(6);
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        lr: 0.5,
        ..tiny_cfg(Architecture::Triplet)
    };
    let batch = sample_tuples(&data, Architecture::Triplet, 4, 2).unwrap();
    let (_, grads) = batch_gradients(&enc0, &data, &batch, &cfg, Objective::Total).unwrap();
    let mut enc = enc0.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, &enc);
    train_step(&mut enc, &data, &batch, &cfg, &mut opt).unwrap();
    for ((p0, p1), g) in enc0.parameters().iter().zip(enc.parameters()).zip(&grads) {
        for ((a, b), g) in p0.1.data().iter().zip(p1.1.data()).zip(g) {
            assert_eq!(*b, a - 0.5 * g);
        }
    }
}

#[test]
fn batch_seeds_differ() {
    let mut seen = std::collections::HashSet::new();
    for e in 0..20 {
        for s in 0..30 {
            assert!(seen.insert(batch_seed(1, e, s)));
        }
    }
}
