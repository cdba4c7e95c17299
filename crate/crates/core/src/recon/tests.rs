use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::tests::toy_cnn;
use crate::model::{Block, Layer};

fn calib(n: usize, seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn([n, 1, 6, 6], 1.0, &mut r)
}

fn quick(bits: u32) -> ReconConfig {
    ReconConfig {
        weight_bits: bits,
        act_bits: bits,
        iterations: 40,
        batch_size: 8,
        grid_points: 16,
        log_every: 10,
        ..Default::default()
    }
}

fn rel_err(a: &Tensor, b: &Tensor) -> f32 {
    let num: f32 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f32 = b.data().iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn eight_bit_linear_block_matches_fp() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let graph = ModelGraph::new(
        vec![],
        vec![Block::new(vec![Layer::Linear {
            weight: Tensor::randn([4, 6], 0.5, &mut r),
            bias: Some(Tensor::randn([4], 0.1, &mut r)),
        }])],
        vec![],
        vec![6],
        4,
    )
    .unwrap();
    let x = Tensor::randn([64, 6], 1.0, &mut r);
    let fp = graph.forward_logits(&x).unwrap();
    // With independent inputs the output error is sum_j e_j^2, so nearest
    // rounding is already optimal and min-max 8-bit weights leave about
    // range / (255 * sqrt(12) * std) relative error. 8-bit inputs add
    // about S / sqrt(12) on top.
    for (act_bits, tol) in [(32, 5e-3), (8, 1e-2)] {
        let cfg = ReconConfig {
            bit_policy: BitPolicy::Uniform,
            act_bits,
            iterations: 500,
            lr_round: 1e-2,
            ..quick(8)
        };
        let (init, _) = quantize_model(&graph, &x, &cfg, ReconOptions::NONE, 0).unwrap();
        let reg = ReconOptions {
            use_drop: false,
            ..ReconOptions::REG_ONLY
        };
        let (qm, rep) = quantize_model(&graph, &x, &cfg, reg, 0).unwrap();
        assert_eq!(rep.blocks.len(), 1);
        let e = rel_err(&qm.forward_logits(&x).unwrap(), &fp);
        let e0 = rel_err(&init.forward_logits(&x).unwrap(), &fp);
        assert!(e < tol && e <= e0 * 1.001, "A{act_bits}: rel err {e} (nearest {e0})");
    }
}

#[test]
fn passthrough_bits_leave_model_unchanged() {
    let graph = toy_cnn(1);
    let x = calib(16, 2);
    let cfg = ReconConfig {
        bit_policy: BitPolicy::Uniform,
        ..quick(32)
    };
    let (qm, _) = quantize_model(&graph, &x, &cfg, ReconOptions::PD_REG, 5).unwrap();
    assert_eq!(qm.forward_logits(&x).unwrap(), graph.forward_logits(&x).unwrap());
}

#[test]
fn same_seed_same_result() {
    let graph = toy_cnn(4);
    let x = calib(24, 5);
    let cfg = quick(4);
    let (a, ra) = quantize_model(&graph, &x, &cfg, ReconOptions::FULL, 11).unwrap();
    let (b, rb) = quantize_model(&graph, &x, &cfg, ReconOptions::FULL, 11).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.blocks.len(), 2);
    assert_eq!(ra.dc.len(), 2);
}

#[test]
fn spilled_caches_give_identical_result() {
    let graph = toy_cnn(4);
    let x = calib(24, 5);
    let cfg = quick(4);
    let dir = tempfile::tempdir().unwrap();
    let spill = ReconConfig {
        memory_budget_bytes: 0,
        cache_dir: Some(dir.path().to_path_buf()),
        ..cfg.clone()
    };
    let (a, ra) = quantize_model(&graph, &x, &cfg, ReconOptions::PD_REG, 2).unwrap();
    let (b, rb) = quantize_model(&graph, &x, &spill, ReconOptions::PD_REG, 2).unwrap();
    assert_eq!(ra.spilled_caches, 0);
    assert!(rb.spilled_caches > 0);
    assert_eq!(a, b);
}

#[test]
fn all_options_off_is_init_only() {
    let graph = toy_cnn(6);
    let x = calib(16, 7);
    let (qm, rep) = quantize_model(&graph, &x, &quick(4), ReconOptions::NONE, 0).unwrap();
    assert!(rep.blocks.is_empty());
    assert!(qm.layers.values().all(|l| l.mask.is_none()));
    assert_eq!(qm.layers.len(), graph.parametric_layers().len());
}

#[test]
fn reconstruction_reduces_pd_loss() {
    let graph = toy_cnn(8);
    let x = calib(32, 9);
    let cfg = ReconConfig {
        iterations: 200,
        lr_round: 1e-2,
        ..quick(3)
    };
    let fp = graph.forward_fp(&x).unwrap();
    let (init, _) = quantize_model(&graph, &x, &cfg, ReconOptions::NONE, 0).unwrap();
    let (rec, rep) = quantize_model(&graph, &x, &cfg, ReconOptions::PD_ONLY, 0).unwrap();
    let kl = |m: &QuantizedModel| crate::metrics::pd_kl(&fp, &m.forward(&x).unwrap()).unwrap();
    assert!(kl(&rec) < kl(&init), "{} vs {}", kl(&rec), kl(&init));
    for b in &rep.blocks {
        assert!(b.log.iter().all(|e| e.pd.is_some() && e.reg.is_none()));
    }
}

#[test]
fn dc_without_batch_norm_is_rejected() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let graph = ModelGraph::new(
        vec![],
        vec![Block::new(vec![Layer::Linear {
            weight: Tensor::randn([2, 3], 0.5, &mut r),
            bias: None,
        }])],
        vec![],
        vec![3],
        2,
    )
    .unwrap();
    let x = Tensor::randn([8, 3], 1.0, &mut r);
    let err = quantize_model(&graph, &x, &quick(4), ReconOptions::FULL, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn bit_policy_keeps_edges_at_eight_bits() {
    let graph = toy_cnn(1);
    let cfg = quick(2);
    let bits = cfg.layer_bits(&graph);
    let n = bits.len();
    assert_eq!((bits[0].1, bits[0].2), (8, 8));
    assert_eq!((bits[n - 1].1, bits[n - 1].2), (8, 8));
    assert!(bits[1..n - 1].iter().all(|b| (b.1, b.2) == (2, 2)));
    let alt = ReconConfig {
        bit_policy: BitPolicy::FirstLastOutput8,
        ..cfg.clone()
    }
    .layer_bits(&graph);
    assert_eq!((alt[1].1, alt[1].2), (2, 8));
    let uni = ReconConfig {
        bit_policy: BitPolicy::Uniform,
        ..cfg
    }
    .layer_bits(&graph);
    assert!(uni.iter().all(|b| (b.1, b.2) == (2, 2)));
}

#[test]
fn lambda_r_defaults_follow_skip_connections() {
    let cfg = ReconConfig::default();
    assert_eq!(cfg.lambda_r_for(&toy_cnn(1)), 0.2);
    let mut plain = toy_cnn(1);
    plain.blocks.pop();
    plain.head.clear();
    assert_eq!(cfg.lambda_r_for(&plain), 0.1);
}

#[test]
fn drop_mix_extremes_and_rate() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let q = Tensor::zeros([100, 100]);
    let f = Tensor::ones([100, 100]);
    assert_eq!(random_drop_mix(&q, &f, 0.0, &mut r).unwrap(), q);
    assert_eq!(random_drop_mix(&q, &f, 1.0, &mut r).unwrap(), f);
    let m = random_drop_mix(&q, &f, 0.5, &mut r).unwrap();
    let frac = m.sum() / 10_000.0;
    // 4 standard deviations of a Binomial(10000, 0.5) proportion.
    assert!((frac - 0.5).abs() < 0.02, "{frac}");
    assert!(random_drop_mix(&q, &f, 1.5, &mut r).is_err());
}

#[test]
fn config_validation() {
    assert!(ReconConfig::default().validate().is_ok());
    let bad = [
        ReconConfig { drop_prob: 1.5, ..Default::default() },
        ReconConfig { iterations: 0, ..Default::default() },
        ReconConfig { weight_bits: 1, ..Default::default() },
        ReconConfig { temperature: 0.0, ..Default::default() },
        ReconConfig { lambda_r: Some(-1.0), ..Default::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
    let parsed: ReconConfig = toml::from_str("weight_bits = 4\n[dc]\nlambda_c = 0.5\n").unwrap();
    assert_eq!(parsed.weight_bits, 4);
    assert_eq!(parsed.dc.lambda_c, 0.5);
    assert_eq!(parsed.act_bits, 2);
}

#[test]
fn smoothed_increase_detects_rise() {
    let falling: Vec<f32> = (0..400).map(|i| 10.0 - i as f32 * 0.01).collect();
    assert!(!smoothed_increase(&falling, 50));
    let mut rising = falling.clone();
    rising.extend((0..200).map(|i| 6.0 + i as f32 * 0.05));
    assert!(smoothed_increase(&rising, 50));
}
