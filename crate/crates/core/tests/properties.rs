use std::collections::HashSet;

use proptest::prelude::*;

use predquant::metrics::{local_cosine, local_mse, pd_cosine, pd_kl, pd_mse, Prediction};
use predquant::quant::{
    adaround_fake_quantize, fake_quant_scalar, fake_quantize, qmax_for, round_reg_term, rounding_regularizer, scale_gradient,
    QuantParams, Rectifier, RoundingMode, RoundingVars,
};
use predquant::scale_search::{argmin_prefer_last, normalize_column};
use predquant::Tensor;

fn params() -> impl Strategy<Value = QuantParams> {
    (2u32..=8, 1e-3f32..2.0, 0.0f32..1.0).prop_map(|(bits, s, zf)| {
        let z = (zf * qmax_for(bits)).floor() as i32;
        QuantParams::per_tensor(s, z, bits).unwrap()
    })
}

fn values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-50.0f32..50.0, 1..n)
}

fn logits(batch: usize, classes: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-6.0f32..6.0, batch * classes).prop_map(move |v| Tensor::new([batch, classes], v).unwrap())
}

proptest! {
    #[test]
    fn fake_quantize_is_idempotent(p in params(), x in values(200)) {
        let once = fake_quantize(&Tensor::from_slice(&x), &p).unwrap();
        let twice = fake_quantize(&once, &p).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn fake_quantize_has_at_most_two_pow_b_levels(p in params(), x in values(500)) {
        let q = fake_quantize(&Tensor::from_slice(&x), &p).unwrap();
        let levels: HashSet<u32> = q.data().iter().map(|v| v.to_bits()).collect();
        prop_assert!(levels.len() as f32 <= qmax_for(p.bits) + 1.0);
    }

    #[test]
    fn fake_quantize_is_monotone(p in params(), mut x in values(200), d in prop::collection::vec(0.0f32..5.0, 200)) {
        x.truncate(d.len());
        let y: Vec<f32> = x.iter().zip(&d).map(|(a, b)| a + b).collect();
        let qx = fake_quantize(&Tensor::from_slice(&x), &p).unwrap();
        let qy = fake_quantize(&Tensor::from_slice(&y), &p).unwrap();
        for (a, b) in qx.data().iter().zip(qy.data()) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn fake_quantize_matches_scalar_formula(p in params(), x in values(100)) {
        let q = fake_quantize(&Tensor::from_slice(&x), &p).unwrap();
        for (&xv, &qv) in x.iter().zip(q.data()) {
            let r = fake_quant_scalar(xv, p.scale(), p.zero_point(), 0.0, qmax_for(p.bits));
            prop_assert_eq!(qv.to_bits(), r.to_bits());
        }
    }

    #[test]
    fn scale_gradient_follows_three_branches(p in params(), x in values(100), g in -2.0f32..2.0) {
        let xt = Tensor::from_slice(&x);
        let up = Tensor::full(xt.shape().to_vec(), g);
        let (s, z, qmax) = (p.scale(), p.zero_point(), qmax_for(p.bits));
        let expect: f32 = x
            .iter()
            .map(|&v| {
                let t = v / s;
                let branch = if t + z >= qmax {
                    qmax - z
                } else if t + z <= 0.0 {
                    -z
                } else {
                    t.round() - t
                };
                g * branch
            })
            .sum();
        prop_assert_eq!(scale_gradient(&xt, &p, &up).unwrap(), expect);
    }

    #[test]
    fn regularizer_is_nonnegative_and_falls_toward_saturation(theta in prop::collection::vec(-8.0f32..8.0, 1..50), beta in 1.5f32..20.0) {
        let r = RoundingVars { theta: Tensor::from_slice(&theta), beta, rect: Rectifier::default() };
        prop_assert!(rounding_regularizer(&r) >= 0.0);
        let rect = Rectifier::default();
        for &t in &theta {
            let h = rect.h(t);
            if h > 0.0 && h < 1.0 && (h - 0.5).abs() > 1e-3 {
                // Push h a step further from 1/2.
                let pushed = rect.theta_for(if h > 0.5 { (h + 1.0) / 2.0 } else { h / 2.0 });
                prop_assert!(round_reg_term(pushed, beta, rect).0 < round_reg_term(t, beta, rect).0);
            }
        }
    }

    #[test]
    fn hard_equals_soft_when_saturated(w in prop::collection::vec(-3.0f32..3.0, 1..60), ups in prop::collection::vec(any::<bool>(), 60), p in params()) {
        let n = w.len();
        let theta: Vec<f32> = ups[..n].iter().map(|&u| if u { 12.0 } else { -12.0 }).collect();
        let r = RoundingVars { theta: Tensor::from_slice(&theta), beta: 2.0, rect: Rectifier::default() };
        prop_assert_eq!(r.saturated_fraction(0.999), 1.0);
        let wt = Tensor::from_slice(&w);
        let soft = adaround_fake_quantize(&wt, &p, &r, RoundingMode::Soft).unwrap();
        let hard = adaround_fake_quantize(&wt, &p, &r, RoundingMode::Hard).unwrap();
        prop_assert_eq!(soft, hard);
    }

    #[test]
    fn metrics_are_nonnegative_and_zero_on_identity(a in logits(4, 5), b in logits(4, 5), t in 0.5f32..4.0) {
        prop_assert!(local_mse(&a, &b).unwrap() >= 0.0);
        prop_assert!(local_cosine(&a, &b).unwrap() >= 0.0);
        prop_assert_eq!(local_mse(&a, &a).unwrap(), 0.0);
        let pa = Prediction::from_logits(a.clone(), t).unwrap();
        let pb = Prediction::from_logits(b, t).unwrap();
        prop_assert!(pd_kl(&pa, &pb).unwrap() >= 0.0);
        prop_assert!(pd_mse(&pa, &pb).unwrap() >= 0.0);
        prop_assert!(pd_cosine(&pa, &pb).unwrap() >= 0.0);
        prop_assert_eq!(pd_kl(&pa, &pa).unwrap(), 0.0);
        prop_assert_eq!(pd_mse(&pa, &pa).unwrap(), 0.0);
        // Repeated evaluation is bit-identical.
        prop_assert_eq!(pd_kl(&pa, &pb).unwrap().to_bits(), pd_kl(&pa, &pb).unwrap().to_bits());
    }

    #[test]
    fn normalized_column_has_unit_minimum(v in prop::collection::vec(0.0f32..100.0, 1..64)) {
        let n = normalize_column(&v);
        let i = argmin_prefer_last(&v).unwrap();
        prop_assert_eq!(n[i], 1.0);
        prop_assert!(n.iter().all(|&x| x >= 1.0));
    }
}
