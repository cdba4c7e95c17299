//! Local (activation) and global (prediction) distance metrics.
//!
//! Every metric is non-negative, zero on identical inputs, and a pure
//! function of its arguments.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::softmax_row;
use crate::tensor::Tensor;

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f32 = 1e-12;

/// Logits together with their tempered softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub probs: Tensor,
    pub temperature: f32,
}

impl Prediction {
    pub fn from_logits(logits: Tensor, temperature: f32) -> Result<Self> {
        if logits.ndim() != 2 {
            return Err(Error::InvalidArgument(format!("logits must be [batch, classes], got {:?}", logits.shape())));
        }
        if temperature <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
        }
        logits.ensure_finite("prediction")?;
        let classes = logits.shape()[1];
        let mut probs = Tensor::zeros(logits.shape().to_vec());
        for (src, dst) in logits.data().chunks(classes).zip(probs.data_mut().chunks_mut(classes)) {
            softmax_row(src, temperature, dst);
        }
        Ok(Self {
            logits,
            probs,
            temperature,
        })
    }

    pub fn batch(&self) -> usize {
        self.logits.rows()
    }

    pub fn classes(&self) -> usize {
        self.logits.row_len()
    }

    /// Predicted class per sample; ties go to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.logits
            .data()
            .chunks(self.classes())
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                    .0
            })
            .collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            logits: self.logits.select_rows(idx)?,
            probs: self.probs.select_rows(idx)?,
            temperature: self.temperature,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    LocalMse,
    LocalCosine,
    PdMse,
    PdCosine,
    PdKl,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::LocalMse,
        MetricKind::LocalCosine,
        MetricKind::PdMse,
        MetricKind::PdCosine,
        MetricKind::PdKl,
    ];

    /// Whether the metric needs the prediction of the remaining FP network.
    pub fn is_global(self) -> bool {
        matches!(self, MetricKind::PdMse | MetricKind::PdCosine | MetricKind::PdKl)
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::LocalMse => "local_mse",
            MetricKind::LocalCosine => "local_cosine",
            MetricKind::PdMse => "pd_mse",
            MetricKind::PdCosine => "pd_cosine",
            MetricKind::PdKl => "pd_kl",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown metric '{s}'")))
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(Error::Empty(op));
    }
    Ok(())
}

/// Squared L2 distance per sample, averaged over the batch (leading axis).
pub fn local_mse(a: &Tensor, a_q: &Tensor) -> Result<f32> {
    check_same("local_mse", a, a_q)?;
    let total: f64 = a
        .data()
        .iter()
        .zip(a_q.data())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum();
    Ok((total / a.rows() as f64) as f32)
}

/// `1 - cos(a, a_q)` per flattened sample, averaged over the batch.
///
/// A zero-norm sample counts as distance 1.
pub fn local_cosine(a: &Tensor, a_q: &Tensor) -> Result<f32> {
    check_same("local_cosine", a, a_q)?;
    let w = a.row_len();
    let mut total = 0.0f64;
    for (x, y) in a.data().chunks(w).zip(a_q.data().chunks(w)) {
        let (mut dot, mut nx, mut ny) = (0.0f64, 0.0f64, 0.0f64);
        for (&u, &v) in x.iter().zip(y) {
            dot += u as f64 * v as f64;
            nx += u as f64 * u as f64;
            ny += v as f64 * v as f64;
        }
        if nx == 0.0 || ny == 0.0 {
            log::debug!("local_cosine: zero-norm sample, distance defined as 1");
            total += 1.0;
        } else {
            total += (1.0 - dot / (nx.sqrt() * ny.sqrt())).max(0.0);
        }
    }
    Ok((total / a.rows() as f64) as f32)
}

fn check_predictions(fp: &Prediction, q: &Prediction) -> Result<()> {
    if fp.probs.shape() != q.probs.shape() {
        return Err(Error::shape("prediction metric", fp.probs.shape(), q.probs.shape()));
    }
    if fp.temperature != q.temperature {
        return Err(Error::InvalidArgument(format!(
            "temperature mismatch: {} vs {}",
            fp.temperature, q.temperature
        )));
    }
    Ok(())
}

/// `T^2 * mean_b sum_c p_fp log(p_fp / p_q)`, i.e. KL(FP || quantized).
pub fn pd_kl(fp: &Prediction, q: &Prediction) -> Result<f32> {
    check_predictions(fp, q)?;
    let total: f64 = fp
        .probs
        .data()
        .iter()
        .zip(q.probs.data())
        .map(|(&p, &r)| {
            let (p, r) = (p.max(PROB_FLOOR) as f64, r.max(PROB_FLOOR) as f64);
            p * (p / r).ln()
        })
        .sum();
    let t2 = (fp.temperature * fp.temperature) as f64;
    Ok(((total / fp.batch() as f64) * t2).max(0.0) as f32)
}

/// Squared L2 between probability vectors, averaged over the batch.
pub fn pd_mse(fp: &Prediction, q: &Prediction) -> Result<f32> {
    check_predictions(fp, q)?;
    local_mse(&fp.probs, &q.probs)
}

/// Cosine distance between probability vectors, averaged over the batch.
pub fn pd_cosine(fp: &Prediction, q: &Prediction) -> Result<f32> {
    check_predictions(fp, q)?;
    local_cosine(&fp.probs, &q.probs)
}

/// Mean cross-entropy against integer labels (harness-only oracle).
pub fn task_loss(pred: &Prediction, labels: &[usize]) -> Result<f32> {
    if labels.len() != pred.batch() {
        return Err(Error::shape("task_loss", &[pred.batch()], &[labels.len()]));
    }
    let c = pred.classes();
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -(pred.probs.data()[i * c + y].max(PROB_FLOOR) as f64).ln())
        .sum();
    Ok((total / labels.len() as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pred(rows: &[&[f32]]) -> Prediction {
        let c = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Prediction::from_logits(Tensor::new([rows.len(), c], data).unwrap(), 1.0).unwrap()
    }

    #[test]
    fn local_mse_examples() {
        let a = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([1, 2], vec![1.0, 4.0]).unwrap();
        assert_eq!(local_mse(&a, &a).unwrap(), 0.0);
        assert_eq!(local_mse(&a, &b).unwrap(), 4.0);
        assert!(local_mse(&a, &Tensor::zeros([2, 1])).is_err());
    }

    #[test]
    fn local_mse_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn([4, 3, 2], 1.0, &mut rng);
        let b = Tensor::randn([4, 3, 2], 1.0, &mut rng);
        let mut s = 0.0f64;
        for i in 0..a.numel() {
            s += ((a.data()[i] - b.data()[i]) as f64).powi(2);
        }
        assert!((local_mse(&a, &b).unwrap() as f64 - s / 4.0).abs() < 1e-5);
    }

    #[test]
    fn local_cosine_examples() {
        let x = Tensor::new([1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        assert!(local_cosine(&x, &x).unwrap().abs() < 1e-7);
        assert!(local_cosine(&x, &x.map(|v| 2.0 * v)).unwrap().abs() < 1e-7);
        let e1 = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let e2 = Tensor::new([1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(local_cosine(&e1, &e2).unwrap(), 1.0);
        assert_eq!(local_cosine(&e1, &Tensor::zeros([1, 2])).unwrap(), 1.0);
    }

    #[test]
    fn pd_kl_examples() {
        let p = pred(&[&[0.3, -1.0, 2.0]]);
        assert_eq!(pd_kl(&p, &p).unwrap(), 0.0);
        let sharp = pred(&[&[200.0, 0.0]]);
        let uniform = pred(&[&[0.0, 0.0]]);
        assert!((pd_kl(&sharp, &uniform).unwrap() - std::f32::consts::LN_2).abs() < 1e-5);
    }

    #[test]
    fn pd_kl_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Prediction::from_logits(Tensor::randn([3, 4], 1.5, &mut rng), 1.0).unwrap();
        let b = Prediction::from_logits(Tensor::randn([3, 4], 1.5, &mut rng), 1.0).unwrap();
        let mut s = 0.0f64;
        for r in 0..3 {
            let za: Vec<f64> = a.logits.data()[r * 4..r * 4 + 4].iter().map(|&v| v as f64).collect();
            let zb: Vec<f64> = b.logits.data()[r * 4..r * 4 + 4].iter().map(|&v| v as f64).collect();
            let na: f64 = za.iter().map(|v| v.exp()).sum();
            let nb: f64 = zb.iter().map(|v| v.exp()).sum();
            for c in 0..4 {
                let p = za[c].exp() / na;
                let q = zb[c].exp() / nb;
                s += p * (p / q).ln();
            }
        }
        assert!((pd_kl(&a, &b).unwrap() as f64 - s / 3.0).abs() < 1e-5);
        assert_ne!(pd_kl(&a, &b).unwrap(), pd_kl(&b, &a).unwrap());
    }

    #[test]
    fn pd_mse_and_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Prediction::from_logits(Tensor::randn([5, 3], 1.0, &mut rng), 1.0).unwrap();
        let b = Prediction::from_logits(Tensor::randn([5, 3], 1.0, &mut rng), 1.0).unwrap();
        assert_eq!(pd_mse(&a, &a).unwrap(), 0.0);
        assert!(pd_cosine(&a, &a).unwrap() < 1e-6);
        let mut s = 0.0f64;
        for i in 0..15 {
            s += ((a.probs.data()[i] - b.probs.data()[i]) as f64).powi(2);
        }
        assert!((pd_mse(&a, &b).unwrap() as f64 - s / 5.0).abs() < 1e-6);

        // Scaling the logits changes the softmax, so pd_cosine is not scale invariant.
        let scaled = Prediction::from_logits(a.logits.map(|v| 3.0 * v), 1.0).unwrap();
        assert!(pd_cosine(&a, &scaled).unwrap() > 1e-4);
    }

    #[test]
    fn probs_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Prediction::from_logits(Tensor::randn([6, 7], 4.0, &mut rng), 1.0).unwrap();
        for row in p.probs.data().chunks(7) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn metric_names_round_trip() {
        for m in MetricKind::ALL {
            assert_eq!(m.name().parse::<MetricKind>().unwrap(), m);
        }
    }
}
