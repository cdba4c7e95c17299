//! Uniform affine fake quantization and learnable rounding.
//!
//! Integer grid is unsigned: `q_min = 0`, `q_max = 2^b - 1`. A value maps to
//! `clamp(round(x / S) + Z, q_min, q_max)` and dequantizes to `S * (q - Z)`.
//! Rounding is half-away-from-zero everywhere.
//!
//! Weights use per-output-channel parameters (axis 0); activations use a
//! single scale. Bit-widths of 32 and above are treated as pass-through.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::sigmoid;
use crate::tensor::Tensor;

/// Bit-widths at or above this are not quantized at all.
pub const PASSTHROUGH_BITS: u32 = 32;

/// Scale used when a degenerate range is explicitly allowed.
pub const DEGENERATE_SCALE: f32 = 1e-8;

#[inline]
pub fn round_half_away(x: f32) -> f32 {
    x.round()
}

#[inline]
pub fn fake_quant_scalar(x: f32, scale: f32, zero_point: f32, qmin: f32, qmax: f32) -> f32 {
    let q = (round_half_away(x / scale) + zero_point).clamp(qmin, qmax);
    scale * (q - zero_point)
}

/// `d fake_quant(x) / d scale` under a straight-through round.
///
/// Upper clamp gives `q_max - Z`, lower clamp `q_min - Z`, and the interior
/// `round(x/S) - x/S`. With `Z = 0` these are exactly `q_max`, `q_min` and
/// the rounding residual.
#[inline]
pub fn scale_grad_factor(x: f32, scale: f32, zero_point: f32, qmin: f32, qmax: f32) -> f32 {
    let t = x / scale;
    let u = t + zero_point;
    if u >= qmax {
        qmax - zero_point
    } else if u <= qmin {
        qmin - zero_point
    } else {
        round_half_away(t) - t
    }
}

/// Rectified sigmoid `h(theta) = clip(sigmoid(theta) * (zeta - gamma) + gamma, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rectifier {
    pub gamma: f32,
    pub zeta: f32,
}

impl Default for Rectifier {
    fn default() -> Self {
        Self { gamma: -0.1, zeta: 1.1 }
    }
}

impl Rectifier {
    #[inline]
    pub fn h(&self, theta: f32) -> f32 {
        (sigmoid(theta) * (self.zeta - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }

    /// Derivative of [`Rectifier::h`]; zero where the clip is active.
    #[inline]
    pub fn dh(&self, theta: f32) -> f32 {
        let s = sigmoid(theta);
        let raw = s * (self.zeta - self.gamma) + self.gamma;
        if raw <= 0.0 || raw >= 1.0 {
            0.0
        } else {
            s * (1.0 - s) * (self.zeta - self.gamma)
        }
    }

    #[inline]
    pub fn hard(&self, theta: f32) -> f32 {
        if self.h(theta) >= 0.5 {
            1.0
        } else {
            0.0
        }
    }

    /// Inverse of `h` on the open interval, used to start from a given offset.
    pub fn theta_for(&self, h: f32) -> f32 {
        let s = ((h - self.gamma) / (self.zeta - self.gamma)).clamp(1e-6, 1.0 - 1e-6);
        (s / (1.0 - s)).ln()
    }
}

/// One term of the rounding regularizer and its derivative w.r.t. `theta`.
#[inline]
pub fn round_reg_term(theta: f32, beta: f32, rect: Rectifier) -> (f32, f32) {
    let h = rect.h(theta);
    let d = 2.0 * h - 1.0;
    let a = d.abs();
    let value = 1.0 - a.powf(beta);
    let grad = if a > 0.0 {
        -beta * a.powf(beta - 1.0) * d.signum() * 2.0 * rect.dh(theta)
    } else {
        0.0
    };
    (value, grad)
}

/// How a constant tensor (or channel) is handled by range calibration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Fall back to `S = 1e-8`.
    Epsilon,
}

/// Scale, zero-point and bit-width of one quantizer.
///
/// `scales` and `zero_points` have one entry per group: a single entry for
/// per-tensor quantizers, or one per slice along `axis`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scales: Vec<f32>,
    pub zero_points: Vec<i32>,
    pub bits: u32,
    pub axis: Option<usize>,
}

impl QuantParams {
    pub fn per_tensor(scale: f32, zero_point: i32, bits: u32) -> Result<Self> {
        let p = Self {
            scales: vec![scale],
            zero_points: vec![zero_point],
            bits,
            axis: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn passthrough() -> Self {
        Self {
            scales: vec![1.0],
            zero_points: vec![0],
            bits: PASSTHROUGH_BITS,
            axis: None,
        }
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits >= PASSTHROUGH_BITS
    }

    pub fn qmin(&self) -> f32 {
        0.0
    }

    pub fn qmax(&self) -> f32 {
        qmax_for(self.bits)
    }

    pub fn scale(&self) -> f32 {
        self.scales[0]
    }

    pub fn zero_point(&self) -> f32 {
        self.zero_points[0] as f32
    }

    pub fn groups(&self) -> usize {
        self.scales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits < 2 {
            return Err(Error::InvalidArgument(format!("bit-width must be >= 2, got {}", self.bits)));
        }
        if self.scales.is_empty() || self.scales.len() != self.zero_points.len() {
            return Err(Error::InvalidArgument("scales and zero-points must be non-empty and equal length".into()));
        }
        if self.is_passthrough() {
            return Ok(());
        }
        let qmax = self.qmax() as i64;
        for (&s, &z) in self.scales.iter().zip(&self.zero_points) {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("scale must be positive and finite, got {s}")));
            }
            if (z as i64) < 0 || (z as i64) > qmax {
                return Err(Error::InvalidArgument(format!("zero-point {z} outside [0, {qmax}]")));
            }
        }
        Ok(())
    }

    /// Group index of every element of a tensor with `shape`.
    fn group_layout(&self, shape: &[usize]) -> Result<(usize, usize)> {
        match self.axis {
            None => Ok((1, shape.iter().product())),
            Some(axis) => {
                let extent = *shape.get(axis).ok_or_else(|| {
                    Error::InvalidArgument(format!("per-channel axis {axis} out of range for {shape:?}"))
                })?;
                if extent != self.groups() {
                    return Err(Error::shape("per-channel quantizer", &[self.groups()], &[extent]));
                }
                Ok((extent, shape[axis + 1..].iter().product()))
            }
        }
    }
}

pub fn qmax_for(bits: u32) -> f32 {
    ((1u64 << bits.min(63)) - 1) as f32
}

fn range_to_params(lo: f32, hi: f32, bits: u32, policy: DegeneratePolicy) -> Result<(f32, i32)> {
    let qmax = qmax_for(bits);
    let scale = if hi > lo {
        (hi - lo) / qmax
    } else {
        match policy {
            DegeneratePolicy::Error => return Err(Error::DegenerateRange(lo)),
            DegeneratePolicy::Epsilon => DEGENERATE_SCALE,
        }
    };
    let z = if hi > lo {
        (-(lo as f64) * qmax as f64 / (hi as f64 - lo as f64)).round()
    } else {
        (-(lo as f64) / scale as f64).round()
    };
    Ok((scale, z.clamp(0.0, qmax as f64) as i32))
}

/// Min-max calibration: `S = (x_max - x_min) / (2^b - 1)`,
/// `Z = clamp(round(-x_min / S), q_min, q_max)`.
pub fn compute_range_scale(x: &Tensor, bits: u32, per_channel_axis: Option<usize>, policy: DegeneratePolicy) -> Result<QuantParams> {
    if x.numel() == 0 {
        return Err(Error::Empty("compute_range_scale"));
    }
    x.ensure_finite("compute_range_scale")?;
    let ranges = group_ranges(x, per_channel_axis)?;
    params_from_ranges(&ranges, bits, per_channel_axis, policy)
}

/// Builds parameters from explicit `(lo, hi)` ranges, one per group.
pub fn params_from_ranges(ranges: &[(f32, f32)], bits: u32, axis: Option<usize>, policy: DegeneratePolicy) -> Result<QuantParams> {
    let mut scales = Vec::with_capacity(ranges.len());
    let mut zps = Vec::with_capacity(ranges.len());
    for &(lo, hi) in ranges {
        let (s, z) = range_to_params(lo, hi, bits, policy)?;
        scales.push(s);
        zps.push(z);
    }
    let p = QuantParams {
        scales,
        zero_points: zps,
        bits,
        axis,
    };
    p.validate()?;
    Ok(p)
}

/// Per-group `(min, max)` of a tensor.
pub fn group_ranges(x: &Tensor, axis: Option<usize>) -> Result<Vec<(f32, f32)>> {
    match axis {
        None => Ok(vec![x.min_max().ok_or(Error::Empty("group_ranges"))?]),
        Some(axis) => {
            let shape = x.shape();
            let extent = *shape
                .get(axis)
                .ok_or_else(|| Error::InvalidArgument(format!("axis {axis} out of range for {shape:?}")))?;
            let inner: usize = shape[axis + 1..].iter().product();
            let mut ranges = vec![(f32::INFINITY, f32::NEG_INFINITY); extent];
            for (i, chunk) in x.data().chunks(inner).enumerate() {
                let r = &mut ranges[i % extent];
                for &v in chunk {
                    r.0 = r.0.min(v);
                    r.1 = r.1.max(v);
                }
            }
            Ok(ranges)
        }
    }
}

/// Quantize-dequantize with nearest rounding.
pub fn fake_quantize(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    x.ensure_finite("fake_quantize")?;
    if p.is_passthrough() {
        return Ok(x.clone());
    }
    let (extent, inner) = p.group_layout(x.shape())?;
    let (qmin, qmax) = (p.qmin(), p.qmax());
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let g = i % extent;
        let (s, z) = (p.scales[g], p.zero_points[g] as f32);
        for v in chunk {
            *v = fake_quant_scalar(*v, s, z, qmin, qmax);
        }
    }
    Ok(out)
}

/// `dL/dS` of a per-tensor activation quantizer given `dL/d x_tilde`.
pub fn scale_gradient(x: &Tensor, p: &QuantParams, upstream: &Tensor) -> Result<f32> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape("scale_gradient", x.shape(), upstream.shape()));
    }
    if p.groups() != 1 {
        return Err(Error::InvalidArgument("scale_gradient expects a per-tensor quantizer".into()));
    }
    let s = p.scale();
    if s <= 0.0 {
        return Err(Error::InvalidArgument(format!("scale must be > 0, got {s}")));
    }
    let (z, qmin, qmax) = (p.zero_point(), p.qmin(), p.qmax());
    Ok(x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xv, &g)| g * scale_grad_factor(xv, s, z, qmin, qmax))
        .sum())
}

/// Learnable rounding offsets for one weight tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundingVars {
    pub theta: Tensor,
    pub beta: f32,
    pub rect: Rectifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundingMode {
    Soft,
    Hard,
}

impl RoundingVars {
    /// Starts every offset at the fractional part of `w / S`, so the soft
    /// quantized weight equals `w` wherever it is not clamped.
    pub fn init_from_weight(w: &Tensor, p: &QuantParams) -> Result<Self> {
        let rect = Rectifier::default();
        let (extent, inner) = p.group_layout(w.shape())?;
        let mut theta = w.clone();
        for (i, chunk) in theta.data_mut().chunks_mut(inner).enumerate() {
            let s = p.scales[i % extent];
            for v in chunk {
                let t = *v / s;
                *v = rect.theta_for(t - t.floor());
            }
        }
        Ok(Self {
            theta,
            beta: 20.0,
            rect,
        })
    }

    pub fn h_values(&self) -> Vec<f32> {
        self.theta.data().iter().map(|&t| self.rect.h(t)).collect()
    }

    /// Binarized offsets (0 = round down, 1 = round up).
    pub fn hard_mask(&self) -> Vec<u8> {
        self.theta.data().iter().map(|&t| self.rect.hard(t) as u8).collect()
    }

    /// Fraction of offsets with `|2h - 1| > threshold`.
    pub fn saturated_fraction(&self, threshold: f32) -> f32 {
        let n = self.theta.numel().max(1);
        let k = self.h_values().iter().filter(|&&h| (2.0 * h - 1.0).abs() > threshold).count();
        k as f32 / n as f32
    }
}

/// Weight fake quantization with learned up/down rounding:
/// `S * (clamp(floor(w/S) + h + Z, q_min, q_max) - Z)`.
pub fn adaround_fake_quantize(w: &Tensor, p: &QuantParams, r: &RoundingVars, mode: RoundingMode) -> Result<Tensor> {
    if r.theta.shape() != w.shape() {
        return Err(Error::shape("adaround_fake_quantize", r.theta.shape(), w.shape()));
    }
    let (extent, inner) = p.group_layout(w.shape())?;
    let (qmin, qmax) = (p.qmin(), p.qmax());
    let mut out = w.clone();
    for (i, (chunk, th)) in out.data_mut().chunks_mut(inner).zip(r.theta.data().chunks(inner)).enumerate() {
        let g = i % extent;
        let (s, z) = (p.scales[g], p.zero_points[g] as f32);
        for (v, &t) in chunk.iter_mut().zip(th) {
            let h = match mode {
                RoundingMode::Soft => r.rect.h(t),
                RoundingMode::Hard => r.rect.hard(t),
            };
            let q = ((*v / s).floor() + h + z).clamp(qmin, qmax);
            *v = s * (q - z);
        }
    }
    Ok(out)
}

/// Dequantized weight from a stored hard rounding mask.
pub fn apply_hard_mask(w: &Tensor, p: &QuantParams, mask: &[u8]) -> Result<Tensor> {
    if mask.len() != w.numel() {
        return Err(Error::InvalidArgument(format!(
            "rounding mask has {} entries for {} weights",
            mask.len(),
            w.numel()
        )));
    }
    let (extent, inner) = p.group_layout(w.shape())?;
    let (qmin, qmax) = (p.qmin(), p.qmax());
    let mut out = w.clone();
    for (i, (chunk, m)) in out.data_mut().chunks_mut(inner).zip(mask.chunks(inner)).enumerate() {
        let g = i % extent;
        let (s, z) = (p.scales[g], p.zero_points[g] as f32);
        for (v, &bit) in chunk.iter_mut().zip(m) {
            let q = ((*v / s).floor() + bit as f32 + z).clamp(qmin, qmax);
            *v = s * (q - z);
        }
    }
    Ok(out)
}

/// `sum(1 - |2 h(theta) - 1|^beta)`.
pub fn rounding_regularizer(r: &RoundingVars) -> f32 {
    r.theta
        .data()
        .iter()
        .map(|&t| round_reg_term(t, r.beta, r.rect).0 as f64)
        .sum::<f64>() as f32
}

/// Annealing of the rounding regularizer: zero weight during a warm-up
/// fraction, then `beta` decays linearly from `start` to `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSchedule {
    pub warmup: f32,
    pub start: f32,
    pub end: f32,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            warmup: 0.2,
            start: 20.0,
            end: 2.0,
        }
    }
}

impl BetaSchedule {
    pub fn active(&self, iter: usize, total: usize) -> bool {
        (iter as f32) >= self.warmup * total as f32
    }

    pub fn beta(&self, iter: usize, total: usize) -> f32 {
        let start_iter = self.warmup * total as f32;
        let span = (total as f32 - start_iter).max(1.0);
        let frac = ((iter as f32 - start_iter) / span).clamp(0.0, 1.0);
        self.start + (self.end - self.start) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f32]) -> Tensor {
        Tensor::from_slice(v)
    }

    #[test]
    fn range_scale_examples() {
        let p = compute_range_scale(&t(&[0.0, 1.0, 3.0]), 2, None, DegeneratePolicy::Error).unwrap();
        assert_eq!(p.scale(), 1.0);
        assert_eq!(p.zero_points[0], 0);
        let p = compute_range_scale(&t(&[0.0, 1.0]), 8, None, DegeneratePolicy::Error).unwrap();
        assert_eq!(p.scale(), 1.0 / 255.0);
        let p = compute_range_scale(&t(&[-1.0, 1.0]), 4, None, DegeneratePolicy::Error).unwrap();
        assert_eq!(p.scale(), 2.0 / 15.0);
        assert_eq!(p.zero_points[0], 8);
    }

    #[test]
    fn degenerate_range_errors_unless_opted_in() {
        let x = t(&[0.5, 0.5]);
        assert!(matches!(
            compute_range_scale(&x, 4, None, DegeneratePolicy::Error),
            Err(Error::DegenerateRange(_))
        ));
        let p = compute_range_scale(&x, 4, None, DegeneratePolicy::Epsilon).unwrap();
        assert_eq!(p.scale(), DEGENERATE_SCALE);
    }

    #[test]
    fn per_channel_ranges() {
        let w = Tensor::new([2, 2], vec![0.0, 3.0, -1.0, 1.0]).unwrap();
        let p = compute_range_scale(&w, 2, Some(0), DegeneratePolicy::Error).unwrap();
        assert_eq!(p.scales, vec![1.0, 2.0 / 3.0]);
        assert_eq!(p.zero_points, vec![0, 2]);
    }

    #[test]
    fn fake_quantize_examples() {
        let p = QuantParams::per_tensor(1.0 / 3.0, 0, 2).unwrap();
        let out = fake_quantize(&t(&[0.5]), &p).unwrap();
        assert_eq!(out.data()[0], 2.0 / 3.0);
        let p = QuantParams::per_tensor(1.0, 0, 2).unwrap();
        assert_eq!(fake_quantize(&t(&[10.0]), &p).unwrap().data()[0], 3.0);
        let p = QuantParams::per_tensor(0.1, 0, 2).unwrap();
        assert_eq!(fake_quantize(&t(&[-0.2]), &p).unwrap().data()[0], 0.0);
    }

    #[test]
    fn fake_quantize_rejects_non_finite() {
        let p = QuantParams::per_tensor(1.0, 0, 2).unwrap();
        assert!(fake_quantize(&t(&[f32::NAN]), &p).is_err());
    }

    #[test]
    fn scale_gradient_branches() {
        let p = QuantParams::per_tensor(1.0, 0, 2).unwrap();
        let g = |x: f32| scale_gradient(&t(&[x]), &p, &t(&[1.0])).unwrap();
        assert_eq!(g(-0.5), 0.0);
        assert_eq!(g(3.9), 3.0);
        assert!((g(1.4) - (1.0 - 1.4)).abs() < 1e-7);
        assert!(scale_gradient(&t(&[1.0]), &p, &t(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn adaround_examples() {
        let p = QuantParams::per_tensor(1.0, 0, 2).unwrap();
        let w = t(&[0.4]);
        let rect = Rectifier::default();
        let mk = |theta: f32| RoundingVars {
            theta: t(&[theta]),
            beta: 2.0,
            rect,
        };
        let down = mk(-20.0);
        assert_eq!(down.h_values()[0], 0.0);
        assert_eq!(adaround_fake_quantize(&w, &p, &down, RoundingMode::Soft).unwrap().data()[0], 0.0);
        let up = mk(20.0);
        assert_eq!(up.h_values()[0], 1.0);
        assert_eq!(adaround_fake_quantize(&w, &p, &up, RoundingMode::Soft).unwrap().data()[0], 1.0);
        let mid = mk(0.0);
        assert!((mid.h_values()[0] - 0.5).abs() < 1e-6);
        let soft = adaround_fake_quantize(&w, &p, &mid, RoundingMode::Soft).unwrap().data()[0];
        assert!((soft - 0.5).abs() < 1e-6);
    }

    #[test]
    fn init_reproduces_weight_in_soft_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn([4, 6], 1.0, &mut rng);
        let p = compute_range_scale(&w, 4, Some(0), DegeneratePolicy::Error).unwrap();
        let r = RoundingVars::init_from_weight(&w, &p).unwrap();
        let soft = adaround_fake_quantize(&w, &p, &r, RoundingMode::Soft).unwrap();
        for (i, (a, b)) in soft.data().iter().zip(w.data()).enumerate() {
            let ch = i / 6;
            let (s, z) = (p.scales[ch], p.zero_points[ch] as f32);
            let grid = b / s + z;
            let clamped = grid.floor() + 1.0 > p.qmax() || grid < 0.0;
            assert!((a - b).abs() < 1e-4 || (clamped && (a - b).abs() <= s), "{a} vs {b}");
        }
    }

    #[test]
    fn regularizer_examples() {
        let rect = Rectifier::default();
        let half = RoundingVars {
            theta: Tensor::zeros([5]),
            beta: 2.0,
            rect,
        };
        assert!((rounding_regularizer(&half) - 5.0).abs() < 1e-5);
        let sat = RoundingVars {
            theta: t(&[-30.0, 30.0, 10.0]),
            beta: 2.0,
            rect,
        };
        assert_eq!(rounding_regularizer(&sat), 0.0);
        let one = RoundingVars {
            theta: t(&[rect.theta_for(0.9)]),
            beta: 2.0,
            rect,
        };
        assert!((rounding_regularizer(&one) - 0.36).abs() < 1e-4);
    }

    #[test]
    fn hard_equals_soft_when_saturated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::randn([3, 5], 1.0, &mut rng);
        let p = compute_range_scale(&w, 3, Some(0), DegeneratePolicy::Error).unwrap();
        let theta = Tensor::new([3, 5], (0..15).map(|_| if rng.random::<bool>() { 8.0 } else { -8.0 }).collect()).unwrap();
        let r = RoundingVars {
            theta,
            beta: 2.0,
            rect: Rectifier::default(),
        };
        let soft = adaround_fake_quantize(&w, &p, &r, RoundingMode::Soft).unwrap();
        let hard = adaround_fake_quantize(&w, &p, &r, RoundingMode::Hard).unwrap();
        assert_eq!(soft, hard);
        assert_eq!(apply_hard_mask(&w, &p, &r.hard_mask()).unwrap(), hard);
    }

    #[test]
    fn beta_schedule_shape() {
        let s = BetaSchedule::default();
        assert!(!s.active(0, 100));
        assert!(!s.active(19, 100));
        assert!(s.active(20, 100));
        assert_eq!(s.beta(20, 100), 20.0);
        assert_eq!(s.beta(100, 100), 2.0);
        let mut prev = f32::INFINITY;
        for i in 21..=100 {
            let b = s.beta(i, 100);
            assert!(b < prev);
            prev = b;
        }
    }
}
