//! Small feed-forward networks partitioned into reconstruction blocks.
//!
//! A [`ModelGraph`] is a stem, a linear chain of [`Block`]s and a head.
//! Batch norm is kept as an explicit layer so its running statistics are
//! available after training. Residual blocks end with
//! [`Layer::AddResidual`], which adds the block input to the running value.

mod io;
mod quantized;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Prediction;
use crate::tensor::{Tape, Tensor, Var};

pub use io::{load_model, save_model};
pub use quantized::{fake_quant_const, LayerQuant, QuantHooks, QuantState, QuantizedModel};

/// Samples per tape when running inference over a large tensor.
pub const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct BnParams {
    pub mean: Tensor,
    pub var: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f32,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros([channels]),
            var: Tensor::ones([channels]),
            gamma: Tensor::ones([channels]),
            beta: Tensor::zeros([channels]),
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.numel()
    }

    /// Running standard deviation `sqrt(var)`, the target of distribution
    /// correction.
    pub fn running_std(&self) -> Vec<f32> {
        self.var.data().iter().map(|v| v.sqrt()).collect()
    }

    /// Per-channel `(scale, shift)` of the inference-mode affine map.
    pub fn affine(&self) -> (Tensor, Tensor) {
        let c = self.channels();
        let mut scale = vec![0.0; c];
        let mut shift = vec![0.0; c];
        for i in 0..c {
            let inv = 1.0 / (self.var.data()[i] + self.eps).sqrt();
            scale[i] = self.gamma.data()[i] * inv;
            shift[i] = self.beta.data()[i] - self.mean.data()[i] * scale[i];
        }
        (Tensor::from_slice(&scale), Tensor::from_slice(&shift))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        pad: usize,
    },
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    BatchNorm(BnParams),
    Relu,
    /// Adds the enclosing block's input.
    AddResidual,
    /// Global average pooling `[B,C,H,W] -> [B,C]`.
    AvgPool,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::Linear { .. } => "linear",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Relu => "relu",
            Layer::AddResidual => "add_residual",
            Layer::AvgPool => "avgpool",
        }
    }

    /// Conv and linear layers carry quantizable weights.
    pub fn is_parametric(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Linear { .. })
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv { weight, .. } | Layer::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Block {
    pub layers: Vec<Layer>,
}

impl Block {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn has_skip(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::AddResidual))
    }

    pub fn bn_layers(&self) -> impl Iterator<Item = (usize, &BnParams)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::BatchNorm(bn) => Some((i, bn)),
            _ => None,
        })
    }
}

/// Where a layer lives in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stage {
    Stem,
    Block(usize),
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerId {
    pub stage: Stage,
    pub index: usize,
}

impl LayerId {
    pub fn new(stage: Stage, index: usize) -> Self {
        Self { stage, index }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.stage {
            Stage::Stem => write!(f, "stem.{}", self.index),
            Stage::Block(b) => write!(f, "block{}.{}", b, self.index),
            Stage::Head => write!(f, "head.{}", self.index),
        }
    }
}

impl std::str::FromStr for LayerId {
    type Err = Error;

    /// Parses the `Display` form: `stem.0`, `block1.2`, `head.1`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("invalid layer id {s:?}"));
        let (stage, index) = s.split_once('.').ok_or_else(bad)?;
        let index = index.parse().map_err(|_| bad())?;
        let stage = match stage {
            "stem" => Stage::Stem,
            "head" => Stage::Head,
            b => Stage::Block(b.strip_prefix("block").and_then(|n| n.parse().ok()).ok_or_else(bad)?),
        };
        Ok(LayerId { stage, index })
    }
}

/// Customization points for a forward pass recorded on a tape.
///
/// The defaults give the full-precision inference network.
pub trait ForwardHooks {
    fn weight(&mut self, tape: &mut Tape, _id: LayerId, weight: &Tensor) -> Result<Var> {
        Ok(tape.constant(weight.clone()))
    }

    fn bias(&mut self, tape: &mut Tape, _id: LayerId, bias: &Tensor) -> Result<Var> {
        Ok(tape.constant(bias.clone()))
    }

    /// Applied to the input of every conv/linear layer (activation quantization).
    fn input(&mut self, _tape: &mut Tape, _id: LayerId, x: Var) -> Result<Var> {
        Ok(x)
    }

    fn batch_norm(&mut self, tape: &mut Tape, _id: LayerId, x: Var, bn: &BnParams) -> Result<Var> {
        batch_norm_eval(tape, x, bn)
    }
}

/// Plain full-precision inference.
pub struct FpHooks;

impl ForwardHooks for FpHooks {}

pub fn batch_norm_eval(tape: &mut Tape, x: Var, bn: &BnParams) -> Result<Var> {
    let (scale, shift) = bn.affine();
    let s = tape.constant(scale);
    let t = tape.constant(shift);
    tape.channel_affine(x, s, t)
}

/// Runs `layers` of one stage; `block_input` feeds any residual add.
pub fn run_layers(tape: &mut Tape, layers: &[Layer], stage: Stage, x: Var, hooks: &mut dyn ForwardHooks) -> Result<Var> {
    let block_input = x;
    let mut cur = x;
    for (index, layer) in layers.iter().enumerate() {
        let id = LayerId { stage, index };
        cur = match layer {
            Layer::Conv {
                weight,
                bias,
                stride,
                pad,
            } => {
                let xin = hooks.input(tape, id, cur)?;
                let w = hooks.weight(tape, id, weight)?;
                let b = bias.as_ref().map(|b| hooks.bias(tape, id, b)).transpose()?;
                tape.conv2d(xin, w, b, *stride, *pad)?
            }
            Layer::Linear { weight, bias } => {
                let xin = hooks.input(tape, id, cur)?;
                let w = hooks.weight(tape, id, weight)?;
                let b = bias.as_ref().map(|b| hooks.bias(tape, id, b)).transpose()?;
                tape.linear(xin, w, b)?
            }
            Layer::BatchNorm(bn) => hooks.batch_norm(tape, id, cur, bn)?,
            Layer::Relu => tape.relu(cur)?,
            Layer::AddResidual => tape.add(cur, block_input)?,
            Layer::AvgPool => tape.global_avg_pool(cur)?,
        };
    }
    Ok(cur)
}

/// Network description: stem, blocks, head, per-sample input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    pub stem: Vec<Layer>,
    pub blocks: Vec<Block>,
    pub head: Vec<Layer>,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

impl ModelGraph {
    pub fn new(stem: Vec<Layer>, blocks: Vec<Block>, head: Vec<Layer>, input_shape: Vec<usize>, num_classes: usize) -> Result<Self> {
        let m = Self {
            stem,
            blocks,
            head,
            input_shape,
            num_classes,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn stage_layers(&self, stage: Stage) -> Result<&[Layer]> {
        match stage {
            Stage::Stem => Ok(&self.stem),
            Stage::Head => Ok(&self.head),
            Stage::Block(b) => self
                .blocks
                .get(b)
                .map(|b| b.layers.as_slice())
                .ok_or_else(|| Error::InvalidArgument(format!("block {b} out of range ({} blocks)", self.blocks.len()))),
        }
    }

    /// Every stage in execution order.
    pub fn stages(&self) -> Vec<Stage> {
        let mut s = vec![Stage::Stem];
        s.extend((0..self.blocks.len()).map(Stage::Block));
        s.push(Stage::Head);
        s
    }

    pub fn layer(&self, id: LayerId) -> Result<&Layer> {
        self.stage_layers(id.stage)?
            .get(id.index)
            .ok_or_else(|| Error::InvalidArgument(format!("no layer {id}")))
    }

    /// Conv/linear layer ids in execution order.
    pub fn parametric_layers(&self) -> Vec<LayerId> {
        let mut ids = Vec::new();
        for stage in self.stages() {
            let layers = self.stage_layers(stage).unwrap_or(&[]);
            for (index, l) in layers.iter().enumerate() {
                if l.is_parametric() {
                    ids.push(LayerId { stage, index });
                }
            }
        }
        ids
    }

    pub fn validate(&self) -> Result<()> {
        for stage in self.stages() {
            for (i, layer) in self.stage_layers(stage)?.iter().enumerate() {
                match layer {
                    Layer::BatchNorm(bn) => {
                        let c = bn.channels();
                        if [&bn.var, &bn.gamma, &bn.beta].iter().any(|t| t.numel() != c) {
                            return Err(Error::InvalidArgument(format!("batchnorm {stage:?}.{i}: inconsistent channel counts")));
                        }
                        if bn.var.data().iter().any(|&v| !(v > 0.0)) {
                            return Err(Error::InvalidArgument(format!("batchnorm {stage:?}.{i}: running variance must be > 0")));
                        }
                    }
                    Layer::Conv { weight, bias, stride, .. } => {
                        if weight.ndim() != 4 || *stride == 0 {
                            return Err(Error::InvalidArgument(format!("conv {stage:?}.{i}: bad weight shape or stride")));
                        }
                        if bias.as_ref().is_some_and(|b| b.numel() != weight.shape()[0]) {
                            return Err(Error::InvalidArgument(format!("conv {stage:?}.{i}: bias/out-channel mismatch")));
                        }
                    }
                    Layer::Linear { weight, bias } => {
                        if weight.ndim() != 2 {
                            return Err(Error::InvalidArgument(format!("linear {stage:?}.{i}: weight must be 2-D")));
                        }
                        if bias.as_ref().is_some_and(|b| b.numel() != weight.shape()[0]) {
                            return Err(Error::InvalidArgument(format!("linear {stage:?}.{i}: bias/out-feature mismatch")));
                        }
                    }
                    Layer::AddResidual if !matches!(stage, Stage::Block(_)) => {
                        return Err(Error::InvalidArgument("residual add outside a block".into()));
                    }
                    _ => {}
                }
            }
        }
        let mut shape = vec![1];
        shape.extend(&self.input_shape);
        let logits = self.forward_logits(&Tensor::zeros(shape))?;
        if logits.shape() != [1, self.num_classes] {
            return Err(Error::InvalidArgument(format!(
                "network produces {:?}, expected [1, {}]",
                logits.shape(),
                self.num_classes
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![x.rows()];
            expected.extend(&self.input_shape);
            return Err(Error::shape("model input", x.shape(), &expected));
        }
        Ok(())
    }

    /// Records the stages `from..=Head` of the FP network starting at `stage`.
    pub fn run_from(&self, tape: &mut Tape, start: Stage, x: Var, hooks: &mut dyn ForwardHooks) -> Result<Var> {
        let mut cur = x;
        for stage in self.stages().into_iter().filter(|s| *s >= start) {
            cur = run_layers(tape, self.stage_layers(stage)?, stage, cur, hooks)?;
        }
        Ok(cur)
    }

    /// Records stages `[Stem, end)`.
    pub fn run_until(&self, tape: &mut Tape, end: Stage, x: Var, hooks: &mut dyn ForwardHooks) -> Result<Var> {
        let mut cur = x;
        for stage in self.stages().into_iter().filter(|s| *s < end) {
            cur = run_layers(tape, self.stage_layers(stage)?, stage, cur, hooks)?;
        }
        Ok(cur)
    }

    /// Applies `f` to row chunks of `x` and concatenates the results.
    pub fn chunked(&self, x: &Tensor, mut f: impl FnMut(&mut Tape, Var) -> Result<Var>) -> Result<Tensor> {
        if x.rows() == 0 {
            return Err(Error::Empty("forward over an empty batch"));
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < x.rows() {
            let end = (start + EVAL_CHUNK).min(x.rows());
            let mut tape = Tape::new();
            let v = tape.constant(x.slice_rows(start, end)?);
            let out = f(&mut tape, v)?;
            parts.push(tape.value(out).clone());
            start = end;
        }
        Tensor::concat_rows(&parts)
    }

    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.chunked(x, |tape, v| self.run_from(tape, Stage::Stem, v, &mut FpHooks))
    }

    /// Full-precision inference; batch norm uses running statistics.
    pub fn forward_fp(&self, x: &Tensor) -> Result<Prediction> {
        Prediction::from_logits(self.forward_logits(x)?, 1.0)
    }

    /// Output of the stem, i.e. the input of block 0.
    pub fn stem_output(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        self.chunked(x, |tape, v| run_layers(tape, &self.stem, Stage::Stem, v, &mut FpHooks))
    }

    /// FP activation entering block `block` (or the head when
    /// `block == num_blocks`).
    pub fn block_input(&self, x: &Tensor, block: usize) -> Result<Tensor> {
        self.check_input(x)?;
        let end = self.boundary_stage(block)?;
        self.chunked(x, |tape, v| self.run_until(tape, end, v, &mut FpHooks))
    }

    /// Runs a single block in FP.
    pub fn block_forward(&self, block: usize, a: &Tensor) -> Result<Tensor> {
        let layers = self.stage_layers(Stage::Block(block))?;
        self.chunked(a, |tape, v| run_layers(tape, layers, Stage::Block(block), v, &mut FpHooks))
    }

    /// Prediction of the FP network fed with `a` at the input of block
    /// `from_block`; `from_block == num_blocks` runs the head alone.
    pub fn forward_partial(&self, from_block: usize, a: &Tensor) -> Result<Prediction> {
        let start = self.boundary_stage(from_block)?;
        let logits = self.chunked(a, |tape, v| self.run_from(tape, start, v, &mut FpHooks))?;
        Prediction::from_logits(logits, 1.0)
    }

    pub(crate) fn boundary_stage(&self, block: usize) -> Result<Stage> {
        match block {
            b if b < self.blocks.len() => Ok(Stage::Block(b)),
            b if b == self.blocks.len() => Ok(Stage::Head),
            b => Err(Error::InvalidArgument(format!(
                "block index {b} out of range ({} blocks)",
                self.blocks.len()
            ))),
        }
    }
}

#[cfg(test)]
pub(crate) use tests::toy_cnn;

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// stem conv -> [bn relu conv] -> [bn relu conv bn relu conv +skip] -> pool linear
    pub(crate) fn toy_cnn(seed: u64) -> ModelGraph {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let conv = |cin: usize, cout: usize, stride: usize, r: &mut ChaCha8Rng| Layer::Conv {
            weight: Tensor::randn([cout, cin, 3, 3], 0.4, r),
            bias: Some(Tensor::randn([cout], 0.1, r)),
            stride,
            pad: 1,
        };
        let bn = |c: usize, r: &mut ChaCha8Rng| {
            Layer::BatchNorm(BnParams {
                mean: Tensor::randn([c], 0.2, r),
                var: Tensor::uniform([c], 0.5, 1.5, r),
                gamma: Tensor::uniform([c], 0.5, 1.5, r),
                beta: Tensor::randn([c], 0.2, r),
                eps: 1e-5,
            })
        };
        let stem = vec![conv(1, 3, 2, &mut r)];
        let b0 = Block::new(vec![bn(3, &mut r), Layer::Relu, conv(3, 4, 1, &mut r)]);
        let b1 = Block::new(vec![
            bn(4, &mut r),
            Layer::Relu,
            conv(4, 4, 1, &mut r),
            bn(4, &mut r),
            Layer::Relu,
            conv(4, 4, 1, &mut r),
            Layer::AddResidual,
        ]);
        let head = vec![
            Layer::AvgPool,
            Layer::Linear {
                weight: Tensor::randn([3, 4], 0.5, &mut r),
                bias: Some(Tensor::zeros([3])),
            },
        ];
        ModelGraph::new(stem, vec![b0, b1], head, vec![1, 6, 6], 3).unwrap()
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut m = toy_cnn(1);
        if let Layer::Linear { weight, bias } = &mut m.head[1] {
            *weight = Tensor::zeros(weight.shape().to_vec());
            *bias = None;
        }
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn([4, 1, 6, 6], 1.0, &mut r);
        let p = m.forward_fp(&x).unwrap();
        assert!(p.logits.data().iter().all(|&v| v == 0.0));
        assert!(p.probs.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn forward_is_deterministic_and_normalized() {
        let m = toy_cnn(3);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([5, 1, 6, 6], 1.0, &mut r);
        let a = m.forward_fp(&x).unwrap();
        let b = m.forward_fp(&x).unwrap();
        assert_eq!(a, b);
        for row in a.probs.data().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_matches_layerwise_oracle() {
        use crate::tensor::tests::naive_conv;
        let m = toy_cnn(5);
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::randn([2, 1, 6, 6], 1.0, &mut r);

        let conv = |l: &Layer, x: &Tensor| match l {
            Layer::Conv { weight, bias, stride, pad } => naive_conv(x, weight, bias.as_ref(), *stride, *pad),
            _ => unreachable!(),
        };
        let bn = |l: &Layer, x: &Tensor| match l {
            Layer::BatchNorm(p) => {
                let c = x.shape()[1];
                let inner = x.row_len() / c;
                let mut out = x.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    let ch = (i / inner) % c;
                    *v = (*v - p.mean.data()[ch]) / (p.var.data()[ch] + p.eps).sqrt() * p.gamma.data()[ch] + p.beta.data()[ch];
                }
                out
            }
            _ => unreachable!(),
        };
        let relu = |x: &Tensor| x.map(|v| v.max(0.0));

        let s = conv(&m.stem[0], &x);
        let b0 = &m.blocks[0].layers;
        let a1 = conv(&b0[2], &relu(&bn(&b0[0], &s)));
        let b1 = &m.blocks[1].layers;
        let t = conv(&b1[2], &relu(&bn(&b1[0], &a1)));
        let t = conv(&b1[5], &relu(&bn(&b1[3], &t)));
        let a2 = t.zip_map(&a1, |u, v| u + v).unwrap();
        let (c, inner) = (a2.shape()[1], a2.shape()[2] * a2.shape()[3]);
        let pooled: Vec<f32> = a2.data().chunks(inner).map(|ch| ch.iter().sum::<f32>() / inner as f32).collect();
        let Layer::Linear { weight, bias } = &m.head[1] else { unreachable!() };
        let mut logits = vec![0.0; 2 * 3];
        for n in 0..2 {
            for k in 0..3 {
                logits[n * 3 + k] = bias.as_ref().unwrap().data()[k]
                    + (0..c).map(|j| weight.data()[k * c + j] * pooled[n * c + j]).sum::<f32>();
            }
        }
        let got = m.forward_fp(&x).unwrap();
        for (a, b) in got.logits.data().iter().zip(&logits) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn partial_forward_composes() {
        let m = toy_cnn(7);
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn([3, 1, 6, 6], 1.0, &mut r);
        let full = m.forward_fp(&x).unwrap();
        let stem = m.stem_output(&x).unwrap();
        assert_eq!(m.forward_partial(0, &stem).unwrap(), full);
        for k in 0..=m.num_blocks() {
            let a = m.block_input(&x, k).unwrap();
            assert_eq!(m.forward_partial(k, &a).unwrap(), full);
        }
        let a1 = m.block_forward(0, &stem).unwrap();
        assert_eq!(a1, m.block_input(&x, 1).unwrap());
        assert!(m.forward_partial(3, &stem).is_err());
        assert!(m.forward_fp(&Tensor::zeros([1, 1, 5, 5])).is_err());
    }

    #[test]
    fn rejects_non_positive_running_var() {
        let mut m = toy_cnn(9);
        if let Layer::BatchNorm(bn) = &mut m.blocks[0].layers[0] {
            bn.var.data_mut()[0] = 0.0;
        }
        assert!(m.validate().is_err());
    }

    #[test]
    fn bn_inference_statistics() {
        // Feeding inputs drawn from the running statistics yields outputs with
        // mean beta and std gamma per channel.
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let bn = BnParams {
            mean: Tensor::from_slice(&[1.0, -2.0]),
            var: Tensor::from_slice(&[4.0, 0.25]),
            gamma: Tensor::from_slice(&[1.5, 0.5]),
            beta: Tensor::from_slice(&[0.3, -0.7]),
            eps: 0.0,
        };
        let n = 20000;
        let z = Tensor::randn([n, 2], 1.0, &mut r);
        let mut x = z.clone();
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let c = i % 2;
            *v = *v * bn.var.data()[c].sqrt() + bn.mean.data()[c];
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = batch_norm_eval(&mut tape, xv, &bn).unwrap();
        let y = tape.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(c).step_by(2).map(|&v| v as f64).collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            // 5 sigma bounds on the sample mean and variance.
            let g = bn.gamma.data()[c] as f64;
            assert!((mean - bn.beta.data()[c] as f64).abs() < 5.0 * g / (n as f64).sqrt());
            assert!((var - g * g).abs() < 5.0 * g * g * (2.0 / n as f64).sqrt());
        }
    }
}

