use std::collections::BTreeMap;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BnParams, Block, ForwardHooks, Layer, LayerId, ModelGraph, QuantizedModel, Stage};
use crate::optim::{optimizer_step, AdamState};
use crate::tensor::{Tape, Tensor, Var};

use super::data::{DataBundle, TaskSpec, ToyDataset};

fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), (2.0 / fan_in as f32).sqrt(), rng)
}

fn linear(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Linear {
        weight: he(&[cout, cin], cin, rng),
        bias: Some(Tensor::zeros([cout])),
    }
}

fn conv(cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::Conv {
        weight: he(&[cout, cin, 3, 3], cin * 9, rng),
        bias: Some(Tensor::zeros([cout])),
        stride,
        pad: 1,
    }
}

fn bn(c: usize) -> Layer {
    Layer::BatchNorm(BnParams::identity(c))
}

/// Three-block MLP: a linear stem, then `[BN, ReLU, Linear]` blocks, the
/// last one producing the logits.
pub fn mlp_model(dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let stem = vec![linear(dim, hidden, &mut r)];
    let blocks = vec![
        Block::new(vec![bn(hidden), Layer::Relu, linear(hidden, hidden, &mut r)]),
        Block::new(vec![bn(hidden), Layer::Relu, linear(hidden, hidden, &mut r)]),
        Block::new(vec![bn(hidden), Layer::Relu, linear(hidden, classes, &mut r)]),
    ];
    ModelGraph::new(stem, blocks, vec![], vec![dim], classes)
}

/// Small CNN for `size x size` single-channel images: strided conv stem,
/// a downsampling block, a residual block, a second downsampling block,
/// then global average pooling and a linear classifier.
pub fn cnn_model(size: usize, classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let stem = vec![conv(1, 8, 2, &mut r)];
    let blocks = vec![
        Block::new(vec![bn(8), Layer::Relu, conv(8, 16, 2, &mut r)]),
        Block::new(vec![
            bn(16),
            Layer::Relu,
            conv(16, 16, 1, &mut r),
            bn(16),
            Layer::Relu,
            conv(16, 16, 1, &mut r),
            Layer::AddResidual,
        ]),
        Block::new(vec![bn(16), Layer::Relu, conv(16, 32, 2, &mut r), bn(32), Layer::Relu]),
    ];
    let head = vec![Layer::AvgPool, linear(32, classes, &mut r)];
    ModelGraph::new(stem, blocks, head, vec![1, size, size], classes)
}

/// Default architecture for a task.
pub fn model_for(task: &TaskSpec, seed: u64) -> Result<ModelGraph> {
    match *task {
        TaskSpec::Clusters { classes, dim, .. } => mlp_model(dim, 32, classes, seed),
        TaskSpec::Shapes { size, .. } => cnn_model(size, TaskSpec::SHAPE_CLASSES, seed),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Weight of the newest batch in the running BN statistics.
    pub bn_momentum: f32,
    /// Minimum validation accuracy in percent.
    pub val_floor: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 3e-3,
            bn_momentum: 0.1,
            val_floor: 90.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Param {
    Weight,
    Bias,
    Gamma,
    Beta,
}

type ParamKey = (LayerId, Param);

/// Training-mode forward: every parameter is a leaf and BN normalizes
/// with batch statistics.
#[derive(Default)]
struct TrainHooks {
    params: Vec<(ParamKey, Var)>,
    /// Batch mean, biased variance and elements per channel of each BN input.
    bn_stats: Vec<(LayerId, Var, Var, usize)>,
}

impl ForwardHooks for TrainHooks {
    fn weight(&mut self, tape: &mut Tape, id: LayerId, w: &Tensor) -> Result<Var> {
        let v = tape.leaf(w.clone(), true);
        self.params.push(((id, Param::Weight), v));
        Ok(v)
    }

    fn bias(&mut self, tape: &mut Tape, id: LayerId, b: &Tensor) -> Result<Var> {
        let v = tape.leaf(b.clone(), true);
        self.params.push(((id, Param::Bias), v));
        Ok(v)
    }

    fn batch_norm(&mut self, tape: &mut Tape, id: LayerId, x: Var, bn: &BnParams) -> Result<Var> {
        let c = bn.channels();
        let elems = tape.value(x).numel() / c;
        let mean = tape.channel_mean(x)?;
        let neg = tape.mul_scalar(mean, -1.0)?;
        let ones = tape.constant(Tensor::ones([c]));
        let xc = tape.channel_affine(x, ones, neg)?;
        let sq = tape.mul(xc, xc)?;
        let var = tape.channel_mean(sq)?;
        let ve = tape.add_scalar(var, bn.eps)?;
        let inv = tape.powf(ve, -0.5)?;
        let zeros = tape.constant(Tensor::zeros([c]));
        let xn = tape.channel_affine(xc, inv, zeros)?;
        let g = tape.leaf(bn.gamma.clone(), true);
        let b = tape.leaf(bn.beta.clone(), true);
        self.params.push(((id, Param::Gamma), g));
        self.params.push(((id, Param::Beta), b));
        self.bn_stats.push((id, mean, var, elems));
        tape.channel_affine(xn, g, b)
    }
}

fn layer_mut(graph: &mut ModelGraph, id: LayerId) -> &mut Layer {
    match id.stage {
        Stage::Stem => &mut graph.stem[id.index],
        Stage::Block(b) => &mut graph.blocks[b].layers[id.index],
        Stage::Head => &mut graph.head[id.index],
    }
}

fn param_mut(graph: &mut ModelGraph, (id, p): ParamKey) -> &mut Tensor {
    match (layer_mut(graph, id), p) {
        (Layer::Conv { weight, .. } | Layer::Linear { weight, .. }, Param::Weight) => weight,
        (Layer::Conv { bias: Some(b), .. } | Layer::Linear { bias: Some(b), .. }, Param::Bias) => b,
        (Layer::BatchNorm(bn), Param::Gamma) => &mut bn.gamma,
        (Layer::BatchNorm(bn), Param::Beta) => &mut bn.beta,
        _ => unreachable!("parameter recorded for a layer without it"),
    }
}

/// Anything producing logits for a batch of inputs.
pub trait Classifier {
    fn logits(&self, x: &Tensor) -> Result<Tensor>;
}

impl Classifier for ModelGraph {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_logits(x)
    }
}

impl Classifier for QuantizedModel {
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_logits(x)
    }
}

/// Top-1 accuracy in percent.
pub fn evaluate(model: &dyn Classifier, data: &ToyDataset) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let logits = model.logits(&data.samples)?;
    let k = logits.row_len();
    let correct = logits
        .data()
        .chunks(k)
        .zip(&data.labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == l
        })
        .count();
    Ok(100.0 * correct as f32 / data.len() as f32)
}

/// Trains `graph` with Adam on cross-entropy. BN running statistics are
/// exponential moving averages of the training-batch statistics (the
/// variance unbiased). Fails with the accuracy curve when the final
/// validation accuracy is below `cfg.val_floor`.
pub fn train_fp(mut graph: ModelGraph, data: &DataBundle, cfg: &TrainConfig, seed: u64) -> Result<ModelGraph> {
    if cfg.batch_size < 2 || cfg.epochs == 0 {
        return Err(Error::Config("training needs batch_size >= 2 and epochs > 0".into()));
    }
    let n = data.train.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam: BTreeMap<ParamKey, AdamState> = BTreeMap::new();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            let x = data.train.samples.select_rows(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
            let mut tape = Tape::new();
            let mut hooks = TrainHooks::default();
            let xv = tape.constant(x);
            let logits = graph.run_from(&mut tape, Stage::Stem, xv, &mut hooks)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            loss_sum += tape.value(loss).item()?;
            batches += 1;
            let grads = tape.backward(loss)?;
            for &(key, v) in &hooks.params {
                if let Some(g) = grads.get(v) {
                    let p = param_mut(&mut graph, key);
                    let st = adam.entry(key).or_insert_with(|| AdamState::new(p.numel()));
                    optimizer_step(p.data_mut(), g.data(), st, cfg.lr)?;
                }
            }
            let m = cfg.bn_momentum;
            for &(id, mean, var, elems) in &hooks.bn_stats {
                let bm = tape.value(mean).clone();
                let bv = tape.value(var).clone();
                let unbias = if elems > 1 { elems as f32 / (elems - 1) as f32 } else { 1.0 };
                if let Layer::BatchNorm(bn) = layer_mut(&mut graph, id) {
                    bn.mean = bn.mean.zip_map(&bm, |r, b| (1.0 - m) * r + m * b)?;
                    bn.var = bn.var.zip_map(&bv, |r, b| (1.0 - m) * r + m * b * unbias)?;
                }
            }
        }
        let val = evaluate(&graph, &data.val)?;
        info!("epoch {epoch}: loss {:.4}, val acc {val:.2}", loss_sum / batches.max(1) as f32);
        curve.push(val);
    }
    let achieved = *curve.last().expect("epochs > 0");
    if achieved < cfg.val_floor {
        return Err(Error::TrainingFloor {
            achieved,
            floor: cfg.val_floor,
            curve,
        });
    }
    Ok(graph)
}
