//! Batch-norm guided correction of full-precision calibration activations.
//!
//! The input of a block is nudged so that the batch statistics seen by the
//! block's batch-norm layers move toward their stored running statistics,
//! while an anchor term keeps it close to the original activation.

use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{batch_norm_eval, run_layers, BnParams, ForwardHooks, Layer, LayerId, ModelGraph, Stage};
use crate::optim::{optimizer_step, AdamState};
use crate::tensor::{Tape, Tensor, Var};

/// How the anchor `||A_dc - A_fp||^2` is reduced over elements.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorReduction {
    Sum,
    /// Divided by the element count of the batch, which keeps `lambda_c`
    /// meaningful regardless of batch and feature size.
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcConfig {
    pub lambda_c: f32,
    pub lr: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub anchor: AnchorReduction,
}

impl Default for DcConfig {
    fn default() -> Self {
        Self {
            lambda_c: 0.02,
            lr: 1e-3,
            steps: 500,
            batch_size: 256,
            anchor: AnchorReduction::Mean,
        }
    }
}

/// Per-channel batch statistics of one BN input.
#[derive(Clone, Debug, PartialEq)]
pub struct BnInputStats {
    pub layer: LayerId,
    pub mean: Vec<f32>,
    /// Population standard deviation.
    pub std: Vec<f32>,
}

/// Running statistics the correction pulls toward.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStatTarget {
    pub layer: LayerId,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl BnStatTarget {
    pub fn from_bn(layer: LayerId, bn: &BnParams) -> Self {
        Self {
            layer,
            mean: bn.mean.data().to_vec(),
            std: bn.running_std(),
        }
    }
}

/// Records the input of every BN layer while running inference-mode BN.
struct BnTap {
    inputs: Vec<(LayerId, Var)>,
}

impl ForwardHooks for BnTap {
    fn batch_norm(&mut self, tape: &mut Tape, id: LayerId, x: Var, bn: &BnParams) -> Result<Var> {
        self.inputs.push((id, x));
        batch_norm_eval(tape, x, bn)
    }
}

fn bn_layers(layers: &[Layer], stage: Stage) -> Vec<(LayerId, &BnParams)> {
    layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::BatchNorm(bn) => Some((LayerId::new(stage, i), bn)),
            _ => None,
        })
        .collect()
}

/// Runs `layers` up to the last BN and returns the BN-input vars.
fn tap_bn_inputs(tape: &mut Tape, layers: &[Layer], stage: Stage, a: Var) -> Result<Vec<(LayerId, Var)>> {
    let Some(last) = layers.iter().rposition(|l| matches!(l, Layer::BatchNorm(_))) else {
        return Ok(Vec::new());
    };
    let mut tap = BnTap { inputs: Vec::new() };
    run_layers(tape, &layers[..=last], stage, a, &mut tap)?;
    Ok(tap.inputs)
}

/// Records `(mean, std)` per channel of `x` on the tape.
fn channel_stats(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let c = tape.value(x).channel_layout()?.1;
    let mean = tape.channel_mean(x)?;
    let neg = tape.mul_scalar(mean, -1.0)?;
    let ones = tape.constant(Tensor::ones([c]));
    let centered = tape.channel_affine(x, ones, neg)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.channel_mean(sq)?;
    // The offset keeps the square root differentiable for constant channels.
    let var = tape.add_scalar(var, 1e-12)?;
    let std = tape.powf(var, 0.5)?;
    Ok((mean, std))
}

/// Per-channel mean and population std of each BN input of a block.
pub fn collect_bn_inputs(layers: &[Layer], stage: Stage, a: &Tensor) -> Result<Vec<BnInputStats>> {
    if a.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch of {} is too small for variance estimates",
            a.rows()
        )));
    }
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let taps = tap_bn_inputs(&mut tape, layers, stage, av)?;
    let mut out = Vec::with_capacity(taps.len());
    for (layer, x) in taps {
        let (m, s) = channel_stats(&mut tape, x)?;
        out.push(BnInputStats {
            layer,
            mean: tape.value(m).data().to_vec(),
            std: tape.value(s).data().to_vec(),
        });
    }
    Ok(out)
}

/// Objective terms at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcStep {
    pub stat: f32,
    pub anchor: f32,
    pub objective: f32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DcReport {
    /// Per batch: objective terms before the first and after the last step.
    pub batches: Vec<(DcStep, DcStep)>,
    pub reverted_batches: usize,
    pub skipped: bool,
}

struct Objective {
    loss: Var,
    step: DcStep,
}

fn record_objective(
    tape: &mut Tape,
    layers: &[Layer],
    stage: Stage,
    a: Var,
    a_fp: &Tensor,
    targets: &[BnStatTarget],
    cfg: &DcConfig,
) -> Result<Objective> {
    let taps = tap_bn_inputs(tape, layers, stage, a)?;
    let mut stat_terms = Vec::new();
    for ((_, x), t) in taps.into_iter().zip(targets) {
        let (m, s) = channel_stats(tape, x)?;
        for (v, target) in [(m, &t.mean), (s, &t.std)] {
            let tv = tape.constant(Tensor::from_slice(target));
            let d = tape.sub(v, tv)?;
            let d2 = tape.mul(d, d)?;
            stat_terms.push(tape.sum(d2)?);
        }
    }
    let mut stat = match stat_terms.split_first() {
        Some((&first, rest)) => rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))?,
        None => return Err(Error::InvalidArgument("block has no batch-norm layers".into())),
    };
    let fp = tape.constant(a_fp.clone());
    let d = tape.sub(a, fp)?;
    let d2 = tape.mul(d, d)?;
    let anchor = match cfg.anchor {
        AnchorReduction::Sum => tape.sum(d2)?,
        AnchorReduction::Mean => tape.mean(d2)?,
    };
    let step = DcStep {
        stat: tape.value(stat).item()?,
        anchor: tape.value(anchor).item()?,
        objective: 0.0,
    };
    stat = tape.mul_scalar(stat, cfg.lambda_c)?;
    let loss = tape.add(stat, anchor)?;
    Ok(Objective {
        step: DcStep {
            objective: tape.value(loss).item()?,
            ..step
        },
        loss,
    })
}

/// Corrects one batch of block inputs. Returns the corrected batch and the
/// objective terms before and after. On divergence or an objective that
/// ends above its start, the original batch is returned.
pub fn correct_batch(
    layers: &[Layer],
    stage: Stage,
    a_fp: &Tensor,
    targets: &[BnStatTarget],
    cfg: &DcConfig,
) -> Result<(Tensor, DcStep, DcStep, bool)> {
    if a_fp.rows() < 2 {
        return Err(Error::InvalidArgument("distribution correction needs at least 2 samples".into()));
    }
    let mut a = a_fp.clone();
    let mut adam = AdamState::new(a.numel());
    let mut first = None;
    let mut diverged = false;
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let av = tape.leaf(a.clone(), true);
        let obj = match record_objective(&mut tape, layers, stage, av, a_fp, targets, cfg) {
            Ok(o) => o,
            Err(Error::NonFinite(_)) => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        debug!("dc step {step}: stat {:.6e} anchor {:.6e}", obj.step.stat, obj.step.anchor);
        first.get_or_insert(obj.step);
        let grads = tape.backward(obj.loss)?;
        let g = grads.get(av).ok_or(Error::NonFinite("dc gradient"))?;
        if optimizer_step(a.data_mut(), g.data(), &mut adam, cfg.lr).is_err() || !a.is_finite() {
            diverged = true;
            break;
        }
    }
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let end = record_objective(&mut tape, layers, stage, av, a_fp, targets, cfg).map(|o| o.step);
    let av0 = {
        let mut t = Tape::new();
        let v = t.constant(a_fp.clone());
        record_objective(&mut t, layers, stage, v, a_fp, targets, cfg)?.step
    };
    let start = first.unwrap_or(av0);
    match end {
        Ok(end) if !diverged && end.objective.is_finite() && end.objective <= start.objective => Ok((a, start, end, false)),
        _ => {
            warn!("distribution correction diverged or did not improve; keeping the original activations");
            Ok((a_fp.clone(), start, start, true))
        }
    }
}

/// Corrects the FP input of `block` batch by batch. Blocks without BN
/// layers, and `steps == 0`, return the input unchanged.
pub fn correct_distribution(graph: &ModelGraph, block: usize, a_fp: &Tensor, cfg: &DcConfig) -> Result<(Tensor, DcReport)> {
    let stage = Stage::Block(block);
    let layers = graph.stage_layers(stage)?;
    let targets: Vec<BnStatTarget> = bn_layers(layers, stage)
        .into_iter()
        .map(|(id, bn)| BnStatTarget::from_bn(id, bn))
        .collect();
    if targets.is_empty() || cfg.steps == 0 {
        return Ok((
            a_fp.clone(),
            DcReport {
                skipped: true,
                ..Default::default()
            },
        ));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("dc batch_size must be >= 2".into()));
    }
    let n = a_fp.rows();
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + cfg.batch_size).min(n);
        if n - end < 2 {
            end = n;
        }
        bounds.push((start, end));
        start = end;
    }
    let mut parts = Vec::with_capacity(bounds.len());
    let mut report = DcReport::default();
    for (s, e) in bounds {
        let batch = a_fp.slice_rows(s, e)?;
        let (out, before, after, reverted) = correct_batch(layers, stage, &batch, &targets, cfg)?;
        report.batches.push((before, after));
        report.reverted_batches += reverted as usize;
        parts.push(out);
    }
    Ok((Tensor::concat_rows(&parts)?, report))
}

/// Equal-width histogram of `before` and `after` over their joint range.
pub fn histogram(before: &Tensor, after: &Tensor, bins: usize) -> Result<Vec<(f32, f32, u64, u64)>> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let (l1, h1) = before.min_max().ok_or(Error::Empty("histogram input"))?;
    let (l2, h2) = after.min_max().ok_or(Error::Empty("histogram input"))?;
    let (lo, mut hi) = (l1.min(l2), h1.max(h2));
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f32;
    let index = |v: f32| (((v - lo) / width) as usize).min(bins - 1);
    let mut rows: Vec<(f32, f32, u64, u64)> = (0..bins)
        .map(|i| (lo + i as f32 * width, if i + 1 == bins { hi } else { lo + (i + 1) as f32 * width }, 0, 0))
        .collect();
    before.data().iter().for_each(|&v| rows[index(v)].2 += 1);
    after.data().iter().for_each(|&v| rows[index(v)].3 += 1);
    Ok(rows)
}

#[derive(Serialize)]
struct HistRow {
    bin_left: f32,
    bin_right: f32,
    count_before: u64,
    count_after: u64,
}

/// Header: `bin_left,bin_right,count_before,count_after`.
pub fn write_histogram_csv(path: &Path, rows: &[(f32, f32, u64, u64)]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for &(bin_left, bin_right, count_before, count_after) in rows {
        w.serialize(HistRow {
            bin_left,
            bin_right,
            count_before,
            count_after,
        })?;
    }
    w.flush()?;
    Ok(())
}
