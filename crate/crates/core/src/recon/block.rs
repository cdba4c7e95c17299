use std::collections::BTreeMap;

use log::{debug, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Prediction;
use crate::model::{run_layers, FpHooks, ForwardHooks, LayerId, LayerQuant, ModelGraph, QuantState, Stage};
use crate::optim::{optimizer_step, AdamState};
use crate::quant::{QuantParams, RoundingVars};
use crate::tensor::{Tape, Tensor, Var};

use super::cache::Cache;
use super::{ReconConfig, ReconOptions};

/// One line of the progress log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressEntry {
    pub block: usize,
    pub iteration: usize,
    pub pd: Option<f32>,
    pub reg: Option<f32>,
    pub round_reg: f32,
    pub beta: f32,
    pub total: f32,
}

/// Outcome of reconstructing one block.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub iterations: usize,
    pub log: Vec<ProgressEntry>,
    /// Fraction of rounding offsets with `|2h - 1| > 0.99`.
    pub saturated_fraction: f32,
    /// `||B_hard - B_soft|| / ||B_soft||` on a calibration batch.
    pub hard_soft_rel_diff: f32,
    /// Smoothed objective rose during the final half of the run.
    pub monotone_violation: bool,
}

/// Learnable quantizer state of one conv/linear layer in the block.
pub struct LayerVars {
    pub id: LayerId,
    pub weight: QuantParams,
    pub rounding: Option<RoundingVars>,
    pub act: QuantParams,
    /// Learned activation scale (`None` for pass-through quantizers).
    pub scale: Option<f32>,
    theta_adam: Option<AdamState>,
    scale_adam: Option<AdamState>,
}

/// Quantized, soft-rounded evaluation of the block's conv/linear layers.
pub struct BlockVars {
    pub block: usize,
    pub layers: BTreeMap<LayerId, LayerVars>,
}

impl BlockVars {
    /// Starts from the initial quantizers in `state`.
    pub fn init(graph: &ModelGraph, block: usize, state: &QuantState) -> Result<Self> {
        let stage = Stage::Block(block);
        let mut layers = BTreeMap::new();
        for (index, layer) in graph.stage_layers(stage)?.iter().enumerate() {
            let Some(w) = layer.weight() else { continue };
            let id = LayerId::new(stage, index);
            let lq = state
                .get(&id)
                .ok_or_else(|| Error::InvalidArgument(format!("{id} has no initial quantizer")))?;
            let rounding = if lq.weight.is_passthrough() {
                None
            } else {
                if lq.weight.axis != Some(0) {
                    return Err(Error::InvalidArgument(format!("{id}: weight quantizer must be per output channel")));
                }
                Some(RoundingVars::init_from_weight(w, &lq.weight)?)
            };
            let scale = (!lq.act.is_passthrough()).then(|| lq.act.scale());
            layers.insert(
                id,
                LayerVars {
                    id,
                    weight: lq.weight.clone(),
                    theta_adam: rounding.as_ref().map(|r| AdamState::new(r.theta.numel())),
                    rounding,
                    act: lq.act.clone(),
                    scale,
                    scale_adam: scale.map(|_| AdamState::new(1)),
                },
            );
        }
        Ok(Self { block, layers })
    }

    fn set_beta(&mut self, beta: f32) {
        for lv in self.layers.values_mut() {
            if let Some(r) = &mut lv.rounding {
                r.beta = beta;
            }
        }
    }

    /// Final quantizers with hard rounding masks.
    pub fn finalize(&self) -> Result<Vec<(LayerId, LayerQuant)>> {
        self.layers
            .values()
            .map(|lv| {
                let act = match lv.scale {
                    Some(s) => QuantParams::per_tensor(s, lv.act.zero_points[0], lv.act.bits)?,
                    None => lv.act.clone(),
                };
                Ok((
                    lv.id,
                    LayerQuant {
                        weight: lv.weight.clone(),
                        mask: lv.rounding.as_ref().map(|r| r.hard_mask()),
                        act,
                    },
                ))
            })
            .collect()
    }

    pub fn saturated_fraction(&self, threshold: f32) -> f32 {
        let (mut sat, mut n) = (0.0f64, 0usize);
        for r in self.layers.values().filter_map(|l| l.rounding.as_ref()) {
            sat += r.saturated_fraction(threshold) as f64 * r.theta.numel() as f64;
            n += r.theta.numel();
        }
        if n == 0 {
            1.0
        } else {
            (sat / n as f64) as f32
        }
    }
}

/// Tape leaves of the learnable parameters for one step.
struct StepLeaves {
    theta: BTreeMap<LayerId, Var>,
    scale: BTreeMap<LayerId, Var>,
}

/// Forward hooks applying the block's learnable quantizers.
struct ReconHooks<'a> {
    vars: &'a BlockVars,
    leaves: &'a StepLeaves,
    soft: bool,
    drop: Option<(f32, &'a mut ChaCha8Rng)>,
}

impl ForwardHooks for ReconHooks<'_> {
    fn weight(&mut self, tape: &mut Tape, id: LayerId, w: &Tensor) -> Result<Var> {
        let lv = &self.vars.layers[&id];
        match (&lv.rounding, self.leaves.theta.get(&id)) {
            (Some(r), Some(&theta)) => {
                let zps: Vec<f32> = lv.weight.zero_points.iter().map(|&z| z as f32).collect();
                let qmax = lv.weight.qmax();
                tape.adaround(w, theta, &lv.weight.scales, &zps, 0.0, qmax, r.rect, self.soft)
            }
            _ => Ok(tape.constant(w.clone())),
        }
    }

    fn input(&mut self, tape: &mut Tape, id: LayerId, x: Var) -> Result<Var> {
        let lv = &self.vars.layers[&id];
        let Some(&s) = self.leaves.scale.get(&id) else {
            return Ok(x);
        };
        let q = tape.fake_quant(x, s, lv.act.zero_point(), lv.act.qmin(), lv.act.qmax())?;
        match &mut self.drop {
            Some((p, rng)) if *p > 0.0 => {
                let p = *p;
                let mask: Vec<bool> = (0..tape.value(x).numel()).map(|_| rng.random::<f32>() < p).collect();
                tape.drop_mix(q, x, mask)
            }
            _ => Ok(q),
        }
    }
}

/// Elementwise: FP value with probability `p`, otherwise the quantized one.
pub fn random_drop_mix(a_q: &Tensor, a_fp: &Tensor, p: f32, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("drop probability {p} outside [0, 1]")));
    }
    if a_q.shape() != a_fp.shape() {
        return Err(Error::shape("drop mix", a_q.shape(), a_fp.shape()));
    }
    let data = a_q.data().iter().zip(a_fp.data()).map(|(&q, &f)| if rng.random::<f32>() < p { f } else { q }).collect();
    Tensor::new(a_q.shape().to_vec(), data)
}

/// Everything reconstruction reads for one block. Unused caches are `None`
/// so that, for instance, regularization-only runs never see FP
/// predictions.
pub struct BlockCaches {
    /// Quantized-lineage block input.
    pub input_q: Cache,
    /// FP block output on the (optionally corrected) FP input.
    pub target: Option<Cache>,
    /// FP prediction probabilities at the configured temperature.
    pub fp_probs: Option<Cache>,
}

fn record_block(
    graph: &ModelGraph,
    block: usize,
    tape: &mut Tape,
    x: Var,
    vars: &BlockVars,
    leaves: &StepLeaves,
    soft: bool,
    drop: Option<(f32, &mut ChaCha8Rng)>,
) -> Result<Var> {
    let mut hooks = ReconHooks { vars, leaves, soft, drop };
    run_layers(tape, graph.stage_layers(Stage::Block(block))?, Stage::Block(block), x, &mut hooks)
}

fn fresh_leaves(tape: &mut Tape, vars: &BlockVars, learn: bool) -> StepLeaves {
    let mut leaves = StepLeaves {
        theta: BTreeMap::new(),
        scale: BTreeMap::new(),
    };
    for (&id, lv) in &vars.layers {
        if let Some(r) = &lv.rounding {
            leaves.theta.insert(id, tape.leaf(r.theta.clone(), learn));
        }
        if let Some(s) = lv.scale {
            leaves.scale.insert(id, tape.leaf(Tensor::scalar(s), learn));
        }
    }
    leaves
}

/// Block output under the current quantizers, soft or hard rounding, no drop.
pub fn block_output(graph: &ModelGraph, vars: &BlockVars, x: &Tensor, soft: bool) -> Result<Tensor> {
    let mut tape = Tape::new();
    let leaves = fresh_leaves(&mut tape, vars, false);
    let xv = tape.constant(x.clone());
    let out = record_block(graph, vars.block, &mut tape, xv, vars, &leaves, soft, None)?;
    Ok(tape.value(out).clone())
}

fn divergence(block: usize, iteration: usize, log: &[ProgressEntry], what: &str) -> Error {
    let tail: Vec<String> = log
        .iter()
        .rev()
        .take(3)
        .map(|e| format!("it {} pd {:?} reg {:?} round {:.4e} total {:.4e}", e.iteration, e.pd, e.reg, e.round_reg, e.total))
        .collect();
    Error::Divergence {
        block,
        iteration,
        detail: format!("{what}; last entries: [{}]", tail.join("; ")),
    }
}

/// Smoothed (window-mean) objective rises anywhere in the final half.
pub fn smoothed_increase(totals: &[f32], window: usize) -> bool {
    if window == 0 || totals.len() < 2 * window {
        return false;
    }
    let means: Vec<f32> = totals.chunks(window).filter(|c| c.len() == window).map(|c| c.iter().sum::<f32>() / window as f32).collect();
    let half = means.len() / 2;
    means[half..].windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-3) + 1e-12)
}

/// Jointly optimizes the rounding offsets and activation scales of block
/// `vars.block` and returns the finalized quantizers.
pub fn reconstruct_block(
    graph: &ModelGraph,
    vars: &mut BlockVars,
    caches: &BlockCaches,
    cfg: &ReconConfig,
    opts: ReconOptions,
    lambda_r: f32,
    rng: &mut ChaCha8Rng,
) -> Result<BlockReport> {
    let block = vars.block;
    let n = caches.input_q.rows();
    if n == 0 {
        return Err(Error::Empty("calibration cache"));
    }
    if opts.use_pd && caches.fp_probs.is_none() || opts.use_reg && caches.target.is_none() {
        return Err(Error::InvalidArgument("missing cache for the requested loss terms".into()));
    }
    let next = graph.boundary_stage(block + 1)?;
    let batch = cfg.batch_size.min(n);
    let total_iters = cfg.iterations;
    let mut report = BlockReport {
        block,
        iterations: total_iters,
        ..Default::default()
    };
    let mut totals = Vec::with_capacity(total_iters);

    for it in 0..total_iters {
        let idx: Vec<usize> = rand::seq::index::sample(rng, n, batch).into_vec();
        let beta = cfg.beta.beta(it, total_iters);
        let round_w = if cfg.beta.active(it, total_iters) { cfg.round_weight } else { 0.0 };
        vars.set_beta(beta);

        let mut tape = Tape::new();
        let leaves = fresh_leaves(&mut tape, vars, true);
        let x = caches.input_q.select_rows(&idx)?;
        let xv = tape.constant(x);

        let mut terms: Vec<Var> = Vec::new();
        let mut pd_val = None;
        let mut reg_val = None;
        let mut clean_out = None;
        if opts.use_pd {
            let pd_n = cfg.pd_batch_size.map_or(batch, |k| k.clamp(1, batch));
            let (xp, pidx) = if pd_n < batch {
                let sub = tape.value(xv).slice_rows(0, pd_n)?;
                (tape.constant(sub), &idx[..pd_n])
            } else {
                (xv, &idx[..])
            };
            let out = record_block(graph, block, &mut tape, xp, vars, &leaves, true, None)?;
            if pd_n == batch {
                clean_out = Some(out);
            }
            let logits = graph.run_from(&mut tape, next, out, &mut FpHooks)?;
            let target = caches.fp_probs.as_ref().unwrap().select_rows(pidx)?;
            let pd = tape.kl_div(&target, logits, cfg.temperature)?;
            pd_val = Some(tape.value(pd).item()?);
            terms.push(pd);
        }
        if opts.use_reg {
            let out = match clean_out {
                Some(o) if !opts.use_drop => o,
                _ => {
                    let drop = opts.use_drop.then_some((cfg.drop_prob, &mut *rng));
                    record_block(graph, block, &mut tape, xv, vars, &leaves, true, drop)?
                }
            };
            let target = tape.constant(caches.target.as_ref().unwrap().select_rows(&idx)?);
            let d = tape.sq_dist_per_sample(out, target)?;
            let reg = tape.mean(d)?;
            reg_val = Some(tape.value(reg).item()?);
            terms.push(if opts.use_pd { tape.mul_scalar(reg, lambda_r)? } else { reg });
        }
        let mut rr_val = 0.0;
        if round_w > 0.0 {
            for (&id, &theta) in &leaves.theta {
                let r = vars.layers[&id].rounding.as_ref().expect("theta leaf implies rounding vars");
                let rr = tape.round_reg(theta, beta, r.rect)?;
                rr_val += tape.value(rr).item()?;
                terms.push(tape.mul_scalar(rr, round_w)?);
            }
        }
        let Some((&first, rest)) = terms.split_first() else {
            break;
        };
        let loss = rest.iter().try_fold(first, |acc, &t| tape.add(acc, t)).map_err(|e| match e {
            Error::NonFinite(w) => divergence(block, it, &report.log, w),
            e => e,
        })?;
        let total = tape.value(loss).item()?;
        if !total.is_finite() {
            return Err(divergence(block, it, &report.log, "non-finite loss"));
        }
        totals.push(total);
        if it % cfg.log_every.max(1) == 0 || it + 1 == total_iters {
            let e = ProgressEntry {
                block,
                iteration: it,
                pd: pd_val,
                reg: reg_val,
                round_reg: rr_val,
                beta,
                total,
            };
            debug!("{}", serde_json::to_string(&e).unwrap_or_default());
            report.log.push(e);
        }

        let grads = tape.backward(loss)?;
        for (id, lv) in vars.layers.iter_mut() {
            if let (Some(r), Some(&tv)) = (&mut lv.rounding, leaves.theta.get(id)) {
                if let Some(g) = grads.get(tv) {
                    optimizer_step(r.theta.data_mut(), g.data(), lv.theta_adam.as_mut().unwrap(), cfg.lr_round)
                        .map_err(|_| divergence(block, it, &report.log, "non-finite rounding gradient"))?;
                }
            }
            if let (Some(s), Some(&sv)) = (&mut lv.scale, leaves.scale.get(id)) {
                if let Some(g) = grads.get(sv) {
                    let mut p = [*s];
                    optimizer_step(&mut p, g.data(), lv.scale_adam.as_mut().unwrap(), cfg.lr_scale)
                        .map_err(|_| divergence(block, it, &report.log, "non-finite scale gradient"))?;
                    *s = p[0].max(crate::quant::DEGENERATE_SCALE);
                }
            }
        }
    }

    report.monotone_violation = smoothed_increase(&totals[totals.len() / 2..], 100);
    if report.monotone_violation {
        warn!("block {block}: smoothed objective increased during the final half of reconstruction");
    }
    report.saturated_fraction = vars.saturated_fraction(0.99);
    let probe = caches.input_q.slice_rows(0, n.min(256))?;
    let soft = block_output(graph, vars, &probe, true)?;
    let hard = block_output(graph, vars, &probe, false)?;
    let num: f64 = soft.data().iter().zip(hard.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    let den: f64 = soft.data().iter().map(|&a| (a as f64).powi(2)).sum();
    report.hard_soft_rel_diff = if den > 0.0 { (num / den).sqrt() as f32 } else { num.sqrt() as f32 };
    Ok(report)
}

/// Teacher probabilities at temperature `t`.
pub fn teacher_probs(fp_logits: &Tensor, t: f32) -> Result<Tensor> {
    Ok(Prediction::from_logits(fp_logits.clone(), t)?.probs)
}
