//! Block-by-block reconstruction of a quantized network.
//!
//! Blocks are processed from the input toward the output. For each block
//! the activation scales and weight rounding offsets are optimized jointly
//! against the prediction difference of the whole network and, optionally,
//! a feature-reconstruction term on the block output.

mod block;
mod cache;

use std::path::PathBuf;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dc::{self, DcConfig, DcReport};
use crate::error::{Error, Result};
use crate::metrics::MetricKind;
use crate::model::{LayerId, LayerQuant, ModelGraph, QuantHooks, QuantState, QuantizedModel, Stage};
use crate::quant::{BetaSchedule, QuantParams, PASSTHROUGH_BITS};
use crate::scale_search::{search_activation_scale, search_weight_scale, ScaleGrid};
use crate::tensor::Tensor;

pub use block::{
    block_output, random_drop_mix, reconstruct_block, smoothed_increase, teacher_probs, BlockCaches, BlockReport, BlockVars,
    ProgressEntry,
};
pub use cache::Cache;

/// Which layers keep 8-bit quantizers regardless of the target bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitPolicy {
    /// Every layer uses the target bits.
    Uniform,
    /// First and last conv/linear layers (weights and inputs) at 8 bits.
    #[default]
    FirstLast8,
    /// As `FirstLast8`, and the first layer's output (the input of the
    /// second conv/linear layer) also at 8 bits.
    FirstLastOutput8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub bit_policy: BitPolicy,
    /// Weight of the block-output term when combined with the prediction
    /// loss. `None` picks 0.2 for residual networks and 0.1 otherwise.
    pub lambda_r: Option<f32>,
    pub drop_prob: f32,
    pub lr_scale: f32,
    pub lr_round: f32,
    pub iterations: usize,
    pub batch_size: usize,
    /// Weight of the rounding regularizer once the warm-up is over.
    pub round_weight: f32,
    pub beta: BetaSchedule,
    pub temperature: f32,
    /// Computes the prediction term on only this many samples of each batch.
    pub pd_batch_size: Option<usize>,
    /// Points of the normalized grid used to initialize scales.
    pub grid_points: usize,
    /// Calibration samples used by the initial scale searches.
    pub init_search_samples: Option<usize>,
    /// Metric for the initial activation-scale search.
    pub init_metric: MetricKind,
    pub dc: DcConfig,
    pub log_every: usize,
    /// Caches larger than this many bytes in total spill to disk.
    pub memory_budget_bytes: usize,
    pub cache_dir: Option<PathBuf>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            weight_bits: 2,
            act_bits: 2,
            bit_policy: BitPolicy::FirstLast8,
            lambda_r: None,
            drop_prob: 0.5,
            lr_scale: 4e-5,
            lr_round: 3e-3,
            iterations: 20000,
            batch_size: 32,
            round_weight: 1.0,
            beta: BetaSchedule::default(),
            temperature: 1.0,
            pd_batch_size: None,
            grid_points: 64,
            init_search_samples: Some(256),
            init_metric: MetricKind::LocalMse,
            dc: DcConfig::default(),
            log_every: 50,
            memory_budget_bytes: 512 << 20,
            cache_dir: None,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.weight_bits < 2 || self.act_bits < 2 {
            return bad("bit-widths must be >= 2");
        }
        if self.lambda_r.is_some_and(|l| !(l >= 0.0)) {
            return bad("lambda_r must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return bad("drop_prob must lie in [0, 1]");
        }
        if self.iterations == 0 {
            return bad("iterations must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if !(self.lr_scale >= 0.0 && self.lr_round >= 0.0 && self.round_weight >= 0.0) {
            return bad("learning rates and round_weight must be >= 0");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if self.grid_points == 0 {
            return bad("grid_points must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta.warmup) || !(self.beta.start > self.beta.end && self.beta.end > 0.0) {
            return bad("beta schedule must decrease to a positive end after a warm-up in [0, 1)");
        }
        Ok(())
    }

    /// `lambda_r`, or its architecture default.
    pub fn lambda_r_for(&self, graph: &ModelGraph) -> f32 {
        self.lambda_r
            .unwrap_or(if graph.blocks.iter().any(|b| b.has_skip()) { 0.2 } else { 0.1 })
    }

    /// `(weight_bits, act_bits)` of every conv/linear layer.
    pub fn layer_bits(&self, graph: &ModelGraph) -> Vec<(LayerId, u32, u32)> {
        let ids = graph.parametric_layers();
        let last = ids.len().saturating_sub(1);
        ids.iter()
            .enumerate()
            .map(|(i, &id)| {
                let edge = i == 0 || i == last;
                let (w, a) = match self.bit_policy {
                    BitPolicy::Uniform => (self.weight_bits, self.act_bits),
                    BitPolicy::FirstLast8 if edge => (8, 8),
                    BitPolicy::FirstLastOutput8 if edge => (8, 8),
                    BitPolicy::FirstLastOutput8 if i == 1 => (self.weight_bits, 8),
                    _ => (self.weight_bits, self.act_bits),
                };
                // Targets above 8 bits are kept as given.
                (id, w.max(self.weight_bits), a.max(self.act_bits))
            })
            .collect()
    }
}

/// Which objective terms and corrections are used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconOptions {
    pub use_pd: bool,
    pub use_reg: bool,
    pub use_dc: bool,
    pub use_drop: bool,
}

impl ReconOptions {
    /// Prediction loss, block regularization, correction and drop.
    pub const FULL: Self = Self {
        use_pd: true,
        use_reg: true,
        use_dc: true,
        use_drop: true,
    };
    pub const PD_REG: Self = Self {
        use_pd: true,
        use_reg: true,
        use_dc: false,
        use_drop: true,
    };
    pub const PD_ONLY: Self = Self {
        use_pd: true,
        use_reg: false,
        use_dc: false,
        use_drop: false,
    };
    /// Block-output reconstruction with drop, no prediction term.
    pub const REG_ONLY: Self = Self {
        use_pd: false,
        use_reg: true,
        use_dc: false,
        use_drop: true,
    };
    /// Initial quantizers only.
    pub const NONE: Self = Self {
        use_pd: false,
        use_reg: false,
        use_dc: false,
        use_drop: false,
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_pd {
            parts.push("pd");
        }
        if self.use_reg {
            parts.push("reg");
        }
        if self.use_dc {
            parts.push("dc");
        }
        if self.use_drop {
            parts.push("drop");
        }
        if parts.is_empty() {
            "init".into()
        } else {
            parts.join("+")
        }
    }
}

impl Default for ReconOptions {
    fn default() -> Self {
        Self::FULL
    }
}

/// Summary of a quantization run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub options: Option<ReconOptions>,
    pub lambda_r: f32,
    pub blocks: Vec<BlockReport>,
    pub dc: Vec<DcReport>,
    pub spilled_caches: usize,
}

fn check_calib(graph: &ModelGraph, calib: &Tensor) -> Result<()> {
    if calib.rows() < 2 {
        return Err(Error::InvalidArgument("calibration set needs at least 2 samples".into()));
    }
    if calib.shape()[1..] != graph.input_shape[..] {
        return Err(Error::shape("calibration input", &calib.shape()[1..], &graph.input_shape));
    }
    Ok(())
}

/// Initial quantizers for `id`: MSE-searched per-channel weight scale and
/// a searched activation scale. `state` must hold every earlier layer.
#[allow(clippy::too_many_arguments)]
fn init_layer(
    graph: &ModelGraph,
    state: &mut QuantState,
    id: LayerId,
    w_bits: u32,
    a_bits: u32,
    search_calib: &Tensor,
    search_logits: Option<&Tensor>,
    grid: &ScaleGrid,
    metric: MetricKind,
) -> Result<()> {
    let w = graph.layer(id)?.weight().expect("parametric layer");
    let weight = search_weight_scale(w, w_bits, grid)?;
    state.insert(
        id,
        LayerQuant {
            weight: weight.clone(),
            mask: None,
            act: QuantParams::passthrough(),
        },
    );
    let act = if a_bits >= PASSTHROUGH_BITS {
        QuantParams::passthrough()
    } else {
        search_activation_scale(graph, state, id, search_calib, grid, metric, a_bits, search_logits)?
    };
    state.insert(id, LayerQuant { weight, mask: None, act });
    Ok(())
}

/// Quantizes every conv/linear layer of `graph`.
///
/// Stem and head layers keep their initial (nearest-rounding) quantizers;
/// each block is then reconstructed in order. When neither loss term is
/// enabled the initial quantizers are returned.
pub fn quantize_model(
    graph: &ModelGraph,
    calib: &Tensor,
    cfg: &ReconConfig,
    opts: ReconOptions,
    seed: u64,
) -> Result<(QuantizedModel, QuantReport)> {
    cfg.validate()?;
    check_calib(graph, calib)?;
    if opts.use_dc && !graph.blocks.iter().any(|b| b.bn_layers().next().is_some()) {
        return Err(Error::Config("use_dc requires batch-norm layers in at least one block".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = ScaleGrid::uniform(cfg.grid_points)?;
    let bits: std::collections::BTreeMap<LayerId, (u32, u32)> =
        cfg.layer_bits(graph).into_iter().map(|(id, w, a)| (id, (w, a))).collect();
    let lambda_r = cfg.lambda_r_for(graph);
    let metric = cfg.init_metric;

    let fp_logits = (opts.use_pd || metric.is_global()).then(|| graph.forward_logits(calib)).transpose()?;
    let n_search = cfg.init_search_samples.unwrap_or(calib.rows()).clamp(2, calib.rows());
    let search_calib = calib.slice_rows(0, n_search)?;
    let search_logits = fp_logits.as_ref().map(|l| l.slice_rows(0, n_search)).transpose()?;

    let tmp;
    let cache_dir = match &cfg.cache_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            d.clone()
        }
        None => {
            tmp = tempfile::Builder::new().prefix("predquant-cache").tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let mut report = QuantReport {
        options: Some(opts),
        lambda_r,
        ..Default::default()
    };
    let mut used = 0usize;
    let fp_probs = match fp_logits.as_ref().filter(|_| opts.use_pd) {
        Some(l) => Some(Cache::store(
            teacher_probs(l, cfg.temperature)?,
            &mut used,
            cfg.memory_budget_bytes,
            &cache_dir,
            "fp_probs",
        )?),
        None => None,
    };

    let mut state = QuantState::new();
    let init_stage = |state: &mut QuantState, stage: Stage| -> Result<()> {
        for (index, layer) in graph.stage_layers(stage)?.iter().enumerate() {
            if layer.is_parametric() {
                let id = LayerId::new(stage, index);
                let (wb, ab) = bits[&id];
                init_layer(graph, state, id, wb, ab, &search_calib, search_logits.as_ref(), &grid, metric)?;
            }
        }
        Ok(())
    };

    init_stage(&mut state, Stage::Stem)?;
    let reconstruct = opts.use_pd || opts.use_reg;
    for l in 0..graph.num_blocks() {
        init_stage(&mut state, Stage::Block(l))?;
        if !reconstruct {
            continue;
        }
        info!("reconstructing block {l} ({})", opts.label());
        let mut block_used = used;
        let prefix: QuantState = state
            .iter()
            .filter(|(id, _)| id.stage < Stage::Block(l))
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        let mut hooks = QuantHooks::new(graph, &prefix)?;
        let input_q = graph.chunked(calib, |tape, v| graph.run_until(tape, Stage::Block(l), v, &mut hooks))?;
        let input_q = Cache::store(input_q, &mut block_used, cfg.memory_budget_bytes, &cache_dir, &format!("block{l}_input_q"))?;
        let target = if opts.use_reg {
            let a_fp = graph.block_input(calib, l)?;
            let a_in = if opts.use_dc {
                let (a_dc, rep) = dc::correct_distribution(graph, l, &a_fp, &cfg.dc)?;
                report.dc.push(rep);
                a_dc
            } else {
                a_fp
            };
            let t = graph.block_forward(l, &a_in)?;
            Some(Cache::store(t, &mut block_used, cfg.memory_budget_bytes, &cache_dir, &format!("block{l}_target"))?)
        } else {
            None
        };
        report.spilled_caches += [Some(&input_q), target.as_ref()].iter().flatten().filter(|c| c.is_spilled()).count();
        let caches = BlockCaches {
            input_q,
            target,
            fp_probs: if opts.use_pd { fp_probs.as_ref().map(clone_cache).transpose()? } else { None },
        };
        let mut vars = BlockVars::init(graph, l, &state)?;
        let mut block_opts = opts;
        block_opts.use_drop = opts.use_drop && opts.use_reg;
        let rep = reconstruct_block(graph, &mut vars, &caches, cfg, block_opts, lambda_r, &mut rng)?;
        info!(
            "block {l}: saturated {:.4}, hard/soft diff {:.3e}",
            rep.saturated_fraction, rep.hard_soft_rel_diff
        );
        report.blocks.push(rep);
        for (id, lq) in vars.finalize()? {
            state.insert(id, lq);
        }
    }
    init_stage(&mut state, Stage::Head)?;
    if fp_probs.as_ref().is_some_and(|c| c.is_spilled()) {
        report.spilled_caches += 1;
    }
    Ok((QuantizedModel::new(graph.clone(), state)?, report))
}

fn clone_cache(c: &Cache) -> Result<Cache> {
    match c {
        Cache::Memory(t) => Ok(Cache::Memory(t.clone())),
        Cache::Disk { path, .. } => Cache::open(path),
    }
}

#[cfg(test)]
mod tests;
