//! Grid search over normalized activation (and weight) scaling factors.
//!
//! A candidate scale is `N_s` times the min-max scale of the tensor being
//! quantized. Candidates are scored either locally, on the activation
//! itself, or globally, by pushing the quantized activation through the
//! rest of the full-precision network and comparing predictions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{self, MetricKind, Prediction};
use crate::model::{ForwardHooks, LayerId, LayerQuant, ModelGraph, QuantHooks, QuantState};
use crate::quant::{self, DegeneratePolicy, QuantParams};
use crate::tensor::{Tape, Tensor, Var};

/// Column name used for the labelled task-loss oracle in sweep tables.
pub const TASK_LOSS: &str = "task_loss";

/// Ascending normalized factors in `(0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleGrid {
    factors: Vec<f32>,
}

impl ScaleGrid {
    pub fn new(factors: Vec<f32>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Empty("scale grid"));
        }
        if factors.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::InvalidArgument("grid factors must lie in (0, 1]".into()));
        }
        if factors.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("grid factors must be strictly ascending".into()));
        }
        Ok(Self { factors })
    }

    /// `{1/n, 2/n, ..., 1}`.
    pub fn uniform(n: usize) -> Result<Self> {
        Self::new((1..=n).map(|k| k as f32 / n as f32).collect())
    }

    pub fn factors(&self) -> &[f32] {
        &self.factors
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

impl Default for ScaleGrid {
    fn default() -> Self {
        Self::uniform(64).expect("static grid is valid")
    }
}

/// Index of the smallest value; ties go to the later (larger `N_s`) entry.
pub fn argmin_prefer_last(values: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v <= values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Quantizer for a range shrunk to `n_s * [lo, hi]`; the zero-point is
/// recomputed from the shrunk range.
pub fn candidate_params(ranges: &[(f32, f32)], n_s: f32, bits: u32, axis: Option<usize>) -> Result<QuantParams> {
    let shrunk: Vec<(f32, f32)> = ranges.iter().map(|&(lo, hi)| (lo * n_s, hi * n_s)).collect();
    quant::params_from_ranges(&shrunk, bits, axis, DegeneratePolicy::Epsilon)
}

/// Which tensor of the layer is swept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepTarget {
    /// Activation quantizer on the layer input; the weight stays as in
    /// the supplied state (FP if absent).
    Activation,
    /// Per-channel weight quantizer with nearest rounding; the input
    /// activation stays FP.
    Weight,
}

/// One row of a sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub layer: String,
    pub n_s: f32,
    pub metric: String,
    pub value: f32,
    pub value_normalized: f32,
}

/// Captures the input of one layer and otherwise defers to `inner`.
struct Capture<'a> {
    inner: &'a mut dyn ForwardHooks,
    target: LayerId,
    seen: Option<Tensor>,
}

impl ForwardHooks for Capture<'_> {
    fn weight(&mut self, tape: &mut Tape, id: LayerId, w: &Tensor) -> Result<Var> {
        self.inner.weight(tape, id, w)
    }
    fn bias(&mut self, tape: &mut Tape, id: LayerId, b: &Tensor) -> Result<Var> {
        self.inner.bias(tape, id, b)
    }
    fn input(&mut self, tape: &mut Tape, id: LayerId, x: Var) -> Result<Var> {
        if id == self.target {
            self.seen = Some(tape.value(x).clone());
            return Ok(x);
        }
        self.inner.input(tape, id, x)
    }
    fn batch_norm(&mut self, tape: &mut Tape, id: LayerId, x: Var, bn: &crate::model::BnParams) -> Result<Var> {
        self.inner.batch_norm(tape, id, x, bn)
    }
}

/// Scores quantizer candidates for one layer against a fixed calibration set.
pub struct LayerProbe<'a> {
    graph: &'a ModelGraph,
    state: &'a QuantState,
    layer: LayerId,
    /// Input of the layer's stage under the prefix quantizers.
    stage_input: Tensor,
    /// Input of the layer itself.
    layer_input: Tensor,
    calib: Tensor,
    fp: Option<Prediction>,
    temperature: f32,
}

impl<'a> LayerProbe<'a> {
    /// `state` holds the quantizers already fixed; the target layer may be
    /// present (its weight quantizer is then kept).
    pub fn new(graph: &'a ModelGraph, state: &'a QuantState, layer: LayerId, calib: &Tensor, temperature: f32) -> Result<Self> {
        if calib.rows() == 0 {
            return Err(Error::Empty("calibration batch"));
        }
        if !graph.layer(layer)?.is_parametric() {
            return Err(Error::InvalidArgument(format!("{layer} is not a conv/linear layer")));
        }
        let prefix: QuantState = state.iter().filter(|(id, _)| **id < layer).map(|(k, v)| (*k, v.clone())).collect();
        let mut hooks = QuantHooks::new(graph, &prefix)?;
        let stage_input = graph.chunked(calib, |tape, v| graph.run_until(tape, layer.stage, v, &mut hooks))?;
        let layers = graph.stage_layers(layer.stage)?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < stage_input.rows() {
            let end = (start + crate::model::EVAL_CHUNK).min(stage_input.rows());
            let mut tape = Tape::new();
            let v = tape.constant(stage_input.slice_rows(start, end)?);
            let mut cap = Capture {
                inner: &mut hooks,
                target: layer,
                seen: None,
            };
            crate::model::run_layers(&mut tape, &layers[..=layer.index], layer.stage, v, &mut cap)?;
            parts.push(cap.seen.ok_or_else(|| Error::InvalidArgument(format!("{layer} never ran")))?);
            start = end;
        }
        Ok(Self {
            graph,
            state,
            layer,
            stage_input,
            layer_input: Tensor::concat_rows(&parts)?,
            calib: calib.clone(),
            fp: None,
            temperature,
        })
    }

    /// Activation entering the layer (prefix quantized).
    pub fn layer_input(&self) -> &Tensor {
        &self.layer_input
    }

    pub fn activation_range(&self) -> Result<(f32, f32)> {
        self.layer_input.min_max().ok_or(Error::Empty("layer input"))
    }

    fn weight(&self) -> &Tensor {
        self.graph.layer(self.layer).ok().and_then(|l| l.weight()).expect("checked in new")
    }

    /// Prediction with `lq` installed on the target layer and the prefix
    /// quantizers upstream; everything downstream is FP.
    pub fn predict(&self, lq: &LayerQuant) -> Result<Prediction> {
        let mut st: QuantState = self.state.iter().filter(|(id, _)| **id < self.layer).map(|(k, v)| (*k, v.clone())).collect();
        st.insert(self.layer, lq.clone());
        let mut hooks = QuantHooks::new(self.graph, &st)?;
        let logits = self
            .graph
            .chunked(&self.stage_input, |tape, v| self.graph.run_from(tape, self.layer.stage, v, &mut hooks))?;
        Prediction::from_logits(logits, self.temperature)
    }

    fn base_quant(&self) -> LayerQuant {
        self.state.get(&self.layer).cloned().unwrap_or(LayerQuant {
            weight: QuantParams::passthrough(),
            mask: None,
            act: QuantParams::passthrough(),
        })
    }

    /// Builds the candidate quantizer for `n_s`.
    pub fn candidate(&self, target: SweepTarget, n_s: f32, bits: u32) -> Result<LayerQuant> {
        let mut lq = self.base_quant();
        match target {
            SweepTarget::Activation => {
                let range = self.activation_range()?;
                lq.act = candidate_params(&[range], n_s, bits, None)?;
            }
            SweepTarget::Weight => {
                let ranges = quant::group_ranges(self.weight(), Some(0))?;
                lq.weight = candidate_params(&ranges, n_s, bits, Some(0))?;
                lq.mask = None;
                lq.act = QuantParams::passthrough();
            }
        }
        Ok(lq)
    }

    /// Scores every candidate of `grid` under every metric in `kinds`, and
    /// the task loss when `labels` are given. Returns one column per name.
    pub fn score(
        &mut self,
        target: SweepTarget,
        grid: &ScaleGrid,
        bits: u32,
        kinds: &[MetricKind],
        labels: Option<&[usize]>,
        fp_logits: Option<&Tensor>,
    ) -> Result<BTreeMap<String, Vec<f32>>> {
        if let Some(l) = labels {
            if l.len() != self.stage_input.rows() {
                return Err(Error::InvalidArgument("label count differs from calibration batch".into()));
            }
        }
        let needs_pred = labels.is_some() || kinds.iter().any(|k| k.is_global());
        if kinds.iter().any(|k| k.is_global()) && self.fp.is_none() {
            let logits = match fp_logits {
                Some(l) => l.clone(),
                None => self.graph.forward_logits(&self.calib)?,
            };
            self.fp = Some(Prediction::from_logits(logits, self.temperature)?);
        }
        let mut cols: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        for &n_s in grid.factors() {
            let lq = self.candidate(target, n_s, bits)?;
            let pred = if needs_pred { Some(self.predict(&lq)?) } else { None };
            for &k in kinds {
                let v = if k.is_global() {
                    let fp = self.fp.as_ref().expect("computed above");
                    let q = pred.as_ref().expect("computed above");
                    match k {
                        MetricKind::PdKl => metrics::pd_kl(fp, q)?,
                        MetricKind::PdMse => metrics::pd_mse(fp, q)?,
                        _ => metrics::pd_cosine(fp, q)?,
                    }
                } else {
                    let (a, aq) = match target {
                        SweepTarget::Activation => (self.layer_input.clone(), quant::fake_quantize(&self.layer_input, &lq.act)?),
                        SweepTarget::Weight => {
                            let w = self.weight();
                            (w.clone(), quant::fake_quantize(w, &lq.weight)?)
                        }
                    };
                    match k {
                        MetricKind::LocalMse => metrics::local_mse(&a, &aq)?,
                        _ => metrics::local_cosine(&a, &aq)?,
                    }
                };
                cols.entry(k.name().to_string()).or_default().push(v);
            }
            if let (Some(labels), Some(p)) = (labels, pred.as_ref()) {
                cols.entry(TASK_LOSS.to_string()).or_default().push(metrics::task_loss(p, labels)?);
            }
        }
        Ok(cols)
    }
}

/// Picks the activation scale of `layer` minimizing `metric` over `grid`.
///
/// For prediction metrics the teacher is the FP network on `calib`;
/// `fp_logits` may supply its logits to avoid recomputation.
#[allow(clippy::too_many_arguments)]
pub fn search_activation_scale(
    graph: &ModelGraph,
    state: &QuantState,
    layer: LayerId,
    calib: &Tensor,
    grid: &ScaleGrid,
    metric: MetricKind,
    bits: u32,
    fp_logits: Option<&Tensor>,
) -> Result<QuantParams> {
    if bits >= quant::PASSTHROUGH_BITS {
        return Ok(QuantParams::passthrough());
    }
    let mut probe = LayerProbe::new(graph, state, layer, calib, 1.0)?;
    let (lo, hi) = probe.activation_range()?;
    if hi <= lo {
        return Err(Error::DegenerateRange(lo));
    }
    let cols = probe.score(SweepTarget::Activation, grid, bits, &[metric], None, fp_logits)?;
    let best = argmin_prefer_last(&cols[metric.name()]).ok_or(Error::Empty("scale grid"))?;
    candidate_params(&[(lo, hi)], grid.factors()[best], bits, None)
}

/// Per-channel weight scale minimizing the squared rounding error of each
/// output channel independently (nearest rounding).
pub fn search_weight_scale(w: &Tensor, bits: u32, grid: &ScaleGrid) -> Result<QuantParams> {
    if bits >= quant::PASSTHROUGH_BITS {
        return Ok(QuantParams::passthrough());
    }
    let ranges = quant::group_ranges(w, Some(0))?;
    let per = w.row_len();
    let mut scales = Vec::with_capacity(ranges.len());
    let mut zps = Vec::with_capacity(ranges.len());
    for (c, &(lo, hi)) in ranges.iter().enumerate() {
        let row = Tensor::from_slice(&w.data()[c * per..(c + 1) * per]);
        let errs = grid
            .factors()
            .iter()
            .map(|&n| {
                let p = candidate_params(&[(lo, hi)], n, bits, None)?;
                let q = quant::fake_quantize(&row, &p)?;
                Ok(row.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f32>())
            })
            .collect::<Result<Vec<f32>>>()?;
        let best = argmin_prefer_last(&errs).ok_or(Error::Empty("scale grid"))?;
        let p = candidate_params(&[(lo, hi)], grid.factors()[best], bits, None)?;
        scales.push(p.scales[0]);
        zps.push(p.zero_points[0]);
    }
    let p = QuantParams {
        scales,
        zero_points: zps,
        bits,
        axis: Some(0),
    };
    p.validate()?;
    Ok(p)
}

/// Divides a column by its minimum. A zero minimum shifts the column by
/// one instead, so the minimum still normalizes to exactly 1.
pub fn normalize_column(values: &[f32]) -> Vec<f32> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    if min > 0.0 {
        values.iter().map(|&v| if v == min { 1.0 } else { v / min }).collect()
    } else {
        values.iter().map(|&v| v - min + 1.0).collect()
    }
}

/// Complete grid x metric table for one layer, min-normalized per metric.
#[allow(clippy::too_many_arguments)]
pub fn sweep_metrics(
    graph: &ModelGraph,
    state: &QuantState,
    layer: LayerId,
    calib: &Tensor,
    grid: &ScaleGrid,
    kinds: &[MetricKind],
    bits: u32,
    target: SweepTarget,
    labels: Option<&[usize]>,
) -> Result<Vec<SweepRecord>> {
    let mut probe = LayerProbe::new(graph, state, layer, calib, 1.0)?;
    let cols = probe.score(target, grid, bits, kinds, labels, None)?;
    let mut names: Vec<String> = kinds.iter().map(|k| k.name().to_string()).collect();
    if labels.is_some() {
        names.push(TASK_LOSS.to_string());
    }
    let mut out = Vec::with_capacity(names.len() * grid.len());
    for name in names {
        let values = &cols[&name];
        let norm = normalize_column(values);
        for (i, &n_s) in grid.factors().iter().enumerate() {
            out.push(SweepRecord {
                layer: layer.to_string(),
                n_s,
                metric: name.clone(),
                value: values[i],
                value_normalized: norm[i],
            });
        }
    }
    Ok(out)
}

/// Header: `layer,n_s,metric,value,value_normalized`.
pub fn write_sweep_csv(path: &Path, records: &[SweepRecord]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{toy_cnn, Stage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_validation() {
        assert!(ScaleGrid::new(vec![]).is_err());
        assert!(ScaleGrid::new(vec![0.5, 0.5]).is_err());
        assert!(ScaleGrid::new(vec![0.0, 1.0]).is_err());
        assert!(ScaleGrid::new(vec![0.5, 1.1]).is_err());
        let g = ScaleGrid::default();
        assert_eq!(g.len(), 64);
        assert_eq!(g.factors()[0], 1.0 / 64.0);
        assert_eq!(*g.factors().last().unwrap(), 1.0);
    }

    #[test]
    fn argmin_ties_go_to_larger_factor() {
        assert_eq!(argmin_prefer_last(&[3.0, 1.0, 1.0, 2.0]), Some(2));
        assert_eq!(argmin_prefer_last(&[0.0, 0.0, 0.0]), Some(2));
        assert_eq!(argmin_prefer_last(&[]), None);
    }

    #[test]
    fn normalization_min_is_exactly_one() {
        for col in [vec![0.3f32, 0.1, 0.7], vec![0.0, 2.0], vec![5.0], vec![1e-30, 3.0, 1e-30]] {
            let n = normalize_column(&col);
            let m = n.iter().copied().fold(f32::INFINITY, f32::min);
            assert_eq!(m, 1.0, "{col:?} -> {n:?}");
        }
    }

    fn calib(seed: u64, n: usize) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn([n, 1, 6, 6], 1.0, &mut r)
    }

    #[test]
    fn lossless_bits_select_full_range() {
        let m = toy_cnn(31);
        let x = calib(1, 16);
        let layer = LayerId::new(Stage::Block(1), 2);
        for metric in MetricKind::ALL {
            let p = search_activation_scale(&m, &QuantState::new(), layer, &x, &ScaleGrid::uniform(8).unwrap(), metric, 31, None).unwrap();
            let empty = QuantState::new();
            let probe = LayerProbe::new(&m, &empty, layer, &x, 1.0).unwrap();
            let full = candidate_params(&[probe.activation_range().unwrap()], 1.0, 31, None).unwrap();
            assert_eq!(p, full, "{metric}");
        }
    }

    /// Independent re-implementation: quantize the target layer's input
    /// through a QuantizedModel with every other layer FP and score the
    /// full-network KL.
    #[test]
    fn pd_kl_search_equals_brute_force() {
        use crate::model::QuantizedModel;
        let m = toy_cnn(32);
        let x = calib(2, 24);
        let layer = LayerId::new(Stage::Block(0), 2);
        let grid = ScaleGrid::uniform(16).unwrap();
        let chosen = search_activation_scale(&m, &QuantState::new(), layer, &x, &grid, MetricKind::PdKl, 2, None).unwrap();

        let fp = m.forward_fp(&x).unwrap();
        let a = m.block_input(&x, 0).unwrap();
        let mut r1 = m.clone();
        r1.blocks[0].layers.truncate(2);
        let pre = r1.block_forward(0, &a).unwrap();
        let (lo, hi) = pre.min_max().unwrap();
        let mut best = (f32::INFINITY, 0.0);
        for &n in grid.factors() {
            let qmax = 3.0f64;
            let (l, h) = (lo as f64 * n as f64, hi as f64 * n as f64);
            let s = ((h - l) / qmax) as f32;
            let z = (-l * qmax / (h - l)).round().clamp(0.0, qmax) as i32;
            let mut st = QuantState::new();
            for id in m.parametric_layers() {
                let act = if id == layer {
                    QuantParams::per_tensor(s, z, 2).unwrap()
                } else {
                    QuantParams::passthrough()
                };
                st.insert(id, LayerQuant { weight: QuantParams::passthrough(), mask: None, act });
            }
            let q = QuantizedModel::new(m.clone(), st).unwrap().forward(&x).unwrap();
            let kl = metrics::pd_kl(&fp, &q).unwrap();
            if kl <= best.0 {
                best = (kl, n);
            }
        }
        let expect = candidate_params(&[(lo, hi)], best.1, 2, None).unwrap();
        assert_eq!(chosen, expect);
    }

    #[test]
    fn sweep_table_shape_and_csv_round_trip() {
        let m = toy_cnn(33);
        let x = calib(3, 12);
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let layer = LayerId::new(Stage::Head, 1);
        let grid = ScaleGrid::uniform(10).unwrap();
        let recs = sweep_metrics(&m, &QuantState::new(), layer, &x, &grid, &MetricKind::ALL, 2, SweepTarget::Activation, Some(&labels)).unwrap();
        assert_eq!(recs.len(), grid.len() * (MetricKind::ALL.len() + 1));
        for name in MetricKind::ALL.iter().map(|k| k.name()).chain([TASK_LOSS]) {
            let min = recs.iter().filter(|r| r.metric == name).map(|r| r.value_normalized).fold(f32::INFINITY, f32::min);
            assert_eq!(min, 1.0, "{name}");
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_sweep_csv(&p, &recs).unwrap();
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("layer,n_s,metric,value,value_normalized\n"));
        let back = read_sweep_csv(&p).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in back.iter().zip(&recs) {
            assert_eq!(a.layer, b.layer);
            assert_eq!(a.metric, b.metric);
            assert_eq!(a.n_s.to_bits(), b.n_s.to_bits());
            assert_eq!(a.value.to_bits(), b.value.to_bits());
            assert_eq!(a.value_normalized.to_bits(), b.value_normalized.to_bits());
        }
    }

    #[test]
    fn single_candidate_normalizes_to_one() {
        let m = toy_cnn(34);
        let x = calib(4, 8);
        let grid = ScaleGrid::new(vec![0.5]).unwrap();
        let recs = sweep_metrics(&m, &QuantState::new(), LayerId::new(Stage::Block(0), 2), &x, &grid, &MetricKind::ALL, 2, SweepTarget::Activation, None).unwrap();
        assert_eq!(recs.len(), MetricKind::ALL.len());
        assert!(recs.iter().all(|r| r.value_normalized == 1.0));
    }

    #[test]
    fn weight_sweep_at_high_bits_prefers_full_range() {
        let m = toy_cnn(35);
        let x = calib(5, 8);
        let grid = ScaleGrid::uniform(8).unwrap();
        let layer = LayerId::new(Stage::Block(1), 2);
        let empty = QuantState::new();
        let mut probe = LayerProbe::new(&m, &empty, layer, &x, 1.0).unwrap();
        let cols = probe.score(SweepTarget::Weight, &grid, 24, &MetricKind::ALL, None, None).unwrap();
        for (name, col) in cols {
            // Clipping error dominates any rounding error at 24 bits.
            assert_eq!(argmin_prefer_last(&col), Some(grid.len() - 1), "{name}: {col:?}");
        }
    }

    #[test]
    fn weight_scale_search_beats_min_max() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mut w = Tensor::randn([4, 50], 1.0, &mut r);
        w.data_mut()[7] = 8.0; // outlier in channel 0
        let p = search_weight_scale(&w, 3, &ScaleGrid::default()).unwrap();
        let mm = quant::compute_range_scale(&w, 3, Some(0), DegeneratePolicy::Error).unwrap();
        let err = |p: &QuantParams| {
            let q = quant::fake_quantize(&w, p).unwrap();
            w.data().iter().zip(q.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f32>()
        };
        assert!(err(&p) <= err(&mm));
        assert!(p.scales[0] < mm.scales[0]);
    }
}
