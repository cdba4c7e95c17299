use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::dc::{self, DcConfig, DcReport};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricKind, Prediction};
use crate::model::{load_model, save_model, Block, Layer, LayerId, LayerQuant, ModelGraph, QuantState, QuantizedModel};
use crate::quant::QuantParams;
use crate::recon::{quantize_model, QuantReport, ReconConfig, ReconOptions};
use crate::scale_search::{
    argmin_prefer_last, candidate_params, sweep_metrics, write_sweep_csv, LayerProbe, ScaleGrid, SweepRecord, SweepTarget,
};
use crate::tensor::Tensor;

use super::data::{load_data, sample_calib, DataBundle, Split, ToyDataset};
use super::train::evaluate;

/// Everything needed to reproduce one quantization run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: PathBuf,
    pub data: PathBuf,
    pub output: PathBuf,
    pub seed: u64,
    /// Calibration samples drawn (class-balanced) from the training split.
    pub calib_size: usize,
    pub options: ReconOptions,
    pub recon: ReconConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: PathBuf::from("model.pqm"),
            data: PathBuf::from("data.pqd"),
            output: PathBuf::from("run"),
            seed: 0,
            calib_size: 1024,
            options: ReconOptions::FULL,
            recon: ReconConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Accuracy of one quantized model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub options: String,
    pub seed: u64,
    pub calib_acc: f32,
    pub val_acc: f32,
    /// `calib_acc - val_acc`.
    pub overfit_gap: f32,
}

impl AblationRow {
    pub fn new(options: &ReconOptions, seed: u64, calib_acc: f32, val_acc: f32) -> Self {
        Self {
            options: options.label(),
            seed,
            calib_acc,
            val_acc,
            overfit_gap: calib_acc - val_acc,
        }
    }
}

/// Mean and sample standard deviation over the seeds of one option set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub options: String,
    pub runs: usize,
    pub calib_mean: f32,
    pub val_mean: f32,
    pub val_std: f32,
    pub gap_mean: f32,
    pub gap_std: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fp_calib_acc: f32,
    pub fp_val_acc: f32,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
    pub wall_clock_s: f64,
}

impl EvalReport {
    pub fn calib_acc(&self) -> Option<f32> {
        self.rows.first().map(|r| r.calib_acc)
    }

    pub fn val_acc(&self) -> Option<f32> {
        self.rows.first().map(|r| r.val_acc)
    }

    pub fn summary_for(&self, options: &ReconOptions) -> Option<&AblationSummary> {
        let label = options.label();
        self.summary.iter().find(|s| s.options == label)
    }
}

fn mean_std(v: &[f32]) -> (f32, f32) {
    if v.is_empty() {
        return (f32::NAN, f32::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean as f32, var.sqrt() as f32)
}

/// Groups rows by option label, in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !labels.contains(&r.options.as_str()) {
            labels.push(&r.options);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let sel: Vec<&AblationRow> = rows.iter().filter(|r| r.options == label).collect();
            let col = |f: fn(&AblationRow) -> f32| sel.iter().map(|r| f(r)).collect::<Vec<f32>>();
            let (calib_mean, _) = mean_std(&col(|r| r.calib_acc));
            let (val_mean, val_std) = mean_std(&col(|r| r.val_acc));
            let (gap_mean, gap_std) = mean_std(&col(|r| r.overfit_gap));
            AblationSummary {
                options: label.to_string(),
                runs: sel.len(),
                calib_mean,
                val_mean,
                val_std,
                gap_mean,
                gap_std,
            }
        })
        .collect()
}

/// Seed of the calibration draw for a run seed.
pub fn calib_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

/// Result of quantizing in memory.
pub struct QuantRun {
    pub model: QuantizedModel,
    pub report: QuantReport,
    pub row: AblationRow,
    pub calib: ToyDataset,
}

/// Samples a calibration set, quantizes and evaluates. Only the calibration
/// inputs reach the quantizer; labels are used for evaluation alone.
pub fn quantize_and_evaluate(
    graph: &ModelGraph,
    data: &DataBundle,
    recon: &ReconConfig,
    options: ReconOptions,
    calib_size: usize,
    seed: u64,
) -> Result<QuantRun> {
    let calib = sample_calib(&data.train, data.num_classes(), calib_size, calib_seed(seed))?;
    let (model, report) = quantize_model(graph, &calib.samples, recon, options, seed)?;
    let row = AblationRow::new(&options, seed, evaluate(&model, &calib)?, evaluate(&model, &data.val)?);
    info!(
        "{} seed {seed}: calib {:.2} val {:.2}",
        row.options, row.calib_acc, row.val_acc
    );
    Ok(QuantRun {
        model,
        report,
        row,
        calib,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Output directory carrying an `INCOMPLETE` marker until [`RunDir::complete`].
struct RunDir {
    dir: PathBuf,
}

impl RunDir {
    const MARKER: &'static str = "INCOMPLETE";

    fn start(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(Self::MARKER), b"")?;
        fs::write(dir.join("run_config.toml"), cfg.to_toml()?)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn complete(self) -> Result<()> {
        fs::remove_file(self.dir.join(Self::MARKER))?;
        Ok(())
    }
}

/// Whether `dir` holds a finished run.
pub fn run_complete(dir: &Path) -> bool {
    dir.join("run_config.toml").exists() && !dir.join(RunDir::MARKER).exists()
}

fn write_progress(path: &Path, report: &QuantReport) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for b in &report.blocks {
        for e in &b.log {
            writeln!(f, "{}", serde_json::to_string(e)?)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RunReportFile<'a> {
    eval: &'a EvalReport,
    quant: &'a QuantReport,
}

/// Quantizes the model in `cfg.model` with `cfg.options` and writes the
/// quantized model, `report.json`, `progress.jsonl` and `accuracy.csv` to
/// `cfg.output`. The directory holds an `INCOMPLETE` marker until every
/// artifact is written.
pub fn run_pipeline(cfg: &RunConfig) -> Result<EvalReport> {
    let t0 = Instant::now();
    let run = RunDir::start(&cfg.output, cfg)?;
    let (graph, _) = load_model(&cfg.model)?;
    let data = load_data(&cfg.data)?;
    let qr = quantize_and_evaluate(&graph, &data, &cfg.recon, cfg.options, cfg.calib_size, cfg.seed)?;
    let report = EvalReport {
        fp_calib_acc: evaluate(&graph, &qr.calib)?,
        fp_val_acc: evaluate(&graph, &data.val)?,
        summary: summarize(std::slice::from_ref(&qr.row)),
        rows: vec![qr.row],
        wall_clock_s: t0.elapsed().as_secs_f64(),
    };
    save_model(&cfg.output.join("model.pqm"), &graph, Some(&qr.model.layers))?;
    write_progress(&cfg.output.join("progress.jsonl"), &qr.report)?;
    write_csv(&cfg.output.join("accuracy.csv"), &report.rows)?;
    let file = RunReportFile {
        eval: &report,
        quant: &qr.report,
    };
    fs::write(cfg.output.join("report.json"), serde_json::to_string_pretty(&file)?)?;
    run.complete()?;
    Ok(report)
}

/// The option grid compared by default: block-output reconstruction with
/// drop, prediction loss alone, both, and both with distribution correction.
pub fn default_ablation_grid() -> Vec<ReconOptions> {
    vec![
        ReconOptions::REG_ONLY,
        ReconOptions::PD_ONLY,
        ReconOptions::PD_REG,
        ReconOptions::FULL,
    ]
}

/// Runs every option set for every seed on an in-memory model. Each seed
/// draws one calibration set shared by all option sets.
pub fn ablate_in_memory(
    graph: &ModelGraph,
    data: &DataBundle,
    recon: &ReconConfig,
    grid: &[ReconOptions],
    calib_size: usize,
    seeds: &[u64],
) -> Result<EvalReport> {
    let t0 = Instant::now();
    let mut rows = Vec::with_capacity(grid.len() * seeds.len());
    for &seed in seeds {
        for &opts in grid {
            rows.push(quantize_and_evaluate(graph, data, recon, opts, calib_size, seed)?.row);
        }
    }
    let calib = sample_calib(&data.train, data.num_classes(), calib_size, calib_seed(seeds.first().copied().unwrap_or(0)))?;
    Ok(EvalReport {
        fp_calib_acc: evaluate(graph, &calib)?,
        fp_val_acc: evaluate(graph, &data.val)?,
        summary: summarize(&rows),
        rows,
        wall_clock_s: t0.elapsed().as_secs_f64(),
    })
}

/// File-based ablation: `cfg.options` is ignored in favor of `grid`.
/// Writes `ablation.csv`, `ablation_summary.csv` and `report.json`.
pub fn ablate(cfg: &RunConfig, grid: &[ReconOptions], seeds: &[u64]) -> Result<EvalReport> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one option set and one seed".into()));
    }
    let run = RunDir::start(&cfg.output, cfg)?;
    let (graph, _) = load_model(&cfg.model)?;
    let data = load_data(&cfg.data)?;
    let report = ablate_in_memory(&graph, &data, &cfg.recon, grid, cfg.calib_size, seeds)?;
    write_csv(&cfg.output.join("ablation.csv"), &report.rows)?;
    write_csv(&cfg.output.join("ablation_summary.csv"), &report.summary)?;
    fs::write(cfg.output.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    run.complete()?;
    Ok(report)
}

/// Metric sweep over normalized scaling factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Layer to sweep (`block1.2`); every conv/linear layer when `None`.
    pub layer: Option<String>,
    pub target: SweepTarget,
    pub bits: u32,
    pub grid_points: usize,
    /// Labeled validation samples used for every column.
    pub samples: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            layer: None,
            target: SweepTarget::Activation,
            bits: 2,
            grid_points: 64,
            samples: 512,
            seed: 0,
        }
    }
}

/// Sweeps one or every conv/linear layer with all other layers FP: the
/// swept layer alone has its activations (or weights) quantized. Returns
/// the records per layer, each including the task-loss column.
pub fn sweep_in_memory(graph: &ModelGraph, val: &ToyDataset, classes: usize, cfg: &SweepConfig) -> Result<Vec<(LayerId, Vec<SweepRecord>)>> {
    let grid = ScaleGrid::uniform(cfg.grid_points)?;
    let layers = match &cfg.layer {
        Some(s) => vec![s.parse::<LayerId>()?],
        None => graph.parametric_layers(),
    };
    let probe = sample_calib(val, classes, cfg.samples.min(val.len()), cfg.seed)?;
    let empty = QuantState::new();
    layers
        .into_iter()
        .map(|id| {
            let recs = sweep_metrics(
                graph,
                &empty,
                id,
                &probe.samples,
                &grid,
                &MetricKind::ALL,
                cfg.bits,
                cfg.target,
                Some(&probe.labels),
            )?;
            Ok((id, recs))
        })
        .collect()
}

/// Writes `sweep_<layer>.csv` per layer into `out`.
pub fn sweep(model: &Path, data: &Path, out: &Path, cfg: &SweepConfig) -> Result<Vec<PathBuf>> {
    let (graph, _) = load_model(model)?;
    let data = load_data(data)?;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    for (id, recs) in sweep_in_memory(&graph, &data.val, data.num_classes(), cfg)? {
        let p = out.join(format!("sweep_{id}.csv"));
        write_sweep_csv(&p, &recs)?;
        files.push(p);
    }
    Ok(files)
}

/// Effect of distribution correction on one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DcPreview {
    pub block: usize,
    pub report: DcReport,
    /// Sum over the block's BN inputs of the squared mean and std
    /// mismatch against the running statistics, before and after.
    pub stat_gap_before: f32,
    pub stat_gap_after: f32,
    pub histogram: PathBuf,
}

fn stat_gap(graph: &ModelGraph, block: usize, a: &Tensor) -> Result<f32> {
    let stage = crate::model::Stage::Block(block);
    let layers = graph.stage_layers(stage)?;
    let stats = dc::collect_bn_inputs(layers, stage, a)?;
    let mut gap = 0.0;
    for s in stats {
        let Layer::BatchNorm(bn) = graph.layer(s.layer)? else {
            continue;
        };
        let rs = bn.running_std();
        gap += s.mean.iter().zip(bn.mean.data()).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
        gap += s.std.iter().zip(&rs).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
    }
    Ok(gap)
}

/// Runs distribution correction on the FP input of every block with BN
/// layers and writes a before/after histogram CSV per block.
pub fn dc_preview_in_memory(
    graph: &ModelGraph,
    calib: &Tensor,
    dc_cfg: &DcConfig,
    bins: usize,
    out: &Path,
) -> Result<Vec<DcPreview>> {
    fs::create_dir_all(out)?;
    let mut res = Vec::new();
    for l in 0..graph.num_blocks() {
        if graph.blocks[l].bn_layers().next().is_none() {
            continue;
        }
        let a_fp = graph.block_input(calib, l)?;
        let (a_dc, report) = dc::correct_distribution(graph, l, &a_fp, dc_cfg)?;
        let path = out.join(format!("dc_hist_block{l}.csv"));
        dc::write_histogram_csv(&path, &dc::histogram(&a_fp, &a_dc, bins)?)?;
        res.push(DcPreview {
            block: l,
            report,
            stat_gap_before: stat_gap(graph, l, &a_fp)?,
            stat_gap_after: stat_gap(graph, l, &a_dc)?,
            histogram: path,
        });
    }
    Ok(res)
}

pub fn dc_preview(cfg: &RunConfig, bins: usize) -> Result<Vec<DcPreview>> {
    let (graph, _) = load_model(&cfg.model)?;
    let data = load_data(&cfg.data)?;
    let calib = sample_calib(&data.train, data.num_classes(), cfg.calib_size, calib_seed(cfg.seed))?;
    let res = dc_preview_in_memory(&graph, &calib.samples, &cfg.recon.dc, bins, &cfg.output)?;
    fs::write(cfg.output.join("dc_preview.json"), serde_json::to_string_pretty(&res)?)?;
    Ok(res)
}

/// A single linear classifier over heavy-tailed inputs: each sample is
/// Laplace noise on every feature plus a spike on the feature of its
/// class. The spikes carry the label while the noise dominates the
/// activation range.
pub struct HeavyTailTask {
    pub graph: ModelGraph,
    pub calib: Tensor,
    pub val: ToyDataset,
    pub layer: LayerId,
}

pub fn heavy_tail_task(seed: u64, calib_size: usize, val_size: usize) -> Result<HeavyTailTask> {
    const DIM: usize = 32;
    const CLASSES: usize = 8;
    const SPIKE: f32 = 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Laplace(0, 0.5) as a signed exponential.
    let exp = Exp::new(2.0f32).map_err(|e| Error::Config(e.to_string()))?;
    let mut weight = Tensor::randn([CLASSES, DIM], 0.05, &mut rng);
    for k in 0..CLASSES {
        weight.data_mut()[k * DIM + k] += 2.0;
    }
    let graph = ModelGraph::new(
        vec![],
        vec![Block::new(vec![Layer::Linear { weight, bias: None }])],
        vec![],
        vec![DIM],
        CLASSES,
    )?;
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<(Tensor, Vec<usize>)> {
        let labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
        let mut data = Vec::with_capacity(n * DIM);
        for &c in &labels {
            for j in 0..DIM {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                data.push(sign * exp.sample(rng) + if j == c { SPIKE } else { 0.0 });
            }
        }
        Ok((Tensor::new([n, DIM], data)?, labels))
    };
    let (calib, _) = draw(calib_size, &mut rng)?;
    let (val_x, val_labels) = draw(val_size, &mut rng)?;
    Ok(HeavyTailTask {
        graph,
        calib,
        val: ToyDataset {
            samples: val_x,
            labels: val_labels,
            split: Split::Val,
        },
        layer: LayerId::new(crate::model::Stage::Block(0), 0),
    })
}

/// Scale factor chosen by one metric and its task loss on labeled data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleChoice {
    pub metric: MetricKind,
    pub n_s: f32,
    pub task_loss: f32,
}

/// Chooses the activation scale of `layer` on unlabeled `calib` under each
/// metric in `kinds` (all other layers FP), then measures the task loss of
/// each choice on `eval`.
pub fn scale_choices(
    graph: &ModelGraph,
    layer: LayerId,
    calib: &Tensor,
    eval: &ToyDataset,
    grid: &ScaleGrid,
    bits: u32,
    kinds: &[MetricKind],
) -> Result<Vec<ScaleChoice>> {
    let empty = QuantState::new();
    let mut probe = LayerProbe::new(graph, &empty, layer, calib, 1.0)?;
    let range = probe.activation_range()?;
    let cols = probe.score(SweepTarget::Activation, grid, bits, kinds, None, None)?;
    let eval_probe = LayerProbe::new(graph, &empty, layer, &eval.samples, 1.0)?;
    kinds
        .iter()
        .map(|&k| {
            let best = argmin_prefer_last(&cols[k.name()]).ok_or(Error::Empty("scale grid"))?;
            let n_s = grid.factors()[best];
            let lq = LayerQuant {
                weight: QuantParams::passthrough(),
                mask: None,
                act: candidate_params(&[range], n_s, bits, None)?,
            };
            let pred: Prediction = eval_probe.predict(&lq)?;
            Ok(ScaleChoice {
                metric: k,
                n_s,
                task_loss: metrics::task_loss(&pred, &eval.labels)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::{generate, DatasetSpec, TaskSpec};
    use crate::harness::train::{model_for, train_fp, TrainConfig};
    use crate::scale_search::read_sweep_csv;

    fn tiny() -> (ModelGraph, DataBundle) {
        let data = generate(&DatasetSpec {
            task: TaskSpec::clusters(),
            train_per_class: 40,
            val_per_class: 20,
            seed: 2,
        })
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            val_floor: 0.0,
            ..Default::default()
        };
        let g = train_fp(model_for(&data.spec.task, 0).unwrap(), &data, &cfg, 0).unwrap();
        (g, data)
    }

    fn quick_recon() -> ReconConfig {
        ReconConfig {
            iterations: 20,
            batch_size: 8,
            grid_points: 8,
            init_search_samples: Some(32),
            ..Default::default()
        }
    }

    #[test]
    fn summary_matches_recount() {
        let rows = vec![
            AblationRow::new(&ReconOptions::PD_ONLY, 0, 90.0, 80.0),
            AblationRow::new(&ReconOptions::PD_REG, 0, 85.0, 84.0),
            AblationRow::new(&ReconOptions::PD_ONLY, 1, 94.0, 78.0),
        ];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].options, "pd");
        assert_eq!(s[0].runs, 2);
        assert!((s[0].val_mean - 79.0).abs() < 1e-6);
        assert!((s[0].gap_mean - 13.0).abs() < 1e-6);
        assert!((s[0].val_std - 2f32.sqrt()).abs() < 1e-5);
        assert_eq!(s[1].val_std, 0.0);
        assert_eq!(rows[0].overfit_gap, rows[0].calib_acc - rows[0].val_acc);
    }

    #[test]
    fn pipeline_writes_complete_reproducible_run() {
        let (g, data) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("fp.pqm");
        let dpath = dir.path().join("d.pqd");
        save_model(&model, &g, None).unwrap();
        crate::harness::save_data(&dpath, &data).unwrap();
        let cfg = RunConfig {
            model,
            data: dpath,
            output: dir.path().join("a"),
            seed: 4,
            calib_size: 64,
            options: ReconOptions::PD_REG,
            recon: quick_recon(),
        };
        let ra = run_pipeline(&cfg).unwrap();
        assert!(run_complete(&cfg.output));
        for f in ["model.pqm", "report.json", "progress.jsonl", "accuracy.csv", "run_config.toml"] {
            assert!(cfg.output.join(f).exists(), "{f}");
        }
        let acc = ra.val_acc().unwrap();
        assert!((0.0..=100.0).contains(&acc));
        let reloaded = RunConfig::from_toml_file(&cfg.output.join("run_config.toml")).unwrap();
        assert_eq!(reloaded, cfg);
        let cfg_b = RunConfig {
            output: dir.path().join("b"),
            ..cfg.clone()
        };
        run_pipeline(&cfg_b).unwrap();
        assert_eq!(
            fs::read(cfg.output.join("model.pqm")).unwrap(),
            fs::read(cfg_b.output.join("model.pqm")).unwrap()
        );
    }

    #[test]
    fn failed_run_stays_marked_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            model: dir.path().join("missing.pqm"),
            output: dir.path().join("out"),
            ..Default::default()
        };
        assert!(run_pipeline(&cfg).is_err());
        assert!(!run_complete(&cfg.output));
    }

    #[test]
    fn sweep_columns_normalize_to_one() {
        let (g, data) = tiny();
        let cfg = SweepConfig {
            grid_points: 8,
            samples: 40,
            ..Default::default()
        };
        let res = sweep_in_memory(&g, &data.val, 8, &cfg).unwrap();
        assert_eq!(res.len(), g.parametric_layers().len());
        let dir = tempfile::tempdir().unwrap();
        for (id, recs) in res {
            assert_eq!(recs.len(), 8 * (MetricKind::ALL.len() + 1));
            let p = dir.path().join(format!("{id}.csv"));
            write_sweep_csv(&p, &recs).unwrap();
            let back = read_sweep_csv(&p).unwrap();
            for m in back.iter().map(|r| r.metric.clone()).collect::<std::collections::BTreeSet<_>>() {
                let min = back.iter().filter(|r| r.metric == m).map(|r| r.value_normalized).fold(f32::INFINITY, f32::min);
                assert_eq!(min, 1.0, "{id} {m}");
            }
        }
    }

    #[test]
    fn dc_preview_reduces_stat_gap() {
        let (g, data) = tiny();
        let calib = sample_calib(&data.train, 8, 64, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = DcConfig {
            lambda_c: 1.0,
            lr: 1e-2,
            steps: 100,
            ..Default::default()
        };
        let res = dc_preview_in_memory(&g, &calib.samples, &cfg, 16, dir.path()).unwrap();
        assert_eq!(res.len(), 3);
        for p in &res {
            assert!(p.stat_gap_after <= p.stat_gap_before, "{p:?}");
            assert!(p.histogram.exists());
        }
    }

    #[test]
    fn heavy_tail_choices_are_on_grid() {
        let t = heavy_tail_task(0, 128, 256).unwrap();
        let grid = ScaleGrid::uniform(16).unwrap();
        let c = scale_choices(&t.graph, t.layer, &t.calib, &t.val, &grid, 2, &[MetricKind::PdKl, MetricKind::LocalMse]).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|c| grid.factors().contains(&c.n_s) && c.task_loss.is_finite()));
    }
}
