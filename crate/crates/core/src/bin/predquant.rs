use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use predquant::harness::{
    self, ablate, dc_preview, default_ablation_grid, evaluate, generate, load_data, model_for, run_pipeline, sample_calib, save_data,
    sweep, train_fp, DatasetSpec, RunConfig, SweepConfig, TaskSpec, TrainConfig,
};
use predquant::metrics::MetricKind;
use predquant::model::{load_model, save_model, QuantizedModel};
use predquant::recon::{BitPolicy, ReconOptions};
use predquant::scale_search::SweepTarget;

#[derive(Parser)]
#[command(name = "predquant", version, about = "Post-training quantization of small networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train a full-precision model on a dataset file.
    TrainFp(TrainArgs),
    /// Quantize a model and write the run directory.
    Quantize(RunArgs),
    /// Report accuracy of an FP or quantized model file.
    Eval(EvalArgs),
    /// Metric-vs-scale sweep CSVs per layer.
    Sweep(SweepArgs),
    /// Run the option grid over several seeds.
    Ablate(AblateArgs),
    /// Dump before/after histograms of distribution correction.
    DcPreview(DcPreviewArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Clusters,
    Shapes,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "shapes")]
    task: Task,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML dataset spec; overrides --task.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    val_per_class: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// Minimum validation accuracy (percent).
    #[arg(long)]
    floor: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Uniform,
    FirstLast8,
    FirstLastOutput8,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required = true)]
    seed: u64,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    calib_size: Option<usize>,
    #[arg(long)]
    wbits: Option<u32>,
    #[arg(long)]
    abits: Option<u32>,
    #[arg(long, value_enum)]
    bit_policy: Option<Policy>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_r: Option<f32>,
    #[arg(long)]
    drop_prob: Option<f32>,
    #[arg(long)]
    lr_round: Option<f32>,
    #[arg(long)]
    lr_scale: Option<f32>,
    #[arg(long)]
    round_weight: Option<f32>,
    #[arg(long)]
    temperature: Option<f32>,
    #[arg(long)]
    lambda_c: Option<f32>,
    /// Activation-scale init metric (local_mse, local_cosine, pd_mse, pd_cosine, pd_kl).
    #[arg(long)]
    init_metric: Option<MetricKind>,
    #[arg(long)]
    no_pd: bool,
    #[arg(long)]
    no_reg: bool,
    #[arg(long)]
    no_dc: bool,
    #[arg(long)]
    no_drop: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml_file(p)?,
            None => RunConfig::default(),
        };
        cfg.seed = self.seed;
        macro_rules! set {
            ($src:ident => $($dst:tt)+) => {
                if let Some(v) = self.$src.clone() {
                    cfg.$($dst)+ = v.into();
                }
            };
        }
        set!(model => model);
        set!(data => data);
        set!(output => output);
        set!(calib_size => calib_size);
        set!(wbits => recon.weight_bits);
        set!(abits => recon.act_bits);
        set!(iterations => recon.iterations);
        set!(batch_size => recon.batch_size);
        set!(drop_prob => recon.drop_prob);
        set!(lr_round => recon.lr_round);
        set!(lr_scale => recon.lr_scale);
        set!(round_weight => recon.round_weight);
        set!(temperature => recon.temperature);
        set!(lambda_c => recon.dc.lambda_c);
        if let Some(l) = self.lambda_r {
            cfg.recon.lambda_r = Some(l);
        }
        if let Some(m) = self.init_metric {
            cfg.recon.init_metric = m;
        }
        if let Some(p) = self.bit_policy {
            cfg.recon.bit_policy = match p {
                Policy::Uniform => BitPolicy::Uniform,
                Policy::FirstLast8 => BitPolicy::FirstLast8,
                Policy::FirstLastOutput8 => BitPolicy::FirstLastOutput8,
            };
        }
        let o = &mut cfg.options;
        o.use_pd &= !self.no_pd;
        o.use_reg &= !self.no_reg;
        o.use_dc &= !self.no_dc;
        o.use_drop &= !self.no_drop;
        cfg.recon.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalSplit {
    Train,
    Val,
    Calib,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: EvalSplit,
    /// Calibration draw (with --calib-size) when --split calib.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1024)]
    calib_size: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Activation,
    Weight,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Layer id such as `block1.2`; all conv/linear layers by default.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, value_enum, default_value = "activation")]
    target: Target,
    #[arg(long, default_value_t = 2)]
    bits: u32,
    #[arg(long, default_value_t = 64)]
    grid_points: usize,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
}

#[derive(Args)]
struct DcPreviewArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::GenData(a) => {
            let mut spec = match &a.config {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| format!("reading {}", p.display()))?,
                None => DatasetSpec {
                    task: match a.task {
                        Task::Clusters => TaskSpec::clusters(),
                        Task::Shapes => TaskSpec::shapes(),
                    },
                    ..Default::default()
                },
            };
            spec.seed = a.seed;
            if let Some(n) = a.train_per_class {
                spec.train_per_class = n;
            }
            if let Some(n) = a.val_per_class {
                spec.val_per_class = n;
            }
            let data = generate(&spec)?;
            save_data(&a.out, &data)?;
            println!("wrote {} train / {} val samples to {}", data.train.len(), data.val.len(), a.out.display());
        }
        Cmd::TrainFp(a) => {
            let data = load_data(&a.data)?;
            let mut cfg: TrainConfig = match &a.config {
                Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            if let Some(f) = a.floor {
                cfg.val_floor = f;
            }
            let graph = train_fp(model_for(&data.spec.task, a.seed)?, &data, &cfg, a.seed)?;
            save_model(&a.out, &graph, None)?;
            println!(
                "train acc {:.2}, val acc {:.2}; wrote {}",
                evaluate(&graph, &data.train)?,
                evaluate(&graph, &data.val)?,
                a.out.display()
            );
        }
        Cmd::Quantize(a) => {
            let cfg = a.resolve()?;
            let r = run_pipeline(&cfg)?;
            println!(
                "{}: calib acc {:.2}, val acc {:.2} (FP val {:.2}); run written to {}",
                cfg.options.label(),
                r.calib_acc().unwrap_or(f32::NAN),
                r.val_acc().unwrap_or(f32::NAN),
                r.fp_val_acc,
                cfg.output.display()
            );
        }
        Cmd::Eval(a) => {
            let (graph, state) = load_model(&a.model)?;
            let data = load_data(&a.data)?;
            let split = match a.split {
                EvalSplit::Train => data.train.clone(),
                EvalSplit::Val => data.val.clone(),
                EvalSplit::Calib => sample_calib(&data.train, data.num_classes(), a.calib_size, harness::calib_seed(a.seed))?,
            };
            let acc = match state {
                Some(s) => evaluate(&QuantizedModel::new(graph, s)?, &split)?,
                None => evaluate(&graph, &split)?,
            };
            println!("accuracy {acc:.2} on {} samples", split.len());
        }
        Cmd::Sweep(a) => {
            let cfg = SweepConfig {
                layer: a.layer,
                target: match a.target {
                    Target::Activation => SweepTarget::Activation,
                    Target::Weight => SweepTarget::Weight,
                },
                bits: a.bits,
                grid_points: a.grid_points,
                samples: a.samples,
                seed: a.seed,
            };
            for f in sweep(&a.model, &a.data, &a.out, &cfg)? {
                println!("{}", f.display());
            }
        }
        Cmd::Ablate(a) => {
            if a.seeds == 0 {
                bail!("--seeds must be > 0");
            }
            let cfg = a.run.resolve()?;
            let seeds: Vec<u64> = (cfg.seed..cfg.seed + a.seeds).collect();
            let grid: Vec<ReconOptions> = default_ablation_grid();
            let r = ablate(&cfg, &grid, &seeds)?;
            println!("FP val {:.2}", r.fp_val_acc);
            println!("{:<16} {:>5} {:>10} {:>10} {:>9}", "options", "runs", "calib", "val", "gap");
            for s in &r.summary {
                println!(
                    "{:<16} {:>5} {:>10.2} {:>5.2}±{:<4.2} {:>9.2}",
                    s.options, s.runs, s.calib_mean, s.val_mean, s.val_std, s.gap_mean
                );
            }
        }
        Cmd::DcPreview(a) => {
            let cfg = a.run.resolve()?;
            for p in dc_preview(&cfg, a.bins)? {
                println!(
                    "block {}: stat gap {:.4e} -> {:.4e}, histogram {}",
                    p.block,
                    p.stat_gap_before,
                    p.stat_gap_after,
                    p.histogram.display()
                );
            }
        }
    }
    Ok(())
}
