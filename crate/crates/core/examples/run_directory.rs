//! End-to-end run through files: dataset and FP model archives, a TOML
//! run config, the run directory it produces, and reloading the quantized
//! model.

use predquant::harness::{evaluate, generate, model_for, run_pipeline, save_data, train_fp, DatasetSpec, RunConfig, TaskSpec, TrainConfig};
use predquant::model::{load_model, save_model, QuantizedModel};
use predquant::recon::ReconOptions;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let spec = DatasetSpec {
        task: TaskSpec::clusters(),
        ..Default::default()
    };
    let data = generate(&spec)?;
    let graph = train_fp(model_for(&spec.task, 0)?, &data, &TrainConfig::default(), 0)?;
    save_data(&dir.path().join("data.pqd"), &data)?;
    save_model(&dir.path().join("fp.pqm"), &graph, None)?;

    let toml = format!(
        r#"
model = "{0}/fp.pqm"
data = "{0}/data.pqd"
output = "{0}/run"
seed = 3
calib_size = 256

[options]
use_pd = true
use_reg = true
use_dc = false
use_drop = true

[recon]
weight_bits = 4
act_bits = 4
iterations = 300
"#,
        dir.path().display()
    );
    let cfg_path = dir.path().join("run.toml");
    std::fs::write(&cfg_path, toml)?;
    let cfg = RunConfig::from_toml_file(&cfg_path)?;
    assert_eq!(cfg.options, ReconOptions::PD_REG);
    let report = run_pipeline(&cfg)?;

    let mut files: Vec<String> = std::fs::read_dir(&cfg.output)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()?;
    files.sort();
    println!("run directory: {}", files.join(", "));

    let (g, state) = load_model(&cfg.output.join("model.pqm"))?;
    let qm = QuantizedModel::new(g, state.expect("quantized state"))?;
    println!(
        "reported val {:.2}, reloaded val {:.2}",
        report.val_acc().unwrap_or(f32::NAN),
        evaluate(&qm, &data.val)?
    );
    Ok(())
}
