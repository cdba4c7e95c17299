//! Option grid over a few seeds on the clusters MLP at W2A2.

use predquant::harness::{ablate_in_memory, default_ablation_grid, generate, model_for, train_fp, DatasetSpec, TaskSpec, TrainConfig};
use predquant::recon::ReconConfig;

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let spec = DatasetSpec {
        task: TaskSpec::clusters(),
        ..Default::default()
    };
    let data = generate(&spec)?;
    let graph = train_fp(model_for(&spec.task, 0)?, &data, &TrainConfig::default(), 0)?;
    let recon = ReconConfig {
        iterations: 500,
        ..Default::default()
    };
    let report = ablate_in_memory(&graph, &data, &recon, &default_ablation_grid(), 256, &[0, 1, 2])?;
    println!("FP val {:.2}", report.fp_val_acc);
    for s in &report.summary {
        println!(
            "{:<16} calib {:6.2}  val {:6.2} ± {:4.2}  gap {:5.2}",
            s.options, s.calib_mean, s.val_mean, s.val_std, s.gap_mean
        );
    }
    Ok(())
}
