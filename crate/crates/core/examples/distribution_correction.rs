//! Batch-norm guided correction of calibration activations: statistic
//! mismatch before and after, plus histogram CSVs.

use predquant::dc::DcConfig;
use predquant::harness::{calib_seed, dc_preview_in_memory, generate, model_for, sample_calib, train_fp, DatasetSpec, TaskSpec, TrainConfig};

fn main() -> anyhow::Result<()> {
    let spec = DatasetSpec {
        task: TaskSpec::clusters(),
        ..Default::default()
    };
    let data = generate(&spec)?;
    let graph = train_fp(model_for(&spec.task, 0)?, &data, &TrainConfig::default(), 0)?;
    // A small calibration set has noisy batch statistics.
    let calib = sample_calib(&data.train, data.num_classes(), 64, calib_seed(0))?;
    let out = tempfile::tempdir()?;
    for lambda_c in [0.0, 0.02, 1.0] {
        let cfg = DcConfig {
            lambda_c,
            ..Default::default()
        };
        println!("lambda_c = {lambda_c}");
        for p in dc_preview_in_memory(&graph, &calib.samples, &cfg, 20, out.path())? {
            println!(
                "  block {}: stat gap {:.4} -> {:.4}, reverted batches {}",
                p.block, p.stat_gap_before, p.stat_gap_after, p.report.reverted_batches
            );
        }
    }
    Ok(())
}
