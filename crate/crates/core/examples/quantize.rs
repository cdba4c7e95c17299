//! Quantizes the clusters MLP to W4A4 with every option on, and prints the
//! per-block reconstruction report.

use predquant::harness::{evaluate, generate, model_for, quantize_and_evaluate, train_fp, DatasetSpec, TaskSpec, TrainConfig};
use predquant::recon::{ReconConfig, ReconOptions};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let spec = DatasetSpec {
        task: TaskSpec::clusters(),
        ..Default::default()
    };
    let data = generate(&spec)?;
    let graph = train_fp(model_for(&spec.task, 0)?, &data, &TrainConfig::default(), 0)?;
    let recon = ReconConfig {
        weight_bits: 4,
        act_bits: 4,
        iterations: 1000,
        ..Default::default()
    };
    let run = quantize_and_evaluate(&graph, &data, &recon, ReconOptions::FULL, 512, 0)?;
    println!("FP val {:.2}", evaluate(&graph, &data.val)?);
    println!(
        "{}: calib {:.2} val {:.2} (lambda_r {})",
        run.row.options, run.row.calib_acc, run.row.val_acc, run.report.lambda_r
    );
    for b in &run.report.blocks {
        let first = b.log.first().map(|e| e.total).unwrap_or(f32::NAN);
        let last = b.log.last().map(|e| e.total).unwrap_or(f32::NAN);
        println!(
            "  block {}: objective {first:.4} -> {last:.4}, saturated {:.3}, hard/soft diff {:.1e}",
            b.block, b.saturated_fraction, b.hard_soft_rel_diff
        );
    }
    Ok(())
}
