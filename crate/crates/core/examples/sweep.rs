//! Metric-vs-scale sweep of every layer of the clusters MLP, written as
//! CSV and summarized by each metric's chosen factor.

use predquant::harness::{generate, model_for, sweep_in_memory, train_fp, DatasetSpec, SweepConfig, TaskSpec, TrainConfig};
use predquant::scale_search::write_sweep_csv;

fn main() -> anyhow::Result<()> {
    let spec = DatasetSpec {
        task: TaskSpec::clusters(),
        ..Default::default()
    };
    let data = generate(&spec)?;
    let graph = train_fp(model_for(&spec.task, 0)?, &data, &TrainConfig::default(), 0)?;
    let cfg = SweepConfig {
        grid_points: 32,
        samples: 256,
        ..Default::default()
    };
    let out = tempfile::tempdir()?;
    for (id, recs) in sweep_in_memory(&graph, &data.val, data.num_classes(), &cfg)? {
        write_sweep_csv(&out.path().join(format!("sweep_{id}.csv")), &recs)?;
        let mut metrics: Vec<&str> = recs.iter().map(|r| r.metric.as_str()).collect();
        metrics.dedup();
        let picks: Vec<String> = metrics
            .iter()
            .map(|m| {
                let best = recs
                    .iter()
                    .filter(|r| r.metric == *m && r.value_normalized == 1.0)
                    .map(|r| r.n_s)
                    .fold(0.0f32, f32::max);
                format!("{m}={best:.3}")
            })
            .collect();
        println!("{id}: {} rows; {}", recs.len(), picks.join(" "));
    }
    Ok(())
}
