//! Activation-scale selection on a heavy-tailed linear layer: which
//! clipping factor each metric picks and what it costs in task loss.

use predquant::harness::{heavy_tail_task, scale_choices};
use predquant::metrics::MetricKind;
use predquant::scale_search::ScaleGrid;

fn main() -> anyhow::Result<()> {
    let grid = ScaleGrid::default();
    for seed in 0..3 {
        let t = heavy_tail_task(seed, 1024, 2048)?;
        println!("seed {seed}");
        for c in scale_choices(&t.graph, t.layer, &t.calib, &t.val, &grid, 2, &MetricKind::ALL)? {
            println!("  {:<13} N_s {:.3}  task loss {:.4}", c.metric.name(), c.n_s, c.task_loss);
        }
    }
    Ok(())
}
