//! Trains the full-precision MLP on the clusters task.

use predquant::harness::{evaluate, generate, model_for, train_fp, DatasetSpec, TaskSpec, TrainConfig};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let spec = DatasetSpec {
        task: TaskSpec::clusters(),
        ..Default::default()
    };
    let data = generate(&spec)?;
    let cfg = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let graph = train_fp(model_for(&spec.task, 0)?, &data, &cfg, 0)?;
    println!(
        "{} blocks, train acc {:.2}, val acc {:.2}",
        graph.num_blocks(),
        evaluate(&graph, &data.train)?,
        evaluate(&graph, &data.val)?
    );
    Ok(())
}
