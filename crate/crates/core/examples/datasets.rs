//! Synthetic datasets, class-balanced calibration draws and the data
//! archive round trip.

use predquant::harness::{generate, load_data, sample_calib, save_data, DatasetSpec, TaskSpec};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    for task in [TaskSpec::clusters(), TaskSpec::shapes()] {
        let spec = DatasetSpec {
            task,
            train_per_class: 100,
            val_per_class: 20,
            seed: 7,
        };
        let data = generate(&spec)?;
        let path = dir.path().join("data.pqd");
        save_data(&path, &data)?;
        let back = load_data(&path)?;
        let calib = sample_calib(&back.train, back.num_classes(), 64, 0)?;
        println!(
            "{:?}: input {:?}, {} classes, train {} val {}, round trip equal: {}, calib per class {:?}",
            spec.task,
            spec.task.input_shape(),
            back.num_classes(),
            back.train.len(),
            back.val.len(),
            back == data,
            calib.class_counts(back.num_classes())
        );
    }
    Ok(())
}
