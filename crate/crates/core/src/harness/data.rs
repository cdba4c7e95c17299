use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, ArchiveWriter, TensorRef, DATA_MAGIC};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Calib,
    Val,
}

/// Synthetic classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// Isotropic Gaussian clusters around random centers.
    Clusters {
        classes: usize,
        dim: usize,
        /// Standard deviation of the class centers.
        separation: f32,
        noise: f32,
    },
    /// Ten rendered shapes on a square single-channel canvas, randomly
    /// shifted, scaled and dimmed, plus pixel noise.
    Shapes { size: usize, noise: f32 },
}

impl TaskSpec {
    pub const SHAPE_CLASSES: usize = 10;

    pub fn num_classes(&self) -> usize {
        match self {
            TaskSpec::Clusters { classes, .. } => *classes,
            TaskSpec::Shapes { .. } => Self::SHAPE_CLASSES,
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            TaskSpec::Clusters { dim, .. } => vec![*dim],
            TaskSpec::Shapes { size, .. } => vec![1, *size, *size],
        }
    }

    pub fn clusters() -> Self {
        TaskSpec::Clusters {
            classes: 8,
            dim: 16,
            separation: 1.0,
            noise: 1.0,
        }
    }

    pub fn shapes() -> Self {
        TaskSpec::Shapes { size: 16, noise: 0.25 }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            TaskSpec::Clusters {
                classes,
                dim,
                separation,
                noise,
            } => classes >= 2 && dim > 0 && separation >= 0.0 && noise >= 0.0,
            TaskSpec::Shapes { size, noise } => size >= 8 && noise >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid task spec {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub task: TaskSpec,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            task: TaskSpec::shapes(),
            train_per_class: 500,
            val_per_class: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub samples: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Result<Self> {
        Ok(Self {
            samples: self.samples.select_rows(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            split,
        })
    }
}

/// Training and validation splits of one generated task.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBundle {
    pub spec: DatasetSpec,
    pub train: ToyDataset,
    pub val: ToyDataset,
}

impl DataBundle {
    pub fn num_classes(&self) -> usize {
        self.spec.task.num_classes()
    }
}

fn render_shape(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let half = size as f32 / 2.0;
    let cx = half + rng.random_range(-2.0..2.0);
    let cy = half + rng.random_range(-2.0..2.0);
    let r: f32 = rng.random_range(3.0..5.0);
    let level: f32 = rng.random_range(0.7..1.3);
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let (ax, ay) = (dx.abs(), dy.abs());
            let d = (dx * dx + dy * dy).sqrt();
            let on = match class {
                0 => ax <= r && ay <= r,
                1 => ax.max(ay) <= r && ax.max(ay) >= r - 1.2,
                2 => d <= r,
                3 => (d - r).abs() <= 0.7,
                4 => ay <= 1.0 && ax <= r + 1.0,
                5 => ax <= 1.0 && ay <= r + 1.0,
                6 => (ay <= 0.7 && ax <= r) || (ax <= 0.7 && ay <= r),
                7 => (ax - ay).abs() <= 0.8 && ax <= r,
                8 => dy.abs() <= r && ax <= (dy + r) / 2.0,
                _ => ax + ay <= r,
            };
            if on {
                img[y * size + x] = level;
            }
        }
    }
    img
}

fn draw_split(task: &TaskSpec, per_class: usize, centers: &[Vec<f32>], split: Split, rng: &mut ChaCha8Rng) -> Result<ToyDataset> {
    let classes = task.num_classes();
    let mut order: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, per_class)).collect();
    order.shuffle(rng);
    let per: usize = task.input_shape().iter().product();
    let mut data = Vec::with_capacity(order.len() * per);
    for &c in &order {
        match *task {
            TaskSpec::Clusters { noise, .. } => {
                let n = Normal::new(0.0, noise.max(f32::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
                data.extend(centers[c].iter().map(|&m| m + n.sample(rng)));
            }
            TaskSpec::Shapes { size, noise } => {
                let n = Normal::new(0.0, noise.max(f32::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
                data.extend(render_shape(c, size, rng).into_iter().map(|v| v + n.sample(rng)));
            }
        }
    }
    let mut shape = vec![order.len()];
    shape.extend(task.input_shape());
    Ok(ToyDataset {
        samples: Tensor::new(shape, data)?,
        labels: order,
        split,
    })
}

/// Generates the training and validation splits, class-balanced and
/// independently drawn.
pub fn generate(spec: &DatasetSpec) -> Result<DataBundle> {
    spec.task.validate()?;
    if spec.train_per_class == 0 || spec.val_per_class == 0 {
        return Err(Error::Config("train_per_class and val_per_class must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f32>> = match spec.task {
        TaskSpec::Clusters {
            classes,
            dim,
            separation,
            ..
        } => {
            let n = Normal::new(0.0, separation.max(f32::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;
            (0..classes).map(|_| (0..dim).map(|_| n.sample(&mut rng)).collect()).collect()
        }
        TaskSpec::Shapes { .. } => Vec::new(),
    };
    let train = draw_split(&spec.task, spec.train_per_class, &centers, Split::Train, &mut rng)?;
    let val = draw_split(&spec.task, spec.val_per_class, &centers, Split::Val, &mut rng)?;
    Ok(DataBundle {
        spec: spec.clone(),
        train,
        val,
    })
}

/// Class-balanced random subset of the training split. The first
/// `size % classes` classes receive one extra sample.
pub fn sample_calib(train: &ToyDataset, classes: usize, size: usize, seed: u64) -> Result<ToyDataset> {
    if size == 0 || size > train.len() {
        return Err(Error::InvalidArgument(format!(
            "calibration size {size} must lie in 1..={}",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in train.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut idx = Vec::with_capacity(size);
    for (c, pool) in by_class.iter_mut().enumerate() {
        let want = size / classes + usize::from(c < size % classes);
        if want > pool.len() {
            return Err(Error::InvalidArgument(format!("class {c} has only {} training samples", pool.len())));
        }
        pool.shuffle(&mut rng);
        idx.extend_from_slice(&pool[..want]);
    }
    idx.shuffle(&mut rng);
    train.subset(&idx, Split::Calib)
}

#[derive(Serialize, Deserialize)]
struct DataHeader {
    spec: DatasetSpec,
    train: TensorRef,
    train_labels: Vec<usize>,
    val: TensorRef,
    val_labels: Vec<usize>,
}

pub fn save_data(path: &Path, bundle: &DataBundle) -> Result<()> {
    let mut w = ArchiveWriter::new();
    let header = DataHeader {
        spec: bundle.spec.clone(),
        train: w.push(&bundle.train.samples),
        train_labels: bundle.train.labels.clone(),
        val: w.push(&bundle.val.samples),
        val_labels: bundle.val.labels.clone(),
    };
    w.finish(path, DATA_MAGIC, &header)
}

pub fn load_data(path: &Path) -> Result<DataBundle> {
    let r = ArchiveReader::open(path, DATA_MAGIC)?;
    let h: DataHeader = r.header()?;
    let train = r.tensor(&h.train)?;
    let val = r.tensor(&h.val)?;
    if train.rows() != h.train_labels.len() || val.rows() != h.val_labels.len() {
        return Err(Error::Corrupt(format!("{}: label count mismatch", path.display())));
    }
    let classes = h.spec.task.num_classes();
    if h.train_labels.iter().chain(&h.val_labels).any(|&l| l >= classes) {
        return Err(Error::Corrupt(format!("{}: label out of range", path.display())));
    }
    Ok(DataBundle {
        spec: h.spec,
        train: ToyDataset {
            samples: train,
            labels: h.train_labels,
            split: Split::Train,
        },
        val: ToyDataset {
            samples: val,
            labels: h.val_labels,
            split: Split::Val,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: TaskSpec) -> DatasetSpec {
        DatasetSpec {
            task,
            train_per_class: 20,
            val_per_class: 10,
            seed: 3,
        }
    }

    #[test]
    fn splits_are_balanced_and_shaped() {
        for task in [TaskSpec::clusters(), TaskSpec::shapes()] {
            let b = generate(&small(task.clone())).unwrap();
            let k = task.num_classes();
            assert!(b.train.class_counts(k).iter().all(|&c| c == 20));
            assert!(b.val.class_counts(k).iter().all(|&c| c == 10));
            assert_eq!(&b.train.samples.shape()[1..], &task.input_shape()[..]);
        }
    }

    #[test]
    fn calib_is_balanced_subset_of_train() {
        let b = generate(&small(TaskSpec::shapes())).unwrap();
        let c = sample_calib(&b.train, 10, 35, 1).unwrap();
        let counts = c.class_counts(10);
        assert_eq!(counts.iter().sum::<usize>(), 35);
        assert!(counts.iter().all(|&n| n == 3 || n == 4));
        let row = b.train.samples.row_len();
        for i in 0..c.len() {
            let s = &c.samples.data()[i * row..(i + 1) * row];
            let found = (0..b.train.len()).any(|j| &b.train.samples.data()[j * row..(j + 1) * row] == s && b.train.labels[j] == c.labels[i]);
            assert!(found);
        }
        assert_ne!(sample_calib(&b.train, 10, 35, 2).unwrap(), c);
        assert!(sample_calib(&b.train, 10, 1000, 1).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let spec = small(TaskSpec::clusters());
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pqd");
        save_data(&p, &a).unwrap();
        assert_eq!(load_data(&p).unwrap(), a);
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = DatasetSpec {
            task: TaskSpec::Clusters {
                classes: 1,
                dim: 2,
                separation: 1.0,
                noise: 1.0,
            },
            ..small(TaskSpec::clusters())
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }
}
