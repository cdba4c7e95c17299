use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::archive::{ArchiveReader, ArchiveWriter, TensorRef, MODEL_MAGIC};
use crate::error::{Error, Result};
use crate::quant::QuantParams;

use super::quantized::{LayerQuant, QuantState};
use super::{BnParams, Block, Layer, LayerId, ModelGraph};

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerSpec {
    Conv {
        weight: TensorRef,
        bias: Option<TensorRef>,
        stride: usize,
        pad: usize,
    },
    Linear {
        weight: TensorRef,
        bias: Option<TensorRef>,
    },
    BatchNorm {
        mean: TensorRef,
        var: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        eps: TensorRef,
    },
    Relu,
    AddResidual,
    AvgPool,
}

#[derive(Serialize, Deserialize)]
struct ParamsSpec {
    scales: TensorRef,
    zero_points: Vec<i32>,
    bits: u32,
    axis: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct QuantEntry {
    layer: LayerId,
    weight: ParamsSpec,
    act: ParamsSpec,
    mask: Option<TensorRef>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    num_classes: usize,
    stem: Vec<LayerSpec>,
    blocks: Vec<Vec<LayerSpec>>,
    head: Vec<LayerSpec>,
    quant: Option<Vec<QuantEntry>>,
}

fn write_layer(w: &mut ArchiveWriter, l: &Layer) -> LayerSpec {
    match l {
        Layer::Conv {
            weight,
            bias,
            stride,
            pad,
        } => LayerSpec::Conv {
            weight: w.push(weight),
            bias: bias.as_ref().map(|b| w.push(b)),
            stride: *stride,
            pad: *pad,
        },
        Layer::Linear { weight, bias } => LayerSpec::Linear {
            weight: w.push(weight),
            bias: bias.as_ref().map(|b| w.push(b)),
        },
        Layer::BatchNorm(bn) => LayerSpec::BatchNorm {
            mean: w.push(&bn.mean),
            var: w.push(&bn.var),
            gamma: w.push(&bn.gamma),
            beta: w.push(&bn.beta),
            eps: w.push_values(&[bn.eps]),
        },
        Layer::Relu => LayerSpec::Relu,
        Layer::AddResidual => LayerSpec::AddResidual,
        Layer::AvgPool => LayerSpec::AvgPool,
    }
}

fn read_layer(r: &ArchiveReader, s: &LayerSpec) -> Result<Layer> {
    Ok(match s {
        LayerSpec::Conv {
            weight,
            bias,
            stride,
            pad,
        } => Layer::Conv {
            weight: r.tensor(weight)?,
            bias: bias.as_ref().map(|b| r.tensor(b)).transpose()?,
            stride: *stride,
            pad: *pad,
        },
        LayerSpec::Linear { weight, bias } => Layer::Linear {
            weight: r.tensor(weight)?,
            bias: bias.as_ref().map(|b| r.tensor(b)).transpose()?,
        },
        LayerSpec::BatchNorm {
            mean,
            var,
            gamma,
            beta,
            eps,
        } => Layer::BatchNorm(BnParams {
            mean: r.tensor(mean)?,
            var: r.tensor(var)?,
            gamma: r.tensor(gamma)?,
            beta: r.tensor(beta)?,
            eps: *r.values(eps)?.first().ok_or_else(|| Error::Corrupt("empty batchnorm eps".into()))?,
        }),
        LayerSpec::Relu => Layer::Relu,
        LayerSpec::AddResidual => Layer::AddResidual,
        LayerSpec::AvgPool => Layer::AvgPool,
    })
}

fn write_params(w: &mut ArchiveWriter, p: &QuantParams) -> ParamsSpec {
    ParamsSpec {
        scales: w.push_values(&p.scales),
        zero_points: p.zero_points.clone(),
        bits: p.bits,
        axis: p.axis,
    }
}

fn read_params(r: &ArchiveReader, s: &ParamsSpec) -> Result<QuantParams> {
    let p = QuantParams {
        scales: r.values(&s.scales)?,
        zero_points: s.zero_points.clone(),
        bits: s.bits,
        axis: s.axis,
    };
    p.validate()?;
    Ok(p)
}

/// Writes a network and, optionally, its frozen quantizers.
pub fn save_model(path: &Path, graph: &ModelGraph, quant: Option<&QuantState>) -> Result<()> {
    let mut w = ArchiveWriter::new();
    let stem = graph.stem.iter().map(|l| write_layer(&mut w, l)).collect();
    let blocks = graph
        .blocks
        .iter()
        .map(|b| b.layers.iter().map(|l| write_layer(&mut w, l)).collect())
        .collect();
    let head = graph.head.iter().map(|l| write_layer(&mut w, l)).collect();
    let quant = quant.map(|st| {
        st.iter()
            .map(|(&layer, lq)| QuantEntry {
                layer,
                weight: write_params(&mut w, &lq.weight),
                act: write_params(&mut w, &lq.act),
                mask: lq.mask.as_ref().map(|m| {
                    let v: Vec<f32> = m.iter().map(|&b| b as f32).collect();
                    w.push_values(&v)
                }),
            })
            .collect()
    });
    let header = Header {
        input_shape: graph.input_shape.clone(),
        num_classes: graph.num_classes,
        stem,
        blocks,
        head,
        quant,
    };
    w.finish(path, MODEL_MAGIC, &header)
}

pub fn load_model(path: &Path) -> Result<(ModelGraph, Option<QuantState>)> {
    let r = ArchiveReader::open(path, MODEL_MAGIC)?;
    let h: Header = r.header()?;
    let layers = |specs: &[LayerSpec]| specs.iter().map(|s| read_layer(&r, s)).collect::<Result<Vec<_>>>();
    let stem = layers(&h.stem)?;
    let blocks = h
        .blocks
        .iter()
        .map(|b| layers(b).map(Block::new))
        .collect::<Result<Vec<_>>>()?;
    let head = layers(&h.head)?;
    let graph = ModelGraph::new(stem, blocks, head, h.input_shape, h.num_classes)?;
    let quant = h
        .quant
        .map(|entries| {
            entries
                .iter()
                .map(|e| {
                    let mask = e
                        .mask
                        .as_ref()
                        .map(|m| {
                            r.values(m)?
                                .into_iter()
                                .map(|v| match v {
                                    0.0 => Ok(0u8),
                                    1.0 => Ok(1u8),
                                    _ => Err(Error::Corrupt(format!("rounding mask value {v}"))),
                                })
                                .collect::<Result<Vec<u8>>>()
                        })
                        .transpose()?;
                    let lq = LayerQuant {
                        weight: read_params(&r, &e.weight)?,
                        act: read_params(&r, &e.act)?,
                        mask,
                    };
                    Ok((e.layer, lq))
                })
                .collect::<Result<QuantState>>()
        })
        .transpose()?;
    Ok((graph, quant))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::model::{toy_cnn, QuantizedModel, Stage};
    use crate::quant::{compute_range_scale, DegeneratePolicy};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fp_round_trip_gives_identical_logits() {
        let m = toy_cnn(21);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pqm");
        save_model(&p, &m, None).unwrap();
        let (back, q) = load_model(&p).unwrap();
        assert!(q.is_none());
        assert_eq!(back, m);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([4, 1, 6, 6], 1.0, &mut r);
        let (a, b) = (m.forward_fp(&x).unwrap(), back.forward_fp(&x).unwrap());
        for (u, v) in a.logits.data().iter().zip(b.logits.data()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn quantized_round_trip() {
        let m = toy_cnn(22);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let mut st = QuantState::new();
        for id in m.parametric_layers() {
            let w = m.layer(id).unwrap().weight().unwrap();
            let weight = compute_range_scale(w, 4, Some(0), DegeneratePolicy::Error).unwrap();
            let mask = (id.stage != Stage::Stem).then(|| (0..w.numel()).map(|_| r.random_range(0..2u8)).collect());
            let act = QuantParams::per_tensor(0.037, 3, 4).unwrap();
            st.insert(id, LayerQuant { weight, mask, act });
        }
        let q = QuantizedModel::new(m.clone(), st.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.pqm");
        save_model(&p, &m, Some(&st)).unwrap();
        let (g, back) = load_model(&p).unwrap();
        assert_eq!(back.as_ref(), Some(&st));
        let q2 = QuantizedModel::new(g, back.unwrap()).unwrap();
        let x = Tensor::randn([3, 1, 6, 6], 1.0, &mut r);
        assert_eq!(q.forward(&x).unwrap(), q2.forward(&x).unwrap());
    }

    #[test]
    fn truncation_and_foreign_files_are_rejected() {
        let m = toy_cnn(23);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pqm");
        save_model(&p, &m, None).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&p), Err(Error::Checksum(_))));
        std::fs::write(&p, b"not a model at all, just text").unwrap();
        assert!(matches!(load_model(&p), Err(Error::BadMagic(_))));
    }
}
