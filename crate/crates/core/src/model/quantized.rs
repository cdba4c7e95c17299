use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::Prediction;
use crate::quant::{self, QuantParams};
use crate::tensor::{Tape, Tensor, Var};

use super::{BnParams, ForwardHooks, LayerId, ModelGraph, Stage};

/// Frozen quantizers of one conv/linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerQuant {
    /// Per-output-channel weight quantizer.
    pub weight: QuantParams,
    /// Learned up/down rounding; `None` means round-to-nearest.
    pub mask: Option<Vec<u8>>,
    /// Per-tensor quantizer on the layer input.
    pub act: QuantParams,
}

impl LayerQuant {
    pub fn dequantized_weight(&self, w: &Tensor) -> Result<Tensor> {
        match &self.mask {
            Some(m) => quant::apply_hard_mask(w, &self.weight, m),
            None => quant::fake_quantize(w, &self.weight),
        }
    }
}

pub type QuantState = BTreeMap<LayerId, LayerQuant>;

/// An FP network plus a quantizer for each of its conv/linear layers.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub graph: ModelGraph,
    pub layers: QuantState,
}

impl QuantizedModel {
    pub fn new(graph: ModelGraph, layers: QuantState) -> Result<Self> {
        for id in graph.parametric_layers() {
            let lq = layers
                .get(&id)
                .ok_or_else(|| Error::InvalidArgument(format!("no quantizer for layer {id}")))?;
            lq.weight.validate()?;
            lq.act.validate()?;
            if lq.act.groups() != 1 {
                return Err(Error::InvalidArgument(format!("{id}: activation quantizer must be per-tensor")));
            }
            let w = graph.layer(id)?.weight().expect("parametric layer has a weight");
            lq.dequantized_weight(w)?;
        }
        Ok(Self { graph, layers })
    }

    pub fn hooks(&self) -> Result<QuantHooks> {
        QuantHooks::new(&self.graph, &self.layers)
    }

    pub fn forward_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut hooks = self.hooks()?;
        self.graph.check_input(x)?;
        self.graph
            .chunked(x, |tape, v| self.graph.run_from(tape, Stage::Stem, v, &mut hooks))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Prediction> {
        Prediction::from_logits(self.forward_logits(x)?, 1.0)
    }

    /// Quantized activation entering block `block` (head when
    /// `block == num_blocks`).
    pub fn block_input(&self, x: &Tensor, block: usize) -> Result<Tensor> {
        let mut hooks = self.hooks()?;
        self.graph.check_input(x)?;
        let end = self.graph.boundary_stage(block)?;
        self.graph.chunked(x, |tape, v| self.graph.run_until(tape, end, v, &mut hooks))
    }
}

/// Forward hooks applying frozen quantizers. Layers without an entry run
/// in full precision, which lets a partially quantized network be
/// evaluated.
pub struct QuantHooks {
    weights: BTreeMap<LayerId, Tensor>,
    acts: BTreeMap<LayerId, QuantParams>,
}

impl QuantHooks {
    pub fn new(graph: &ModelGraph, state: &QuantState) -> Result<Self> {
        let mut weights = BTreeMap::new();
        let mut acts = BTreeMap::new();
        for (&id, lq) in state {
            let w = graph
                .layer(id)?
                .weight()
                .ok_or_else(|| Error::InvalidArgument(format!("{id} has no weight to quantize")))?;
            weights.insert(id, lq.dequantized_weight(w)?);
            acts.insert(id, lq.act.clone());
        }
        Ok(Self { weights, acts })
    }
}

/// Records per-tensor activation fake quantization with a constant scale.
pub fn fake_quant_const(tape: &mut Tape, x: Var, p: &QuantParams) -> Result<Var> {
    if p.is_passthrough() {
        return Ok(x);
    }
    let s = tape.constant(Tensor::scalar(p.scale()));
    tape.fake_quant(x, s, p.zero_point(), p.qmin(), p.qmax())
}

impl ForwardHooks for QuantHooks {
    fn weight(&mut self, tape: &mut Tape, id: LayerId, weight: &Tensor) -> Result<Var> {
        Ok(tape.constant(self.weights.get(&id).unwrap_or(weight).clone()))
    }

    fn input(&mut self, tape: &mut Tape, id: LayerId, x: Var) -> Result<Var> {
        match self.acts.get(&id) {
            Some(p) => fake_quant_const(tape, x, p),
            None => Ok(x),
        }
    }

    fn batch_norm(&mut self, tape: &mut Tape, _id: LayerId, x: Var, bn: &BnParams) -> Result<Var> {
        super::batch_norm_eval(tape, x, bn)
    }
}
