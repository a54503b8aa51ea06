//! Tiny decoder-only transformer with per-layer adapter slots.
//!
//! The backbone is a pre-LN transformer whose parameters live in one flat
//! buffer (see [`params`]). Every block ends with an adapter slot: a routing
//! names one or more adapter modules per layer, and the slot output is the
//! softmax-weighted average of the member outputs `h_t = x + A_t(x)`.
//! Gradients are computed analytically by [`engine`].

pub mod checkpoint;
pub mod engine;
pub mod generate;
pub mod gradcheck;
pub mod params;
pub mod pretrain;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{DmeaError, Result};
use crate::numerics::{random_normal, seeded_rng};
use crate::taskgen::{encode, encode_parts, EncodedSample, Sample, TaskSpec, TokenId, PAD};

pub use engine::{GradStore, LossSelector, ObjectiveGroup, Trainable};
pub use generate::{DecodeConfig, DecodeStrategy};
pub use params::Backbone;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub hidden_width: usize,
    pub num_heads: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub max_sequence_length: usize,
    pub adapter_bottleneck: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            num_layers: 2,
            hidden_width: 64,
            num_heads: 2,
            ffn_width: 128,
            vocab_size: crate::taskgen::Vocab::shared().len(),
            max_sequence_length: 64,
            adapter_bottleneck: 16,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DmeaError::Config(m.to_string()));
        if self.num_layers == 0 || self.hidden_width == 0 || self.num_heads == 0 || self.ffn_width == 0 {
            return bad("backbone dimensions must be positive");
        }
        if !self.hidden_width.is_multiple_of(self.num_heads) {
            return bad("hidden_width must be divisible by num_heads");
        }
        if self.vocab_size < 3 || self.max_sequence_length == 0 || self.adapter_bottleneck == 0 {
            return bad("vocab_size, max_sequence_length and adapter_bottleneck must be positive");
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.hidden_width / self.num_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModuleId(pub u32);

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Bottleneck adapter `A(x) = gelu(x·W_down + b_down)·W_up + b_up`; the slot
/// adds the residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub id: ModuleId,
    pub layer: usize,
    pub width: usize,
    pub bottleneck: usize,
    /// `[down_w (width×bottleneck), down_b, up_w (bottleneck×width), up_b]`
    pub params: Vec<f64>,
}

impl Adapter {
    pub fn param_count(width: usize, bottleneck: usize) -> usize {
        2 * width * bottleneck + width + bottleneck
    }

    pub fn new_random(id: ModuleId, layer: usize, width: usize, bottleneck: usize, seed: u64) -> Adapter {
        let mut rng = seeded_rng(seed);
        let down = random_normal(width, bottleneck, 1.0 / (width as f64).sqrt(), &mut rng);
        let up = random_normal(bottleneck, width, 0.01, &mut rng);
        let mut params = Vec::with_capacity(Self::param_count(width, bottleneck));
        params.extend(down.iter());
        params.extend(std::iter::repeat_n(0.0, bottleneck));
        params.extend(up.iter());
        params.extend(std::iter::repeat_n(0.0, width));
        Adapter {
            id,
            layer,
            width,
            bottleneck,
            params,
        }
    }

    fn offsets(&self) -> [usize; 4] {
        let (m, b) = (self.width, self.bottleneck);
        [0, m * b, m * b + b, 2 * m * b + b]
    }

    pub fn down_w(&self) -> ArrayView2<'_, f64> {
        let o = self.offsets();
        ArrayView2::from_shape((self.width, self.bottleneck), &self.params[o[0]..o[1]]).unwrap()
    }

    pub fn down_b(&self) -> ArrayView1<'_, f64> {
        let o = self.offsets();
        ArrayView1::from(&self.params[o[1]..o[2]])
    }

    pub fn up_w(&self) -> ArrayView2<'_, f64> {
        let o = self.offsets();
        ArrayView2::from_shape((self.bottleneck, self.width), &self.params[o[2]..o[3]]).unwrap()
    }

    pub fn up_b(&self) -> ArrayView1<'_, f64> {
        let o = self.offsets();
        ArrayView1::from(&self.params[o[3]..])
    }

    pub(crate) fn grad_offsets(&self) -> [usize; 4] {
        self.offsets()
    }

    pub fn checksum(&self) -> String {
        checksum_of(&self.params)
    }
}

pub fn checksum_of(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// One adapter slot: the member modules and their (pre-softmax) coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRoute {
    pub modules: Vec<ModuleId>,
    pub coefficients: Vec<f64>,
}

/// Per-layer adapter selection. A single member is plain routing; several
/// members are fused with softmax weights of the coefficients. An empty
/// layer runs the bare backbone block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Routing {
    pub layers: Vec<LayerRoute>,
}

impl Routing {
    pub fn bare(num_layers: usize) -> Routing {
        Routing {
            layers: vec![
                LayerRoute {
                    modules: vec![],
                    coefficients: vec![]
                };
                num_layers
            ],
        }
    }

    pub fn single(modules: &[ModuleId]) -> Routing {
        Routing {
            layers: modules
                .iter()
                .map(|&m| LayerRoute {
                    modules: vec![m],
                    coefficients: vec![0.0],
                })
                .collect(),
        }
    }

    pub fn fused(members: Vec<Vec<ModuleId>>, coefficients: Vec<Vec<f64>>) -> Result<Routing> {
        if members.len() != coefficients.len() {
            return Err(DmeaError::Routing("member and coefficient layer counts differ".into()));
        }
        let layers = members
            .into_iter()
            .zip(coefficients)
            .map(|(modules, coefficients)| {
                if modules.len() != coefficients.len() {
                    return Err(DmeaError::Routing("coefficient count differs from member count".into()));
                }
                Ok(LayerRoute { modules, coefficients })
            })
            .collect::<Result<_>>()?;
        Ok(Routing { layers })
    }

    pub fn modules(&self) -> BTreeSet<ModuleId> {
        self.layers.iter().flat_map(|l| l.modules.iter().copied()).collect()
    }
}

/// Frozen backbone plus the adapter parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub backbone: Backbone,
    pub adapters: BTreeMap<ModuleId, Adapter>,
}

/// Everything one forward pass over a single sequence produces.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layers: Vec<LayerTrace>,
    /// Output of the last block (after its adapter slot), one row per token.
    pub final_hidden: Array2<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// `h_t = x + A_t(x)` for each member of the slot.
    pub member_outputs: Vec<Array2<f64>>,
    pub fused_output: Array2<f64>,
}

/// A training pair: the task form `[X,Q,Y]` and the generation form `[G,X,Q,Y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub task: EncodedSample,
    pub data: EncodedSample,
}

impl TrainingExample {
    pub fn new(sample: &Sample, task: &TaskSpec, max_len: usize) -> Result<TrainingExample> {
        Ok(TrainingExample {
            task: encode(sample, task, false, max_len)?,
            data: encode(sample, task, true, max_len)?,
        })
    }

    pub fn from_parts(
        x: &[TokenId],
        q: &[TokenId],
        y: &[TokenId],
        generation_token: TokenId,
        max_len: usize,
    ) -> Result<TrainingExample> {
        Ok(TrainingExample {
            task: encode_parts(x, q, y, None, max_len)?,
            data: encode_parts(x, q, y, Some(generation_token), max_len)?,
        })
    }
}

impl ModelState {
    pub fn new(backbone: Backbone) -> ModelState {
        ModelState {
            backbone,
            adapters: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.backbone.config
    }

    pub fn backbone_checksum(&self) -> String {
        checksum_of(&self.backbone.params)
    }

    pub fn module_checksums(&self) -> BTreeMap<ModuleId, String> {
        self.adapters.iter().map(|(id, a)| (*id, a.checksum())).collect()
    }

    pub fn adapter(&self, id: ModuleId) -> Result<&Adapter> {
        self.adapters
            .get(&id)
            .ok_or_else(|| DmeaError::Routing(format!("unknown module {id}")))
    }

    pub fn validate_routing(&self, routing: &Routing) -> Result<()> {
        if routing.layers.len() != self.config().num_layers {
            return Err(DmeaError::Routing(format!(
                "routing has {} layers, backbone has {}",
                routing.layers.len(),
                self.config().num_layers
            )));
        }
        for (l, route) in routing.layers.iter().enumerate() {
            if route.modules.len() != route.coefficients.len() {
                return Err(DmeaError::Routing(format!("layer {l}: coefficient count mismatch")));
            }
            if route.coefficients.iter().any(|c| !c.is_finite()) {
                return Err(DmeaError::Routing(format!("layer {l}: non-finite coefficient")));
            }
            for id in &route.modules {
                let a = self.adapter(*id)?;
                if a.layer != l {
                    return Err(DmeaError::Routing(format!("module {id} belongs to layer {}, routed at {l}", a.layer)));
                }
            }
        }
        Ok(())
    }

    fn validate_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(DmeaError::InvalidInput("empty token sequence".into()));
        }
        if tokens.len() > self.config().max_sequence_length {
            return Err(DmeaError::InvalidInput(format!(
                "sequence of {} tokens exceeds maximum {}",
                tokens.len(),
                self.config().max_sequence_length
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config().vocab_size) {
            return Err(DmeaError::InvalidInput(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Full forward trace of a single sequence.
    pub fn forward(&self, tokens: &[TokenId], routing: &Routing) -> Result<ForwardTrace> {
        self.validate_tokens(tokens)?;
        self.validate_routing(routing)?;
        let pass = engine::forward_packed(self, &[tokens], routing, engine::HeadRows::All);
        Ok(pass.into_trace())
    }

    /// `-Σ_{j ≥ answer_start} log p(A_j | A_<j)` over the task form.
    pub fn loss_task(&self, sample: &EncodedSample, routing: &Routing) -> Result<f64> {
        if sample.with_generation_token {
            return Err(DmeaError::InvalidSample("task loss expects the form without a generation token".into()));
        }
        if sample.answer_start == 0 || sample.answer_start >= sample.len() {
            return Err(DmeaError::InvalidSample("answer region is empty".into()));
        }
        self.sequence_loss(&sample.tokens, sample.answer_start, routing)
    }

    /// `-Σ_{i ≥ 1} log p(A'_i | A'_<i)` over the generation form.
    pub fn loss_data(&self, sample: &EncodedSample, routing: &Routing) -> Result<f64> {
        if !sample.with_generation_token {
            return Err(DmeaError::InvalidSample("data loss needs a leading generation token".into()));
        }
        if sample.len() < 2 {
            return Err(DmeaError::InvalidSample("nothing follows the generation token".into()));
        }
        self.sequence_loss(&sample.tokens, 1, routing)
    }

    pub fn loss_train(&self, example: &TrainingExample, routing: &Routing, mu: f64) -> Result<f64> {
        if !(mu >= 0.0) {
            return Err(DmeaError::InvalidInput(format!("mu must be non-negative, got {mu}")));
        }
        let task = self.loss_task(&example.task, routing)?;
        if mu == 0.0 {
            return Ok(task);
        }
        Ok(task + mu * self.loss_data(&example.data, routing)?)
    }

    fn sequence_loss(&self, tokens: &[TokenId], predict_from: usize, routing: &Routing) -> Result<f64> {
        self.validate_tokens(tokens)?;
        self.validate_routing(routing)?;
        let group = ObjectiveGroup {
            routing,
            sequences: vec![engine::WeightedSequence {
                tokens,
                predict_from,
                weight: 1.0,
            }],
            coefficient_grads: false,
        };
        Ok(engine::evaluate(self, &[group], &Trainable::nothing(), false)?.0)
    }

    /// Mean batch loss without gradients.
    pub fn batch_loss(&self, batch: &[&TrainingExample], routing: &Routing, selector: LossSelector) -> Result<f64> {
        if batch.is_empty() {
            return Err(DmeaError::InvalidInput("empty batch".into()));
        }
        self.validate_routing(routing)?;
        let weight = 1.0 / batch.len() as f64;
        let group = ObjectiveGroup::from_examples(routing, batch.iter().copied(), selector, weight, false);
        Ok(engine::evaluate(self, &[group], &Trainable::nothing(), false)?.0)
    }

    /// Analytic gradient of the mean batch loss over the trainable parameters.
    pub fn gradients(
        &self,
        batch: &[&TrainingExample],
        routing: &Routing,
        selector: LossSelector,
        trainable: &Trainable,
    ) -> Result<(f64, GradStore)> {
        if batch.is_empty() {
            return Err(DmeaError::InvalidInput("empty batch".into()));
        }
        self.validate_routing(routing)?;
        let weight = 1.0 / batch.len() as f64;
        let group = ObjectiveGroup::from_examples(routing, batch.iter().copied(), selector, weight, trainable.coefficients);
        engine::evaluate(self, &[group], trainable, true)
    }
}

impl ModelState {
    /// Final-layer representations at the last token of each (unpadded)
    /// sequence, one row per sequence.
    pub fn last_token_representations(&self, seqs: &[Vec<TokenId>], routing: &Routing) -> Result<Array2<f64>> {
        self.validate_routing(routing)?;
        let m = self.config().hidden_width;
        let mut out = Array2::zeros((seqs.len(), m));
        for (chunk_idx, chunk) in seqs.chunks(64).enumerate() {
            for s in chunk {
                self.validate_tokens(s)?;
            }
            let views: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
            let pass = engine::forward_packed(self, &views, routing, engine::HeadRows::Rows(Vec::new()));
            let h = pass.segment_last_hidden();
            let start = chunk_idx * 64;
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&h);
        }
        Ok(out)
    }
}

/// Final-layer representation at the last non-padding position.
pub fn last_token_representation(trace: &ForwardTrace, tokens: &[TokenId]) -> Result<Array1<f64>> {
    let idx = tokens
        .iter()
        .rposition(|&t| t != PAD)
        .ok_or_else(|| DmeaError::InvalidInput("sequence is all padding".into()))?;
    Ok(trace.final_hidden.row(idx).to_owned())
}
