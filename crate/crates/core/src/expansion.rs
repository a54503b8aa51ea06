//! Expansion stage: differentiable search between previous modules and one
//! temporary module per layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DmeaError, Result};
use crate::model::{LossSelector, ModelState, ModuleId, Routing, Trainable, TrainingExample};
use crate::numerics::{derive_seed, seeded_rng};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::pool::{select_largest, ModulePool};
use crate::taskgen::TaskId;
use crate::train::{apply_step, shuffled_batches};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientInit {
    /// Word-frequency similarity between owner tasks and the new task.
    #[default]
    Similarity,
    /// Every coefficient starts at 1.0.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub mu: f64,
    pub init: CoefficientInit,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            epochs: 6,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-3,
                clip_norm: None,
            },
            batch_size: 16,
            mu: 0.25,
            init: CoefficientInit::Similarity,
        }
    }
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DmeaError::Config("expansion epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.mu >= 0.0) {
            return Err(DmeaError::Config("expansion mu must be non-negative".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionLayerTrace {
    pub members: Vec<ModuleId>,
    pub initial: Vec<f64>,
    #[serde(rename = "final")]
    pub trained: Vec<f64>,
    pub selected: ModuleId,
    pub reused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTrace {
    pub task: TaskId,
    pub layers: Vec<ExpansionLayerTrace>,
    pub epoch_losses: Vec<f64>,
}

impl ExpansionTrace {
    pub fn selected(&self) -> Vec<ModuleId> {
        self.layers.iter().map(|l| l.selected).collect()
    }

    pub fn reused_count(&self) -> usize {
        self.layers.iter().filter(|l| l.reused).count()
    }
}

/// Inserts a temporary module per layer, trains only those modules and the
/// mixing coefficients on the new task, keeps the per-layer argmax and drops
/// the losing temporaries. `epochs_override` allows a zero-epoch search.
#[allow(clippy::too_many_arguments)]
pub fn run_expansion(
    state: &mut ModelState,
    pool: &mut ModulePool,
    task: &TaskId,
    examples: &[TrainingExample],
    frequencies: &BTreeMap<TaskId, Vec<f64>>,
    new_frequency: &[f64],
    config: &ExpansionConfig,
    epochs_override: Option<usize>,
    seed: u64,
) -> Result<ExpansionTrace> {
    config.validate()?;
    if examples.is_empty() {
        return Err(DmeaError::InvalidInput(format!("task {task} has no training data")));
    }
    let stage = |e: DmeaError| e.in_stage("expansion", task.0.clone());
    let layers = pool.num_layers();
    let bootstrap = pool.is_empty();

    let mut temps = Vec::with_capacity(layers);
    for l in 0..layers {
        temps.push(pool.insert_temp_module(state, l, derive_seed(seed, &[l as u64]))?);
    }
    let mut members = Vec::with_capacity(layers);
    let mut initial = Vec::with_capacity(layers);
    for l in 0..layers {
        let ids = pool.layer(l).to_vec();
        let lambda = match config.init {
            _ if bootstrap => vec![1.0],
            CoefficientInit::Uniform => vec![1.0; ids.len()],
            CoefficientInit::Similarity => pool.init_expansion_coefficients(l, frequencies, new_frequency)?,
        };
        members.push(ids);
        initial.push(lambda);
    }
    let mut routing = Routing::fused(members.clone(), initial.clone())?;

    let trainable = Trainable::modules(temps.iter().copied(), true);
    let mut opt = Optimizer::new(config.optimizer)?;
    let mut rng = seeded_rng(derive_seed(seed, &[1000]));
    let selector = LossSelector::Train { mu: config.mu };
    let mut epoch_losses = Vec::new();
    for _ in 0..epochs_override.unwrap_or(config.epochs) {
        let mut total = 0.0;
        for batch in shuffled_batches(examples.len(), config.batch_size, &mut rng) {
            let refs: Vec<&TrainingExample> = batch.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = state.gradients(&refs, &routing, selector, &trainable).map_err(stage)?;
            total += loss * refs.len() as f64;
            apply_step(&mut opt, state, &grads, &temps, Some(&mut routing));
        }
        let mean = total / examples.len() as f64;
        if !mean.is_finite() {
            return Err(stage(DmeaError::TrainingFailure("expansion loss diverged".into())));
        }
        epoch_losses.push(mean);
    }

    let mut trace_layers = Vec::with_capacity(layers);
    for l in 0..layers {
        let trained = routing.layers[l].coefficients.clone();
        let idx = select_largest(&trained)?;
        let selected = members[l][idx];
        pool.discard_unselected(state, l, selected)?;
        trace_layers.push(ExpansionLayerTrace {
            members: members[l].clone(),
            initial: initial[l].clone(),
            trained,
            selected,
            reused: selected != temps[l],
        });
    }
    Ok(ExpansionTrace {
        task: task.clone(),
        layers: trace_layers,
        epoch_losses,
    })
}
