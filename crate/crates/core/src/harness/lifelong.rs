//! Full lifelong runs: each method over a task order, evaluated after every task.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Architecture, Method, MethodSpec, RunConfig};
use super::metrics::{evaluate_task, fkt, Score, ResultsMatrix};
use crate::adaptation::{run_adaptation, AdaptationConfig, AdaptationFlags, AdaptationOutcome};
use crate::error::{DmeaError, Result};
use crate::expansion::{run_expansion, ExpansionConfig, ExpansionTrace};
use crate::model::{ModelState, ModuleId, Routing, TrainingExample};
use crate::numerics::derive_seed;
use crate::pool::{ModulePool, TaskRouting};
use crate::selection::{compute_subspace, score_previous, top_k_similar, BasisStore, SimilarityRecord};
use crate::taskgen::{word_frequency, Suite, TaskId, TaskSpec, TokenId};

/// Seed for work that depends only on the task, not on its position in an order.
pub fn task_seed(seed: u64, task: &TaskId) -> u64 {
    let digest = Sha256::digest(task.0.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    derive_seed(seed, &[u64::from_le_bytes(word)])
}

/// Per-task record of what each stage decided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub step: usize,
    pub task: TaskId,
    pub family: String,
    pub selected: Vec<ModuleId>,
    pub reused_layers: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub similar: Vec<TaskId>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub replayed: Vec<TaskId>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub expansion: Option<ExpansionTrace>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subspace_rank: Option<usize>,
    pub adaptation: AdaptationOutcome,
    pub seconds: f64,
}

/// Checksums after learning one task. A run that detects a changed frozen
/// parameter fails instead of recording a check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrityCheck {
    pub task: TaskId,
    pub backbone: String,
    pub frozen_modules: usize,
    /// Every module's checksum once the task is learned.
    pub modules: BTreeMap<ModuleId, String>,
}

#[derive(Debug, Clone)]
pub struct LifelongRun {
    pub method: MethodSpec,
    pub seed: u64,
    pub order: Vec<TaskId>,
    pub results: ResultsMatrix,
    pub records: Vec<TaskRecord>,
    pub integrity: Vec<IntegrityCheck>,
    pub similarity: Vec<SimilarityRecord>,
    pub bases: BasisStore,
    pub state: ModelState,
    pub pool: ModulePool,
    pub seconds: f64,
}

impl LifelongRun {
    /// Forward transfer at 1-based step `t` against `standalone` (keyed by task).
    pub fn fkt_at(&self, standalone: &BTreeMap<TaskId, f64>, t: usize) -> Result<f64> {
        let d = self.standalone_in_order(standalone)?;
        fkt(&self.results.diagonal(), &d, t)
    }

    pub fn standalone_in_order(&self, standalone: &BTreeMap<TaskId, f64>) -> Result<Vec<f64>> {
        self.order
            .iter()
            .map(|t| {
                standalone
                    .get(t)
                    .copied()
                    .ok_or_else(|| DmeaError::InvalidInput(format!("no standalone score for task {t}")))
            })
            .collect()
    }
}

fn training_examples(task: &TaskSpec, max_len: usize) -> Result<Vec<TrainingExample>> {
    task.train.iter().map(|s| TrainingExample::new(s, task, max_len)).collect()
}

fn max_new_tokens(suite: &Suite) -> usize {
    suite.max_answer_len() + 2
}

fn check_suite(state: &ModelState, suite: &Suite) -> Result<()> {
    let cfg = state.config();
    if suite.max_encoded_len() > cfg.max_sequence_length {
        return Err(DmeaError::Config(format!(
            "suite needs sequences of {} tokens but the backbone allows {}",
            suite.max_encoded_len(),
            cfg.max_sequence_length
        )));
    }
    Ok(())
}

/// Inserts one fresh module per layer and makes them permanent.
fn fresh_modules(state: &mut ModelState, pool: &mut ModulePool, seed: u64) -> Result<Vec<ModuleId>> {
    (0..pool.num_layers())
        .map(|l| {
            let id = pool.insert_temp_module(state, l, derive_seed(seed, &[l as u64]))?;
            pool.discard_unselected(state, l, id)?;
            Ok(id)
        })
        .collect()
}

/// Adaptation settings for the non-searching baselines: the task's modules
/// get the whole DMEA epoch budget, with or without plain replay.
fn baseline_adaptation(cfg: &RunConfig, replay: bool) -> AdaptationConfig {
    AdaptationConfig {
        epochs: cfg.task_epochs(),
        pseudo_ratio: if replay { cfg.adaptation.pseudo_ratio } else { 0.0 },
        ..cfg.adaptation
    }
}

const BASELINE_FLAGS: AdaptationFlags = AdaptationFlags {
    transfer: false,
    scaling: false,
};

/// Trains one task alone on `backbone` with fresh modules and returns its
/// test score. This is exactly what the per-task-adapters method does for
/// each task, so both produce identical numbers.
pub fn train_isolated(backbone: &ModelState, suite: &Suite, task: &TaskId, cfg: &RunConfig, seed: u64) -> Result<Score> {
    check_suite(backbone, suite)?;
    let spec = suite
        .task(task)
        .ok_or_else(|| DmeaError::InvalidInput(format!("unknown task {task}")))?;
    let mut state = backbone.clone();
    state.adapters.clear();
    let mut pool = ModulePool::new(state.config().num_layers);
    let s = task_seed(seed, task);
    let selected = fresh_modules(&mut state, &mut pool, derive_seed(s, &[0]))?;
    let examples = training_examples(spec, state.config().max_sequence_length)?;
    let outcome = run_adaptation(
        &mut state,
        &pool,
        task,
        &examples,
        &selected,
        &[],
        &|_| None,
        &baseline_adaptation(cfg, false),
        BASELINE_FLAGS,
        derive_seed(s, &[1]),
    )?;
    evaluate_task(&state, &outcome.routing, spec, max_new_tokens(suite))
}

/// Standalone exact-match score of every task in the suite.
pub fn standalone_scores(backbone: &ModelState, suite: &Suite, cfg: &RunConfig, seed: u64) -> Result<BTreeMap<TaskId, f64>> {
    suite
        .tasks
        .iter()
        .map(|t| Ok((t.id.clone(), train_isolated(backbone, suite, &t.id, cfg, seed)?.exact_match)))
        .collect()
}

/// Runs `method` over `order`, evaluating every learned task after each step.
pub fn run_lifelong(
    backbone: &ModelState,
    suite: &Suite,
    order: &[TaskId],
    method: Method,
    cfg: &RunConfig,
    seed: u64,
) -> Result<LifelongRun> {
    cfg.validate()?;
    check_suite(backbone, suite)?;
    if order.is_empty() {
        return Err(DmeaError::InvalidInput("task order is empty".into()));
    }
    for (i, t) in order.iter().enumerate() {
        if suite.task(t).is_none() || order[..i].contains(t) {
            return Err(DmeaError::InvalidInput(format!("order is not a permutation of suite tasks at {t}")));
        }
    }
    let spec = method.spec();
    let started = Instant::now();
    let mut state = backbone.clone();
    state.adapters.clear();
    let max_len = state.config().max_sequence_length;
    let vocab = state.config().vocab_size;
    let mut pool = ModulePool::new(state.config().num_layers);
    let mut bases = BasisStore::default();
    let mut frequencies: BTreeMap<TaskId, Vec<f64>> = BTreeMap::new();
    let mut results = ResultsMatrix {
        order: order.iter().map(|t| t.0.clone()).collect(),
        rows: Vec::new(),
    };
    let mut records = Vec::new();
    let mut integrity = Vec::new();
    let mut similarity = Vec::new();
    let tokens: BTreeMap<TaskId, TokenId> = suite.tasks.iter().map(|t| (t.id.clone(), t.generation_token)).collect();
    let generation_token = |t: &TaskId| tokens.get(t).copied();
    let expansion_cfg = ExpansionConfig {
        init: spec.init,
        ..cfg.expansion
    };
    let flags = AdaptationFlags {
        transfer: spec.transfer,
        scaling: spec.scaling,
    };

    for (step, task_id) in order.iter().enumerate() {
        let task_started = Instant::now();
        let task = suite.task(task_id).expect("checked above");
        let examples = training_examples(task, max_len)?;
        let backbone_before = state.backbone_checksum();
        let modules_before = state.module_checksums();
        let step_seed = derive_seed(seed, &[step as u64]);

        let mut expansion = None;
        let mut subspace_rank = None;
        let mut similar = Vec::new();
        let (selected, outcome) = match spec.architecture {
            Architecture::Search => {
                let freq = word_frequency(task, vocab);
                let trace = run_expansion(
                    &mut state,
                    &mut pool,
                    task_id,
                    &examples,
                    &frequencies,
                    &freq,
                    &expansion_cfg,
                    None,
                    derive_seed(step_seed, &[1]),
                )?;
                frequencies.insert(task_id.clone(), freq);
                let selected = trace.selected();
                let basis = compute_subspace(
                    &state,
                    &Routing::single(&selected),
                    task,
                    &cfg.selection,
                    derive_seed(step_seed, &[2]),
                )
                .map_err(|e| e.in_stage("selection", task_id.0.clone()))?;
                subspace_rank = Some(basis.k);
                if spec.transfer && !bases.bases.is_empty() {
                    let scores = score_previous(&basis, &bases, &frequencies, &cfg.selection)
                        .map_err(|e| e.in_stage("selection", task_id.0.clone()))?;
                    similar = top_k_similar(&scores, cfg.selection.k);
                    similarity.extend(scores.iter().map(|(t, s)| SimilarityRecord {
                        new_task: task_id.clone(),
                        previous_task: t.clone(),
                        score: *s,
                        selected: similar.contains(t),
                    }));
                }
                bases.insert(basis)?;
                expansion = Some(trace);
                let outcome = run_adaptation(
                    &mut state,
                    &pool,
                    task_id,
                    &examples,
                    &selected,
                    &similar,
                    &generation_token,
                    &cfg.adaptation,
                    flags,
                    derive_seed(step_seed, &[3]),
                )?;
                (selected, outcome)
            }
            Architecture::Shared => {
                let selected = match pool.tasks().first() {
                    Some(first) => pool.require_routing(first)?.selected.clone(),
                    None => fresh_modules(&mut state, &mut pool, derive_seed(step_seed, &[0]))?,
                };
                let outcome = run_adaptation(
                    &mut state,
                    &pool,
                    task_id,
                    &examples,
                    &selected,
                    &[],
                    &generation_token,
                    &baseline_adaptation(cfg, spec.replay),
                    BASELINE_FLAGS,
                    derive_seed(step_seed, &[3]),
                )?;
                (selected, outcome)
            }
            Architecture::Isolated => {
                let s = task_seed(seed, task_id);
                let selected = fresh_modules(&mut state, &mut pool, derive_seed(s, &[0]))?;
                let outcome = run_adaptation(
                    &mut state,
                    &pool,
                    task_id,
                    &examples,
                    &selected,
                    &[],
                    &generation_token,
                    &baseline_adaptation(cfg, false),
                    BASELINE_FLAGS,
                    derive_seed(s, &[1]),
                )?;
                (selected, outcome)
            }
        };
        pool.register_routing(
            task_id,
            TaskRouting {
                selected: selected.clone(),
                routing: outcome.routing.clone(),
            },
        )?;
        pool.check_consistency(&state)?;

        if state.backbone_checksum() != backbone_before {
            return Err(DmeaError::InvalidState(format!("backbone changed while learning {task_id}")));
        }
        let after = state.module_checksums();
        let mut frozen = 0;
        for (id, sum) in &modules_before {
            if selected.contains(id) {
                continue;
            }
            if after.get(id) != Some(sum) {
                return Err(DmeaError::InvalidState(format!("module {id} changed while learning {task_id}")));
            }
            frozen += 1;
        }
        integrity.push(IntegrityCheck {
            task: task_id.clone(),
            backbone: backbone_before,
            frozen_modules: frozen,
            modules: after,
        });

        let mut row = Vec::with_capacity(step + 1);
        for prev in &order[..=step] {
            let routing = &pool.require_routing(prev)?.routing;
            row.push(evaluate_task(&state, routing, suite.task(prev).expect("checked"), max_new_tokens(suite))?);
        }
        log::info!(
            "{} seed {seed} step {}: {} exact {:.1}",
            spec.method,
            step + 1,
            task_id,
            row[step].exact_match
        );
        results.rows.push(row);
        let reused_layers = expansion.as_ref().map(|t: &ExpansionTrace| t.reused_count()).unwrap_or_else(|| {
            if matches!(spec.architecture, Architecture::Shared) && step > 0 {
                selected.len()
            } else {
                0
            }
        });
        records.push(TaskRecord {
            step: step + 1,
            task: task_id.clone(),
            family: task.family.as_str().to_string(),
            selected,
            reused_layers,
            similar: outcome.similar.clone(),
            replayed: outcome.replayed.clone(),
            expansion,
            subspace_rank,
            adaptation: outcome,
            seconds: task_started.elapsed().as_secs_f64(),
        });
    }
    results.validate()?;
    Ok(LifelongRun {
        method: spec,
        seed,
        order: order.to_vec(),
        results,
        records,
        integrity,
        similarity,
        bases,
        state,
        pool,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Fraction of `earlier`'s selected modules that `later` also selected.
pub fn shared_fraction(earlier: &[ModuleId], later: &[ModuleId]) -> f64 {
    if earlier.is_empty() {
        return 0.0;
    }
    let shared = earlier.iter().zip(later).filter(|(a, b)| a == b).count();
    shared as f64 / earlier.len() as f64
}
