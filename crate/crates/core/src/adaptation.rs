//! Adaptation stage: fused training with similar tasks' modules, pseudo-sample
//! replay of affected tasks and per-epoch gradient scaling.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DmeaError, Result};
use crate::model::engine::{evaluate, ObjectiveGroup};
use crate::model::generate::generate;
use crate::model::{DecodeConfig, GradStore, LossSelector, ModelState, ModuleId, Routing, Trainable, TrainingExample};
use crate::numerics::{derive_seed, seeded_rng};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::pool::ModulePool;
use crate::taskgen::{split_triple, TaskId, TokenId, EOS, SEP};
use crate::train::{apply_step, shuffled_batches};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub mu: f64,
    pub pseudo_ratio: f64,
    pub q: usize,
    pub top_k: usize,
    pub temperature: f64,
    /// How pseudo-sample answers are decoded once the sampled prompt is done.
    pub answer_decoding: AnswerDecoding,
}

/// `Greedy` samples the input and question, then lets the origin task's
/// modules answer greedily. `Sampled` samples the whole sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AnswerDecoding {
    #[default]
    Greedy,
    Sampled,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            epochs: 20,
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                learning_rate: 1e-3,
                clip_norm: None,
            },
            batch_size: 16,
            mu: 0.25,
            pseudo_ratio: 0.2,
            q: 100,
            top_k: 20,
            temperature: 1.0,
            answer_decoding: AnswerDecoding::Greedy,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.q == 0 || self.top_k == 0 {
            return Err(DmeaError::Config("adaptation batch_size, q and top_k must be ≥ 1".into()));
        }
        if !(self.pseudo_ratio >= 0.0) || !(self.mu >= 0.0) || !(self.temperature > 0.0) {
            return Err(DmeaError::Config(
                "pseudo_ratio and mu must be non-negative, temperature positive".into(),
            ));
        }
        self.optimizer.validate()
    }
}

/// Stage switches used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationFlags {
    /// Fuse the similar tasks' modules into the new task's layers.
    pub transfer: bool,
    /// Rescale replayed-task losses by the gradient-norm ratio.
    pub scaling: bool,
}

impl Default for AdaptationFlags {
    fn default() -> Self {
        AdaptationFlags {
            transfer: true,
            scaling: true,
        }
    }
}

/// `(g_new / g_old − 1)·e^{−t} + 1`; a zero `g_old` yields 1.
pub fn gradient_scale(g_new: f64, g_old: f64, t: usize) -> f64 {
    if g_old == 0.0 {
        log::warn!("replayed-task gradient norm is zero; using scale 1");
        return 1.0;
    }
    (g_new / g_old - 1.0) * (-(t as f64)).exp() + 1.0
}

/// Previous tasks whose routing uses any of `modules`, in learning order.
pub fn replayed_tasks(pool: &ModulePool, modules: &[ModuleId]) -> Vec<TaskId> {
    pool.tasks()
        .iter()
        .filter(|t| {
            let used = pool.routing(t).map(|r| r.routing.modules()).unwrap_or_default();
            modules.iter().any(|m| used.contains(m))
        })
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoSample {
    pub origin: TaskId,
    pub x: Vec<TokenId>,
    pub q: Vec<TokenId>,
    pub y: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub task: TaskId,
    pub requested: usize,
    pub accepted: usize,
    pub attempts: usize,
}

/// Splits `total` as evenly as possible, earlier entries taking the remainder.
pub fn split_quota(total: usize, parts: usize) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    (0..parts).map(|i| total / parts + usize::from(i < total % parts)).collect()
}

/// Samples pseudo triples for each `(task, generation token)` under that
/// task's stored routing. Malformed generations are dropped; at most three
/// times the quota is attempted.
pub fn generate_pseudo(
    state: &ModelState,
    pool: &ModulePool,
    tasks: &[(TaskId, TokenId)],
    count_total: usize,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<(Vec<PseudoSample>, Vec<PseudoStats>)> {
    let mut samples = Vec::new();
    let mut stats = Vec::new();
    let max_len = state.config().max_sequence_length;
    for (i, ((task, g), quota)) in tasks.iter().zip(split_quota(count_total, tasks.len())).enumerate() {
        let routing = &pool.require_routing(task)?.routing;
        let mut accepted = 0;
        let mut attempts = 0;
        let mut round = 0u64;
        while accepted < quota && attempts < 3 * quota {
            let want = (quota - accepted).min(3 * quota - attempts);
            let mut decode = DecodeConfig::top_k(
                config.top_k,
                config.temperature,
                max_len - 1,
                derive_seed(seed, &[i as u64, round]),
            );
            let greedy = config.answer_decoding == AnswerDecoding::Greedy;
            if greedy {
                decode.stop_at = Some((SEP, 2));
            }
            let mut outs = generate(state, &vec![vec![*g]; want], routing, &decode)?;
            if greedy {
                // answer the sampled prompts as evaluation would, without the generation token
                let prompted: Vec<usize> = (0..outs.len())
                    .filter(|&k| outs[k].finished && outs[k].tokens.last() == Some(&SEP))
                    .collect();
                let prompts: Vec<Vec<TokenId>> = prompted
                    .iter()
                    .map(|&k| outs[k].tokens.clone())
                    .collect();
                for o in &mut outs {
                    o.finished = false;
                }
                if !prompts.is_empty() {
                    let answers = generate(state, &prompts, routing, &DecodeConfig::greedy(max_len))?;
                    for (&k, a) in prompted.iter().zip(answers) {
                        outs[k].tokens.extend(a.tokens);
                        outs[k].finished = a.finished;
                    }
                }
            }
            attempts += want;
            round += 1;
            for out in outs {
                if !out.finished || out.tokens.len() + 2 > max_len {
                    continue;
                }
                let mut body = out.tokens;
                body.push(EOS);
                if let Some((x, q, y)) = split_triple(&body) {
                    samples.push(PseudoSample {
                        origin: task.clone(),
                        x,
                        q,
                        y,
                    });
                    accepted += 1;
                }
            }
        }
        if accepted < quota {
            log::info!("task {task}: kept {accepted} of {quota} pseudo samples after {attempts} attempts");
        }
        stats.push(PseudoStats {
            task: task.clone(),
            requested: quota,
            accepted,
            attempts,
        });
    }
    Ok((samples, stats))
}

/// Mean training-loss gradient of `batch` over `modules`. Repeated draws of
/// the same example are folded into one weighted sequence.
fn restricted_gradient(
    state: &ModelState,
    batch: &[&TrainingExample],
    routing: &Routing,
    modules: &BTreeSet<ModuleId>,
    mu: f64,
) -> Result<GradStore> {
    if batch.is_empty() {
        return Err(DmeaError::InvalidInput("empty gradient batch".into()));
    }
    let mut counts: Vec<(&TrainingExample, usize)> = Vec::new();
    for &ex in batch {
        match counts.iter_mut().find(|(e, _)| std::ptr::eq(*e, ex)) {
            Some((_, c)) => *c += 1,
            None => counts.push((ex, 1)),
        }
    }
    let mut group = ObjectiveGroup::from_examples(routing, std::iter::empty(), LossSelector::Train { mu }, 0.0, false);
    for (ex, c) in counts {
        group.push(ex, LossSelector::Train { mu }, c as f64 / batch.len() as f64);
    }
    let trainable = Trainable::modules(modules.iter().copied(), false);
    Ok(evaluate(state, &[group], &trainable, true)?.1)
}

/// Norms of the training-loss gradients of two batches, restricted to `reused`.
pub fn estimate_gradient_norms(
    state: &ModelState,
    new_batch: &[&TrainingExample],
    new_routing: &Routing,
    old_batch: &[&TrainingExample],
    old_routing: &Routing,
    reused: &BTreeSet<ModuleId>,
    mu: f64,
) -> Result<(f64, f64)> {
    if reused.is_empty() {
        return Err(DmeaError::InvalidInput("no reused modules to measure".into()));
    }
    let g_new = restricted_gradient(state, new_batch, new_routing, reused, mu)?;
    let g_old = restricted_gradient(state, old_batch, old_routing, reused, mu)?;
    Ok((g_new.module_norm(reused), g_old.module_norm(reused)))
}

/// One weighted slice of a mixed batch.
#[derive(Debug, Clone)]
pub struct ObjectivePart<'a> {
    pub routing: &'a Routing,
    pub examples: Vec<&'a TrainingExample>,
    pub scale: f64,
    pub coefficient_grads: bool,
}

/// `Σ_parts scale · Σ_examples L_train / N` with `N` the total example count,
/// returning the total, each part's unscaled loss and (optionally) gradients.
pub fn mixed_objective(
    state: &ModelState,
    parts: &[ObjectivePart<'_>],
    mu: f64,
    trainable: &Trainable,
    want_grads: bool,
) -> Result<(f64, Vec<f64>, GradStore)> {
    let n: usize = parts.iter().map(|p| p.examples.len()).sum();
    if n == 0 {
        return Err(DmeaError::InvalidInput("empty batch".into()));
    }
    let mut total = 0.0;
    let mut per_part = Vec::with_capacity(parts.len());
    let mut grads = GradStore::default();
    for p in parts {
        if p.examples.is_empty() {
            per_part.push(0.0);
            continue;
        }
        let group = ObjectiveGroup::from_examples(
            p.routing,
            p.examples.iter().copied(),
            LossSelector::Train { mu },
            p.scale / n as f64,
            p.coefficient_grads,
        );
        let (loss, g) = evaluate(state, &[group], trainable, want_grads)?;
        total += loss;
        per_part.push(if p.scale == 0.0 { 0.0 } else { loss / p.scale });
        grads.add_scaled(&g, 1.0);
    }
    Ok((total, per_part, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayLog {
    pub task: TaskId,
    pub loss: f64,
    pub eta: f64,
    pub g_new_norm: f64,
    pub g_old_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub new_loss: f64,
    pub replay: Vec<ReplayLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationOutcome {
    /// Fused routing with the trained coefficients, used for inference.
    pub routing: Routing,
    pub similar: Vec<TaskId>,
    pub replayed: Vec<TaskId>,
    pub pseudo: Vec<PseudoStats>,
    pub epochs: Vec<EpochLog>,
}

impl AdaptationOutcome {
    pub fn log_csv(&self) -> String {
        let mut out = String::from("epoch,new_loss,replayed_task,replay_loss,eta,g_new_norm,g_old_norm\n");
        for e in &self.epochs {
            if e.replay.is_empty() {
                out.push_str(&format!("{},{:.9},,,,,\n", e.epoch, e.new_loss));
            }
            for r in &e.replay {
                out.push_str(&format!(
                    "{},{:.9},{},{:.9},{:.9},{:.9},{:.9}\n",
                    e.epoch, e.new_loss, r.task, r.loss, r.eta, r.g_new_norm, r.g_old_norm
                ));
            }
        }
        out
    }
}

/// Per-layer members: the new task's module first, then each similar task's
/// selected module not already present. Coefficients start at 1.0.
pub fn fused_routing(pool: &ModulePool, selected: &[ModuleId], similar: &[TaskId]) -> Result<Routing> {
    let mut members: Vec<Vec<ModuleId>> = selected.iter().map(|&m| vec![m]).collect();
    for task in similar {
        let r = pool.require_routing(task)?;
        for (l, &m) in r.selected.iter().enumerate() {
            if !members[l].contains(&m) {
                members[l].push(m);
            }
        }
    }
    let coefficients = members.iter().map(|m| vec![1.0; m.len()]).collect();
    Routing::fused(members, coefficients)
}

struct ReplaySet {
    task: TaskId,
    routing: Routing,
    examples: Vec<TrainingExample>,
    reused: BTreeSet<ModuleId>,
}

fn draw<'a>(items: &'a [TrainingExample], q: usize, rng: &mut crate::numerics::Rng) -> Vec<&'a TrainingExample> {
    if items.len() >= q {
        rand::seq::index::sample(rng, items.len(), q).into_iter().map(|i| &items[i]).collect()
    } else {
        (0..q).map(|_| &items[rng.random_range(0..items.len())]).collect()
    }
}

/// Trains the new task's selected modules and fusion coefficients on its
/// data mixed with pseudo samples of every previous task sharing those
/// modules. The pool is not modified; the caller registers the returned routing.
#[allow(clippy::too_many_arguments)]
pub fn run_adaptation(
    state: &mut ModelState,
    pool: &ModulePool,
    task: &TaskId,
    examples: &[TrainingExample],
    selected: &[ModuleId],
    similar: &[TaskId],
    generation_tokens: &dyn Fn(&TaskId) -> Option<TokenId>,
    config: &AdaptationConfig,
    flags: AdaptationFlags,
    seed: u64,
) -> Result<AdaptationOutcome> {
    config.validate()?;
    let stage = |e: DmeaError| e.in_stage("adaptation", task.0.clone());
    if examples.is_empty() {
        return Err(stage(DmeaError::InvalidInput("no training data".into())));
    }
    let max_len = state.config().max_sequence_length;
    let similar: Vec<TaskId> = if flags.transfer { similar.to_vec() } else { Vec::new() };
    let mut routing = fused_routing(pool, selected, &similar)?;

    let replayed = replayed_tasks(pool, selected);
    let count_total = (config.pseudo_ratio * examples.len() as f64).round() as usize;
    let with_tokens = replayed
        .iter()
        .map(|t| {
            generation_tokens(t)
                .map(|g| (t.clone(), g))
                .ok_or_else(|| DmeaError::InvalidState(format!("no generation token for task {t}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let (pseudo, pseudo_stats) = if count_total > 0 && !with_tokens.is_empty() {
        generate_pseudo(state, pool, &with_tokens, count_total, config, derive_seed(seed, &[1]))?
    } else {
        (Vec::new(), Vec::new())
    };
    let selected_set: BTreeSet<ModuleId> = selected.iter().copied().collect();
    let mut replay_sets = Vec::new();
    for (t, g) in &with_tokens {
        let stored = &pool.require_routing(t)?.routing;
        let examples: Vec<TrainingExample> = pseudo
            .iter()
            .filter(|p| &p.origin == t)
            .filter_map(|p| TrainingExample::from_parts(&p.x, &p.q, &p.y, *g, max_len).ok())
            .collect();
        if examples.is_empty() {
            continue;
        }
        replay_sets.push(ReplaySet {
            task: t.clone(),
            routing: stored.clone(),
            reused: stored.modules().intersection(&selected_set).copied().collect(),
            examples,
        });
    }

    let trainable = Trainable::modules(selected.iter().copied(), flags.transfer);
    let mut opt = Optimizer::new(config.optimizer)?;
    let mut rng = seeded_rng(derive_seed(seed, &[2]));
    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut etas = Vec::with_capacity(replay_sets.len());
        let mut replay_logs = Vec::with_capacity(replay_sets.len());
        // One fresh new-task batch per epoch, shared by every replayed task.
        let new_grad = if flags.scaling && !replay_sets.is_empty() {
            let new_batch = draw(examples, config.q, &mut rng);
            Some(restricted_gradient(state, &new_batch, &routing, &selected_set, config.mu).map_err(stage)?)
        } else {
            None
        };
        for rs in &replay_sets {
            let (eta, g_new, g_old) = match &new_grad {
                Some(gn) => {
                    let old_batch = draw(&rs.examples, config.q, &mut rng);
                    let go = restricted_gradient(state, &old_batch, &rs.routing, &rs.reused, config.mu).map_err(stage)?;
                    let (gn, go) = (gn.module_norm(&rs.reused), go.module_norm(&rs.reused));
                    (gradient_scale(gn, go, epoch), gn, go)
                }
                None => (1.0, 0.0, 0.0),
            };
            etas.push(eta);
            replay_logs.push(ReplayLog {
                task: rs.task.clone(),
                loss: 0.0,
                eta,
                g_new_norm: g_new,
                g_old_norm: g_old,
            });
        }

        // One shuffled pass over the union of new and pseudo samples.
        let mut index: Vec<(usize, usize)> = (0..examples.len()).map(|i| (0, i)).collect();
        for (s, rs) in replay_sets.iter().enumerate() {
            index.extend((0..rs.examples.len()).map(|i| (s + 1, i)));
        }
        let mut sums = vec![0.0; replay_sets.len() + 1];
        for batch in shuffled_batches(index.len(), config.batch_size, &mut rng) {
            let mut parts = Vec::with_capacity(replay_sets.len() + 1);
            parts.push(ObjectivePart {
                routing: &routing,
                examples: Vec::new(),
                scale: 1.0,
                coefficient_grads: true,
            });
            for (rs, &eta) in replay_sets.iter().zip(&etas) {
                parts.push(ObjectivePart {
                    routing: &rs.routing,
                    examples: Vec::new(),
                    scale: eta,
                    coefficient_grads: false,
                });
            }
            for &b in &batch {
                let (src, i) = index[b];
                let ex = if src == 0 { &examples[i] } else { &replay_sets[src - 1].examples[i] };
                parts[src].examples.push(ex);
            }
            let (_, per_part, grads) =
                mixed_objective(state, &parts, config.mu, &trainable, true).map_err(stage)?;
            let n = batch.len() as f64;
            for (s, l) in per_part.iter().enumerate() {
                sums[s] += l * n;
            }
            drop(parts);
            apply_step(&mut opt, state, &grads, selected, flags.transfer.then_some(&mut routing));
        }
        let new_loss = sums[0] / examples.len() as f64;
        if !new_loss.is_finite() {
            return Err(stage(DmeaError::TrainingFailure("adaptation loss diverged".into())));
        }
        for (s, log) in replay_logs.iter_mut().enumerate() {
            log.loss = sums[s + 1] / replay_sets[s].examples.len() as f64;
        }
        logs.push(EpochLog {
            epoch,
            new_loss,
            replay: replay_logs,
        });
    }

    Ok(AdaptationOutcome {
        routing,
        similar,
        replayed: replay_sets.iter().map(|r| r.task.clone()).collect(),
        pseudo: pseudo_stats,
        epochs: logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_factor_values() {
        assert_eq!(gradient_scale(2.0, 2.0, 4), 1.0);
        assert_eq!(gradient_scale(3.0, 1.0, 0), 3.0);
        assert!((gradient_scale(2.0, 1.0, 1) - (1.0 + (-1.0f64).exp())).abs() < 1e-12);
        assert_eq!(gradient_scale(5.0, 0.0, 0), 1.0);
    }

    #[test]
    fn quota_split_gives_remainder_to_earlier_tasks() {
        assert_eq!(split_quota(40, 3), vec![14, 13, 13]);
        assert_eq!(split_quota(0, 2), vec![0, 0]);
        assert!(split_quota(5, 0).is_empty());
    }
}
