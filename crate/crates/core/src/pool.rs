//! Growing store of adapter modules, task routings and owner sets.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{DmeaError, Result};
use crate::model::{Adapter, ModelState, ModuleId, Routing};
use crate::numerics::cosine_similarity;
use crate::taskgen::TaskId;

/// A finished task's architecture: the per-layer modules chosen for it and
/// the routing used for inference (possibly fused with other tasks' modules).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRouting {
    pub selected: Vec<ModuleId>,
    pub routing: Routing,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModulePool {
    layers: Vec<Vec<ModuleId>>,
    temporary: BTreeSet<ModuleId>,
    tasks: Vec<TaskId>,
    routings: BTreeMap<TaskId, TaskRouting>,
    next_id: u32,
}

impl ModulePool {
    pub fn new(num_layers: usize) -> ModulePool {
        ModulePool {
            layers: vec![Vec::new(); num_layers],
            ..ModulePool::default()
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Modules of one layer in insertion order.
    pub fn layer(&self, layer: usize) -> &[ModuleId] {
        &self.layers[layer]
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_temporary(&self, id: ModuleId) -> bool {
        self.temporary.contains(&id)
    }

    /// Tasks in the order they were registered.
    pub fn tasks(&self) -> &[TaskId] {
        &self.tasks
    }

    pub fn routing(&self, task: &TaskId) -> Option<&TaskRouting> {
        self.routings.get(task)
    }

    pub fn require_routing(&self, task: &TaskId) -> Result<&TaskRouting> {
        self.routing(task)
            .ok_or_else(|| DmeaError::InvalidState(format!("task {task} has no registered routing")))
    }

    /// Adds a freshly initialised, ownerless module at the end of `layer`.
    pub fn insert_temp_module(&mut self, state: &mut ModelState, layer: usize, seed: u64) -> Result<ModuleId> {
        if layer >= self.layers.len() {
            return Err(DmeaError::InvalidInput(format!("layer {layer} out of range")));
        }
        let cfg = *state.config();
        let id = ModuleId(self.next_id);
        self.next_id += 1;
        state
            .adapters
            .insert(id, Adapter::new_random(id, layer, cfg.hidden_width, cfg.adapter_bottleneck, seed));
        self.layers[layer].push(id);
        self.temporary.insert(id);
        Ok(id)
    }

    /// Tasks whose inference routing uses `id` anywhere.
    pub fn owners(&self, id: ModuleId) -> BTreeSet<TaskId> {
        self.routings
            .iter()
            .filter(|(_, r)| r.routing.modules().contains(&id))
            .map(|(t, _)| t.clone())
            .collect()
    }

    /// Expansion-stage coefficients for one layer whose last module is the
    /// temporary one: each previous module gets the best frequency cosine
    /// among its owners, the temporary module the minimum of those.
    pub fn init_expansion_coefficients(
        &self,
        layer: usize,
        frequencies: &BTreeMap<TaskId, Vec<f64>>,
        new_task: &[f64],
    ) -> Result<Vec<f64>> {
        let members = &self.layers[layer];
        let previous = members
            .iter()
            .filter(|id| !self.temporary.contains(id))
            .map(|&id| {
                self.owners(id)
                    .iter()
                    .map(|t| {
                        let f = frequencies
                            .get(t)
                            .ok_or_else(|| DmeaError::InvalidState(format!("no frequency vector for task {t}")))?;
                        cosine_similarity(f, new_task)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if members.len() != previous.len() + 1 || !self.temporary.contains(members.last().unwrap()) {
            return Err(DmeaError::InvalidState(format!(
                "layer {layer} must end with exactly one temporary module"
            )));
        }
        similarity_coefficients(&previous)
    }

    /// Drops temporary modules of `layer` other than `keep`; `keep` becomes permanent.
    pub fn discard_unselected(&mut self, state: &mut ModelState, layer: usize, keep: ModuleId) -> Result<()> {
        let temps: Vec<ModuleId> = self.layers[layer]
            .iter()
            .copied()
            .filter(|id| self.temporary.contains(id))
            .collect();
        for id in temps {
            if id == keep {
                self.temporary.remove(&id);
                continue;
            }
            if !self.owners(id).is_empty() {
                return Err(DmeaError::InvalidState(format!("module {id} is owned and cannot be discarded")));
            }
            self.layers[layer].retain(|m| *m != id);
            self.temporary.remove(&id);
            state.adapters.remove(&id);
        }
        Ok(())
    }

    /// Removes an ownerless module outright; refuses owned ones.
    pub fn discard(&mut self, state: &mut ModelState, id: ModuleId) -> Result<()> {
        if !self.owners(id).is_empty() {
            return Err(DmeaError::InvalidState(format!("module {id} is owned and cannot be discarded")));
        }
        for l in &mut self.layers {
            l.retain(|m| *m != id);
        }
        self.temporary.remove(&id);
        state.adapters.remove(&id);
        Ok(())
    }

    /// Records (or idempotently re-records) a task's architecture.
    pub fn register_routing(&mut self, task: &TaskId, entry: TaskRouting) -> Result<()> {
        if entry.selected.len() != self.layers.len() || entry.routing.layers.len() != self.layers.len() {
            return Err(DmeaError::Routing("routing layer count differs from pool".into()));
        }
        for (l, route) in entry.routing.layers.iter().enumerate() {
            for id in route.modules.iter().chain(std::iter::once(&entry.selected[l])) {
                if !self.layers[l].contains(id) {
                    return Err(DmeaError::Routing(format!("module {id} is not in layer {l}")));
                }
                if self.temporary.contains(id) {
                    return Err(DmeaError::Routing(format!("module {id} is still temporary")));
                }
            }
            if !route.modules.contains(&entry.selected[l]) {
                return Err(DmeaError::Routing(format!("layer {l}: selected module missing from routing")));
            }
        }
        if let Some(prev) = self.routings.get(task) {
            if prev.selected != entry.selected {
                return Err(DmeaError::InvalidState(format!("task {task} is already registered differently")));
            }
        } else {
            self.tasks.push(task.clone());
        }
        self.routings.insert(task.clone(), entry);
        Ok(())
    }

    /// `{task: {layer: module}}` over the selected modules.
    pub fn routing_table(&self) -> BTreeMap<String, BTreeMap<String, String>> {
        self.routings
            .iter()
            .map(|(t, r)| {
                let layers = r
                    .selected
                    .iter()
                    .enumerate()
                    .map(|(l, id)| (l.to_string(), id.to_string()))
                    .collect();
                (t.0.clone(), layers)
            })
            .collect()
    }

    /// Checks that every routed module exists and is permanent.
    pub fn check_consistency(&self, state: &ModelState) -> Result<()> {
        for (t, r) in &self.routings {
            state
                .validate_routing(&r.routing)
                .map_err(|e| DmeaError::InvalidState(format!("task {t}: {e}")))?;
            for id in r.routing.modules() {
                if self.temporary.contains(&id) {
                    return Err(DmeaError::InvalidState(format!("task {t} routes temporary module {id}")));
                }
            }
        }
        for (l, ids) in self.layers.iter().enumerate() {
            for id in ids {
                match state.adapters.get(id) {
                    Some(a) if a.layer == l => {}
                    _ => return Err(DmeaError::InvalidState(format!("module {id} missing from layer {l}"))),
                }
            }
        }
        Ok(())
    }
}

/// Coefficients for `k` previous modules (owner similarities each) plus one
/// new module. `k = 0` yields `[1.0]`.
pub fn similarity_coefficients(owner_similarities: &[Vec<f64>]) -> Result<Vec<f64>> {
    if owner_similarities.is_empty() {
        return Ok(vec![1.0]);
    }
    let mut lambda = Vec::with_capacity(owner_similarities.len() + 1);
    for (t, sims) in owner_similarities.iter().enumerate() {
        let best = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !best.is_finite() {
            return Err(DmeaError::InvalidState(format!("previous module {t} has no owners")));
        }
        lambda.push(best);
    }
    let min = lambda.iter().copied().fold(f64::INFINITY, f64::min);
    lambda.push(min);
    Ok(lambda)
}

/// Index of the largest coefficient; ties go to the lowest index.
pub fn select_largest(coefficients: &[f64]) -> Result<usize> {
    if coefficients.is_empty() {
        return Err(DmeaError::InvalidInput("no coefficients to select from".into()));
    }
    let mut best = 0;
    for (i, &c) in coefficients.iter().enumerate() {
        if c > coefficients[best] {
            best = i;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backbone, BackboneConfig};

    fn state() -> ModelState {
        let cfg = BackboneConfig {
            num_layers: 2,
            hidden_width: 8,
            num_heads: 2,
            ffn_width: 8,
            vocab_size: 16,
            max_sequence_length: 8,
            adapter_bottleneck: 2,
        };
        ModelState::new(Backbone::new_random(cfg, 0).unwrap())
    }

    fn finish(pool: &mut ModulePool, st: &mut ModelState, task: &str, seed: u64) -> Vec<ModuleId> {
        let ids: Vec<ModuleId> = (0..2).map(|l| pool.insert_temp_module(st, l, seed + l as u64).unwrap()).collect();
        for (l, id) in ids.iter().enumerate() {
            pool.discard_unselected(st, l, *id).unwrap();
        }
        pool.register_routing(
            &TaskId(task.into()),
            TaskRouting {
                selected: ids.clone(),
                routing: Routing::single(&ids),
            },
        )
        .unwrap();
        ids
    }

    #[test]
    fn coefficient_initialisation_follows_owner_similarity() {
        assert_eq!(similarity_coefficients(&[]).unwrap(), vec![1.0]);
        assert_eq!(similarity_coefficients(&[vec![1.0]]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(
            similarity_coefficients(&[vec![0.8, 0.1], vec![0.5]]).unwrap(),
            vec![0.8, 0.5, 0.5]
        );
        assert!(similarity_coefficients(&[vec![]]).is_err());
    }

    #[test]
    fn argmax_prefers_oldest_on_ties() {
        assert_eq!(select_largest(&[0.2, 0.9]).unwrap(), 1);
        assert_eq!(select_largest(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(select_largest(&[3.2, 3.9]).unwrap(), select_largest(&[0.2, 0.9]).unwrap());
    }

    #[test]
    fn insertion_discard_and_ownership() {
        let mut st = state();
        let mut pool = ModulePool::new(2);
        let a = finish(&mut pool, &mut st, "a", 1);
        assert_eq!(pool.len(), 2);
        let t = pool.insert_temp_module(&mut st, 0, 9).unwrap();
        assert_eq!(pool.layer(0), &[a[0], t]);
        assert!(pool.discard_unselected(&mut st, 0, a[0]).is_ok());
        assert_eq!(pool.layer(0), &[a[0]]);
        assert!(!st.adapters.contains_key(&t));
        assert!(pool.discard(&mut st, a[0]).is_err());

        pool.register_routing(
            &TaskId("b".into()),
            TaskRouting {
                selected: a.clone(),
                routing: Routing::single(&a),
            },
        )
        .unwrap();
        let owners: Vec<String> = pool.owners(a[1]).into_iter().map(|t| t.0).collect();
        assert_eq!(owners, vec!["a", "b"]);
        assert_eq!(pool.tasks().len(), 2);
        pool.check_consistency(&st).unwrap();
        let table = pool.routing_table();
        assert_eq!(table["a"]["1"], a[1].to_string());
    }

    #[test]
    fn expansion_init_uses_owner_frequencies() {
        let mut st = state();
        let mut pool = ModulePool::new(2);
        finish(&mut pool, &mut st, "a", 1);
        pool.insert_temp_module(&mut st, 0, 5).unwrap();
        let mut freqs = BTreeMap::new();
        freqs.insert(TaskId("a".into()), vec![1.0, 0.0]);
        let lambda = pool.init_expansion_coefficients(0, &freqs, &[1.0, 1.0]).unwrap();
        let c = 0.5f64.sqrt();
        assert!((lambda[0] - c).abs() < 1e-12 && lambda[0] == lambda[1]);
        freqs.clear();
        assert!(pool.init_expansion_coefficients(0, &freqs, &[1.0, 1.0]).is_err());
    }
}
