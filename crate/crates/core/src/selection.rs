//! Selection stage: input-subspace bases and similarity ranking of learned tasks.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{DmeaError, Result};
use crate::model::{ModelState, Routing};
use crate::numerics::{
    cosine_similarity, frobenius_norm, is_orthonormal, rank_for_energy, seeded_rng, spectral_norm, svd, Matrix,
    TOLERANCES,
};
use crate::taskgen::{context_tokens, TaskId, TaskSpec, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionNorm {
    #[default]
    Frobenius,
    Spectral,
}

/// How previous tasks are scored against the new one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityScorer {
    /// Projection of the new input subspace onto each stored subspace.
    #[default]
    Subspace,
    /// Cosine of word-frequency vectors.
    Frequency,
    /// Cosine of mean last-token representations.
    Representation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub n: usize,
    pub epsilon: f64,
    pub k: usize,
    pub norm: ProjectionNorm,
    pub scorer: SimilarityScorer,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            n: 100,
            epsilon: 0.95,
            k: 1,
            norm: ProjectionNorm::Frobenius,
            scorer: SimilarityScorer::Subspace,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(DmeaError::Config("selection n and k must be ≥ 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(DmeaError::Config(format!("epsilon must lie in (0, 1], got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Orthonormal basis of a task's input subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceBasis {
    pub task: TaskId,
    /// `width × k`, orthonormal columns.
    pub basis: Matrix,
    pub epsilon: f64,
    pub k: usize,
    pub n_samples: usize,
    pub mean_representation: Vec<f64>,
}

impl SubspaceBasis {
    /// Basis from a `width × n` representation matrix.
    pub fn from_representations(task: TaskId, r: ArrayView2<f64>, epsilon: f64) -> Result<SubspaceBasis> {
        if r.ncols() == 0 || r.iter().all(|v| *v == 0.0) {
            return Err(DmeaError::InvalidState(format!("task {task}: representations are all zero")));
        }
        let dec = svd(r)?;
        let k = rank_for_energy(&dec.singular_values, epsilon)?;
        let basis = dec.left_singular_vectors.slice(s![.., ..k]).to_owned();
        let mean_representation = r.mean_axis(ndarray::Axis(1)).unwrap().to_vec();
        Ok(SubspaceBasis {
            task,
            basis,
            epsilon,
            k,
            n_samples: r.ncols(),
            mean_representation,
        })
    }

    pub fn width(&self) -> usize {
        self.basis.nrows()
    }
}

/// Indices of `n` training samples: a shuffled subset, or draws with
/// replacement when the train set is smaller than `n`.
fn sample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seeded_rng(seed);
    if len >= n {
        rand::seq::index::sample(&mut rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

/// Representation matrix (`width × n`) of `n` seeded training contexts
/// `[X, sep, Q, sep]` forwarded under `routing`.
pub fn representation_matrix(
    state: &ModelState,
    routing: &Routing,
    task: &TaskSpec,
    n: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if task.train.is_empty() {
        return Err(DmeaError::InvalidInput(format!("task {} has no training data", task.id)));
    }
    let contexts: Vec<Vec<TokenId>> = sample_indices(task.train.len(), n, seed)
        .into_iter()
        .map(|i| context_tokens(&task.train[i].x, task))
        .collect();
    Ok(state.last_token_representations(&contexts, routing)?.reversed_axes())
}

pub fn compute_subspace(
    state: &ModelState,
    routing: &Routing,
    task: &TaskSpec,
    config: &SelectionConfig,
    seed: u64,
) -> Result<SubspaceBasis> {
    config.validate()?;
    let r = representation_matrix(state, routing, task, config.n, seed)?;
    let basis = SubspaceBasis::from_representations(task.id.clone(), r.view(), config.epsilon)?;
    debug_assert!(is_orthonormal(basis.basis.view(), TOLERANCES.orthonormality));
    Ok(basis)
}

/// Fraction of the new basis captured by the old subspace:
/// `‖B_old B_oldᵀ B_new‖ / ‖B_new‖`.
pub fn subspace_similarity(new: &SubspaceBasis, old: &SubspaceBasis, norm: ProjectionNorm) -> Result<f64> {
    projection_score(new.basis.view(), old.basis.view(), norm)
}

pub fn projection_score(new: ArrayView2<f64>, old: ArrayView2<f64>, norm: ProjectionNorm) -> Result<f64> {
    if new.nrows() != old.nrows() {
        return Err(DmeaError::InvalidInput(format!(
            "basis widths differ: {} vs {}",
            new.nrows(),
            old.nrows()
        )));
    }
    let projected = old.dot(&old.t().dot(&new));
    let (num, den) = match norm {
        ProjectionNorm::Frobenius => (frobenius_norm(projected.view()), frobenius_norm(new)),
        ProjectionNorm::Spectral => (spectral_norm(projected.view())?, spectral_norm(new)?),
    };
    if den == 0.0 {
        return Err(DmeaError::InvalidInput("new basis is empty".into()));
    }
    Ok(num / den)
}

/// The `k` best-scoring tasks, best first. `scores` must be in learning
/// order; ties keep the earlier task.
pub fn top_k_similar(scores: &[(TaskId, f64)], k: usize) -> Vec<TaskId> {
    let mut ranked: Vec<&(TaskId, f64)> = scores.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked.into_iter().take(k).map(|(t, _)| t.clone()).collect()
}

/// Scores every stored task against the new one with the configured scorer.
pub fn score_previous(
    new: &SubspaceBasis,
    store: &BasisStore,
    frequencies: &BTreeMap<TaskId, Vec<f64>>,
    config: &SelectionConfig,
) -> Result<Vec<(TaskId, f64)>> {
    store
        .bases
        .iter()
        .filter(|b| b.task != new.task)
        .map(|old| {
            let score = match config.scorer {
                SimilarityScorer::Subspace => subspace_similarity(new, old, config.norm)?,
                SimilarityScorer::Representation => {
                    cosine_similarity(&new.mean_representation, &old.mean_representation)?
                }
                SimilarityScorer::Frequency => {
                    let get = |t: &TaskId| {
                        frequencies
                            .get(t)
                            .ok_or_else(|| DmeaError::InvalidState(format!("no frequency vector for task {t}")))
                    };
                    cosine_similarity(get(&new.task)?, get(&old.task)?)?
                }
            };
            Ok((old.task.clone(), score))
        })
        .collect()
}

/// Bases in learning order. Each basis is written once and never replaced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BasisStore {
    pub bases: Vec<SubspaceBasis>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    k: usize,
    epsilon: f64,
    n: usize,
    width: usize,
    file: String,
}

impl BasisStore {
    pub fn insert(&mut self, basis: SubspaceBasis) -> Result<()> {
        if self.get(&basis.task).is_some() {
            return Err(DmeaError::InvalidState(format!("basis of task {} already stored", basis.task)));
        }
        self.bases.push(basis);
        Ok(())
    }

    pub fn get(&self, task: &TaskId) -> Option<&SubspaceBasis> {
        self.bases.iter().find(|b| &b.task == task)
    }

    /// Writes `index.json` plus one little-endian `.bin` block per task
    /// (basis row-major, then the mean representation).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = serde_json::Map::new();
        for (i, b) in self.bases.iter().enumerate() {
            let file = format!("basis_{i}.bin");
            let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(&file))?);
            for v in b.basis.iter().chain(&b.mean_representation) {
                w.write_all(&v.to_le_bytes())?;
            }
            w.flush()?;
            let entry = IndexEntry {
                k: b.k,
                epsilon: b.epsilon,
                n: b.n_samples,
                width: b.width(),
                file,
            };
            index.insert(b.task.0.clone(), serde_json::to_value(entry)?);
        }
        let order: Vec<String> = self.bases.iter().map(|b| b.task.0.clone()).collect();
        let doc = serde_json::json!({ "order": order, "tasks": index });
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<BasisStore> {
        let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        let order: Vec<String> = serde_json::from_value(doc["order"].clone())?;
        let mut store = BasisStore::default();
        for task in order {
            let entry: IndexEntry = serde_json::from_value(doc["tasks"][&task].clone())?;
            let mut bytes = Vec::new();
            std::fs::File::open(dir.join(&entry.file))?.read_to_end(&mut bytes)?;
            let expected = (entry.width * entry.k + entry.width) * 8;
            if bytes.len() != expected {
                return Err(DmeaError::Checkpoint(format!("basis file {} has the wrong size", entry.file)));
            }
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let split = entry.width * entry.k;
            let basis = Array2::from_shape_vec((entry.width, entry.k), values[..split].to_vec())
                .map_err(|e| DmeaError::Checkpoint(e.to_string()))?;
            store.insert(SubspaceBasis {
                task: TaskId(task),
                basis,
                epsilon: entry.epsilon,
                k: entry.k,
                n_samples: entry.n,
                mean_representation: values[split..].to_vec(),
            })?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub new_task: TaskId,
    pub previous_task: TaskId,
    pub score: f64,
    pub selected: bool,
}

pub fn similarity_csv(records: &[SimilarityRecord]) -> String {
    let mut out = String::from("new_task,previous_task,score,selected\n");
    for r in records {
        out.push_str(&format!("{},{},{:.9},{}\n", r.new_task, r.previous_task, r.score, r.selected));
    }
    out
}
