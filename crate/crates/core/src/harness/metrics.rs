//! Scores, result matrices and transfer metrics.

use serde::{Deserialize, Serialize};

use crate::error::{DmeaError, Result};
use crate::model::generate::{generate, Generation};
use crate::model::{DecodeConfig, ModelState, Routing};
use crate::taskgen::{context_tokens, Sample, TaskSpec, TokenId, EOS};

/// Exact-match and token-level accuracy, both as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub exact_match: f64,
    pub token_accuracy: f64,
}

/// Scores generations against references. A generation counts as an exact
/// match when it reproduces the reference and then stops.
pub fn score_generations(outputs: &[Generation], references: &[Sample]) -> Result<Score> {
    if outputs.len() != references.len() {
        return Err(DmeaError::InvalidInput("output and reference counts differ".into()));
    }
    if references.is_empty() {
        return Err(DmeaError::InvalidInput("no references to score".into()));
    }
    let mut exact = 0usize;
    let mut tok_correct = 0usize;
    let mut tok_total = 0usize;
    for (out, reference) in outputs.iter().zip(references) {
        if out.finished && out.tokens == reference.y {
            exact += 1;
        }
        let mut produced: Vec<TokenId> = out.tokens.clone();
        if out.finished {
            produced.push(EOS);
        }
        let target: Vec<TokenId> = reference.y.iter().copied().chain(std::iter::once(EOS)).collect();
        tok_total += target.len();
        tok_correct += target.iter().zip(&produced).filter(|(a, b)| a == b).count();
    }
    Ok(Score {
        exact_match: 100.0 * exact as f64 / references.len() as f64,
        token_accuracy: 100.0 * tok_correct as f64 / tok_total as f64,
    })
}

/// Greedy decoding on the test split under `routing`.
pub fn evaluate_task(state: &ModelState, routing: &Routing, task: &TaskSpec, max_new_tokens: usize) -> Result<Score> {
    let prompts: Vec<Vec<TokenId>> = task.test.iter().map(|s| context_tokens(&s.x, task)).collect();
    let outs = generate(state, &prompts, routing, &DecodeConfig::greedy(max_new_tokens))?;
    score_generations(&outs, &task.test)
}

/// `(1/(t−1)) Σ_{i=2..t} (R[i][i] − d̄_i)` with 1-based `t`.
pub fn fkt(diagonal: &[f64], standalone: &[f64], t: usize) -> Result<f64> {
    if t < 2 {
        return Err(DmeaError::InvalidInput(format!("transfer needs t ≥ 2, got {t}")));
    }
    if diagonal.len() < t || standalone.len() < t {
        return Err(DmeaError::InvalidInput(format!("need {t} diagonal and standalone scores")));
    }
    let sum: f64 = (1..t).map(|i| diagonal[i] - standalone[i]).sum();
    Ok(sum / (t - 1) as f64)
}

pub fn average_score(final_row: &[f64]) -> Result<f64> {
    if final_row.is_empty() {
        return Err(DmeaError::InvalidInput("no scores to average".into()));
    }
    Ok(final_row.iter().sum::<f64>() / final_row.len() as f64)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Lower-triangular score matrix: `rows[i][j]` is task `j` after learning task `i`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    pub order: Vec<String>,
    pub rows: Vec<Vec<Score>>,
}

impl ResultsMatrix {
    pub fn exact(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j].exact_match
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.len()).map(|i| self.exact(i, i)).collect()
    }

    pub fn final_row(&self) -> Vec<f64> {
        self.rows.last().map(|r| r.iter().map(|s| s.exact_match).collect()).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(DmeaError::InvalidState(format!("row {i} has {} entries", row.len())));
            }
            for s in row {
                if !(0.0..=100.0).contains(&s.exact_match) || !(0.0..=100.0).contains(&s.token_accuracy) {
                    return Err(DmeaError::InvalidState("score outside [0, 100]".into()));
                }
            }
        }
        Ok(())
    }

    /// `step,after_task,task,exact_match,token_accuracy` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,after_task,task,exact_match,token_accuracy\n");
        for (i, row) in self.rows.iter().enumerate() {
            for (j, s) in row.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{:.4},{:.4}\n",
                    i + 1,
                    self.order[i],
                    self.order[j],
                    s.exact_match,
                    s.token_accuracy
                ));
            }
        }
        out
    }
}
