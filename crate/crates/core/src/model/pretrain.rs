//! Generic copy / next-token pretraining of the backbone.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::engine::{evaluate, ObjectiveGroup, Trainable, WeightedSequence};
use super::generate::{generate, DecodeConfig};
use super::params::Backbone;
use super::{BackboneConfig, ModelState, Routing};
use crate::error::{DmeaError, Result};
use crate::numerics::{derive_seed, seeded_rng};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::taskgen::{TokenId, Vocab, EOS, SEP};

/// One pretraining sequence; tokens before `predict_from` are context only.
/// `answer_start` marks where a prompt ends for accuracy checks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSequence {
    pub tokens: Vec<TokenId>,
    pub predict_from: usize,
    pub answer_start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub corpus_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 3000,
            batch_size: 16,
            learning_rate: 1e-3,
            corpus_size: 4000,
            seed: 7,
        }
    }
}

fn copy_sequence(words: &[TokenId], repeat: TokenId) -> CorpusSequence {
    let mut tokens = words.to_vec();
    tokens.extend([SEP, repeat, SEP]);
    let answer_start = tokens.len();
    tokens.extend_from_slice(words);
    tokens.push(EOS);
    CorpusSequence {
        tokens,
        predict_from: 1,
        answer_start,
    }
}

/// Copy sequences `w.. SEP repeat SEP w.. EOS` over ordinary vocabulary
/// words, in the same layout as task samples and modelled end to end.
pub fn copy_corpus(size: usize, seed: u64) -> Vec<CorpusSequence> {
    let vocab = Vocab::shared();
    let content: Vec<TokenId> = vocab.content_ids().collect();
    let repeat = vocab.id("repeat").expect("instruction word");
    let mut rng = seeded_rng(seed);
    (0..size)
        .map(|_| {
            let len = rng.random_range(2..=8);
            let words: Vec<TokenId> = (0..len).map(|_| *content.choose(&mut rng).unwrap()).collect();
            copy_sequence(&words, repeat)
        })
        .collect()
}

/// Walks of a sparse random bigram chain over ordinary vocabulary words.
pub fn markov_corpus(size: usize, seed: u64) -> Vec<CorpusSequence> {
    let vocab = Vocab::shared();
    let content: Vec<TokenId> = vocab.content_ids().collect();
    let mut table_rng = seeded_rng(derive_seed(seed, &[1]));
    let successors: Vec<[TokenId; 3]> = content
        .iter()
        .map(|_| {
            [
                *content.choose(&mut table_rng).unwrap(),
                *content.choose(&mut table_rng).unwrap(),
                *content.choose(&mut table_rng).unwrap(),
            ]
        })
        .collect();
    let base = content[0];
    let mut rng = seeded_rng(derive_seed(seed, &[2]));
    (0..size)
        .map(|_| {
            let len = rng.random_range(8..=16);
            let mut tok = *content.choose(&mut rng).unwrap();
            let mut tokens = vec![tok];
            for _ in 1..len {
                tok = successors[(tok - base) as usize][rng.random_range(0..3)];
                tokens.push(tok);
            }
            CorpusSequence {
                tokens,
                predict_from: 1,
                answer_start: 1,
            }
        })
        .collect()
}

/// Bumped whenever the generated corpus changes, so cached backbones are not reused.
pub const CORPUS_VERSION: u32 = 2;

/// Three parts copy sequences to one part bigram-chain walks.
pub fn default_corpus(size: usize, seed: u64) -> Vec<CorpusSequence> {
    let copies = size * 3 / 4;
    let mut c = copy_corpus(copies, derive_seed(seed, &[10]));
    c.extend(markov_corpus(size - copies, derive_seed(seed, &[11])));
    c
}

/// Trains every backbone parameter on the corpus with Adam, then returns the
/// (now frozen) state with an empty adapter store.
pub fn pretrain_backbone(
    config: BackboneConfig,
    corpus: &[CorpusSequence],
    pre: &PretrainConfig,
) -> Result<ModelState> {
    if corpus.is_empty() {
        return Err(DmeaError::InvalidInput("pretraining corpus is empty".into()));
    }
    for s in corpus {
        if s.predict_from == 0 || s.predict_from >= s.tokens.len() || s.tokens.len() > config.max_sequence_length {
            return Err(DmeaError::InvalidInput("corpus sequence has no prediction region or is too long".into()));
        }
        if s.tokens.iter().any(|&t| t as usize >= config.vocab_size) {
            return Err(DmeaError::InvalidInput("corpus token outside vocabulary".into()));
        }
    }
    let mut state = ModelState::new(Backbone::new_random(config, derive_seed(pre.seed, &[0]))?);
    if pre.steps == 0 {
        return Ok(state);
    }
    let routing = Routing::bare(config.num_layers);
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: OptimizerKind::Adam,
        learning_rate: pre.learning_rate,
        clip_norm: Some(1.0),
    })?;
    let trainable = Trainable {
        backbone: true,
        ..Trainable::default()
    };
    let mut rng = seeded_rng(derive_seed(pre.seed, &[1]));
    let batch = pre.batch_size.max(1);
    let weight = 1.0 / batch as f64;
    for step in 0..pre.steps {
        let sequences: Vec<WeightedSequence> = (0..batch)
            .map(|_| {
                let s = &corpus[rng.random_range(0..corpus.len())];
                WeightedSequence {
                    tokens: &s.tokens,
                    predict_from: s.predict_from,
                    weight,
                }
            })
            .collect();
        let group = ObjectiveGroup {
            routing: &routing,
            sequences,
            coefficient_grads: false,
        };
        let (loss, grads) = evaluate(&state, &[group], &trainable, true).map_err(|e| {
            DmeaError::TrainingFailure(format!("pretraining diverged at step {step}: {e}"))
        })?;
        if !loss.is_finite() {
            return Err(DmeaError::TrainingFailure(format!("pretraining loss non-finite at step {step}")));
        }
        let g = grads.backbone.expect("backbone gradients requested");
        opt.begin_step(grads_norm(&g));
        opt.update("backbone", &mut state.backbone.params, &g);
        if step % 500 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.4}");
        }
    }
    Ok(state)
}

fn grads_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Greedy token accuracy on copy sequences (answer tokens and EOS).
pub fn copy_accuracy(state: &ModelState, held_out: &[CorpusSequence]) -> Result<f64> {
    let routing = Routing::bare(state.config().num_layers);
    let prompts: Vec<Vec<TokenId>> = held_out.iter().map(|s| s.tokens[..s.answer_start].to_vec()).collect();
    let max_new = held_out.iter().map(|s| s.tokens.len() - s.answer_start).max().unwrap_or(0);
    let outs = generate(state, &prompts, &routing, &DecodeConfig::greedy(max_new))?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (s, g) in held_out.iter().zip(&outs) {
        let mut produced = g.tokens.clone();
        if g.finished {
            produced.push(EOS);
        }
        let target = &s.tokens[s.answer_start..];
        total += target.len();
        correct += target.iter().zip(&produced).filter(|(a, b)| a == b).count();
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_well_formed_and_deterministic() {
        let a = default_corpus(40, 3);
        assert_eq!(a, default_corpus(40, 3));
        assert_eq!(a.len(), 40);
        for s in &a {
            assert!(s.predict_from >= 1 && s.predict_from < s.tokens.len());
            assert!(s.answer_start >= s.predict_from && s.answer_start < s.tokens.len());
        }
    }

    #[test]
    fn zero_steps_returns_random_backbone() {
        let cfg = BackboneConfig::default();
        let s = pretrain_backbone(cfg, &default_corpus(4, 1), &PretrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert!(s.adapters.is_empty());
        assert!(pretrain_backbone(cfg, &[], &PretrainConfig::default()).is_err());
    }
}
