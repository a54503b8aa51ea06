//! Batched autoregressive decoding.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::engine::{forward_packed, HeadRows};
use super::{ModelState, Routing};
use crate::error::{DmeaError, Result};
use crate::numerics::{seeded_rng, softmax_unchecked};
use crate::taskgen::{TokenId, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub max_new_tokens: usize,
    pub seed: u64,
    /// `(token, n)`: stop, as finished, once `token` has been generated `n`
    /// times. The stop token is kept in the output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_at: Option<(TokenId, usize)>,
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> DecodeConfig {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            max_new_tokens,
            seed: 0,
            stop_at: None,
        }
    }

    pub fn top_k(k: usize, temperature: f64, max_new_tokens: usize, seed: u64) -> DecodeConfig {
        DecodeConfig {
            strategy: DecodeStrategy::TopK { k, temperature },
            max_new_tokens,
            seed,
            stop_at: None,
        }
    }
}

/// Continuation of one prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    /// Generated tokens, without the terminating EOS.
    pub tokens: Vec<TokenId>,
    /// Whether decoding stopped at EOS.
    pub finished: bool,
}

fn pick(logits: &[f64], strategy: DecodeStrategy, rng: &mut crate::numerics::Rng) -> TokenId {
    match strategy {
        DecodeStrategy::Greedy => {
            let mut best = 0;
            for (i, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = i;
                }
            }
            best as TokenId
        }
        DecodeStrategy::TopK { k, temperature } => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            order.truncate(k.max(1));
            let scaled: Vec<f64> = order.iter().map(|&i| logits[i] / temperature).collect();
            let probs = softmax_unchecked(&scaled);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return order[i] as TokenId;
                }
            }
            *order.last().unwrap() as TokenId
        }
    }
}

/// Decodes every prompt under one routing until EOS, the token budget, or the
/// model's maximum length.
pub fn generate(
    state: &ModelState,
    prompts: &[Vec<TokenId>],
    routing: &Routing,
    config: &DecodeConfig,
) -> Result<Vec<Generation>> {
    state.validate_routing(routing)?;
    if let DecodeStrategy::TopK { k, temperature } = config.strategy {
        if k == 0 || !(temperature > 0.0) {
            return Err(DmeaError::InvalidInput("top-k sampling needs k ≥ 1 and temperature > 0".into()));
        }
    }
    let max_len = state.config().max_sequence_length;
    for p in prompts {
        if p.is_empty() || p.len() > max_len {
            return Err(DmeaError::InvalidInput(format!("prompt length {} outside 1..={max_len}", p.len())));
        }
    }
    let mut rng = seeded_rng(config.seed);
    let mut seqs: Vec<Vec<TokenId>> = prompts.to_vec();
    let mut out: Vec<Generation> = prompts
        .iter()
        .map(|_| Generation {
            tokens: Vec::new(),
            finished: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..prompts.len()).filter(|&i| prompts[i].len() < max_len).collect();
    for _ in 0..config.max_new_tokens {
        if active.is_empty() {
            break;
        }
        let views: Vec<&[TokenId]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let mut last = Vec::with_capacity(views.len());
        let mut off = 0;
        for v in &views {
            off += v.len();
            last.push(off - 1);
        }
        let pass = forward_packed(state, &views, routing, HeadRows::Rows(last));
        let mut still = Vec::with_capacity(active.len());
        for (r, &i) in active.iter().enumerate() {
            let row = pass.logits.row(r);
            let tok = pick(row.as_slice().unwrap(), config.strategy, &mut rng);
            if tok == EOS {
                out[i].finished = true;
                continue;
            }
            out[i].tokens.push(tok);
            seqs[i].push(tok);
            if let Some((stop, n)) = config.stop_at {
                if tok == stop && out[i].tokens.iter().filter(|&&t| t == stop).count() >= n {
                    out[i].finished = true;
                    continue;
                }
            }
            if seqs[i].len() < max_len {
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}
