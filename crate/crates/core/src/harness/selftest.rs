//! Fast invariant checks runnable from the CLI.

use ndarray::{s, Array2};
use rand::Rng as _;
use serde::Serialize;

use crate::adaptation::gradient_scale;
use crate::error::Result;
use crate::model::gradcheck::check_gradients;
use crate::model::{checkpoint, Adapter, Backbone, BackboneConfig, LossSelector, ModelState, ModuleId, Routing, Trainable, TrainingExample};
use crate::numerics::{random_normal, rank_for_energy, seeded_rng, softmax_weights, svd, TOLERANCES};
use crate::selection::{projection_score, ProjectionNorm};

#[derive(Debug, Clone, Serialize)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn tiny_state(seed: u64) -> Result<ModelState> {
    let cfg = BackboneConfig {
        num_layers: 2,
        hidden_width: 8,
        num_heads: 2,
        ffn_width: 12,
        vocab_size: 24,
        max_sequence_length: 16,
        adapter_bottleneck: 3,
    };
    let mut state = ModelState::new(Backbone::new_random(cfg, seed)?);
    let mut rng = seeded_rng(seed ^ 0x5eed);
    for (id, layer) in [(0, 0), (1, 0), (2, 1), (3, 1)] {
        let mut a = Adapter::new_random(ModuleId(id), layer, 8, 3, seed * 10 + id as u64);
        for p in a.params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        state.adapters.insert(ModuleId(id), a);
    }
    Ok(state)
}

fn tiny_routing(seed: u64) -> Result<Routing> {
    let mut rng = seeded_rng(seed + 77);
    let mut c = || rng.random_range(-1.0..1.0);
    Routing::fused(
        vec![vec![ModuleId(0), ModuleId(1)], vec![ModuleId(2), ModuleId(3)]],
        vec![vec![c(), c()], vec![c(), c()]],
    )
}

fn tiny_batch(seed: u64) -> Result<Vec<TrainingExample>> {
    let mut rng = seeded_rng(seed);
    (0..3)
        .map(|_| {
            let mut words = |n: usize| (0..n).map(|_| rng.random_range(11..24)).collect::<Vec<u32>>();
            let (x, q, y) = (words(3), words(1), words(2));
            TrainingExample::from_parts(&x, &q, &y, 3, 16)
        })
        .collect()
}

fn gradients() -> Result<SelfCheck> {
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        let state = tiny_state(seed)?;
        let batch = tiny_batch(seed)?;
        let refs: Vec<&TrainingExample> = batch.iter().collect();
        let trainable = Trainable {
            backbone: false,
            modules: (0..4).map(ModuleId).collect(),
            coefficients: true,
        };
        let checks = check_gradients(
            &state,
            &refs,
            &tiny_routing(seed)?,
            LossSelector::Train { mu: 0.25 },
            &trainable,
            TOLERANCES.finite_difference_step,
            0,
        )?;
        worst = checks.iter().map(|c| c.relative_error).fold(worst, f64::max);
    }
    Ok(SelfCheck {
        name: "gradients match central differences",
        passed: worst < TOLERANCES.gradient_relative,
        detail: format!("max relative error {worst:.2e}"),
    })
}

fn fusion() -> Result<SelfCheck> {
    let state = tiny_state(11)?;
    let routing = tiny_routing(11)?;
    let trace = state.forward(&[3, 12, 13, 1, 14, 1, 15], &routing)?;
    let mut worst: f64 = 0.0;
    for (l, layer) in trace.layers.iter().enumerate() {
        let w = softmax_weights(&routing.layers[l].coefficients)?;
        let mut mix = Array2::<f64>::zeros(layer.fused_output.raw_dim());
        for (h, wt) in layer.member_outputs.iter().zip(&w) {
            mix.scaled_add(*wt, h);
        }
        worst = (&mix - &layer.fused_output).iter().fold(worst, |m, v| m.max(v.abs()));
    }
    Ok(SelfCheck {
        name: "fused output is the softmax-weighted member mix",
        passed: worst < TOLERANCES.fusion,
        detail: format!("max deviation {worst:.2e}"),
    })
}

fn scaling() -> SelfCheck {
    let eta = gradient_scale(2.0, 1.0, 1);
    let want = 1.0 + (-1.0f64).exp();
    SelfCheck {
        name: "gradient scale at ratio 2, one epoch",
        passed: (eta - want).abs() < 1e-9,
        detail: format!("{eta:.12}"),
    }
}

fn random_basis(rng: &mut crate::numerics::Rng, m: usize, k: usize) -> Result<Array2<f64>> {
    let g = random_normal(m, k, 1.0, rng);
    Ok(svd(g.view())?.left_singular_vectors.slice(s![.., ..k]).to_owned())
}

fn subspace() -> Result<SelfCheck> {
    let mut rng = seeded_rng(5);
    let mut in_range = true;
    for _ in 0..50 {
        let (ka, kb) = (rng.random_range(1..6), rng.random_range(1..6));
        let a = random_basis(&mut rng, 12, ka)?;
        let b = random_basis(&mut rng, 12, kb)?;
        for norm in [ProjectionNorm::Frobenius, ProjectionNorm::Spectral] {
            let q = projection_score(a.view(), b.view(), norm)?;
            in_range &= (-1e-12..=1.0 + 1e-12).contains(&q);
        }
    }
    let eye = Array2::<f64>::eye(6);
    let e01 = eye.slice(s![.., 0..2]).to_owned();
    let e23 = eye.slice(s![.., 2..4]).to_owned();
    let e12 = eye.slice(s![.., 1..3]).to_owned();
    let same = projection_score(e01.view(), e01.view(), ProjectionNorm::Frobenius)?;
    let orth = projection_score(e23.view(), e01.view(), ProjectionNorm::Frobenius)?;
    let half = projection_score(e12.view(), e01.view(), ProjectionNorm::Frobenius)?;
    let passed =
        in_range && (same - 1.0).abs() < 1e-9 && orth.abs() < 1e-9 && (half - 0.5f64.sqrt()).abs() < 1e-9;
    Ok(SelfCheck {
        name: "subspace similarity range and fixed points",
        passed,
        detail: format!("identical {same:.3}, orthogonal {orth:.3}, half {half:.6}"),
    })
}

fn energy_rank() -> Result<SelfCheck> {
    let mut rng = seeded_rng(9);
    let mut passed = true;
    for _ in 0..100 {
        let n = rng.random_range(1..12);
        let mut sv: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        if sv[0] == 0.0 {
            continue;
        }
        let eps = rng.random_range(0.05..1.0);
        let total: f64 = sv.iter().map(|v| v * v).sum();
        let mut acc = 0.0;
        let mut want = n;
        for (i, v) in sv.iter().enumerate() {
            acc += v * v;
            if acc >= eps * total {
                want = i + 1;
                break;
            }
        }
        passed &= rank_for_energy(&sv, eps)? == want;
    }
    Ok(SelfCheck {
        name: "energy-threshold rank matches cumulative sums",
        passed,
        detail: "100 random spectra".into(),
    })
}

fn checkpoint_round_trip() -> Result<SelfCheck> {
    let state = tiny_state(3)?;
    let mut buf = Vec::new();
    checkpoint::write_checkpoint(&state, &mut buf)?;
    let back = checkpoint::read_checkpoint(&mut buf.as_slice())?;
    Ok(SelfCheck {
        name: "checkpoint round trip is bit exact",
        passed: back == state,
        detail: format!("{} bytes", buf.len()),
    })
}

/// Runs every check; errors inside a check count as failures.
pub fn run_selftest() -> Vec<SelfCheck> {
    let wrap = |name: &'static str, r: Result<SelfCheck>| {
        r.unwrap_or_else(|e| SelfCheck {
            name,
            passed: false,
            detail: e.to_string(),
        })
    };
    vec![
        wrap("gradients match central differences", gradients()),
        wrap("fused output is the softmax-weighted member mix", fusion()),
        scaling(),
        wrap("subspace similarity range and fixed points", subspace()),
        wrap("energy-threshold rank matches cumulative sums", energy_rank()),
        wrap("checkpoint round trip is bit exact", checkpoint_round_trip()),
    ]
}
