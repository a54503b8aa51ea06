use dmea::model::gradcheck::check_gradients;
use dmea::model::{
    last_token_representation, Adapter, Backbone, BackboneConfig, LossSelector, ModelState, ModuleId, Routing,
    Trainable, TrainingExample,
};
use dmea::numerics::{seeded_rng, TOLERANCES};
use rand::Rng;

fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        num_layers: 2,
        hidden_width: 8,
        num_heads: 2,
        ffn_width: 12,
        vocab_size: 24,
        max_sequence_length: 16,
        adapter_bottleneck: 3,
    }
}

fn noisy_adapter(id: u32, layer: usize, seed: u64) -> Adapter {
    let c = tiny_config();
    let mut a = Adapter::new_random(ModuleId(id), layer, c.hidden_width, c.adapter_bottleneck, seed);
    let mut rng = seeded_rng(seed + 1000);
    for p in a.params.iter_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    a
}

fn tiny_state(seed: u64) -> ModelState {
    let mut s = ModelState::new(Backbone::new_random(tiny_config(), seed).unwrap());
    for (id, layer) in [(0, 0), (1, 0), (2, 1), (3, 1)] {
        s.adapters.insert(ModuleId(id), noisy_adapter(id, layer, seed * 10 + id as u64));
    }
    s
}

fn tiny_batch(seed: u64) -> Vec<TrainingExample> {
    let mut rng = seeded_rng(seed);
    (0..3)
        .map(|_| {
            let mut words = |n: usize| (0..n).map(|_| rng.random_range(11..24)).collect::<Vec<u32>>();
            let x = words(3);
            let q = words(1);
            let y = words(2);
            TrainingExample::from_parts(&x, &q, &y, 3, 16).unwrap()
        })
        .collect()
}

fn fused_routing(seed: u64) -> Routing {
    let mut rng = seeded_rng(seed + 77);
    Routing::fused(
        vec![vec![ModuleId(0), ModuleId(1)], vec![ModuleId(2), ModuleId(3)]],
        vec![
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        ],
    )
    .unwrap()
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..5 {
        let state = tiny_state(seed);
        let batch = tiny_batch(seed);
        let refs: Vec<&TrainingExample> = batch.iter().collect();
        let routing = fused_routing(seed);
        let trainable = Trainable {
            backbone: true,
            modules: (0..4).map(ModuleId).collect(),
            coefficients: true,
        };
        let checks = check_gradients(
            &state,
            &refs,
            &routing,
            LossSelector::Train { mu: 0.25 },
            &trainable,
            TOLERANCES.finite_difference_step,
            400,
        )
        .unwrap();
        assert_eq!(checks.len(), 4 + 2 + 1);
        for c in checks {
            assert!(c.analytic_norm > 0.0, "{c:?}");
            assert!(c.relative_error < TOLERANCES.gradient_relative, "seed {seed}: {c:?}");
        }
    }
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let state = tiny_state(1);
    let batch = tiny_batch(1);
    let refs: Vec<&TrainingExample> = batch.iter().collect();
    let trainable = Trainable::modules([ModuleId(1)], false);
    let (_, g) = state
        .gradients(&refs, &fused_routing(1), LossSelector::Task, &trainable)
        .unwrap();
    assert!(g.backbone.is_none());
    assert!(g.coefficients.is_none());
    assert_eq!(g.modules.keys().copied().collect::<Vec<_>>(), vec![ModuleId(1)]);
}

#[test]
fn single_member_coefficient_has_zero_gradient() {
    let state = tiny_state(2);
    let batch = tiny_batch(2);
    let refs: Vec<&TrainingExample> = batch.iter().collect();
    let routing = Routing::single(&[ModuleId(0), ModuleId(2)]);
    let (_, g) = state
        .gradients(&refs, &routing, LossSelector::Task, &Trainable::modules([], true))
        .unwrap();
    assert_eq!(g.coefficients.unwrap(), vec![vec![0.0], vec![0.0]]);
}

#[test]
fn fused_output_is_convex_combination() {
    let state = tiny_state(3);
    let tokens = [11, 12, 13, 1, 14];
    let routing = Routing::fused(
        vec![vec![ModuleId(0), ModuleId(1)], vec![ModuleId(2)]],
        vec![vec![2f64.ln(), 0.0], vec![0.0]],
    )
    .unwrap();
    let trace = state.forward(&tokens, &routing).unwrap();
    let l0 = &trace.layers[0];
    let expected = &l0.member_outputs[0] * (2.0 / 3.0) + &l0.member_outputs[1] * (1.0 / 3.0);
    let diff = (&expected - &l0.fused_output).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
    assert!(diff < TOLERANCES.fusion, "{diff}");

    let single = state.forward(&tokens, &Routing::single(&[ModuleId(0), ModuleId(2)])).unwrap();
    let one = Routing::fused(vec![vec![ModuleId(0)], vec![ModuleId(2)]], vec![vec![3.5], vec![-1.0]]).unwrap();
    let fused_one = state.forward(&tokens, &one).unwrap();
    assert_eq!(single.logits, fused_one.logits);
}

#[test]
fn task_loss_matches_log_softmax_of_trace() {
    let state = tiny_state(4);
    let ex = &tiny_batch(4)[0];
    let routing = fused_routing(4);
    let trace = state.forward(&ex.task.tokens, &routing).unwrap();
    let mut oracle = 0.0;
    for j in ex.task.answer_start..ex.task.tokens.len() {
        let row = trace.logits.row(j - 1);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        oracle += lse - row[ex.task.tokens[j] as usize];
    }
    let loss = state.loss_task(&ex.task, &routing).unwrap();
    assert!((loss - oracle).abs() < 1e-9, "{loss} vs {oracle}");

    let data = state.loss_data(&ex.data, &routing).unwrap();
    let train = state.loss_train(ex, &routing, 0.25).unwrap();
    assert!((train - (loss + 0.25 * data)).abs() < TOLERANCES.loss_identity);
    assert_eq!(state.loss_train(ex, &routing, 0.0).unwrap(), loss);
    assert!(state.loss_task(&ex.data, &routing).is_err());
    assert!(state.loss_data(&ex.task, &routing).is_err());
}

#[test]
fn later_tokens_do_not_change_earlier_logits() {
    let state = tiny_state(5);
    let routing = fused_routing(5);
    let a = state.forward(&[11, 12, 13, 14, 15], &routing).unwrap();
    let b = state.forward(&[11, 12, 13, 20, 0], &routing).unwrap();
    for p in 0..3 {
        assert_eq!(a.logits.row(p), b.logits.row(p));
    }
    let ra = last_token_representation(&b, &[11, 12, 13, 20, 0]).unwrap();
    let c = state.forward(&[11, 12, 13, 20, 0, 0, 0], &routing).unwrap();
    let rc = last_token_representation(&c, &[11, 12, 13, 20, 0, 0, 0]).unwrap();
    assert_eq!(ra, rc);
    assert_eq!(ra, c.final_hidden.row(3));
    assert!(last_token_representation(&c, &[0, 0, 0, 0, 0, 0, 0]).is_err());
}

#[test]
fn unknown_module_is_a_routing_error() {
    let state = tiny_state(6);
    let err = state.forward(&[11, 12], &Routing::single(&[ModuleId(9), ModuleId(2)])).unwrap_err();
    assert!(matches!(err, dmea::DmeaError::Routing(_)), "{err}");
    let misplaced = state.forward(&[11, 12], &Routing::single(&[ModuleId(2), ModuleId(0)])).unwrap_err();
    assert!(matches!(misplaced, dmea::DmeaError::Routing(_)));
}
