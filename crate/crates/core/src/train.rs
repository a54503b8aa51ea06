//! Small helpers shared by the training stages.

use rand::seq::SliceRandom;

use crate::model::{GradStore, ModelState, ModuleId, Routing};
use crate::numerics::Rng;
use crate::optim::Optimizer;

/// Shuffled mini-batches of indices into a set of `len` items.
pub(crate) fn shuffled_batches(len: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Applies one optimizer step to the given modules and, when `coefficients`
/// is set, to that routing's coefficients.
pub(crate) fn apply_step(
    opt: &mut Optimizer,
    state: &mut ModelState,
    grads: &GradStore,
    modules: &[ModuleId],
    coefficients: Option<&mut Routing>,
) {
    opt.begin_step(grads.norm());
    for id in modules {
        if let (Some(g), Some(a)) = (grads.modules.get(id), state.adapters.get_mut(id)) {
            opt.update(&id.to_string(), &mut a.params, g);
        }
    }
    if let (Some(routing), Some(cg)) = (coefficients, grads.coefficients.as_ref()) {
        for (l, (route, g)) in routing.layers.iter_mut().zip(cg).enumerate() {
            if !route.coefficients.is_empty() {
                opt.update(&format!("coefficients{l}"), &mut route.coefficients, g);
            }
        }
    }
}
