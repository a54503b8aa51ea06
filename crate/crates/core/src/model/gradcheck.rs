//! Finite-difference verification of the analytic gradients.

use serde::Serialize;

use super::{LossSelector, ModelState, Routing, Trainable, TrainingExample};
use crate::error::{DmeaError, Result};
use crate::numerics::{finite_difference_gradient, relative_error};

#[derive(Debug, Clone, Serialize)]
pub struct GroupCheck {
    pub group: String,
    pub checked: usize,
    pub analytic_norm: f64,
    pub relative_error: f64,
}

/// Compares analytic gradients of every trainable group with central
/// differences of the loss. At most `backbone_coords` evenly spaced backbone
/// coordinates are probed.
pub fn check_gradients(
    state: &ModelState,
    batch: &[&TrainingExample],
    routing: &Routing,
    selector: LossSelector,
    trainable: &Trainable,
    h: f64,
    backbone_coords: usize,
) -> Result<Vec<GroupCheck>> {
    let (_, grads) = state.gradients(batch, routing, selector, trainable)?;
    let mut probe = state.clone();
    let mut checks = Vec::new();
    let floor = 1e-12;

    for id in &trainable.modules {
        let analytic = grads
            .modules
            .get(id)
            .cloned()
            .ok_or_else(|| DmeaError::OracleFailure(format!("no gradient for trainable module {id}")))?;
        let x0 = state.adapter(*id)?.params.clone();
        let numeric = finite_difference_gradient(
            |x| {
                probe.adapters.get_mut(id).unwrap().params.copy_from_slice(x);
                probe.batch_loss(batch, routing, selector).unwrap_or(f64::NAN)
            },
            &x0,
            h,
        )?;
        probe.adapters.get_mut(id).unwrap().params.copy_from_slice(&x0);
        checks.push(GroupCheck {
            group: format!("module {id}"),
            checked: x0.len(),
            analytic_norm: crate::numerics::l2_norm(&analytic),
            relative_error: relative_error(&analytic, &numeric, floor),
        });
    }

    if trainable.coefficients {
        let coeffs = grads
            .coefficients
            .as_ref()
            .ok_or_else(|| DmeaError::OracleFailure("no coefficient gradients".into()))?;
        for (l, route) in routing.layers.iter().enumerate() {
            if route.modules.is_empty() {
                continue;
            }
            let mut r = routing.clone();
            let numeric = finite_difference_gradient(
                |x| {
                    r.layers[l].coefficients.copy_from_slice(x);
                    state.batch_loss(batch, &r, selector).unwrap_or(f64::NAN)
                },
                &route.coefficients,
                h,
            )?;
            checks.push(GroupCheck {
                group: format!("coefficients layer {l}"),
                checked: numeric.len(),
                analytic_norm: crate::numerics::l2_norm(&coeffs[l]),
                relative_error: relative_error(&coeffs[l], &numeric, floor),
            });
        }
    }

    if trainable.backbone && backbone_coords > 0 {
        let full = grads
            .backbone
            .as_ref()
            .ok_or_else(|| DmeaError::OracleFailure("no backbone gradient".into()))?;
        let total = full.len();
        let stride = (total / backbone_coords).max(1);
        let idx: Vec<usize> = (0..total).step_by(stride).collect();
        let x0: Vec<f64> = idx.iter().map(|&i| state.backbone.params[i]).collect();
        let numeric = finite_difference_gradient(
            |x| {
                for (k, &i) in idx.iter().enumerate() {
                    probe.backbone.params[i] = x[k];
                }
                probe.batch_loss(batch, routing, selector).unwrap_or(f64::NAN)
            },
            &x0,
            h,
        )?;
        let analytic: Vec<f64> = idx.iter().map(|&i| full[i]).collect();
        checks.push(GroupCheck {
            group: "backbone".into(),
            checked: idx.len(),
            analytic_norm: crate::numerics::l2_norm(&analytic),
            relative_error: relative_error(&analytic, &numeric, floor),
        });
    }
    Ok(checks)
}
