//! Central-difference check of the full decoder gradient.

use crate::model::{Batch, CodeContext, Model, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: (String, usize),
}

fn loss(model: &Model, ctx: &CodeContext, batch: &Batch) -> Result<f64, ModelError> {
    let f = model.forward(ctx, batch)?;
    Ok(crate::train::flip_loss(f.logits(), &batch.target))
}

/// Compares backprop against the five-point central difference
/// `(8(L(θ+ε) - L(θ-ε)) - (L(θ+2ε) - L(θ-2ε))) / 12ε` for every
/// parameter entry. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn check_model_gradient(
    model: &Model,
    ctx: &CodeContext,
    batch: &Batch,
    eps: f64,
    floor: f64,
) -> Result<GradCheck, ModelError> {
    let mut fwd = model.forward(ctx, batch)?;
    let root = fwd.graph.flip_loss(fwd.logits, &batch.target, 1.0)?;
    fwd.graph.backward(root)?;
    let mut analytic: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.len()]).collect();
    fwd.graph.accumulate_param_grads(&mut analytic);
    let mut probe = model.clone();
    let mut out = GradCheck { checked: 0, max_rel_error: 0.0, worst: (String::new(), 0) };
    for (p, grads) in analytic.iter().enumerate() {
        for (e, &a) in grads.iter().enumerate() {
            let orig = probe.params()[p].data()[e];
            let mut at = |delta: f64| {
                probe.params_mut()[p].data_mut()[e] = orig + delta;
                loss(&probe, ctx, batch)
            };
            let (u1, d1, u2, d2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
            probe.params_mut()[p].data_mut()[e] = orig;
            let num = (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * eps);
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(floor);
            if rel > out.max_rel_error {
                out.max_rel_error = rel;
                out.worst = (model.names()[p].clone(), e);
            }
            out.checked += 1;
        }
    }
    Ok(out)
}
