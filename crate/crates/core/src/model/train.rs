//! MLE fine-tuning step.

use rayon::prelude::*;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::tokens::TokenSeq;

use super::forward;
use super::{Adam, Model};

/// Loss and gradient of one example: summed token NLL over the EOS-appended
/// target, with gradients in flat layout order.
fn example_nll_and_grads(model: &Model, x: &TokenSeq, y: &TokenSeq) -> Result<(f64, usize, Vec<f64>)> {
    let y = y.with_eos();
    let mut g = Graph::new();
    let bound = forward::bind_params(&mut g, &model.params, true);
    let mem = forward::encode_graph(&mut g, &model.config, &bound, x.ids())?;
    let nll = forward::nll_sum_graph(&mut g, &model.config, &bound, mem, y.ids())?;
    g.backward(nll)?;
    let grads = forward::collect_grads(&g, &model.params, &bound);
    Ok((g.scalar_value(nll), y.len(), grads))
}

/// Batch MLE objective: mean token NLL over EOS-appended targets, and its
/// gradient in flat layout order. Examples are processed independently (no
/// padding enters the loss) and gradients reduce in batch order, so results
/// do not depend on thread scheduling.
pub fn mle_objective(model: &Model, batch: &[(TokenSeq, TokenSeq)]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    let per_example: Vec<Result<(f64, usize, Vec<f64>)>> = batch
        .par_iter()
        .map(|(x, y)| example_nll_and_grads(model, x, y))
        .collect();

    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    let mut grads = vec![0.0; model.params.layout().total_len()];
    for r in per_example {
        let (nll, tokens, g) = r?;
        total_nll += nll;
        total_tokens += tokens;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    let scale = 1.0 / total_tokens as f64;
    for g in grads.iter_mut() {
        *g *= scale;
    }
    Ok((total_nll * scale, grads))
}

/// One Adam step on the batch MLE objective. Returns the batch loss (mean
/// NLL per target token). Halts with a diagnostic on a non-finite loss.
pub fn mle_train_step(
    model: &mut Model,
    opt: &mut Adam,
    batch: &[(TokenSeq, TokenSeq)],
    learning_rate: f64,
    step: u64,
) -> Result<f64> {
    let (loss, grads) = mle_objective(model, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { step, value: loss });
    }
    opt.step(&mut model.params.values, &grads, learning_rate);
    Ok(loss)
}
