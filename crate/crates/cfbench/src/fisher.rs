//! Diagonal Fisher information estimation.
//!
//! `F_i` is the mean over sampled inputs of the squared gradient of the
//! model's log-likelihood, with labels drawn from the model's own predictive
//! distribution (the "true" Fisher). Both EWC and mode-IMM consume this.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::network::{Network, ParamSet};
use crate::rng::RngStream;

/// Per-parameter nonnegative importance estimates, shapes mirroring the
/// network that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    pub values: ParamSet,
    pub sample_count: usize,
}

/// Monte-Carlo estimate of the diagonal Fisher: draw an input from `dataset`,
/// draw a label from the model's predictive distribution, accumulate the
/// squared gradient of `log p(y|x)`, and average over `n_samples`.
/// Deterministic given `rng`.
pub fn estimate_fisher_diagonal(
    net: &Network,
    dataset: &Dataset,
    n_samples: usize,
    rng: &mut RngStream,
) -> Result<FisherDiagonal> {
    if dataset.is_empty() {
        return Err(Error::data("cannot estimate Fisher on an empty dataset"));
    }
    if n_samples == 0 {
        return Err(Error::config("fisher estimation needs n_samples >= 1"));
    }

    let mut acc = net.params().zeros_like();
    let mut eval_rng = RngStream::new(0);
    for _ in 0..n_samples {
        let i = rng.below(dataset.len());
        let (x, _) = dataset.batch_range(i, i + 1);
        let (probs, _) = net.forward(&x, Mode::Eval, &mut eval_rng)?;
        let y = rng.categorical(probs.row(0)) as u8;
        // Mean CE on a single sample is -log p(y|x); its gradient squared is
        // exactly the squared log-likelihood gradient.
        let (_, grads) = net.loss_and_grads(&x, &[y], Mode::Eval, &mut eval_rng, None)?;
        for (a, g) in acc.values_mut().zip(grads.values()) {
            *a += g * g;
        }
    }
    let inv = 1.0 / n_samples as f64;
    for a in acc.values_mut() {
        *a *= inv;
    }
    Ok(FisherDiagonal { values: acc, sample_count: n_samples })
}
