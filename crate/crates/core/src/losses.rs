//! Training objectives, all in the maximisation convention
//! `total = prediction − kl_weight · regularization`.
//!
//! The prediction term is the log of the CTC path sum, `ln p(y | X, Z)`, for
//! every objective. The conditional-independence loss regularises with
//! `Σ_t KL(q_t ‖ p_t)`; the Markovian loss with
//! `Σ_t E_{q_{t−1}}[KL(q_t ‖ p(z_t | z_{t−1}))]`, the first step being an
//! unconditional KL.
//!
//! Each loss exists twice: a value form over plain tables and Gaussians, and
//! a graph form used for training.

use crate::autodiff::{Graph, Var};
use crate::ctc::{ctc_log_likelihood, ctc_log_likelihood_var, FrameLogProbs, LabelSequence};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::variational::{
    expected_kl_markov, expected_kl_markov_var, kl_diag_gauss, kl_diag_gauss_var, DiagGaussian,
    GaussianVars, PriorFn,
};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub prediction_term: f64,
    pub regularization_term: f64,
    pub total: f64,
    pub kl_weight: f64,
}

impl LossBreakdown {
    fn new(prediction_term: f64, regularization_term: f64, kl_weight: f64) -> Self {
        Self {
            prediction_term,
            regularization_term,
            total: prediction_term - kl_weight * regularization_term,
            kl_weight,
        }
    }

    /// Per-sequence losses averaged over a batch.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        LossBreakdown {
            prediction_term: sum(|b| b.prediction_term),
            regularization_term: sum(|b| b.regularization_term),
            total: sum(|b| b.total),
            kl_weight: items.first().map_or(0.0, |b| b.kl_weight),
        }
    }
}

/// Prior for one step of the Markovian loss.
pub enum Prior {
    /// Does not depend on the previous latent.
    Fixed(DiagGaussian),
    /// Built from a sample of the previous latent.
    Conditional(Box<dyn Fn(&[f64]) -> DiagGaussian>),
}

fn check_lengths(frames: usize, q: usize, p: usize) -> Result<()> {
    if q != frames || p != frames {
        return Err(Error::Shape(format!(
            "{frames} frames but {q} posteriors and {p} priors"
        )));
    }
    Ok(())
}

/// Standard CTC: `ln p(y | X)` with no regularisation.
pub fn loss_ctc(probs: &FrameLogProbs, y: &LabelSequence) -> Result<LossBreakdown> {
    let ll = ctc_log_likelihood(probs, y)?.value();
    Ok(LossBreakdown::new(ll, 0.0, 1.0))
}

/// Conditional-independence loss with one posterior and prior per frame.
pub fn loss_ci(
    probs: &FrameLogProbs,
    y: &LabelSequence,
    q: &[DiagGaussian],
    p: &[DiagGaussian],
    kl_weight: f64,
) -> Result<LossBreakdown> {
    check_lengths(probs.frames(), q.len(), p.len())?;
    let ll = ctc_log_likelihood(probs, y)?.value();
    let mut reg = 0.0;
    for (qt, pt) in q.iter().zip(p) {
        reg += kl_diag_gauss(qt, pt)?;
    }
    Ok(LossBreakdown::new(ll, reg, kl_weight))
}

/// Markovian loss. `priors[0]` must be [`Prior::Fixed`]; conditional priors
/// are averaged over `samples` draws of the previous latent.
pub fn loss_markov(
    probs: &FrameLogProbs,
    y: &LabelSequence,
    q: &[DiagGaussian],
    priors: &[Prior],
    rng: &mut Rng,
    samples: usize,
    kl_weight: f64,
) -> Result<LossBreakdown> {
    check_lengths(probs.frames(), q.len(), priors.len())?;
    let ll = ctc_log_likelihood(probs, y)?.value();
    let mut reg = 0.0;
    for (t, prior) in priors.iter().enumerate() {
        reg += match prior {
            Prior::Fixed(p) => kl_diag_gauss(&q[t], p)?,
            Prior::Conditional(f) => {
                if t == 0 {
                    return Err(Error::Contract("the first prior must be unconditional".into()));
                }
                expected_kl_markov(&q[t - 1], f.as_ref(), &q[t], rng, samples)?
            }
        };
    }
    Ok(LossBreakdown::new(ll, reg, kl_weight))
}

/// Graph nodes of one objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub prediction: Var,
    pub regularization: Var,
    pub total: Var,
    pub kl_weight: f64,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            prediction_term: g.value(self.prediction).item(),
            regularization_term: g.value(self.regularization).item(),
            total: g.value(self.total).item(),
            kl_weight: self.kl_weight,
        }
    }
}

fn combine(g: &mut Graph, prediction: Var, regularization: Var, kl_weight: f64) -> Result<LossVars> {
    let penalty = g.scale(regularization, -kl_weight);
    let total = g.add(prediction, penalty)?;
    Ok(LossVars {
        prediction,
        regularization,
        total,
        kl_weight,
    })
}

/// Graph form of [`loss_ctc`] over a `T x K` log-probability node.
pub fn ctc_objective(g: &mut Graph, log_probs: Var, y: &LabelSequence) -> Result<LossVars> {
    let prediction = ctc_log_likelihood_var(g, log_probs, y)?;
    let zero = g.scalar(0.0);
    combine(g, prediction, zero, 1.0)
}

/// Graph form of [`loss_ci`]; `q` and `p` hold one row per frame.
pub fn ci_objective(
    g: &mut Graph,
    log_probs: Var,
    y: &LabelSequence,
    q: GaussianVars,
    p: GaussianVars,
    kl_weight: f64,
) -> Result<LossVars> {
    let frames = g.value(log_probs).rows();
    check_lengths(frames, q.rows(g), p.rows(g))?;
    let prediction = ctc_log_likelihood_var(g, log_probs, y)?;
    let reg = kl_diag_gauss_var(g, q, p)?;
    combine(g, prediction, reg, kl_weight)
}

/// Per-step prior for [`markov_objective`].
pub enum PriorStep<'a> {
    /// A `1 x D` prior independent of the previous latent.
    Fixed(GaussianVars),
    Conditional(Box<PriorFn<'a>>),
}

/// Graph form of [`loss_markov`].
#[allow(clippy::too_many_arguments)]
pub fn markov_objective(
    g: &mut Graph,
    log_probs: Var,
    y: &LabelSequence,
    q: GaussianVars,
    priors: &[PriorStep<'_>],
    rng: &mut Rng,
    samples: usize,
    kl_weight: f64,
) -> Result<LossVars> {
    let frames = g.value(log_probs).rows();
    check_lengths(frames, q.rows(g), priors.len())?;
    let prediction = ctc_log_likelihood_var(g, log_probs, y)?;
    let mut terms = Vec::with_capacity(frames);
    let mut prev_row = None;
    for (t, prior) in priors.iter().enumerate() {
        let q_t = q.row(g, t)?;
        let term = match prior {
            PriorStep::Fixed(p) => kl_diag_gauss_var(g, q_t, *p)?,
            PriorStep::Conditional(f) => {
                let q_prev = prev_row
                    .ok_or_else(|| Error::Contract("the first prior must be unconditional".into()))?;
                expected_kl_markov_var(g, q_prev, f.as_ref(), q_t, rng, samples)?
            }
        };
        terms.push(term);
        prev_row = Some(q_t);
    }
    let reg = g.add_all(&terms)?;
    combine(g, prediction, reg, kl_weight)
}

/// KL weight, optionally warmed up linearly over the first steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlSchedule {
    pub weight: f64,
    pub warmup_steps: usize,
}

impl Default for KlSchedule {
    fn default() -> Self {
        Self {
            weight: 1.0,
            warmup_steps: 0,
        }
    }
}

impl KlSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.weight
        } else {
            self.weight * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}
