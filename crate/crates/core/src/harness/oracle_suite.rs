//! Randomized comparisons of the fast paths against their oracles, as run
//! by the `oracle-check` command.

use serde::Serialize;

use crate::ctc::{brute_force_log_likelihood, ctc_grad, ctc_log_likelihood, FrameLogProbs, LabelSequence};
use crate::error::Result;
use crate::numerics::Rng;
use crate::oracles::{kl_monte_carlo, kl_quadrature, relative_error, vector_fd_gradient};
use crate::variational::{kl_diag_gauss, DiagGaussian};
use crate::autodiff::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCheck {
    pub name: &'static str,
    pub instances: usize,
    /// Largest discrepancy seen, in the check's own unit.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn check(name: &'static str, instances: usize, worst: f64, tolerance: f64) -> OracleCheck {
    OracleCheck {
        name,
        instances,
        worst,
        tolerance,
        passed: worst <= tolerance,
    }
}

fn random_logits(rng: &mut Rng, frames: usize, classes: usize) -> Tensor {
    Tensor::matrix(frames, classes, (0..frames * classes).map(|_| 2.0 * rng.normal()).collect())
        .expect("shape")
}

fn random_target(rng: &mut Rng, symbols: usize, max_len: usize) -> LabelSequence {
    LabelSequence((0..rng.between(0, max_len)).map(|_| rng.below(symbols)).collect())
}

/// Lattice log-likelihood against path enumeration; absolute difference.
pub fn ctc_enumeration_check(rng: &mut Rng, instances: usize) -> Result<OracleCheck> {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let frames = rng.between(1, 6);
        let symbols = rng.between(1, 3);
        let probs = FrameLogProbs::from_logits(&random_logits(rng, frames, symbols + 1))?;
        let y = random_target(rng, symbols, 3);
        let dp = ctc_log_likelihood(&probs, &y)?.0;
        let bf = brute_force_log_likelihood(&probs, &y)?.0;
        let diff = if dp == f64::NEG_INFINITY && bf == f64::NEG_INFINITY {
            0.0
        } else {
            (dp - bf).abs()
        };
        worst = worst.max(if diff.is_nan() { f64::INFINITY } else { diff });
    }
    Ok(check("ctc likelihood vs enumeration", instances, worst, 1e-9))
}

/// Analytic logit gradient against central differences; relative error.
pub fn ctc_gradient_check(rng: &mut Rng, instances: usize) -> Result<OracleCheck> {
    let mut worst: f64 = 0.0;
    let mut done = 0;
    while done < instances {
        let frames = rng.between(1, 6);
        let symbols = rng.between(1, 3);
        let logits = random_logits(rng, frames, symbols + 1);
        let y = random_target(rng, symbols, 3);
        if y.min_frames() > frames {
            continue;
        }
        done += 1;
        let probs = FrameLogProbs::from_logits(&logits)?;
        let analytic = ctc_grad(&probs, &y)?;
        let f = |v: &[f64]| -> f64 {
            let t = Tensor::matrix(frames, symbols + 1, v.to_vec()).expect("shape");
            let p = FrameLogProbs::from_logits(&t).expect("finite logits");
            ctc_log_likelihood(&p, &y).expect("valid target").0
        };
        let numeric = vector_fd_gradient(logits.data(), 1e-5, f);
        for (a, n) in analytic.data().iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    Ok(check("ctc gradient vs finite differences", instances, worst, 1e-4))
}

/// Closed-form KL against 64-point Gauss–Hermite quadrature in one dimension.
pub fn kl_quadrature_check(rng: &mut Rng, instances: usize) -> Result<OracleCheck> {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (mq, lq, mp, lp) = (rng.normal(), rng.uniform_range(-2.0, 2.0), rng.normal(), rng.uniform_range(-2.0, 2.0));
        let closed = kl_diag_gauss(&DiagGaussian::new(vec![mq], vec![lq])?, &DiagGaussian::new(vec![mp], vec![lp])?)?;
        worst = worst.max((closed - kl_quadrature(mq, lq, mp, lp, 64)).abs());
    }
    Ok(check("kl vs gauss-hermite quadrature", instances, worst, 1e-6))
}

/// Closed-form KL against Monte Carlo; distance in standard errors.
pub fn kl_monte_carlo_check(rng: &mut Rng, instances: usize, samples: usize) -> Result<OracleCheck> {
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let dim = rng.between(1, 8);
        let draw = |rng: &mut Rng| {
            let mu = (0..dim).map(|_| rng.normal()).collect();
            let lv = (0..dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
            DiagGaussian::new(mu, lv)
        };
        let (q, p) = (draw(rng)?, draw(rng)?);
        let closed = kl_diag_gauss(&q, &p)?;
        let (mean, se) = kl_monte_carlo(&q, &p, rng, samples);
        worst = worst.max((closed - mean).abs() / se);
    }
    Ok(check("kl vs monte carlo (standard errors)", instances, worst, 3.0))
}

pub fn run_oracle_suite(seed: u64, instances: usize, mc_samples: usize) -> Result<Vec<OracleCheck>> {
    Ok(vec![
        ctc_enumeration_check(&mut Rng::with_stream(seed, 0), instances)?,
        ctc_gradient_check(&mut Rng::with_stream(seed, 1), instances)?,
        kl_quadrature_check(&mut Rng::with_stream(seed, 2), instances)?,
        kl_monte_carlo_check(&mut Rng::with_stream(seed, 3), instances.min(10), mc_samples)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        for c in run_oracle_suite(5, 50, 20_000).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
