//! Independent reference computations used to check the fast paths:
//! central finite differences, Gauss–Hermite quadrature and Monte Carlo KL.
//! None of these reuse the code they are meant to check.

use crate::autodiff::{Gradients, ParamStore};
use crate::error::Result;
use crate::numerics::Rng;
use crate::variational::DiagGaussian;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest [`relative_error`] over all parameter components.
pub fn max_relative_error(analytic: &Gradients, numeric: &Gradients) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .flat_map(|((_, a), (_, b))| a.data().iter().zip(b.data()).map(|(x, y)| relative_error(*x, *y)))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `f` with respect to every trainable
/// parameter in `store`.
pub fn param_fd_gradient(
    store: &ParamStore,
    h: f64,
    f: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<Gradients> {
    let mut out = Gradients::zeros_like(store);
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let fp = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let fm = f(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            out.get_mut(id).data_mut()[i] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Central-difference gradient of a function of a flat vector.
pub fn vector_fd_gradient(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let fp = f(&work);
            work[i] = x[i] - h;
            let fm = f(&work);
            work[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Nodes and weights of `n`-point Gauss–Hermite quadrature for the weight
/// `exp(−x²)`, found by Newton iteration on the orthonormal Hermite
/// recurrence. Nodes are returned in decreasing order.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PI_M4: f64 = 0.751_125_544_464_942_5; // π^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = PI_M4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// `KL(N(mq, e^lq) ‖ N(mp, e^lp))` in one dimension by Gauss–Hermite
/// quadrature of `E_q[ln q(z) − ln p(z)]` with `n` nodes.
pub fn kl_quadrature(mq: f64, lq: f64, mp: f64, lp: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_hermite(n);
    let sq = (0.5 * lq).exp();
    let log_normal = |z: f64, m: f64, lv: f64| {
        -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (z - m).powi(2) / lv.exp())
    };
    let total: f64 = nodes
        .iter()
        .zip(&weights)
        .map(|(x, w)| {
            let z = mq + std::f64::consts::SQRT_2 * sq * x;
            w * (log_normal(z, mq, lq) - log_normal(z, mp, lp))
        })
        .sum();
    total / std::f64::consts::PI.sqrt()
}

/// Monte Carlo estimate of `KL(q ‖ p)` as the sample mean of
/// `ln q(z) − ln p(z)` for `z ~ q`, with its standard error.
pub fn kl_monte_carlo(q: &DiagGaussian, p: &DiagGaussian, rng: &mut Rng, samples: usize) -> (f64, f64) {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let log_density = |g: &DiagGaussian, z: &[f64]| -> f64 {
        g.mu.iter()
            .zip(&g.log_var)
            .zip(z)
            .map(|((m, lv), z)| -0.5 * (ln2pi + lv + (z - m).powi(2) / lv.exp()))
            .sum()
    };
    let mut z = vec![0.0; q.dim()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..samples {
        for (d, zd) in z.iter_mut().enumerate() {
            *zd = q.mu[d] + (0.5 * q.log_var[d]).exp() * rng.normal();
        }
        let v = log_density(q, &z) - log_density(p, &z);
        sum += v;
        sum_sq += v * v;
    }
    let n = samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
