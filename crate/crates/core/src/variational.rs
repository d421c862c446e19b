//! Diagonal Gaussian latents.
//!
//! Variances are carried as `log σ²` and clamped to [`LOG_VAR_MIN`,
//! `LOG_VAR_MAX`] inside densities and KL terms. Sampling only clamps from
//! above: a tiny variance underflows harmlessly and must still collapse the
//! sample onto the mean. Graph-level functions take
//! [`GaussianVars`] whose `mu` and `log_var` nodes are `T x D` matrices, one
//! row per frame.

use crate::autodiff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const LOG_VAR_MIN: f64 = -12.0;
pub const LOG_VAR_MAX: f64 = 12.0;

fn clamp_log_var(v: f64) -> f64 {
    v.clamp(LOG_VAR_MIN, LOG_VAR_MAX)
}

/// `N(mu, diag(exp(log_var)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(Error::Shape(format!(
                "mu has {} dims, log_var {}",
                mu.len(),
                log_var.len()
            )));
        }
        if let Some(v) = log_var.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("log_var must be finite, got {v}")));
        }
        Ok(Self { mu, log_var })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// `ln q(z)`.
    pub fn log_density(&self, z: &[f64]) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(z)
            .map(|((m, lv), z)| {
                let lv = clamp_log_var(*lv);
                -0.5 * (ln2pi + lv + (z - m).powi(2) * (-lv).exp())
            })
            .sum()
    }
}

/// A Gaussian (or a sequence of them, one per row) held as graph nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianVars {
    pub mu: Var,
    pub log_var: Var,
}

impl GaussianVars {
    pub fn constant(g: &mut Graph, q: &DiagGaussian) -> Self {
        let d = q.dim();
        Self {
            mu: g.constant(Tensor::matrix(1, d, q.mu.clone()).expect("sized")),
            log_var: g.constant(Tensor::matrix(1, d, q.log_var.clone()).expect("sized")),
        }
    }

    /// Stacks one Gaussian per row.
    pub fn constant_seq(g: &mut Graph, qs: &[DiagGaussian]) -> Result<Self> {
        let d = qs.first().map_or(0, DiagGaussian::dim);
        if qs.iter().any(|q| q.dim() != d) {
            return Err(Error::Shape("Gaussians of differing dimension".into()));
        }
        let mu: Vec<f64> = qs.iter().flat_map(|q| q.mu.iter().copied()).collect();
        let lv: Vec<f64> = qs.iter().flat_map(|q| q.log_var.iter().copied()).collect();
        Ok(Self {
            mu: g.constant(Tensor::matrix(qs.len(), d, mu)?),
            log_var: g.constant(Tensor::matrix(qs.len(), d, lv)?),
        })
    }

    pub fn row(&self, g: &mut Graph, t: usize) -> Result<Self> {
        Ok(Self {
            mu: g.slice_row(self.mu, t)?,
            log_var: g.slice_row(self.log_var, t)?,
        })
    }

    pub fn rows(&self, g: &Graph) -> usize {
        g.value(self.mu).rows()
    }

    /// Reads row `t` back as a value.
    pub fn value_row(&self, g: &Graph, t: usize) -> DiagGaussian {
        DiagGaussian {
            mu: g.value(self.mu).row(t).to_vec(),
            log_var: g.value(self.log_var).row(t).to_vec(),
        }
    }

    pub fn values(&self, g: &Graph) -> Vec<DiagGaussian> {
        (0..self.rows(g)).map(|t| self.value_row(g, t)).collect()
    }
}

/// `μ + exp(½·log σ²) ⊙ ε` for a fresh `ε ~ N(0, I)`.
pub fn reparameterize(q: &DiagGaussian, rng: &mut Rng) -> Vec<f64> {
    q.mu.iter()
        .zip(&q.log_var)
        .map(|(m, lv)| m + (0.5 * lv.min(LOG_VAR_MAX)).exp() * rng.normal())
        .collect()
}

/// Graph form of [`reparameterize`] with caller-supplied noise of the same
/// shape as `q.mu`. Gradients reach both `mu` and `log_var`.
pub fn reparameterize_var(g: &mut Graph, q: GaussianVars, eps: Tensor) -> Result<Var> {
    if !eps.same_shape(g.value(q.mu)) {
        return Err(Error::Shape("noise does not match mu".into()));
    }
    let lv = g.clamp(q.log_var, f64::NEG_INFINITY, LOG_VAR_MAX);
    let half = g.scale(lv, 0.5);
    let sd = g.exp(half);
    let e = g.constant(eps);
    let noise = g.mul(sd, e)?;
    g.add(q.mu, noise)
}

/// Draws noise for [`reparameterize_var`], row-major, from `rng`.
pub fn sample_noise(g: &Graph, q: GaussianVars, rng: &mut Rng) -> Tensor {
    let shape = g.value(q.mu).shape().to_vec();
    let n = g.value(q.mu).len();
    let mut data = vec![0.0; n];
    rng.fill_normal(&mut data);
    Tensor::new(shape, data).expect("sized")
}

/// Per-dimension KL term and its partial derivatives with respect to
/// `(mu_q, log_var_q, mu_p, log_var_p)`, before clamping is accounted for.
#[inline]
fn kl_term(mq: f64, lq: f64, mp: f64, lp: f64) -> (f64, [f64; 4]) {
    let (lq, lp) = (clamp_log_var(lq), clamp_log_var(lp));
    let ratio = (lq - lp).exp();
    let inv_p = (-lp).exp();
    let d = mq - mp;
    let kl = -0.5 * ((lq - lp) - ratio - d * d * inv_p + 1.0);
    let dmq = d * inv_p;
    let dlq = -0.5 * (1.0 - ratio);
    let dlp = -0.5 * (-1.0 + ratio + d * d * inv_p);
    (kl, [dmq, dlq, -dmq, dlp])
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians:
/// `−½ Σ_d [ ln(σ²/σ̌²) − σ²/σ̌² − (μ−μ̌)²/σ̌² + 1 ]`.
pub fn kl_diag_gauss(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() || q.log_var.len() != p.log_var.len() {
        return Err(Error::Shape(format!(
            "KL between {}- and {}-dimensional Gaussians",
            q.dim(),
            p.dim()
        )));
    }
    Ok((0..q.dim())
        .map(|d| kl_term(q.mu[d], q.log_var[d], p.mu[d], p.log_var[d]).0)
        .sum())
}

struct KlOp;

impl CustomOp for KlOp {
    fn name(&self) -> &'static str {
        "kl_diag_gauss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let gy = grad.item();
        let n = inputs[0].len();
        let mut outs: Vec<Vec<f64>> = vec![vec![0.0; n]; 4];
        let in_range = |v: f64| (LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v);
        for i in 0..n {
            let (mq, lq, mp, lp) = (
                inputs[0].data()[i],
                inputs[1].data()[i],
                inputs[2].data()[i],
                inputs[3].data()[i],
            );
            let (_, d) = kl_term(mq, lq, mp, lp);
            outs[0][i] = gy * d[0];
            outs[1][i] = if in_range(lq) { gy * d[1] } else { 0.0 };
            outs[2][i] = gy * d[2];
            outs[3][i] = if in_range(lp) { gy * d[3] } else { 0.0 };
        }
        outs.into_iter()
            .zip(inputs)
            .map(|(o, t)| Tensor::new(t.shape().to_vec(), o))
            .collect()
    }
}

/// Graph node for `Σ KL(q_t ‖ p_t)` over every row and dimension.
pub fn kl_diag_gauss_var(g: &mut Graph, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let vals = [q.mu, q.log_var, p.mu, p.log_var].map(|v| g.value(v));
    if vals.iter().any(|v| !v.same_shape(vals[0])) {
        return Err(Error::Shape(format!(
            "KL between {:?} and {:?}",
            vals[0].shape(),
            vals[2].shape()
        )));
    }
    let n = vals[0].len();
    let mut kl = 0.0;
    for i in 0..n {
        kl += kl_term(
            vals[0].data()[i],
            vals[1].data()[i],
            vals[2].data()[i],
            vals[3].data()[i],
        )
        .0;
    }
    Ok(g.custom(
        &[q.mu, q.log_var, p.mu, p.log_var],
        Tensor::scalar(kl),
        Box::new(KlOp),
    ))
}

/// Monte Carlo estimate of `E_{z ~ q_prev}[ KL(q_t ‖ prior(z)) ]` with `samples`
/// draws.
pub fn expected_kl_markov(
    q_prev: &DiagGaussian,
    make_prior: &dyn Fn(&[f64]) -> DiagGaussian,
    q_t: &DiagGaussian,
    rng: &mut Rng,
    samples: usize,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Contract("expected KL needs at least one sample".into()));
    }
    let mut acc = 0.0;
    for _ in 0..samples {
        let z = reparameterize(q_prev, rng);
        acc += kl_diag_gauss(q_t, &make_prior(&z))?;
    }
    Ok(acc / samples as f64)
}

/// Builds a prior node from a sampled previous latent (a `1 x D` node).
pub type PriorFn<'a> = dyn Fn(&mut Graph, Var) -> Result<GaussianVars> + 'a;

/// Graph form of [`expected_kl_markov`]. Gradients flow through the KL and
/// through the reparameterised `z_prev` samples.
pub fn expected_kl_markov_var(
    g: &mut Graph,
    q_prev: GaussianVars,
    make_prior: &PriorFn<'_>,
    q_t: GaussianVars,
    rng: &mut Rng,
    samples: usize,
) -> Result<Var> {
    if samples == 0 {
        return Err(Error::Contract("expected KL needs at least one sample".into()));
    }
    let mut terms = Vec::with_capacity(samples);
    for _ in 0..samples {
        let eps = sample_noise(g, q_prev, rng);
        let z = reparameterize_var(g, q_prev, eps)?;
        let p = make_prior(g, z)?;
        terms.push(kl_diag_gauss_var(g, q_t, p)?);
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, 1.0 / samples as f64))
}
