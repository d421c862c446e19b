use super::{collapse, FrameLogProbs, LabelSequence, Path};
use crate::autodiff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::numerics::{log_add, LogProb};

/// Largest number of paths [`brute_force_log_likelihood`] will enumerate.
pub const ENUMERATION_LIMIT: f64 = 1e7;

/// Log-domain forward and backward tables over the blank-interleaved target.
///
/// `alpha(t, s)` is the mass of all path prefixes ending in extended state `s`
/// at frame `t`; `beta(t, s)` the mass of all suffixes starting there. Both
/// include the emission at `(t, s)`.
#[derive(Clone, Debug)]
pub struct CtcLattice {
    extended: Vec<usize>,
    frames: usize,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_likelihood: f64,
}

impl CtcLattice {
    pub fn new(probs: &FrameLogProbs, y: &LabelSequence) -> Result<Self> {
        let blank = probs.blank();
        if let Some(&bad) = y.tokens().iter().find(|&&k| k >= blank) {
            return Err(Error::Contract(format!(
                "target token {bad} is not a symbol (blank is {blank})"
            )));
        }
        let frames = probs.frames();
        if frames == 0 {
            return Err(Error::Contract("no input frames".into()));
        }
        let mut extended = Vec::with_capacity(2 * y.len() + 1);
        extended.push(blank);
        for &k in y.tokens() {
            extended.push(k);
            extended.push(blank);
        }
        let s_len = extended.len();
        // Skip transition s-2 -> s allowed only onto a symbol that differs
        // from the symbol two states back.
        let can_skip: Vec<bool> = (0..s_len)
            .map(|s| s >= 2 && extended[s] != blank && extended[s] != extended[s - 2])
            .collect();
        let neg = f64::NEG_INFINITY;
        let lp = |t: usize, s: usize| probs.get(t, extended[s]);

        let mut alpha = vec![neg; frames * s_len];
        alpha[0] = lp(0, 0);
        if s_len > 1 {
            alpha[1] = lp(0, 1);
        }
        for t in 1..frames {
            let (prev, cur) = alpha.split_at_mut(t * s_len);
            let prev = &prev[(t - 1) * s_len..];
            for s in 0..s_len {
                let mut a = prev[s];
                if s >= 1 {
                    a = log_add(a, prev[s - 1]);
                }
                if can_skip[s] {
                    a = log_add(a, prev[s - 2]);
                }
                cur[s] = if a == neg { neg } else { a + lp(t, s) };
            }
        }

        let mut beta = vec![neg; frames * s_len];
        let last = frames - 1;
        beta[last * s_len + s_len - 1] = lp(last, s_len - 1);
        if s_len > 1 {
            beta[last * s_len + s_len - 2] = lp(last, s_len - 2);
        }
        for t in (0..last).rev() {
            let (cur, next) = beta.split_at_mut((t + 1) * s_len);
            let cur = &mut cur[t * s_len..];
            for s in 0..s_len {
                let mut b = next[s];
                if s + 1 < s_len {
                    b = log_add(b, next[s + 1]);
                }
                if s + 2 < s_len && can_skip[s + 2] {
                    b = log_add(b, next[s + 2]);
                }
                cur[s] = if b == neg { neg } else { b + lp(t, s) };
            }
        }

        let end = last * s_len;
        let mut ll = alpha[end + s_len - 1];
        if s_len > 1 {
            ll = log_add(ll, alpha[end + s_len - 2]);
        }
        Ok(Self {
            extended,
            frames,
            alpha,
            beta,
            log_likelihood: ll,
        })
    }

    pub fn extended(&self) -> &[usize] {
        &self.extended
    }

    pub fn states(&self) -> usize {
        self.extended.len()
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn alpha(&self, t: usize, s: usize) -> f64 {
        self.alpha[t * self.states() + s]
    }

    pub fn beta(&self, t: usize, s: usize) -> f64 {
        self.beta[t * self.states() + s]
    }

    pub fn log_likelihood(&self) -> LogProb {
        LogProb(self.log_likelihood)
    }

    /// `ln Σ_s α(t,s)·β(t,s)/p(t,s)`: the total mass through frame `t`.
    /// Equal to the log-likelihood at every `t`.
    pub fn frame_total(&self, probs: &FrameLogProbs, t: usize) -> f64 {
        (0..self.states()).fold(f64::NEG_INFINITY, |acc, s| {
            let v = self.alpha(t, s) + self.beta(t, s) - probs.get(t, self.extended[s]);
            if v.is_nan() {
                acc
            } else {
                log_add(acc, v)
            }
        })
    }

    /// Posterior occupancy `γ(t, k)`: probability that a path consistent with
    /// the target emits class `k` at frame `t`. `T x K`, rows sum to one.
    pub fn occupancy(&self, probs: &FrameLogProbs) -> Result<Vec<f64>> {
        if self.log_likelihood == f64::NEG_INFINITY {
            return Err(Error::Infeasible(format!(
                "target of {} tokens cannot be aligned to {} frames",
                (self.states() - 1) / 2,
                self.frames
            )));
        }
        let k = probs.classes();
        let mut gamma = vec![f64::NEG_INFINITY; self.frames * k];
        for t in 0..self.frames {
            for (s, &label) in self.extended.iter().enumerate() {
                let v = self.alpha(t, s) + self.beta(t, s) - probs.get(t, label);
                if v > f64::NEG_INFINITY {
                    let slot = &mut gamma[t * k + label];
                    *slot = log_add(*slot, v);
                }
            }
        }
        for g in &mut gamma {
            *g = (*g - self.log_likelihood).exp();
        }
        Ok(gamma)
    }
}

/// `ln Σ_{A ∈ F⁻¹(y)} Π_t p(a_t)`. Infeasible targets give `-inf`.
pub fn ctc_log_likelihood(probs: &FrameLogProbs, y: &LabelSequence) -> Result<LogProb> {
    Ok(CtcLattice::new(probs, y)?.log_likelihood())
}

/// Gradient of `ln p(y)` with respect to the unnormalized logits whose
/// log-softmax is `probs`: `γ(t,k) − softmax(t,k)`.
pub fn ctc_grad(probs: &FrameLogProbs, y: &LabelSequence) -> Result<Tensor> {
    let lattice = CtcLattice::new(probs, y)?;
    let mut g = lattice.occupancy(probs)?;
    for (gi, lp) in g.iter_mut().zip(probs.data()) {
        *gi -= lp.exp();
    }
    Tensor::matrix(probs.frames(), probs.classes(), g)
}

/// Scores `y` by enumerating every path. Refuses more than
/// [`ENUMERATION_LIMIT`] paths.
pub fn brute_force_log_likelihood(probs: &FrameLogProbs, y: &LabelSequence) -> Result<LogProb> {
    let (frames, classes) = (probs.frames(), probs.classes());
    let count = (classes as f64).powi(frames as i32);
    if count > ENUMERATION_LIMIT {
        return Err(Error::TooLarge(format!(
            "{classes}^{frames} paths exceeds {ENUMERATION_LIMIT}"
        )));
    }
    let blank = probs.blank();
    let mut path = Path(vec![0; frames]);
    let mut total = f64::NEG_INFINITY;
    loop {
        if collapse(&path, blank) == *y {
            let lp: f64 = path.0.iter().enumerate().map(|(t, &a)| probs.get(t, a)).sum();
            total = log_add(total, lp);
        }
        // Odometer increment, last frame fastest.
        let mut t = frames;
        loop {
            if t == 0 {
                return Ok(LogProb(total));
            }
            t -= 1;
            path.0[t] += 1;
            if path.0[t] < classes {
                break;
            }
            path.0[t] = 0;
        }
    }
}

struct CtcOp {
    occupancy: Option<Vec<f64>>,
    message: String,
}

impl CustomOp for CtcOp {
    fn name(&self) -> &'static str {
        "ctc_log_likelihood"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        let occ = self
            .occupancy
            .as_ref()
            .ok_or_else(|| Error::Infeasible(self.message.clone()))?;
        let gy = grad.item();
        let data = occ.iter().map(|g| gy * g).collect();
        Ok(vec![Tensor::new(inputs[0].shape().to_vec(), data)?])
    }
}

/// Graph node for `ln p(y)` given a `T x K` node of frame log-probabilities.
///
/// The gradient with respect to the log-probabilities is the occupancy `γ`.
/// Composed with a log-softmax node this yields `γ − softmax` at the logits.
/// An infeasible target records `-inf` and makes backward fail.
pub fn ctc_log_likelihood_var(g: &mut Graph, log_probs: Var, y: &LabelSequence) -> Result<Var> {
    let t = g.value(log_probs);
    let (frames, classes) = t.dims2();
    let probs = FrameLogProbs::unchecked(frames, classes, t.data().to_vec())?;
    let lattice = CtcLattice::new(&probs, y)?;
    let ll = lattice.log_likelihood().value();
    let occupancy = lattice.occupancy(&probs).ok();
    let op = CtcOp {
        occupancy,
        message: format!("target of {} tokens is infeasible for {frames} frames", y.len()),
    };
    Ok(g.custom(&[log_probs], Tensor::scalar(ll), Box::new(op)))
}
