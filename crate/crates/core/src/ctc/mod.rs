//! Connectionist temporal classification.
//!
//! Frame `t` of a [`FrameLogProbs`] table holds `ln p(a_t = k)` for every
//! symbol `k` plus the blank. A target [`LabelSequence`] is scored by summing
//! over all frame-level [`Path`]s that [`collapse`] to it, using the
//! blank-interleaved lattice in [`CtcLattice`].

mod lattice;

pub use lattice::{
    brute_force_log_likelihood, ctc_grad, ctc_log_likelihood, ctc_log_likelihood_var, CtcLattice,
    ENUMERATION_LIMIT,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Ordered symbol inventory. The blank takes the index after the last symbol.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<String>,
}

impl Vocab {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid symbol {s:?}")));
            }
            if !seen.insert(s) {
                return Err(Error::Config(format!("duplicate symbol {s}")));
            }
        }
        Ok(Self { symbols })
    }

    /// Symbols named `t0`, `t1`, ... for synthetic tasks.
    pub fn synthetic(size: usize) -> Self {
        Self {
            symbols: (0..size).map(|i| format!("t{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn blank_index(&self) -> usize {
        self.symbols.len()
    }

    /// Symbols plus the blank.
    pub fn num_classes(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbol(&self, idx: usize) -> Option<&str> {
        self.symbols.get(idx).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, s: &str) -> Option<usize> {
        self.symbols.iter().position(|x| x == s)
    }
}

/// Target tokens, blank excluded.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    /// Checks every token against a vocabulary of `num_symbols` non-blank symbols.
    pub fn validated(tokens: Vec<usize>, num_symbols: usize) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= num_symbols) {
            return Err(Error::Contract(format!(
                "token {bad} is not a symbol of a {num_symbols}-symbol vocabulary"
            )));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Fewest frames any path needs: one per token plus a blank between repeats.
    pub fn min_frames(&self) -> usize {
        let repeats = self.0.windows(2).filter(|w| w[0] == w[1]).count();
        self.0.len() + repeats
    }
}

/// One label per frame over symbols plus blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Path(pub Vec<usize>);

/// Merges adjacent duplicates, then drops blanks.
pub fn collapse(path: &Path, blank: usize) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in &path.0 {
        if Some(a) != prev && a != blank {
            out.push(a);
        }
        prev = Some(a);
    }
    LabelSequence(out)
}

/// `T x K` table of per-frame log-probabilities; the blank is the last column.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameLogProbs {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

pub const ROW_NORMALIZATION_TOL: f64 = 1e-9;

impl FrameLogProbs {
    /// Wraps log-probabilities, checking each row sums to one.
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        let t = Self::unchecked(frames, classes, data)?;
        for r in 0..frames {
            let lse = crate::numerics::log_sum_exp_nonempty(t.row(r));
            if !(lse.abs() <= ROW_NORMALIZATION_TOL) {
                return Err(Error::Contract(format!(
                    "frame {r} is not normalized (log-sum {lse})"
                )));
            }
        }
        Ok(t)
    }

    pub(crate) fn unchecked(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Contract("need at least one symbol and the blank".into()));
        }
        if data.len() != frames * classes {
            return Err(Error::Shape(format!(
                "{frames} x {classes} table needs {} values, got {}",
                frames * classes,
                data.len()
            )));
        }
        Ok(Self {
            frames,
            classes,
            data,
        })
    }

    /// Row-wise log-softmax of unnormalized scores.
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        let (frames, classes) = logits.dims2();
        let mut data = logits.data().to_vec();
        for row in data.chunks_mut(classes.max(1)) {
            let lse = crate::numerics::log_sum_exp_nonempty(row);
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        Self::unchecked(frames, classes, data)
    }

    /// From rows of linear probabilities.
    pub fn from_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * classes);
        for r in rows {
            if r.len() != classes {
                return Err(Error::Shape("ragged probability rows".into()));
            }
            data.extend(r.iter().map(|p| p.ln()));
        }
        Self::new(rows.len(), classes, data)
    }

    /// Wraps a log-probability tensor (e.g. a model's output) after checking it.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (frames, classes) = t.dims2();
        Self::new(frames, classes, t.data().to_vec())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn blank(&self) -> usize {
        self.classes - 1
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.classes + k]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.frames, self.classes, self.data.clone()).expect("sized")
    }
}
