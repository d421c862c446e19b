//! Turning frame posteriors back into label sequences.

mod edit;
mod lm;

pub use edit::{edit_distance, EditCounts};
pub use lm::{NGramLm, LM_NORMALIZATION_TOL};

use std::collections::BTreeMap;

use crate::ctc::{ctc_log_likelihood, FrameLogProbs, LabelSequence};
use crate::error::{Error, Result};
use crate::numerics::{log_add, LogProb};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub tokens: LabelSequence,
    pub score: LogProb,
    /// Frame at which each token was first emitted.
    pub emission_frames: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    /// Caps the LM history at `lm_order − 1` tokens; `None` uses the LM's own order.
    pub lm_order: Option<usize>,
    pub lm_weight: f64,
    pub insertion_bonus: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 30,
            lm_order: None,
            lm_weight: 0.5,
            insertion_bonus: 0.0,
        }
    }
}

impl BeamConfig {
    pub fn with_width(beam_width: usize) -> Self {
        Self {
            beam_width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(self.lm_weight >= 0.0) || !self.insertion_bonus.is_finite() {
            return Err(Error::Config("lm weight must be ≥ 0 and the bonus finite".into()));
        }
        if self.lm_order == Some(0) {
            return Err(Error::Config("lm order must be at least 1".into()));
        }
        Ok(())
    }
}

/// Index of the row maximum; ties go to the lowest index.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Greedy decoding: per-frame argmax, then collapse.
pub fn best_path_decode(probs: &FrameLogProbs) -> DecodeResult {
    let blank = probs.blank();
    let mut tokens = Vec::new();
    let mut frames = Vec::new();
    let mut score = 0.0;
    let mut prev = None;
    for t in 0..probs.frames() {
        let row = probs.row(t);
        let k = argmax(row);
        score += row[k];
        if Some(k) != prev && k != blank {
            tokens.push(k);
            frames.push(t);
        }
        prev = Some(k);
    }
    DecodeResult {
        tokens: LabelSequence(tokens),
        score: LogProb(score),
        emission_frames: frames,
    }
}

#[derive(Clone, Debug)]
struct Beam {
    blank: f64,
    non_blank: f64,
    lm: f64,
    frames: Vec<usize>,
}

impl Beam {
    fn mass(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }

    fn score(&self) -> f64 {
        self.mass() + self.lm
    }
}

/// Prefix beam search over merged blank / non-blank prefix mass.
///
/// With an LM, every token extension adds `lm_weight · ln P(token | history)
/// + insertion_bonus`, and the final ranking adds `lm_weight · ln P(</s> |
/// prefix)`. Prefixes surviving the last frame are rescored with their exact
/// CTC log-probability over all alignments, and the returned score is that
/// plus the accumulated LM terms. Ties go to the lexicographically smallest
/// prefix.
pub fn beam_search_decode(
    probs: &FrameLogProbs,
    cfg: &BeamConfig,
    lm: Option<&NGramLm>,
) -> Result<DecodeResult> {
    cfg.validate()?;
    if let (Some(lm), Some(order)) = (lm, cfg.lm_order) {
        if order > lm.order() {
            return Err(Error::Config(format!(
                "lm order {order} exceeds the model's order {}",
                lm.order()
            )));
        }
    }
    if let Some(lm) = lm {
        if lm.num_symbols() + 1 != probs.classes() {
            return Err(Error::Config("lm vocabulary does not match the output layer".into()));
        }
    }
    let history = |prefix: &[usize]| -> usize {
        let order = cfg.lm_order.or(lm.map(NGramLm::order)).unwrap_or(1);
        prefix.len().min(order - 1)
    };
    let fuse = |prefix: &[usize], token: usize| -> f64 {
        match lm {
            Some(lm) => {
                let ctx = &prefix[prefix.len() - history(prefix)..];
                let bos = ctx.len() == prefix.len();
                cfg.lm_weight * lm.log_prob(ctx, bos, Some(token)) + cfg.insertion_bonus
            }
            None => 0.0,
        }
    };

    let blank = probs.blank();
    let neg = f64::NEG_INFINITY;
    let mut beams: BTreeMap<Vec<usize>, Beam> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        Beam {
            blank: 0.0,
            non_blank: neg,
            lm: 0.0,
            frames: Vec::new(),
        },
    );
    for t in 0..probs.frames() {
        let row = probs.row(t);
        let mut next: BTreeMap<Vec<usize>, Beam> = BTreeMap::new();
        for (prefix, beam) in &beams {
            let mass = beam.mass();
            let last = prefix.last().copied();
            // Staying on the same prefix keeps its earlier emission frames.
            let stay = next.entry(prefix.clone()).or_insert_with(|| Beam {
                blank: neg,
                non_blank: neg,
                lm: beam.lm,
                frames: beam.frames.clone(),
            });
            stay.frames.clone_from(&beam.frames);
            stay.blank = log_add(stay.blank, mass + row[blank]);
            if let Some(c) = last {
                stay.non_blank = log_add(stay.non_blank, beam.non_blank + row[c]);
            }
            for (c, &lp) in row.iter().enumerate().take(blank) {
                let from = if Some(c) == last { beam.blank } else { mass };
                if from == neg || lp == neg {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(c);
                let entry = next.entry(extended).or_insert_with(|| {
                    let mut frames = beam.frames.clone();
                    frames.push(t);
                    Beam {
                        blank: neg,
                        non_blank: neg,
                        lm: beam.lm + fuse(prefix, c),
                        frames,
                    }
                });
                entry.non_blank = log_add(entry.non_blank, from + lp);
            }
        }
        beams = prune(next, cfg.beam_width, |_, b| b.score());
    }

    // Survivors are rescored over the full lattice, so a hypothesis' score
    // does not depend on which of its alignments the pruning happened to keep.
    let mut finals = BTreeMap::new();
    for (prefix, mut beam) in beams {
        if let Some(lm) = lm {
            let ctx = &prefix[prefix.len() - history(&prefix)..];
            let bos = ctx.len() == prefix.len();
            beam.lm += cfg.lm_weight * lm.log_prob(ctx, bos, None);
        }
        beam.blank = ctc_log_likelihood(probs, &LabelSequence(prefix.clone()))?.value();
        beam.non_blank = neg;
        finals.insert(prefix, beam);
    }
    let (prefix, beam) = prune(finals, 1, |_, b| b.score())
        .into_iter()
        .next()
        .expect("the beam set is never empty");
    Ok(DecodeResult {
        score: LogProb(beam.score()),
        tokens: LabelSequence(prefix),
        emission_frames: beam.frames,
    })
}

/// Keeps the `width` best entries; equal scores keep the smaller key.
fn prune(
    all: BTreeMap<Vec<usize>, Beam>,
    width: usize,
    score: impl Fn(&[usize], &Beam) -> f64,
) -> BTreeMap<Vec<usize>, Beam> {
    if all.len() <= width {
        return all;
    }
    let mut ranked: Vec<(f64, Vec<usize>, Beam)> =
        all.into_iter().map(|(k, b)| (score(&k, &b), k, b)).collect();
    // Stable sort on score alone keeps key order among ties.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    ranked.truncate(width);
    ranked.into_iter().map(|(_, k, b)| (k, b)).collect()
}
