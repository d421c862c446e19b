//! Decoding whole datasets and scoring them against their transcripts.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::data::Dataset;
use crate::ctc::{FrameLogProbs, LabelSequence};
use crate::decoding::{beam_search_decode, best_path_decode, edit_distance, BeamConfig, DecodeResult, EditCounts, NGramLm};
use crate::error::{Error, Result};
use crate::models::Model;

#[derive(Clone, Debug, PartialEq)]
pub enum DecodeMode {
    BestPath,
    Beam(BeamConfig),
}

#[derive(Clone, Debug)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub lm: Option<NGramLm>,
    /// Width of the target-length buckets in the report.
    pub bucket_width: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            mode: DecodeMode::BestPath,
            lm: None,
            bucket_width: 3,
        }
    }
}

impl DecodeOptions {
    pub fn decode(&self, probs: &FrameLogProbs) -> Result<DecodeResult> {
        match &self.mode {
            DecodeMode::BestPath => Ok(best_path_decode(probs)),
            DecodeMode::Beam(cfg) => beam_search_decode(probs, cfg, self.lm.as_ref()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LengthBucket {
    /// Inclusive target-length range.
    pub min_len: usize,
    pub max_len: usize,
    pub utterances: usize,
    pub ref_tokens: usize,
    pub errors: EditCounts,
    pub error_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub utterances: usize,
    pub ref_tokens: usize,
    pub errors: EditCounts,
    /// Total edits over total reference tokens.
    pub error_rate: f64,
    pub buckets: Vec<LengthBucket>,
}

/// Scores hypotheses against references.
pub fn score(hyps: &[LabelSequence], refs: &[LabelSequence], bucket_width: usize) -> Result<EvalReport> {
    if refs.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Shape(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    let width = bucket_width.max(1);
    let mut errors = EditCounts::default();
    let mut ref_tokens = 0;
    let mut buckets: BTreeMap<usize, (usize, usize, EditCounts)> = BTreeMap::new();
    for (h, r) in hyps.iter().zip(refs) {
        let e = edit_distance(h, r);
        errors.add(e);
        ref_tokens += r.len();
        let b = buckets.entry(r.len() / width).or_default();
        b.0 += 1;
        b.1 += r.len();
        b.2.add(e);
    }
    Ok(EvalReport {
        utterances: refs.len(),
        ref_tokens,
        errors,
        error_rate: errors.total() as f64 / ref_tokens.max(1) as f64,
        buckets: buckets
            .into_iter()
            .map(|(k, (utterances, ref_tokens, errors))| LengthBucket {
                min_len: k * width,
                max_len: k * width + width - 1,
                utterances,
                ref_tokens,
                errors,
                error_rate: errors.total() as f64 / ref_tokens.max(1) as f64,
            })
            .collect(),
    })
}

/// Decodes precomputed posteriors and scores them.
pub fn evaluate_posteriors(
    posteriors: &[FrameLogProbs],
    refs: &[LabelSequence],
    opts: &DecodeOptions,
) -> Result<EvalReport> {
    let hyps = posteriors
        .par_iter()
        .map(|p| opts.decode(p).map(|r| r.tokens))
        .collect::<Result<Vec<_>>>()?;
    score(&hyps, refs, opts.bucket_width)
}

/// Decodes every utterance with the model in evaluation mode.
pub fn decode_dataset(model: &Model, data: &Dataset, opts: &DecodeOptions) -> Result<Vec<DecodeResult>> {
    check_compatible(model, data)?;
    data.samples
        .par_iter()
        .map(|s| opts.decode(&model.frame_log_probs(&s.x)?))
        .collect()
}

pub fn evaluate(model: &Model, data: &Dataset, opts: &DecodeOptions) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty dataset".into()));
    }
    let hyps: Vec<_> = decode_dataset(model, data, opts)?
        .into_iter()
        .map(|r| r.tokens)
        .collect();
    score(&hyps, &data.transcripts(), opts.bucket_width)
}

pub(crate) fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    if model.config().vocab != data.vocab {
        return Err(Error::Config("checkpoint and dataset vocabularies differ".into()));
    }
    if model.config().d_in != data.d_in {
        return Err(Error::Config(format!(
            "checkpoint expects {} input features, dataset has {}",
            model.config().d_in,
            data.d_in
        )));
    }
    Ok(())
}
