//! Shared fixtures for the criterion benches.

use vctc_core::decoding::NGramLm;
use vctc_core::{FrameLogProbs, LabelSequence, ModelConfig, Rng, Tensor, Variant, Vocab};

/// Log-softmax of standard normal logits scaled by 3, which gives peaky rows
/// like a trained model's.
pub fn random_log_probs(seed: u64, frames: usize, classes: usize) -> FrameLogProbs {
    let mut rng = Rng::new(seed);
    let data = (0..frames * classes).map(|_| 3.0 * rng.normal()).collect();
    FrameLogProbs::from_logits(&Tensor::matrix(frames, classes, data).unwrap()).unwrap()
}

pub fn random_labels(seed: u64, symbols: usize, len: usize) -> LabelSequence {
    let mut rng = Rng::new(seed);
    LabelSequence::new((0..len).map(|_| (rng.uniform() * symbols as f64) as usize % symbols).collect())
}

pub fn random_input(seed: u64, frames: usize, dim: usize) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::matrix(frames, dim, (0..frames * dim).map(|_| rng.normal()).collect()).unwrap()
}

pub fn model_config(variant: Variant, d_in: usize, symbols: usize) -> ModelConfig {
    ModelConfig {
        d_in,
        d_z: 32,
        d_hidden: 64,
        gru_hidden: 16,
        vocab: Vocab::synthetic(symbols),
        variant,
    }
}

/// A trigram LM fitted to random sentences.
pub fn random_lm(seed: u64, symbols: usize) -> NGramLm {
    let corpus: Vec<_> = (0..200).map(|i| random_labels(seed.wrapping_add(i), symbols, 2 + i as usize % 6)).collect();
    NGramLm::train(&Vocab::synthetic(symbols), 3, &corpus).unwrap()
}
