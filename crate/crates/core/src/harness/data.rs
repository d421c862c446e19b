//! Synthetic order-preserving sequence tasks and the dataset file format.
//!
//! Each token owns a fixed prototype vector, as does silence. An utterance
//! draws a token sequence, gives each token a segment of `min_duration ..=
//! max_duration` frames, optionally separates tokens with short silence
//! segments (always when a token repeats) and emits
//! `prototype + speaker offset + noise` per frame. Tokens appear in segment
//! order, so every pair `(X, y)` is order-preserving by construction.
//!
//! Dataset file layout, little-endian:
//!
//! ```text
//! magic       8 bytes  "VCTCDATA"
//! version     u32      1
//! d_in        u32
//! vocab_len   u32      byte length of the space-separated symbol list
//! vocab       UTF-8
//! count       u64      number of records
//! record * count:
//!   frames    u32
//!   tokens    u32
//!   x         f64 * frames * d_in, row-major
//!   y         u32 * tokens
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::archive::{read_bytes, read_u32, write_u32};
use crate::autodiff::Tensor;
use crate::ctc::{LabelSequence, Vocab};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const DATASET_MAGIC: &[u8; 8] = b"VCTCDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub d_in: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_length: usize,
    pub max_length: usize,
    /// Longest silence segment; zero disables silences and repeated tokens.
    pub max_silence: usize,
    /// Chance of an optional silence between two different tokens.
    pub silence_prob: f64,
    pub noise_std: f64,
    /// Scale of the per-utterance speaker offset.
    pub speaker_std: f64,
    pub speakers: usize,
    /// Selects the speaker pool; splits with different values share no speakers.
    pub speaker_seed: u64,
    pub max_frames: usize,
    /// Selects the prototypes; splits of one task must share it.
    pub task_seed: u64,
    /// Selects the utterances.
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 10,
            d_in: 32,
            min_duration: 2,
            max_duration: 6,
            min_length: 1,
            max_length: 8,
            max_silence: 3,
            silence_prob: 0.3,
            noise_std: 1.0,
            speaker_std: 0.5,
            speakers: 20,
            speaker_seed: 0,
            max_frames: 96,
            task_seed: 0,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size == 0 || self.d_in == 0 {
            return fail("vocab_size and d_in must be positive");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return fail("need 1 ≤ min_duration ≤ max_duration");
        }
        if self.min_length > self.max_length || self.max_length == 0 {
            return fail("need min_length ≤ max_length and max_length ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.silence_prob) {
            return fail("silence_prob must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.speaker_std >= 0.0) {
            return fail("noise and speaker scales must be ≥ 0");
        }
        if self.speakers == 0 {
            return fail("need at least one speaker");
        }
        if self.max_length * self.min_duration > self.max_frames {
            return Err(Error::Config(format!(
                "{} tokens of at least {} frames cannot fit in {} frames",
                self.max_length, self.min_duration, self.max_frames
            )));
        }
        let forced_repeats = self.vocab_size == 1 && self.max_length > 1;
        if forced_repeats
            && (self.max_silence == 0
                || self.max_length * self.min_duration + self.max_length - 1 > self.max_frames)
        {
            return fail("a one-symbol task needs room for a silence between repeats");
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "vocab_size" => self.vocab_size = num(key, value)?,
            "d_in" => self.d_in = num(key, value)?,
            "min_duration" => self.min_duration = num(key, value)?,
            "max_duration" => self.max_duration = num(key, value)?,
            "min_length" => self.min_length = num(key, value)?,
            "max_length" => self.max_length = num(key, value)?,
            "max_silence" => self.max_silence = num(key, value)?,
            "silence_prob" => self.silence_prob = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "speaker_std" => self.speaker_std = num(key, value)?,
            "speakers" => self.speakers = num(key, value)?,
            "speaker_seed" => self.speaker_seed = num(key, value)?,
            "max_frames" => self.max_frames = num(key, value)?,
            "task_seed" => self.task_seed = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown task key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.vocab_size)
    }

    /// Token prototypes followed by the silence prototype.
    fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = Rng::with_stream(self.task_seed, 0);
        (0..=self.vocab_size)
            .map(|_| (0..self.d_in).map(|_| rng.normal()).collect())
            .collect()
    }

    fn speaker_offsets(&self) -> Vec<Vec<f64>> {
        let mut rng = Rng::with_stream(self.task_seed, 1 + self.speaker_seed);
        (0..self.speakers)
            .map(|_| (0..self.d_in).map(|_| self.speaker_std * rng.normal()).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `T x d_in` frame matrix.
    pub x: Tensor,
    pub y: LabelSequence,
}

impl Sample {
    pub fn frames(&self) -> usize {
        self.x.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub d_in: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn transcripts(&self) -> Vec<LabelSequence> {
        self.samples.iter().map(|s| s.y.clone()).collect()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        write_u32(w, self.d_in)?;
        let vocab = self.vocab.symbols().join(" ");
        write_u32(w, vocab.len())?;
        w.write_all(vocab.as_bytes())?;
        w.write_all(&(self.samples.len() as u64).to_le_bytes())?;
        for s in &self.samples {
            write_u32(w, s.frames())?;
            write_u32(w, s.y.len())?;
            let mut buf = Vec::with_capacity(s.x.len() * 8 + s.y.len() * 4);
            for v in s.x.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for &t in s.y.tokens() {
                buf.extend_from_slice(&(t as u32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let magic = read_bytes(r, 8)?;
        if magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let d_in = read_u32(r)? as usize;
        let vocab_len = read_u32(r)? as usize;
        let vocab = String::from_utf8(read_bytes(r, vocab_len)?)
            .map_err(|_| Error::Format("vocabulary is not UTF-8".into()))?;
        let vocab = Vocab::new(vocab.split_whitespace().map(str::to_string).collect())?;
        let count = u64::from_le_bytes(read_bytes(r, 8)?.try_into().unwrap());
        let mut samples = Vec::new();
        for _ in 0..count {
            let frames = read_u32(r)? as usize;
            let tokens = read_u32(r)? as usize;
            let raw = read_bytes(r, frames * d_in * 8)?;
            let x = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let raw = read_bytes(r, tokens * 4)?;
            let y = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
                .collect();
            samples.push(Sample {
                x: Tensor::matrix(frames, d_in, x)?,
                y: LabelSequence::validated(y, vocab.len())?,
            });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        Ok(Self {
            vocab,
            d_in,
            samples,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Draws `n` utterances; deterministic in the spec's seeds.
pub fn generate_dataset(spec: &SyntheticTaskSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    let protos = spec.prototypes();
    let speakers = spec.speaker_offsets();
    let silence = spec.vocab_size;
    let samples = (0..n)
        .map(|i| {
            let mut rng = Rng::with_stream(spec.seed, i as u64);
            let (labels, tokens) = draw_layout(spec, &mut rng);
            let offset = &speakers[rng.below(spec.speakers)];
            let mut x = Vec::with_capacity(labels.len() * spec.d_in);
            for &k in &labels {
                for (d, p) in protos[k].iter().enumerate() {
                    x.push(p + offset[d] + spec.noise_std * rng.normal());
                }
            }
            debug_assert!(labels.iter().all(|&k| k <= silence));
            Sample {
                x: Tensor::matrix(labels.len(), spec.d_in, x).expect("layout shape"),
                y: LabelSequence(tokens),
            }
        })
        .collect();
    Ok(Dataset {
        vocab: spec.vocab(),
        d_in: spec.d_in,
        samples,
    })
}

/// Per-frame segment labels (silence = `vocab_size`) and the token sequence.
fn draw_layout(spec: &SyntheticTaskSpec, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let len = rng.between(spec.min_length, spec.max_length);
    let mut tokens: Vec<usize> = (0..len).map(|_| rng.below(spec.vocab_size)).collect();
    if spec.max_silence == 0 {
        for i in 1..len {
            if tokens[i] == tokens[i - 1] {
                tokens[i] = (tokens[i] + 1) % spec.vocab_size;
            }
        }
    }
    let mut durations: Vec<usize> = (0..len)
        .map(|_| rng.between(spec.min_duration, spec.max_duration))
        .collect();
    // Silence before each token and after the last one.
    let mut silences: Vec<usize> = (0..=len)
        .map(|i| {
            let forced = i > 0 && i < len && tokens[i] == tokens[i - 1];
            if spec.max_silence == 0 || !(forced || rng.bernoulli(spec.silence_prob)) {
                0
            } else {
                rng.between(1, spec.max_silence)
            }
        })
        .collect();

    // Shrink optional silences, then durations, then break repeats.
    let total = |d: &[usize], s: &[usize]| d.iter().sum::<usize>() + s.iter().sum::<usize>();
    let forced = |tokens: &[usize], i: usize| i > 0 && i < tokens.len() && tokens[i] == tokens[i - 1];
    while total(&durations, &silences) > spec.max_frames {
        if let Some(i) = (0..=len).find(|&i| silences[i] > usize::from(forced(&tokens, i))) {
            silences[i] -= 1;
        } else if let Some(i) = (0..len).find(|&i| durations[i] > spec.min_duration) {
            durations[i] -= 1;
        } else if spec.vocab_size > 1 && (1..len).any(|i| forced(&tokens, i)) {
            for i in 1..len {
                if tokens[i] == tokens[i - 1] {
                    tokens[i] = (tokens[i] + 1) % spec.vocab_size;
                }
            }
            silences.fill(0);
        } else {
            unreachable!("validated specs always fit");
        }
    }

    let silence = spec.vocab_size;
    let mut labels = Vec::with_capacity(total(&durations, &silences));
    for i in 0..=len {
        labels.extend(std::iter::repeat(silence).take(silences[i]));
        if i < len {
            labels.extend(std::iter::repeat(tokens[i]).take(durations[i]));
        }
    }
    if labels.is_empty() {
        // An empty target still needs one frame of input.
        labels.push(silence);
    }
    (labels, tokens)
}
