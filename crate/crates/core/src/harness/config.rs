//! `key = value` configuration files and the training configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later keys override
//! earlier ones, and command-line flags are applied on top in the same way.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::{LossKind, Variant};

pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleShape {
    Geometric,
    Linear,
}

impl FromStr for ScheduleShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(Self::Geometric),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

impl ScheduleShape {
    pub fn name(self) -> &'static str {
        match self {
            Self::Geometric => "geometric",
            Self::Linear => "linear",
        }
    }
}

/// Learning rate interpolated from `start` at step 0 to `end` at the final
/// step `steps − 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
    pub shape: ScheduleShape,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.steps <= 1 || step == 0 {
            return self.start;
        }
        if step >= self.steps - 1 {
            return self.end;
        }
        let frac = step as f64 / (self.steps - 1) as f64;
        match self.shape {
            ScheduleShape::Geometric => self.start * (self.end / self.start).powf(frac),
            ScheduleShape::Linear => self.start + (self.end - self.start) * frac,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub loss: LossKind,
    pub batch_size: usize,
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub schedule: ScheduleShape,
    pub kl_weight: f64,
    /// Steps over which the KL weight ramps linearly up from zero.
    pub kl_warmup: usize,
    /// Monte Carlo samples for the Markov regulariser.
    pub mc_samples: usize,
    pub seed: u64,
    pub d_z: usize,
    pub d_hidden: usize,
    pub gru_hidden: usize,
    /// Steps between metrics records; the final step is always recorded.
    pub eval_every: usize,
    /// Steps between checkpoints; the final step is always saved.
    pub checkpoint_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
    /// Fill the metrics wall-clock column; off keeps metrics files reproducible.
    pub record_wall_clock: bool,
    /// Stop after this many completed steps, checkpointing there, so a long
    /// run can be split across invocations with `resume`.
    pub halt_after: Option<usize>,
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            loss: variant.loss_kind(),
            batch_size: 16,
            steps: 1000,
            lr_start: 1e-3,
            lr_end: 5e-6,
            schedule: ScheduleShape::Geometric,
            kl_weight: 1.0,
            kl_warmup: 0,
            mc_samples: 1,
            seed: 0,
            d_z: 32,
            d_hidden: 64,
            gru_hidden: 16,
            eval_every: 100,
            checkpoint_every: usize::MAX,
            checkpoint: None,
            metrics: None,
            record_wall_clock: false,
            halt_after: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 {
            return fail("steps must be at least 1");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.checkpoint_every == 0 {
            return fail("batch_size, eval_every and checkpoint_every must be positive");
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_end <= self.lr_start) {
            return fail("need 0 < lr_end ≤ lr_start");
        }
        if !(self.kl_weight >= 0.0) {
            return fail("kl_weight must be ≥ 0");
        }
        if self.mc_samples == 0 {
            return fail("mc_samples must be at least 1");
        }
        if self.variant.loss_kind() != self.loss {
            return Err(Error::Config(format!(
                "{} is trained with the {} loss, not {}",
                self.variant,
                self.variant.loss_kind().name(),
                self.loss.name()
            )));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            start: self.lr_start,
            end: self.lr_end,
            steps: self.steps,
            shape: self.schedule,
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
        }
        match key {
            "variant" => {
                self.variant = value.parse()?;
                self.loss = self.variant.loss_kind();
            }
            "loss" => self.loss = value.parse()?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr_start" => self.lr_start = num(key, value)?,
            "lr_end" => self.lr_end = num(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "kl_weight" => self.kl_weight = num(key, value)?,
            "kl_warmup" => self.kl_warmup = num(key, value)?,
            "mc_samples" => self.mc_samples = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "d_z" => self.d_z = num(key, value)?,
            "d_hidden" => self.d_hidden = num(key, value)?,
            "gru_hidden" => self.gru_hidden = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "metrics" => self.metrics = Some(PathBuf::from(value)),
            "record_wall_clock" => self.record_wall_clock = num(key, value)?,
            "halt_after" => self.halt_after = Some(num(key, value)?),
            _ => return Err(Error::Config(format!("unknown training key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        pairs.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Every field in `key = value` form; `set` accepts each pair back.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("variant", self.variant.name().into());
        put("loss", self.loss.name().into());
        put("batch_size", self.batch_size.to_string());
        put("steps", self.steps.to_string());
        put("lr_start", self.lr_start.to_string());
        put("lr_end", self.lr_end.to_string());
        put("schedule", self.schedule.name().into());
        put("kl_weight", self.kl_weight.to_string());
        put("kl_warmup", self.kl_warmup.to_string());
        put("mc_samples", self.mc_samples.to_string());
        put("seed", self.seed.to_string());
        put("d_z", self.d_z.to_string());
        put("d_hidden", self.d_hidden.to_string());
        put("gru_hidden", self.gru_hidden.to_string());
        put("eval_every", self.eval_every.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        if let Some(p) = &self.checkpoint {
            put("checkpoint", p.display().to_string());
        }
        if let Some(p) = &self.metrics {
            put("metrics", p.display().to_string());
        }
        put("record_wall_clock", self.record_wall_clock.to_string());
        if let Some(n) = self.halt_after {
            put("halt_after", n.to_string());
        }
        m
    }
}
