//! Mini-batch Adam training with checkpointing, resumption and metrics.
//!
//! All randomness is drawn from counter-based streams keyed by the seed,
//! the step and the position in the batch, so a run can resume from
//! parameters, optimizer moments and the step number alone and still
//! reproduce an unbroken run bit for bit.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::TrainConfig;
use super::data::Dataset;
use super::eval::{check_compatible, evaluate, DecodeOptions};
use crate::autodiff::{ArchiveEntry, Gradients, Graph, ParamStore, TensorArchive};
use crate::error::{Error, Result};
use crate::losses::{KlSchedule, LossBreakdown};
use crate::models::{LatentMode, Model, ModelConfig};
use crate::numerics::Rng;

/// Stream tags; model initialisation uses stream 0 of the same seed.
const BATCH_STREAM: u64 = 1 << 62;
const ITEM_STREAM: u64 = 1 << 61;
const MAX_BATCH: usize = 1 << 16;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Gradients::zeros_like(store),
            v: Gradients::zeros_like(store),
        }
    }

    /// One descent step on `grads` (gradients of the quantity to minimize).
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(id).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            for ((p, mi), vi) in store.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                *p -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
    }

    fn entries(&self, store: &ParamStore) -> Vec<ArchiveEntry> {
        let mut out = Vec::new();
        for id in store.ids() {
            for (tag, g) in [("m", &self.m), ("v", &self.v)] {
                out.push(ArchiveEntry {
                    name: format!("optim.{tag}/{}", store.name(id)),
                    tensor: g.get(id).clone(),
                    trainable: false,
                });
            }
        }
        out
    }

    fn restore(store: &ParamStore, archive: &TensorArchive, t: u64) -> Result<Self> {
        let mut adam = Adam::new(store);
        adam.t = t;
        for id in store.ids() {
            for (tag, g) in [("m", &mut adam.m), ("v", &mut adam.v)] {
                let name = format!("optim.{tag}/{}", store.name(id));
                let e = archive
                    .entry(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
                if !e.tensor.same_shape(g.get(id)) {
                    return Err(Error::Format(format!("{name} has the wrong shape")));
                }
                *g.get_mut(id) = e.tensor.clone();
            }
        }
        Ok(adam)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub train: LossBreakdown,
    pub lr: f64,
    /// NaN when no dev set was given.
    pub dev_error_rate: f64,
    pub test_error_rate: f64,
    pub wall_clock_s: f64,
}

pub const METRICS_HEADER: &str =
    "step,prediction,regularization,total,kl_weight,lr,dev_error_rate,test_error_rate,wall_clock_s";

impl MetricsRecord {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.train.prediction_term,
            self.train.regularization_term,
            self.train.total,
            self.train.kl_weight,
            self.lr,
            self.dev_error_rate,
            self.test_error_rate,
            self.wall_clock_s
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("metrics row has {} fields, expected 9", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Format(format!("bad metrics value {:?}", f[i])))
        };
        Ok(Self {
            step: f[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad step {:?}", f[0])))?,
            train: LossBreakdown {
                prediction_term: num(1)?,
                regularization_term: num(2)?,
                total: num(3)?,
                kl_weight: num(4)?,
            },
            lr: num(5)?,
            dev_error_rate: num(6)?,
            test_error_rate: num(7)?,
            wall_clock_s: num(8)?,
        })
    }
}

/// Reads a metrics file, checking the header and that steps increase.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = BufReader::new(File::open(path)?);
    let mut lines = file.lines();
    let header = lines.next().transpose()?;
    if header.as_deref().map(str::trim) != Some(METRICS_HEADER) {
        return Err(Error::Format(format!("{} lacks the metrics header", path.display())));
    }
    let mut out: Vec<MetricsRecord> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = MetricsRecord::from_csv(&line)?;
        if out.last().is_some_and(|p| p.step >= r.step) {
            return Err(Error::Format("metrics steps must increase".into()));
        }
        out.push(r);
    }
    Ok(out)
}

#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub dev: Option<&'a Dataset>,
    pub test: Option<&'a Dataset>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub adam: Adam,
    /// Records produced by this invocation.
    pub records: Vec<MetricsRecord>,
    /// Last completed step.
    pub step: usize,
}

/// Keys that may differ between a checkpointed run and its resumption.
const RESUME_FREE_KEYS: [&str; 5] = ["checkpoint", "metrics", "record_wall_clock", "checkpoint_every", "halt_after"];

pub fn train(cfg: &TrainConfig, data: TrainData<'_>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = ModelConfig {
        d_in: data.train.d_in,
        d_z: cfg.d_z,
        d_hidden: cfg.d_hidden,
        gru_hidden: cfg.gru_hidden,
        vocab: data.train.vocab.clone(),
        variant: cfg.variant,
    };
    let model = Model::new(model_cfg, cfg.seed)?;
    let adam = Adam::new(model.params());
    if let Some(path) = &cfg.metrics {
        let mut f = File::create(path)?;
        writeln!(f, "{METRICS_HEADER}")?;
    }
    run(cfg, data, model, adam, 0)
}

/// Continues a run from `checkpoint`, dropping metrics rows written after it.
pub fn resume(cfg: &TrainConfig, data: TrainData<'_>, checkpoint: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let archive = TensorArchive::load(checkpoint)?;
    let mut saved = TrainConfig::new(cfg.variant);
    let pairs: Vec<(String, String)> = archive
        .header
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("train.").map(|k| (k.to_string(), v.clone())))
        .filter(|(k, _)| k != "step")
        .collect();
    saved.apply(&pairs)?;
    let strip = |c: &TrainConfig| {
        let mut p = c.to_pairs();
        for k in RESUME_FREE_KEYS {
            p.remove(k);
        }
        p
    };
    if strip(&saved) != strip(cfg) {
        return Err(Error::Config("checkpoint was written with a different training config".into()));
    }
    let step: usize = archive
        .header_value("train.step")?
        .parse()
        .map_err(|_| Error::Format("bad train.step".into()))?;
    let model = Model::from_archive(&archive)?;
    check_compatible(&model, data.train)?;
    let adam = Adam::restore(model.params(), &archive, step as u64)?;
    if let Some(path) = &cfg.metrics {
        truncate_metrics(path, step)?;
    }
    run(cfg, data, model, adam, step)
}

fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    let kept: Vec<MetricsRecord> = if path.exists() {
        read_metrics(path)?.into_iter().filter(|r| r.step <= step).collect()
    } else {
        Vec::new()
    };
    let mut f = File::create(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    for r in kept {
        writeln!(f, "{}", r.to_csv())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, model: &Model, adam: &Adam, step: usize) -> Result<()> {
    let mut archive = model.to_archive();
    for (k, v) in cfg.to_pairs() {
        archive.header.insert(format!("train.{k}"), v);
    }
    archive.header.insert("train.step".into(), step.to_string());
    archive.entries.extend(adam.entries(model.params()));
    archive.save(path)
}

struct ItemResult {
    grads: Gradients,
    loss: LossBreakdown,
}

fn item_gradient(model: &Model, cfg: &TrainConfig, data: &Dataset, idx: usize, stream: u64, kl_weight: f64) -> Result<ItemResult> {
    let sample = &data.samples[idx];
    let mut rng = Rng::with_stream(cfg.seed, stream);
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &sample.x, LatentMode::Sample(&mut rng))?;
    let obj = model.objective(&mut g, &fwd, &sample.y, kl_weight, &mut rng, cfg.mc_samples)?;
    g.backward(obj.total)?;
    Ok(ItemResult {
        grads: g.gradients(model.params()),
        loss: obj.breakdown(&g),
    })
}

fn run(cfg: &TrainConfig, data: TrainData<'_>, mut model: Model, mut adam: Adam, start: usize) -> Result<TrainOutcome> {
    if data.train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if cfg.batch_size >= MAX_BATCH {
        return Err(Error::Config(format!("batch_size must be below {MAX_BATCH}")));
    }
    check_compatible(&model, data.train)?;
    for d in [data.dev, data.test].into_iter().flatten() {
        check_compatible(&model, d)?;
    }
    let schedule = cfg.schedule();
    let kl = KlSchedule {
        weight: cfg.kl_weight,
        warmup_steps: cfg.kl_warmup,
    };
    let mut metrics = match &cfg.metrics {
        Some(p) => Some(OpenOptions::new().append(true).open(p)?),
        None => None,
    };
    let clock = Instant::now();
    let mut records = Vec::new();
    let eval_opts = DecodeOptions::default();

    let stop = cfg.halt_after.map_or(cfg.steps, |h| h.clamp(start, cfg.steps));
    for step in start..stop {
        let mut pick = Rng::with_stream(cfg.seed, BATCH_STREAM + step as u64);
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| pick.below(data.train.len())).collect();
        let kl_weight = kl.at(step);
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(i, &idx)| {
                let stream = ITEM_STREAM | ((step as u64) << 16) | i as u64;
                item_gradient(&model, cfg, data.train, idx, stream, kl_weight)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut grads = Gradients::zeros_like(model.params());
        for r in &results {
            grads.add_assign(&r.grads);
        }
        // Maximize the mean objective by descending on its negation.
        grads.scale(-1.0 / cfg.batch_size as f64);
        let losses: Vec<LossBreakdown> = results.into_iter().map(|r| r.loss).collect();
        if !grads.is_finite() || losses.iter().any(|l| !l.total.is_finite()) {
            return Err(non_finite(cfg, data.train, step, &batch, &losses));
        }
        let lr = schedule.at(step);
        adam.step(model.params_mut(), &grads, lr);

        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let rate = |d: Option<&Dataset>| -> Result<f64> {
                d.map_or(Ok(f64::NAN), |d| Ok(evaluate(&model, d, &eval_opts)?.error_rate))
            };
            let record = MetricsRecord {
                step: done,
                train: LossBreakdown::mean(&losses),
                lr,
                dev_error_rate: rate(data.dev)?,
                test_error_rate: rate(data.test)?,
                wall_clock_s: if cfg.record_wall_clock { clock.elapsed().as_secs_f64() } else { 0.0 },
            };
            if let Some(f) = metrics.as_mut() {
                writeln!(f, "{}", record.to_csv())?;
                f.flush()?;
            }
            records.push(record);
        }
        if let Some(path) = &cfg.checkpoint {
            if done % cfg.checkpoint_every == 0 || done == stop {
                save_checkpoint(path, cfg, &model, &adam, done)?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        adam,
        records,
        step: stop,
    })
}

/// Describes the offending batch and, when a checkpoint path is set, writes
/// the same text next to it.
fn non_finite(cfg: &TrainConfig, data: &Dataset, step: usize, batch: &[usize], losses: &[LossBreakdown]) -> Error {
    let mut msg = format!("non-finite loss or gradient at step {step}\nitem,sample,frames,tokens,prediction,regularization,total\n");
    for (i, (&idx, l)) in batch.iter().zip(losses).enumerate() {
        let s = &data.samples[idx];
        msg.push_str(&format!(
            "{i},{idx},{},{},{},{},{}\n",
            s.frames(),
            s.y.len(),
            l.prediction_term,
            l.regularization_term,
            l.total
        ));
    }
    if let Some(path) = &cfg.checkpoint {
        let mut dump = PathBuf::from(path);
        dump.set_extension("nonfinite.txt");
        if std::fs::write(&dump, &msg).is_ok() {
            msg.push_str(&format!("batch dump written to {}", dump.display()));
        }
    }
    Error::NonFinite(msg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn adam_matches_hand_computation() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(1.0), true).unwrap();
        let mut adam = Adam::new(&store);
        let mut grads = Gradients::zeros_like(&store);
        let lr = 0.1;
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for (t, g) in [0.5f64, -0.25, 2.0].into_iter().enumerate() {
            grads.get_mut(id).data_mut()[0] = g;
            adam.step(&mut store, &grads, lr);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let k = (t + 1) as i32;
            w -= lr * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
            assert!((store.get(id).item() - w).abs() <= 1e-12);
        }
        // The first step moves by lr·sign(g) up to ε.
        let mut s2 = ParamStore::new();
        let j = s2.insert("w", Tensor::scalar(0.0), true).unwrap();
        let mut a2 = Adam::new(&s2);
        let mut g2 = Gradients::zeros_like(&s2);
        g2.get_mut(j).data_mut()[0] = 3.0;
        a2.step(&mut s2, &g2, 0.01);
        assert!((s2.get(j).item() + 0.01).abs() < 1e-10);
    }

    #[test]
    fn metrics_rows_round_trip() {
        let r = MetricsRecord {
            step: 3,
            train: LossBreakdown {
                prediction_term: -1.25,
                regularization_term: 0.1,
                total: -1.35,
                kl_weight: 1.0,
            },
            lr: 1e-3,
            dev_error_rate: f64::NAN,
            test_error_rate: 0.5,
            wall_clock_s: 0.0,
        };
        let back = MetricsRecord::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back.step, 3);
        assert!(back.dev_error_rate.is_nan());
        assert_eq!(back.train, r.train);
        assert!(MetricsRecord::from_csv("1,2,3").is_err());
    }
}
