//! The five architectures.
//!
//! | variant       | posterior `q(z_t|X)` | prior                               | objective   |
//! |---------------|----------------------|-------------------------------------|-------------|
//! | `linear-ctc`  | none                 | none                                | CTC         |
//! | `non-reg-ctc` | FC from `x_t`        | FC from `x_t` (unused by the loss)  | CTC         |
//! | `ci`          | FC from `x_t`        | FC from `x_t`                       | CI loss     |
//! | `md`          | FC from `x_t`        | FC from `[x_t, μ̌_{t−1}, log σ̌²_{t−1}]` | Markov loss |
//! | `ma`          | FC from `x_t`        | two bidirectional GRUs over `X`     | Markov loss |
//!
//! Latent models sample `z_t` from `q`, project it to `d_hidden`, concatenate
//! the projection with `x_t` and map the result linearly to frame logits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{
    bigru_forward, ArchiveEntry, BiGruLayer, Graph, LinearLayer, ParamId, ParamStore,
    Tensor, TensorArchive, Var,
};
use crate::ctc::{FrameLogProbs, LabelSequence, Vocab};
use crate::error::{Error, Result};
use crate::losses::{ci_objective, ctc_objective, markov_objective, LossVars, PriorStep};
use crate::numerics::Rng;
use crate::variational::{reparameterize_var, sample_noise, DiagGaussian, GaussianVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    LinearCtc,
    NonRegCtc,
    Ci,
    Md,
    Ma,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::LinearCtc,
        Variant::NonRegCtc,
        Variant::Ci,
        Variant::Md,
        Variant::Ma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::LinearCtc => "linear-ctc",
            Variant::NonRegCtc => "non-reg-ctc",
            Variant::Ci => "ci",
            Variant::Md => "md",
            Variant::Ma => "ma",
        }
    }

    /// The objective this variant trains with.
    pub fn loss_kind(self) -> LossKind {
        match self {
            Variant::LinearCtc | Variant::NonRegCtc => LossKind::Ctc,
            Variant::Ci => LossKind::ConditionalIndependence,
            Variant::Md | Variant::Ma => LossKind::Markov,
        }
    }

    pub fn has_latent(self) -> bool {
        self != Variant::LinearCtc
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    Ctc,
    ConditionalIndependence,
    Markov,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ctc => "ctc",
            LossKind::ConditionalIndependence => "ci",
            LossKind::Markov => "markov",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ctc" => Ok(LossKind::Ctc),
            "ci" => Ok(LossKind::ConditionalIndependence),
            "markov" => Ok(LossKind::Markov),
            _ => Err(Error::Config(format!("unknown loss {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_z: usize,
    pub d_hidden: usize,
    /// Per-direction GRU width for `ma`; `2·gru_hidden ≠ d_z` adds a projection.
    pub gru_hidden: usize,
    pub vocab: Vocab,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(variant: Variant, vocab: Vocab) -> Self {
        Self {
            d_in: 32,
            d_z: 32,
            d_hidden: 64,
            gru_hidden: 16,
            vocab,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_z == 0 || self.d_hidden == 0 || self.gru_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.vocab.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        Ok(())
    }

    /// Checks that `loss` is the objective this variant is trained with.
    pub fn check_loss(&self, loss: LossKind) -> Result<()> {
        if self.variant.loss_kind() != loss {
            return Err(Error::Config(format!(
                "{} is trained with the {} loss, not {}",
                self.variant,
                self.variant.loss_kind().name(),
                loss.name()
            )));
        }
        Ok(())
    }

    fn to_header(&self) -> BTreeMap<String, String> {
        let mut h = BTreeMap::new();
        h.insert("model.variant".into(), self.variant.name().into());
        h.insert("model.d_in".into(), self.d_in.to_string());
        h.insert("model.d_z".into(), self.d_z.to_string());
        h.insert("model.d_hidden".into(), self.d_hidden.to_string());
        h.insert("model.gru_hidden".into(), self.gru_hidden.to_string());
        h.insert("model.vocab".into(), self.vocab.symbols().join(" "));
        h
    }

    fn from_header(a: &TensorArchive) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            a.header_value(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad {k}")))
        };
        let symbols = a
            .header_value("model.vocab")?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        Ok(Self {
            d_in: num("model.d_in")?,
            d_z: num("model.d_z")?,
            d_hidden: num("model.d_hidden")?,
            gru_hidden: num("model.gru_hidden")?,
            vocab: Vocab::new(symbols)?,
            variant: a.header_value("model.variant")?.parse()?,
        })
    }
}

/// How latent models pick `z` in a forward pass.
pub enum LatentMode<'a> {
    /// Reparameterised sample from `q`.
    Sample(&'a mut Rng),
    /// `z = μ`; deterministic, used for evaluation and decoding.
    Mean,
}

#[derive(Clone, Debug)]
enum PriorNet {
    Independent {
        mu: LinearLayer,
        log_var: LinearLayer,
    },
    Chain {
        mu: LinearLayer,
        log_var: LinearLayer,
        init_mu: ParamId,
        init_log_var: ParamId,
    },
    Recurrent {
        mu: BiGruLayer,
        log_var: BiGruLayer,
        proj: Option<(LinearLayer, LinearLayer)>,
    },
}

#[derive(Clone, Debug)]
struct LatentLayers {
    q_mu: LinearLayer,
    q_log_var: LinearLayer,
    prior: PriorNet,
    z_proj: LinearLayer,
}

/// Graph nodes of a latent model's forward pass. All are `T x d_z`.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub q: GaussianVars,
    pub prior: GaussianVars,
    pub z: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub input: Var,
    pub logits: Var,
    pub log_probs: Var,
    pub latent: Option<LatentVars>,
}

/// Forward pass results as plain values.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub frame_log_probs: FrameLogProbs,
    pub q_seq: Option<Vec<DiagGaussian>>,
    pub prior_seq: Option<Vec<DiagGaussian>>,
    pub z_seq: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    head: LinearLayer,
    latent: Option<LatentLayers>,
}

impl Model {
    /// Fresh parameters: uniform `±1/√fan_in` weights, zero biases, zero
    /// initial prior state.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let classes = cfg.vocab.num_classes();
        let (d_in, d_z, d_h) = (cfg.d_in, cfg.d_z, cfg.d_hidden);
        let latent = if cfg.variant.has_latent() {
            let q_mu = LinearLayer::new(&mut store, "q.mu", d_in, d_z, &mut rng)?;
            let q_log_var = LinearLayer::new(&mut store, "q.log_var", d_in, d_z, &mut rng)?;
            let prior = match cfg.variant {
                Variant::NonRegCtc | Variant::Ci => PriorNet::Independent {
                    mu: LinearLayer::new(&mut store, "prior.mu", d_in, d_z, &mut rng)?,
                    log_var: LinearLayer::new(&mut store, "prior.log_var", d_in, d_z, &mut rng)?,
                },
                Variant::Md => {
                    let fan_in = d_in + 2 * d_z;
                    PriorNet::Chain {
                        mu: LinearLayer::new(&mut store, "prior.mu", fan_in, d_z, &mut rng)?,
                        log_var: LinearLayer::new(&mut store, "prior.log_var", fan_in, d_z, &mut rng)?,
                        init_mu: store.insert("prior.init_mu", Tensor::zeros(&[1, d_z]), true)?,
                        init_log_var: store.insert("prior.init_log_var", Tensor::zeros(&[1, d_z]), true)?,
                    }
                }
                Variant::Ma => {
                    let h = cfg.gru_hidden;
                    let mu = BiGruLayer::new(&mut store, "prior.mu_gru", d_in, h, &mut rng)?;
                    let log_var = BiGruLayer::new(&mut store, "prior.log_var_gru", d_in, h, &mut rng)?;
                    let proj = if 2 * h != d_z {
                        Some((
                            LinearLayer::new(&mut store, "prior.mu_proj", 2 * h, d_z, &mut rng)?,
                            LinearLayer::new(&mut store, "prior.log_var_proj", 2 * h, d_z, &mut rng)?,
                        ))
                    } else {
                        None
                    };
                    PriorNet::Recurrent { mu, log_var, proj }
                }
                Variant::LinearCtc => unreachable!(),
            };
            let z_proj = LinearLayer::new(&mut store, "latent.proj", d_z, d_h, &mut rng)?;
            Some(LatentLayers {
                q_mu,
                q_log_var,
                prior,
                z_proj,
            })
        } else {
            None
        };
        let head_in = if latent.is_some() { d_in + d_h } else { d_in };
        let head = LinearLayer::new(&mut store, "head", head_in, classes, &mut rng)?;
        Ok(Self {
            cfg,
            store,
            head,
            latent,
        })
    }

    /// Rebinds a model to existing parameters (e.g. from a checkpoint).
    pub fn from_store(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        // Build a reference layout and require identical names and shapes.
        let mut reference = Model::new(cfg, 0)?;
        reference.store.load_values(&store)?;
        Ok(reference)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    pub fn to_archive(&self) -> TensorArchive {
        TensorArchive {
            header: self.cfg.to_header(),
            entries: self.store.to_entries(),
        }
    }

    /// Reads the model config from the header and the parameters from every
    /// entry not prefixed `optim.`.
    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let cfg = ModelConfig::from_header(a)?;
        let entries: Vec<ArchiveEntry> = a
            .entries
            .iter()
            .filter(|e| !e.name.starts_with("optim."))
            .cloned()
            .collect();
        Self::from_store(cfg, ParamStore::from_entries(entries)?)
    }

    /// Records the forward pass for `x` (`T x d_in`).
    pub fn forward(&self, g: &mut Graph, x: &Tensor, mode: LatentMode<'_>) -> Result<ForwardVars> {
        let (frames, cols) = x.dims2();
        if frames == 0 || x.is_empty() {
            return Err(Error::Contract("empty input sequence".into()));
        }
        if cols != self.cfg.d_in {
            return Err(Error::Shape(format!(
                "model expects {} input features, got {cols}",
                self.cfg.d_in
            )));
        }
        let input = g.constant(x.clone());
        match self.cfg.variant {
            Variant::LinearCtc => self.forward_linear_ctc(g, input),
            Variant::NonRegCtc | Variant::Ci => self.forward_ci(g, input, mode),
            Variant::Md => self.forward_md(g, input, mode),
            Variant::Ma => self.forward_ma(g, input, mode),
        }
    }

    fn forward_linear_ctc(&self, g: &mut Graph, input: Var) -> Result<ForwardVars> {
        let logits = self.head.forward(g, &self.store, input)?;
        let log_probs = g.log_softmax_rows(logits);
        Ok(ForwardVars {
            input,
            logits,
            log_probs,
            latent: None,
        })
    }

    fn latent_layers(&self) -> &LatentLayers {
        self.latent.as_ref().expect("latent variant")
    }

    /// `q` from `x_t`, `z` from `q`, and the prediction head.
    fn posterior_and_head(
        &self,
        g: &mut Graph,
        input: Var,
        prior: GaussianVars,
        mode: LatentMode<'_>,
    ) -> Result<ForwardVars> {
        let l = self.latent_layers();
        let q = GaussianVars {
            mu: l.q_mu.forward(g, &self.store, input)?,
            log_var: l.q_log_var.forward(g, &self.store, input)?,
        };
        let z = match mode {
            LatentMode::Sample(rng) => {
                let eps = sample_noise(g, q, rng);
                reparameterize_var(g, q, eps)?
            }
            LatentMode::Mean => q.mu,
        };
        let zp = l.z_proj.forward(g, &self.store, z)?;
        let joint = g.concat_cols(&[input, zp])?;
        let logits = self.head.forward(g, &self.store, joint)?;
        let log_probs = g.log_softmax_rows(logits);
        Ok(ForwardVars {
            input,
            logits,
            log_probs,
            latent: Some(LatentVars { q, prior, z }),
        })
    }

    fn forward_ci(&self, g: &mut Graph, input: Var, mode: LatentMode<'_>) -> Result<ForwardVars> {
        let PriorNet::Independent { mu, log_var } = &self.latent_layers().prior else {
            unreachable!("ci layout")
        };
        let prior = GaussianVars {
            mu: mu.forward(g, &self.store, input)?,
            log_var: log_var.forward(g, &self.store, input)?,
        };
        self.posterior_and_head(g, input, prior, mode)
    }

    fn forward_md(&self, g: &mut Graph, input: Var, mode: LatentMode<'_>) -> Result<ForwardVars> {
        let PriorNet::Chain {
            mu,
            log_var,
            init_mu,
            init_log_var,
        } = &self.latent_layers().prior
        else {
            unreachable!("md layout")
        };
        let frames = g.value(input).rows();
        let mut state_mu = g.param(&self.store, *init_mu);
        let mut state_lv = g.param(&self.store, *init_log_var);
        let mut mus = Vec::with_capacity(frames);
        let mut lvs = Vec::with_capacity(frames);
        for t in 0..frames {
            let x_t = g.slice_row(input, t)?;
            let joint = g.concat_cols(&[x_t, state_mu, state_lv])?;
            state_mu = mu.forward(g, &self.store, joint)?;
            state_lv = log_var.forward(g, &self.store, joint)?;
            mus.push(state_mu);
            lvs.push(state_lv);
        }
        let prior = GaussianVars {
            mu: g.stack_rows(&mus)?,
            log_var: g.stack_rows(&lvs)?,
        };
        self.posterior_and_head(g, input, prior, mode)
    }

    fn forward_ma(&self, g: &mut Graph, input: Var, mode: LatentMode<'_>) -> Result<ForwardVars> {
        let PriorNet::Recurrent { mu, log_var, proj } = &self.latent_layers().prior else {
            unreachable!("ma layout")
        };
        let mut prior = GaussianVars {
            mu: bigru_forward(mu, g, &self.store, input)?,
            log_var: bigru_forward(log_var, g, &self.store, input)?,
        };
        if let Some((pm, pl)) = proj {
            prior = GaussianVars {
                mu: pm.forward(g, &self.store, prior.mu)?,
                log_var: pl.forward(g, &self.store, prior.log_var)?,
            };
        }
        self.posterior_and_head(g, input, prior, mode)
    }

    /// Builds this variant's objective on top of a forward pass.
    ///
    /// `md` and `ma` priors are deterministic given `X`, so every step of the
    /// Markovian regulariser is a fixed-prior KL and `samples` draws nothing.
    pub fn objective(
        &self,
        g: &mut Graph,
        fwd: &ForwardVars,
        y: &LabelSequence,
        kl_weight: f64,
        rng: &mut Rng,
        samples: usize,
    ) -> Result<LossVars> {
        match (self.cfg.variant.loss_kind(), fwd.latent) {
            (LossKind::Ctc, _) => ctc_objective(g, fwd.log_probs, y),
            (LossKind::ConditionalIndependence, Some(l)) => {
                ci_objective(g, fwd.log_probs, y, l.q, l.prior, kl_weight)
            }
            (LossKind::Markov, Some(l)) => {
                let frames = l.prior.rows(g);
                let mut steps = Vec::with_capacity(frames);
                for t in 0..frames {
                    steps.push(PriorStep::Fixed(l.prior.row(g, t)?));
                }
                markov_objective(g, fwd.log_probs, y, l.q, &steps, rng, samples, kl_weight)
            }
            _ => Err(Error::Contract("latent objective without latent variables".into())),
        }
    }

    /// Forward pass returned as values.
    pub fn infer(&self, x: &Tensor, mode: LatentMode<'_>) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, x, mode)?;
        let lp = g.value(fwd.log_probs);
        let (frames, classes) = lp.dims2();
        let frame_log_probs = FrameLogProbs::unchecked(frames, classes, lp.data().to_vec())?;
        let (q_seq, prior_seq, z_seq) = match fwd.latent {
            Some(l) => (
                Some(l.q.values(&g)),
                Some(l.prior.values(&g)),
                Some(g.value(l.z).clone()),
            ),
            None => (None, None, None),
        };
        Ok(ForwardOutput {
            frame_log_probs,
            q_seq,
            prior_seq,
            z_seq,
        })
    }

    /// Frame log-probabilities in evaluation mode (`z = μ`).
    pub fn frame_log_probs(&self, x: &Tensor) -> Result<FrameLogProbs> {
        Ok(self.infer(x, LatentMode::Mean)?.frame_log_probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{loss_ci, loss_ctc};
    use crate::numerics::log_sum_exp;
    use crate::oracles::{max_relative_error, param_fd_gradient};

    fn cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            d_in: 5,
            d_z: 4,
            d_hidden: 6,
            gru_hidden: 2,
            vocab: Vocab::synthetic(3),
            variant,
        }
    }

    fn input(rng: &mut Rng, frames: usize, d: usize) -> Tensor {
        Tensor::matrix(frames, d, (0..frames * d).map(|_| rng.normal()).collect()).unwrap()
    }

    fn rows_normalized(p: &FrameLogProbs) -> bool {
        (0..p.frames()).all(|t| log_sum_exp(p.row(t)).unwrap().abs() <= 1e-9)
    }

    #[test]
    fn zero_weight_linear_ctc_is_uniform() {
        let mut m = Model::new(cfg(Variant::LinearCtc), 1).unwrap();
        let ids: Vec<_> = m.params().ids().collect();
        for id in ids {
            m.params_mut().get_mut(id).data_mut().fill(0.0);
        }
        let mut rng = Rng::new(2);
        let out = m.infer(&input(&mut rng, 3, 5), LatentMode::Mean).unwrap();
        for v in out.frame_log_probs.data() {
            assert!((v - 0.25f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn single_frame_output() {
        let m = Model::new(cfg(Variant::LinearCtc), 1).unwrap();
        let mut rng = Rng::new(2);
        let out = m.infer(&input(&mut rng, 1, 5), LatentMode::Mean).unwrap();
        assert_eq!(out.frame_log_probs.frames(), 1);
    }

    #[test]
    fn every_variant_emits_normalized_rows() {
        let mut rng = Rng::new(3);
        let x = input(&mut rng, 6, 5);
        for v in Variant::ALL {
            let m = Model::new(cfg(v), 4).unwrap();
            let mut r = Rng::new(5);
            let out = m.infer(&x, LatentMode::Sample(&mut r)).unwrap();
            assert!(rows_normalized(&out.frame_log_probs), "{v}");
            assert_eq!(out.q_seq.is_some(), v.has_latent());
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let mut rng = Rng::new(3);
        let x = input(&mut rng, 5, 5);
        for v in [Variant::Ci, Variant::Md, Variant::Ma] {
            let m = Model::new(cfg(v), 4).unwrap();
            let a = m.infer(&x, LatentMode::Sample(&mut Rng::new(9))).unwrap();
            let b = m.infer(&x, LatentMode::Sample(&mut Rng::new(9))).unwrap();
            assert_eq!(a.z_seq, b.z_seq);
            assert_eq!(a.frame_log_probs, b.frame_log_probs);
        }
    }

    #[test]
    fn mean_mode_is_deterministic() {
        let mut rng = Rng::new(3);
        let x = input(&mut rng, 5, 5);
        for v in [Variant::Ci, Variant::Md, Variant::Ma] {
            let m = Model::new(cfg(v), 4).unwrap();
            let a = m.frame_log_probs(&x).unwrap();
            let b = m.frame_log_probs(&x).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn tied_prior_reduces_ci_to_ctc() {
        let mut m = Model::new(cfg(Variant::Ci), 7).unwrap();
        for part in ["mu", "log_var"] {
            for p in ["weight", "bias"] {
                let src = m.params().by_name(&format!("q.{part}.{p}")).unwrap().clone();
                let id = m.params().id(&format!("prior.{part}.{p}")).unwrap();
                *m.params_mut().get_mut(id) = src;
            }
        }
        let mut rng = Rng::new(8);
        let x = input(&mut rng, 4, 5);
        let out = m.infer(&x, LatentMode::Sample(&mut Rng::new(1))).unwrap();
        let y = LabelSequence::new(vec![0, 2]);
        let ci = loss_ci(&out.frame_log_probs, &y, out.q_seq.as_ref().unwrap(), out.prior_seq.as_ref().unwrap(), 1.0)
            .unwrap();
        let ctc = loss_ctc(&out.frame_log_probs, &y).unwrap();
        assert_eq!(ci.total, ctc.total);
    }

    #[test]
    fn ci_and_non_reg_have_equal_parameter_counts() {
        let a = Model::new(cfg(Variant::Ci), 0).unwrap();
        let b = Model::new(cfg(Variant::NonRegCtc), 0).unwrap();
        assert_eq!(a.num_parameters(), b.num_parameters());
    }

    #[test]
    fn md_constant_rows_do_not_imply_constant_priors() {
        let m = Model::new(cfg(Variant::Md), 2).unwrap();
        let x = Tensor::matrix(3, 5, [0.5, -1.0, 0.3, 2.0, 0.1].repeat(3)).unwrap();
        let out = m.infer(&x, LatentMode::Mean).unwrap();
        let p = out.prior_seq.unwrap();
        assert_ne!(p[0], p[1]);
    }

    #[test]
    fn md_first_prior_uses_initial_state() {
        let m = Model::new(cfg(Variant::Md), 2).unwrap();
        let mut rng = Rng::new(1);
        let x = input(&mut rng, 3, 5);
        let out = m.infer(&x, LatentMode::Mean).unwrap();
        let p1 = &out.prior_seq.unwrap()[0];
        // Recompute from [x_1, 0, 0] by hand.
        let w = m.params().by_name("prior.mu.weight").unwrap();
        let b = m.params().by_name("prior.mu.bias").unwrap();
        let mut joint = x.row(0).to_vec();
        joint.extend(std::iter::repeat(0.0).take(8));
        for d in 0..4 {
            let v: f64 = w.row(d).iter().zip(&joint).map(|(a, b)| a * b).sum::<f64>() + b.data()[d];
            assert!((v - p1.mu[d]).abs() < 1e-12);
        }
    }

    #[test]
    fn ma_prior_sees_the_future() {
        let m = Model::new(cfg(Variant::Ma), 2).unwrap();
        let mut rng = Rng::new(1);
        let x = input(&mut rng, 4, 5);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[15..20] {
            *v += 1.0;
        }
        let a = m.infer(&x, LatentMode::Mean).unwrap().prior_seq.unwrap();
        let b = m.infer(&x2, LatentMode::Mean).unwrap().prior_seq.unwrap();
        assert_ne!(a[0].mu, b[0].mu);
    }

    #[test]
    fn ma_projection_when_widths_differ() {
        let mut c = cfg(Variant::Ma);
        c.gru_hidden = 3;
        let m = Model::new(c, 0).unwrap();
        assert!(m.params().id("prior.mu_proj.weight").is_some());
        let m = Model::new(cfg(Variant::Ma), 0).unwrap();
        assert!(m.params().id("prior.mu_proj.weight").is_none());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = Model::new(cfg(Variant::Ci), 0).unwrap();
        let x = Tensor::zeros(&[3, 4]);
        assert!(matches!(m.infer(&x, LatentMode::Mean), Err(Error::Shape(_))));
    }

    #[test]
    fn variant_loss_pairing() {
        let c = cfg(Variant::Md);
        assert!(c.check_loss(LossKind::Markov).is_ok());
        assert!(c.check_loss(LossKind::Ctc).is_err());
        assert!(cfg(Variant::NonRegCtc).check_loss(LossKind::Ctc).is_ok());
    }

    #[test]
    fn archive_round_trip() {
        let m = Model::new(cfg(Variant::Ma), 3).unwrap();
        let mut buf = Vec::new();
        m.to_archive().write_to(&mut buf).unwrap();
        let back = Model::from_archive(&TensorArchive::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn md_three_step_gradient_check() {
        let m = Model::new(cfg(Variant::Md), 11).unwrap();
        let mut rng = Rng::new(12);
        let x = input(&mut rng, 3, 5);
        let y = LabelSequence::new(vec![1]);
        let f = |store: &ParamStore, g: &mut Graph| -> Result<Var> {
            let mm = Model::from_store(m.config().clone(), store.clone())?;
            let fwd = mm.forward(g, &x, LatentMode::Sample(&mut Rng::new(4)))?;
            Ok(mm.objective(g, &fwd, &y, 1.0, &mut Rng::new(5), 1)?.total)
        };
        let mut g = Graph::new();
        let loss = f(m.params(), &mut g).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.gradients(m.params());
        let numeric = param_fd_gradient(m.params(), 1e-5, |s| {
            let mut g = Graph::new();
            let l = f(s, &mut g)?;
            Ok(g.value(l).item())
        })
        .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err <= 1e-4, "max relative error {err}");
    }
}
