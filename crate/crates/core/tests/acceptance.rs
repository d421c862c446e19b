//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 5`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use vctc_core::ctc::{ctc_log_likelihood, ctc_log_likelihood_var};
use vctc_core::decoding::{beam_search_decode, best_path_decode, BeamConfig, DecodeResult, NGramLm};
use vctc_core::harness::{
    evaluate, generate_dataset, train, Dataset, DecodeMode, DecodeOptions, SyntheticTaskSpec, TrainConfig,
    TrainData,
};
use vctc_core::losses::{
    ci_objective, ctc_objective, loss_ci, loss_ctc, loss_markov, markov_objective, Prior, PriorStep,
};
use vctc_core::models::LatentMode;
use vctc_core::oracles::{gauss_hermite, kl_monte_carlo, kl_quadrature, param_fd_gradient};
use vctc_core::variational::{kl_diag_gauss, kl_diag_gauss_var, GaussianVars};
use vctc_core::{
    DiagGaussian, FrameLogProbs, Graph, LabelSequence, Model, ModelConfig, ParamStore, Rng, Tensor, Variant,
    Vocab,
};

struct Outcome {
    passed: bool,
    summary: String,
    details: Vec<String>,
}

impl Outcome {
    fn new(passed: bool, summary: impl Into<String>) -> Self {
        Self {
            passed,
            summary: summary.into(),
            details: Vec::new(),
        }
    }
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 8] = [
        (1, "ctc lattice matches path enumeration", ctc_oracle_equivalence),
        (2, "analytic gradients match finite differences", gradient_suite),
        (3, "closed-form kl matches quadrature and monte carlo", kl_correctness),
        (4, "training objective lower-bounds ln p(y|x)", elbo_bound),
        (5, "degenerate priors reduce to ctc exactly", degenerate_reductions),
        (6, "decoder order, exactness and beam monotonicity", decoder_properties),
        (7, "trend reproduction on the synthetic task", trend_reproduction),
        (8, "identical seeds give identical metrics", determinism),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        let verdict = if outcome.passed { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} {verdict}: {name} | {} [{:.1}s]",
            outcome.summary,
            start.elapsed().as_secs_f64()
        );
        for d in &outcome.details {
            println!("    {d}");
        }
        failed += usize::from(!outcome.passed);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn random_logits(rng: &mut Rng, frames: usize, classes: usize) -> Tensor {
    Tensor::matrix(frames, classes, (0..frames * classes).map(|_| 2.0 * rng.normal()).collect()).unwrap()
}

fn random_labels(rng: &mut Rng, symbols: usize, max_len: usize) -> LabelSequence {
    LabelSequence::new((0..rng.between(0, max_len)).map(|_| rng.below(symbols)).collect())
}

/// Shortest input that can emit `y`: one frame per token plus a blank
/// between repeats.
fn min_frames(y: &[usize]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

fn feasible_labels(rng: &mut Rng, symbols: usize, max_len: usize, frames: usize) -> LabelSequence {
    loop {
        let y = random_labels(rng, symbols, max_len);
        if min_frames(y.tokens()) <= frames {
            return y;
        }
    }
}

fn log_sum(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Every alignment of `frames` frames over `classes` outputs, in
/// lexicographic order.
fn all_paths(frames: usize, classes: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = classes.pow(frames as u32);
    (0..total).map(move |mut code| {
        let mut path = vec![0; frames];
        for slot in path.iter_mut().rev() {
            *slot = code % classes;
            code /= classes;
        }
        path
    })
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if k != blank && prev != Some(k) {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// `ln p(l | x)` of every labeling reachable from the frames, summed over
/// all alignments by enumeration.
fn labeling_scores(probs: &FrameLogProbs) -> BTreeMap<Vec<usize>, f64> {
    let mut terms: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
    for path in all_paths(probs.frames(), probs.classes()) {
        let lp: f64 = path.iter().enumerate().map(|(t, &k)| probs.get(t, k)).sum();
        terms.entry(collapse(&path, probs.blank())).or_default().push(lp);
    }
    terms.into_iter().map(|(l, v)| (l, log_sum(&v))).collect()
}

/// `|a − b| / max(|a|, |b|, floor)`.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ------------------------------------------------------------ criterion 1

fn ctc_oracle_equivalence() -> Outcome {
    let mut rng = Rng::new(1001);
    let (mut worst, mut feasible) = (0.0f64, 0);
    for _ in 0..1000 {
        let frames = rng.between(1, 6);
        let symbols = rng.between(1, 3);
        let probs = FrameLogProbs::from_logits(&random_logits(&mut rng, frames, symbols + 1)).unwrap();
        let y = random_labels(&mut rng, symbols, 3);
        let dp = ctc_log_likelihood(&probs, &y).unwrap().value();
        let terms: Vec<f64> = all_paths(frames, symbols + 1)
            .filter(|p| collapse(p, probs.blank()) == y.tokens())
            .map(|p| p.iter().enumerate().map(|(t, &k)| probs.get(t, k)).sum())
            .collect();
        let bf = log_sum(&terms);
        let diff = if dp == f64::NEG_INFINITY && bf == f64::NEG_INFINITY {
            0.0
        } else {
            feasible += 1;
            (dp - bf).abs()
        };
        worst = worst.max(if diff.is_nan() { f64::INFINITY } else { diff });
    }
    Outcome::new(
        worst <= 1e-9,
        format!("1000 instances ({feasible} feasible), max |dp - enumeration| = {worst:.2e} (tol 1e-9)"),
    )
}

// ------------------------------------------------------------ criterion 2

const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences at h = 1e-5
/// carry absolute noise near 1e-10, so components below this scale are
/// compared absolutely rather than relatively.
const GRAD_FLOOR: f64 = 1e-6;

fn vector_fd(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut w = x.to_vec();
    (0..x.len())
        .map(|i| {
            w[i] = x[i] + FD_STEP;
            let fp = f(&w);
            w[i] = x[i] - FD_STEP;
            let fm = f(&w);
            w[i] = x[i];
            (fp - fm) / (2.0 * FD_STEP)
        })
        .collect()
}

fn worst_of(a: &[f64], n: &[f64]) -> f64 {
    a.iter().zip(n).map(|(a, n)| rel_err(*a, *n, GRAD_FLOOR)).fold(0.0, f64::max)
}

fn ctc_gradients(rng: &mut Rng) -> f64 {
    let frames = rng.between(1, 6);
    let symbols = rng.between(1, 3);
    let logits = random_logits(rng, frames, symbols + 1);
    let y = feasible_labels(rng, symbols, 3, frames);
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let lp = g.log_softmax_rows(x);
    let ll = ctc_log_likelihood_var(&mut g, lp, &y).unwrap();
    g.backward(ll).unwrap();
    let analytic = g.grad(x).unwrap().data().to_vec();
    let numeric = vector_fd(logits.data(), |v| {
        let t = Tensor::matrix(frames, symbols + 1, v.to_vec()).unwrap();
        ctc_log_likelihood(&FrameLogProbs::from_logits(&t).unwrap(), &y).unwrap().value()
    });
    worst_of(&analytic, &numeric)
}

fn kl_gradients(rng: &mut Rng) -> f64 {
    let (rows, dim) = (rng.between(1, 3), rng.between(1, 4));
    let n = rows * dim;
    // Packed as [mu_q, lv_q, mu_p, lv_p].
    let theta: Vec<f64> = (0..4 * n)
        .map(|i| if (i / n) % 2 == 0 { rng.normal() } else { rng.uniform_range(-2.0, 2.0) })
        .collect();
    let gauss = |v: &[f64], k: usize| -> Vec<DiagGaussian> {
        let (mu, lv) = (&v[2 * k * n..(2 * k + 1) * n], &v[(2 * k + 1) * n..(2 * k + 2) * n]);
        (0..rows)
            .map(|r| DiagGaussian::new(mu[r * dim..(r + 1) * dim].to_vec(), lv[r * dim..(r + 1) * dim].to_vec()).unwrap())
            .collect()
    };
    let mut g = Graph::new();
    let nodes: Vec<_> = (0..4)
        .map(|k| g.constant(Tensor::matrix(rows, dim, theta[k * n..(k + 1) * n].to_vec()).unwrap()))
        .collect();
    let q = GaussianVars { mu: nodes[0], log_var: nodes[1] };
    let p = GaussianVars { mu: nodes[2], log_var: nodes[3] };
    let kl = kl_diag_gauss_var(&mut g, q, p).unwrap();
    g.backward(kl).unwrap();
    let analytic: Vec<f64> = nodes.iter().flat_map(|v| g.grad(*v).unwrap().data().to_vec()).collect();
    let numeric = vector_fd(&theta, |v| {
        gauss(v, 0).iter().zip(&gauss(v, 1)).map(|(q, p)| kl_diag_gauss(q, p).unwrap()).sum()
    });
    worst_of(&analytic, &numeric)
}

fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_in: 3,
        d_z: 2,
        d_hidden: 3,
        gru_hidden: 2,
        vocab: Vocab::synthetic(2),
        variant,
    }
}

fn model_gradients(rng: &mut Rng, variant: Variant, seed: u64) -> f64 {
    let model = Model::new(tiny_config(variant), seed).unwrap();
    let frames = rng.between(1, 4);
    let x = Tensor::matrix(frames, 3, (0..frames * 3).map(|_| rng.normal()).collect()).unwrap();
    let y = feasible_labels(rng, 2, 3, frames);
    let (noise_seed, kl_weight) = (rng.below(1 << 30) as u64, rng.uniform_range(0.5, 1.5));
    let objective = |store: &ParamStore, g: &mut Graph| {
        let m = Model::from_store(model.config().clone(), store.clone()).unwrap();
        let fwd = m.forward(g, &x, LatentMode::Sample(&mut Rng::new(noise_seed))).unwrap();
        m.objective(g, &fwd, &y, kl_weight, &mut Rng::new(noise_seed + 1), 1).unwrap().total
    };
    let mut g = Graph::new();
    let total = objective(model.params(), &mut g);
    g.backward(total).unwrap();
    let analytic = g.gradients(model.params());
    let numeric = param_fd_gradient(model.params(), FD_STEP, |s| {
        let mut g = Graph::new();
        let v = objective(s, &mut g);
        Ok(g.value(v).item())
    })
    .unwrap();
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|((_, a), (_, n))| worst_of(a.data(), n.data()))
        .fold(0.0, f64::max)
}

fn gradient_suite() -> Outcome {
    const INSTANCES: usize = 100;
    let mut rng = Rng::new(2002);
    let mut results: Vec<(&str, f64)> = vec![
        ("ctc", (0..INSTANCES).map(|_| ctc_gradients(&mut rng)).fold(0.0, f64::max)),
        ("kl", (0..INSTANCES).map(|_| kl_gradients(&mut rng)).fold(0.0, f64::max)),
    ];
    for v in [Variant::Ci, Variant::Md, Variant::Ma] {
        let worst = (0..INSTANCES as u64).map(|i| model_gradients(&mut rng, v, i)).fold(0.0, f64::max);
        results.push((v.name(), worst));
    }
    let passed = results.iter().all(|(_, w)| *w <= GRAD_TOL);
    let parts: Vec<String> = results.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    Outcome::new(
        passed,
        format!("{INSTANCES} instances each, max relative error: {} (tol 1e-4)", parts.join(", ")),
    )
}

// ------------------------------------------------------------ criterion 3

fn kl_correctness() -> Outcome {
    let mut details = Vec::new();
    // The quadrature rule must integrate even monomials against exp(-x²)
    // exactly: ∫ x^{2k} e^{-x²} dx = Γ(k + 1/2).
    let (nodes, weights) = gauss_hermite(64);
    let mut gamma = std::f64::consts::PI.sqrt();
    let mut rule_err = 0.0f64;
    for k in 0..12 {
        let quad: f64 = nodes.iter().zip(&weights).map(|(x, w)| w * x.powi(2 * k)).sum();
        rule_err = rule_err.max(rel_err(quad, gamma, 1.0));
        gamma *= k as f64 + 0.5;
    }
    details.push(format!("64-point rule moment error {rule_err:.1e}"));

    let mut rng = Rng::new(3003);
    let mut quad_worst = 0.0f64;
    for _ in 0..500 {
        let (mq, mp) = (2.0 * rng.normal(), 2.0 * rng.normal());
        let (lq, lp) = (rng.uniform_range(-3.0, 3.0), rng.uniform_range(-3.0, 3.0));
        let closed = kl_diag_gauss(&DiagGaussian::new(vec![mq], vec![lq]).unwrap(), &DiagGaussian::new(vec![mp], vec![lp]).unwrap()).unwrap();
        quad_worst = quad_worst.max((closed - kl_quadrature(mq, lq, mp, lp, 64)).abs());
    }

    let mut mc_worst = 0.0f64;
    for dim in 1..=8 {
        let draw = |rng: &mut Rng| {
            let mu = (0..dim).map(|_| rng.normal()).collect();
            let lv = (0..dim).map(|_| rng.uniform_range(-1.5, 1.5)).collect();
            DiagGaussian::new(mu, lv).unwrap()
        };
        let (q, p) = (draw(&mut rng), draw(&mut rng));
        let closed = kl_diag_gauss(&q, &p).unwrap();
        let (mean, se) = kl_monte_carlo(&q, &p, &mut rng, 1_000_000);
        let z = (closed - mean).abs() / se;
        details.push(format!("D={dim}: closed {closed:.6} monte carlo {mean:.6} ± {se:.1e} ({z:.2} se)"));
        mc_worst = mc_worst.max(z);
    }
    let passed = rule_err <= 1e-10 && quad_worst <= 1e-6 && mc_worst <= 3.0;
    let mut out = Outcome::new(
        passed,
        format!(
            "quadrature max |diff| {quad_worst:.1e} over 500 (tol 1e-6); monte carlo worst {mc_worst:.2} se over D=1..8 (tol 3)"
        ),
    );
    out.details = details;
    out
}

// ------------------------------------------------------------ criterion 4

fn elbo_check(variant: Variant, samples: usize) -> (bool, String) {
    let cfg = ModelConfig {
        d_in: 4,
        d_z: 2,
        d_hidden: 4,
        gru_hidden: 1,
        vocab: Vocab::synthetic(3),
        variant,
    };
    let model = Model::new(cfg, 44).unwrap();
    let mut rng = Rng::new(4004);
    let x = Tensor::matrix(4, 4, (0..16).map(|_| rng.normal()).collect()).unwrap();
    let y = LabelSequence::new(vec![0, 2]);
    let mut elbo = Vec::with_capacity(samples);
    let mut log_w = Vec::with_capacity(samples);
    let mut consistency = 0.0f64;
    for i in 0..samples {
        // Same stream for the objective and the weight, hence the same z.
        let stream = |i| Rng::with_stream(4004, i as u64);
        let mut g = Graph::new();
        let mut r = stream(i);
        let fwd = model.forward(&mut g, &x, LatentMode::Sample(&mut r)).unwrap();
        let total = model.objective(&mut g, &fwd, &y, 1.0, &mut Rng::new(0), 1).unwrap().total;
        let total = g.value(total).item();
        elbo.push(total);

        let out = model.infer(&x, LatentMode::Sample(&mut stream(i))).unwrap();
        let (q, p, z) = (out.q_seq.unwrap(), out.prior_seq.unwrap(), out.z_seq.unwrap());
        let ll = ctc_log_likelihood(&out.frame_log_probs, &y).unwrap().value();
        let (mut log_p, mut log_q, mut kl) = (0.0, 0.0, 0.0);
        for t in 0..z.rows() {
            log_p += p[t].log_density(z.row(t));
            log_q += q[t].log_density(z.row(t));
            kl += kl_diag_gauss(&q[t], &p[t]).unwrap();
        }
        consistency = consistency.max((total - (ll - kl)).abs());
        log_w.push(ll + log_p - log_q);
    }
    let (elbo_mean, elbo_se) = mean_and_se(&elbo);
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let (w_mean, w_se) = mean_and_se(&w);
    let is_estimate = m + w_mean.ln();
    let is_se = w_se / w_mean;
    let combined = (elbo_se.powi(2) + is_se.powi(2)).sqrt();
    let passed = elbo_mean <= is_estimate + 3.0 * combined && consistency <= 1e-10;
    (
        passed,
        format!(
            "{}: objective {elbo_mean:.5} ± {elbo_se:.1e} vs importance-sampled ln p(y|x) {is_estimate:.5} ± {is_se:.1e} (objective/value mismatch {consistency:.0e})",
            variant.name()
        ),
    )
}

fn elbo_bound() -> Outcome {
    const SAMPLES: usize = 10_000;
    let checks: Vec<(bool, String)> = [Variant::Ci, Variant::Md, Variant::Ma].into_iter().map(|v| elbo_check(v, SAMPLES)).collect();
    let mut out = Outcome::new(
        checks.iter().all(|c| c.0),
        format!("{SAMPLES} samples per model; objective <= estimate + 3 combined se for ci, md, ma"),
    );
    out.details = checks.into_iter().map(|c| c.1).collect();
    out
}

// ------------------------------------------------------------ criterion 5

fn random_gaussians(rng: &mut Rng, frames: usize, dim: usize) -> Vec<DiagGaussian> {
    (0..frames)
        .map(|_| {
            DiagGaussian::new(
                (0..dim).map(|_| rng.normal()).collect(),
                (0..dim).map(|_| rng.uniform_range(-2.0, 2.0)).collect(),
            )
            .unwrap()
        })
        .collect()
}

fn conditional_priors(first: &DiagGaussian, rest: &[DiagGaussian]) -> Vec<Prior> {
    let mut priors = vec![Prior::Fixed(first.clone())];
    for p in rest {
        let p = p.clone();
        priors.push(Prior::Conditional(Box::new(move |_z: &[f64]| p.clone())));
    }
    priors
}

fn degenerate_reductions() -> Outcome {
    const TOL: f64 = 1e-12;
    let mut rng = Rng::new(5005);
    let (mut q_is_p, mut z_free, mut graph, mut model_level) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..300 {
        let frames = rng.between(1, 8);
        let symbols = rng.between(1, 4);
        let probs = FrameLogProbs::from_logits(&random_logits(&mut rng, frames, symbols + 1)).unwrap();
        let y = feasible_labels(&mut rng, symbols, 4, frames);
        let dim = rng.between(1, 4);
        let q = random_gaussians(&mut rng, frames, dim);
        let p = random_gaussians(&mut rng, frames, dim);
        let w = rng.uniform_range(0.1, 2.0);
        let samples = rng.between(1, 4);

        let ctc = loss_ctc(&probs, &y).unwrap().total;
        let ci = loss_ci(&probs, &y, &q, &q, w).unwrap().total;
        let markov = loss_markov(&probs, &y, &q, &conditional_priors(&q[0], &q[1..]), &mut rng, samples, w).unwrap().total;
        q_is_p = q_is_p.max((ci - ctc).abs()).max((markov - ctc).abs());

        let ci = loss_ci(&probs, &y, &q, &p, w).unwrap().total;
        let markov = loss_markov(&probs, &y, &q, &conditional_priors(&p[0], &p[1..]), &mut rng, samples, w).unwrap().total;
        z_free = z_free.max((markov - ci).abs());

        // Graph forms on the same numbers.
        let mut g = Graph::new();
        let lp = g.constant(probs.to_tensor());
        let qv = GaussianVars::constant_seq(&mut g, &q).unwrap();
        let pv = GaussianVars::constant_seq(&mut g, &p).unwrap();
        let ctc_g = ctc_objective(&mut g, lp, &y).unwrap().total;
        let ci_same = ci_objective(&mut g, lp, &y, qv, qv, w).unwrap().total;
        let ci_diff = ci_objective(&mut g, lp, &y, qv, pv, w).unwrap().total;
        let rows: Vec<GaussianVars> = (0..frames).map(|t| pv.row(&mut g, t).unwrap()).collect();
        let mut steps = vec![PriorStep::Fixed(rows[0])];
        for r in &rows[1..] {
            let r = *r;
            steps.push(PriorStep::Conditional(Box::new(move |_g: &mut Graph, _z| Ok(r))));
        }
        let markov_g = markov_objective(&mut g, lp, &y, qv, &steps, &mut rng, samples, w).unwrap().total;
        let v = |x| g.value(x).item();
        graph = graph.max((v(ci_same) - v(ctc_g)).abs()).max((v(markov_g) - v(ci_diff)).abs());
    }

    // A ci model whose prior network copies the posterior network, and an md
    // model whose priors do not depend on z, on identical sampled outputs.
    for seed in 0..50u64 {
        let mut ci = Model::new(tiny_config(Variant::Ci), seed).unwrap();
        for (from, to) in [("q.mu", "prior.mu"), ("q.log_var", "prior.log_var")] {
            for part in ["weight", "bias"] {
                let value = ci.params().by_name(&format!("{from}.{part}")).unwrap().clone();
                let id = ci.params().id(&format!("{to}.{part}")).unwrap();
                *ci.params_mut().get_mut(id) = value;
            }
        }
        let frames = rng.between(1, 6);
        let x = Tensor::matrix(frames, 3, (0..frames * 3).map(|_| rng.normal()).collect()).unwrap();
        let y = feasible_labels(&mut rng, 2, 3, frames);
        let mut g = Graph::new();
        let fwd = ci.forward(&mut g, &x, LatentMode::Sample(&mut Rng::new(seed))).unwrap();
        let total = ci.objective(&mut g, &fwd, &y, 1.0, &mut rng, 1).unwrap().total;
        let probs = FrameLogProbs::from_tensor(g.value(fwd.log_probs)).unwrap();
        model_level = model_level.max((g.value(total).item() - loss_ctc(&probs, &y).unwrap().total).abs());

        let md = Model::new(tiny_config(Variant::Md), seed).unwrap();
        let mut g = Graph::new();
        let fwd = md.forward(&mut g, &x, LatentMode::Sample(&mut Rng::new(seed))).unwrap();
        let markov = md.objective(&mut g, &fwd, &y, 0.7, &mut rng, 3).unwrap().total;
        let l = fwd.latent.unwrap();
        let as_ci = ci_objective(&mut g, fwd.log_probs, &y, l.q, l.prior, 0.7).unwrap().total;
        model_level = model_level.max((g.value(markov).item() - g.value(as_ci).item()).abs());
    }
    let worst = q_is_p.max(z_free).max(graph).max(model_level);
    Outcome::new(
        worst <= TOL,
        format!(
            "max |diff|: q=p vs ctc {q_is_p:.1e}, z-free markov vs ci {z_free:.1e}, graph forms {graph:.1e}, models {model_level:.1e} (tol 1e-12)"
        ),
    )
}

// ------------------------------------------------------------ criterion 6

fn order_preserved(r: &DecodeResult) -> bool {
    r.emission_frames.len() == r.tokens.len() && r.emission_frames.windows(2).all(|w| w[0] <= w[1])
}

fn decoder_properties() -> Outcome {
    let mut rng = Rng::new(6006);
    let mut details = Vec::new();

    // Emission order on every decode.
    let mut decodes = 0;
    let mut disordered = 0;
    for i in 0..300 {
        let symbols = rng.between(1, 5);
        let frames = rng.between(1, 20);
        let probs = FrameLogProbs::from_logits(&random_logits(&mut rng, frames, symbols + 1)).unwrap();
        let vocab = Vocab::synthetic(symbols);
        let corpus: Vec<LabelSequence> = (0..30).map(|_| random_labels(&mut rng, symbols, 6)).collect();
        let lm = NGramLm::train(&vocab, 1 + i % 3, &corpus).unwrap();
        let mut all = vec![best_path_decode(&probs)];
        for width in [1, 2, 5, 16] {
            let cfg = BeamConfig {
                beam_width: width,
                lm_order: None,
                lm_weight: rng.uniform_range(0.0, 1.5),
                insertion_bonus: rng.uniform_range(-1.0, 1.0),
            };
            all.push(beam_search_decode(&probs, &cfg, None).unwrap());
            all.push(beam_search_decode(&probs, &cfg, Some(&lm)).unwrap());
        }
        decodes += all.len();
        disordered += all.iter().filter(|r| !order_preserved(r)).count();
    }
    details.push(format!("{decodes} decodes, {disordered} with out-of-order emission frames"));

    // Exhaustive beam equals the MAP labeling found by enumeration.
    let (mut mismatches, mut score_err) = (0, 0.0f64);
    for _ in 0..500 {
        let frames = rng.between(1, 4);
        let symbols = rng.between(1, 2);
        let probs = FrameLogProbs::from_logits(&random_logits(&mut rng, frames, symbols + 1)).unwrap();
        let scores = labeling_scores(&probs);
        let (best, best_score) = scores
            .iter()
            .fold((None, f64::NEG_INFINITY), |(b, s), (l, v)| if *v > s { (Some(l), *v) } else { (b, s) });
        let r = beam_search_decode(&probs, &BeamConfig::with_width(scores.len().max(1) * 2), None).unwrap();
        if Some(r.tokens.tokens()) != best.map(Vec::as_slice) {
            mismatches += 1;
        }
        score_err = score_err.max((r.score.value() - best_score).abs());
    }
    details.push(format!("500 exhaustive searches: {mismatches} differ from the MAP labeling, max score error {score_err:.1e}"));

    // Best final score never drops as the beam widens.
    // Counted separately without and with an LM.
    let mut drops = [0, 0];
    let mut worst_drop = 0.0f64;
    let mut pairs = [0, 0];
    for i in 0..300 {
        let symbols = rng.between(1, 4);
        let frames = rng.between(2, 12);
        let probs = FrameLogProbs::from_logits(&random_logits(&mut rng, frames, symbols + 1)).unwrap();
        let vocab = Vocab::synthetic(symbols);
        let corpus: Vec<LabelSequence> = (0..30).map(|_| random_labels(&mut rng, symbols, 6)).collect();
        let lm = NGramLm::train(&vocab, 2, &corpus).unwrap();
        let use_lm = i % 2 == 1;
        let mut prev = f64::NEG_INFINITY;
        for width in 1..=12 {
            let cfg = BeamConfig { lm_weight: 0.5, ..BeamConfig::with_width(width) };
            let score = beam_search_decode(&probs, &cfg, use_lm.then_some(&lm)).unwrap().score.value();
            if width > 1 {
                pairs[usize::from(use_lm)] += 1;
                if score < prev - 1e-12 {
                    drops[usize::from(use_lm)] += 1;
                    worst_drop = worst_drop.max(prev - score);
                }
            }
            prev = score;
        }
    }
    details.push(format!(
        "widening the beam lowered the score in {}/{} steps without an lm and {}/{} with one (worst drop {worst_drop:.1e})",
        drops[0], pairs[0], drops[1], pairs[1]
    ));

    let total_drops = drops[0] + drops[1];
    let mut out = Outcome::new(
        disordered == 0 && mismatches == 0 && score_err <= 1e-9 && total_drops == 0,
        format!("order violations {disordered}, map mismatches {mismatches}, score drops {total_drops}"),
    );
    out.details = details;
    out
}

// ------------------------------------------------------------ criterion 7

/// Frozen fixture. Dev draws new utterances from the training speakers; test
/// draws from an unseen speaker pool, so `test − dev` measures how well a
/// model generalises beyond the conditions it was trained on.
mod fixture {
    use super::*;

    pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
    pub const STEPS: usize = 2000;
    pub const LR_START: f64 = 1e-2;
    pub const TRAIN_UTTERANCES: usize = 300;
    pub const EVAL_UTTERANCES: usize = 200;
    /// Token error rate every variant must reach on dev; the linear-CTC
    /// baseline sits near 4.5% here.
    pub const MAX_ERROR_RATE: f64 = 0.10;

    pub fn task() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            speaker_std: 0.8,
            speakers: 20,
            task_seed: 0,
            ..SyntheticTaskSpec::default()
        }
    }

    pub fn splits(seed: u64) -> (Dataset, Dataset, Dataset) {
        let base = task();
        let make = |spec: SyntheticTaskSpec, n| generate_dataset(&spec, n).unwrap();
        (
            make(SyntheticTaskSpec { seed: 100 + seed, ..base.clone() }, TRAIN_UTTERANCES),
            make(SyntheticTaskSpec { seed: 200 + seed, ..base.clone() }, EVAL_UTTERANCES),
            make(SyntheticTaskSpec { seed: 300 + seed, speaker_seed: 1, ..base }, EVAL_UTTERANCES),
        )
    }

    pub fn config(variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: STEPS,
            lr_start: LR_START,
            seed,
            eval_every: STEPS,
            ..TrainConfig::new(variant)
        }
    }
}

struct Run {
    variant: Variant,
    seed: u64,
    dev: f64,
    test: f64,
}

fn trend_reproduction() -> Outcome {
    use fixture::*;
    let mut runs = Vec::new();
    for seed in SEEDS {
        let (train_set, dev, test) = splits(seed);
        let variants: &[Variant] = if seed == SEEDS[0] {
            &Variant::ALL
        } else {
            &[Variant::NonRegCtc, Variant::Ci, Variant::Md]
        };
        for &variant in variants {
            let data = TrainData { train: &train_set, dev: Some(&dev), test: Some(&test) };
            let out = train(&config(variant, seed), data).unwrap();
            let last = out.records.last().unwrap();
            runs.push(Run { variant, seed, dev: last.dev_error_rate, test: last.test_error_rate });
        }
    }
    let mut details: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {} {:<12} dev {:.4} test {:.4} gap {:+.4}", r.seed, r.variant.name(), r.dev, r.test, r.test - r.dev))
        .collect();
    let avg = |v: Variant, f: &dyn Fn(&Run) -> f64| {
        let xs: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(f).collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let worst_dev = runs.iter().map(|r| r.dev).fold(0.0, f64::max);
    let gap = |r: &Run| r.test - r.dev;
    let (gap_nonreg, gap_ci) = (avg(Variant::NonRegCtc, &gap), avg(Variant::Ci, &gap));
    let (test_ci, test_md) = (avg(Variant::Ci, &|r| r.test), avg(Variant::Md, &|r| r.test));
    let a = worst_dev <= MAX_ERROR_RATE;
    let b_gap = gap_ci < gap_nonreg;
    let b_md = test_md <= test_ci;
    details.push(format!(
        "mean over {} seeds: gap non-reg-ctc {gap_nonreg:.4}, ci {gap_ci:.4}; test ci {test_ci:.4}, md {test_md:.4}",
        SEEDS.len()
    ));
    let mut out = Outcome::new(
        a && b_gap && b_md,
        format!(
            "(a) worst dev error {worst_dev:.4} <= {MAX_ERROR_RATE} {}; (b) ci gap {gap_ci:.4} < non-reg gap {gap_nonreg:.4} {}, md test {test_md:.4} <= ci test {test_ci:.4} {}",
            ok(a),
            ok(b_gap),
            ok(b_md)
        ),
    );
    out.details = details;
    out
}

fn ok(b: bool) -> &'static str {
    if b { "ok" } else { "violated" }
}

// ------------------------------------------------------------ criterion 8

fn determinism() -> Outcome {
    let spec = SyntheticTaskSpec { max_length: 5, ..SyntheticTaskSpec::default() };
    let train_set = generate_dataset(&SyntheticTaskSpec { seed: 1, ..spec.clone() }, 60).unwrap();
    let dev = generate_dataset(&SyntheticTaskSpec { seed: 2, ..spec.clone() }, 20).unwrap();
    let lm = NGramLm::train(&train_set.vocab, 3, &train_set.transcripts()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut identical = 0;
    let mut checks = 0;
    for variant in Variant::ALL {
        let mut files = Vec::new();
        let mut reports = Vec::new();
        // The second run uses four worker threads; results must not care.
        for (run, threads) in [(0, 1), (1, 4)] {
            let metrics = dir.path().join(format!("{}-{run}.csv", variant.name()));
            let cfg = TrainConfig {
                steps: 12,
                eval_every: 4,
                batch_size: 6,
                seed: 9,
                mc_samples: 2,
                metrics: Some(metrics.clone()),
                ..TrainConfig::new(variant)
            };
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let data = TrainData { train: &train_set, dev: Some(&dev), test: Some(&dev) };
            let model = pool.install(|| train(&cfg, data)).unwrap().model;
            let opts = DecodeOptions {
                mode: DecodeMode::Beam(BeamConfig::with_width(4)),
                lm: Some(lm.clone()),
                bucket_width: 2,
            };
            reports.push(format!("{:?}", evaluate(&model, &dev, &opts).unwrap()));
            files.push(std::fs::read(&metrics).unwrap());
        }
        checks += 2;
        identical += usize::from(files[0] == files[1]) + usize::from(reports[0] == reports[1]);
    }
    Outcome::new(
        identical == checks,
        format!("{identical}/{checks} repeated train/evaluate outputs byte-identical across all variants"),
    )
}
