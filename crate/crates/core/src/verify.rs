//! Self-contained verification suites. Each builds its own tiny models and
//! data, so none of them needs generated datasets or trained checkpoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::Tape;
use crate::data::{SceneConfig, SemiDataset};
use crate::depth::{masked_log_likelihood, ObservationMap};
use crate::error::Result;
use crate::eval::{
    converge, converge_with, grad_check, latent_box, loss_fn, marginal_box, quadrature_log_joint, quadrature_log_marginal,
    with_random_biases, GradReport,
};
use crate::gaussian::DiagGaussian;
use crate::nn::{ModelDims, ModelParams, NetworkSpecs};
use crate::noise::{hash_key, CounterNoise, Stream};
use crate::objectives::{elbo_full_batch, elbo_partial_batch, hybrid_loss, summed_loss, EstimatorConfig, LabeledBatch, UnlabeledBatch};
use crate::tensor::Tensor;
use crate::train::{Checkpoint, Mode, TrainConfig, Trainer};

/// Outcome of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(suite: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check { suite, name: name.into(), passed, detail: detail.into() }
    }

    fn from_result(suite: &'static str, name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Check::new(suite, name, passed, detail),
            Err(e) => Check::new(suite, name, false, format!("error: {e}")),
        }
    }

    pub fn line(&self) -> String {
        format!("{} {}/{}: {}", if self.passed { "PASS" } else { "FAIL" }, self.suite, self.name, self.detail)
    }
}

fn rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_key(&[seed, tag]))
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Bound validity

/// A Monte Carlo bound estimate next to its quadrature oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundDraw {
    pub estimate: f64,
    pub std_err: f64,
    pub oracle: f64,
}

impl BoundDraw {
    /// Whether the estimate stays below the oracle up to `k` standard errors.
    pub fn holds(&self, k: f64) -> bool {
        self.estimate <= self.oracle + k * self.std_err
    }
}

/// Random scalar model (all dimensions 1, hidden width 6) with non-zero biases.
pub fn tiny_model(seed: u64) -> Result<ModelParams> {
    let dims = ModelDims::new(1, 1, 1)?;
    let p = ModelParams::init(dims, NetworkSpecs::standard(dims, 6, false), seed)?;
    Ok(with_random_biases(&p, seed, 0.5))
}

fn tiny_point(seed: u64) -> (f64, f64) {
    let mut r = rng(seed, 0xD47A);
    (r.sample(StandardNormal), r.sample(StandardNormal))
}

const ORACLE_TOL: f64 = 1e-5;
const LATENT_BOUND: f64 = 12.0;

/// Mean of `samples` single-sample `L_F` estimates against `log p(d, h)`.
pub fn full_bound_draw(seed: u64, samples: usize) -> Result<BoundDraw> {
    let params = tiny_model(seed)?;
    let (d, h) = tiny_point(seed);
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let batch = LabeledBatch::from_pairs(&vec![(vec![d], vec![h]); samples])?;
    let noise = CounterNoise::new(seed, Stream::Eval, 0);
    let rows = elbo_full_batch(&vars, &batch, EstimatorConfig::new(1, 1)?, &noise)?;
    let (estimate, std_err) = mean_and_stderr(rows.value().data());
    let spec = latent_box(1, LATENT_BOUND, 0.05)?;
    let (oracle, _) = converge(&spec, ORACLE_TOL, 6, |s| quadrature_log_joint(&params, &[d], &[h], s))?;
    Ok(BoundDraw { estimate, std_err, oracle })
}

/// `log p(d)` for a scalar model. The label axis is already resolved to
/// spectral accuracy by its step of σ/4, so only the latent axis is refined.
fn marginal_oracle(params: &ModelParams, d: f64) -> Result<f64> {
    let spec = marginal_box(params, &[d], LATENT_BOUND, 0.1)?;
    let z = params.dims().z_dim;
    let (v, _) = converge_with(&spec, ORACLE_TOL, 8, |s| s.halved_first(z), |s| quadrature_log_marginal(params, &[d], s))?;
    Ok(v)
}

/// Mean of `samples` single-sample `L_P` estimates against `log p(d)`.
pub fn partial_bound_draw(seed: u64, samples: usize) -> Result<BoundDraw> {
    let params = tiny_model(seed)?;
    let (d, _) = tiny_point(seed);
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let batch = UnlabeledBatch::from_images(&vec![vec![d]; samples])?;
    let noise = CounterNoise::new(seed, Stream::Eval, 0);
    let rows = elbo_partial_batch(&vars, &batch, EstimatorConfig::new(1, 1)?, &noise)?;
    let (estimate, std_err) = mean_and_stderr(rows.value().data());
    let oracle = marginal_oracle(&params, d)?;
    Ok(BoundDraw { estimate, std_err, oracle })
}

// ---------------------------------------------------------------------------
// Closed forms

/// Trapezoid integral of `f` over `[lo, hi]` with `n` intervals.
fn trapezoid(lo: f64, hi: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / n as f64;
    let inner: f64 = (1..n).map(|k| f(lo + k as f64 * h)).sum();
    h * (inner + 0.5 * (f(lo) + f(hi)))
}

fn plain_log_density(x: f64, mean: f64, std: f64) -> f64 {
    let u = (x - mean) / std;
    -0.5 * u * u - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Closed-form KL, entropy and log-density of 1-D Gaussians.
fn gaussian_closed_forms(mean: f64, log_std: f64) -> Result<(f64, f64, f64)> {
    let tape = Tape::new();
    let q = DiagGaussian::new(tape.constant(Tensor::vector(vec![mean])), tape.constant(Tensor::vector(vec![log_std])))?;
    let at = q.log_pdf(tape.constant(Tensor::vector(vec![mean + 0.3])))?.item()?;
    Ok((q.kl_to_standard_normal()?.item()?, q.entropy()?.item()?, at))
}

/// Largest deviation of closed-form KL, entropy and density normalization
/// from quadrature over `draws` random 1-D Gaussians.
pub fn closed_form_quadrature_error(seed: u64, draws: usize) -> Result<f64> {
    let mut r = rng(seed, 0xC105);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let mean: f64 = r.random_range(-2.0..2.0);
        let log_std: f64 = r.random_range(-1.5..1.0);
        let std = log_std.exp();
        let (kl, ent, at) = gaussian_closed_forms(mean, log_std)?;
        let (lo, hi, n) = (mean - 14.0 * std, mean + 14.0 * std, 4000);
        let q = |x: f64| plain_log_density(x, mean, std);
        let kl_q = trapezoid(lo, hi, n, |x| q(x).exp() * (q(x) - plain_log_density(x, 0.0, 1.0)));
        let ent_q = trapezoid(lo, hi, n, |x| -q(x).exp() * q(x));
        let mass = trapezoid(lo, hi, n, |x| q(x).exp());
        worst = worst
            .max((kl - kl_q).abs())
            .max((ent - ent_q).abs())
            .max((mass - 1.0).abs())
            .max((at - q(mean + 0.3)).abs());
    }
    Ok(worst)
}

/// Monte Carlo check of KL and entropy: the worst deviation in standard errors.
pub fn closed_form_monte_carlo_z(seed: u64, draws: usize, samples: usize) -> Result<f64> {
    let mut r = rng(seed, 0x3C3C);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let mean: f64 = r.random_range(-2.0..2.0);
        let log_std: f64 = r.random_range(-1.5..1.0);
        let std = log_std.exp();
        let (kl, ent, _) = gaussian_closed_forms(mean, log_std)?;
        let normal = Normal::new(mean, std).expect("positive std");
        let xs: Vec<f64> = (0..samples).map(|_| normal.sample(&mut r)).collect();
        let kl_terms: Vec<f64> = xs.iter().map(|&x| plain_log_density(x, mean, std) - plain_log_density(x, 0.0, 1.0)).collect();
        let ent_terms: Vec<f64> = xs.iter().map(|&x| -plain_log_density(x, mean, std)).collect();
        let (km, kse) = mean_and_stderr(&kl_terms);
        let (em, ese) = mean_and_stderr(&ent_terms);
        worst = worst.max((km - kl).abs() / kse).max((em - ent).abs() / ese);
    }
    Ok(worst)
}

/// The model `z ∼ N(0,1)`, `d|z ∼ N(z,1)`, `h|z ∼ N(z,1)` in the standard
/// layout, using `relu(z) − relu(−z) = z` through a width-2 trunk.
pub fn linear_gaussian_model() -> Result<ModelParams> {
    let dims = ModelDims::new(1, 1, 1)?;
    let mut p = ModelParams::zeros(dims, NetworkSpecs::standard(dims, 2, false))?;
    let weights: [(&str, &[f64]); 5] = [
        ("decoder.trunk.0.weight", &[1.0, -1.0]),
        ("decoder.trunk.1.weight", &[1.0, 0.0, 0.0, 1.0]),
        ("decoder.image.0.weight", &[1.0, 0.0, -1.0, 0.0]),
        ("decoder.label.0.weight", &[1.0, 0.0, 0.0, 1.0]),
        ("decoder.label.1.weight", &[1.0, 0.0, -1.0, 0.0]),
    ];
    for (name, vals) in weights {
        let i = p.blocks().iter().position(|(n, _)| n == name).expect("standard layout block");
        p.block_mut(i).data_mut().copy_from_slice(vals);
    }
    Ok(p)
}

/// Closed forms at `d = h = 0`: `log N((0,0); 0, [[2,1],[1,2]])` and `log N(0; 0, 2)`.
pub const LINEAR_GAUSSIAN_JOINT: f64 = -2.387_18;
pub const LINEAR_GAUSSIAN_MARGINAL: f64 = -1.265_51;

/// Quadrature joint and marginal of the linear-Gaussian model at the origin.
pub fn linear_gaussian_quadrature() -> Result<(f64, f64)> {
    let p = linear_gaussian_model()?;
    let (joint, _) = converge(&latent_box(1, LATENT_BOUND, 0.05)?, ORACLE_TOL, 6, |s| quadrature_log_joint(&p, &[0.0], &[0.0], s))?;
    let marg = marginal_oracle(&p, 0.0)?;
    Ok((joint, marg))
}

// ---------------------------------------------------------------------------
// Gradients

/// Frozen-noise hybrid-loss gradients against central differences.
pub fn hybrid_gradient_report(dims: ModelDims, width: usize, seed: u64, rel_tol: f64) -> Result<GradReport> {
    let base = ModelParams::init(dims, NetworkSpecs::standard(dims, width, false), seed)?;
    let params = with_random_biases(&base, seed, 0.1);
    let mut r = rng(seed, 0x6AD);
    let mut vec_of = |k: usize| -> Vec<f64> { (0..k).map(|_| r.sample::<f64, _>(StandardNormal) * 0.5).collect() };
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..3).map(|_| (vec_of(dims.d_dim), vec_of(dims.h_dim))).collect();
    let images: Vec<Vec<f64>> = (0..3).map(|_| vec_of(dims.d_dim)).collect();
    let lab = LabeledBatch::from_pairs(&pairs)?;
    let unl = UnlabeledBatch::from_images(&images)?;
    let noise = CounterNoise::new(seed, Stream::Train, 0);
    let cfg = EstimatorConfig::default();
    let loss = loss_fn(|v| Ok(hybrid_loss(v, &lab, &unl, cfg, &noise)?.value));
    grad_check(&params, &loss, rel_tol)
}

// ---------------------------------------------------------------------------
// Depth observation model

/// Largest `|∫ b N(x; μ, σ) dx + (1 − b) − 1|` over `pixels` random pixels,
/// integrating the library's masked likelihood on a grid.
pub fn depth_normalization_error(seed: u64, pixels: usize) -> Result<f64> {
    const NODES: usize = 1200;
    let mut r = rng(seed, 0xDE97);
    let mut worst: f64 = 0.0;
    for _ in 0..pixels {
        let mean: f64 = r.sample::<f64, _>(StandardNormal);
        let log_std: f64 = r.random_range(-3.0..1.0);
        let logit: f64 = r.sample::<f64, _>(StandardNormal) * 2.0;
        let std = log_std.exp();
        let (lo, hi) = (mean - 12.0 * std, mean + 12.0 * std);
        let step = (hi - lo) / NODES as f64;
        let rows = NODES + 2;
        let mut values: Vec<f64> = (0..=NODES).map(|k| lo + k as f64 * step).collect();
        values.push(0.0);
        let mut observed = vec![1.0; NODES + 1];
        observed.push(0.0);
        let tape = Tape::new();
        let density = DiagGaussian::new(
            tape.constant(Tensor::filled(&[rows, 1], mean)),
            tape.constant(Tensor::filled(&[rows, 1], log_std)),
        )?;
        let b = ObservationMap::from_logits(tape.constant(Tensor::filled(&[rows, 1], logit)))?;
        let ll = masked_log_likelihood(
            tape.constant(Tensor::new(&[rows, 1], values)?),
            &Tensor::new(&[rows, 1], observed)?,
            &density,
            &b,
        )?;
        let v = ll.value();
        let p = v.data();
        let inner: f64 = p[1..NODES].iter().map(|l| l.exp()).sum();
        let seen = step * (inner + 0.5 * (p[0].exp() + p[NODES].exp()));
        worst = worst.max((seen + p[NODES + 1].exp() - 1.0).abs());
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Objective consistency

/// Relative gap between the summed loss and `b ×` the hybrid loss for equal
/// labeled and unlabeled batch sizes `b`.
pub fn summed_hybrid_gap(seed: u64, b: usize) -> Result<f64> {
    let dims = ModelDims::new(3, 2, 2)?;
    let params = ModelParams::init(dims, NetworkSpecs::standard(dims, 5, false), seed)?;
    let mut r = rng(seed, 0xE67);
    let mut vec_of = |k: usize| -> Vec<f64> { (0..k).map(|_| r.sample::<f64, _>(StandardNormal)).collect() };
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..b).map(|_| (vec_of(3), vec_of(2))).collect();
    let images: Vec<Vec<f64>> = (0..b).map(|_| vec_of(3)).collect();
    let lab = LabeledBatch::from_pairs(&pairs)?;
    let unl = UnlabeledBatch::from_images(&images)?;
    let noise = CounterNoise::new(seed, Stream::Train, 1);
    let cfg = EstimatorConfig::default();
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let hybrid = hybrid_loss(&vars, &lab, &unl, cfg, &noise)?.value.item()?;
    let summed = summed_loss(&vars, Some(&lab), Some(&unl), cfg, &noise)?.value.item()?;
    let scaled = b as f64 * hybrid;
    Ok((summed - scaled).abs() / summed.abs().max(scaled.abs()).max(f64::MIN_POSITIVE))
}

// ---------------------------------------------------------------------------
// Training plumbing

fn tiny_training_setup() -> Result<(SemiDataset, TrainConfig, ModelParams)> {
    let scene = SceneConfig { image_side: 6, num_landmarks: 2, ..SceneConfig::default() };
    let ds = SemiDataset::synthesize(&scene, 10, 10, 6)?;
    let cfg = TrainConfig { batch_size: 4, epochs: 4, eval_every: 3, estimator: EstimatorConfig::new(1, 1)?, mode: Mode::Hybrid, ..TrainConfig::default() };
    let dims = ModelDims::new(ds.d_dim(), ds.h_dim(), 2)?;
    let params = ModelParams::init(dims, NetworkSpecs::standard(dims, 6, false), 3)?;
    Ok((ds, cfg, params))
}

/// Two identical runs give the same ledger, and interrupting at `cut`,
/// round-tripping the checkpoint through bytes and resuming reproduces it.
pub fn resume_matches(cut: u64) -> Result<(bool, bool)> {
    let (ds, cfg, params) = tiny_training_setup()?;
    let full = crate::train::ledger_csv(&Trainer::new(&ds, cfg.clone(), params.clone())?.run()?);
    let again = crate::train::ledger_csv(&Trainer::new(&ds, cfg.clone(), params.clone())?.run()?);
    let mut first = Trainer::new(&ds, cfg.clone(), params)?;
    let mut rows = first.run_until(cut)?;
    let saved = Checkpoint::from_bytes(&first.checkpoint().to_bytes())?;
    let mut second = Trainer::resume(&ds, cfg, saved)?;
    rows.extend(second.run()?);
    Ok((full == again, crate::train::ledger_csv(&rows) == full))
}

// ---------------------------------------------------------------------------

/// Draw counts used by [`run_all`].
#[derive(Clone, Copy, Debug)]
pub struct Budget {
    pub bound_draws: usize,
    pub bound_samples: usize,
    pub pixels: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { bound_draws: 10, bound_samples: 1000, pixels: 200 }
    }
}

pub fn run_all(budget: Budget) -> Vec<Check> {
    let mut out = Vec::new();

    let mut draws = |name: &str, f: fn(u64, usize) -> Result<BoundDraw>| {
        let r = (0..budget.bound_draws as u64)
            .map(|s| f(s, budget.bound_samples))
            .collect::<Result<Vec<_>>>()
            .map(|ds| {
                let ok = ds.iter().filter(|d| d.holds(3.0)).count();
                (ok == ds.len(), format!("{ok}/{} draws within 3 standard errors", ds.len()))
            });
        out.push(Check::from_result("quadrature", name, r));
    };
    draws("full bound below log p(d,h)", full_bound_draw);
    draws("partial bound below log p(d)", partial_bound_draw);

    out.push(Check::from_result(
        "quadrature",
        "linear-Gaussian closed forms",
        linear_gaussian_quadrature().map(|(j, m)| {
            let ok = (j - LINEAR_GAUSSIAN_JOINT).abs() < 1e-4 && (m - LINEAR_GAUSSIAN_MARGINAL).abs() < 1e-4;
            (ok, format!("joint {j:.6}, marginal {m:.6}"))
        }),
    ));
    out.push(Check::from_result(
        "quadrature",
        "Gaussian KL/entropy/density",
        closed_form_quadrature_error(1, 20).map(|e| (e < 1e-6, format!("max error {e:.2e}"))),
    ));
    out.push(Check::from_result(
        "invariants",
        "Gaussian KL/entropy by Monte Carlo",
        closed_form_monte_carlo_z(2, 5, 20_000).map(|z| (z < 4.0, format!("worst deviation {z:.2} standard errors"))),
    ));
    out.push(Check::from_result(
        "gradients",
        "hybrid loss vs central differences",
        ModelDims::new(6, 2, 2).and_then(|d| hybrid_gradient_report(d, 5, 4, 1e-4)).map(|r| {
            let failing: Vec<&str> = r.failures().iter().map(|b| b.name.as_str()).collect();
            (r.passed(), format!("worst relative error {:.2e} over {} blocks; failing {failing:?}", r.worst(), r.blocks.len()))
        }),
    ));
    out.push(Check::from_result(
        "invariants",
        "depth likelihood normalization",
        depth_normalization_error(5, budget.pixels).map(|e| (e < 1e-6, format!("max |mass - 1| {e:.2e}"))),
    ));
    out.push(Check::from_result(
        "invariants",
        "summed loss = b x hybrid loss",
        summed_hybrid_gap(6, 4).map(|g| (g < 1e-12, format!("relative gap {g:.2e}"))),
    ));
    out.push(Check::from_result(
        "invariants",
        "deterministic training and resume",
        resume_matches(5).map(|(det, res)| (det && res, format!("repeat identical: {det}, resume identical: {res}"))),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_draws_hold_for_a_few_seeds() {
        for s in 0..3 {
            let f = full_bound_draw(s, 400).unwrap();
            assert!(f.holds(3.0), "{f:?}");
            let p = partial_bound_draw(s, 400).unwrap();
            assert!(p.holds(3.0), "{p:?}");
            assert!(f.oracle.is_finite() && p.oracle.is_finite());
        }
    }

    #[test]
    fn quick_suite_passes() {
        let checks = run_all(Budget { bound_draws: 2, bound_samples: 200, pixels: 20 });
        for c in &checks {
            assert!(c.passed, "{}", c.line());
        }
    }
}
