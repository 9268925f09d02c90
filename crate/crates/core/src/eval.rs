//! Evaluation metrics, ancestral sampling, latent interpolation and the
//! verification oracles (quadrature log-likelihoods, finite-difference
//! gradient checks).

use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::data::{labeled_batch, LabeledImage};
use crate::depth::sanitize;
use crate::error::{Error, Result};
use crate::gaussian::normal_log_density;
use crate::nn::{ModelParams, ModelVars};
use crate::noise::{CounterNoise, NoiseSource, Offset, Slot, Stream};
use crate::objectives::{elbo_full_batch, EstimatorConfig};
use crate::tensor::Tensor;

const CHUNK: usize = 256;

/// Per-record full-observation bounds, evaluated in fixed-size chunks.
pub fn full_bounds(
    params: &ModelParams,
    records: &[LabeledImage],
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len());
    for (c, chunk) in records.chunks(CHUNK).enumerate() {
        let tape = Tape::new();
        let vars = params.bind(&tape, false);
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let batch = labeled_batch(&refs)?;
        let shifted = Offset { inner: noise, rows: c * CHUNK };
        let rows = elbo_full_batch(&vars, &batch, cfg, &shifted)?;
        out.extend_from_slice(rows.value().data());
    }
    Ok(out)
}

/// Negative mean full-observation bound over `test`, in nats per example.
pub fn test_nll(
    params: &ModelParams,
    test: &[LabeledImage],
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let bounds = full_bounds(params, test, cfg, noise)?;
    Ok(-bounds.iter().sum::<f64>() / bounds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskMetric {
    /// Mean landmark distance divided by the distance between landmarks 0 and 1.
    Interocular,
    /// Euclidean distance between whole label vectors.
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskLoss {
    pub value: f64,
    /// Records dropped because their eye landmarks coincide.
    pub skipped: usize,
}

/// Means of `q(h|d)` for each image.
pub fn predict_labels(params: &ModelParams, records: &[LabeledImage]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let tape = Tape::new();
        let vars = params.bind(&tape, false);
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let batch = labeled_batch(&refs)?;
        let r = vars.predict_h(tape.constant(batch.images))?;
        let mean = r.mean().value().clone();
        out.extend((0..mean.outer()).map(|i| mean.row(i).to_vec()));
    }
    Ok(out)
}

pub fn task_loss_from_predictions(preds: &[Vec<f64>], truths: &[Vec<f64>], metric: TaskMetric) -> Result<TaskLoss> {
    if preds.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if preds.len() != truths.len() {
        return Err(Error::shape("task_loss", format!("{} predictions, {} labels", preds.len(), truths.len())));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (p, g) in preds.iter().zip(truths) {
        if p.len() != g.len() {
            return Err(Error::shape("task_loss", format!("prediction {} vs label {}", p.len(), g.len())));
        }
        match metric {
            TaskMetric::L2 => {
                total += p.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                used += 1;
            }
            TaskMetric::Interocular => {
                if g.len() < 4 || g.len() % 2 != 0 {
                    return Err(Error::Invalid("interocular normalization needs at least two 2-D landmarks".into()));
                }
                let iod = ((g[0] - g[2]).powi(2) + (g[1] - g[3]).powi(2)).sqrt();
                if iod < 1e-9 {
                    skipped += 1;
                    continue;
                }
                let k = g.len() / 2;
                let err: f64 = (0..k)
                    .map(|i| ((p[2 * i] - g[2 * i]).powi(2) + (p[2 * i + 1] - g[2 * i + 1]).powi(2)).sqrt())
                    .sum();
                total += err / k as f64 / iod;
                used += 1;
            }
        }
    }
    if used == 0 {
        return Err(Error::Invalid(format!("all {skipped} records have coincident eye landmarks")));
    }
    Ok(TaskLoss { value: total / used as f64, skipped })
}

/// Label prediction error of the mean of `q(h|d)` on `test`.
pub fn task_loss(params: &ModelParams, test: &[LabeledImage], metric: TaskMetric) -> Result<f64> {
    let preds = predict_labels(params, test)?;
    let truths: Vec<Vec<f64>> = test.iter().map(|r| r.label.clone()).collect();
    Ok(task_loss_from_predictions(&preds, &truths, metric)?.value)
}

// ---------------------------------------------------------------------------
// Quadrature oracle

/// Integration box and per-dimension trapezoid steps.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureSpec {
    pub bounds: Vec<(f64, f64)>,
    pub steps: Vec<f64>,
}

/// Prior coverage required of every latent interval, in standard deviations.
pub const COVER_STDS: f64 = 8.0;
/// Integrand values this far below the peak count as negligible.
const NEGLIGIBLE_NATS: f64 = 40.0;

impl QuadratureSpec {
    pub fn new(bounds: Vec<(f64, f64)>, steps: Vec<f64>) -> Result<Self> {
        if bounds.len() != steps.len() || bounds.is_empty() {
            return Err(Error::Invalid("one step per bounded dimension is required".into()));
        }
        if bounds.iter().any(|(lo, hi)| !(hi > lo)) || steps.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Invalid(format!("bad quadrature box {bounds:?} / steps {steps:?}")));
        }
        Ok(QuadratureSpec { bounds, steps })
    }

    /// Same step in every dimension.
    pub fn uniform(bounds: Vec<(f64, f64)>, step: f64) -> Result<Self> {
        let n = bounds.len();
        QuadratureSpec::new(bounds, vec![step; n])
    }

    pub fn halved(&self) -> Self {
        self.halved_first(self.steps.len())
    }

    /// Halves the steps of the first `k` dimensions only.
    pub fn halved_first(&self, k: usize) -> Self {
        let steps = self.steps.iter().enumerate().map(|(i, s)| if i < k { s / 2.0 } else { *s }).collect();
        QuadratureSpec { bounds: self.bounds.clone(), steps }
    }

    fn axis(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let (lo, hi) = self.bounds[i];
        let n = ((hi - lo) / self.steps[i] - 1e-9).ceil().max(1.0) as usize;
        let h = (hi - lo) / n as f64;
        let nodes = (0..=n).map(|k| lo + k as f64 * h).collect();
        let logw = (0..=n).map(|k| if k == 0 || k == n { (0.5 * h).ln() } else { h.ln() }).collect();
        (nodes, logw)
    }

    /// Tensor-product grid over dimensions `range`: node coordinates, log
    /// weights, and whether each node lies on the boundary.
    fn grid(&self, range: std::ops::Range<usize>) -> (Vec<Vec<f64>>, Vec<f64>, Vec<bool>) {
        let mut pts = vec![Vec::new()];
        let mut logw = vec![0.0];
        let mut edge = vec![false];
        for i in range {
            let (nodes, w) = self.axis(i);
            let last = nodes.len() - 1;
            let mut np = Vec::with_capacity(pts.len() * nodes.len());
            let mut nw = Vec::with_capacity(np.capacity());
            let mut ne = Vec::with_capacity(np.capacity());
            for ((p, pw), pe) in pts.iter().zip(&logw).zip(&edge) {
                for (k, (x, xw)) in nodes.iter().zip(&w).enumerate() {
                    let mut q = p.clone();
                    q.push(*x);
                    np.push(q);
                    nw.push(pw + xw);
                    ne.push(*pe || k == 0 || k == last);
                }
            }
            (pts, logw, edge) = (np, nw, ne);
        }
        (pts, logw, edge)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Decoder outputs at a set of latent points, flattened row-major.
struct DecoderGrid {
    mean_d: Vec<f64>,
    log_std_d: Vec<f64>,
    mean_h: Vec<f64>,
    log_std_h: Vec<f64>,
}

fn decode_grid(params: &ModelParams, zs: &[Vec<f64>]) -> Result<DecoderGrid> {
    let z_dim = params.dims().z_dim;
    let mut g = DecoderGrid { mean_d: Vec::new(), log_std_d: Vec::new(), mean_h: Vec::new(), log_std_h: Vec::new() };
    for chunk in zs.chunks(4096) {
        let tape = Tape::new();
        let vars = params.bind(&tape, false);
        let z = tape.constant(Tensor::from_rows(chunk, z_dim)?);
        let (pd, ph) = vars.decode(z)?;
        g.mean_d.extend_from_slice(pd.mean().value().data());
        g.log_std_d.extend_from_slice(pd.log_std().value().data());
        g.mean_h.extend_from_slice(ph.mean().value().data());
        g.log_std_h.extend_from_slice(ph.log_std().value().data());
    }
    Ok(g)
}

fn check_quadrature_model(params: &ModelParams, d: &[f64], latent_dims: usize) -> Result<()> {
    let dims = params.dims();
    if params.specs().has_mask() {
        return Err(Error::Invalid("the quadrature oracle covers unmasked image models only".into()));
    }
    if dims.z_dim > 2 || latent_dims > 2 {
        return Err(Error::Invalid(format!("quadrature supports at most 2 integration dimensions per variable (z_dim={})", dims.z_dim)));
    }
    if d.len() != dims.d_dim {
        return Err(Error::shape("quadrature", format!("d has {} entries, expected {}", d.len(), dims.d_dim)));
    }
    Ok(())
}

fn check_prior_cover(spec: &QuadratureSpec, z_dim: usize) -> Result<()> {
    for (i, &(lo, hi)) in spec.bounds[..z_dim].iter().enumerate() {
        if lo > -COVER_STDS || hi < COVER_STDS {
            return Err(Error::Coverage(format!(
                "z[{i}] interval [{lo}, {hi}] does not span ±{COVER_STDS} prior standard deviations"
            )));
        }
    }
    Ok(())
}

/// `log ∫ p(d|z) p(z) [· extra(z)] dz` terms per grid node, excluding weights.
fn latent_terms(params: &ModelParams, d: &[f64], zs: &[Vec<f64>], g: &DecoderGrid) -> Vec<f64> {
    let dd = params.dims().d_dim;
    zs.iter()
        .enumerate()
        .map(|(k, z)| {
            let prior: f64 = z.iter().map(|&v| normal_log_density(v, 0.0, 0.0)).sum();
            let image: f64 = (0..dd)
                .map(|i| normal_log_density(d[i], g.mean_d[k * dd + i], g.log_std_d[k * dd + i]))
                .sum();
            prior + image
        })
        .collect()
}

/// `log p(d, h) = log ∫ p(d|z) p(h|z) p(z) dz` by the trapezoidal rule.
pub fn quadrature_log_joint(params: &ModelParams, d: &[f64], h: &[f64], spec: &QuadratureSpec) -> Result<f64> {
    let dims = params.dims();
    check_quadrature_model(params, d, dims.h_dim.min(2))?;
    if h.len() != dims.h_dim {
        return Err(Error::shape("quadrature", format!("h has {} entries, expected {}", h.len(), dims.h_dim)));
    }
    if spec.bounds.len() != dims.z_dim {
        return Err(Error::Invalid(format!("joint quadrature integrates {} latent dims, box has {}", dims.z_dim, spec.bounds.len())));
    }
    check_prior_cover(spec, dims.z_dim)?;
    let (zs, logw, edge) = spec.grid(0..dims.z_dim);
    let g = decode_grid(params, &zs)?;
    let hd = dims.h_dim;
    let terms: Vec<f64> = latent_terms(params, d, &zs, &g)
        .into_iter()
        .enumerate()
        .map(|(k, a)| a + (0..hd).map(|i| normal_log_density(h[i], g.mean_h[k * hd + i], g.log_std_h[k * hd + i])).sum::<f64>())
        .collect();
    let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edge_peak = terms.iter().zip(&edge).filter(|(_, e)| **e).map(|(t, _)| *t).fold(f64::NEG_INFINITY, f64::max);
    if edge_peak > peak - NEGLIGIBLE_NATS {
        return Err(Error::Coverage(format!("integrand at the boundary is {:.1} nats below its peak", peak - edge_peak)));
    }
    Ok(log_sum_exp(terms.iter().zip(&logw).map(|(t, w)| t + w)))
}

/// `log p(d) = log ∬ p(d|z) p(h|z) p(z) dz dh`; the box lists the latent
/// dimensions first, then the label dimensions.
pub fn quadrature_log_marginal(params: &ModelParams, d: &[f64], spec: &QuadratureSpec) -> Result<f64> {
    let dims = params.dims();
    check_quadrature_model(params, d, dims.h_dim)?;
    let (zd, hd) = (dims.z_dim, dims.h_dim);
    if spec.bounds.len() != zd + hd {
        return Err(Error::Invalid(format!("marginal quadrature integrates {} dims, box has {}", zd + hd, spec.bounds.len())));
    }
    check_prior_cover(spec, zd)?;
    let (zs, zw, z_edge) = spec.grid(0..zd);
    let (hs, hw, h_edge) = spec.grid(zd..zd + hd);
    let g = decode_grid(params, &zs)?;
    let a = latent_terms(params, d, &zs, &g);
    let peak = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (k, &ak) in a.iter().enumerate() {
        if ak < peak - NEGLIGIBLE_NATS {
            continue;
        }
        if z_edge[k] {
            return Err(Error::Coverage("latent integrand is not negligible at the boundary".into()));
        }
        for i in 0..hd {
            let (m, s) = (g.mean_h[k * hd + i], g.log_std_h[k * hd + i].exp());
            let (lo, hi) = spec.bounds[zd + i];
            if m - COVER_STDS * s < lo || m + COVER_STDS * s > hi {
                return Err(Error::Coverage(format!(
                    "h[{i}] interval [{lo}, {hi}] misses N({m:.3}, {s:.3}) at ±{COVER_STDS} standard deviations"
                )));
            }
        }
    }
    let _ = h_edge;
    let totals = a.iter().enumerate().map(|(k, &ak)| {
        let inner = log_sum_exp(hs.iter().zip(&hw).map(|(h, w)| {
            w + (0..hd).map(|i| normal_log_density(h[i], g.mean_h[k * hd + i], g.log_std_h[k * hd + i])).sum::<f64>()
        }));
        ak + inner + zw[k]
    });
    Ok(log_sum_exp(totals.collect::<Vec<_>>().into_iter()))
}

/// Box for the joint integral: `±bound` in every latent dimension.
pub fn latent_box(z_dim: usize, bound: f64, step: f64) -> Result<QuadratureSpec> {
    QuadratureSpec::uniform(vec![(-bound, bound); z_dim], step)
}

/// Box for the marginal integral, sized from the decoder's label head over
/// the latent region that carries mass for `d`.
pub fn marginal_box(params: &ModelParams, d: &[f64], z_bound: f64, z_step: f64) -> Result<QuadratureSpec> {
    let dims = params.dims();
    check_quadrature_model(params, d, dims.h_dim)?;
    let latent = latent_box(dims.z_dim, z_bound, z_step)?;
    let (zs, _, _) = latent.grid(0..dims.z_dim);
    let g = decode_grid(params, &zs)?;
    let a = latent_terms(params, d, &zs, &g);
    let peak = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let hd = dims.h_dim;
    let mut lo = vec![f64::INFINITY; hd];
    let mut hi = vec![f64::NEG_INFINITY; hd];
    let mut min_std = vec![f64::INFINITY; hd];
    for (k, &ak) in a.iter().enumerate() {
        if ak < peak - NEGLIGIBLE_NATS {
            continue;
        }
        for i in 0..hd {
            let (m, s) = (g.mean_h[k * hd + i], g.log_std_h[k * hd + i].exp());
            lo[i] = lo[i].min(m - (COVER_STDS + 2.0) * s);
            hi[i] = hi[i].max(m + (COVER_STDS + 2.0) * s);
            min_std[i] = min_std[i].min(s);
        }
    }
    let mut bounds = latent.bounds;
    let mut steps = latent.steps;
    for i in 0..hd {
        bounds.push((lo[i], hi[i]));
        steps.push(min_std[i] / 4.0);
    }
    QuadratureSpec::new(bounds, steps)
}

/// Halves every step until two successive estimates agree within `tol`;
/// returns the finer estimate and the grid that produced it.
pub fn converge(
    spec: &QuadratureSpec,
    tol: f64,
    max_halvings: usize,
    integrate: impl Fn(&QuadratureSpec) -> Result<f64>,
) -> Result<(f64, QuadratureSpec)> {
    converge_with(spec, tol, max_halvings, QuadratureSpec::halved, integrate)
}

/// [`converge`] with a caller-chosen refinement.
pub fn converge_with(
    spec: &QuadratureSpec,
    tol: f64,
    max_refinements: usize,
    refine: impl Fn(&QuadratureSpec) -> QuadratureSpec,
    integrate: impl Fn(&QuadratureSpec) -> Result<f64>,
) -> Result<(f64, QuadratureSpec)> {
    let mut current = spec.clone();
    let mut value = integrate(&current)?;
    for _ in 0..max_refinements {
        let finer = refine(&current);
        let next = integrate(&finer)?;
        if (next - value).abs() < tol {
            return Ok((next, finer));
        }
        (current, value) = (finer, next);
    }
    Err(Error::Coverage(format!("no convergence to {tol} after {max_refinements} refinements")))
}

// ---------------------------------------------------------------------------
// Gradient check

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so exact zeros compare cleanly.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub blocks: Vec<BlockError>,
    pub rel_tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.rel_tol)
    }

    pub fn failures(&self) -> Vec<&BlockError> {
        self.blocks.iter().filter(|b| !(b.max_rel_error < self.rel_tol)).collect()
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Copy of `params` with biases drawn from `U(-scale, scale)`, which moves
/// hidden units off the ReLU kink that zero biases can leave them on.
pub fn with_random_biases(params: &ModelParams, seed: u64, scale: f64) -> ModelParams {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = params.clone();
    for b in 0..out.block_count() {
        if out.blocks()[b].0.ends_with(".bias") {
            for v in out.block_mut(b).data_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }
    out
}

/// Pins a closure to the higher-ranked signature expected by the checks.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&ModelVars<'t>) -> Result<Var<'t>>,
{
    f
}

/// Loss value and reverse-mode gradients of every parameter block.
pub fn analytic_gradients<F>(params: &ModelParams, loss: &F) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'t> Fn(&ModelVars<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = params.bind(&tape, true);
    let l = loss(&vars)?;
    tape.backward(l)?;
    Ok((l.item()?, vars.grads()))
}

fn loss_value<F>(params: &ModelParams, loss: &F) -> Result<f64>
where
    F: for<'t> Fn(&ModelVars<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    loss(&vars)?.item()
}

/// Compares `analytic` against central differences of `loss` entry by entry.
pub fn compare_gradients<F>(params: &ModelParams, analytic: &[Tensor], loss: &F, rel_tol: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&ModelVars<'t>) -> Result<Var<'t>>,
{
    if analytic.len() != params.block_count() {
        return Err(Error::shape("grad_check", format!("{} gradient blocks for {} parameters", analytic.len(), params.block_count())));
    }
    let mut probe = params.clone();
    let mut blocks = Vec::with_capacity(analytic.len());
    for (b, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..grad.len() {
            let orig = probe.blocks()[b].1.data()[i];
            probe.block_mut(b).data_mut()[i] = orig + FD_STEP;
            let up = loss_value(&probe, loss)?;
            probe.block_mut(b).data_mut()[i] = orig - FD_STEP;
            let down = loss_value(&probe, loss)?;
            probe.block_mut(b).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(grad.data()[i], numeric);
            worst = if err.is_nan() { f64::INFINITY } else { worst.max(err) };
        }
        blocks.push(BlockError { name: params.blocks()[b].0.clone(), max_rel_error: worst });
    }
    Ok(GradReport { blocks, rel_tol })
}

/// Finite-difference check of reverse-mode gradients; `loss` must be
/// deterministic (fixed noise).
pub fn grad_check<F>(params: &ModelParams, loss: &F, rel_tol: f64) -> Result<GradReport>
where
    F: for<'t> Fn(&ModelVars<'t>) -> Result<Var<'t>>,
{
    let (_, grads) = analytic_gradients(params, loss)?;
    compare_gradients(params, &grads, loss, rel_tol)
}

// ---------------------------------------------------------------------------
// Sampling and interpolation

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Emit {
    /// Decoder means (and `b ≥ ½` masks).
    Means,
    /// Draws from the decoder Gaussians.
    Samples,
}

/// Decodes latent rows into `(d, h)` records.
fn decode_rows(params: &ModelParams, zs: &Tensor, emit: Emit, noise: &dyn NoiseSource) -> Result<Vec<LabeledImage>> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let dec = vars.decode_all(tape.constant(zs.clone()))?;
    let rows = zs.outer();
    let (images, labels) = match emit {
        Emit::Means => (dec.image.mean().value().clone(), dec.label.mean().value().clone()),
        Emit::Samples => {
            let dims = params.dims();
            let eps_d = noise.matrix(Slot::Pixel, 0, rows, dims.d_dim);
            let eps_h = noise.matrix(Slot::Label, 0, rows, dims.h_dim);
            let image = dec.image.rsample(eps_d)?;
            let label = dec.label.rsample(eps_h)?;
            let out = (image.value().clone(), label.value().clone());
            out
        }
    };
    let masks = match dec.mask_logits {
        Some(l) => Some(l.sigmoid()?.value().clone()),
        None => None,
    };
    Ok((0..rows)
        .map(|r| {
            let observed = masks.as_ref().map(|m| m.row(r).iter().map(|&b| b >= 0.5).collect::<Vec<bool>>());
            let image = match &observed {
                Some(o) => sanitize(images.row(r), o),
                None => images.row(r).to_vec(),
            };
            LabeledImage { image, label: labels.row(r).to_vec(), observed }
        })
        .collect())
}

/// Draws `z ∼ N(0, I)` and decodes `(d, h)`; deterministic in `seed`.
pub fn sample_joint(params: &ModelParams, count: usize, seed: u64, emit: Emit) -> Result<Vec<LabeledImage>> {
    let noise = CounterNoise::new(seed, Stream::Sample, 0);
    let zs = noise.matrix(Slot::Prior, 0, count, params.dims().z_dim);
    decode_rows(params, &zs, emit, &noise)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Encoding {
    /// Mean of `q(z|d,h)`.
    Mean,
    /// One draw from `q(z|d,h)` with the given seed.
    Sample(u64),
}

/// Projects a record onto the latent space.
pub fn encode_latent(params: &ModelParams, record: &LabeledImage, encoding: Encoding) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let vars = params.bind(&tape, false);
    let batch = labeled_batch(&[record])?;
    let q = vars.encode_z(tape.constant(batch.images), tape.constant(batch.labels))?;
    let z = match encoding {
        Encoding::Mean => q.mean(),
        Encoding::Sample(seed) => {
            let noise = CounterNoise::new(seed, Stream::Sample, 0);
            q.rsample(noise.matrix(Slot::Prior, 0, 1, params.dims().z_dim))?
        }
    };
    let out = z.value().data().to_vec();
    Ok(out)
}

/// `steps` equally spaced points from `src` to `dst`, endpoints included.
pub fn interpolate_latents(src: &[f64], dst: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    if steps < 2 {
        return Err(Error::Invalid(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    if src.len() != dst.len() {
        return Err(Error::shape("interpolate", format!("{} vs {}", src.len(), dst.len())));
    }
    Ok((0..steps)
        .map(|k| {
            let t = k as f64 / (steps - 1) as f64;
            src.iter().zip(dst).map(|(a, b)| (1.0 - t) * a + t * b).collect()
        })
        .collect())
}

/// Decoder means along the latent segment between two encoded records.
pub fn interpolate(params: &ModelParams, src: &LabeledImage, dst: &LabeledImage, steps: usize) -> Result<Vec<LabeledImage>> {
    interpolate_with(params, src, dst, steps, Encoding::Mean)
}

pub fn interpolate_with(
    params: &ModelParams,
    src: &LabeledImage,
    dst: &LabeledImage,
    steps: usize,
    encoding: Encoding,
) -> Result<Vec<LabeledImage>> {
    let a = encode_latent(params, src, encoding)?;
    let b = encode_latent(params, dst, encoding)?;
    let path = interpolate_latents(&a, &b, steps)?;
    decode_means(params, &path)
}

pub fn decode_means(params: &ModelParams, zs: &[Vec<f64>]) -> Result<Vec<LabeledImage>> {
    let z = Tensor::from_rows(zs, params.dims().z_dim)?;
    decode_rows(params, &z, Emit::Means, &crate::noise::ZeroNoise)
}

/// Binary PGM of square images laid side by side, scaled to the strip's range.
pub fn pgm_strip(images: &[Vec<f64>], side: usize) -> Result<Vec<u8>> {
    if images.iter().any(|im| im.len() != side * side) {
        return Err(Error::shape("pgm_strip", format!("images must hold {side}×{side} pixels")));
    }
    let lo = images.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = images.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let width = side * images.len();
    let mut out = format!("P5\n{width} {side}\n255\n").into_bytes();
    for r in 0..side {
        for im in images {
            for c in 0..side {
                let v = ((im[r * side + c] - lo) / span * 255.0).round().clamp(0.0, 255.0);
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

pub fn write_pgm_strip(path: impl AsRef<Path>, images: &[Vec<f64>], side: usize) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, pgm_strip(images, side)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ModelDims, NetworkSpecs};
    use crate::objectives::{elbo_full, hybrid_loss, LabeledBatch, UnlabeledBatch};

    fn linear_gaussian() -> ModelParams {
        crate::verify::linear_gaussian_model().unwrap()
    }

    #[test]
    fn linear_gaussian_joint_and_marginal() {
        let p = linear_gaussian();
        let spec = latent_box(1, 10.0, 0.01).unwrap();
        let joint = quadrature_log_joint(&p, &[0.0], &[0.0], &spec).unwrap();
        assert!((joint - (-(2.0 * std::f64::consts::PI).ln() - 0.5 * 3f64.ln())).abs() < 1e-4, "{joint}");
        assert!((joint + 2.38718).abs() < 1e-4);
        let mspec = QuadratureSpec::uniform(vec![(-10.0, 10.0), (-15.0, 15.0)], 0.02).unwrap();
        let marg = quadrature_log_marginal(&p, &[0.0], &mspec).unwrap();
        assert!((marg + 1.26551).abs() < 1e-4, "{marg}");
        let finer = quadrature_log_joint(&p, &[0.0], &[0.0], &spec.halved()).unwrap();
        assert!((finer - joint).abs() < 1e-6);
    }

    #[test]
    fn coverage_is_enforced() {
        let p = linear_gaussian();
        let narrow = latent_box(1, 5.0, 0.01).unwrap();
        assert!(matches!(quadrature_log_joint(&p, &[0.0], &[0.0], &narrow), Err(Error::Coverage(_))));
        let short_h = QuadratureSpec::uniform(vec![(-10.0, 10.0), (-3.0, 3.0)], 0.05).unwrap();
        assert!(matches!(quadrature_log_marginal(&p, &[0.0], &short_h), Err(Error::Coverage(_))));
    }

    #[test]
    fn task_loss_examples() {
        let gt = vec![vec![0.25, 0.5, 0.75, 0.5]];
        let r = task_loss_from_predictions(&gt, &gt, TaskMetric::Interocular).unwrap();
        assert_eq!(r.value, 0.0);
        let pred = vec![vec![0.25, 1.0, 0.75, 0.5]];
        let r = task_loss_from_predictions(&pred, &gt, TaskMetric::Interocular).unwrap();
        assert!((r.value - 0.5).abs() < 1e-15);
        let l2 = task_loss_from_predictions(&[vec![3.0, 4.0]], &[vec![0.0, 0.0]], TaskMetric::L2).unwrap();
        assert_eq!(l2.value, 5.0);
    }

    #[test]
    fn coincident_eyes_are_skipped() {
        let gt = vec![vec![0.5, 0.5, 0.5, 0.5], vec![0.0, 0.0, 1.0, 0.0]];
        let pred = vec![vec![0.0; 4], vec![0.0, 0.0, 1.0, 0.0]];
        let r = task_loss_from_predictions(&pred, &gt, TaskMetric::Interocular).unwrap();
        assert_eq!((r.value, r.skipped), (0.0, 1));
        assert!(task_loss_from_predictions(&pred[..1], &gt[..1], TaskMetric::Interocular).is_err());
    }

    #[test]
    fn interocular_is_translation_invariant() {
        let gt = vec![vec![0.25, 0.5, 0.75, 0.5, 0.5, 0.625]];
        let pred = vec![vec![0.375, 0.5, 0.75, 0.4375, 0.5, 0.75]];
        let a = task_loss_from_predictions(&pred, &gt, TaskMetric::Interocular).unwrap().value;
        let shift = |v: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            v.iter().map(|r| r.iter().enumerate().map(|(i, x)| x + if i % 2 == 0 { 0.25 } else { -0.125 }).collect()).collect()
        };
        let b = task_loss_from_predictions(&shift(&pred), &shift(&gt), TaskMetric::Interocular).unwrap().value;
        assert_eq!(a, b);
    }

    #[test]
    fn constant_model_test_nll() {
        let dims = ModelDims::new(1, 1, 1).unwrap();
        let p = ModelParams::zeros(dims, NetworkSpecs::standard(dims, 3, false)).unwrap();
        let test = vec![LabeledImage { image: vec![0.0], label: vec![0.0], observed: None }];
        let noise = CounterNoise::new(0, Stream::Eval, 0);
        let nll = test_nll(&p, &test, EstimatorConfig::default(), &noise).unwrap();
        assert!((nll - 1.83788).abs() < 1e-5);
    }

    #[test]
    fn test_nll_is_negated_mean_of_single_sample_bounds() {
        let dims = ModelDims::new(2, 2, 1).unwrap();
        let p = ModelParams::init(dims, NetworkSpecs::standard(dims, 4, false), 3).unwrap();
        let test: Vec<LabeledImage> = (0..300)
            .map(|i| {
                let x = i as f64 / 100.0;
                LabeledImage { image: vec![x, -x], label: vec![0.5 * x, 1.0], observed: None }
            })
            .collect();
        let noise = CounterNoise::new(4, Stream::Eval, 0);
        let cfg = EstimatorConfig::default();
        let nll = test_nll(&p, &test, cfg, &noise).unwrap();
        let mut sum = 0.0;
        for (i, r) in test.iter().enumerate() {
            let tape = Tape::new();
            let v = p.bind(&tape, false);
            let shifted = Offset { inner: &noise, rows: i };
            sum += elbo_full(&v, &r.image, &r.label, cfg, &shifted).unwrap().item().unwrap();
        }
        assert!((nll + sum / test.len() as f64).abs() < 1e-10);
    }

    #[test]
    fn quadratic_loss_gradients_are_exact() {
        let dims = ModelDims::new(2, 1, 1).unwrap();
        let p = ModelParams::init(dims, NetworkSpecs::standard(dims, 3, false), 1).unwrap();
        let loss = loss_fn(|v| {
            let mut acc: Option<Var<'_>> = None;
            for &x in v.vars() {
                let s = x.square()?.sum()?;
                acc = Some(match acc {
                    Some(a) => a.add(s)?,
                    None => s,
                });
            }
            Ok(acc.unwrap())
        });
        let report = grad_check(&p, &loss, 1e-8).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn corrupted_gradient_is_reported_by_block() {
        let dims = ModelDims::new(2, 2, 1).unwrap();
        let p = with_random_biases(&ModelParams::init(dims, NetworkSpecs::standard(dims, 3, false), 2).unwrap(), 7, 0.1);
        let lab = LabeledBatch::from_pairs(&[(vec![0.2, 0.4], vec![0.1, -0.3])]).unwrap();
        let unl = UnlabeledBatch::from_images(&[vec![0.5, 0.1]]).unwrap();
        let noise = CounterNoise::new(1, Stream::Train, 0);
        let loss = loss_fn(|v| Ok(hybrid_loss(v, &lab, &unl, EstimatorConfig::default(), &noise)?.value));
        let (_, mut grads) = analytic_gradients(&p, &loss).unwrap();
        let b = p.blocks().iter().position(|(n, _)| n == "decoder.image.0.weight").unwrap();
        let i = grads[b].data().iter().position(|g| g.abs() > 1e-3).unwrap();
        grads[b].data_mut()[i] *= 2.0;
        let report = compare_gradients(&p, &grads, &loss, 1e-4).unwrap();
        let failures = report.failures();
        assert_eq!(failures.len(), 1, "{report:?}");
        assert_eq!(failures[0].name, "decoder.image.0.weight");
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let dims = ModelDims::new(3, 2, 2).unwrap();
        let p = ModelParams::init(dims, NetworkSpecs::standard(dims, 4, false), 5).unwrap();
        let src = LabeledImage { image: vec![0.1, 0.2, 0.3], label: vec![0.4, 0.5], observed: None };
        let dst = LabeledImage { image: vec![-0.3, 0.7, 0.0], label: vec![0.9, 0.1], observed: None };
        let path = interpolate(&p, &src, &dst, 5).unwrap();
        assert_eq!(path.len(), 5);
        let za = encode_latent(&p, &src, Encoding::Mean).unwrap();
        let zb = encode_latent(&p, &dst, Encoding::Mean).unwrap();
        assert_eq!(path[0], decode_means(&p, std::slice::from_ref(&za)).unwrap()[0]);
        assert_eq!(path[4], decode_means(&p, std::slice::from_ref(&zb)).unwrap()[0]);
        let lat = interpolate_latents(&za, &zb, 3).unwrap();
        let mid: Vec<f64> = za.iter().zip(&zb).map(|(a, b)| (a + b) / 2.0).collect();
        assert_eq!(lat[1], mid);
        assert!(interpolate_latents(&za, &zb, 1).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_shaped() {
        let dims = ModelDims::new(4, 2, 2).unwrap();
        let p = ModelParams::init(dims, NetworkSpecs::standard(dims, 4, true), 5).unwrap();
        let a = sample_joint(&p, 6, 11, Emit::Means).unwrap();
        assert_eq!(a, sample_joint(&p, 6, 11, Emit::Means).unwrap());
        for r in a.iter().chain(&sample_joint(&p, 6, 11, Emit::Samples).unwrap()) {
            assert_eq!((r.image.len(), r.label.len()), (4, 2));
            assert_eq!(r.observed.as_ref().unwrap().len(), 4);
        }
        assert_ne!(a, sample_joint(&p, 6, 12, Emit::Means).unwrap());
    }

    #[test]
    fn pgm_header_and_size() {
        let bytes = pgm_strip(&[vec![0.0, 1.0, 0.5, 0.25], vec![1.0; 4]], 2).unwrap();
        assert!(bytes.starts_with(b"P5\n4 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n4 2\n255\n".len() + 8);
    }
}
