//! Monte Carlo estimators of the two variational bounds and the losses built
//! from them.
//!
//! * full-observation bound `L_F(d, h) = E_{q(z|d,h)}[log p(d,h|z)] − KL(q(z|d,h) ‖ N(0,I))`
//! * partial-observation bound
//!   `L_P(d) = E_{q(h|d)}[ E_{q(z|d,h)}[log p(d,h|z)] − KL(q(z|d,h) ‖ N(0,I)) ] + H(q(h|d))`
//!
//! Both are lower bounds on a log-likelihood; losses are their negation so
//! trainers minimize. All expectations use reparametrized draws, the entropy
//! and KL terms are analytic.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::depth::{masked_log_likelihood, ObservationMap};
use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::nn::{Decoded, ModelVars};
use crate::noise::{NoiseSource, Slot};
use crate::tensor::Tensor;

/// Sample counts for the `z` and `h` expectations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub s_z: usize,
    pub s_h: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig { s_z: 3, s_h: 3 }
    }
}

impl EstimatorConfig {
    pub fn new(s_z: usize, s_h: usize) -> Result<Self> {
        if s_z == 0 || s_h == 0 {
            return Err(Error::Invalid(format!("sample counts must be positive (s_z={s_z}, s_h={s_h})")));
        }
        Ok(EstimatorConfig { s_z, s_h })
    }
}

/// Images with labels; rows are samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Tensor,
    /// 1.0/0.0 observation flags shaped like `images` (masked data only).
    pub observed: Option<Tensor>,
}

/// Images without labels.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledBatch {
    pub images: Tensor,
    pub observed: Option<Tensor>,
}

fn check_observed(images: &Tensor, observed: &Option<Tensor>) -> Result<()> {
    if let Some(o) = observed {
        if o.shape() != images.shape() {
            return Err(Error::shape("batch", format!("mask {:?} vs images {:?}", o.shape(), images.shape())));
        }
    }
    Ok(())
}

impl LabeledBatch {
    pub fn new(images: Tensor, labels: Tensor, observed: Option<Tensor>) -> Result<Self> {
        if images.shape().len() != 2 || labels.shape().len() != 2 || images.shape()[0] != labels.shape()[0] {
            return Err(Error::shape(
                "LabeledBatch",
                format!("images {:?} vs labels {:?}", images.shape(), labels.shape()),
            ));
        }
        check_observed(&images, &observed)?;
        Ok(LabeledBatch { images, labels, observed })
    }

    /// Batch of fully observed `(d, h)` pairs.
    pub fn from_pairs(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<Self> {
        let first = pairs.first().ok_or(Error::Empty("labeled batch"))?;
        let images: Vec<&[f64]> = pairs.iter().map(|(d, _)| d.as_slice()).collect();
        let labels: Vec<&[f64]> = pairs.iter().map(|(_, h)| h.as_slice()).collect();
        LabeledBatch::new(Tensor::from_rows(&images, first.0.len())?, Tensor::from_rows(&labels, first.1.len())?, None)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl UnlabeledBatch {
    pub fn new(images: Tensor, observed: Option<Tensor>) -> Result<Self> {
        if images.shape().len() != 2 {
            return Err(Error::shape("UnlabeledBatch", format!("images {:?}", images.shape())));
        }
        check_observed(&images, &observed)?;
        Ok(UnlabeledBatch { images, observed })
    }

    pub fn from_images(images: &[Vec<f64>]) -> Result<Self> {
        let first = images.first().ok_or(Error::Empty("unlabeled batch"))?;
        UnlabeledBatch::new(Tensor::from_rows(images, first.len())?, None)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Noise shaped like `like` (a vector or a row batch).
fn draw(noise: &dyn NoiseSource, slot: Slot, like: &DiagGaussian<'_>) -> Tensor {
    let shape = like.mean().shape();
    let width = *shape.last().unwrap_or(&1);
    let rows = if shape.len() >= 2 { shape[0] } else { 1 };
    let m = noise.matrix(slot, 0, rows, width);
    m.reshape(&shape).expect("same element count")
}

/// `log p(d | z)`: plain Gaussian, or the masked model when the decoder has
/// an observation head.
pub fn image_log_likelihood<'t>(dec: &Decoded<'t>, images: Var<'t>, observed: Option<&Tensor>) -> Result<Var<'t>> {
    match (dec.mask_logits, observed) {
        (Some(logits), obs) => {
            let b = ObservationMap::from_logits(logits)?;
            let obs = match obs {
                Some(o) => o.clone(),
                None => Tensor::filled(&images.shape(), 1.0),
            };
            masked_log_likelihood(images, &obs, &dec.image, &b)
        }
        (None, Some(_)) => Err(Error::Invalid("masked images need a model with an observation-mask head".into())),
        (None, None) => dec.image.log_pdf(images),
    }
}

/// `L_F` per row of `images`/`labels` (`[B, ·]` gives `[B]`, vectors give a scalar).
pub fn elbo_full_rows<'t>(
    vars: &ModelVars<'t>,
    images: Var<'t>,
    labels: Var<'t>,
    observed: Option<&Tensor>,
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Var<'t>> {
    let q = vars.encode_z(images, labels)?;
    let kl = q.kl_to_standard_normal()?;
    let mut acc: Option<Var<'t>> = None;
    for j in 0..cfg.s_z {
        let z = q.rsample(draw(noise, Slot::FullZ(j as u32), &q))?;
        let dec = vars.decode_all(z)?;
        let ll = image_log_likelihood(&dec, images, observed)?.add(dec.label.log_pdf(labels)?)?;
        acc = Some(match acc {
            Some(a) => a.add(ll)?,
            None => ll,
        });
    }
    let acc = acc.ok_or(Error::Invalid("s_z must be positive".into()))?;
    acc.scale(1.0 / cfg.s_z as f64)?.sub(kl)
}

/// `L_P` per row of `images`.
pub fn elbo_partial_rows<'t>(
    vars: &ModelVars<'t>,
    images: Var<'t>,
    observed: Option<&Tensor>,
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Var<'t>> {
    if cfg.s_z == 0 || cfg.s_h == 0 {
        return Err(Error::Invalid("sample counts must be positive".into()));
    }
    let features = vars.encode_image_features(images)?;
    let r = vars.predict_h(images)?;
    let entropy = r.entropy()?;
    let mut outer: Option<Var<'t>> = None;
    for i in 0..cfg.s_h {
        let h = r.rsample(draw(noise, Slot::PartialH(i as u32), &r))?;
        let q = vars.encode_z_from_features(features, h)?;
        let kl = q.kl_to_standard_normal()?;
        let mut inner: Option<Var<'t>> = None;
        for j in 0..cfg.s_z {
            let z = q.rsample(draw(noise, Slot::PartialZ(i as u32, j as u32), &q))?;
            let dec = vars.decode_all(z)?;
            let ll = image_log_likelihood(&dec, images, observed)?.add(dec.label.log_pdf(h)?)?;
            inner = Some(match inner {
                Some(a) => a.add(ll)?,
                None => ll,
            });
        }
        let term = inner.expect("s_z > 0").scale(1.0 / cfg.s_z as f64)?.sub(kl)?;
        outer = Some(match outer {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    outer.expect("s_h > 0").scale(1.0 / cfg.s_h as f64)?.add(entropy)
}

/// `L_F` for every row of a labeled batch.
pub fn elbo_full_batch<'t>(
    vars: &ModelVars<'t>,
    batch: &LabeledBatch,
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Var<'t>> {
    let tape = vars.tape();
    let d = tape.constant(batch.images.clone());
    let h = tape.constant(batch.labels.clone());
    elbo_full_rows(vars, d, h, batch.observed.as_ref(), cfg, noise)
}

/// `L_P` for every row of an unlabeled batch.
pub fn elbo_partial_batch<'t>(
    vars: &ModelVars<'t>,
    batch: &UnlabeledBatch,
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Var<'t>> {
    let d = vars.tape().constant(batch.images.clone());
    elbo_partial_rows(vars, d, batch.observed.as_ref(), cfg, noise)
}

/// Single-sample `L_F(d, h)`.
pub fn elbo_full<'t>(
    vars: &ModelVars<'t>,
    d: &[f64],
    h: &[f64],
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Var<'t>> {
    let tape = vars.tape();
    let d = tape.constant(Tensor::vector(d.to_vec()));
    let h = tape.constant(Tensor::vector(h.to_vec()));
    elbo_full_rows(vars, d, h, None, cfg, noise)
}

/// Single-sample `L_P(d)`.
pub fn elbo_partial<'t>(
    vars: &ModelVars<'t>,
    d: &[f64],
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Var<'t>> {
    let d = vars.tape().constant(Tensor::vector(d.to_vec()));
    elbo_partial_rows(vars, d, None, cfg, noise)
}

/// A loss together with its batch-mean bound terms (for diagnostics).
#[derive(Clone, Copy)]
pub struct Loss<'t> {
    pub value: Var<'t>,
    /// Batch mean of `L_F`, when a labeled batch contributed.
    pub full: Option<Var<'t>>,
    /// Batch mean of `L_P`, when an unlabeled batch contributed.
    pub partial: Option<Var<'t>>,
}

/// `−(mean L_F + mean L_P)` from per-sample bound values.
pub fn hybrid_from_terms<'t>(full_rows: Var<'t>, partial_rows: Var<'t>) -> Result<Loss<'t>> {
    if full_rows.value().is_empty() {
        return Err(Error::Empty("labeled batch (request a pure-F loss explicitly)"));
    }
    if partial_rows.value().is_empty() {
        return Err(Error::Empty("unlabeled batch (request a pure-P loss explicitly)"));
    }
    let f = full_rows.mean()?;
    let p = partial_rows.mean()?;
    Ok(Loss { value: f.add(p)?.neg()?, full: Some(f), partial: Some(p) })
}

/// `−(Σ L_F + Σ L_P)` from per-sample bound values; either side may be absent.
pub fn summed_from_terms<'t>(full_rows: Option<Var<'t>>, partial_rows: Option<Var<'t>>) -> Result<Loss<'t>> {
    let f = full_rows.filter(|v| !v.value().is_empty()).map(|v| v.sum()).transpose()?;
    let p = partial_rows.filter(|v| !v.value().is_empty()).map(|v| v.sum()).transpose()?;
    let total = match (f, p) {
        (Some(f), Some(p)) => f.add(p)?,
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => return Err(Error::Empty("labeled and unlabeled batches")),
    };
    Ok(Loss { value: total.neg()?, full: f, partial: p })
}

/// Hybrid objective: both sums weighted equally through batch means.
pub fn hybrid_loss<'t>(
    vars: &ModelVars<'t>,
    labeled: &LabeledBatch,
    unlabeled: &UnlabeledBatch,
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Loss<'t>> {
    if labeled.is_empty() {
        return Err(Error::Empty("labeled batch (request a pure-F loss explicitly)"));
    }
    if unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled batch (request a pure-P loss explicitly)"));
    }
    let f = elbo_full_batch(vars, labeled, cfg, noise)?;
    let p = elbo_partial_batch(vars, unlabeled, cfg, noise)?;
    hybrid_from_terms(f, p)
}

/// Labeled-only loss `−mean L_F`.
pub fn full_loss<'t>(
    vars: &ModelVars<'t>,
    labeled: &LabeledBatch,
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Loss<'t>> {
    if labeled.is_empty() {
        return Err(Error::Empty("labeled batch"));
    }
    let f = elbo_full_batch(vars, labeled, cfg, noise)?.mean()?;
    Ok(Loss { value: f.neg()?, full: Some(f), partial: None })
}

/// Unlabeled-only loss `−mean L_P`.
pub fn partial_loss<'t>(
    vars: &ModelVars<'t>,
    unlabeled: &UnlabeledBatch,
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Loss<'t>> {
    if unlabeled.is_empty() {
        return Err(Error::Empty("unlabeled batch"));
    }
    let p = elbo_partial_batch(vars, unlabeled, cfg, noise)?.mean()?;
    Ok(Loss { value: p.neg()?, full: None, partial: Some(p) })
}

/// Unweighted sum of bounds over both batches.
pub fn summed_loss<'t>(
    vars: &ModelVars<'t>,
    labeled: Option<&LabeledBatch>,
    unlabeled: Option<&UnlabeledBatch>,
    cfg: EstimatorConfig,
    noise: &dyn NoiseSource,
) -> Result<Loss<'t>> {
    let f = labeled.filter(|b| !b.is_empty()).map(|b| elbo_full_batch(vars, b, cfg, noise)).transpose()?;
    let p = unlabeled.filter(|b| !b.is_empty()).map(|b| elbo_partial_batch(vars, b, cfg, noise)).transpose()?;
    summed_from_terms(f, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gaussian::HALF_LOG_TWO_PI;
    use crate::nn::{ModelDims, ModelParams, NetworkSpecs};
    use crate::noise::{CounterNoise, Stream, ZeroNoise};

    fn scalar_zero_model() -> ModelParams {
        let dims = ModelDims::new(1, 1, 1).unwrap();
        ModelParams::zeros(dims, NetworkSpecs::standard(dims, 4, false)).unwrap()
    }

    fn tiny_random(seed: u64) -> ModelParams {
        let dims = ModelDims::new(1, 1, 1).unwrap();
        ModelParams::init(dims, NetworkSpecs::standard(dims, 6, false), seed).unwrap()
    }

    #[test]
    fn hybrid_and_summed_arithmetic() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::vector(vec![2.0, 4.0]));
        let p = tape.constant(Tensor::vector(vec![3.0, 3.0, 3.0]));
        assert_eq!(hybrid_from_terms(f, p).unwrap().value.item().unwrap(), -6.0);
        assert_eq!(summed_from_terms(Some(f), Some(p)).unwrap().value.item().unwrap(), -15.0);
        let one = tape.constant(Tensor::vector(vec![2.5]));
        assert_eq!(summed_from_terms(Some(one), None).unwrap().value.item().unwrap(), -2.5);
        assert!(summed_from_terms(None, None).is_err());
        let empty = tape.constant(Tensor::zeros(&[0]));
        assert!(hybrid_from_terms(empty, p).is_err());
        assert!(hybrid_from_terms(f, empty).is_err());
    }

    #[test]
    fn constant_model_full_bound() {
        let p = scalar_zero_model();
        for s_z in [1, 3, 7] {
            let tape = Tape::new();
            let v = p.bind(&tape, false);
            let noise = CounterNoise::new(1, Stream::Train, 0);
            let cfg = EstimatorConfig::new(s_z, 1).unwrap();
            let lf = elbo_full(&v, &[0.0], &[0.0], cfg, &noise).unwrap().item().unwrap();
            assert!((lf + 2.0 * HALF_LOG_TWO_PI).abs() < 1e-12, "{lf}");
            assert!((lf + 1.83788).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_noise_full_bound_is_direct_composition() {
        let p = tiny_random(4);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let cfg = EstimatorConfig::new(1, 1).unwrap();
        let lf = elbo_full(&v, &[0.3], &[-0.6], cfg, &ZeroNoise).unwrap().item().unwrap();
        let d = tape.constant(Tensor::vector(vec![0.3]));
        let h = tape.constant(Tensor::vector(vec![-0.6]));
        let q = v.encode_z(d, h).unwrap();
        let (pd, ph) = v.decode(q.mean()).unwrap();
        let manual = pd.log_pdf(d).unwrap().item().unwrap() + ph.log_pdf(h).unwrap().item().unwrap()
            - q.kl_to_standard_normal().unwrap().item().unwrap();
        assert_eq!(lf, manual);
    }

    #[test]
    fn zero_noise_partial_bound_is_direct_composition() {
        let p = tiny_random(9);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let cfg = EstimatorConfig::new(1, 1).unwrap();
        let lp = elbo_partial(&v, &[0.8], cfg, &ZeroNoise).unwrap().item().unwrap();
        let d = tape.constant(Tensor::vector(vec![0.8]));
        let r = v.predict_h(d).unwrap();
        let h = r.mean();
        let q = v.encode_z(d, h).unwrap();
        let (pd, ph) = v.decode(q.mean()).unwrap();
        let manual = pd.log_pdf(d).unwrap().item().unwrap() + ph.log_pdf(h).unwrap().item().unwrap()
            - q.kl_to_standard_normal().unwrap().item().unwrap()
            + r.entropy().unwrap().item().unwrap();
        assert!((lp - manual).abs() < 1e-12, "{lp} vs {manual}");
    }

    #[test]
    fn constant_model_partial_bound() {
        // q(h|d) = p(h|z) = N(0,1): E[log N(h)] + H cancels, leaving log N(d=0).
        let p = scalar_zero_model();
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let n = 20_000;
        let d = tape.constant(Tensor::zeros(&[n, 1]));
        let cfg = EstimatorConfig::new(1, 1).unwrap();
        let noise = CounterNoise::new(5, Stream::Eval, 0);
        let rows = elbo_partial_rows(&v, d, None, cfg, &noise).unwrap();
        let vals = rows.value().data().to_vec();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((mean + HALF_LOG_TWO_PI).abs() < 4.0 * sd / (n as f64).sqrt(), "{mean}");
        // With every draw at its mean, h = 0 and the value is log N(0) + log N(0) + H = −½ log 2π + ½.
        let single = elbo_partial(&v, &[0.0], cfg, &ZeroNoise).unwrap().item().unwrap();
        assert!((single - (0.5 - HALF_LOG_TWO_PI)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_noise_matches_single_sample() {
        struct Repeat(CounterNoise);
        impl NoiseSource for Repeat {
            fn fill(&self, slot: Slot, row: usize, out: &mut [f64]) {
                let slot = match slot {
                    Slot::FullZ(_) => Slot::FullZ(0),
                    Slot::PartialZ(i, _) => Slot::PartialZ(i, 0),
                    s => s,
                };
                self.0.fill(slot, row, out)
            }
        }
        let p = tiny_random(2);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let base = CounterNoise::new(8, Stream::Train, 3);
        let one = elbo_full(&v, &[0.2], &[0.1], EstimatorConfig::new(1, 1).unwrap(), &base).unwrap();
        let two = elbo_full(&v, &[0.2], &[0.1], EstimatorConfig::new(2, 1).unwrap(), &Repeat(base)).unwrap();
        assert_eq!(one.item().unwrap(), two.item().unwrap());
        let one = elbo_partial(&v, &[0.2], EstimatorConfig::new(1, 1).unwrap(), &base).unwrap();
        let two = elbo_partial(&v, &[0.2], EstimatorConfig::new(2, 1).unwrap(), &Repeat(base)).unwrap();
        assert_eq!(one.item().unwrap(), two.item().unwrap());
    }

    #[test]
    fn hybrid_requires_both_batches() {
        let p = tiny_random(1);
        let tape = Tape::new();
        let v = p.bind(&tape, true);
        let lab = LabeledBatch::from_pairs(&[(vec![0.1], vec![0.2])]).unwrap();
        let empty = UnlabeledBatch::new(Tensor::zeros(&[0, 1]), None).unwrap();
        let noise = CounterNoise::new(0, Stream::Train, 0);
        assert!(matches!(
            hybrid_loss(&v, &lab, &empty, EstimatorConfig::default(), &noise),
            Err(Error::Empty(_))
        ));
        let f = full_loss(&v, &lab, EstimatorConfig::default(), &noise).unwrap();
        let rows = elbo_full_batch(&v, &lab, EstimatorConfig::default(), &noise).unwrap();
        assert_eq!(f.value.item().unwrap(), -rows.value().data()[0]);
    }

    #[test]
    fn summed_is_batch_size_times_hybrid() {
        let p = tiny_random(6);
        let tape = Tape::new();
        let v = p.bind(&tape, false);
        let lab = LabeledBatch::from_pairs(&[(vec![0.1], vec![0.2]), (vec![-0.4], vec![0.9])]).unwrap();
        let unl = UnlabeledBatch::from_images(&[vec![0.5], vec![-1.0]]).unwrap();
        let noise = CounterNoise::new(3, Stream::Train, 1);
        let cfg = EstimatorConfig::default();
        let h = hybrid_loss(&v, &lab, &unl, cfg, &noise).unwrap().value.item().unwrap();
        let s = summed_loss(&v, Some(&lab), Some(&unl), cfg, &noise).unwrap().value.item().unwrap();
        assert!((s - 2.0 * h).abs() <= 1e-12 * s.abs());
    }
}
