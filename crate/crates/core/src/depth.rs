//! Observation model for images with missing pixels.
//!
//! Each pixel is observed with probability `b_u`; an observed pixel carries a
//! Gaussian value, an unobserved one carries nothing. The likelihood sums the
//! two per-pixel states exactly.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::gaussian::DiagGaussian;
use crate::nn::ModelVars;
use crate::tensor::Tensor;

/// Observation probabilities are clamped into `[PROB_FLOOR, 1 − PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-6;

/// Pixel values plus an observed flag per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    pub values: Vec<f64>,
    pub observed: Vec<bool>,
}

impl MaskedImage {
    pub fn new(values: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        if values.len() != observed.len() {
            return Err(Error::shape(
                "MaskedImage",
                format!("{} values vs {} mask entries", values.len(), observed.len()),
            ));
        }
        Ok(MaskedImage { values, observed })
    }

    /// Values with unobserved slots replaced by zero, so they can never reach
    /// any likelihood or gradient.
    pub fn sanitized(&self) -> Vec<f64> {
        sanitize(&self.values, &self.observed)
    }

    pub fn observed_fraction(&self) -> f64 {
        self.observed.iter().filter(|&&o| o).count() as f64 / self.observed.len().max(1) as f64
    }
}

pub(crate) fn sanitize(values: &[f64], observed: &[bool]) -> Vec<f64> {
    values.iter().zip(observed).map(|(&v, &o)| if o { v } else { 0.0 }).collect()
}

/// Per-pixel observation probabilities `b`.
#[derive(Clone, Copy)]
pub struct ObservationMap<'t> {
    probs: Var<'t>,
}

impl<'t> ObservationMap<'t> {
    /// `clamp(sigmoid(logits))`
    pub fn from_logits(logits: Var<'t>) -> Result<Self> {
        Ok(ObservationMap { probs: logits.sigmoid()?.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)? })
    }

    /// Wraps probabilities directly, applying the same clamp.
    pub fn from_probs(probs: Var<'t>) -> Result<Self> {
        Ok(ObservationMap { probs: probs.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)? })
    }

    pub fn probs(&self) -> Var<'t> {
        self.probs
    }
}

/// Observation map predicted by the decoder's mask head at `z`.
pub fn decode_mask<'t>(vars: &ModelVars<'t>, z: Var<'t>) -> Result<ObservationMap<'t>> {
    let logits = vars
        .decode_all(z)?
        .mask_logits
        .ok_or_else(|| Error::Invalid("model has no observation-mask head".into()))?;
    ObservationMap::from_logits(logits)
}

/// `Σ_u [ o_u (log b_u + log N(d_u; μ_u, σ_u)) + (1 − o_u) log(1 − b_u) ]`
///
/// `values` and `observed` share the density's shape (`[k]` or `[B, k]`);
/// `observed` holds 1.0/0.0 flags. Unobserved value slots must already be
/// sanitized (see [`MaskedImage::sanitized`]).
pub fn masked_log_likelihood<'t>(
    values: Var<'t>,
    observed: &Tensor,
    density: &DiagGaussian<'t>,
    b: &ObservationMap<'t>,
) -> Result<Var<'t>> {
    let shape = density.mean().shape();
    if values.shape() != shape || observed.shape() != shape.as_slice() || b.probs.shape() != shape {
        return Err(Error::shape(
            "masked_log_likelihood",
            format!(
                "pixel counts differ: values {:?}, mask {:?}, density {shape:?}, map {:?}",
                values.shape(),
                observed.shape(),
                b.probs.shape()
            ),
        ));
    }
    let tape = values.tape();
    let on = tape.constant(observed.clone());
    let off = tape.constant(Tensor::new(observed.shape(), observed.data().iter().map(|o| 1.0 - o).collect())?);
    let seen = b.probs.log()?.add(density.log_pdf_terms(values)?)?.mul(on)?;
    let unseen = b.probs.scale(-1.0)?.add_scalar(1.0)?.log()?.mul(off)?;
    seen.add(unseen)?.sum_last_axis()
}

/// Float 0/1 mask tensor from boolean flags.
pub fn mask_tensor(shape: &[usize], observed: &[bool]) -> Result<Tensor> {
    Tensor::new(shape, observed.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect())
}
