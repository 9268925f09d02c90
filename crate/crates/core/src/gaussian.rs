//! Diagonal Normal distributions parameterized by mean and log standard deviation.
//!
//! Parameters may be a single vector `[k]` or a row batch `[B, k]`; every
//! reduction sums over the last axis, so batched inputs give one value per row.

use std::f64::consts::{E, PI};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp for `log σ`.
pub const LOG_STD_MIN: f64 = -7.0;
/// Upper clamp for `log σ`.
pub const LOG_STD_MAX: f64 = 7.0;

/// `½ log 2π`
pub const HALF_LOG_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Log density of a univariate Normal, in plain arithmetic.
pub fn normal_log_density(x: f64, mean: f64, log_std: f64) -> f64 {
    let z = (x - mean) * (-log_std).exp();
    -HALF_LOG_TWO_PI - log_std - 0.5 * z * z
}

#[derive(Clone, Copy)]
pub struct DiagGaussian<'t> {
    mean: Var<'t>,
    log_std: Var<'t>,
}

impl<'t> DiagGaussian<'t> {
    /// Builds the distribution, clamping `log σ` into `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub fn new(mean: Var<'t>, log_std: Var<'t>) -> Result<Self> {
        if mean.shape() != log_std.shape() {
            return Err(Error::shape(
                "DiagGaussian",
                format!("mean {:?} vs log_std {:?}", mean.shape(), log_std.shape()),
            ));
        }
        let log_std = log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)?;
        Ok(DiagGaussian { mean, log_std })
    }

    /// Splits a `[.., 2k]` network output into mean (first half) and `log σ`.
    pub fn from_packed(packed: Var<'t>) -> Result<Self> {
        let width = packed.value().last_dim();
        if !width.is_multiple_of(2) {
            return Err(Error::shape("DiagGaussian::from_packed", format!("odd width {width}")));
        }
        let k = width / 2;
        DiagGaussian::new(packed.slice(0, k)?, packed.slice(k, width)?)
    }

    pub fn mean(&self) -> Var<'t> {
        self.mean
    }

    pub fn log_std(&self) -> Var<'t> {
        self.log_std
    }

    pub fn dim(&self) -> usize {
        self.mean.value().last_dim()
    }

    fn check(&self, x: Var<'t>, op: &'static str) -> Result<()> {
        if x.shape() != self.mean.shape() {
            return Err(Error::shape(op, format!("x {:?} vs mean {:?}", x.shape(), self.mean.shape())));
        }
        Ok(())
    }

    /// Per-coordinate log density terms, before summation.
    pub fn log_pdf_terms(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.check(x, "log_pdf")?;
        let inv_var = self.log_std.scale(-2.0)?.exp()?;
        let quad = x.sub(self.mean)?.square()?.mul(inv_var)?.scale(-0.5)?;
        quad.sub(self.log_std)?.add_scalar(-HALF_LOG_TWO_PI)
    }

    /// `Σ_i −½ log 2π − log σ_i − (x_i − μ_i)² / 2σ_i²`
    pub fn log_pdf(&self, x: Var<'t>) -> Result<Var<'t>> {
        self.log_pdf_terms(x)?.sum_last_axis()
    }

    /// `½ Σ_i (μ_i² + σ_i² − 1 − 2 log σ_i)`
    pub fn kl_to_standard_normal(&self) -> Result<Var<'t>> {
        let var = self.log_std.scale(2.0)?.exp()?;
        let terms = self.mean.square()?.add(var)?.sub(self.log_std.scale(2.0)?)?.add_scalar(-1.0)?;
        terms.sum_last_axis()?.scale(0.5)
    }

    /// `(k/2) log 2πe + Σ_i log σ_i`
    pub fn entropy(&self) -> Result<Var<'t>> {
        let k = self.dim() as f64;
        self.log_std.sum_last_axis()?.add_scalar(0.5 * k * (2.0 * PI * E).ln())
    }

    /// Reparametrized draw `μ + σ ⊙ ε`; gradients reach μ and `log σ`, never ε.
    pub fn rsample(&self, noise: Tensor) -> Result<Var<'t>> {
        if noise.shape() != self.mean.value().shape() {
            return Err(Error::shape(
                "rsample",
                format!("noise {:?} vs mean {:?}", noise.shape(), self.mean.shape()),
            ));
        }
        let eps = self.mean.tape().constant(noise);
        self.mean.add(self.log_std.exp()?.mul(eps)?)
    }
}
