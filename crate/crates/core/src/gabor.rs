//! Fixed multi-orientation Gabor filter banks and the residual texture
//! layer built on them.
//!
//! Kernel `θ` at offset `(x, y)` from the kernel centre is
//!
//! ```text
//! g(x, y) = exp(-(x'^2 + γ^2 y'^2) / (2σ^2)) · cos(2π x'/λ + ψ)
//! x' =  x cosθ + y sinθ
//! y' = -x sinθ + y cosθ
//! ```
//!
//! after which every kernel is shifted to zero mean and scaled to unit L2
//! norm. `x` runs along image columns and `y` along rows.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GaborParams {
    /// Wavelength of the carrier, in pixels.
    pub wavelength: f64,
    /// Orientations in radians, distinct and within `[0, π)`.
    pub orientations: Vec<f64>,
    pub phase: f64,
    /// Gaussian envelope standard deviation, in pixels.
    pub sigma: f64,
    /// Spatial aspect ratio of the envelope.
    pub aspect: f64,
    /// Odd kernel side length.
    pub size: usize,
}

impl Default for GaborParams {
    fn default() -> Self {
        GaborParams {
            wavelength: 4.0,
            orientations: vec![0.0, PI / 4.0, PI / 2.0, 3.0 * PI / 4.0],
            phase: 0.0,
            sigma: 2.0,
            aspect: 0.5,
            size: 3,
        }
    }
}

impl GaborParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("gabor: {m}")));
        if self.size % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if !(self.wavelength > 0.0 && self.sigma > 0.0 && self.aspect > 0.0) {
            return bad("wavelength, sigma and aspect must be positive");
        }
        if self.orientations.is_empty() {
            return bad("at least one orientation is required");
        }
        for (i, &t) in self.orientations.iter().enumerate() {
            if !(0.0..PI).contains(&t) {
                return bad("orientations must lie in [0, pi)");
            }
            if self.orientations[..i].contains(&t) {
                return bad("orientations must be distinct");
            }
        }
        Ok(())
    }

    /// Unnormalized kernel response at offset `(x, y)` for orientation `theta`.
    pub fn raw_value(&self, theta: f64, x: f64, y: f64) -> f64 {
        let (s, c) = theta.sin_cos();
        let xr = x * c + y * s;
        let yr = -x * s + y * c;
        let envelope = (-(xr * xr + self.aspect * self.aspect * yr * yr)
            / (2.0 * self.sigma * self.sigma))
            .exp();
        envelope * (2.0 * PI * xr / self.wavelength + self.phase).cos()
    }
}

/// Builds the bank as a `[n_orient, 1, k, k]` tensor of zero-mean,
/// unit-norm kernels.
pub fn make_gabor_bank(params: &GaborParams) -> Result<Tensor> {
    params.validate()?;
    let k = params.size;
    let half = (k / 2) as f64;
    let mut data = Vec::with_capacity(params.orientations.len() * k * k);
    for &theta in &params.orientations {
        let mut kern: Vec<f64> = (0..k * k)
            .map(|i| {
                let (row, col) = (i / k, i % k);
                params.raw_value(theta, col as f64 - half, row as f64 - half)
            })
            .collect();
        let mean = kern.iter().sum::<f64>() / kern.len() as f64;
        kern.iter_mut().for_each(|v| *v -= mean);
        let norm = kern.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            kern.iter_mut().for_each(|v| *v /= norm);
        }
        data.extend(kern);
    }
    Tensor::new([params.orientations.len(), 1, k, k], data)
}

/// Residual Gabor texture layer: every channel is filtered by every fixed
/// kernel, a learned 1×1 convolution (`mix_weight [C, C·K, 1, 1]`,
/// `mix_bias [C]`) maps the responses back to `C` channels, and the result
/// is added to the input.
pub fn gabor_layer(
    tape: &mut Tape,
    features: Var,
    bank: &Arc<Tensor>,
    mix_weight: Var,
    mix_bias: Var,
) -> Result<Var> {
    let responses = tape.depthwise_fixed(features, Arc::clone(bank))?;
    let mixed = tape.conv2d(responses, mix_weight, Some(mix_bias), 1, 0)?;
    tape.add(features, mixed)
}
