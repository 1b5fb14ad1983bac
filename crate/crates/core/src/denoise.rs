//! Perona–Malik anisotropic diffusion on single-channel images.
//!
//! Explicit 4-neighbour scheme with replicate-edge (zero-flux) boundaries:
//!
//! ```text
//! I' = I + lambda * sum_{d in N,S,E,W} c(grad_d, kappa) * grad_d
//! ```
//!
//! where `grad_d` is the neighbour minus the centre pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conductance {
    /// `exp(-(g/kappa)^2)`, favours high-contrast edges.
    #[default]
    Exponential,
    /// `1 / (1 + (g/kappa)^2)`, favours wide regions over small ones.
    Rational,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionParams {
    pub iterations: usize,
    pub lambda: f64,
    /// Edge threshold on the raw 0–255 intensity scale.
    pub kappa: f64,
    pub variant: Conductance,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        DiffusionParams {
            iterations: 10,
            lambda: 0.14,
            kappa: 30.0,
            variant: Conductance::Exponential,
        }
    }
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<()> {
        // lambda = 0 is accepted and yields the identity.
        if !(0.0..=0.25).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "diffusion lambda must lie in [0, 0.25], got {}",
                self.lambda
            )));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::invalid(format!(
                "diffusion kappa must be positive, got {}",
                self.kappa
            )));
        }
        Ok(())
    }
}

pub fn conductance(gradient: f64, kappa: f64, variant: Conductance) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::invalid(format!("kappa must be positive, got {kappa}")));
    }
    Ok(conductance_unchecked(gradient, kappa, variant))
}

#[inline]
fn conductance_unchecked(gradient: f64, kappa: f64, variant: Conductance) -> f64 {
    let r = gradient / kappa;
    match variant {
        Conductance::Exponential => (-(r * r)).exp(),
        Conductance::Rational => 1.0 / (1.0 + r * r),
    }
}

/// One explicit diffusion step.
pub fn diffuse_step(img: &Image, params: &DiffusionParams) -> Result<Image> {
    if img.channels() != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "diffusion expects a single-channel image, got {} channels",
            img.channels()
        )));
    }
    params.validate()?;
    let (h, w) = (img.height(), img.width());
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    let DiffusionParams {
        lambda,
        kappa,
        variant,
        ..
    } = *params;
    let flux = |g: f64| conductance_unchecked(g, kappa, variant) * g;

    for y in 0..h {
        let up = if y == 0 { 0 } else { y - 1 };
        let down = if y + 1 == h { y } else { y + 1 };
        for x in 0..w {
            let left = if x == 0 { 0 } else { x - 1 };
            let right = if x + 1 == w { x } else { x + 1 };
            let p = src[y * w + x];
            let n = src[up * w + x];
            let s = src[down * w + x];
            let e = src[y * w + right];
            let wv = src[y * w + left];
            // Pairing opposite neighbours keeps the sum invariant under flips.
            let total = (flux(n - p) + flux(s - p)) + (flux(e - p) + flux(wv - p));
            let lo = p.min(n).min(s).min(e).min(wv);
            let hi = p.max(n).max(s).max(e).max(wv);
            // The update is a convex combination of p and its neighbours;
            // the clamp only removes rounding overshoot.
            out[y * w + x] = (p + lambda * total).clamp(lo, hi);
        }
    }
    Image::new(h, w, 1, out)
}

/// Applies [`diffuse_step`] `params.iterations` times.
pub fn denoise(img: &Image, params: &DiffusionParams) -> Result<Image> {
    if img.channels() != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "diffusion expects a single-channel image, got {} channels",
            img.channels()
        )));
    }
    params.validate()?;
    let mut current = img.clone();
    for _ in 0..params.iterations {
        current = diffuse_step(&current, params)?;
    }
    Ok(current)
}

/// Anisotropic total variation: sum of absolute forward differences.
pub fn total_variation(img: &Image) -> f64 {
    let (h, w) = (img.height(), img.width());
    let d = img.data();
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            let p = d[y * w + x];
            if x + 1 < w {
                tv += (d[y * w + x + 1] - p).abs();
            }
            if y + 1 < h {
                tv += (d[(y + 1) * w + x] - p).abs();
            }
        }
    }
    tv
}
