//! Naive dense mean-field smoothing, kept only as a runtime and quality
//! comparator for TAR. This is a simplified stand-in, not the permutohedral
//! fully-connected CRF implementation.
//!
//! Every iteration replaces each label with the kernel-weighted mean of all
//! other labels, using a Gaussian kernel over pixel position and RGB:
//!
//! ```text
//! k(i,j) = exp(-|pos_i - pos_j|^2 / (2 theta_pos^2) - |rgb_i - rgb_j|^2 / (2 theta_rgb^2))
//! ```
//!
//! Cost is quadratic in the pixel count.

use super::{Guidance, SoftLabel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanFieldConfig {
    /// Positional bandwidth in pixels.
    pub theta_pos: f64,
    /// Colour bandwidth for RGB in `[0,1]`.
    pub theta_rgb: f64,
    /// Largest accepted image area in pixels.
    pub max_area: usize,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self {
            theta_pos: 80.0,
            theta_rgb: 13.0 / 255.0,
            max_area: 16_384,
        }
    }
}

pub fn baseline_meanfield(
    label: &SoftLabel,
    rgb: &Guidance,
    iters: usize,
    cfg: &MeanFieldConfig,
) -> Result<SoftLabel> {
    let (h, w) = label.dims();
    let (c, gh, gw) = rgb.dims();
    if (gh, gw) != (h, w) {
        return Err(Error::shape(format!(
            "label is {h}x{w} but rgb is {gh}x{gw}"
        )));
    }
    let n = h * w;
    if n > cfg.max_area {
        return Err(Error::config(format!(
            "mean-field baseline is O(N^2): {h}x{w} = {n} pixels exceeds the cap of {}; crop the image first",
            cfg.max_area
        )));
    }
    if !(cfg.theta_pos > 0.0 && cfg.theta_rgb > 0.0) {
        return Err(Error::config("mean-field bandwidths must be positive"));
    }
    if iters == 0 || n < 2 {
        return Ok(label.clone());
    }

    let pos_scale = (1.0 / (2.0 * cfg.theta_pos * cfg.theta_pos)) as f32;
    let rgb_scale = (1.0 / (2.0 * cfg.theta_rgb * cfg.theta_rgb)) as f32;
    let src = rgb.values().data();
    // Scaled features so the kernel exponent is a plain squared distance.
    let dims = 2 + c;
    let mut feat = vec![0f32; n * dims];
    for p in 0..n {
        let f = &mut feat[p * dims..(p + 1) * dims];
        f[0] = (p / w) as f32 * pos_scale.sqrt();
        f[1] = (p % w) as f32 * pos_scale.sqrt();
        for ch in 0..c {
            f[2 + ch] = src[ch * n + p] * rgb_scale.sqrt();
        }
    }

    let mut q: Vec<f32> = label.values().data().to_vec();
    let mut next = vec![0f32; n];
    for _ in 0..iters {
        for i in 0..n {
            let fi = &feat[i * dims..(i + 1) * dims];
            let mut num = 0f64;
            let mut den = 0f64;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let fj = &feat[j * dims..(j + 1) * dims];
                let d2: f32 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
                let k = (-d2).exp() as f64;
                num += k * q[j] as f64;
                den += k;
            }
            next[i] = if den > 0.0 { (num / den) as f32 } else { q[i] };
        }
        std::mem::swap(&mut q, &mut next);
    }
    SoftLabel::new(Tensor::new(&[h, w], q)?)
}
