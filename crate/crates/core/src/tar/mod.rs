//! Text adaptive refinement (TAR).
//!
//! A soft foreground label is refined by repeatedly replacing every pixel with
//! a convex combination of the labels in its neighbourhood:
//!
//! ```text
//! p'(x) = sum_{a in A(x)} softmax_a( kbar(V_x, V_a) ) * p(a)
//! kbar(V_x, V_a) = mean_c( -|V_x,c - V_a,c| / sigma_x,c^2 )
//! ```
//!
//! `A(x)` is the `(2r+1)^2` window around `x` clipped at the image border,
//! excluding `x` itself unless [`RefineConfig::include_center`] is set.
//! `sigma_x,c` is the standard deviation of guidance channel `c` over the full
//! (clipped) window of `x`, centre included, floored at
//! [`RefineConfig::sigma_floor`]. With [`SigmaMode::Global`] one deviation per
//! channel is taken over the whole image instead.
//!
//! Refinement runs in two stages: a few iterations guided by backbone
//! features, then more iterations guided by the RGB image. Labels are not
//! renormalised between stages.
//!
//! Each step reads only the previous label, so pixels can be processed in any
//! order or partition.

mod meanfield;

pub use meanfield::{baseline_meanfield, MeanFieldConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel foreground belief, `[H,W]`, every entry in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel(Tensor);

impl SoftLabel {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims2("soft label")?;
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Degenerate(format!(
                "soft label value {v} outside [0,1]"
            )));
        }
        Ok(Self(values))
    }

    /// Min-max normalises arbitrary finite values into `[0,1]`; a constant map becomes zeros.
    pub fn normalized(values: &Tensor) -> Result<Self> {
        values.dims2("soft label")?;
        if !values.is_finite() {
            return Err(Error::Degenerate("non-finite value in label".into()));
        }
        Ok(Self(min_max_normalize(values)))
    }

    pub fn constant(h: usize, w: usize, v: f32) -> Result<Self> {
        Self::new(Tensor::full(&[h, w], v))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.0.shape();
        (s[0], s[1])
    }
}

/// Visual guidance `[C_g,H,W]` steering the refinement.
#[derive(Debug, Clone, PartialEq)]
pub struct Guidance(Tensor);

impl Guidance {
    pub fn new(values: Tensor) -> Result<Self> {
        let (c, _, _) = values.dims3("guidance")?;
        if c == 0 {
            return Err(Error::shape("guidance needs at least one channel"));
        }
        if !values.is_finite() {
            return Err(Error::Degenerate("non-finite guidance value".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SigmaMode {
    /// Deviation over each pixel's own window.
    Window,
    /// One deviation per channel over the whole image.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub kernel_radius: usize,
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub sigma_floor: f64,
    pub include_center: bool,
    pub binarize_threshold: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            kernel_radius: 1,
            iters_stage1: 2,
            iters_stage2: 8,
            sigma_floor: 1e-4,
            include_center: false,
            binarize_threshold: 0.5,
            sigma_mode: SigmaMode::Window,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_radius < 1 {
            return Err(Error::config("kernel_radius must be >= 1"));
        }
        if !(self.sigma_floor > 0.0 && self.sigma_floor.is_finite()) {
            return Err(Error::config("sigma_floor must be positive"));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::config("binarize_threshold must lie in (0,1)"));
        }
        Ok(())
    }
}

/// Channel-mean of `-|vx - vy| / sigma^2`. `sigma` must already be floored.
pub fn kernel_affinity(vx: &[f64], vy: &[f64], sigma: &[f64]) -> f64 {
    debug_assert!(vx.len() == vy.len() && vx.len() == sigma.len());
    let sum: f64 = vx
        .iter()
        .zip(vy)
        .zip(sigma)
        .map(|((a, b), s)| -(a - b).abs() / (s * s))
        .sum();
    sum / vx.len() as f64
}

/// Inclusive window bounds of radius `r` around `i`, clipped to `[0, n)`.
#[inline(always)]
fn window(i: usize, r: usize, n: usize) -> (usize, usize) {
    (i.saturating_sub(r), (i + r).min(n - 1))
}

/// Guidance in pixel-major (`[H,W,C]`) order plus per-channel global
/// inverse variances when requested.
struct PreparedGuidance {
    hwc: Vec<f32>,
    channels: usize,
    global_inv_var: Option<Vec<f64>>,
}

impl PreparedGuidance {
    fn new(g: &Guidance, cfg: &RefineConfig) -> Self {
        let (c, h, w) = g.dims();
        let n = h * w;
        let src = g.values().data();
        let mut hwc = vec![0f32; n * c];
        for ch in 0..c {
            for (p, &v) in src[ch * n..(ch + 1) * n].iter().enumerate() {
                hwc[p * c + ch] = v;
            }
        }
        let global_inv_var = (cfg.sigma_mode == SigmaMode::Global).then(|| {
            (0..c)
                .map(|ch| {
                    let plane = &src[ch * n..(ch + 1) * n];
                    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                    let var = plane
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>()
                        / n as f64;
                    let sigma = var.sqrt().max(cfg.sigma_floor);
                    1.0 / (sigma * sigma)
                })
                .collect()
        });
        Self {
            hwc,
            channels: c,
            global_inv_var,
        }
    }

    #[inline(always)]
    fn pixel(&self, p: usize) -> &[f32] {
        &self.hwc[p * self.channels..(p + 1) * self.channels]
    }
}

/// One refinement step over every pixel.
pub fn tar_step(label: &SoftLabel, guidance: &Guidance, cfg: &RefineConfig) -> Result<SoftLabel> {
    cfg.validate()?;
    check_shapes(label, guidance)?;
    let prepared = PreparedGuidance::new(guidance, cfg);
    Ok(step_prepared(label, &prepared, cfg))
}

fn check_shapes(label: &SoftLabel, guidance: &Guidance) -> Result<()> {
    let (h, w) = label.dims();
    let (_, gh, gw) = guidance.dims();
    if (h, w) != (gh, gw) {
        return Err(Error::shape(format!(
            "label is {h}x{w} but guidance is {gh}x{gw}"
        )));
    }
    Ok(())
}

fn step_prepared(label: &SoftLabel, g: &PreparedGuidance, cfg: &RefineConfig) -> SoftLabel {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { step_avx2(label, g, cfg) };
    }
    step_generic(label, g, cfg)
}

/// Same code compiled with wider vectors. No FMA, so results match the
/// generic path bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn step_avx2(label: &SoftLabel, g: &PreparedGuidance, cfg: &RefineConfig) -> SoftLabel {
    step_generic(label, g, cfg)
}

#[inline(always)]
fn step_generic(label: &SoftLabel, g: &PreparedGuidance, cfg: &RefineConfig) -> SoftLabel {
    let (h, w) = label.dims();
    let c = g.channels;
    let r = cfg.kernel_radius;
    let prev = label.values().data();
    let inv_c = 1.0 / c as f64;
    let floor2 = cfg.sigma_floor * cfg.sigma_floor;
    let windowed = g.global_inv_var.is_none();

    let mut out = Vec::with_capacity(h * w);
    // Per-column sums of guidance and squared guidance over the current row window.
    let mut col_sum = vec![0f64; if windowed { w * c } else { 0 }];
    let mut col_sq = vec![0f64; col_sum.len()];
    let mut inv_var = vec![0f64; c];
    let mut wsum = vec![0f64; c];
    let mut logits: Vec<f64> = Vec::with_capacity((2 * r + 1).pow(2));
    let mut values: Vec<f64> = Vec::with_capacity((2 * r + 1).pow(2));

    for y in 0..h {
        let (y0, y1) = window(y, r, h);
        if windowed {
            col_sum.fill(0.0);
            col_sq.fill(0.0);
            for yy in y0..=y1 {
                let row = &g.hwc[yy * w * c..(yy + 1) * w * c];
                for ((s, q), &v) in col_sum.iter_mut().zip(col_sq.iter_mut()).zip(row) {
                    let v = v as f64;
                    *s += v;
                    *q += v * v;
                }
            }
        }
        for x in 0..w {
            let (x0, x1) = window(x, r, w);
            let p = y * w + x;
            let centre = g.pixel(p);

            let inv_var: &[f64] = match &g.global_inv_var {
                Some(global) => global,
                None => {
                    let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                    wsum.copy_from_slice(&col_sum[x0 * c..(x0 + 1) * c]);
                    inv_var.copy_from_slice(&col_sq[x0 * c..(x0 + 1) * c]);
                    for xx in x0 + 1..=x1 {
                        for (d, &v) in wsum.iter_mut().zip(&col_sum[xx * c..(xx + 1) * c]) {
                            *d += v;
                        }
                        for (d, &v) in inv_var.iter_mut().zip(&col_sq[xx * c..(xx + 1) * c]) {
                            *d += v;
                        }
                    }
                    for (q, &s) in inv_var.iter_mut().zip(&wsum) {
                        let mu = s / count;
                        let var = (*q / count - mu * mu).max(0.0);
                        *q = 1.0 / var.max(floor2);
                    }
                    &inv_var
                }
            };

            logits.clear();
            values.clear();
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let a = yy * w + xx;
                    if a == p && !cfg.include_center {
                        continue;
                    }
                    logits.push(-weighted_l1(centre, g.pixel(a), inv_var) * inv_c);
                    values.push(prev[a] as f64);
                }
            }
            out.push(if logits.is_empty() {
                // 1x1 image with the centre excluded: nothing to average.
                prev[p]
            } else {
                softmax_combine(&logits, &values) as f32
            });
        }
    }
    SoftLabel(Tensor::new(&[h, w], out).expect("shape preserved"))
}

/// `sum_c |a_c - b_c| * w_c`, split over independent accumulators.
#[inline(always)]
fn weighted_l1(a: &[f32], b: &[f32], w: &[f64]) -> f64 {
    const LANES: usize = 4;
    let split = a.len() / LANES * LANES;
    let mut acc = [0f64; LANES];
    for ((ca, cb), cw) in a[..split]
        .chunks_exact(LANES)
        .zip(b[..split].chunks_exact(LANES))
        .zip(w[..split].chunks_exact(LANES))
    {
        for k in 0..LANES {
            acc[k] += (ca[k] as f64 - cb[k] as f64).abs() * cw[k];
        }
    }
    let mut sum: f64 = acc.iter().sum();
    for ((&x, &y), &v) in a[split..].iter().zip(&b[split..]).zip(&w[split..]) {
        sum += (x as f64 - y as f64).abs() * v;
    }
    sum
}

/// `sum_i softmax(logits)_i * values_i`.
#[inline(always)]
fn softmax_combine(logits: &[f64], values: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (&l, &v) in logits.iter().zip(values) {
        let e = (l - max).exp();
        num += e * v;
        den += e;
    }
    num / den
}

/// `iters` successive [`tar_step`]s; zero iterations returns the input unchanged.
pub fn refine(
    label: &SoftLabel,
    guidance: &Guidance,
    iters: usize,
    cfg: &RefineConfig,
) -> Result<SoftLabel> {
    cfg.validate()?;
    check_shapes(label, guidance)?;
    if iters == 0 {
        return Ok(label.clone());
    }
    let prepared = PreparedGuidance::new(guidance, cfg);
    let mut cur = step_prepared(label, &prepared, cfg);
    for _ in 1..iters {
        cur = step_prepared(&cur, &prepared, cfg);
    }
    Ok(cur)
}

/// Feature-guided refinement for `cfg.iters_stage1` steps, then RGB-guided
/// refinement for `cfg.iters_stage2` steps.
pub fn two_stage_refine(
    seed: &SoftLabel,
    features: &Guidance,
    rgb: &Guidance,
    cfg: &RefineConfig,
) -> Result<SoftLabel> {
    let (h, w) = seed.dims();
    for (name, g) in [("feature", features), ("rgb", rgb)] {
        let (_, gh, gw) = g.dims();
        if (gh, gw) != (h, w) {
            return Err(Error::shape(format!(
                "{name} guidance is {gh}x{gw}, seed is {h}x{w}; resize guidance to the seed resolution"
            )));
        }
    }
    let stage1 = refine(seed, features, cfg.iters_stage1, cfg)?;
    refine(&stage1, rgb, cfg.iters_stage2, cfg)
}

fn min_max_normalize(t: &Tensor) -> Tensor {
    match t.min_max() {
        Some((lo, hi)) if hi > lo => {
            let (lo, span) = (lo as f64, (hi - lo) as f64);
            t.map(|v| ((v as f64 - lo) / span) as f32)
        }
        _ => Tensor::zeros(t.shape()),
    }
}

/// Min-max normalises the label, then marks entries `>= threshold` as 1.
/// A constant label yields all zeros.
pub fn binarize(label: &SoftLabel, threshold: f64) -> Tensor {
    binarize_tensor(label.values(), threshold)
}

pub(crate) fn binarize_tensor(t: &Tensor, threshold: f64) -> Tensor {
    min_max_normalize(t).map(|v| if v as f64 >= threshold { 1.0 } else { 0.0 })
}
