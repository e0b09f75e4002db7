//! Mask-augmented contrastive objective.
//!
//! For a batch of `(P_i, P_p)` pairs (projection of an image and of its
//! segmentation-masked copy) the loss is
//!
//! ```text
//! L_c = sum_i l(P_i, P_p, N_i) + sum_i l(P_p, P_i, N_i)
//! l(a, b, N) = -log( exp(sim(a,b)/tau) / sum_{n in N} exp(sim(a,n)/tau) )
//! ```
//!
//! where `N_i` holds the raw-image projections of every other batch item and
//! `sim` is cosine similarity. By default the denominator runs over the
//! negatives only, so `l` can be negative; [`Denominator::WithPositive`] gives
//! the usual InfoNCE form. Per-item terms are summed in index order.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::init;
use crate::pyramid::ConvLayer;
use crate::tensor::{conv2d, relu, Archive, Tensor, Tensor64};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_LAMBDA_REC: f64 = 1.0;
pub const DEFAULT_LAMBDA_C: f64 = 0.1;

/// Embedding of an image or of its masked version.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection(Tensor64);

impl Projection {
    pub fn new(v: Vec<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::shape(format!(
                "projection needs >= 2 entries, got {}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Degenerate("non-finite projection".into()));
        }
        Ok(Self(Tensor::new(&[v.len()], v)?))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.data()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(image projection, masked-image projection)` per item.
    pub items: Vec<(Projection, Projection)>,
}

impl Batch {
    pub fn new(items: Vec<(Projection, Projection)>) -> Result<Self> {
        if items.len() < 2 {
            return Err(Error::Degenerate(format!(
                "contrastive batch needs >= 2 items, got {}",
                items.len()
            )));
        }
        let d = items[0].0.dim();
        if items.iter().any(|(a, b)| a.dim() != d || b.dim() != d) {
            return Err(Error::shape(
                "projections in a batch must share one dimension",
            ));
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Raw-image projections of every item except `i`.
    pub fn negatives(&self, i: usize) -> Vec<&Projection> {
        self.items
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, (img, _))| img)
            .collect()
    }

    /// Draws a batch with entries uniform in `[-1, 1]` from a seeded stream.
    pub fn random(seed: u64, stream: u64, size: usize, dim: usize) -> Result<Self> {
        let mut rng = init::rng_for(seed, stream);
        let mut draw = || -> Result<Projection> {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
                if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                    return Projection::new(v);
                }
            }
        };
        let items = (0..size)
            .map(|_| Ok((draw()?, draw()?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Denominator {
    /// Sum over negatives only.
    #[default]
    NegativesOnly,
    /// Positive pair added to the denominator (standard InfoNCE).
    WithPositive,
}

/// Pointwise stem, global average pool and a linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    /// 1x1 conv `[C_f, C_img, 1, 1]`, followed by ReLU.
    pub stem: ConvLayer,
    /// `[Dp, C_f]`.
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

impl ProjectionWeights {
    pub fn seeded(seed: u64, image_channels: usize, features: usize, dim: usize) -> Self {
        Self {
            stem: ConvLayer::seeded(seed, "proj.stem", features, image_channels, 1),
            fc_weight: init::fan_in_uniform(seed, "proj.fc.weight", &[dim, features], features),
            fc_bias: init::fan_in_uniform(seed, "proj.fc.bias", &[dim], features),
        }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        Ok(Self {
            stem: ConvLayer::from_archive(a, "proj.stem")?,
            fc_weight: a.get("proj.fc.weight")?.clone(),
            fc_bias: a.get("proj.fc.bias")?.clone(),
        })
    }

    pub fn store(&self, a: &mut Archive) {
        self.stem.store(a, "proj.stem");
        a.insert("proj.fc.weight", self.fc_weight.clone());
        a.insert("proj.fc.bias", self.fc_bias.clone());
    }
}

/// Projects `[C,H,W]` to a `Dp` vector.
pub fn project(image: &Tensor, w: &ProjectionWeights) -> Result<Projection> {
    let feat = relu(&conv2d(image, &w.stem.weight, &w.stem.bias, 1, 0)?);
    let (cf, h, wd) = feat.dims3("projection features")?;
    let n = (h * wd) as f64;
    let pooled: Vec<f64> = (0..cf)
        .map(|c| {
            feat.data()[c * h * wd..(c + 1) * h * wd]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / n
        })
        .collect();
    let (dp, k) = w.fc_weight.dims2("proj.fc.weight")?;
    if k != cf || w.fc_bias.shape() != [dp] {
        return Err(Error::shape(
            "projection layer inconsistent with stem width",
        ));
    }
    let fw = w.fc_weight.data();
    let out = (0..dp)
        .map(|r| {
            w.fc_bias.data()[r] as f64
                + (0..k)
                    .map(|c| fw[r * k + c] as f64 * pooled[c])
                    .sum::<f64>()
        })
        .collect();
    Projection::new(out)
}

/// `image ⊙ mask`, the mask broadcast across channels.
pub fn mask_image(image: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (c, h, w) = image.dims3("image")?;
    mask.expect_shape(&[h, w])?;
    let m = mask.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        image.data()[i] * m[i % (h * w)]
    }))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine_sim(a: &Projection, b: &Projection) -> Result<f64> {
    cosine(a.as_slice(), b.as_slice())
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine similarity of vectors with different lengths",
        ));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "cosine similarity of a zero vector".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn l_nce(
    anchor: &Projection,
    positive: &Projection,
    negatives: &[&Projection],
    tau: f64,
    denominator: Denominator,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    if negatives.is_empty() {
        return Err(Error::Degenerate(
            "l_nce needs at least one negative".into(),
        ));
    }
    let pos = cosine_sim(anchor, positive)? / tau;
    let mut logits = negatives
        .iter()
        .map(|n| Ok(cosine_sim(anchor, n)? / tau))
        .collect::<Result<Vec<_>>>()?;
    if denominator == Denominator::WithPositive {
        logits.push(pos);
    }
    Ok(log_sum_exp(logits.iter().copied()) - pos)
}

pub fn contrastive_loss(batch: &Batch, tau: f64, denominator: Denominator) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::Degenerate(
            "contrastive batch needs >= 2 items".into(),
        ));
    }
    let mut total = 0.0;
    for (i, (img, masked)) in batch.items.iter().enumerate() {
        let negs = batch.negatives(i);
        total += l_nce(img, masked, &negs, tau, denominator)?;
        total += l_nce(masked, img, &negs, tau, denominator)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: DEFAULT_LAMBDA_REC,
            lambda_c: DEFAULT_LAMBDA_C,
        }
    }
}

/// `l_seg + lambda_rec * l_rec + lambda_c * l_c`.
pub fn total_loss(l_seg: f64, l_rec: f64, l_c: f64, w: LossWeights) -> f64 {
    debug_assert!(w.lambda_rec >= 0.0 && w.lambda_c >= 0.0);
    l_seg + w.lambda_rec * l_rec + w.lambda_c * l_c
}

/// Gradients of [`contrastive_loss`] with respect to every projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub images: Vec<Vec<f64>>,
    pub masked: Vec<Vec<f64>>,
}

/// Accumulates `coef * d sim(a,b) / d a` into `ga` and `coef * d sim(a,b) / d b` into `gb`.
fn add_sim_grad(
    a: &[f64],
    b: &[f64],
    coef: f64,
    ga: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) -> Result<()> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "gradient of cosine similarity at a zero vector".into(),
        ));
    }
    let s = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    if let Some(ga) = ga {
        for ((g, &x), &y) in ga.iter_mut().zip(a).zip(b) {
            *g += coef * (y / (na * nb) - s * x / (na * na));
        }
    }
    if let Some(gb) = gb {
        for ((g, &x), &y) in gb.iter_mut().zip(a).zip(b) {
            *g += coef * (x / (na * nb) - s * y / (nb * nb));
        }
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Slot {
    Image(usize),
    Masked(usize),
}

pub fn contrastive_grad(
    batch: &Batch,
    tau: f64,
    denominator: Denominator,
) -> Result<ContrastiveGrad> {
    if !(tau > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let n = batch.len();
    if n < 2 {
        return Err(Error::Degenerate(
            "contrastive batch needs >= 2 items".into(),
        ));
    }
    let d = batch.items[0].0.dim();
    let mut grads = ContrastiveGrad {
        images: vec![vec![0.0; d]; n],
        masked: vec![vec![0.0; d]; n],
    };
    let vec_of = |s: Slot| match s {
        Slot::Image(i) => batch.items[i].0.as_slice(),
        Slot::Masked(i) => batch.items[i].1.as_slice(),
    };

    for i in 0..n {
        for (anchor, positive) in [
            (Slot::Image(i), Slot::Masked(i)),
            (Slot::Masked(i), Slot::Image(i)),
        ] {
            let a = vec_of(anchor);
            let negs: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let pos_logit = cosine(a, vec_of(positive))? / tau;
            let mut logits = negs
                .iter()
                .map(|&j| Ok(cosine(a, vec_of(Slot::Image(j)))? / tau))
                .collect::<Result<Vec<_>>>()?;
            if denominator == Denominator::WithPositive {
                logits.push(pos_logit);
            }
            let lse = log_sum_exp(logits.iter().copied());
            let weights: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();

            // d l / d sim(anchor, positive)
            let mut pos_coef = -1.0 / tau;
            if denominator == Denominator::WithPositive {
                pos_coef += weights[negs.len()] / tau;
            }
            let mut ga = vec![0.0; d];
            let mut gp = vec![0.0; d];
            add_sim_grad(a, vec_of(positive), pos_coef, Some(&mut ga), Some(&mut gp))?;
            for (k, &j) in negs.iter().enumerate() {
                let mut gn = vec![0.0; d];
                add_sim_grad(
                    a,
                    vec_of(Slot::Image(j)),
                    weights[k] / tau,
                    Some(&mut ga),
                    Some(&mut gn),
                )?;
                accumulate(&mut grads, Slot::Image(j), &gn);
            }
            accumulate(&mut grads, anchor, &ga);
            accumulate(&mut grads, positive, &gp);
        }
    }
    Ok(grads)
}

fn accumulate(grads: &mut ContrastiveGrad, slot: Slot, g: &[f64]) {
    let target = match slot {
        Slot::Image(i) => &mut grads.images[i],
        Slot::Masked(i) => &mut grads.masked[i],
    };
    for (t, v) in target.iter_mut().zip(g) {
        *t += v;
    }
}

/// Relative error used by the gradient check: `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Central finite-difference gradient of [`contrastive_loss`] with step `h`.
pub fn numeric_grad(
    batch: &Batch,
    tau: f64,
    denominator: Denominator,
    h: f64,
) -> Result<ContrastiveGrad> {
    let n = batch.len();
    let d = batch.items[0].0.dim();
    let mut out = ContrastiveGrad {
        images: vec![vec![0.0; d]; n],
        masked: vec![vec![0.0; d]; n],
    };
    for i in 0..n {
        for which in 0..2 {
            for k in 0..d {
                let eval = |delta: f64| -> Result<f64> {
                    let mut b = batch.clone();
                    let target = if which == 0 {
                        &mut b.items[i].0
                    } else {
                        &mut b.items[i].1
                    };
                    let mut v = target.as_slice().to_vec();
                    v[k] += delta;
                    *target = Projection::new(v)?;
                    contrastive_loss(&b, tau, denominator)
                };
                let g = (eval(h)? - eval(-h)?) / (2.0 * h);
                if which == 0 {
                    out.images[i][k] = g;
                } else {
                    out.masked[i][k] = g;
                }
            }
        }
    }
    Ok(out)
}

/// Largest [`relative_error`] between analytic and finite-difference gradients.
pub fn gradcheck(batch: &Batch, tau: f64, denominator: Denominator, h: f64) -> Result<f64> {
    let a = contrastive_grad(batch, tau, denominator)?;
    let n = numeric_grad(batch, tau, denominator, h)?;
    let pairs = a
        .images
        .iter()
        .flatten()
        .zip(n.images.iter().flatten())
        .chain(a.masked.iter().flatten().zip(n.masked.iter().flatten()));
    Ok(pairs
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub batches: usize,
    /// Inclusive batch size range.
    pub sizes: (usize, usize),
    /// Inclusive projection dimension range.
    pub dims: (usize, usize),
    pub tau: f64,
    pub denominator: Denominator,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batches: 50,
            sizes: (2, 8),
            dims: (4, 16),
            tau: DEFAULT_TAU,
            denominator: Denominator::NegativesOnly,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckCase {
    pub size: usize,
    pub dim: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Gradient checks on random batches with sizes and dimensions drawn from the
/// configured ranges.
pub fn gradcheck_batches(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let (s0, s1) = cfg.sizes;
    let (d0, d1) = cfg.dims;
    if s0 < 2 || s1 < s0 || d0 < 2 || d1 < d0 {
        return Err(Error::config(
            "gradcheck needs 2 <= min <= max for sizes and dims",
        ));
    }
    let mut rng = init::rng_for(cfg.seed, init::stream_id("gradcheck"));
    let mut cases = Vec::with_capacity(cfg.batches);
    for b in 0..cfg.batches {
        let size = rng.random_range(s0..=s1);
        let dim = rng.random_range(d0..=d1);
        let batch = Batch::random(cfg.seed, b as u64, size, dim)?;
        let err = gradcheck(&batch, cfg.tau, cfg.denominator, cfg.step)?;
        cases.push(GradcheckCase {
            size,
            dim,
            max_rel_error: err,
        });
    }
    Ok(GradcheckReport {
        max_rel_error: cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max),
        cases,
        tolerance: cfg.tolerance,
    })
}
