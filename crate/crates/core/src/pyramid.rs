//! Three-level feature pyramid and adaptive scalar fusion.
//!
//! The backbone is a fixed stack of three 3x3 strided convolutions with ReLU:
//!
//! | level | stride (h, w) | shape           |
//! |-------|---------------|-----------------|
//! | 1     | (2, 2)        | `[C, H/2, W/2]` |
//! | 2     | (2, 2)        | `[C, H/4, W/4]` |
//! | 3     | (2, 1)        | `[C, H/8, W/4]` |
//!
//! The top level halves only the height. Whether a `W/8` width was intended
//! there is unclear; the asymmetric shape is kept as it is commonly printed.
//!
//! Each fused level is `alpha_l * F1->l + beta_l * F2->l + gamma_l * F3->l`
//! where `->l` is a bilinear resize to level `l`'s shape.

use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{conv2d_strided, relu, resize_bilinear, Archive, Tensor};

pub const LEVELS: usize = 3;

const STAGE_STRIDES: [(usize, usize); LEVELS] = [(2, 2), (2, 2), (2, 1)];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn seeded(seed: u64, name: &str, c_out: usize, c_in: usize, k: usize) -> Self {
        let fan_in = c_in * k * k;
        Self {
            weight: init::fan_in_uniform(
                seed,
                &format!("{name}.weight"),
                &[c_out, c_in, k, k],
                fan_in,
            ),
            bias: init::fan_in_uniform(seed, &format!("{name}.bias"), &[c_out], fan_in),
        }
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn from_archive(a: &Archive, name: &str) -> Result<Self> {
        Ok(Self {
            weight: a.get(&format!("{name}.weight"))?.clone(),
            bias: a.get(&format!("{name}.bias"))?.clone(),
        })
    }

    pub fn store(&self, a: &mut Archive, name: &str) {
        a.insert(format!("{name}.weight"), self.weight.clone());
        a.insert(format!("{name}.bias"), self.bias.clone());
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub stages: [ConvLayer; LEVELS],
}

impl Backbone {
    pub fn seeded(seed: u64, image_channels: usize, channels: usize) -> Self {
        Self {
            stages: [
                ConvLayer::seeded(seed, "backbone.stage1", channels, image_channels, 3),
                ConvLayer::seeded(seed, "backbone.stage2", channels, channels, 3),
                ConvLayer::seeded(seed, "backbone.stage3", channels, channels, 3),
            ],
        }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        Ok(Self {
            stages: [
                ConvLayer::from_archive(a, "backbone.stage1")?,
                ConvLayer::from_archive(a, "backbone.stage2")?,
                ConvLayer::from_archive(a, "backbone.stage3")?,
            ],
        })
    }

    pub fn store(&self, a: &mut Archive) {
        for (i, s) in self.stages.iter().enumerate() {
            s.store(a, &format!("backbone.stage{}", i + 1));
        }
    }

    pub fn channels(&self) -> usize {
        self.stages[0].out_channels()
    }

    /// Runs the three stages on `[C_img,H,W]`.
    pub fn extract(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, h, w) = image.dims3("backbone input")?;
        if h == 0 || w == 0 || h % 8 != 0 || w % 4 != 0 {
            return Err(Error::config(format!(
                "input {h}x{w} must have height divisible by 8 and width divisible by 4"
            )));
        }
        let mut x = image.clone();
        let mut levels = Vec::with_capacity(LEVELS);
        for (stage, &stride) in self.stages.iter().zip(&STAGE_STRIDES) {
            x = relu(&conv2d_strided(
                &x,
                &stage.weight,
                &stage.bias,
                stride,
                (1, 1),
            )?);
            levels.push(x.clone());
        }
        let levels: [Tensor; LEVELS] = levels.try_into().expect("three stages");
        Ok(FeaturePyramid {
            levels,
            fused: None,
        })
    }
}

/// Scalar fusion weights, one `(alpha, beta, gamma)` triple per output level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub alpha: [f32; LEVELS],
    pub beta: [f32; LEVELS],
    pub gamma: [f32; LEVELS],
}

impl Default for FusionWeights {
    /// Equal thirds at every level.
    fn default() -> Self {
        Self::uniform(1.0 / 3.0)
    }
}

impl FusionWeights {
    pub fn uniform(v: f32) -> Self {
        Self {
            alpha: [v; LEVELS],
            beta: [v; LEVELS],
            gamma: [v; LEVELS],
        }
    }

    /// Weights applied to source levels 1..=3 when producing level `l` (0-based).
    pub fn for_level(&self, l: usize) -> [f32; LEVELS] {
        [self.alpha[l], self.beta[l], self.gamma[l]]
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let mut w = Self::uniform(0.0);
        for l in 0..LEVELS {
            for (name, slot) in [
                ("alpha", &mut w.alpha),
                ("beta", &mut w.beta),
                ("gamma", &mut w.gamma),
            ] {
                let key = format!("fusion.l{}.{name}", l + 1);
                let t = a.get(&key)?;
                if t.len() != 1 {
                    return Err(Error::shape(format!(
                        "{key} must hold one scalar, got {:?}",
                        t.shape()
                    )));
                }
                slot[l] = t.data()[0];
            }
        }
        Ok(w)
    }

    pub fn store(&self, a: &mut Archive) {
        for l in 0..LEVELS {
            a.insert(
                format!("fusion.l{}.alpha", l + 1),
                Tensor::scalar(self.alpha[l]),
            );
            a.insert(
                format!("fusion.l{}.beta", l + 1),
                Tensor::scalar(self.beta[l]),
            );
            a.insert(
                format!("fusion.l{}.gamma", l + 1),
                Tensor::scalar(self.gamma[l]),
            );
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    /// Backbone outputs F1, F2, F3.
    pub levels: [Tensor; LEVELS],
    /// Fused maps, one per level, shaped like the matching backbone level.
    pub fused: Option<[Tensor; LEVELS]>,
}

impl FeaturePyramid {
    pub fn new(levels: [Tensor; LEVELS]) -> Self {
        Self {
            levels,
            fused: None,
        }
    }

    /// `(H, W)` of level `l` (0-based).
    pub fn level_size(&self, l: usize) -> (usize, usize) {
        let s = self.levels[l].shape();
        (s[1], s[2])
    }

    pub fn fused(&self) -> Result<&[Tensor; LEVELS]> {
        self.fused
            .as_ref()
            .ok_or_else(|| Error::config("pyramid has not been fused"))
    }
}

pub fn extract_pyramid(image: &Tensor, backbone: &Backbone) -> Result<FeaturePyramid> {
    backbone.extract(image)
}

/// Fused map for a single output level `l` (0-based). Levels are independent.
pub fn fuse_level(pyr: &FeaturePyramid, l: usize, w: &FusionWeights) -> Result<Tensor> {
    if l >= LEVELS {
        return Err(Error::shape(format!("level {l} out of range")));
    }
    let (c, _, _) = pyr.levels[0].dims3("pyramid level")?;
    let (h, wd) = pyr.level_size(l);
    let coeffs = w.for_level(l);
    let mut acc = vec![0f64; c * h * wd];
    for (src, &k) in pyr.levels.iter().zip(&coeffs) {
        let (sc, _, _) = src.dims3("pyramid level")?;
        if sc != c {
            return Err(Error::shape(format!(
                "pyramid levels disagree on channels ({sc} vs {c})"
            )));
        }
        let resized = resize_bilinear(src, h, wd)?;
        for (a, &v) in acc.iter_mut().zip(resized.data()) {
            *a += k as f64 * v as f64;
        }
    }
    Tensor::new(&[c, h, wd], acc.into_iter().map(|v| v as f32).collect())
}

/// Fills every fused level.
pub fn fuse(pyr: &FeaturePyramid, w: &FusionWeights) -> Result<FeaturePyramid> {
    let fused = [
        fuse_level(pyr, 0, w)?,
        fuse_level(pyr, 1, w)?,
        fuse_level(pyr, 2, w)?,
    ];
    Ok(FeaturePyramid {
        levels: pyr.levels.clone(),
        fused: Some(fused),
    })
}

/// Fused level-1 features resized to the input resolution, used as stage-one
/// refinement guidance.
pub fn guidance_features(image: &Tensor, backbone: &Backbone, w: &FusionWeights) -> Result<Tensor> {
    let (_, h, wd) = image.dims3("image")?;
    let pyr = backbone.extract(image)?;
    resize_bilinear(&fuse_level(&pyr, 0, w)?, h, wd)
}
