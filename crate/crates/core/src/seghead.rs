//! Segmentation head: combined feature, coarse two-channel masks, the BCE
//! segmentation loss and the three-level ensemble.
//!
//! The decoder is three stages of `2x2`/stride-2 transposed convolution, each
//! followed by the sum with a 1x1 projection of a skip feature and a ReLU, so a
//! level of size `HxW` produces masks of size `8Hx8W`. A final 1x1 convolution
//! gives foreground/background scores, squashed by a sigmoid and kept inside
//! the open interval `(0,1)`.

use crate::error::{Error, Result};
use crate::init;
use crate::pyramid::ConvLayer;
use crate::tensor::{
    concat, conv2d, relu, resize_bilinear, sigmoid, transposed_conv2d, Archive, Tensor,
};

pub const DECODER_STAGES: usize = 3;

/// Sigmoid outputs are clamped to `[MASK_EPS, 1 - MASK_EPS]`.
pub const MASK_EPS: f32 = 1e-6;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedFeature(pub Tensor);

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseMask {
    /// `[2,H,W]`: foreground then background.
    pub channels: Tensor,
    /// Decode step the mask belongs to.
    pub instance_id: usize,
}

impl CoarseMask {
    pub fn foreground(&self) -> Tensor {
        self.channels.channel(0).expect("two-channel mask")
    }

    pub fn background(&self) -> Tensor {
        self.channels.channel(1).expect("two-channel mask")
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.channels.shape();
        (s[1], s[2])
    }
}

/// Transposed-convolution upsampling layer, weights `[C_in, C_out, 2, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegHeadWeights {
    /// 1x1 conv from `C + 1 + E` to `C` channels.
    pub combine: ConvLayer,
    pub up: [UpLayer; DECODER_STAGES],
    /// 1x1 projections of the skip features onto each stage's width.
    pub skip: [ConvLayer; DECODER_STAGES],
    /// 1x1 conv to the two mask channels.
    pub out: ConvLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegHeadDims {
    pub channels: usize,
    pub embedding: usize,
    /// Channel count of the skip feature fed to each stage.
    pub skip_channels: [usize; DECODER_STAGES],
    /// Output width of each decoder stage.
    pub decoder: [usize; DECODER_STAGES],
}

impl SegHeadDims {
    /// Decoder widths `C/2, C/4, C/8` (at least 2), skips taken from `C`-channel maps.
    pub fn for_channels(channels: usize, embedding: usize) -> Self {
        let width = |d: usize| (channels / d).max(2);
        Self {
            channels,
            embedding,
            skip_channels: [channels; DECODER_STAGES],
            decoder: [width(2), width(4), width(8)],
        }
    }
}

impl SegHeadWeights {
    pub fn seeded(seed: u64, dims: SegHeadDims) -> Self {
        let c = dims.channels;
        let up = |i: usize, c_in: usize, c_out: usize| UpLayer {
            weight: init::fan_in_uniform(
                seed,
                &format!("seg.up{i}.weight"),
                &[c_in, c_out, 2, 2],
                c_in * 4,
            ),
            bias: init::fan_in_uniform(seed, &format!("seg.up{i}.bias"), &[c_out], c_in * 4),
        };
        let [d1, d2, d3] = dims.decoder;
        Self {
            combine: ConvLayer::seeded(seed, "seg.combine", c, c + 1 + dims.embedding, 1),
            up: [up(1, c, d1), up(2, d1, d2), up(3, d2, d3)],
            skip: [
                ConvLayer::seeded(seed, "seg.skip1", d1, dims.skip_channels[0], 1),
                ConvLayer::seeded(seed, "seg.skip2", d2, dims.skip_channels[1], 1),
                ConvLayer::seeded(seed, "seg.skip3", d3, dims.skip_channels[2], 1),
            ],
            out: ConvLayer::seeded(seed, "seg.out", 2, d3, 1),
        }
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let up = |i: usize| -> Result<UpLayer> {
            Ok(UpLayer {
                weight: a.get(&format!("seg.up{i}.weight"))?.clone(),
                bias: a.get(&format!("seg.up{i}.bias"))?.clone(),
            })
        };
        let skip = |i: usize| ConvLayer::from_archive(a, &format!("seg.skip{i}"));
        Ok(Self {
            combine: ConvLayer::from_archive(a, "seg.combine")?,
            up: [up(1)?, up(2)?, up(3)?],
            skip: [skip(1)?, skip(2)?, skip(3)?],
            out: ConvLayer::from_archive(a, "seg.out")?,
        })
    }

    pub fn store(&self, a: &mut Archive) {
        self.combine.store(a, "seg.combine");
        for (i, u) in self.up.iter().enumerate() {
            a.insert(format!("seg.up{}.weight", i + 1), u.weight.clone());
            a.insert(format!("seg.up{}.bias", i + 1), u.bias.clone());
        }
        for (i, s) in self.skip.iter().enumerate() {
            s.store(a, &format!("seg.skip{}", i + 1));
        }
        self.out.store(a, "seg.out");
    }

    /// Same weights with every skip projection zeroed.
    pub fn without_skips(&self) -> Self {
        let mut w = self.clone();
        for s in &mut w.skip {
            *s = ConvLayer::zeros(s.out_channels(), s.in_channels(), 1);
        }
        w
    }
}

/// Concatenates `[fused ; attention ; broadcast embedding]` and projects it to
/// `C` channels with a 1x1 convolution.
pub fn combine(
    fused: &Tensor,
    attention: &Tensor,
    symbol_embedding: &Tensor,
    w: &SegHeadWeights,
) -> Result<CombinedFeature> {
    let (c, h, wd) = fused.dims3("fused feature")?;
    attention.expect_shape(&[h, wd]).map_err(|_| {
        Error::shape(format!(
            "attention map {:?} does not match feature {h}x{wd}",
            attention.shape()
        ))
    })?;
    let e = symbol_embedding.len();
    let want_in = c + 1 + e;
    if w.combine.in_channels() != want_in {
        return Err(Error::shape(format!(
            "combine expects {} input channels, got C + 1 + E = {want_in}",
            w.combine.in_channels()
        )));
    }
    let att = attention.clone().reshape(&[1, h, wd])?;
    let emb = Tensor::from_fn(&[e, h, wd], |i| symbol_embedding.data()[i / (h * wd)]);
    let stacked = concat(&[fused, &att, &emb], 0)?;
    Ok(CombinedFeature(conv2d(
        &stacked,
        &w.combine.weight,
        &w.combine.bias,
        1,
        0,
    )?))
}

fn decode_stages(
    fc: &CombinedFeature,
    projected: Option<&[Tensor]>,
    w: &SegHeadWeights,
) -> Result<Tensor> {
    let mut x = fc.0.clone();
    for stage in 0..DECODER_STAGES {
        let up = &w.up[stage];
        x = transposed_conv2d(&x, &up.weight, &up.bias, 2)?;
        if let Some(projected) = projected {
            let (_, h, wd) = x.dims3("decoder stage")?;
            let skip = &projected[stage];
            let (_, sh, sw) = skip.dims3("skip feature")?;
            if (sh, sw) != (h, wd) {
                return Err(Error::shape(format!(
                    "skip feature {} is {sh}x{sw}, decoder stage output is {h}x{wd}",
                    stage + 1
                )));
            }
            x = x.add(skip)?;
        }
        x = relu(&x);
    }
    conv2d(&x, &w.out.weight, &w.out.bias, 1, 0)
}

fn to_mask(scores: Tensor, instance_id: usize) -> CoarseMask {
    let channels = sigmoid(&scores).map(|v| v.clamp(MASK_EPS, 1.0 - MASK_EPS));
    CoarseMask {
        channels,
        instance_id,
    }
}

fn check_stage_count(n: usize) -> Result<()> {
    if n != DECODER_STAGES {
        return Err(Error::shape(format!(
            "expected {DECODER_STAGES} skip features, got {n}"
        )));
    }
    Ok(())
}

/// Coarse mask for one instance. `skips[k]` must match the spatial size of
/// decoder stage `k`, i.e. `2^(k+1)` times the combined feature.
pub fn coarse_mask(
    fc: &CombinedFeature,
    skips: &[Tensor],
    w: &SegHeadWeights,
    instance_id: usize,
) -> Result<CoarseMask> {
    check_stage_count(skips.len())?;
    let projected = skips
        .iter()
        .zip(&w.skip)
        .map(|(s, p)| conv2d(s, &p.weight, &p.bias, 1, 0))
        .collect::<Result<Vec<_>>>()?;
    coarse_mask_projected(fc, &projected, w, instance_id)
}

/// [`coarse_mask`] with skip features that already went through the stage
/// projections, e.g. from [`projected_skips`]. Lets instances share them.
pub fn coarse_mask_projected(
    fc: &CombinedFeature,
    projected: &[Tensor],
    w: &SegHeadWeights,
    instance_id: usize,
) -> Result<CoarseMask> {
    check_stage_count(projected.len())?;
    Ok(to_mask(decode_stages(fc, Some(projected), w)?, instance_id))
}

/// The decoder with no skip connections at all.
pub fn coarse_mask_without_skips(
    fc: &CombinedFeature,
    w: &SegHeadWeights,
    instance_id: usize,
) -> Result<CoarseMask> {
    Ok(to_mask(decode_stages(fc, None, w)?, instance_id))
}

fn skip_source(fused: &[Tensor], sh: usize, sw: usize) -> Result<&Tensor> {
    let target = (sh * sw) as f64;
    fused
        .iter()
        .min_by(|a, b| {
            let da = ((a.shape()[1] * a.shape()[2]) as f64 / target).ln().abs();
            let db = ((b.shape()[1] * b.shape()[2]) as f64 / target).ln().abs();
            da.total_cmp(&db)
        })
        .ok_or_else(|| Error::shape("no fused maps for skip features"))
}

/// Skip features for a combined feature of size `h x w`: stage `k` uses the
/// fused map whose pixel count is closest to the stage output, bilinearly
/// resized to it.
pub fn skip_features(fused: &[Tensor], h: usize, w: usize) -> Result<Vec<Tensor>> {
    (0..DECODER_STAGES)
        .map(|k| {
            let (sh, sw) = (h << (k + 1), w << (k + 1));
            resize_bilinear(skip_source(fused, sh, sw)?, sh, sw)
        })
        .collect()
}

/// Projected skip features for a combined feature of size `h x w`. The 1x1
/// projection runs before the resize; both are linear and the resize
/// preserves constants, so this equals projecting [`skip_features`] up to
/// rounding, at a fraction of the cost.
pub fn projected_skips(
    fused: &[Tensor],
    h: usize,
    w: usize,
    weights: &SegHeadWeights,
) -> Result<Vec<Tensor>> {
    (0..DECODER_STAGES)
        .map(|k| {
            let (sh, sw) = (h << (k + 1), w << (k + 1));
            let p = &weights.skip[k];
            resize_bilinear(
                &conv2d(skip_source(fused, sh, sw)?, &p.weight, &p.bias, 1, 0)?,
                sh,
                sw,
            )
        })
        .collect()
}

/// Mean binary cross entropy of probabilities against `{0,1}` targets.
pub fn bce_mean(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("empty mask"));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&m, &p)| {
            let m = (m as f64).clamp(BCE_EPS, 1.0 - BCE_EPS);
            let p = p as f64;
            -(p * m.ln() + (1.0 - p) * (1.0 - m).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Sum over instances of the per-pixel mean BCE. Both mask channels are
/// scored, foreground against the pseudo label and background against its
/// complement, and averaged.
pub fn seg_loss(masks: &[CoarseMask], pseudo: &[Tensor]) -> Result<f64> {
    if masks.len() != pseudo.len() {
        return Err(Error::shape(format!(
            "{} masks but {} pseudo labels",
            masks.len(),
            pseudo.len()
        )));
    }
    masks
        .iter()
        .zip(pseudo)
        .map(|(m, p)| {
            let fg = bce_mean(&m.foreground(), p)?;
            let bg = bce_mean(&m.background(), &p.map(|v| 1.0 - v))?;
            Ok(0.5 * (fg + bg))
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnsembleMode {
    /// At least two of three upsampled, re-thresholded binary maps.
    #[default]
    MajorityVote,
    /// Mean of the three upsampled binary maps, thresholded at 0.5.
    MeanThreshold,
}

/// Combines three binary maps of possibly different sizes at `out_h x out_w`.
pub fn ensemble_binary(
    maps: [&Tensor; 3],
    out_h: usize,
    out_w: usize,
    mode: EnsembleMode,
) -> Result<Tensor> {
    let up = maps
        .iter()
        .map(|m| resize_bilinear(m, out_h, out_w))
        .collect::<Result<Vec<_>>>()?;
    let n = out_h * out_w;
    let out = (0..n)
        .map(|i| {
            let v = [up[0].data()[i], up[1].data()[i], up[2].data()[i]];
            let on = match mode {
                EnsembleMode::MajorityVote => v.iter().filter(|&&x| x >= 0.5).count() >= 2,
                EnsembleMode::MeanThreshold => {
                    (v[0] as f64 + v[1] as f64 + v[2] as f64) / 3.0 >= 0.5
                }
            };
            if on {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[out_h, out_w], out)
}

/// Binarises each level's foreground at 0.5 and ensembles them.
pub fn ensemble(
    m1: &CoarseMask,
    m2: &CoarseMask,
    m3: &CoarseMask,
    out_h: usize,
    out_w: usize,
    mode: EnsembleMode,
) -> Result<Tensor> {
    let bin = |m: &CoarseMask| m.foreground().map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
    let (b1, b2, b3) = (bin(m1), bin(m2), bin(m3));
    ensemble_binary([&b1, &b2, &b3], out_h, out_w, mode)
}
