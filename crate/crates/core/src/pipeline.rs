//! End-to-end inference: pyramid, fusion, attention decoding, per-instance
//! coarse masks and TAR pseudo labels, and the three-level ensemble.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::contrastive::{self, Batch, Denominator, LossWeights, ProjectionWeights};
use crate::error::{Error, Result};
use crate::pyramid::{Backbone, FeaturePyramid, FusionWeights, LEVELS};
use crate::recognizer::{
    self, AttentionTrace, RecognizerDims, RecognizerWeights, SymbolTable, END,
};
use crate::seghead::{self, CoarseMask, EnsembleMode, SegHeadDims, SegHeadWeights};
use crate::synth::glyphs;
use crate::tar::{binarize, two_stage_refine, Guidance, RefineConfig, SoftLabel};
use crate::tensor::{resize_bilinear, Archive, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelDims {
    pub image_channels: usize,
    pub channels: usize,
    pub hidden: usize,
    pub attention: usize,
    pub embedding: usize,
    pub classes: usize,
    /// Projection stem width and output size for the contrastive head.
    pub projection_features: usize,
    pub projection_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            image_channels: 3,
            channels: 512,
            hidden: 256,
            attention: 256,
            embedding: 64,
            classes: glyphs::class_count(),
            projection_features: 64,
            projection_dim: 128,
        }
    }
}

impl ModelDims {
    pub fn recognizer(&self) -> RecognizerDims {
        RecognizerDims {
            channels: self.channels,
            hidden: self.hidden,
            attention: self.attention,
            embedding: self.embedding,
            classes: self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("image_channels", self.image_channels),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("attention", self.attention),
            ("embedding", self.embedding),
            ("projection_features", self.projection_features),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.projection_dim < 2 {
            return Err(Error::config("projection_dim must be >= 2"));
        }
        Ok(())
    }
}

/// Every weight the pipeline needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: Backbone,
    pub fusion: FusionWeights,
    pub recognizer: RecognizerWeights,
    pub seghead: SegHeadWeights,
    /// Only needed for the contrastive loss.
    pub projection: Option<ProjectionWeights>,
}

impl Model {
    pub fn seeded(seed: u64, dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            backbone: Backbone::seeded(seed, dims.image_channels, dims.channels),
            fusion: FusionWeights::default(),
            recognizer: RecognizerWeights::seeded(seed, dims.recognizer())?,
            seghead: SegHeadWeights::seeded(
                seed,
                SegHeadDims::for_channels(dims.channels, dims.embedding),
            ),
            projection: Some(ProjectionWeights::seeded(
                seed,
                dims.image_channels,
                dims.projection_features,
                dims.projection_dim,
            )),
        })
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let has_projection = a.names().any(|n| n.starts_with("proj."));
        let model = Self {
            backbone: Backbone::from_archive(a)?,
            fusion: FusionWeights::from_archive(a)?,
            recognizer: RecognizerWeights::from_archive(a)?,
            seghead: SegHeadWeights::from_archive(a)?,
            projection: if has_projection {
                Some(ProjectionWeights::from_archive(a)?)
            } else {
                None
            },
        };
        let c = model.backbone.channels();
        let rec = model.recognizer.dims()?;
        if rec.channels != c {
            return Err(Error::shape(format!(
                "backbone produces {c} channels but the recognizer expects {}",
                rec.channels
            )));
        }
        Ok(model)
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        self.backbone.store(&mut a);
        self.fusion.store(&mut a);
        self.recognizer.store(&mut a);
        self.seghead.store(&mut a);
        if let Some(p) = &self.projection {
            p.store(&mut a);
        }
        a
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    /// Backbone and fusion.
    pub fn features(&self, image: &Tensor) -> Result<FeaturePyramid> {
        crate::pyramid::fuse(&self.backbone.extract(image)?, &self.fusion)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub refine: RefineConfig,
    pub max_steps: usize,
    pub ensemble: EnsembleMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            refine: RefineConfig::default(),
            max_steps: 25,
            ensemble: EnsembleMode::MajorityVote,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceOutput {
    pub index: usize,
    pub symbol: usize,
    /// Ensembled segmentation mask at image resolution, `{0,1}`.
    pub mask: Tensor,
    /// Ensembled TAR pseudo label at image resolution, `{0,1}`.
    pub pseudo: Tensor,
    /// Per-level coarse masks (decoder resolution).
    pub coarse: [CoarseMask; LEVELS],
    /// Per-level binarized pseudo labels at image resolution.
    pub level_pseudo: [Tensor; LEVELS],
    pub attention_entropy: [f64; LEVELS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub height: usize,
    pub width: usize,
    /// Level-1 greedy decode, end step included when reached.
    pub trace: AttentionTrace,
    pub instances: Vec<InstanceOutput>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSummary {
    pub index: usize,
    pub symbol: usize,
    pub glyph: Option<char>,
    pub attention_entropy: [f64; LEVELS],
    pub mask_pixels: usize,
    pub pseudo_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub height: usize,
    pub width: usize,
    pub decoded_steps: usize,
    pub reached_end: bool,
    pub symbols: Vec<usize>,
    pub text: String,
    pub instances: Vec<StepSummary>,
}

impl PipelineOutput {
    pub fn symbols(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.symbol).collect()
    }

    pub fn summary(&self, table: &SymbolTable) -> TraceSummary {
        let count = |t: &Tensor| t.data().iter().filter(|&&v| v > 0.5).count();
        TraceSummary {
            height: self.height,
            width: self.width,
            decoded_steps: self.trace.len(),
            reached_end: self.trace.steps.last().is_some_and(|s| s.symbol == END),
            symbols: self.symbols(),
            text: table.decode(&self.symbols()),
            instances: self
                .instances
                .iter()
                .map(|i| StepSummary {
                    index: i.index,
                    symbol: i.symbol,
                    glyph: table.char_of(i.symbol),
                    attention_entropy: i.attention_entropy,
                    mask_pixels: count(&i.mask),
                    pseudo_pixels: count(&i.pseudo),
                })
                .collect(),
        }
    }
}

/// Instance symbols of a level-1 trace: every step before the end symbol.
pub fn instance_symbols(trace: &AttentionTrace) -> Vec<usize> {
    trace
        .steps
        .iter()
        .map(|s| s.symbol)
        .take_while(|&s| s != END)
        .collect()
}

/// Decodes every level. Level 1 decodes greedily; levels 2 and 3 are
/// teacher-forced with the level-1 symbols so step `t` is the same instance
/// on all three.
pub fn decode_levels(
    fused: &[Tensor; LEVELS],
    rec: &RecognizerWeights,
    max_steps: usize,
) -> Result<(AttentionTrace, [AttentionTrace; LEVELS])> {
    let first = recognizer::decode(&fused[0], rec, max_steps)?;
    let symbols = instance_symbols(&first);
    let forced = |l: usize| recognizer::decode_forced(&fused[l], rec, &symbols);
    let mut l1 = first.clone();
    l1.steps.truncate(symbols.len());
    Ok((first, [l1, forced(1)?, forced(2)?]))
}

fn check_image(image: &Tensor, model: &Model) -> Result<(usize, usize)> {
    let (c, h, w) = image.dims3("image")?;
    let want = model.backbone.stages[0].in_channels();
    if c != want {
        return Err(Error::shape(format!(
            "image has {c} channels, backbone expects {want}"
        )));
    }
    Ok((h, w))
}

/// Runs the whole inference path on one image. Instances are processed on the
/// current rayon pool and returned in decode order.
pub fn run_pipeline(image: &Tensor, model: &Model, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    cfg.refine.validate()?;
    let (h, w) = check_image(image, model)?;
    let pyr = model.features(image)?;
    let fused = pyr.fused()?;
    let (trace, levels) = decode_levels(fused, &model.recognizer, cfg.max_steps)?;
    let symbols = instance_symbols(&trace);

    let rgb = Guidance::new(image.clone())?;
    let guidance = fused
        .iter()
        .map(|f| Guidance::new(resize_bilinear(f, h, w)?))
        .collect::<Result<Vec<_>>>()?;
    let skips = fused
        .iter()
        .map(|f| {
            let (_, fh, fw) = f.dims3("fused")?;
            seghead::projected_skips(fused, fh, fw, &model.seghead)
        })
        .collect::<Result<Vec<_>>>()?;

    let instances = symbols
        .par_iter()
        .enumerate()
        .map(|(t, &symbol)| {
            let emb = model.recognizer.embed(symbol)?;
            let mut coarse = Vec::with_capacity(LEVELS);
            let mut pseudo = Vec::with_capacity(LEVELS);
            let mut entropy = [0.0; LEVELS];
            for l in 0..LEVELS {
                let step = &levels[l].steps[t];
                entropy[l] = step.attention_entropy();
                let fc = seghead::combine(&fused[l], &step.attention, &emb, &model.seghead)?;
                coarse.push(seghead::coarse_mask_projected(
                    &fc,
                    &skips[l],
                    &model.seghead,
                    t,
                )?);
                let seed = SoftLabel::normalized(&resize_bilinear(&step.attention, h, w)?)?;
                let refined = two_stage_refine(&seed, &guidance[l], &rgb, &cfg.refine)?;
                pseudo.push(binarize(&refined, cfg.refine.binarize_threshold));
            }
            let coarse: [CoarseMask; LEVELS] = coarse.try_into().expect("three levels");
            let level_pseudo: [Tensor; LEVELS] = pseudo.try_into().expect("three levels");
            let mask = seghead::ensemble(&coarse[0], &coarse[1], &coarse[2], h, w, cfg.ensemble)?;
            let pseudo = seghead::ensemble_binary(
                [&level_pseudo[0], &level_pseudo[1], &level_pseudo[2]],
                h,
                w,
                cfg.ensemble,
            )?;
            Ok(InstanceOutput {
                index: t,
                symbol,
                mask,
                pseudo,
                coarse,
                level_pseudo,
                attention_entropy: entropy,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(PipelineOutput {
        height: h,
        width: w,
        trace,
        instances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub rec: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// One labelled training sample: an image and its symbol sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub symbols: Vec<usize>,
}

/// The joint objective on a batch without any weight update: recognition
/// cross entropy (teacher-forced on the labels), segmentation BCE of every
/// level's coarse masks against its pseudo labels, and the mask-augmented
/// contrastive loss over `(image, image * union of predicted masks)`.
pub fn joint_losses(
    batch: &[Sample],
    model: &Model,
    cfg: &PipelineConfig,
    tau: f64,
    denominator: Denominator,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    if batch.len() < 2 {
        return Err(Error::Degenerate(
            "joint losses need a batch of at least 2 samples".into(),
        ));
    }
    let proj = model
        .projection
        .as_ref()
        .ok_or_else(|| Error::MissingWeight("proj.stem.weight".into()))?;
    let mut seg = 0.0;
    let mut rec = 0.0;
    let mut pairs = Vec::with_capacity(batch.len());
    for sample in batch {
        if sample.symbols.is_empty() {
            return Err(Error::Degenerate("sample has no label symbols".into()));
        }
        let (h, w) = check_image(&sample.image, model)?;
        let pyr = model.features(&sample.image)?;
        let fused = pyr.fused()?;
        let mut with_end = sample.symbols.clone();
        with_end.push(END);
        let rgb = Guidance::new(sample.image.clone())?;
        let mut union = Tensor::zeros(&[h, w]);
        for l in 0..LEVELS {
            let trace = recognizer::decode_forced(&fused[l], &model.recognizer, &with_end)?;
            if l == 0 {
                rec += recognizer::recognition_loss(&trace, &with_end)?;
            }
            let (_, fh, fw) = fused[l].dims3("fused")?;
            let skips = seghead::projected_skips(fused, fh, fw, &model.seghead)?;
            let guide = Guidance::new(resize_bilinear(&fused[l], h, w)?)?;
            let mut masks = Vec::new();
            let mut labels = Vec::new();
            for (t, &symbol) in sample.symbols.iter().enumerate() {
                let step = &trace.steps[t];
                let fc = seghead::combine(
                    &fused[l],
                    &step.attention,
                    &model.recognizer.embed(symbol)?,
                    &model.seghead,
                )?;
                let m = seghead::coarse_mask_projected(&fc, &skips, &model.seghead, t)?;
                let (mh, mw) = m.dims();
                let seed = SoftLabel::normalized(&resize_bilinear(&step.attention, h, w)?)?;
                let p = binarize(
                    &two_stage_refine(&seed, &guide, &rgb, &cfg.refine)?,
                    cfg.refine.binarize_threshold,
                );
                let p_mask = resize_bilinear(&p, mh, mw)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
                if l == 0 {
                    let fg = resize_bilinear(&m.foreground(), h, w)?;
                    union =
                        union.zip_with(&fg, |a, b| if a > 0.5 || b >= 0.5 { 1.0 } else { 0.0 })?;
                }
                masks.push(m);
                labels.push(p_mask);
            }
            seg += seghead::seg_loss(&masks, &labels)?;
        }
        let masked = contrastive::mask_image(&sample.image, &union)?;
        pairs.push((
            contrastive::project(&sample.image, proj)?,
            contrastive::project(&masked, proj)?,
        ));
    }
    let l_c = contrastive::contrastive_loss(&Batch::new(pairs)?, tau, denominator)?;
    Ok(LossBreakdown {
        seg,
        rec,
        contrastive: l_c,
        total: contrastive::total_loss(seg, rec, l_c, weights),
    })
}
