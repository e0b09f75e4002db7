//! Seed-to-mask evaluation over a synthetic corpus.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::glyphs;
use super::scene::{BackgroundKind, GlyphScene};
use super::{fiou, mean, median};
use crate::error::{Error, Result};
use crate::pyramid::{guidance_features, Backbone, FusionWeights};
use crate::tar::{binarize, refine, two_stage_refine, Guidance, RefineConfig, SoftLabel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub refine: RefineConfig,
    /// Width of the seeded backbone that provides stage-one guidance.
    pub feature_channels: usize,
    pub model_seed: u64,
    pub fusion: FusionWeights,
    /// Iterations of the RGB-only comparison run.
    pub rgb_only_iters: usize,
    /// Wall-clock timings make reports host dependent, so they are opt-in.
    pub record_timings: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            refine: RefineConfig::default(),
            feature_channels: 64,
            model_seed: 0,
            fusion: FusionWeights::default(),
            rgb_only_iters: 10,
            record_timings: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceScore {
    pub symbol: usize,
    pub glyph: char,
    pub fiou: f64,
    pub seed_fiou: f64,
    pub rgb_only_fiou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SceneScore {
    pub id: usize,
    pub rng_seed: u64,
    pub background: BackgroundKind,
    /// Means over the scene's instances.
    pub fiou: f64,
    pub seed_fiou: f64,
    pub rgb_only_fiou: f64,
    pub instances: Vec<InstanceScore>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageTimings {
    pub features_ms: f64,
    pub stage1_ms: f64,
    pub stage2_ms: f64,
    pub rgb_only_ms: f64,
}

impl StageTimings {
    fn add(&mut self, o: &StageTimings) {
        self.features_ms += o.features_ms;
        self.stage1_ms += o.stage1_ms;
        self.stage2_ms += o.stage2_ms;
        self.rgb_only_ms += o.rgb_only_ms;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenes: Vec<SceneScore>,
    pub mean_fiou: f64,
    pub median_fiou: f64,
    pub mean_seed_fiou: f64,
    pub median_seed_fiou: f64,
    pub mean_rgb_only_fiou: f64,
    /// Share of scenes whose refined fIoU is strictly above the seed's.
    pub improved_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>5} {:>9} {:>8} {:>8} {:>8} {:>8}",
            "scene", "bg", "glyphs", "seed", "rgb", "tar"
        );
        for sc in &self.scenes {
            let _ = writeln!(
                s,
                "{:>5} {:>9} {:>8} {:>8.4} {:>8.4} {:>8.4}",
                sc.id,
                sc.background.name(),
                sc.instances.len(),
                sc.seed_fiou,
                sc.rgb_only_fiou,
                sc.fiou
            );
        }
        let _ = writeln!(
            s,
            "mean   seed {:.4}  rgb-only {:.4}  two-stage {:.4}  (median {:.4})",
            self.mean_seed_fiou, self.mean_rgb_only_fiou, self.mean_fiou, self.median_fiou
        );
        let _ = writeln!(
            s,
            "improved on {:.1}% of scenes",
            100.0 * self.improved_fraction
        );
        if let Some(t) = &self.timings {
            let _ = writeln!(
                s,
                "time ms  features {:.1}  stage1 {:.1}  stage2 {:.1}  rgb-only {:.1}",
                t.features_ms, t.stage1_ms, t.stage2_ms, t.rgb_only_ms
            );
        }
        s
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn score(label: &SoftLabel, gt: &Tensor, threshold: f64) -> Result<f64> {
    fiou(&binarize(label, threshold), gt)
}

fn eval_scene(
    id: usize,
    scene: &GlyphScene,
    backbone: &Backbone,
    cfg: &EvalConfig,
) -> Result<(SceneScore, StageTimings)> {
    if scene.instances.is_empty() {
        return Err(Error::Degenerate("scene has no instances".into()));
    }
    let th = cfg.refine.binarize_threshold;
    let mut times = StageTimings::default();

    let t = Instant::now();
    let features = Guidance::new(guidance_features(&scene.image, backbone, &cfg.fusion)?)?;
    let rgb = Guidance::new(scene.image.clone())?;
    times.features_ms = ms(t);

    let stage1 = RefineConfig {
        iters_stage2: 0,
        ..cfg.refine
    };
    let mut instances = Vec::with_capacity(scene.instances.len());
    for inst in &scene.instances {
        let t = Instant::now();
        let after1 = two_stage_refine(&inst.seed, &features, &rgb, &stage1)?;
        times.stage1_ms += ms(t);
        let t = Instant::now();
        let out = refine(&after1, &rgb, cfg.refine.iters_stage2, &cfg.refine)?;
        times.stage2_ms += ms(t);
        let t = Instant::now();
        let rgb_only = refine(&inst.seed, &rgb, cfg.rgb_only_iters, &cfg.refine)?;
        times.rgb_only_ms += ms(t);

        instances.push(InstanceScore {
            symbol: inst.symbol,
            glyph: glyphs::name_of(inst.symbol).unwrap_or('?'),
            fiou: score(&out, &inst.mask, th)?,
            seed_fiou: score(&inst.seed, &inst.mask, th)?,
            rgb_only_fiou: score(&rgb_only, &inst.mask, th)?,
        });
    }
    let avg = |f: fn(&InstanceScore) -> f64| {
        instances.iter().map(f).sum::<f64>() / instances.len() as f64
    };
    Ok((
        SceneScore {
            id,
            rng_seed: scene.rng_seed,
            background: scene.background,
            fiou: avg(|i| i.fiou),
            seed_fiou: avg(|i| i.seed_fiou),
            rgb_only_fiou: avg(|i| i.rgb_only_fiou),
            instances,
        },
        times,
    ))
}

/// Scores seed, RGB-only and two-stage refinement for every instance.
/// Scenes run on the current rayon pool; the report is in scene order.
pub fn run_eval(corpus: &[GlyphScene], cfg: &EvalConfig) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::config("evaluation corpus is empty"));
    }
    cfg.refine.validate()?;
    if cfg.feature_channels == 0 {
        return Err(Error::config("feature_channels must be positive"));
    }
    let backbone = Backbone::seeded(cfg.model_seed, 3, cfg.feature_channels);
    let results: Vec<(SceneScore, StageTimings)> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            eval_scene(i, s, &backbone, cfg).map_err(|e| Error::Scene {
                scene: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let mut timings = StageTimings::default();
    let mut scenes = Vec::with_capacity(results.len());
    for (s, t) in results {
        timings.add(&t);
        scenes.push(s);
    }
    let two: Vec<f64> = scenes.iter().map(|s| s.fiou).collect();
    let seed: Vec<f64> = scenes.iter().map(|s| s.seed_fiou).collect();
    let rgb: Vec<f64> = scenes.iter().map(|s| s.rgb_only_fiou).collect();
    let improved = scenes.iter().filter(|s| s.fiou > s.seed_fiou).count();
    Ok(EvalReport {
        mean_fiou: mean(&two),
        median_fiou: median(&two),
        mean_seed_fiou: mean(&seed),
        median_seed_fiou: median(&seed),
        mean_rgb_only_fiou: mean(&rgb),
        improved_fraction: improved as f64 / scenes.len() as f64,
        timings: cfg.record_timings.then_some(timings),
        scenes,
    })
}
