//! Wall-clock comparison of two-stage TAR against the dense mean-field baseline.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use super::median;
use super::scene::{generate_scene, SceneConfig};
use crate::error::{Error, Result};
use crate::pyramid::{guidance_features, Backbone, FusionWeights};
use crate::tar::{baseline_meanfield, two_stage_refine, Guidance, MeanFieldConfig, RefineConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    pub height: usize,
    pub width: usize,
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub kernel_radius: usize,
    pub repeats: usize,
    pub feature_channels: usize,
    pub meanfield_iters: usize,
    pub rng_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 160,
            iters_stage1: 2,
            iters_stage2: 8,
            kernel_radius: 1,
            repeats: 20,
            feature_channels: 512,
            meanfield_iters: 5,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub tar_median_ms: f64,
    pub meanfield_median_ms: f64,
    /// Mean-field median over TAR median.
    pub speedup: f64,
    pub tar_samples_ms: Vec<f64>,
    pub meanfield_samples_ms: Vec<f64>,
}

impl BenchReport {
    pub fn tar_faster(&self) -> bool {
        self.tar_median_ms < self.meanfield_median_ms
    }

    pub fn table(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "input {}x{}, {} repeats, single thread",
            c.height, c.width, c.repeats
        );
        let _ = writeln!(s, "{:<34} {:>12}", "method", "median ms");
        let _ = writeln!(
            s,
            "{:<34} {:>12.3}",
            format!(
                "tar two-stage {}+{} r{} (C={})",
                c.iters_stage1, c.iters_stage2, c.kernel_radius, c.feature_channels
            ),
            self.tar_median_ms
        );
        let _ = writeln!(
            s,
            "{:<34} {:>12.3}",
            format!("mean-field dense x{}", c.meanfield_iters),
            self.meanfield_median_ms
        );
        let _ = writeln!(s, "speedup {:.1}x", self.speedup);
        s
    }
}

fn time_median(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, Vec<f64>)> {
    f()?; // warm-up
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
    }
    Ok((median(&samples), samples))
}

/// Median runtimes of both refiners on one synthetic scene. Runs on the
/// calling thread only.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.repeats < 5 {
        return Err(Error::config(format!(
            "bench needs at least 5 repeats, got {}",
            cfg.repeats
        )));
    }
    let scene_cfg = SceneConfig {
        height: cfg.height,
        width: cfg.width,
        ..Default::default()
    };
    let scene = generate_scene(cfg.rng_seed, &scene_cfg)?;
    let seed = &scene.instances[0].seed;
    let backbone = Backbone::seeded(cfg.rng_seed, 3, cfg.feature_channels);
    let features = Guidance::new(guidance_features(
        &scene.image,
        &backbone,
        &FusionWeights::default(),
    )?)?;
    let rgb = Guidance::new(scene.image.clone())?;
    let refine_cfg = RefineConfig {
        kernel_radius: cfg.kernel_radius,
        iters_stage1: cfg.iters_stage1,
        iters_stage2: cfg.iters_stage2,
        ..Default::default()
    };
    refine_cfg.validate()?;
    let mf_cfg = MeanFieldConfig::default();

    let (tar_median_ms, tar_samples_ms) = time_median(cfg.repeats, || {
        two_stage_refine(seed, &features, &rgb, &refine_cfg).map(drop)
    })?;
    let (meanfield_median_ms, meanfield_samples_ms) = time_median(cfg.repeats, || {
        baseline_meanfield(seed, &rgb, cfg.meanfield_iters, &mf_cfg).map(drop)
    })?;
    Ok(BenchReport {
        config: cfg.clone(),
        tar_median_ms,
        meanfield_median_ms,
        speedup: meanfield_median_ms / tar_median_ms,
        tar_samples_ms,
        meanfield_samples_ms,
    })
}
