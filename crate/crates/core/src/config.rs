//! Flat `key = value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::contrastive::{
    Denominator, LossWeights, DEFAULT_LAMBDA_C, DEFAULT_LAMBDA_REC, DEFAULT_TAU,
};
use crate::error::{Error, Result};
use crate::pipeline::{ModelDims, PipelineConfig};
use crate::seghead::EnsembleMode;
use crate::synth::{BackgroundKind, BenchConfig, EvalConfig, SceneConfig};
use crate::tar::{RefineConfig, SigmaMode};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub threads: usize,

    // refinement
    pub kernel_radius: usize,
    pub iters_stage1: usize,
    pub iters_stage2: usize,
    pub sigma_floor: f64,
    pub include_center: bool,
    pub binarize_threshold: f64,
    pub sigma_mode: String,

    // model
    pub channels: usize,
    pub hidden: usize,
    pub attention: usize,
    pub embedding: usize,
    pub projection_features: usize,
    pub projection_dim: usize,
    pub max_steps: usize,
    pub ensemble: String,

    // losses
    pub tau: f64,
    pub lambda_rec: f64,
    pub lambda_c: f64,
    pub denominator: String,
    pub batch_size: usize,

    // synthetic scenes
    pub height: usize,
    pub width: usize,
    pub scenes: usize,
    pub min_glyphs: usize,
    pub max_glyphs: usize,
    pub contrast_floor: f32,
    pub seed_coverage: f64,
    pub noise_amplitude: f32,
    pub backgrounds: String,
    pub alphabet: String,

    // evaluation
    pub feature_channels: usize,
    pub rgb_only_iters: usize,
    pub timings: bool,

    // benchmark
    pub repeats: usize,
    pub bench_channels: usize,
    pub meanfield_iters: usize,

    // gradient check
    pub batches: usize,
    pub min_batch: usize,
    pub max_batch: usize,
    pub min_dim: usize,
    pub max_dim: usize,
    pub fd_step: f64,
    pub grad_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let r = RefineConfig::default();
        let m = ModelDims::default();
        let s = SceneConfig::default();
        let e = EvalConfig::default();
        let b = BenchConfig::default();
        Self {
            rng_seed: 0,
            threads: 1,
            kernel_radius: r.kernel_radius,
            iters_stage1: r.iters_stage1,
            iters_stage2: r.iters_stage2,
            sigma_floor: r.sigma_floor,
            include_center: r.include_center,
            binarize_threshold: r.binarize_threshold,
            sigma_mode: "window".into(),
            channels: m.channels,
            hidden: m.hidden,
            attention: m.attention,
            embedding: m.embedding,
            projection_features: m.projection_features,
            projection_dim: m.projection_dim,
            max_steps: PipelineConfig::default().max_steps,
            ensemble: "vote".into(),
            tau: DEFAULT_TAU,
            lambda_rec: DEFAULT_LAMBDA_REC,
            lambda_c: DEFAULT_LAMBDA_C,
            denominator: "negatives".into(),
            batch_size: 32,
            height: s.height,
            width: s.width,
            scenes: 200,
            min_glyphs: s.min_glyphs,
            max_glyphs: s.max_glyphs,
            contrast_floor: s.contrast_floor,
            seed_coverage: s.seed_coverage,
            noise_amplitude: s.noise_amplitude,
            backgrounds: "flat,gradient,noise".into(),
            alphabet: String::new(),
            feature_channels: e.feature_channels,
            rgb_only_iters: e.rgb_only_iters,
            timings: e.record_timings,
            repeats: b.repeats,
            bench_channels: b.feature_channels,
            meanfield_iters: b.meanfield_iters,
            batches: 50,
            min_batch: 2,
            max_batch: 8,
            min_dim: 4,
            max_dim: 16,
            fd_step: 1e-5,
            grad_tolerance: 1e-4,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("bad value `{value}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "rng_seed" => self.rng_seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "kernel_radius" => self.kernel_radius = parse(key, v)?,
            "iters_stage1" => self.iters_stage1 = parse(key, v)?,
            "iters_stage2" => self.iters_stage2 = parse(key, v)?,
            "sigma_floor" => self.sigma_floor = parse(key, v)?,
            "include_center" => self.include_center = parse_bool(key, v)?,
            "binarize_threshold" => self.binarize_threshold = parse(key, v)?,
            "sigma_mode" => self.sigma_mode = v.into(),
            "channels" => self.channels = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "attention" => self.attention = parse(key, v)?,
            "embedding" => self.embedding = parse(key, v)?,
            "projection_features" => self.projection_features = parse(key, v)?,
            "projection_dim" => self.projection_dim = parse(key, v)?,
            "max_steps" => self.max_steps = parse(key, v)?,
            "ensemble" => self.ensemble = v.into(),
            "tau" => self.tau = parse(key, v)?,
            "lambda_rec" => self.lambda_rec = parse(key, v)?,
            "lambda_c" => self.lambda_c = parse(key, v)?,
            "denominator" => self.denominator = v.into(),
            "batch_size" => self.batch_size = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "scenes" => self.scenes = parse(key, v)?,
            "min_glyphs" => self.min_glyphs = parse(key, v)?,
            "max_glyphs" => self.max_glyphs = parse(key, v)?,
            "contrast_floor" => self.contrast_floor = parse(key, v)?,
            "seed_coverage" => self.seed_coverage = parse(key, v)?,
            "noise_amplitude" => self.noise_amplitude = parse(key, v)?,
            "backgrounds" => self.backgrounds = v.into(),
            "alphabet" => self.alphabet = v.into(),
            "feature_channels" => self.feature_channels = parse(key, v)?,
            "rgb_only_iters" => self.rgb_only_iters = parse(key, v)?,
            "timings" => self.timings = parse_bool(key, v)?,
            "repeats" => self.repeats = parse(key, v)?,
            "bench_channels" => self.bench_channels = parse(key, v)?,
            "meanfield_iters" => self.meanfield_iters = parse(key, v)?,
            "batches" => self.batches = parse(key, v)?,
            "min_batch" => self.min_batch = parse(key, v)?,
            "max_batch" => self.max_batch = parse(key, v)?,
            "min_dim" => self.min_dim = parse(key, v)?,
            "max_dim" => self.max_dim = parse(key, v)?,
            "fd_step" => self.fd_step = parse(key, v)?,
            "grad_tolerance" => self.grad_tolerance = parse(key, v)?,
            other => return Err(Error::config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// The effective configuration as sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut s = String::new();
        for (k, v) in value.as_object().expect("struct") {
            match v {
                serde_json::Value::String(t) => {
                    let _ = writeln!(s, "{k} = {t}");
                }
                other => {
                    let _ = writeln!(s, "{k} = {other}");
                }
            }
        }
        s
    }

    pub fn refine(&self) -> Result<RefineConfig> {
        let sigma_mode = match self.sigma_mode.as_str() {
            "window" => SigmaMode::Window,
            "global" => SigmaMode::Global,
            other => {
                return Err(Error::config(format!(
                    "sigma_mode must be window or global, got `{other}`"
                )))
            }
        };
        let r = RefineConfig {
            kernel_radius: self.kernel_radius,
            iters_stage1: self.iters_stage1,
            iters_stage2: self.iters_stage2,
            sigma_floor: self.sigma_floor,
            include_center: self.include_center,
            binarize_threshold: self.binarize_threshold,
            sigma_mode,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn model_dims(&self) -> Result<ModelDims> {
        let d = ModelDims {
            channels: self.channels,
            hidden: self.hidden,
            attention: self.attention,
            embedding: self.embedding,
            projection_features: self.projection_features,
            projection_dim: self.projection_dim,
            ..Default::default()
        };
        d.validate()?;
        if !d.hidden.is_multiple_of(2) {
            return Err(Error::config("hidden must be even"));
        }
        Ok(d)
    }

    pub fn ensemble_mode(&self) -> Result<EnsembleMode> {
        match self.ensemble.as_str() {
            "vote" => Ok(EnsembleMode::MajorityVote),
            "mean" => Ok(EnsembleMode::MeanThreshold),
            other => Err(Error::config(format!(
                "ensemble must be vote or mean, got `{other}`"
            ))),
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be positive"));
        }
        Ok(PipelineConfig {
            refine: self.refine()?,
            max_steps: self.max_steps,
            ensemble: self.ensemble_mode()?,
        })
    }

    pub fn denominator(&self) -> Result<Denominator> {
        match self.denominator.as_str() {
            "negatives" => Ok(Denominator::NegativesOnly),
            "include-positive" => Ok(Denominator::WithPositive),
            other => Err(Error::config(format!(
                "denominator must be negatives or include-positive, got `{other}`"
            ))),
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        if !(self.lambda_rec >= 0.0 && self.lambda_c >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau must be positive"));
        }
        Ok(LossWeights {
            lambda_rec: self.lambda_rec,
            lambda_c: self.lambda_c,
        })
    }

    pub fn scene(&self) -> Result<SceneConfig> {
        let backgrounds = self
            .backgrounds
            .split(',')
            .map(|b| {
                BackgroundKind::parse(b.trim())
                    .ok_or_else(|| Error::config(format!("unknown background `{}`", b.trim())))
            })
            .collect::<Result<Vec<_>>>()?;
        let c = SceneConfig {
            height: self.height,
            width: self.width,
            min_glyphs: self.min_glyphs,
            max_glyphs: self.max_glyphs,
            contrast_floor: self.contrast_floor,
            seed_coverage: self.seed_coverage,
            noise_amplitude: self.noise_amplitude,
            backgrounds,
            alphabet: self
                .alphabet
                .chars()
                .filter(|c| !c.is_whitespace() && *c != ',')
                .collect(),
            ..Default::default()
        };
        c.validate()?;
        Ok(c)
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            refine: self.refine()?,
            feature_channels: self.feature_channels,
            model_seed: self.rng_seed,
            rgb_only_iters: self.rgb_only_iters,
            record_timings: self.timings,
            ..Default::default()
        })
    }

    pub fn bench(&self) -> Result<BenchConfig> {
        let r = self.refine()?;
        Ok(BenchConfig {
            height: self.height,
            width: self.width,
            iters_stage1: r.iters_stage1,
            iters_stage2: r.iters_stage2,
            kernel_radius: r.kernel_radius,
            repeats: self.repeats,
            feature_channels: self.bench_channels,
            meanfield_iters: self.meanfield_iters,
            rng_seed: self.rng_seed,
        })
    }

    pub fn validate_gradcheck(&self) -> Result<()> {
        if self.min_batch < 2 || self.max_batch < self.min_batch {
            return Err(Error::config(
                "batch range must satisfy 2 <= min_batch <= max_batch",
            ));
        }
        if self.min_dim < 2 || self.max_dim < self.min_dim {
            return Err(Error::config(
                "dim range must satisfy 2 <= min_dim <= max_dim",
            ));
        }
        if !(self.fd_step > 0.0) || !(self.grad_tolerance > 0.0) {
            return Err(Error::config("fd_step and grad_tolerance must be positive"));
        }
        self.denominator()?;
        self.loss_weights()?;
        Ok(())
    }

    /// Checks every derived module configuration.
    pub fn validate(&self) -> Result<()> {
        if self.threads == 0 {
            return Err(Error::config("threads must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        self.pipeline()?;
        self.model_dims()?;
        self.scene()?;
        self.eval()?;
        self.bench()?;
        self.validate_gradcheck()
    }
}
