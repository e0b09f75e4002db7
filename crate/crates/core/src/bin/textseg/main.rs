use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use textseg::config::RunConfig;
use textseg::contrastive::{gradcheck_batches, GradcheckConfig};
use textseg::pipeline::{run_pipeline, Model};
use textseg::pyramid::{guidance_features, Backbone, FusionWeights};
use textseg::recognizer::SymbolTable;
use textseg::synth::manifest::write_corpus;
use textseg::synth::{generate_corpus, glyphs, run_bench, run_eval};
use textseg::tar::{binarize, two_stage_refine, Guidance, SoftLabel};
use textseg::tensor::{resize_bilinear, Tensor};
use textseg::{imageio, Error};

#[derive(Parser)]
#[command(
    name = "textseg",
    version,
    about = "Text instance segmentation with adaptive refinement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value configuration file; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the report as JSON
    #[arg(long, global = true)]
    json: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long = "rng-seed", global = true)]
    rng_seed: Option<u64>,
    /// Override any config key, e.g. `--set tau=0.2`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Refine a seed into a binary mask
    Refine(RefineArgs),
    /// Run the full model on one image
    Pipeline(PipelineArgs),
    /// Score seed, RGB-only and two-stage refinement on a synthetic corpus
    Eval(EvalArgs),
    /// Time two-stage refinement against the mean-field baseline
    Bench(BenchArgs),
    /// Check analytic contrastive gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Write a seeded weight archive
    InitWeights(InitArgs),
    /// Write a synthetic corpus with a JSON-lines manifest
    Synth(SynthArgs),
}

#[derive(Args)]
struct RefineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    image: PathBuf,
    /// Seed as grayscale image or .tsr tensor
    #[arg(long)]
    seed: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stage-one guidance as a [C,H,W] .tsr tensor; default is seeded backbone features
    #[arg(long)]
    guidance: Option<PathBuf>,
    /// Weight archive whose backbone provides stage-one guidance
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Also write the unbinarized refined label
    #[arg(long)]
    soft_out: Option<PathBuf>,
    #[arg(long)]
    iters1: Option<usize>,
    #[arg(long)]
    iters2: Option<usize>,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Emit {
    Masks,
    Pseudo,
    Both,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    image: PathBuf,
    /// Weight archive; seeded weights from the run config when absent
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_enum, default_value = "masks")]
    emit: Emit,
    /// Symbol table, one character per line starting at class id 3
    #[arg(long)]
    symbols: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scenes: Option<usize>,
    /// HxW, e.g. 48x160
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    iters1: Option<usize>,
    #[arg(long)]
    iters2: Option<usize>,
    /// Fail unless two-stage refinement beats the seed on this share of scenes
    #[arg(long)]
    min_improved: Option<f64>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    iters1: Option<usize>,
    #[arg(long)]
    iters2: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    channels: Option<usize>,
    /// Also write the built-in symbol table here
    #[arg(long)]
    symbols: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    size: Option<String>,
}

enum Failure {
    Lib(Error),
    Assertion(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = Result<(), Failure>;

fn set_opt<T: ToString>(cfg: &mut RunConfig, key: &str, v: Option<T>) -> Result<(), Error> {
    match v {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn set_size(cfg: &mut RunConfig, size: Option<&str>) -> Result<(), Error> {
    let Some(s) = size else { return Ok(()) };
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("size `{s}` must look like 48x160")))?;
    cfg.set("height", h)?;
    cfg.set("width", w)
}

/// Config file, then `--set`, then the explicit flags.
fn load_config(
    c: &Common,
    apply: impl FnOnce(&mut RunConfig) -> Result<(), Error>,
) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    set_opt(&mut cfg, "threads", c.threads)?;
    set_opt(&mut cfg, "rng_seed", c.rng_seed)?;
    apply(&mut cfg)?;
    cfg.validate()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    command: &'a str,
    config: &'a RunConfig,
    report: &'a R,
}

fn emit<R: Serialize>(
    c: &Common,
    command: &str,
    cfg: &RunConfig,
    report: &R,
    text: impl FnOnce() -> String,
) {
    let out = if c.json {
        let env = Envelope {
            command,
            config: cfg,
            report,
        };
        serde_json::to_string_pretty(&env).expect("report serializes") + "\n"
    } else {
        let mut s: String = cfg.to_text().lines().map(|l| format!("# {l}\n")).collect();
        s.push_str(&text());
        s
    };
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let mut stdout = std::io::stdout().lock();
    let _ = stdout
        .write_all(out.as_bytes())
        .and_then(|_| stdout.flush());
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.into(),
        source,
    })
}

#[derive(Serialize)]
struct RefineReport {
    height: usize,
    width: usize,
    seed_pixels: usize,
    mask_pixels: usize,
    out: String,
}

fn count(t: &Tensor) -> usize {
    t.data().iter().filter(|&&v| v != 0.0).count()
}

fn cmd_refine(a: RefineArgs) -> CmdResult {
    let cfg = load_config(&a.common, |c| {
        set_opt(c, "iters_stage1", a.iters1)?;
        set_opt(c, "iters_stage2", a.iters2)?;
        set_opt(c, "kernel_radius", a.radius)?;
        set_opt(c, "binarize_threshold", a.threshold)
    })?;
    let rc = cfg.refine()?;
    let image = imageio::read_rgb(&a.image)?;
    let (_, h, w) = image.dims3("image")?;
    let seed_map = imageio::read_gray(&a.seed)?;
    let seed_map = if seed_map.shape() == [h, w] {
        seed_map
    } else {
        let (sh, sw) = seed_map.dims2("seed")?;
        resize_bilinear(&seed_map.reshape(&[1, sh, sw])?, h, w)?.reshape(&[h, w])?
    };
    let seed = SoftLabel::new(seed_map)?;
    let features = match (&a.guidance, &a.weights) {
        (Some(g), _) => resize_bilinear(&textseg::tensor::read_tensor(g)?, h, w)?,
        (None, Some(p)) => {
            let m = Model::load(p)?;
            guidance_features(&image, &m.backbone, &m.fusion)?
        }
        (None, None) => guidance_features(
            &image,
            &Backbone::seeded(cfg.rng_seed, 3, cfg.feature_channels),
            &FusionWeights::default(),
        )?,
    };
    let refined = two_stage_refine(
        &seed,
        &Guidance::new(features)?,
        &Guidance::new(image)?,
        &rc,
    )?;
    let mask = binarize(&refined, rc.binarize_threshold);
    imageio::write_mask(&a.out, &mask)?;
    if let Some(p) = &a.soft_out {
        imageio::write_gray(p, refined.values())?;
    }
    let report = RefineReport {
        height: h,
        width: w,
        seed_pixels: count(&binarize(&seed, rc.binarize_threshold)),
        mask_pixels: count(&mask),
        out: a.out.display().to_string(),
    };
    emit(&a.common, "refine", &cfg, &report, || {
        format!(
            "wrote {} ({} of {} pixels foreground)\n",
            report.out,
            report.mask_pixels,
            h * w
        )
    });
    Ok(())
}

fn cmd_pipeline(a: PipelineArgs) -> CmdResult {
    let cfg = load_config(&a.common, |c| set_opt(c, "max_steps", a.max_steps))?;
    let model = match &a.weights {
        Some(p) => Model::load(p)?,
        None => Model::seeded(cfg.rng_seed, &cfg.model_dims()?)?,
    };
    let table = match &a.symbols {
        Some(p) => SymbolTable::load(p)?,
        None => glyphs::symbol_table(),
    };
    let image = imageio::read_rgb(&a.image)?;
    let out = run_pipeline(&image, &model, &cfg.pipeline()?)?;
    create_dir(&a.out_dir)?;
    let stem = a
        .image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    for inst in &out.instances {
        let name = table.char_of(inst.symbol).unwrap_or('?');
        if a.emit != Emit::Pseudo {
            imageio::write_mask(
                &a.out_dir.join(format!("{stem}_{}_{name}.png", inst.index)),
                &inst.mask,
            )?;
        }
        if a.emit != Emit::Masks {
            imageio::write_mask(
                &a.out_dir
                    .join(format!("{stem}_{}_{name}_pseudo.png", inst.index)),
                &inst.pseudo,
            )?;
        }
    }
    let summary = out.summary(&table);
    let trace = a.out_dir.join(format!("{stem}_trace.json"));
    let body = serde_json::to_string_pretty(&summary).expect("trace serializes");
    std::fs::write(&trace, body + "\n").map_err(|source| Error::Io {
        path: trace.clone(),
        source,
    })?;
    emit(&a.common, "pipeline", &cfg, &summary, || {
        let mut s = format!(
            "{} instances, text \"{}\", end reached: {}\n",
            summary.instances.len(),
            summary.text,
            summary.reached_end
        );
        for i in &summary.instances {
            s += &format!(
                "{:>3} {:>3} {:>3}  entropy {:.4} {:.4} {:.4}  mask {:>6}  pseudo {:>6}\n",
                i.index,
                i.symbol,
                i.glyph.unwrap_or('?'),
                i.attention_entropy[0],
                i.attention_entropy[1],
                i.attention_entropy[2],
                i.mask_pixels,
                i.pseudo_pixels
            );
        }
        s
    });
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let cfg = load_config(&a.common, |c| {
        set_opt(c, "scenes", a.scenes)?;
        set_size(c, a.size.as_deref())?;
        set_opt(c, "iters_stage1", a.iters1)?;
        set_opt(c, "iters_stage2", a.iters2)
    })?;
    if cfg.scenes == 0 {
        return Err(Error::Config("scenes must be positive".into()).into());
    }
    let corpus = generate_corpus(cfg.rng_seed, cfg.scenes, &cfg.scene()?)?;
    let report = run_eval(&corpus, &cfg.eval()?)?;
    emit(&a.common, "eval", &cfg, &report, || report.table());
    let mut failed = Vec::new();
    if let Some(min) = a.min_improved {
        if report.improved_fraction < min {
            failed.push(format!(
                "improved on {:.3} of scenes, below {min}",
                report.improved_fraction
            ));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Assertion(failed))
    }
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let cfg = load_config(&a.common, |c| {
        set_size(c, a.size.as_deref())?;
        set_opt(c, "repeats", a.repeats)?;
        set_opt(c, "iters_stage1", a.iters1)?;
        set_opt(c, "iters_stage2", a.iters2)
    })?;
    let report = run_bench(&cfg.bench()?)?;
    emit(&a.common, "bench", &cfg, &report, || report.table());
    if report.tar_faster() {
        Ok(())
    } else {
        Err(Failure::Assertion(vec![format!(
            "tar median {:.3} ms is not below mean-field median {:.3} ms",
            report.tar_median_ms, report.meanfield_median_ms
        )]))
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let cfg = load_config(&a.common, |c| {
        set_opt(c, "batches", a.batches)?;
        set_opt(c, "grad_tolerance", a.tolerance)
    })?;
    let report = gradcheck_batches(&GradcheckConfig {
        seed: cfg.rng_seed,
        batches: cfg.batches,
        sizes: (cfg.min_batch, cfg.max_batch),
        dims: (cfg.min_dim, cfg.max_dim),
        tau: cfg.tau,
        denominator: cfg.denominator()?,
        step: cfg.fd_step,
        tolerance: cfg.grad_tolerance,
    })?;
    emit(&a.common, "gradcheck", &cfg, &report, || {
        format!(
            "{} batches, max relative error {:.3e} (tolerance {:.0e})\n",
            report.cases.len(),
            report.max_rel_error,
            report.tolerance
        )
    });
    let failed: Vec<String> = report
        .cases
        .iter()
        .enumerate()
        .filter(|(_, c)| c.max_rel_error > report.tolerance)
        .map(|(i, c)| {
            format!(
                "batch {i} (size {}, dim {}): relative error {:.3e}",
                c.size, c.dim, c.max_rel_error
            )
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Assertion(failed))
    }
}

#[derive(Serialize)]
struct InitReport {
    out: String,
    entries: usize,
}

fn cmd_init(a: InitArgs) -> CmdResult {
    let cfg = load_config(&a.common, |c| set_opt(c, "channels", a.channels))?;
    let model = Model::seeded(cfg.rng_seed, &cfg.model_dims()?)?;
    let archive = model.to_archive();
    archive.save(&a.out)?;
    if let Some(p) = &a.symbols {
        glyphs::symbol_table().save(p)?;
    }
    let report = InitReport {
        out: a.out.display().to_string(),
        entries: archive.len(),
    };
    emit(&a.common, "init-weights", &cfg, &report, || {
        format!("wrote {} entries to {}\n", report.entries, report.out)
    });
    Ok(())
}

#[derive(Serialize)]
struct SynthReport {
    scenes: usize,
    instances: usize,
    manifest: String,
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let cfg = load_config(&a.common, |c| {
        set_opt(c, "scenes", a.scenes)?;
        set_size(c, a.size.as_deref())
    })?;
    let corpus = generate_corpus(cfg.rng_seed, cfg.scenes, &cfg.scene()?)?;
    let records = write_corpus(&a.out_dir, &corpus)?;
    let report = SynthReport {
        scenes: records.len(),
        instances: records.iter().map(|r| r.masks.len()).sum(),
        manifest: a.out_dir.join("manifest.jsonl").display().to_string(),
    };
    emit(&a.common, "synth", &cfg, &report, || {
        format!(
            "{} scenes, {} instances, manifest {}\n",
            report.scenes, report.instances, report.manifest
        )
    });
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Refine(a) => cmd_refine(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::InitWeights(a) => cmd_init(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
        Err(Failure::Assertion(failed)) => {
            for f in &failed {
                eprintln!("assertion failed: {f}");
            }
            ExitCode::from(3)
        }
    }
}
