use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use cuf_core::checkpoint::Checkpoint;
use cuf_core::config::RunConfig;
use cuf_core::encoder::EncoderConfig;
use cuf_core::eval::{self, Bicubic, ColorSpace, CostQuery, EvalError, GeoEnsemble, HeadKind, Upscaler};
use cuf_core::imaging::{self, Image};
use cuf_core::model::{HeadConfig, SrModel};
use cuf_core::synth;
use cuf_core::train::{self, Dataset};

#[derive(Parser)]
#[command(name = "cuf", version, about = "Arbitrary-scale super-resolution with continuous upsampling filters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run config.
    Train {
        config: PathBuf,
        /// Suppress per-epoch progress on stderr.
        #[arg(long)]
        quiet: bool,
    },
    /// Upscale a PNG by a real factor.
    Upscale(UpscaleArgs),
    /// Freeze a continuous head at an integer scale into a new checkpoint.
    Instantiate {
        checkpoint: PathBuf,
        #[arg(long)]
        scale: f64,
        output: PathBuf,
    },
    /// Print per-stage multiply counts (adds excluded) as CSV.
    Flops(FlopsArgs),
    /// PSNR of a checkpoint or of bicubic upscaling over a directory.
    Psnr(PsnrArgs),
    /// Eigenvalue spectra of the upsampling filters as CSV.
    AnalyzeFilters {
        checkpoint: PathBuf,
        #[arg(long)]
        scale: f64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write procedural texture PNGs into a directory.
    Synth {
        output_dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct UpscaleArgs {
    checkpoint: PathBuf,
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    scale: f64,
    /// Decode with the discrete kernel bank (integer scales only).
    #[arg(long)]
    instantiate: bool,
    /// Average over the eight flips and rotations of the input.
    #[arg(long)]
    geo_ensemble: bool,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    head: String,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long)]
    scale: f64,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    /// Post-shuffle channels of the sub-pixel head; defaults to --channels.
    #[arg(long)]
    n_out: Option<usize>,
    /// Include an encoder with this many residual blocks.
    #[arg(long)]
    encoder_blocks: Option<usize>,
}

#[derive(Args)]
struct PsnrArgs {
    /// Checkpoint to evaluate; omit with --bicubic.
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    bicubic: bool,
    #[arg(long)]
    hr: PathBuf,
    /// Directory of LR images named like the HR ones (single scale only).
    #[arg(long)]
    lr: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    scales: Vec<f64>,
    #[arg(long, default_value = "rgb")]
    space: String,
    #[arg(long)]
    geo_ensemble: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Failure class, mapped to the process exit code.
enum Failure {
    /// Bad arguments, configs or input files: exit 2.
    Invalid(anyhow::Error),
    /// Anything that goes wrong after validation: exit 3.
    Runtime(anyhow::Error),
}

type CmdResult<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn invalid<T>(msg: impl std::fmt::Display) -> CmdResult<T> {
    Err(Failure::Invalid(anyhow!("{msg}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, quiet } => cmd_train(&config, quiet),
        Command::Upscale(a) => cmd_upscale(&a),
        Command::Instantiate { checkpoint, scale, output } => cmd_instantiate(&checkpoint, scale, &output),
        Command::Flops(a) => cmd_flops(&a),
        Command::Psnr(a) => cmd_psnr(&a),
        Command::AnalyzeFilters { checkpoint, scale, output } => cmd_analyze(&checkpoint, scale, output.as_deref()),
        Command::Synth { output_dir, count, size, seed } => cmd_synth(&output_dir, count, size, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn integer_scale(s: f64) -> CmdResult<usize> {
    if s.is_finite() && s >= 1.0 && s.fract() == 0.0 {
        Ok(s as usize)
    } else {
        invalid(format!("scale must be an integer >= 1, got {s}"))
    }
}

fn real_scale(s: f64) -> CmdResult<f64> {
    if s.is_finite() && s >= 1.0 {
        Ok(s)
    } else {
        invalid(format!("scale must be finite and >= 1, got {s}"))
    }
}

fn load_model(path: &Path) -> CmdResult<SrModel> {
    Checkpoint::load(path)
        .and_then(|c| Ok(c.into_model()?))
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .invalid()
}

/// The output's directory must already exist and the path must not be a directory.
fn check_output(path: &Path) -> CmdResult {
    if path.is_dir() {
        return invalid(format!("output {} is a directory", path.display()));
    }
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return invalid(format!("output directory {} does not exist", parent.display()));
    }
    Ok(())
}

fn write_output(path: Option<&Path>, text: &str) -> CmdResult {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())).runtime(),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(config_path: &Path, quiet: bool) -> CmdResult {
    let cfg = RunConfig::load(config_path).invalid()?;
    cfg.validate().invalid()?;
    let data = cfg.data.train.load().context("loading training data").invalid()?;
    let eval_data = match &cfg.data.eval {
        Some(src) => Some(src.load().context("loading evaluation data").invalid()?),
        None => None,
    };
    data.check_crops(&cfg.train).invalid()?;
    let mut model = SrModel::new(cfg.model, cfg.seed).invalid()?;

    let out = &cfg.output;
    fs::create_dir_all(&out.dir).with_context(|| format!("creating {}", out.dir.display())).runtime()?;
    fs::write(out.effective_config_path(), cfg.to_json()).context("writing effective config").runtime()?;
    if !quiet {
        eprintln!(
            "training {} ({} parameters) on {} images for {} epochs",
            cfg.model.head_kind(),
            model.num_parameters(),
            data.len(),
            cfg.train.epochs
        );
    }
    let report = train::train(&mut model, &data, eval_data.as_ref(), &cfg.train, cfg.seed, |m| {
        if !quiet {
            let e = m.eval.clone().unwrap_or_default();
            let f = |v: Option<f64>| v.map(imaging::format_psnr).unwrap_or_else(|| "-".into());
            eprintln!(
                "epoch {:>4}  lr {:.2e}  l1 {:.5}  psnr x2 {} x3 {} x4 {}",
                m.epoch,
                m.lr,
                m.train_l1,
                f(e.x2),
                f(e.x3),
                f(e.x4)
            );
        }
    })
    .runtime()?;
    fs::write(out.metrics_path(), train::metrics_csv(&report.metrics)).context("writing metrics").runtime()?;
    Checkpoint::from_model(&model, Some(report.adam)).save(out.checkpoint_path()).runtime()?;
    if !quiet {
        eprintln!("wrote {}", out.checkpoint_path().display());
    }
    Ok(())
}

/// Adapts a closure to [`Upscaler`].
struct FnUpscaler<F>(F);

impl<F: Fn(&Image, f64) -> Result<Image, EvalError>> Upscaler for FnUpscaler<F> {
    fn upscale(&self, lr: &Image, s: f64) -> Result<Image, EvalError> {
        (self.0)(lr, s)
    }
}

fn cmd_upscale(a: &UpscaleArgs) -> CmdResult {
    let s = real_scale(a.scale)?;
    let model = load_model(&a.checkpoint)?;
    if a.instantiate {
        integer_scale(s)?;
        if !matches!(model.config().head, HeadConfig::Cuf(_)) {
            return invalid(format!("--instantiate needs a continuous head, not {}", model.config().head_kind()));
        }
    } else if let Some(fixed) = model.arch.fixed_scale() {
        if fixed as f64 != s {
            return invalid(format!("{} head only decodes at scale {fixed}", model.config().head_kind()));
        }
    }
    let input = imaging::load_png(&a.input).with_context(|| format!("reading {}", a.input.display())).invalid()?;
    check_output(&a.output)?;

    let single = FnUpscaler(|img: &Image, s: f64| -> Result<Image, EvalError> {
        if a.instantiate {
            Ok(model.upscale_instantiated(img, s as usize)?)
        } else {
            Upscaler::upscale(&model, img, s)
        }
    });
    let out = if a.geo_ensemble {
        GeoEnsemble(single).upscale(&input, s)
    } else {
        single.upscale(&input, s)
    }
    .runtime()?;
    imaging::save_png(&out, &a.output).runtime()
}

fn cmd_instantiate(path: &Path, scale: f64, output: &Path) -> CmdResult {
    let s = integer_scale(scale)?;
    let model = load_model(path)?;
    if !matches!(model.config().head, HeadConfig::Cuf(_)) {
        return invalid(format!("only continuous heads can be instantiated, not {}", model.config().head_kind()));
    }
    check_output(output)?;
    let frozen = model.instantiate(s).runtime()?;
    Checkpoint::from_model(&frozen, None).save(output).runtime()
}

fn cmd_flops(a: &FlopsArgs) -> CmdResult {
    let head: HeadKind = a.head.parse().invalid()?;
    let mut q = CostQuery::new(head, a.height, a.width, a.scale, a.channels, a.kernel);
    if let Some(n) = a.n_out {
        q.n_out = n;
    }
    if let Some(blocks) = a.encoder_blocks {
        q.encoder = Some(EncoderConfig { channels: a.channels, blocks, kernel: 3 });
    }
    let report = eval::count_mults(&q).invalid()?;
    write_output(None, &eval::cost_csv(&report))
}

fn cmd_psnr(a: &PsnrArgs) -> CmdResult {
    let space: ColorSpace = a.space.parse().invalid()?;
    if a.scales.is_empty() {
        return invalid("--scales is empty");
    }
    for &s in &a.scales {
        real_scale(s)?;
    }
    let model = match (&a.checkpoint, a.bicubic) {
        (Some(_), true) => return invalid("give either a checkpoint or --bicubic, not both"),
        (None, false) => return invalid("give a checkpoint or --bicubic"),
        (Some(p), false) => Some(load_model(p)?),
        (None, true) => None,
    };
    if let Some(m) = &model {
        if let Some(fixed) = m.arch.fixed_scale() {
            if a.scales.iter().any(|&s| s != fixed as f64) {
                return invalid(format!("{} head only decodes at scale {fixed}", m.config().head_kind()));
            }
        }
    }
    if a.lr.is_some() && a.scales.len() != 1 {
        return invalid("--lr needs exactly one scale");
    }
    let hr = Dataset::from_dir(&a.hr).context("loading --hr").invalid()?;
    let named: Vec<(String, Image)> = hr.names.into_iter().zip(hr.images).collect();
    let pairs = match &a.lr {
        None => None,
        Some(dir) => {
            let mut v = Vec::with_capacity(named.len());
            for (name, img) in &named {
                let p = dir.join(name);
                let lr = imaging::load_png(&p).with_context(|| format!("reading {}", p.display())).invalid()?;
                v.push((name.clone(), img.clone(), lr));
            }
            Some(v)
        }
    };
    if let Some(p) = &a.output {
        check_output(p)?;
    }

    let run = |up: &dyn Fn(&Image, f64) -> Result<Image, EvalError>| -> Result<eval::PsnrTable, EvalError> {
        let up = FnUpscaler(up);
        match (&pairs, a.geo_ensemble) {
            (Some(p), false) => eval::psnr_pairs(&up, p, a.scales[0], space),
            (Some(p), true) => eval::psnr_pairs(&GeoEnsemble(up), p, a.scales[0], space),
            (None, false) => eval::psnr_eval(&up, &named, &a.scales, space),
            (None, true) => eval::psnr_eval(&GeoEnsemble(up), &named, &a.scales, space),
        }
    };
    let table = match &model {
        Some(m) => run(&|img, s| Upscaler::upscale(m, img, s)),
        None => run(&|img, s| Bicubic.upscale(img, s)),
    }
    .runtime()?;
    write_output(a.output.as_deref(), &table.to_csv())
}

fn cmd_analyze(path: &Path, scale: f64, output: Option<&Path>) -> CmdResult {
    let s = integer_scale(scale)?;
    if s < 2 {
        return invalid("filter analysis needs scale >= 2");
    }
    let model = load_model(path)?;
    if let Some(fixed) = model.arch.fixed_scale() {
        if fixed != s {
            return invalid(format!("{} head is fixed at scale {fixed}", model.config().head_kind()));
        }
    }
    if let Some(p) = output {
        check_output(p)?;
    }
    let report = eval::filter_pca(&model, s).runtime()?;
    write_output(output, &report.to_csv())
}

fn cmd_synth(dir: &Path, count: usize, size: usize, seed: u64) -> CmdResult {
    if count == 0 || size == 0 {
        return invalid("--count and --size must be positive");
    }
    if dir.exists() && !dir.is_dir() {
        return invalid(format!("{} is not a directory", dir.display()));
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).runtime()?;
    for i in 0..count {
        let seed_i = seed + i as u64;
        let path = dir.join(format!("synth_{seed_i:04}.png"));
        imaging::save_png(&synth::texture(size, seed_i), &path).runtime()?;
    }
    Ok(())
}
