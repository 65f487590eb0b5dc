//! Command-line entry point: thin wrappers around the library pipeline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::features::ExtractorMode;
use crate::image::{load_image, save_image};
use crate::metrics::{benchmark_throughput, psnr, region_scores, ssim, ColorMode, MetricConvention};
use crate::networks::{load_generator, super_resolve, SkipMode};
use crate::obb::{build_obb_label, load_obb, load_segmentation, masks_from_obb, save_obb, BackgroundClassSet};
use crate::resize::{resize_bicubic, ResizeSpec};
use crate::synth::{generate_corpus, SceneSpec};
use crate::trainer::{load_manifest, Dataset, Trainer, TrainerConfig};

#[derive(Parser, Debug)]
#[command(
    name = "tpsr",
    version,
    about = "Region-targeted perceptual super-resolution pipeline",
    max_term_width = 100
)]
pub struct Cli {
    /// Override the RNG seed used by the subcommand
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Cap BLAS threads (default 1: deterministic math)
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Log verbosity: error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Derive Object/Background/Boundary labels from segmentation maps
    MakeObb(MakeObbArgs),
    /// Generate a synthetic training corpus with exact segmentation
    GenSynth(GenSynthArgs),
    /// Train the super-resolution generator (two-phase schedule)
    Train(TrainArgs),
    /// Upscale LR images x4 with a trained checkpoint
    Sr(SrArgs),
    /// Score SR results against HR references (CSV)
    Eval(EvalArgs),
    /// Measure inference throughput (JSON)
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct MakeObbArgs {
    /// Directory of segmentation PNGs, each with a sibling
    /// `<stem>.classes.json` class map
    pub seg_dir: PathBuf,
    /// Output directory for OBB PNGs (same file names)
    pub out_dir: PathBuf,
    /// Comma-separated class names treated as background
    #[arg(long, default_value = "sky,plant,ground,water")]
    pub bg_classes: String,
    /// Boundary dilation disk diameter in pixels
    #[arg(long, default_value_t = 2.0)]
    pub d1: f64,
}

#[derive(Args, Debug)]
pub struct GenSynthArgs {
    /// Output directory (scenes, OBB labels, manifest.jsonl)
    pub out_dir: PathBuf,
    /// Number of scenes
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Square scene edge in pixels
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Horizon row as a fraction of the height
    #[arg(long, default_value_t = 0.45)]
    pub horizon: f64,
    /// Objects per scene
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    /// Boundary dilation disk diameter for the OBB labels
    #[arg(long, default_value_t = 2.0)]
    pub d1: f64,
    /// Also write x1/4 bicubic LR images (`<scene>.lr.png`)
    #[arg(long)]
    pub lr: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SkipFlag {
    Add,
    Concat,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest (JSON lines: {"hr": ..., "obb": ...})
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and the step log
    #[arg(long)]
    pub out: PathBuf,
    /// JSON config file; command-line flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Resume from a checkpoint (config must match)
    #[arg(long)]
    pub resume: Option<PathBuf>,

    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub main_epochs: Option<usize>,
    /// Initial learning rate
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    #[arg(long)]
    pub lr_decay_factor: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// HR training patch edge (multiple of 4)
    #[arg(long)]
    pub patch_size: Option<usize>,

    /// Boundary perceptual weight
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Background perceptual weight
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub w_mse: Option<f64>,
    #[arg(long)]
    pub w_adv: Option<f64>,

    /// Generator residual blocks
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Generator base channels
    #[arg(long)]
    pub channels: Option<usize>,
    /// Global skip connection mode
    #[arg(long)]
    pub skip: Option<SkipFlag>,

    /// Feature extractor: `surrogate:<seed>` or a weight archive path
    #[arg(long)]
    pub extractor: Option<String>,
}

#[derive(Args, Debug)]
pub struct SrArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory (input file names, `.lr` stem suffix stripped)
    #[arg(long)]
    pub out_dir: PathBuf,
    /// LR input PNGs
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset manifest naming HR (and OBB) files
    #[arg(long, conflicts_with_all = ["sr", "hr"])]
    pub manifest: Option<PathBuf>,
    /// Directory of SR images named like the manifest's HR files
    #[arg(long, requires = "manifest")]
    pub sr_dir: Option<PathBuf>,
    /// Single SR image (pair mode)
    #[arg(long, requires = "hr")]
    pub sr: Option<PathBuf>,
    /// Single HR reference (pair mode)
    #[arg(long)]
    pub hr: Option<PathBuf>,
    /// Optional OBB label for region scores (pair mode)
    #[arg(long)]
    pub obb: Option<PathBuf>,
    /// Color convention for PSNR/SSIM
    #[arg(long, value_enum, default_value_t = ColorFlag::Rgb)]
    pub color: ColorFlag,
    /// Border pixels excluded from scoring
    #[arg(long, default_value_t = 4)]
    pub shave: usize,
    /// CSV output path (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ColorFlag {
    Rgb,
    Luma,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Trained checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// LR input height (256x192 LR is an XGA-sized x4 output)
    #[arg(long, default_value_t = 192)]
    pub height: usize,
    /// LR input width
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    /// Untimed warm-up passes
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Timed passes
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    /// JSON output path (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(io_err(p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_make_obb(args: &MakeObbArgs) -> Result<()> {
    let names: Vec<String> = args
        .bg_classes
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    let bg = BackgroundClassSet::new(names)?;
    std::fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.seg_dir)
        .map_err(io_err(&args.seg_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            // a segmentation map is a PNG with a sibling class map
            p.extension().is_some_and(|e| e == "png")
                && p.with_extension("classes.json").exists()
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no segmentation PNGs with class maps in {}",
            args.seg_dir.display()
        )));
    }
    for seg_path in entries {
        let classes = seg_path.with_extension("classes.json");
        let seg = load_segmentation(&seg_path, &classes)?;
        let obb = build_obb_label(&seg, &bg, args.d1)?;
        let out = args.out_dir.join(seg_path.file_name().expect("png file"));
        save_obb(&obb, &out)?;
        log::info!("{} -> {}", seg_path.display(), out.display());
    }
    Ok(())
}

fn run_gen_synth(args: &GenSynthArgs, seed: Option<u64>) -> Result<()> {
    let template = SceneSpec {
        size: args.size,
        seed: seed.unwrap_or(0),
        horizon: args.horizon,
        n_objects: args.objects,
    };
    let manifest = generate_corpus(args.count, &template, args.d1, &args.out_dir)?;
    if args.lr {
        for entry in load_manifest(&manifest)? {
            let hr = load_image(&entry.hr)?;
            let lr = resize_bicubic(&hr, ResizeSpec::new(0.25, true)?)?;
            let stem = entry.hr.file_stem().expect("png file").to_string_lossy();
            save_image(&lr, &entry.hr.with_file_name(format!("{stem}.lr.png")))?;
        }
    }
    log::info!("manifest at {}", manifest.display());
    Ok(())
}

/// Config-file values overridden by explicit flags (flag wins).
fn effective_train_config(args: &TrainArgs, seed: Option<u64>) -> Result<TrainerConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            serde_json::from_str(&text).map_err(|e| {
                Error::InvalidArgument(format!("config {}: {e}", path.display()))
            })?
        }
        None => TrainerConfig::default(),
    };
    let s = &mut cfg.schedule;
    if let Some(v) = args.pretrain_epochs {
        s.pretrain_epochs = v;
    }
    if let Some(v) = args.main_epochs {
        s.main_epochs = v;
    }
    if let Some(v) = args.lr0 {
        s.lr0 = v;
    }
    if let Some(v) = args.lr_decay_every {
        s.lr_decay_every = v;
    }
    if let Some(v) = args.lr_decay_factor {
        s.lr_decay_factor = v;
    }
    if let Some(v) = args.batch_size {
        s.batch_size = v;
    }
    if let Some(v) = args.patch_size {
        s.patch_size = v;
    }
    if let Some(v) = seed {
        s.seed = v;
    }
    if let Some(v) = args.alpha {
        cfg.weights.alpha = v;
    }
    if let Some(v) = args.beta {
        cfg.weights.beta = v;
    }
    if let Some(v) = args.w_mse {
        cfg.weights.w_mse = v;
    }
    if let Some(v) = args.w_adv {
        cfg.weights.w_adv = v;
    }
    if let Some(v) = args.blocks {
        cfg.generator.n_residual_blocks = v;
    }
    if let Some(v) = args.channels {
        cfg.generator.base_channels = v;
    }
    if let Some(v) = args.skip {
        cfg.generator.skip = match v {
            SkipFlag::Add => SkipMode::Add,
            SkipFlag::Concat => SkipMode::Concat,
        };
    }
    if let Some(spec) = &args.extractor {
        cfg.extractor = match spec.strip_prefix("surrogate:") {
            Some(seed) => ExtractorMode::Surrogate {
                seed: seed.parse().map_err(|_| {
                    Error::InvalidArgument(format!("bad surrogate seed in {spec:?}"))
                })?,
            },
            None => ExtractorMode::Pretrained {
                archive: PathBuf::from(spec),
            },
        };
    }
    // the discriminator's dense layers bind the HR patch size
    cfg.discriminator.input_size = cfg.schedule.patch_size;
    Ok(cfg)
}

fn run_train(args: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = effective_train_config(args, seed)?;
    log::info!(
        "effective config: {}",
        serde_json::to_string(&cfg).expect("serializable config")
    );
    let data = Dataset::load(&args.manifest)?;
    let mut trainer = match &args.resume {
        Some(ckpt) => Trainer::resume(cfg, ckpt)?,
        None => Trainer::new(cfg)?,
    };
    let final_ckpt = trainer.run(&data, &args.out)?;
    log::info!("final checkpoint: {}", final_ckpt.display());
    Ok(())
}

fn run_sr(args: &SrArgs) -> Result<()> {
    let generator = load_generator(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out_dir).map_err(io_err(&args.out_dir))?;
    for input in &args.inputs {
        let lr = load_image(input)?;
        let sr = super_resolve(&generator, &lr)?;
        let stem = input.file_stem().expect("file name").to_string_lossy();
        let stem = stem.strip_suffix(".lr").unwrap_or(&stem);
        let out = args.out_dir.join(format!("{stem}.png"));
        save_image(&sr, &out)?;
        log::info!("{} -> {}", input.display(), out.display());
    }
    Ok(())
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_db).unwrap_or_default()
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let conv = MetricConvention {
        color: match args.color {
            ColorFlag::Rgb => ColorMode::Rgb,
            ColorFlag::Luma => ColorMode::Luma,
        },
        border_shave: args.shave,
        range: 1.0,
    };
    let mut pairs: Vec<(String, PathBuf, PathBuf, Option<PathBuf>)> = Vec::new();
    match (&args.manifest, &args.sr, &args.hr) {
        (Some(manifest), None, None) => {
            let sr_dir = args.sr_dir.as_ref().ok_or_else(|| {
                Error::InvalidArgument("--manifest mode needs --sr-dir".into())
            })?;
            for entry in load_manifest(manifest)? {
                let name = entry
                    .hr
                    .file_name()
                    .expect("file name")
                    .to_string_lossy()
                    .into_owned();
                pairs.push((name.clone(), sr_dir.join(&name), entry.hr, Some(entry.obb)));
            }
        }
        (None, Some(sr), Some(hr)) => {
            let name = sr.file_name().expect("file name").to_string_lossy().into_owned();
            pairs.push((name, sr.clone(), hr.clone(), args.obb.clone()));
        }
        _ => {
            return Err(Error::InvalidArgument(
                "use either --manifest with --sr-dir, or --sr with --hr".into(),
            ))
        }
    }
    let mut csv = String::from("image,psnr,ssim,psnr_object,psnr_background,psnr_boundary\n");
    for (name, sr_path, hr_path, obb_path) in pairs {
        let sr = load_image(&sr_path)?;
        let hr = load_image(&hr_path)?;
        let p = psnr(&sr, &hr, &conv)?;
        let s = ssim(&sr, &hr, &conv)?;
        let regions = match obb_path {
            Some(op) => {
                let masks = masks_from_obb(&load_obb(&op)?);
                Some(region_scores(&sr, &hr, &masks, &conv)?)
            }
            None => None,
        };
        let (ro, rb, rn) = regions
            .map(|r| (r.object, r.background, r.boundary))
            .unwrap_or((None, None, None));
        writeln!(
            csv,
            "{name},{},{:.6},{},{},{}",
            fmt_db(p),
            s,
            fmt_opt(ro),
            fmt_opt(rb),
            fmt_opt(rn)
        )
        .expect("string write");
    }
    write_text(args.out.as_deref(), &csv)
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let generator = load_generator(&args.checkpoint)?;
    let report = benchmark_throughput(
        &generator,
        (args.height, args.width),
        args.warmup,
        args.repeats,
    )?;
    let json = serde_json::to_string_pretty(&report).expect("serializable report");
    write_text(args.out.as_deref(), &format!("{json}\n"))
}

/// Dispatch a parsed invocation. Errors map to exit codes via
/// `Error::exit_code`.
pub fn run(cli: &Cli) -> Result<()> {
    // determinism depends on single-threaded BLAS; > 1 is opt-in
    std::env::set_var("OPENBLAS_NUM_THREADS", cli.threads.to_string());
    std::env::set_var("OMP_NUM_THREADS", cli.threads.to_string());
    log::info!("invocation: {:?}", cli.command);
    match &cli.command {
        Command::MakeObb(args) => run_make_obb(args),
        Command::GenSynth(args) => run_gen_synth(args, cli.seed),
        Command::Train(args) => run_train(args, cli.seed),
        Command::Sr(args) => run_sr(args),
        Command::Eval(args) => run_eval(args),
        Command::Bench(args) => run_bench(args),
    }
}
