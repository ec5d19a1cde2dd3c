use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stylefat::evalkit::{
    extract_features, fid, lpips_diversity, translate_with_random_references, ConvExtractor, Extractor,
    MetricRecord, PixelExtractor,
};
use stylefat::trainer::{fit, load_checkpoint, load_dataset, load_image, planar_to_image};
use stylefat::{Generator, ImageBatch, Tensor, TrainConfig, Variant};

#[derive(Parser)]
#[command(name = "stylefat", version, about = "Reference-guided photo-to-anime face translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model.
    Train(TrainArgs),
    /// Translate a photo (or a folder of photos) in the style of a reference.
    Translate(TranslateArgs),
    /// Compute FID or LPIPS diversity for a checkpoint.
    Evaluate(EvaluateArgs),
    /// Train one single-switch ablation of the full model.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set lambda_rec=2.0` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Output directory for the log, config snapshot and checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to resume from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Start from the desk-scale preset instead of the full-size defaults.
    #[arg(long)]
    smoke: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    variant: VariantArg,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    #[value(name = "no_asc")]
    NoAsc,
    #[value(name = "no_fst")]
    NoFst,
    #[value(name = "no_db")]
    NoDb,
    #[value(name = "in")]
    In,
    #[value(name = "lin")]
    Lin,
    #[value(name = "adain")]
    AdaIn,
    #[value(name = "adalin")]
    AdaLin,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::NoAsc => Variant::NoAsc,
            VariantArg::NoFst => Variant::NoFst,
            VariantArg::NoDb => Variant::NoDb,
            VariantArg::In => Variant::In,
            VariantArg::Lin => Variant::Lin,
            VariantArg::AdaIn => Variant::AdaIn,
            VariantArg::AdaLin => Variant::AdaLin,
        }
    }
}

#[derive(Args)]
struct TranslateArgs {
    /// Photo file or folder of photos.
    #[arg(long)]
    source: PathBuf,
    /// Reference anime face.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output file (single source) or folder (source folder).
    #[arg(long, default_value = "translated.png")]
    out: PathBuf,
    /// Use the live generator instead of the moving average.
    #[arg(long)]
    live: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Fid,
    Lpips,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    metric: Metric,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test photos.
    #[arg(long)]
    photos: PathBuf,
    /// Real anime test faces (FID) or the reference pool (LPIPS).
    #[arg(long)]
    anime: PathBuf,
    /// `pixel` or a path to a JSON convolution extractor.
    #[arg(long, default_value = "pixel")]
    extractor: String,
    /// References per photo for LPIPS diversity.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "custom")]
    dataset: String,
    /// Folder for metrics.json and the metrics.csv summary.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    live: bool,
}

type CliResult<T = ()> = Result<T, String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn build_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path).map_err(err)?,
        None if args.smoke => TrainConfig::smoke(),
        None => TrainConfig::default(),
    };
    config.apply_overrides(&args.overrides).map_err(err)?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.iters {
        config.iterations = n;
    }
    if let Some(s) = args.image_size {
        config.image_size = s;
    }
    if let Some(o) = &args.out {
        config.output_dir = o.clone();
    }
    config.validate().map_err(err)?;
    Ok(config)
}

fn run_training(config: &TrainConfig, resume: Option<&Path>) -> CliResult {
    println!("switches: {}", config.switch_summary());
    let state = fit(config, resume).map_err(err)?;
    println!(
        "finished {} iterations; checkpoint in {}",
        state.iteration,
        config.output_dir.display()
    );
    Ok(())
}

fn load_generator(checkpoint: &Path, live: bool) -> CliResult<(Generator<f32>, usize)> {
    let state = load_checkpoint::<f32>(checkpoint).map_err(err)?;
    let size = state.config.image_size;
    Ok((if live { state.generator } else { state.ema }, size))
}

fn image_batch(planar: Vec<f32>, size: usize) -> CliResult<ImageBatch<f32>> {
    ImageBatch::new(Tensor::from_vec(planar, &[1, 3, size, size])).map_err(err)
}

fn translate(args: &TranslateArgs) -> CliResult {
    let (model, size) = load_generator(&args.checkpoint, args.live)?;
    let reference = image_batch(load_image(&args.reference, size).map_err(err)?, size)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if args.source.is_dir() {
        let photos = load_dataset(&args.source, size).map_err(err)?;
        std::fs::create_dir_all(&args.out).map_err(err)?;
        photos
            .names()
            .iter()
            .map(|n| {
                let out = args.out.join(Path::new(n).with_extension("png"));
                (args.source.join(n), out)
            })
            .collect()
    } else {
        vec![(args.source.clone(), args.out.clone())]
    };
    for (src, out) in jobs {
        let source = image_batch(load_image(&src, size).map_err(err)?, size)?;
        let result = stylefat::autograd::no_grad(|| model.translate(&source, &reference)).map_err(err)?;
        planar_to_image(&result.tensor().to_f64_vec(), size)
            .save(&out)
            .map_err(|e| format!("cannot write {}: {e}", out.display()))?;
        println!("{}", out.display());
    }
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> CliResult {
    let extractor: Box<dyn Extractor> = if args.extractor == "pixel" {
        Box::new(PixelExtractor)
    } else {
        Box::new(ConvExtractor::load(Path::new(&args.extractor)).map_err(err)?)
    };
    let (model, size) = load_generator(&args.checkpoint, args.live)?;
    let photos = load_dataset(&args.photos, size).map_err(err)?.all::<f32>().map_err(err)?;
    let anime = load_dataset(&args.anime, size).map_err(err)?.all::<f32>().map_err(err)?;
    let (name, value) = match args.metric {
        Metric::Fid => {
            let fake = translate_with_random_references(&model, &photos, &anime, args.seed, 8).map_err(err)?;
            let a = extract_features(&fake, extractor.as_ref()).map_err(err)?;
            let b = extract_features(&anime, extractor.as_ref()).map_err(err)?;
            ("fid", fid(&a, &b).map_err(err)?)
        }
        Metric::Lpips => (
            "lpips_diversity",
            lpips_diversity(&model, &photos, &anime, args.k, args.seed, extractor.as_ref()).map_err(err)?,
        ),
    };
    let record = MetricRecord {
        metric: name.into(),
        dataset: args.dataset.clone(),
        value,
        n_images: photos.len(),
        extractor: extractor.tag(),
        seed: args.seed,
    };
    std::fs::create_dir_all(&args.out).map_err(err)?;
    record.write_json(&args.out.join("metrics.json")).map_err(err)?;
    record.append_csv(&args.out.join("metrics.csv")).map_err(err)?;
    println!("{name} = {value}");
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(args) => run_training(&build_config(&args)?, args.checkpoint.as_deref()),
        Command::Ablate(args) => {
            let mut config = build_config(&args.train)?;
            let variant = Variant::from(args.variant);
            variant.apply(&mut config);
            println!("variant: {variant}");
            run_training(&config, args.train.checkpoint.as_deref())
        }
        Command::Translate(args) => translate(&args),
        Command::Evaluate(args) => evaluate(&args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
