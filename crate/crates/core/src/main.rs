use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cmreid::ablation::{run_ablation, AblationGrid};
use cmreid::dataset::{generate_synthetic, SyntheticSpec};
use cmreid::evaluator::{evaluate, EvalProtocol, EvalSource, FeatureView};
use cmreid::losses::LossTerms;
use cmreid::model::VisibleInput;
use cmreid::spectral::{expand_channels, to_grayscale, Image};
use cmreid::trainer::{load_checkpoint, TrainConfig, Trainer};
use cmreid::{Error, Result};

#[derive(Parser)]
#[command(name = "cmreid", version, about = "Visible-infrared person re-identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic two-modality dataset (PNG files plus manifest.csv).
    GenerateSynthetic(GenerateArgs),
    /// Convert every PNG/JPEG in a directory to grayscale.
    ConvertGrayscale(ConvertArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Evaluate a checkpoint in one query direction.
    Evaluate(EvaluateArgs),
    /// Train and evaluate a grid of loss sets, visible inputs and seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON file with the full generator settings; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    images_per_modality: Option<usize>,
    #[arg(long)]
    test_identities: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Write three identical channels instead of one.
    #[arg(long)]
    three_channel: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long, conflicts_with = "resume")]
    config: Option<PathBuf>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output directory for metrics and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    Gray2ir,
    Ir2gray,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Test,
    Train,
}

impl From<SourceArg> for EvalSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Test => EvalSource::Test,
            SourceArg::Train => EvalSource::Train,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FeatureArg {
    PreBn,
    PostBn,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    direction: Direction,
    #[arg(long, value_enum, default_value = "test")]
    source: SourceArg,
    #[arg(long, value_enum, default_value = "pre-bn")]
    feature: FeatureArg,
    /// Keep only gallery records from these cameras (comma separated).
    #[arg(long, value_delimiter = ',')]
    gallery_cameras: Option<Vec<u32>>,
    #[arg(long)]
    exclude_same_camera: bool,
    #[arg(long)]
    gallery_shots: Option<usize>,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    /// Report JSON path; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-query ranked lists as CSV.
    #[arg(long)]
    per_query: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum InputArg {
    Grayscale,
    Rgb,
}

#[derive(Args)]
struct AblateArgs {
    /// Base training config; the toy config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated loss sets such as `id,id+cross,id+cross+intra+inter`.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "id,id+cross,id+cross+intra,id+cross+intra+inter"
    )]
    losses: Vec<String>,
    #[arg(long, value_enum, value_delimiter = ',', default_value = "grayscale")]
    inputs: Vec<InputArg>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "train")]
    source: SourceArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => serde_json::from_str(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = args.identities {
        spec.num_identities = v;
    }
    if let Some(v) = args.images_per_modality {
        spec.images_per_identity_per_modality = v;
    }
    if let Some(v) = args.test_identities {
        spec.num_test_identities = v;
    }
    if let Some(v) = args.height {
        spec.image_size.0 = v;
    }
    if let Some(v) = args.width {
        spec.image_size.1 = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    let manifest = generate_synthetic(&spec)?.write_to_disk(&args.out)?;
    println!("wrote {} records to {}", manifest.len(), args.out.display());
    Ok(())
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn convert(args: ConvertArgs) -> Result<()> {
    fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    let mut entries: Vec<PathBuf> = fs::read_dir(&args.input)
        .map_err(|e| Error::io(&args.input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    entries.sort();
    for path in &entries {
        let img = Image::open(path)?;
        let gray = if img.channels() == 1 { img } else { to_grayscale(&img)? };
        let out = if args.three_channel {
            expand_channels(&gray)?
        } else {
            gray
        };
        let name = path.file_stem().unwrap_or_default();
        out.save(args.output.join(name).with_extension("png"))?;
    }
    println!("converted {} images into {}", entries.len(), args.output.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(dir) => {
            if args.seed.is_some() || args.epochs.is_some() || args.out.is_some() {
                return Err(Error::Config(
                    "--seed, --epochs and --out cannot change a resumed run".into(),
                ));
            }
            Trainer::resume(dir)?
        }
        None => {
            let mut config = match &args.config {
                Some(path) => TrainConfig::from_json_file(path)?,
                None => TrainConfig::toy(),
            };
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            if let Some(epochs) = args.epochs {
                config.epochs = epochs;
            }
            if let Some(out) = args.out {
                config.output_dir = Some(out);
            }
            Trainer::new(config)?
        }
    };
    trainer.run()?;
    if let Some(last) = trainer.history().last() {
        println!("{}", serde_json::to_string(last)?);
    }
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let (config, model, _) = load_checkpoint(&args.checkpoint)?;
    let manifest = config.dataset.load()?;
    let mut protocol = match args.direction {
        Direction::Gray2ir => EvalProtocol::visible_to_infrared(),
        Direction::Ir2gray => EvalProtocol::infrared_to_visible(),
    };
    protocol.source = args.source.into();
    protocol.feature = match args.feature {
        FeatureArg::PreBn => FeatureView::PreBn,
        FeatureArg::PostBn => FeatureView::PostBn,
    };
    protocol.gallery_cameras = args.gallery_cameras.map(|c| c.into_iter().collect());
    protocol.exclude_same_camera = args.exclude_same_camera;
    protocol.gallery_shots = args.gallery_shots;
    protocol.num_trials = args.trials;
    let report = evaluate(&model, &manifest, &protocol)?;
    match &args.out {
        Some(path) => {
            report.write_json(path)?;
            println!(
                "{} rank-1 {:.4} mAP {:.4} ({} queries)",
                report.direction,
                report.rank1(),
                report.map,
                report.num_queries
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if let Some(path) = &args.per_query {
        report.write_per_query_csv(path)?;
    }
    Ok(())
}

fn ablate_cmd(args: AblateArgs) -> Result<()> {
    let mut base = match &args.config {
        Some(path) => TrainConfig::from_json_file(path)?,
        None => TrainConfig::toy(),
    };
    if let Some(epochs) = args.epochs {
        base.epochs = epochs;
    }
    let grid = AblationGrid {
        losses: args.losses.iter().map(|s| LossTerms::parse(s)).collect::<Result<_>>()?,
        inputs: args
            .inputs
            .iter()
            .map(|i| match i {
                InputArg::Grayscale => VisibleInput::Grayscale,
                InputArg::Rgb => VisibleInput::Rgb,
            })
            .collect(),
        seeds: args.seeds,
        eval_source: args.source.into(),
    };
    let table = run_ablation(&base, &grid)?;
    table.write(&args.out)?;
    print!("{}", table.to_markdown());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateSynthetic(a) => generate(a),
        Command::ConvertGrayscale(a) => convert(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
