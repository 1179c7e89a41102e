//! `garment` command line: synthetic data, training, reconstruction,
//! benchmark and ablation runs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use garment_core::neural::{
    loss_history_csv, train_line_regressor, train_mesh_refiner, train_occupancy, SilhouetteDescriptor,
};
use garment_core::pipeline::{
    classifier_items, line_samples, load_dataset, occupancy_samples, refiner_samples, run_ablations, run_benchmark_on,
    run_pipeline, Classifier, Models, OracleToggles, PipelineConfig, PipelineError, PipelineInput, StageToggles,
};
use garment_core::synth::{family, generate_family, write_dataset, SynthGarment};
use garment_core::template::AdaptableTemplate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_STAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
/// Caps the rayon worker count.
pub const THREADS_ENV: &str = "GARMENT_PIPELINE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "garment", version, about = "Single-view garment reconstruction on synthetic data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Pipeline config JSON; flags below override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated optional stages: pose,lines,deform,implicit,register,refine.
    #[arg(long, global = true)]
    pub stages: Option<String>,
    /// Oracle substitutes: category, pose, occupancy, lines. Repeatable or
    /// comma-separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub oracle: Vec<String>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Marching-cubes lattice resolution.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long = "lines-weights")]
    pub lines: Option<PathBuf>,
    #[arg(long = "occ-weights")]
    pub occupancy: Option<PathBuf>,
    #[arg(long = "refiner-weights")]
    pub refiner: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a synthetic garment dataset to --out.
    GenData {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0.3)]
        pose_magnitude: f64,
        #[arg(long, default_value_t = 0.003)]
        wrinkle: f64,
    },
    /// Trains the feature-line regressor; writes lines.bin and loss_history.csv.
    TrainLines(DataArgs),
    /// Trains the occupancy net; writes occupancy.bin.
    TrainOcc(DataArgs),
    /// Fits the nearest-centroid classifier; writes classifier.json.
    TrainClassifier(DataArgs),
    /// Trains the whole-mesh GCN used by the "+GCN" ablations; writes refiner.bin.
    TrainRefiner(DataArgs),
    /// Runs the pipeline on dataset entries and writes every stage output.
    Reconstruct {
        #[command(flatten)]
        data: DataArgs,
        /// Only this entry id.
        #[arg(long)]
        entry: Option<String>,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Benchmarks the pipeline; writes report.csv and report.json.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "full")]
        method: String,
        #[command(flatten)]
        models: ModelArgs,
    },
    /// Benchmarks every ablation setting, one report directory each.
    Ablate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        models: ModelArgs,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Stage(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Stage(_) => EXIT_STAGE,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Stage(m) => write!(f, "stage failure: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Untrained(_) => CliError::Config(e.to_string()),
            PipelineError::Stage(_) => CliError::Stage(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

/// Config file (or defaults) with the global flags applied.
pub fn resolve_config(g: &GlobalArgs) -> Result<PipelineConfig, CliError> {
    let mut c = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        c.seed = seed;
        c.line_training.seed = seed;
        c.occupancy_training.seed = seed;
        c.refiner_training.seed = seed;
    }
    if let Some(s) = &g.stages {
        c.stages = StageToggles::parse_list(s)?;
    }
    if !g.oracle.is_empty() {
        let mut o = OracleToggles::default();
        for name in &g.oracle {
            o.enable(name)?;
        }
        c.oracle = o;
    }
    if let Some(r) = g.resolution {
        c.resolution = r;
    }
    c.validate()?;
    Ok(c)
}

fn models(config: &PipelineConfig, args: &ModelArgs) -> Result<Models, CliError> {
    let mut paths = config.models.clone();
    let pick = |flag: &Option<PathBuf>, slot: &mut Option<PathBuf>| {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    };
    pick(&args.classifier, &mut paths.classifier);
    pick(&args.lines, &mut paths.lines);
    pick(&args.occupancy, &mut paths.occupancy);
    pick(&args.refiner, &mut paths.refiner);
    Models::load(&paths).map_err(|e| CliError::Config(e.to_string()))
}

type Items = Vec<(String, SynthGarment, SilhouetteDescriptor)>;

fn pairs(items: &Items) -> Vec<(SynthGarment, SilhouetteDescriptor)> {
    items.iter().map(|(_, g, d)| (g.clone(), d.clone())).collect()
}

fn create(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| other(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| other(format!("{}: {e}", path.display())))
}

fn configure_threads() {
    let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|n| *n > 0) else {
        return;
    };
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("rayon pool already initialised");
    }
}

/// Executes one parsed command.
pub fn execute(cli: Cli) -> Result<(), CliError> {
    let config = resolve_config(&cli.global)?;
    let out = cli.global.out.clone();
    let template = AdaptableTemplate::procedural();
    match cli.command {
        Command::GenData { count, pose_magnitude, wrinkle } => {
            if !(pose_magnitude >= 0.0 && wrinkle >= 0.0) {
                return Err(CliError::Config("magnitudes must be non-negative".into()));
            }
            let garments = generate_family(&family(count, pose_magnitude, wrinkle, config.seed)).map_err(other)?;
            let ids = write_dataset(&out, &garments).map_err(other)?;
            println!("wrote {} garments to {}", ids.len(), out.display());
        }
        Command::TrainLines(d) => {
            let items = load_dataset(&d.data)?;
            let samples = line_samples(&template, &pairs(&items))?;
            let (model, history) = train_line_regressor(&samples, &config.line_training).map_err(other)?;
            create(&out)?;
            model.save(&out.join("lines.bin")).map_err(other)?;
            write(&out.join("loss_history.csv"), loss_history_csv(&history))?;
            let (first, last) = (history[0].l_line, history[history.len() - 1].l_line);
            println!("L_line {first:e} -> {last:e}");
        }
        Command::TrainOcc(d) => {
            let items = load_dataset(&d.data)?;
            let samples = occupancy_samples(&pairs(&items), config.occupancy_points, config.seed)?;
            let (net, history) = train_occupancy(&samples, &config.occupancy_training).map_err(other)?;
            create(&out)?;
            net.save(&out.join("occupancy.bin")).map_err(other)?;
            let csv: String = std::iter::once("epoch,bce\n".to_string())
                .chain(history.iter().enumerate().map(|(i, l)| format!("{},{l:e}\n", i + 1)))
                .collect();
            write(&out.join("occupancy_history.csv"), csv)?;
            println!("final BCE {:e}", history.last().copied().unwrap_or(f64::NAN));
        }
        Command::TrainClassifier(d) => {
            let items = classifier_items(&pairs(&load_dataset(&d.data)?));
            let clf = Classifier::train(&items)?;
            create(&out)?;
            clf.save(&out.join("classifier.json"))?;
            println!("training accuracy {:.4}", clf.accuracy(&items)?);
        }
        Command::TrainRefiner(d) => {
            let items = load_dataset(&d.data)?;
            let samples = refiner_samples(&template, &pairs(&items), config.eval_samples, config.seed)?;
            let (refiner, history) = train_mesh_refiner(&samples, &config.refiner_training).map_err(other)?;
            create(&out)?;
            refiner.save(&out.join("refiner.bin")).map_err(other)?;
            println!("final loss {:e}", history.last().copied().unwrap_or(f64::NAN));
        }
        Command::Reconstruct { data, entry, models: m } => {
            let models = models(&config, &m)?;
            let mut items = load_dataset(&data.data)?;
            if let Some(id) = &entry {
                items.retain(|(i, _, _)| i == id);
                if items.is_empty() {
                    return Err(CliError::Config(format!("no entry {id}")));
                }
            }
            let config = PipelineConfig { out: Some(out.clone()), ..config };
            let mut failures = Vec::new();
            for (id, g, d) in &items {
                let input = PipelineInput::from_garment(id.clone(), g, d.clone());
                match run_pipeline(&template, &input, &models, &config) {
                    Ok(_) => println!("{id}: ok"),
                    Err(f) => {
                        eprintln!("{f}");
                        failures.push(f.to_string());
                    }
                }
            }
            if !failures.is_empty() {
                return Err(CliError::Stage(failures.join("; ")));
            }
        }
        Command::Evaluate { data, method, models: m } => {
            let models = models(&config, &m)?;
            let report = run_benchmark_on(&load_dataset(&data.data)?, &template, &models, &config, &method)?;
            report.write(&out).map_err(other)?;
            print!("{}", report.table());
        }
        Command::Ablate { data, models: m } => {
            let models = models(&config, &m)?;
            let reports = run_ablations(&load_dataset(&data.data)?, &template, &models, &config)?;
            for r in &reports {
                r.write(&out.join(r.method.replace('+', "_"))).map_err(other)?;
                print!("{}", r.table());
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
        }
    };
    configure_threads();
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
