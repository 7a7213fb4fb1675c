use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use diagbed::dataset::{write_dataset, Dataset, Manifest};
use diagbed::engine::{replay_episode, Engine, Method};
use diagbed::harness::experiment::{
    build_report, read_trajectories, render_text, run_experiment, write_report, ExperimentConfig,
};
use diagbed::harness::metrics::bayesian_bootstrap;
use diagbed::harness::{sample_fidelity, write_fidelity};
use diagbed::belief::StoppingPolicy;
use diagbed::service::{self, AppState, SessionStore, TOKEN_VAR};
use diagbed::surrogate::{SurrogateConfig, SurrogateKind, SyntheticWorld};

#[derive(Parser)]
#[command(name = "diagbed", version, about = "Sequential diagnostic test selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an offline experiment and write the report plus trajectories.
    Run(RunArgs),
    /// Recompute the report from a trajectory archive.
    Metrics(ArchiveArgs),
    /// Bayesian-bootstrap summary of the numbers in a file.
    Bootstrap(BootstrapArgs),
    /// Re-derive every decision in an archive from its recorded draws.
    Replay(ReplayArgs),
    /// Compare surrogate samples against the dataset.
    SampleFidelity(FidelityArgs),
    /// Start the session service.
    Serve(ServeArgs),
    /// Sample a cohort from a synthetic world and write a dataset manifest,
    /// its CSV and a matching surrogate config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic world TOML.
    #[arg(long)]
    world: PathBuf,
    #[arg(long, default_value_t = 100)]
    patients: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset name; files are written as `<name>.toml`, `<name>.csv` and
    /// `<name>.surrogate.toml`.
    #[arg(long)]
    name: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// Surrogate TOML replacing the config's `[surrogate]` table.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_patients: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Restrict to these methods (repeatable).
    #[arg(long = "method")]
    methods: Vec<Method>,
    /// Restrict the gamma sweep to one value.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ArchiveArgs {
    /// Output directory of a previous `run`.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    theta: f64,
    #[arg(long, default_value_t = 2000)]
    bootstrap_draws: usize,
    /// Defaults to the input directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Whitespace- or comma-separated numbers; `-` reads stdin.
    values: PathBuf,
    #[arg(long, default_value_t = 2000)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Experiment TOML naming the dataset the archive was produced from.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct FidelityArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Directory of dataset manifests.
    #[arg(long)]
    datasets: PathBuf,
    /// Default surrogate TOML for datasets without their own.
    #[arg(long)]
    surrogate: Option<PathBuf>,
    /// Persist sessions as JSON files here; in memory otherwise.
    #[arg(long)]
    sessions: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long, default_value_t = 10)]
    m: usize,
}

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

fn load_surrogate(path: &Path) -> Result<SurrogateConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut config: SurrogateConfig = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(config)
}

fn load_experiment(args: &ExperimentArgs) -> Result<(ExperimentConfig, Dataset)> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(path) = &args.surrogate {
        config.surrogate = load_surrogate(path)?;
    }
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if args.max_patients.is_some() {
        config.max_patients = args.max_patients;
    }
    let dataset = Dataset::from_manifest(&config.dataset)?;
    if !dataset.dropped.is_empty() {
        tracing::warn!(dropped = dataset.dropped.len(), "incomplete rows dropped");
    }
    Ok((config, dataset))
}

fn run(args: RunArgs) -> Result<()> {
    let (mut config, dataset) = load_experiment(&args.exp)?;
    if !args.methods.is_empty() {
        config.methods = args.methods;
    }
    if let Some(g) = args.gamma {
        config.gammas = vec![g];
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    config.validate()?;
    let surrogate = config.surrogate.build(&dataset.schema)?;
    let output = run_experiment(&config, &dataset, &*surrogate)?;
    write_report(&config.output_dir, &output.report, Some(&output.episodes))?;
    print!("{}", render_text(&output.report));
    println!("wrote {}", config.output_dir.display());
    Ok(())
}

fn metrics(args: ArchiveArgs) -> Result<()> {
    let episodes = read_trajectories(&args.input.join("trajectories"))?;
    let report = build_report(args.theta, args.bootstrap_draws, &episodes)?;
    let out = args.out.unwrap_or(args.input);
    write_report(&out, &report, None)?;
    print!("{}", render_text(&report));
    Ok(())
}

fn bootstrap(args: BootstrapArgs) -> Result<()> {
    let text = if args.values == Path::new("-") {
        std::io::read_to_string(std::io::stdin())?
    } else {
        std::fs::read_to_string(&args.values).map_err(|e| format!("{}: {e}", args.values.display()))?
    };
    let values = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("`{t}` is not a number")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let s = bayesian_bootstrap(&values, args.draws, args.seed)?;
    println!("n {}  mean {:.6}  std {:.6}  95% [{:.6}, {:.6}]", values.len(), s.mean, s.std, s.lower, s.upper);
    Ok(())
}

fn replay(args: ReplayArgs) -> Result<()> {
    let config = ExperimentConfig::load(&args.config)?;
    let dataset = Dataset::from_manifest(&config.dataset)?;
    let episodes = read_trajectories(&args.input.join("trajectories"))?;
    let mut mismatches = 0;
    for e in &episodes {
        if !e.method.is_actmed() || e.is_failed() {
            continue;
        }
        let policy = StoppingPolicy::new(e.theta, e.gamma)?;
        let engine = Engine::new(dataset.schema.clone(), policy, e.method.criterion(), e.m)?;
        match replay_episode(&engine, e) {
            Ok(rebuilt) if rebuilt == *e => {}
            Ok(_) => {
                mismatches += 1;
                println!("{} {} seed {}: rebuilt record differs", e.method, e.patient_id, e.seed);
            }
            Err(m) => {
                mismatches += 1;
                println!("{} {} seed {}: {m}", e.method, e.patient_id, e.seed);
            }
        }
    }
    println!("{} episodes, {mismatches} mismatches", episodes.len());
    if mismatches > 0 {
        return Err("replay found mismatches".into());
    }
    Ok(())
}

fn fidelity(args: FidelityArgs) -> Result<()> {
    let (config, dataset) = load_experiment(&args.exp)?;
    let surrogate = config.surrogate.build(&dataset.schema)?;
    let seed = config.seeds[0];
    let report = sample_fidelity(&dataset, &*surrogate, config.m, seed, config.max_patients)?;
    let out = args.out.unwrap_or(config.output_dir);
    write_fidelity(&out, &report)?;
    println!("{:<24} {:>9} {:>9} {:>9}", "feature", "W1", "energy", "mae%");
    for r in &report.rows {
        println!(
            "{:<24} {:>9.4} {:>9.4} {:>9.2}",
            r.feature, r.wasserstein, r.energy, r.best_mae_pct
        );
    }
    println!("{:<24} {:>9.4} {:>9.4}", "mean", report.mean_wasserstein, report.mean_energy);
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let default = args.surrogate.as_deref().map(load_surrogate).transpose()?;
    // blocking HTTP clients must be built before the runtime starts
    let datasets = service::load_datasets(&args.datasets, default.as_ref())?;
    if datasets.is_empty() {
        return Err(format!("no usable datasets in {}", args.datasets.display()).into());
    }
    let store = match &args.sessions {
        Some(dir) => SessionStore::open(dir)?,
        None => SessionStore::in_memory(),
    };
    let token = std::env::var(TOKEN_VAR).ok().filter(|t| !t.is_empty()).map(Arc::from);
    if token.is_none() {
        tracing::warn!("{TOKEN_VAR} unset, API is unauthenticated");
    }
    let state = AppState {
        datasets: Arc::new(datasets),
        store: Arc::new(store),
        token,
        m: args.m,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(args.listen, state))?;
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let world = SyntheticWorld::load(&args.world)?;
    let mut schema = world.schema();
    schema.disease_name = "the target condition".into();
    let records = world.sample_cohort(args.patients, args.seed);
    std::fs::create_dir_all(&args.out)?;
    let csv_name = format!("{}.csv", args.name);
    let file = std::fs::File::create(args.out.join(&csv_name))?;
    write_dataset(file, &schema, &records)?;
    let manifest = Manifest {
        csv: PathBuf::from(csv_name),
        schema,
    };
    std::fs::write(args.out.join(format!("{}.toml", args.name)), toml::to_string(&manifest)?)?;
    let out = std::path::absolute(&args.out)?;
    let world_path = std::path::absolute(&args.world)?;
    let mut surrogate = SurrogateConfig::new(SurrogateKind::Synthetic);
    surrogate.world = Some(world_path.strip_prefix(&out).map(Path::to_path_buf).unwrap_or(world_path));
    std::fs::write(
        args.out.join(format!("{}.surrogate.toml", args.name)),
        toml::to_string(&surrogate)?,
    )?;
    println!("wrote {} patients to {}", records.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Metrics(a) => metrics(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Replay(a) => replay(a),
        Command::SampleFidelity(a) => fidelity(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
