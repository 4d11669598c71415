use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use epem::fplab;
use epem::io::{
    self, ConfigEcho, ErrorDocument, FitDocument, HeaderMode, ModelSummary, StandardizationJson, TimingsJson, TruthJson,
    WinnerJson,
};
use epem::sampler::{self, Scenario, SimScenario};
use epem::selection::{self, SearchSpace};
use epem::{BetaConstraint, FitConfig, IoError, ScaleStructure};

#[derive(Parser)]
#[command(name = "epem", version, about = "Clustering with mixtures of multivariate power exponential distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model family to a CSV file and write a JSON report.
    Fit(FitArgs),
    /// Draw a simulated dataset with its generating truth.
    Simulate(SimulateArgs),
    /// Compare fixed-point and GEM scale updates.
    Fplab(FplabArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BetaArg {
    Equal,
    Variable,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeaderArg {
    Auto,
    Yes,
    No,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    header: HeaderArg,
    #[arg(long, default_value_t = 1)]
    gmin: usize,
    #[arg(long, default_value_t = 4)]
    gmax: usize,
    /// Comma-separated scale structures (e.g. `EII,VVV`) or `all`.
    #[arg(long, default_value = "all")]
    models: String,
    #[arg(long, value_enum, default_value = "both")]
    beta: BetaArg,
    /// Standardize columns before fitting.
    #[arg(long)]
    scale: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.005)]
    epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock time in the report (makes output non-reproducible).
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Sample size; the scenario default when omitted.
    #[arg(long)]
    n: Option<usize>,
    /// Writes `<out>.csv` and `<out>.truth.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FplabArgs {
    #[arg(long, value_delimiter = ',', default_value = "1.5,1.9,1.95,2.05")]
    betas: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    p: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 300)]
    iterations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_output(out: Option<&Path>, bytes: &[u8]) -> Result<(), IoError> {
    match out {
        Some(path) => fs::write(path, bytes)?,
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn parse_structures(spec: &str) -> Result<Vec<ScaleStructure>, IoError> {
    if spec.trim().eq_ignore_ascii_case("all") {
        return Ok(ScaleStructure::ALL.to_vec());
    }
    let mut out: Vec<ScaleStructure> = Vec::new();
    for tok in spec.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let s: ScaleStructure = tok
            .to_ascii_uppercase()
            .parse()
            .map_err(|_| IoError::Config(format!("unknown scale structure `{tok}`")))?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(IoError::Config("no models selected".into()));
    }
    Ok(out)
}

/// Failure reported as an error document; `kind` is machine-readable.
struct Failure {
    kind: &'static str,
    message: String,
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        let kind = match &e {
            IoError::Io(_) => "Io",
            IoError::Csv(_) | IoError::Ragged { .. } | IoError::NonNumeric { .. } | IoError::Empty => "InvalidInput",
            IoError::Json(_) => "Json",
            IoError::ZeroVariance { .. } => "ZeroVariance",
            IoError::Model(_) | IoError::Config(_) => "InvalidConfig",
        };
        Failure {
            kind,
            message: e.to_string(),
        }
    }
}

fn run_fit(args: &FitArgs) -> Result<(), Failure> {
    let start = Instant::now();
    let header = match args.header {
        HeaderArg::Auto => HeaderMode::Auto,
        HeaderArg::Yes => HeaderMode::Yes,
        HeaderArg::No => HeaderMode::No,
    };
    let raw = io::read_csv(&args.input, header)?;
    let data = if args.scale { io::standardize(&raw)? } else { raw };
    let betas = match args.beta {
        BetaArg::Equal => vec![BetaConstraint::Equal],
        BetaArg::Variable => vec![BetaConstraint::Variable],
        BetaArg::Both => BetaConstraint::ALL.to_vec(),
    };
    let space = SearchSpace {
        structures: parse_structures(&args.models)?,
        betas,
        g_min: args.gmin,
        g_max: args.gmax,
    };
    if args.gmin == 0 || args.gmin > args.gmax {
        return Err(IoError::Config(format!("invalid component range {}..={}", args.gmin, args.gmax)).into());
    }
    let cfg = FitConfig {
        aitken_epsilon: args.epsilon,
        max_iter: args.max_iter,
        ..FitConfig::default()
    };
    cfg.validate().map_err(IoError::from)?;
    let result = selection::family_search(&data, &space, &cfg, args.seed, selection::threads_from_env()).map_err(|e| {
        Failure {
            kind: match e {
                epem::SelectionError::AllFitsFailed(_) => "AllFitsFailed",
                epem::SelectionError::TooFewObservations { .. } => "TooFewObservations",
                _ => "InvalidConfig",
            },
            message: e.to_string(),
        }
    })?;
    for e in result.grid.iter().filter(|e| e.small_sample_warning) {
        eprintln!(
            "warning: {} with G = {} fitted with N < G (p + 1)",
            e.spec.name, e.spec.groups
        );
    }
    let models = result
        .grid
        .iter()
        .map(|e| {
            let m = e.spec.total_free_params();
            match &e.outcome {
                Ok(r) => ModelSummary {
                    name: e.spec.name,
                    groups: e.spec.groups,
                    status: "ok".into(),
                    loglik: Some(r.loglik),
                    m,
                    bic: Some(r.bic),
                    icl: Some(r.icl),
                    converged: Some(r.converged),
                    iterations: Some(r.iterations),
                    small_sample_warning: e.small_sample_warning,
                    error: None,
                },
                Err(err) => ModelSummary {
                    name: e.spec.name,
                    groups: e.spec.groups,
                    status: err.kind().into(),
                    loglik: None,
                    m,
                    bic: None,
                    icl: None,
                    converged: None,
                    iterations: None,
                    small_sample_warning: e.small_sample_warning,
                    error: Some(err.to_string()),
                },
            }
        })
        .collect();
    let (_, bic_report) = result.best_bic();
    let (_, icl_report) = result.best_icl();
    let doc = FitDocument {
        format: io::FIT_FORMAT.into(),
        version: io::FORMAT_VERSION,
        config: ConfigEcho {
            input: args.input.display().to_string(),
            g_min: args.gmin,
            g_max: args.gmax,
            models: space.names(),
            scale: args.scale,
            seed: args.seed,
            epsilon: args.epsilon,
            max_iter: args.max_iter,
        },
        n: data.n(),
        dim: data.dim(),
        bic_convention: io::BIC_CONVENTION.into(),
        standardization: match (&data.column_means, &data.column_sds) {
            (Some(m), Some(s)) => Some(StandardizationJson {
                means: m.iter().copied().collect(),
                sds: s.iter().copied().collect(),
            }),
            _ => None,
        },
        models,
        best_bic: WinnerJson::new(bic_report, &data),
        best_icl: WinnerJson::new(icl_report, &data),
        timings: args.timings.then(|| TimingsJson {
            total_seconds: start.elapsed().as_secs_f64(),
        }),
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(IoError::from)?;
    text.push('\n');
    write_output(args.out.as_deref(), text.as_bytes())?;
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let mut spec = SimScenario::new(args.scenario, args.seed);
    if let Some(n) = args.n {
        spec.n = n;
    }
    let sim = sampler::generate_scenario(spec).map_err(IoError::from)?;
    let mut csv_bytes = Vec::new();
    io::write_csv(&mut csv_bytes, &sim.data.x)?;
    let mut truth = serde_json::to_string_pretty(&TruthJson::from(&sim)).map_err(IoError::from)?;
    truth.push('\n');
    let base = args.out.display().to_string();
    fs::write(format!("{base}.csv"), csv_bytes).map_err(IoError::from)?;
    fs::write(format!("{base}.truth.json"), truth).map_err(IoError::from)?;
    Ok(())
}

fn run_fplab(args: &FplabArgs) -> Result<(), Failure> {
    if args.betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) || args.p == 0 || args.n < 2 {
        return Err(IoError::Config("shape values must be positive, p >= 1 and n >= 2".into()).into());
    }
    let records: Vec<_> = fplab::run_lab(&args.betas, args.p, args.n, args.iterations, args.seed)
        .into_iter()
        .flat_map(|(a, b)| [a, b])
        .collect();
    let mut bytes = Vec::new();
    io::write_trajectories(&mut bytes, &records)?;
    write_output(args.out.as_deref(), &bytes)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (outcome, out) = match &cli.command {
        Command::Fit(a) => (run_fit(a), a.out.clone()),
        Command::Simulate(a) => (run_simulate(a), None),
        Command::Fplab(a) => (run_fplab(a), None),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            let doc = ErrorDocument::new(f.kind, f.message);
            let text = serde_json::to_string_pretty(&doc).expect("error document serializes") + "\n";
            // A fit report path receives the error document in place of the report.
            match out {
                Some(path) => {
                    let _ = fs::write(path, &text);
                }
                None => print!("{text}"),
            }
            ExitCode::FAILURE
        }
    }
}
