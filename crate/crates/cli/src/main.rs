//! `wpoe` command-line front end.
//!
//! Exit codes: 0 success, 1 internal error, 2 usage, 3 I/O, 4 integrity
//! (corrupt or truncated container, model digest mismatch), 5 protocol.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use wpoe::codec::{self, CodecError, CompressOptions, DecompressOptions, ErrorClass, HeaderAccounting, WeightMode};
use wpoe::eval::{self, CorpusSpec, EvalError, EvalOptions, RateWeights};
use wpoe::experts::ExpertSpec;
use wpoe::external::{Endpoint, MockConfig, MockModel, ProtocolError, Server};
use wpoe::fit::{FitConfig, FitError};
use wpoe::mix::WeightVector;

#[derive(Parser, Debug)]
#[command(name = "wpoe", version, about = "Lossless compression with a weighted product of experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress a file into a container.
    Compress(CompressArgs),
    /// Restore the original bytes from a container.
    Decompress(DecompressArgs),
    /// Fit mixture weights on calibration chunks and print the fit report.
    Fit(FitArgs),
    /// Compress a corpus and report the compression rate.
    Eval(EvalArgs),
    /// Windowed Lidstone sweep over context sizes and smoothing values.
    Sweep(SweepArgs),
    /// Fit and measure a sequence of expert sets.
    Multi(MultiArgs),
    /// Spread of the fitted rate across calibration sample sizes.
    Stability(StabilityArgs),
    /// Run the built-in deterministic mock expert server.
    ServeMock(ServeMockArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Symbols per independently coded chunk.
    #[arg(long, default_value_t = codec::DEFAULT_CHUNK_SIZE)]
    chunk_size: usize,

    /// Worker threads [default: available cores]. Output does not depend on it.
    #[arg(long, env = "WPOE_THREADS")]
    threads: Option<usize>,

    /// Endpoint for external experts without one in their spec (unix:PATH,
    /// tcp:HOST:PORT or exec:PROGRAM ARGS). Repeat for several, in order.
    #[arg(long = "endpoint", env = "WPOE_ENDPOINT", value_delimiter = ';')]
    endpoints: Vec<Endpoint>,
}

#[derive(Args, Debug, Clone)]
struct FitFlags {
    /// Optimizer iteration cap.
    #[arg(long, default_value_t = 20)]
    max_iters: usize,

    /// Convergence tolerance on the gradient and the step.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,

    /// Length of the first optimizer step.
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
}

impl FitFlags {
    fn config(&self) -> FitConfig {
        FitConfig {
            max_iters: self.max_iters,
            tolerance: self.tolerance,
            learning_rate: self.learning_rate,
            ..FitConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct CompressArgs {
    /// Input file, or - for stdin.
    input: PathBuf,

    /// Output container [default: INPUT.wpoe, stdout when reading stdin].
    #[arg(short, long)]
    output: Option<PathBuf>,

    /// Comma-separated expert specs, for example nb:alpha=0.5,window=2048,ctx:order=2.
    #[arg(short, long, default_value = "nb,ctx:order=2")]
    experts: String,

    /// fit, per-chunk, or explicit weights w1,w2,...
    #[arg(short, long, default_value = "fit")]
    weights: String,

    /// Calibration chunk indices for --weights fit.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    calibration: Vec<usize>,

    /// Print compression statistics to stderr.
    #[arg(long)]
    stats: bool,

    #[command(flatten)]
    common: Common,

    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug)]
struct DecompressArgs {
    /// Container file, or - for stdin.
    input: PathBuf,

    /// Output file [default: INPUT without .wpoe, stdout when reading stdin].
    #[arg(short, long)]
    output: Option<PathBuf>,

    /// Worker threads [default: available cores].
    #[arg(long, env = "WPOE_THREADS")]
    threads: Option<usize>,

    /// Endpoint for external experts; see compress --help.
    #[arg(long = "endpoint", env = "WPOE_ENDPOINT", value_delimiter = ';')]
    endpoints: Vec<Endpoint>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Corpus as PATH or PATH:OFFSET:LIMIT.
    #[arg(long)]
    corpus: CorpusSpec,

    #[arg(short, long, default_value = "nb,ctx:order=2")]
    experts: String,

    /// Calibration chunk indices. Ignored when --samples is given.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    calibration: Vec<usize>,

    /// Draw this many calibration chunks at random from --seed instead.
    #[arg(long)]
    samples: Option<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Also run the grid search with this step.
    #[arg(long)]
    grid: Option<f64>,

    /// Write the iteration trace as CSV (iteration, alpha_1.., ce_nats).
    #[arg(long)]
    csv: Option<PathBuf>,

    #[arg(long, default_value_t = codec::DEFAULT_CHUNK_SIZE)]
    chunk_size: usize,

    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Corpus as PATH or PATH:OFFSET:LIMIT.
    #[arg(long)]
    corpus: CorpusSpec,

    #[arg(short, long, default_value = "nb,ctx:order=2")]
    experts: String,

    /// fit (random calibration chunk per run) or explicit weights w1,w2,...
    #[arg(short, long, default_value = "fit")]
    weights: String,

    /// Runs to average when fitting.
    #[arg(long, default_value_t = 5)]
    runs: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Write per-run rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,

    /// Decompress each container and compare.
    #[arg(long)]
    verify: bool,

    /// Also report gzip -9 and xz -9 rates when those tools are installed.
    #[arg(long)]
    baselines: bool,

    #[command(flatten)]
    common: Common,

    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    corpus: CorpusSpec,

    /// Window sizes.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64,128,256,512,1024,2048")]
    contexts: Vec<u32>,

    /// Lidstone smoothing values.
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.1,0.01")]
    alphas: Vec<f64>,

    /// Write cells as CSV (context, alpha, rate_pct, bits_per_byte).
    #[arg(long)]
    csv: Option<PathBuf>,

    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct MultiArgs {
    #[arg(long)]
    corpus: CorpusSpec,

    /// One expert set (comma-separated specs). Repeat for each set, smallest first.
    #[arg(long = "set", required = true)]
    sets: Vec<String>,

    #[arg(long, value_delimiter = ',', default_value = "0")]
    calibration: Vec<usize>,

    /// Write rows as CSV (set, experts, weights, fitted_ce_nats, fitted_bits_per_symbol, rate_pct).
    #[arg(long)]
    csv: Option<PathBuf>,

    #[command(flatten)]
    common: Common,

    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug)]
struct StabilityArgs {
    #[arg(long)]
    corpus: CorpusSpec,

    /// Exactly two expert specs.
    #[arg(short, long, default_value = "nb,ctx:order=2")]
    experts: String,

    /// Calibration sample sizes, in chunks.
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    counts: Vec<usize>,

    /// Draws per sample size.
    #[arg(long, default_value_t = 10)]
    seeds: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Write rows as CSV (samples, runs, rate_mean_pct, rate_std_pct, alpha_mean, alpha_std).
    #[arg(long)]
    csv: Option<PathBuf>,

    #[command(flatten)]
    common: Common,

    #[command(flatten)]
    fit: FitFlags,
}

#[derive(Args, Debug)]
struct ServeMockArgs {
    /// stdio, unix:PATH or tcp:HOST:PORT (port 0 picks a free one).
    #[arg(long, default_value = "stdio")]
    endpoint: Endpoint,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Vocabulary size; at least 256 so every byte has a token.
    #[arg(long, default_value_t = 256)]
    alphabet: u32,

    /// Context limit declared in the handshake.
    #[arg(long, default_value_t = 4096)]
    max_context: u32,

    /// Always predict the uniform distribution.
    #[arg(long)]
    uniform: bool,
}

/// Failure with its exit code.
#[derive(Debug)]
struct Failure {
    class: ErrorClass,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            class: ErrorClass::Usage,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: io::Error) -> Self {
        Self {
            class: ErrorClass::Io,
            message: format!("{}: {e}", path.display()),
        }
    }

    fn exit_code(&self) -> u8 {
        match self.class {
            ErrorClass::Internal => 1,
            ErrorClass::Usage => 2,
            ErrorClass::Io => 3,
            ErrorClass::Integrity => 4,
            ErrorClass::Protocol => 5,
        }
    }
}

impl From<CodecError> for Failure {
    fn from(e: CodecError) -> Self {
        Self {
            class: e.class(),
            message: e.to_string(),
        }
    }
}

impl From<ProtocolError> for Failure {
    fn from(e: ProtocolError) -> Self {
        let class = match e {
            ProtocolError::Io(_) => ErrorClass::Io,
            ProtocolError::BadEndpoint(_) => ErrorClass::Usage,
            _ => ErrorClass::Protocol,
        };
        Self {
            class,
            message: e.to_string(),
        }
    }
}

impl From<FitError> for Failure {
    fn from(e: FitError) -> Self {
        match e {
            FitError::Expert(e) => CodecError::from(e).into(),
            FitError::NonFinite | FitError::Csv(_) => Self {
                class: ErrorClass::Internal,
                message: e.to_string(),
            },
            e => Self::usage(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => Self {
                class: ErrorClass::Io,
                message: e.to_string(),
            },
            EvalError::Corpus(m) => Self::usage(m),
            EvalError::RoundTrip => Self {
                class: ErrorClass::Integrity,
                message: e.to_string(),
            },
            EvalError::Codec(e) => e.into(),
            EvalError::Fit(e) => e.into(),
            EvalError::Expert(e) => CodecError::from(e).into(),
            EvalError::Csv(_) => Self {
                class: ErrorClass::Io,
                message: e.to_string(),
            },
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn parse_specs(text: &str) -> CliResult<Vec<ExpertSpec>> {
    let specs = ExpertSpec::parse_list(text).map_err(|e| Failure::usage(format!("--experts: {e}")))?;
    for s in &specs {
        s.validate().map_err(|e| Failure::usage(format!("--experts {s}: {e}")))?;
    }
    Ok(specs)
}

fn parse_weights(text: &str, k: usize) -> CliResult<WeightVector> {
    let values = text
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| Failure::usage(format!("--weights: expected fit or numbers, got {text:?}")))?;
    if values.len() != k {
        return Err(Failure::usage(format!("--weights: {} values for {k} experts", values.len())));
    }
    WeightVector::new(values).map_err(|e| Failure::usage(format!("--weights: {e}")))
}

fn read_input(path: &Path) -> CliResult<Vec<u8>> {
    if path == Path::new("-") {
        let mut v = Vec::new();
        io::stdin().read_to_end(&mut v).map_err(|e| Failure::io(path, e))?;
        Ok(v)
    } else {
        fs::read(path).map_err(|e| Failure::io(path, e))
    }
}

fn write_output(path: Option<&Path>, bytes: &[u8]) -> CliResult {
    match path {
        None => io::stdout().lock().write_all(bytes).map_err(|e| Failure::io(Path::new("-"), e)),
        Some(p) if p == Path::new("-") => write_output(None, bytes),
        Some(p) => fs::write(p, bytes).map_err(|e| Failure::io(p, e)),
    }
}

fn csv_file(path: &Path) -> CliResult<fs::File> {
    fs::File::create(path).map_err(|e| Failure::io(path, e))
}

fn eval_options(common: &Common, fit: &FitFlags) -> EvalOptions {
    EvalOptions {
        chunk_size: common.chunk_size,
        threads: common.threads,
        fit: fit.config(),
        verify: false,
        endpoints: common.endpoints.clone(),
    }
}

fn run_compress(a: CompressArgs) -> CliResult {
    let specs = parse_specs(&a.experts)?;
    let weights = match a.weights.as_str() {
        "fit" => WeightMode::Fit {
            calibration: a.calibration.clone(),
        },
        "per-chunk" => WeightMode::PerChunk,
        w => WeightMode::Fixed(parse_weights(w, specs.len())?),
    };
    let options = CompressOptions {
        chunk_size: a.common.chunk_size,
        weights,
        fit: a.fit.config(),
        threads: a.common.threads,
        endpoints: a.common.endpoints.clone(),
    };
    let input = read_input(&a.input)?;
    let (bytes, stats) = codec::compress(&input, &specs, &options)?;
    let output = match (&a.output, a.input == Path::new("-")) {
        (Some(o), _) => Some(o.clone()),
        (None, true) => None,
        (None, false) => {
            let mut name = a.input.clone().into_os_string();
            name.push(".wpoe");
            Some(PathBuf::from(name))
        }
    };
    write_output(output.as_deref(), &bytes)?;
    if a.stats {
        let rate = |h| stats.rate(h).map_or("n/a".to_string(), |r| format!("{r:.4}%"));
        eprintln!("input bytes      {}", stats.input_bytes);
        eprintln!("output bytes     {}", stats.output_bytes);
        eprintln!("header bytes     {}", stats.header_bytes);
        eprintln!("rate (payload)   {}", rate(HeaderAccounting::Exclude));
        eprintln!("rate (container) {}", rate(HeaderAccounting::Include));
        eprintln!(
            "weights          {}",
            stats
                .weights
                .as_slice()
                .iter()
                .map(|w| format!("{w:.6}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
        eprintln!("wall time        {:.3}s", stats.wall_time.as_secs_f64());
    }
    Ok(())
}

fn run_decompress(a: DecompressArgs) -> CliResult {
    let input = read_input(&a.input)?;
    let options = DecompressOptions {
        threads: a.threads,
        endpoints: a.endpoints,
    };
    let bytes = codec::decompress_with(&input, &options)?;
    let output = match (&a.output, a.input == Path::new("-")) {
        (Some(o), _) => Some(o.clone()),
        (None, true) => None,
        (None, false) => match a.input.extension() {
            Some(ext) if ext == "wpoe" => Some(a.input.with_extension("")),
            _ => {
                let mut name = a.input.clone().into_os_string();
                name.push(".out");
                Some(PathBuf::from(name))
            }
        },
    };
    write_output(output.as_deref(), &bytes)
}

fn run_fit(a: FitArgs) -> CliResult {
    let specs = parse_specs(&a.experts)?;
    let data = a.corpus.load()?;
    let options = EvalOptions {
        chunk_size: a.chunk_size,
        fit: a.fit.config(),
        ..EvalOptions::default()
    };
    let n_chunks = data.len().div_ceil(a.chunk_size.max(1));
    let chunks = match a.samples {
        Some(n) => eval::draw_chunks(n_chunks, n, a.seed)?,
        None => a.calibration.clone(),
    };
    let (report, grid) = eval::fit_corpus(&data, &specs, &chunks, a.grid, &options)?;
    let mut out = io::stdout().lock();
    let io_err = |e| Failure::io(Path::new("-"), e);
    writeln!(out, "experts      {}", a.experts).map_err(io_err)?;
    writeln!(out, "calibration  {chunks:?}").map_err(io_err)?;
    write!(out, "{}", report.summary()).map_err(io_err)?;
    if let Some(g) = grid {
        let w: Vec<String> = g.weights.as_slice().iter().map(|x| format!("{x:.6}")).collect();
        writeln!(out, "grid weights {}", w.join(" ")).map_err(io_err)?;
        writeln!(out, "grid ce      {:.9} nats  {:.6} bits", g.ce, g.ce / std::f64::consts::LN_2).map_err(io_err)?;
    }
    if let Some(path) = &a.csv {
        report.write_csv(csv_file(path)?)?;
    }
    Ok(())
}

fn run_eval(a: EvalArgs) -> CliResult {
    let specs = parse_specs(&a.experts)?;
    let weights = match a.weights.as_str() {
        "fit" => RateWeights::Fit,
        w => RateWeights::Fixed(parse_weights(w, specs.len())?),
    };
    let data = a.corpus.load()?;
    let mut options = eval_options(&a.common, &a.fit);
    options.verify = a.verify;
    let report = eval::evaluate_rate(&data, &specs, &weights, a.runs, a.seed, &options)?;
    println!("corpus       {} ({} bytes)", a.corpus, data.len());
    println!("experts      {}", a.experts);
    println!("runs         {}", report.runs.len());
    println!("rate         {:.4} +- {:.4} %", report.mean, report.std);
    if a.baselines {
        for (name, args) in [("gzip", ["-9", "-c"]), ("xz", ["-9", "-c"])] {
            match eval::external_baseline(name, &args, &data) {
                Some(r) => println!("{name:<12} {r:.4} %"),
                None => println!("{name:<12} unavailable"),
            }
        }
    }
    if let Some(path) = &a.csv {
        report.write_csv(csv_file(path)?)?;
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> CliResult {
    let data = a.corpus.load()?;
    let options = EvalOptions {
        chunk_size: a.common.chunk_size,
        threads: a.common.threads,
        endpoints: a.common.endpoints.clone(),
        ..EvalOptions::default()
    };
    let result = eval::lidstone_sweep(&data, &a.contexts, &a.alphas, &options)?;
    print!("{}", result.table());
    if let Some(path) = &a.csv {
        result.write_csv(csv_file(path)?)?;
    }
    Ok(())
}

fn run_multi(a: MultiArgs) -> CliResult {
    let sets = a.sets.iter().map(|s| parse_specs(s)).collect::<CliResult<Vec<_>>>()?;
    let data = a.corpus.load()?;
    let report = eval::multi_expert_report(&data, &sets, &a.calibration, &eval_options(&a.common, &a.fit))?;
    for (set, row) in a.sets.iter().zip(&report.rows) {
        println!(
            "{set:<40} ce {:.6} bits  rate {:.4} %",
            row.fitted_ce / std::f64::consts::LN_2,
            row.rate
        );
    }
    if let Some(path) = &a.csv {
        report.write_csv(csv_file(path)?)?;
    }
    Ok(())
}

fn run_stability(a: StabilityArgs) -> CliResult {
    let specs = parse_specs(&a.experts)?;
    let data = a.corpus.load()?;
    let report = eval::stability_report(&data, &specs, &a.counts, a.seeds, a.seed, &eval_options(&a.common, &a.fit))?;
    for row in &report.rows {
        let (rm, rs) = row.rate_mean_std();
        let (am, a_s) = row.alpha_mean_std();
        println!("{:>6} samples  rate {rm:.4} +- {rs:.4} %  alpha {am:.4} +- {a_s:.4}", row.samples);
    }
    println!("  grid           rate {:.4} %  alpha {:.4}", report.grid_rate, report.grid_alpha);
    if let Some(path) = &a.csv {
        report.write_csv(csv_file(path)?)?;
    }
    Ok(())
}

fn run_serve_mock(a: ServeMockArgs) -> CliResult {
    let model = MockModel::new(MockConfig {
        seed: a.seed,
        alphabet_size: a.alphabet,
        max_context: a.max_context,
        uniform: a.uniform,
    })?;
    let server = Server::bind(&a.endpoint, Arc::new(model))?;
    eprintln!("listening on {}", server.endpoint()?);
    server.run()?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Compress(a) => run_compress(a),
        Command::Decompress(a) => run_decompress(a),
        Command::Fit(a) => run_fit(a),
        Command::Eval(a) => run_eval(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Multi(a) => run_multi(a),
        Command::Stability(a) => run_stability(a),
        Command::ServeMock(a) => run_serve_mock(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("wpoe: {}", f.message);
            ExitCode::from(f.exit_code())
        }
    }
}
