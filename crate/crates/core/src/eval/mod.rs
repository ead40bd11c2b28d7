//! Corpus ingestion and benchmark reports.
//!
//! Every rate here comes from actually compressing the corpus and dividing byte
//! counts. Randomness (calibration chunk draws) flows from one seed through
//! ChaCha8, so reports are bit-reproducible.

mod corpus;

pub use corpus::{locate_enwik8, CorpusSpec, CrossDomain};

use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{
    compress, decompress_with, CodecError, CompressOptions, DecompressOptions, HeaderAccounting, WeightMode, DEFAULT_CHUNK_SIZE,
};
use crate::external::Endpoint;
use crate::experts::{build_builtin, Expert, ExpertError, ExpertSpec};
use crate::fit::{fit_weights, grid_search, CalibrationSample, FitConfig, FitError, FitReport, GridResult};
use crate::mix::WeightVector;
use crate::Symbol;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("round trip mismatch")]
    RoundTrip,

    #[error(transparent)]
    Codec(#[from] CodecError),

    #[error(transparent)]
    Fit(#[from] FitError),

    #[error(transparent)]
    Expert(#[from] ExpertError),

    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Shared knobs for the reports.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub chunk_size: usize,
    pub threads: Option<usize>,
    pub fit: FitConfig,
    /// Also decompress and compare every container.
    pub verify: bool,
    pub endpoints: Vec<Endpoint>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            threads: None,
            fit: FitConfig::default(),
            verify: false,
            endpoints: Vec::new(),
        }
    }
}

impl EvalOptions {
    fn compress_options(&self, weights: WeightMode) -> CompressOptions {
        CompressOptions {
            chunk_size: self.chunk_size,
            weights,
            fit: self.fit.clone(),
            threads: self.threads,
            endpoints: self.endpoints.clone(),
        }
    }
}

fn chunk_count(len: usize, chunk_size: usize) -> usize {
    len.div_ceil(chunk_size)
}

fn to_symbols(data: &[u8]) -> Vec<Symbol> {
    data.iter().map(|&b| b as Symbol).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_weights(w: &WeightVector) -> String {
    w.as_slice().iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

/// Compressed size of one configuration.
#[derive(Debug, Clone)]
pub struct Measurement {
    pub input_bytes: u64,
    pub payload_bytes: u64,
    pub output_bytes: u64,
    pub weights: WeightVector,
    pub rate_excluding_header: f64,
    pub rate_including_header: f64,
}

impl Measurement {
    pub fn bits_per_byte(&self) -> f64 {
        8.0 * self.payload_bytes as f64 / self.input_bytes as f64
    }
}

/// Compresses `data` once and reports the rates.
pub fn measure(data: &[u8], specs: &[ExpertSpec], weights: WeightMode, options: &EvalOptions) -> Result<Measurement, EvalError> {
    if data.is_empty() {
        return Err(EvalError::Corpus("empty corpus".into()));
    }
    let (bytes, stats) = compress(data, specs, &options.compress_options(weights))?;
    let dopts = DecompressOptions {
        threads: options.threads,
        endpoints: options.endpoints.clone(),
    };
    if options.verify && decompress_with(&bytes, &dopts)? != data {
        return Err(EvalError::RoundTrip);
    }
    Ok(Measurement {
        input_bytes: stats.input_bytes,
        payload_bytes: stats.payload_bytes,
        output_bytes: stats.output_bytes,
        rate_excluding_header: stats.rate(HeaderAccounting::Exclude).expect("non-empty"),
        rate_including_header: stats.rate(HeaderAccounting::Include).expect("non-empty"),
        weights: stats.weights,
    })
}

/// How `evaluate_rate` chooses weights.
#[derive(Debug, Clone, PartialEq)]
pub enum RateWeights {
    /// Fit on one randomly drawn calibration chunk per run.
    Fit,
    Fixed(WeightVector),
}

#[derive(Debug, Clone)]
pub struct RateRun {
    pub run: usize,
    pub calibration_chunk: Option<usize>,
    pub measurement: Measurement,
}

#[derive(Debug, Clone)]
pub struct RateReport {
    pub runs: Vec<RateRun>,
    pub mean: f64,
    pub std: f64,
}

impl RateReport {
    /// Columns: `run, calibration_chunk, weights, rate_excl_header_pct,
    /// rate_incl_header_pct, payload_bytes, output_bytes, input_bytes`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "run",
            "calibration_chunk",
            "weights",
            "rate_excl_header_pct",
            "rate_incl_header_pct",
            "payload_bytes",
            "output_bytes",
            "input_bytes",
        ])?;
        for r in &self.runs {
            let m = &r.measurement;
            w.write_record([
                r.run.to_string(),
                r.calibration_chunk.map_or(String::new(), |c| c.to_string()),
                fmt_weights(&m.weights),
                format!("{:.4}", m.rate_excluding_header),
                format!("{:.4}", m.rate_including_header),
                m.payload_bytes.to_string(),
                m.output_bytes.to_string(),
                m.input_bytes.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Header-excluded rate, averaged over `runs` seeded calibration draws when fitting.
/// Deterministic configurations (fixed weights or a single expert) run once.
pub fn evaluate_rate(
    data: &[u8],
    specs: &[ExpertSpec],
    weights: &RateWeights,
    runs: usize,
    seed: u64,
    options: &EvalOptions,
) -> Result<RateReport, EvalError> {
    let n_chunks = chunk_count(data.len(), options.chunk_size);
    let fitted = matches!(weights, RateWeights::Fit) && specs.len() > 1;
    let runs = if fitted { runs.max(1) } else { 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(runs);
    for run in 0..runs {
        let (mode, cal) = match weights {
            RateWeights::Fixed(w) => (WeightMode::Fixed(w.clone()), None),
            RateWeights::Fit if fitted => {
                let c = rng.random_range(0..n_chunks.max(1));
                (WeightMode::Fit { calibration: vec![c] }, Some(c))
            }
            RateWeights::Fit => (WeightMode::default(), None),
        };
        out.push(RateRun {
            run,
            calibration_chunk: cal,
            measurement: measure(data, specs, mode, options)?,
        });
    }
    let rates: Vec<f64> = out.iter().map(|r| r.measurement.rate_excluding_header).collect();
    let (mean, std) = mean_std(&rates);
    Ok(RateReport { runs: out, mean, std })
}

pub const SWEEP_CONTEXTS: [u32; 12] = [1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024, 2048];
pub const SWEEP_ALPHAS: [f64; 4] = [1.0, 0.5, 0.1, 0.01];

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub context: u32,
    pub alpha: f64,
    pub rate: f64,
    pub bits_per_byte: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn get(&self, context: u32, alpha: f64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.context == context && c.alpha == alpha)
    }

    /// Rates for one alpha in increasing context order.
    pub fn column(&self, alpha: f64) -> Vec<(u32, f64)> {
        let mut col: Vec<(u32, f64)> = self
            .cells
            .iter()
            .filter(|c| c.alpha == alpha)
            .map(|c| (c.context, c.rate))
            .collect();
        col.sort_by_key(|c| c.0);
        col
    }

    /// True when the rate never rises as the context grows, for this alpha.
    pub fn non_increasing_in_context(&self, alpha: f64) -> bool {
        self.column(alpha).windows(2).all(|w| w[1].1 <= w[0].1)
    }

    /// Columns: `context, alpha, rate_pct, bits_per_byte`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["context", "alpha", "rate_pct", "bits_per_byte"])?;
        for c in &self.cells {
            w.write_record([
                c.context.to_string(),
                c.alpha.to_string(),
                format!("{:.4}", c.rate),
                format!("{:.6}", c.bits_per_byte),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Fixed-width table, contexts down, alphas across.
    pub fn table(&self) -> String {
        let mut alphas: Vec<f64> = Vec::new();
        let mut contexts: Vec<u32> = Vec::new();
        for c in &self.cells {
            if !alphas.contains(&c.alpha) {
                alphas.push(c.alpha);
            }
            if !contexts.contains(&c.context) {
                contexts.push(c.context);
            }
        }
        let mut s = format!("{:>8}", "context");
        for a in &alphas {
            s.push_str(&format!("{:>10}", format!("a={a}")));
        }
        s.push('\n');
        for ctx in contexts {
            s.push_str(&format!("{ctx:>8}"));
            for &a in &alphas {
                match self.get(ctx, a) {
                    Some(c) => s.push_str(&format!("{:>10.2}", c.rate)),
                    None => s.push_str(&format!("{:>10}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Windowed Lidstone counts alone, one compression per (context, alpha) cell.
pub fn lidstone_sweep(data: &[u8], contexts: &[u32], alphas: &[f64], options: &EvalOptions) -> Result<SweepResult, EvalError> {
    let mut cells = Vec::with_capacity(contexts.len() * alphas.len());
    for &context in contexts {
        for &alpha in alphas {
            let spec = ExpertSpec::naive_bayes(alpha, Some(context));
            let m = measure(data, &[spec], WeightMode::default(), options)?;
            cells.push(SweepCell {
                context,
                alpha,
                rate: m.rate_excluding_header,
                bits_per_byte: m.bits_per_byte(),
            });
        }
    }
    Ok(SweepResult { cells })
}

fn build_all(specs: &[ExpertSpec]) -> Result<Vec<Box<dyn Expert>>, EvalError> {
    specs
        .iter()
        .map(|s| build_builtin(s, crate::BYTE_ALPHABET).map_err(EvalError::from))
        .collect()
}

fn calibration_sample(data: &[u8], specs: &[ExpertSpec], chunks: &[usize], chunk_size: usize) -> Result<CalibrationSample, EvalError> {
    let symbols = to_symbols(data);
    let all: Vec<&[Symbol]> = symbols.chunks(chunk_size).collect();
    let picked: Vec<&[Symbol]> = chunks.iter().filter_map(|&i| all.get(i).copied()).collect();
    let mut experts = build_all(specs)?;
    Ok(CalibrationSample::from_chunks(&picked, &mut experts)?)
}

/// `count` distinct chunk indices below `n_chunks`, ascending, drawn from `seed`.
pub fn draw_chunks(n_chunks: usize, count: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    if count == 0 || count > n_chunks {
        return Err(EvalError::Corpus(format!(
            "cannot draw {count} calibration chunks from {n_chunks}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n_chunks, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Fits weights on the listed chunks; with `grid_step`, also searches the lattice.
pub fn fit_corpus(
    data: &[u8],
    specs: &[ExpertSpec],
    chunks: &[usize],
    grid_step: Option<f64>,
    options: &EvalOptions,
) -> Result<(FitReport, Option<GridResult>), EvalError> {
    let n_chunks = chunk_count(data.len(), options.chunk_size);
    if let Some(&bad) = chunks.iter().find(|&&c| c >= n_chunks) {
        return Err(EvalError::Corpus(format!("chunk {bad} is past the last chunk ({n_chunks} total)")));
    }
    let sample = calibration_sample(data, specs, chunks, options.chunk_size)?;
    let report = fit_weights(&sample, &options.fit)?;
    let grid = grid_step.map(|step| grid_search(&sample, step)).transpose()?;
    Ok((report, grid))
}

#[derive(Debug, Clone)]
pub struct MultiRow {
    pub specs: Vec<ExpertSpec>,
    pub weights: WeightVector,
    /// Cross-entropy on the calibration sample at the fitted weights, nats/symbol.
    pub fitted_ce: f64,
    pub rate: f64,
}

#[derive(Debug, Clone)]
pub struct MultiReport {
    pub rows: Vec<MultiRow>,
}

impl MultiReport {
    /// Columns: `set, experts, weights, fitted_ce_nats, fitted_bits_per_symbol, rate_pct`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["set", "experts", "weights", "fitted_ce_nats", "fitted_bits_per_symbol", "rate_pct"])?;
        for (i, r) in self.rows.iter().enumerate() {
            let names: Vec<String> = r.specs.iter().map(|s| s.to_string()).collect();
            w.write_record([
                i.to_string(),
                names.join(" "),
                fmt_weights(&r.weights),
                format!("{:.6}", r.fitted_ce),
                format!("{:.6}", r.fitted_ce / std::f64::consts::LN_2),
                format!("{:.4}", r.rate),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Fits and measures each expert set. When a set extends the previous one, the
/// previous weights padded with zeros join the candidates, so nested sets never
/// fit worse on the calibration sample.
pub fn multi_expert_report(
    data: &[u8],
    sets: &[Vec<ExpertSpec>],
    calibration: &[usize],
    options: &EvalOptions,
) -> Result<MultiReport, EvalError> {
    let mut rows: Vec<MultiRow> = Vec::new();
    for specs in sets {
        let sample = calibration_sample(data, specs, calibration, options.chunk_size)?;
        let (weights, fitted_ce) = if specs.len() == 1 {
            (WeightVector::one_hot(1, 0), sample.expert_cross_entropy(0))
        } else {
            let mut cfg = options.fit.clone();
            if let Some(prev) = rows.last() {
                if specs.starts_with(&prev.specs) {
                    let mut w = prev.weights.as_slice().to_vec();
                    w.resize(specs.len(), 0.0);
                    cfg.candidates.push(WeightVector::new(w).map_err(FitError::from)?);
                }
            }
            let report = fit_weights(&sample, &cfg)?;
            (report.weights, report.final_ce)
        };
        let m = measure(data, specs, WeightMode::Fixed(weights.clone()), options)?;
        rows.push(MultiRow {
            specs: specs.clone(),
            weights,
            fitted_ce,
            rate: m.rate_excluding_header,
        });
    }
    Ok(MultiReport { rows })
}

#[derive(Debug, Clone)]
pub struct StabilityRow {
    pub samples: usize,
    pub rates: Vec<f64>,
    /// Weight on the first expert for each seed.
    pub alphas: Vec<f64>,
}

impl StabilityRow {
    pub fn rate_mean_std(&self) -> (f64, f64) {
        mean_std(&self.rates)
    }

    pub fn alpha_mean_std(&self) -> (f64, f64) {
        mean_std(&self.alphas)
    }
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    pub grid_alpha: f64,
    pub grid_rate: f64,
}

impl StabilityReport {
    /// Columns: `samples, runs, rate_mean_pct, rate_std_pct, alpha_mean, alpha_std`;
    /// the last row has `samples = grid` with zero spread.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["samples", "runs", "rate_mean_pct", "rate_std_pct", "alpha_mean", "alpha_std"])?;
        for r in &self.rows {
            let (rm, rs) = r.rate_mean_std();
            let (am, a_s) = r.alpha_mean_std();
            w.write_record([
                r.samples.to_string(),
                r.rates.len().to_string(),
                format!("{rm:.4}"),
                format!("{rs:.4}"),
                format!("{am:.4}"),
                format!("{a_s:.4}"),
            ])?;
        }
        w.write_record([
            "grid".to_string(),
            "1".to_string(),
            format!("{:.4}", self.grid_rate),
            "0.0000".to_string(),
            format!("{:.4}", self.grid_alpha),
            "0.0000".to_string(),
        ])?;
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Fits two-expert weights on `count` calibration chunks drawn without replacement,
/// `seeds` times per count, and compresses the whole corpus with each fit. The grid
/// row searches the 0.01 lattice on a sample of every chunk.
pub fn stability_report(
    data: &[u8],
    specs: &[ExpertSpec],
    counts: &[usize],
    seeds: usize,
    seed: u64,
    options: &EvalOptions,
) -> Result<StabilityReport, EvalError> {
    if specs.len() != 2 {
        return Err(EvalError::Corpus("stability report needs exactly two experts".into()));
    }
    let n_chunks = chunk_count(data.len(), options.chunk_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(counts.len());
    for &count in counts {
        if count == 0 || count > n_chunks {
            return Err(EvalError::Corpus(format!(
                "cannot draw {count} calibration chunks from {n_chunks}"
            )));
        }
        let mut rates = Vec::with_capacity(seeds);
        let mut alphas = Vec::with_capacity(seeds);
        for _ in 0..seeds {
            let mut picked = index::sample(&mut rng, n_chunks, count).into_vec();
            picked.sort_unstable();
            let sample = calibration_sample(data, specs, &picked, options.chunk_size)?;
            let w = fit_weights(&sample, &options.fit)?.weights;
            let m = measure(data, specs, WeightMode::Fixed(w.clone()), options)?;
            rates.push(m.rate_excluding_header);
            alphas.push(w.as_slice()[0]);
        }
        rows.push(StabilityRow {
            samples: count,
            rates,
            alphas,
        });
    }
    let everything: Vec<usize> = (0..n_chunks).collect();
    let sample = calibration_sample(data, specs, &everything, options.chunk_size)?;
    let grid = grid_search(&sample, 0.01)?;
    let m = measure(data, specs, WeightMode::Fixed(grid.weights.clone()), options)?;
    Ok(StabilityReport {
        rows,
        grid_alpha: grid.weights.as_slice()[0],
        grid_rate: m.rate_excluding_header,
    })
}

/// Rate of a host compressor (`gzip`, `xz`, ...) when it is installed.
pub fn external_baseline(program: &str, args: &[&str], data: &[u8]) -> Option<f64> {
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .ok()?;
    let mut stdin = child.stdin.take()?;
    let input = data.to_vec();
    let feeder = std::thread::spawn(move || stdin.write_all(&input));
    let out = child.wait_with_output().ok()?;
    feeder.join().ok()?.ok()?;
    (out.status.success() && !data.is_empty()).then(|| 100.0 * out.stdout.len() as f64 / data.len() as f64)
}
