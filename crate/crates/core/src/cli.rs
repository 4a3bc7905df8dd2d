//! Command-line front end: trains models, harvests white-box perturbations
//! into energy bases, runs the black-box attacks and the square baseline,
//! and renders similarity/benchmark reports.
//!
//! Exit codes: 0 success, 2 usage/config errors, 3 I/O errors, 4 data
//! format errors. An attack with ASR below 100% still exits 0 — failure to
//! attack is data, not an error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{
    export_csv, export_heatmap_pgm, similarity_grid, summarize, summarize_with, top_third,
    AnalysisError, BenchmarkSummary, SimilarityMatrix,
};
use crate::attack::{
    append_records_jsonl, energy_attack, square_baseline, AttackConfig, AttackError, AttackRecord,
    HopelessStrategy, RunRecord,
};
use crate::basis::{BasisError, CovAccumulator, EnergyBasis};
use crate::data::{glyph_digits_dataset, load_idx, synth_dataset, DataError, Dataset};
use crate::nnet::{train, Model, NnetError, TrainConfig};
use crate::oracle::QueryOracle;
use crate::util::derive_seed;
use crate::whitebox::{frank_wolfe_attack, pgd_attack};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;

/// Error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for CliError {}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_USAGE,
        message: msg.into(),
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = match &e {
            DataError::Io { .. } => EXIT_IO,
            DataError::Format { .. } => EXIT_FORMAT,
            DataError::InvalidInput(_) => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<NnetError> for CliError {
    fn from(e: NnetError) -> Self {
        let code = match &e {
            NnetError::Io { .. } => EXIT_IO,
            NnetError::Format { .. } => EXIT_FORMAT,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<BasisError> for CliError {
    fn from(e: BasisError) -> Self {
        let code = match &e {
            BasisError::Io { .. } => EXIT_IO,
            BasisError::Format { .. } => EXIT_FORMAT,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Basis(b) => b.into(),
            other => usage(other.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        let code = match &e {
            AnalysisError::Io { .. } => EXIT_IO,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn io_cli(path: &Path, e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_IO,
        message: format!("i/o error on {}: {e}", path.display()),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "energy-attack",
    version,
    about = "Patch-energy transfer priors for query-efficient black-box attacks on small classifiers"
)]
pub struct Cli {
    /// Optional key=value config file mirroring the long flag names;
    /// explicit flags win over config values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a desk-scale model and save it.
    Train(TrainArgs),
    /// Run the white-box attack over a dataset, harvest perturbation
    /// patches, and save the extracted energy basis.
    Extract(ExtractArgs),
    /// Run the black-box attack (or the square baseline) against a victim
    /// model, writing JSONL records and a summary.
    Attack(AttackArgs),
    /// Compare bases: top-third patches, pairwise |cos| grid, PGM + CSV.
    Analyze(AnalyzeArgs),
    /// Paired benchmark: energy attack vs square baseline on the same
    /// images and seed.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum ArchArg {
    Mlp,
    Conv,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum WhiteboxArg {
    Fw,
    Pgd,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum StrategyArg {
    Batch,
    Prob,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset spec: synth[:n=..,side=..,seed=..], digits[:n=..,seed=..],
    /// or idx:<images>,<labels>.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long, value_enum, default_value_t = ArchArg::Mlp)]
    pub arch: ArchArg,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output model file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Surrogate model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    /// L∞ bound for the white-box attack (required; dataset-dependent).
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long = "patch-size")]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long, value_enum, default_value_t = WhiteboxArg::Fw)]
    pub attack: WhiteboxArg,
    #[arg(long)]
    pub iters: Option<usize>,
    /// PGD step size (defaults to eps/4).
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Provenance tag stored in the basis file (defaults to the model
    /// file stem).
    #[arg(long)]
    pub tag: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// Victim model file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Energy basis file (omit with --baseline square).
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Use a baseline instead of the energy attack ("square").
    #[arg(long)]
    pub baseline: Option<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long = "max-queries")]
    pub max_queries: Option<u64>,
    /// Patch side for the square baseline's tiling schedule.
    #[arg(long = "patch-size")]
    pub patch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub tau: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Attack only images the victim classifies correctly.
    #[arg(long = "skip-misclassified", default_value_t = false)]
    pub skip_misclassified: bool,
    /// Include failed attacks (full budget) in the query statistics.
    #[arg(long = "include-failures", default_value_t = false)]
    pub include_failures: bool,
    /// JSONL records output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Summary JSON output (printed to stdout as well).
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Basis files to compare (repeat; at least two).
    #[arg(long = "basis")]
    pub bases: Vec<PathBuf>,
    /// Keep signed cosines instead of absolute values.
    #[arg(long, default_value_t = false)]
    pub signed: bool,
    /// Heatmap PGM output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub basis: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long = "max-queries")]
    pub max_queries: Option<u64>,
    #[arg(long = "patch-size")]
    pub patch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub tau: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Directory for energy.jsonl, square.jsonl, and bench.json.
    #[arg(long = "out-dir")]
    pub out_dir: Option<PathBuf>,
}

/// Key=value config file contents; lines starting with `#` are comments.
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    entries: Vec<(String, String)>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_cli(path, e))?;
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(usage(format!(
                    "config {}:{}: expected key=value, got {line:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(FileConfig { entries })
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| usage(format!("config key {key}: cannot parse {raw:?}"))),
        }
    }
}

/// Flag value if present, else config value, else default.
fn resolve<T: std::str::FromStr + Clone>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
    default: Option<T>,
) -> Result<T, CliError> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(v) = cfg.parsed::<T>(key)? {
        return Ok(v);
    }
    default.ok_or_else(|| usage(format!("missing required option --{key}")))
}

fn resolve_opt<T: std::str::FromStr + Clone>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
) -> Result<Option<T>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    cfg.parsed::<T>(key)
}

/// Parse a dataset spec: `synth[:k=v,...]`, `digits[:k=v,...]`, or
/// `idx:<images>,<labels>`.
fn parse_dataset(spec: &str, default_seed: u64) -> Result<Dataset, CliError> {
    let (kind, rest) = match spec.split_once(':') {
        Some((k, r)) => (k, Some(r)),
        None => (spec, None),
    };
    match kind {
        "synth" | "digits" => {
            let mut n = if kind == "synth" { 512 } else { 2000 };
            let mut side = 16;
            let mut seed = default_seed;
            if let Some(rest) = rest {
                for part in rest.split(',').filter(|p| !p.is_empty()) {
                    let Some((k, v)) = part.split_once('=') else {
                        return Err(usage(format!(
                            "dataset spec: expected key=value, got {part:?}"
                        )));
                    };
                    let parse_usize = || {
                        v.parse::<usize>()
                            .map_err(|_| usage(format!("dataset spec: bad value for {k}: {v:?}")))
                    };
                    match k {
                        "n" => n = parse_usize()?,
                        "side" if kind == "synth" => side = parse_usize()?,
                        "seed" => {
                            seed = v
                                .parse::<u64>()
                                .map_err(|_| usage(format!("dataset spec: bad seed {v:?}")))?
                        }
                        other => {
                            return Err(usage(format!(
                                "dataset spec: unknown key {other:?} for {kind}"
                            )))
                        }
                    }
                }
            }
            let ds = if kind == "synth" {
                synth_dataset(seed, n, side)?
            } else {
                glyph_digits_dataset(seed, n)?
            };
            Ok(ds)
        }
        "idx" => {
            let Some(rest) = rest else {
                return Err(usage("dataset spec: idx:<images>,<labels>"));
            };
            let Some((images, labels)) = rest.split_once(',') else {
                return Err(usage("dataset spec: idx:<images>,<labels>"));
            };
            Ok(load_idx(Path::new(images), Path::new(labels))?)
        }
        other => Err(usage(format!(
            "unknown dataset kind {other:?} (expected synth, digits, or idx)"
        ))),
    }
}

fn load_dataset(
    spec: Option<String>,
    cfg: &FileConfig,
    seed: u64,
    limit: Option<usize>,
) -> Result<Dataset, CliError> {
    let spec = resolve(spec, cfg, "dataset", None::<String>)?;
    let mut ds = parse_dataset(&spec, derive_seed(seed, "data"))?;
    if let Some(limit) = limit {
        if limit == 0 {
            return Err(usage("--limit must be >= 1"));
        }
        ds.truncate(limit);
    }
    Ok(ds)
}

fn parse_strategy(
    strategy: Option<StrategyArg>,
    tau: Option<u32>,
    cfg: &FileConfig,
) -> Result<HopelessStrategy, CliError> {
    let strategy = match strategy {
        Some(s) => s,
        None => match cfg.get("strategy") {
            Some("batch") => StrategyArg::Batch,
            Some("prob") => StrategyArg::Prob,
            Some(other) => return Err(usage(format!("config strategy: unknown value {other:?}"))),
            None => StrategyArg::Batch,
        },
    };
    let tau = resolve(tau, cfg, "tau", Some(1))?;
    if tau < 1 {
        return Err(usage("--tau must be >= 1"));
    }
    Ok(match strategy {
        StrategyArg::Batch => HopelessStrategy::Batch { tau },
        StrategyArg::Prob => HopelessStrategy::Probabilistic,
    })
}

/// Entry point used by `main`; returns the process exit code.
pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 0 for --help/--version and 2 for usage errors.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Train(args) => cmd_train(args, &cfg),
        Command::Extract(args) => cmd_extract(args, &cfg),
        Command::Attack(args) => cmd_attack(args, &cfg),
        Command::Analyze(args) => cmd_analyze(args, &cfg),
        Command::Bench(args) => cmd_bench(args, &cfg),
    }
}

fn cmd_train(args: TrainArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let seed = resolve(args.seed, cfg, "seed", Some(0))?;
    let limit = resolve_opt(args.limit, cfg, "limit")?;
    let ds = load_dataset(args.dataset, cfg, seed, limit)?;
    let out = resolve(args.out, cfg, "out", None::<PathBuf>)?;
    let epochs = resolve(args.epochs, cfg, "epochs", Some(5))?;
    let lr = resolve(args.lr, cfg, "lr", Some(0.1))?;
    let batch = resolve(args.batch, cfg, "batch", Some(32))?;
    let hidden = resolve(args.hidden, cfg, "hidden", Some(128))?;

    let shape = ds.images[0].shape();
    let init_seed = derive_seed(seed, "init");
    let mut model = match args.arch {
        ArchArg::Mlp => Model::mlp(shape, hidden, ds.num_classes, init_seed)?,
        ArchArg::Conv => Model::convnet(shape, ds.num_classes, init_seed)?,
    };
    let accuracy = train(
        &mut model,
        &ds.images,
        &TrainConfig {
            epochs,
            lr,
            batch_size: batch,
            seed: derive_seed(seed, "train"),
        },
    )?;
    model.save(&out)?;
    println!(
        "trained {:?} on {} ({} images): train accuracy {:.2}% -> {}",
        args.arch,
        ds.name,
        ds.len(),
        100.0 * accuracy,
        out.display()
    );
    Ok(())
}

fn cmd_extract(args: ExtractArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let seed = resolve(args.seed, cfg, "seed", Some(0))?;
    let model_path = resolve(args.model, cfg, "model", None::<PathBuf>)?;
    let limit = resolve_opt(args.limit, cfg, "limit")?;
    let ds = load_dataset(args.dataset, cfg, seed, limit)?;
    let eps = resolve(args.eps, cfg, "eps", None::<f64>)?;
    let patch_size = resolve(args.patch_size, cfg, "patch-size", Some(5))?;
    let stride = resolve(args.stride, cfg, "stride", Some(1))?;
    let iters = resolve(args.iters, cfg, "iters", Some(20))?;
    let out = resolve(args.out, cfg, "out", None::<PathBuf>)?;
    if eps <= 0.0 {
        return Err(usage("--eps must be positive"));
    }
    if patch_size < 3 {
        return Err(usage("--patch-size must be >= 3"));
    }
    if stride < 1 {
        return Err(usage("--stride must be >= 1"));
    }

    let model = Model::load(&model_path)?;
    let tag = args
        .tag
        .or_else(|| cfg.get("tag").map(str::to_string))
        .unwrap_or_else(|| {
            model_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "surrogate".to_string())
        });
    let step = resolve_opt(args.step, cfg, "step")?.unwrap_or(eps / 4.0);

    let (c, _, _) = ds.images[0].shape();
    let mut acc = CovAccumulator::new(c, patch_size);
    for img in &ds.images {
        let pert = match args.attack {
            WhiteboxArg::Fw => frank_wolfe_attack(&model, img, img.label, eps, iters)?,
            WhiteboxArg::Pgd => pgd_attack(&model, img, img.label, eps, iters, step)?,
        };
        acc.accumulate(&pert, stride)?;
    }
    let basis = acc.extract_basis(&tag)?;
    basis.save(&out)?;
    let head: String = basis
        .energies
        .iter()
        .take(6)
        .fold(String::new(), |mut s, e| {
            let _ = write!(s, "{e:.3} ");
            s
        });
    println!(
        "harvested {} patches from {} images -> basis n={} (tag {tag:?}), spectrum head: {head}-> {}",
        acc.count(),
        ds.len(),
        basis.len(),
        out.display()
    );
    Ok(())
}

struct PreparedAttack {
    victim: Model,
    images: Vec<crate::nnet::Image>,
    attack_cfg: AttackConfig,
    seed: u64,
}

#[allow(clippy::too_many_arguments)]
fn prepare_attack(
    model: Option<PathBuf>,
    dataset: Option<String>,
    eps: Option<f64>,
    max_queries: Option<u64>,
    patch_size: Option<usize>,
    strategy: Option<StrategyArg>,
    tau: Option<u32>,
    seed: Option<u64>,
    limit: Option<usize>,
    skip_misclassified: bool,
    cfg: &FileConfig,
) -> Result<PreparedAttack, CliError> {
    let seed = resolve(seed, cfg, "seed", Some(0))?;
    let model_path = resolve(model, cfg, "model", None::<PathBuf>)?;
    let limit = resolve_opt(limit, cfg, "limit")?;
    let ds = load_dataset(dataset, cfg, seed, limit)?;
    let eps = resolve(eps, cfg, "eps", None::<f64>)?;
    let max_queries = resolve(max_queries, cfg, "max-queries", Some(10_000))?;
    let patch_size = resolve(patch_size, cfg, "patch-size", Some(5))?;
    let strategy = parse_strategy(strategy, tau, cfg)?;
    let victim = Model::load(&model_path)?;

    let mut images = ds.images;
    if skip_misclassified {
        let before = images.len();
        images.retain(|img| {
            victim
                .forward(img)
                .map(|l| crate::nnet::argmax(&l) == img.label)
                .unwrap_or(false)
        });
        if images.is_empty() {
            return Err(usage(format!(
                "victim misclassifies all {before} images; nothing to attack"
            )));
        }
    }

    Ok(PreparedAttack {
        victim,
        images,
        attack_cfg: AttackConfig {
            epsilon: eps,
            max_queries,
            patch_side: patch_size,
            strategy,
        },
        seed: derive_seed(seed, "attack"),
    })
}

fn write_attack_outputs(
    records: &[AttackRecord],
    prep: &PreparedAttack,
    basis_tag: &str,
    out: Option<PathBuf>,
    summary_path: Option<PathBuf>,
    include_failures: bool,
) -> Result<BenchmarkSummary, CliError> {
    if let Some(out) = out {
        let runs: Vec<RunRecord> = records
            .iter()
            .map(|r| RunRecord::from_attack(r, prep.seed, &prep.attack_cfg, basis_tag))
            .collect();
        append_records_jsonl(&out, runs.iter()).map_err(|e| io_cli(&out, e))?;
    }
    let summary = summarize_with(records, include_failures)?;
    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| usage(format!("summary serialization failed: {e}")))?;
    if let Some(path) = summary_path {
        fs::write(&path, &json).map_err(|e| io_cli(&path, e))?;
    }
    println!("{json}");
    Ok(summary)
}

fn cmd_attack(args: AttackArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let baseline = args
        .baseline
        .or_else(|| cfg.get("baseline").map(str::to_string));
    if let Some(b) = &baseline {
        if b != "square" {
            return Err(usage(format!(
                "unknown baseline {b:?} (expected \"square\")"
            )));
        }
    }
    let basis_path = resolve_opt(args.basis, cfg, "basis")?;
    if baseline.is_none() && basis_path.is_none() {
        return Err(usage("either --basis or --baseline square is required"));
    }
    let prep = prepare_attack(
        args.model,
        args.dataset,
        args.eps,
        args.max_queries,
        args.patch_size,
        args.strategy,
        args.tau,
        args.seed,
        args.limit,
        args.skip_misclassified,
        cfg,
    )?;
    let budget = prep.images.len() as u64 * prep.attack_cfg.max_queries;
    let mut oracle = QueryOracle::new(&prep.victim, budget);
    let (records, tag) = match baseline {
        Some(_) => {
            let records = square_baseline(&mut oracle, &prep.images, &prep.attack_cfg, prep.seed)?;
            (records, "square".to_string())
        }
        None => {
            let Some(basis_path) = basis_path else {
                return Err(usage("either --basis or --baseline square is required"));
            };
            let basis = EnergyBasis::load(&basis_path)?;
            let mut attack_cfg = prep.attack_cfg.clone();
            attack_cfg.patch_side = basis.patch_side;
            let records = energy_attack(&mut oracle, &basis, &prep.images, &attack_cfg, prep.seed)?;
            (records, basis.source.clone())
        }
    };
    write_attack_outputs(
        &records,
        &prep,
        &tag,
        args.out.or_else(|| cfg.get("out").map(PathBuf::from)),
        args.summary
            .or_else(|| cfg.get("summary").map(PathBuf::from)),
        args.include_failures,
    )?;
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let mut paths = args.bases;
    if paths.is_empty() {
        if let Some(raw) = cfg.get("basis") {
            paths = raw.split(',').map(PathBuf::from).collect();
        }
    }
    if paths.len() < 2 {
        return Err(usage(
            "analyze needs at least two --basis files (a basis may repeat)",
        ));
    }
    let mut tagged: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    let mut dim: Option<usize> = None;
    for path in &paths {
        let basis = EnergyBasis::load(path)?;
        if let Some(d) = dim {
            if basis.dim() != d {
                return Err(usage(format!(
                    "basis {} has dimension {} (c*s_p^2), expected {d}",
                    path.display(),
                    basis.dim()
                )));
            }
        } else {
            dim = Some(basis.dim());
        }
        let tag = if basis.source.is_empty() {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "basis".to_string())
        } else {
            basis.source.clone()
        };
        tagged.push((tag, top_third(&basis)));
    }
    let grid: SimilarityMatrix = similarity_grid(&tagged, args.signed)?;
    if let Some(out) = args.out.or_else(|| cfg.get("out").map(PathBuf::from)) {
        export_heatmap_pgm(&grid, &out)?;
        println!("wrote heatmap {}", out.display());
    }
    if let Some(csv) = args.csv.or_else(|| cfg.get("csv").map(PathBuf::from)) {
        export_csv(&grid, &csv)?;
        println!("wrote csv {}", csv.display());
    }
    // Block-mean summary so the transfer structure is visible in the log.
    let counts: Vec<usize> = tagged.iter().map(|(_, l)| l.len()).collect();
    let mut offset_r = 0;
    for (bi, (tag_a, _)) in tagged.iter().enumerate() {
        let mut offset_c = 0;
        for (bj, (tag_b, _)) in tagged.iter().enumerate() {
            let mut sum = 0.0;
            let mut n = 0usize;
            for r in 0..counts[bi] {
                for c in 0..counts[bj] {
                    sum += grid.matrix.get(offset_r + r, offset_c + c).abs();
                    n += 1;
                }
            }
            println!(
                "block {tag_a} x {tag_b}: mean |cos| = {:.4}",
                sum / n as f64
            );
            offset_c += counts[bj];
        }
        offset_r += counts[bi];
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let basis_path = resolve(args.basis, cfg, "basis", None::<PathBuf>)?;
    let out_dir = resolve(args.out_dir, cfg, "out-dir", None::<PathBuf>)?;
    let prep = prepare_attack(
        args.model,
        args.dataset,
        args.eps,
        args.max_queries,
        args.patch_size,
        args.strategy,
        args.tau,
        args.seed,
        args.limit,
        false,
        cfg,
    )?;
    fs::create_dir_all(&out_dir).map_err(|e| io_cli(&out_dir, e))?;
    let basis = EnergyBasis::load(&basis_path)?;
    let budget = prep.images.len() as u64 * prep.attack_cfg.max_queries;

    let mut energy_cfg = prep.attack_cfg.clone();
    energy_cfg.patch_side = basis.patch_side;
    let mut oracle = QueryOracle::new(&prep.victim, budget);
    let energy_records = energy_attack(&mut oracle, &basis, &prep.images, &energy_cfg, prep.seed)?;
    let mut oracle = QueryOracle::new(&prep.victim, budget);
    let square_records = square_baseline(&mut oracle, &prep.images, &prep.attack_cfg, prep.seed)?;

    let energy_out = out_dir.join("energy.jsonl");
    let square_out = out_dir.join("square.jsonl");
    let energy_runs: Vec<RunRecord> = energy_records
        .iter()
        .map(|r| RunRecord::from_attack(r, prep.seed, &energy_cfg, &basis.source))
        .collect();
    let square_runs: Vec<RunRecord> = square_records
        .iter()
        .map(|r| RunRecord::from_attack(r, prep.seed, &prep.attack_cfg, "square"))
        .collect();
    append_records_jsonl(&energy_out, energy_runs.iter()).map_err(|e| io_cli(&energy_out, e))?;
    append_records_jsonl(&square_out, square_runs.iter()).map_err(|e| io_cli(&square_out, e))?;

    let energy_summary = summarize(&energy_records)?;
    let square_summary = summarize(&square_records)?;
    let report = serde_json::json!({
        "n_images": prep.images.len(),
        "epsilon": prep.attack_cfg.epsilon,
        "strategy": prep.attack_cfg.strategy.to_string(),
        "seed": prep.seed,
        "basis_tag": basis.source,
        "energy": energy_summary,
        "square": square_summary,
    });
    let report_path = out_dir.join("bench.json");
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| usage(format!("report serialization failed: {e}")))?;
    fs::write(&report_path, &text).map_err(|e| io_cli(&report_path, e))?;
    println!("{text}");
    Ok(())
}
