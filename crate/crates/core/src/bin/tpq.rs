//! Command-line pipeline for quantized tensor-parallel synchronization:
//! `gen` -> `calibrate` -> `select` -> `simulate`/`sweep`.
//!
//! Every run prints its fully resolved configuration to stderr so results
//! are reproducible from the banner alone. Exit codes: 0 success, 1 usage
//! error, 2 data/format error, 3 internal invariant violation.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use tpq::calibration::{run_calibration, CalibrationTable, DEFAULT_GAMMA};
use tpq::codec::{build_codec_table, Rounding};
use tpq::collective::{ReducePrecision, SyncConfig, SyncStrategy};
use tpq::harness::{
    atomic_write, evaluate_sync, export_sorted_ranges, generate_synthetic, load_dataset,
    ranges_to_csv, run_sweep, sample_outlier_indices, save_dataset, selection_for, KPolicy,
    SyntheticSpec,
};
use tpq::layer::shard_layer;
use tpq::Error;

#[derive(Parser)]
#[command(
    name = "tpq",
    version,
    about = "Hybrid Int4+BF16 quantized synchronization for tensor-parallel linear layers"
)]
struct Cli {
    /// JSON config file; keys match long flag names and fill in any flag
    /// not given on the command line (explicit flags win).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (layer + activation splits).
    Gen(GenArgs),
    /// Run EMA min/max calibration over a dataset's calibration split.
    Calibrate(CalibrateArgs),
    /// Select high-precision features; export selection, ranges, and codec table.
    Select(SelectArgs),
    /// Simulate one sync configuration over the evaluation split.
    Simulate(SimulateArgs),
    /// Sweep strategies x bit widths and emit a CSV of error/traffic metrics.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Shape preset: "default" (D=E=512, S=128, N=8, 256/64 sequences) or
    /// "small" (D=E=64, S=16, N=4, 32/8 sequences).
    #[arg(long)]
    preset: Option<String>,
    /// Input feature count D.
    #[arg(long)]
    input_features: Option<usize>,
    /// Output feature count E.
    #[arg(long)]
    output_features: Option<usize>,
    /// Rows per sequence S.
    #[arg(long)]
    seq_len: Option<usize>,
    /// Device count N.
    #[arg(long)]
    devices: Option<usize>,
    /// Calibration sequence count.
    #[arg(long)]
    calib_seqs: Option<usize>,
    /// Evaluation sequence count.
    #[arg(long)]
    eval_seqs: Option<usize>,
    /// Per-column std of input activations.
    #[arg(long)]
    base_std: Option<f32>,
    /// Number of planted outlier features.
    #[arg(long)]
    outliers: Option<usize>,
    /// Weight-column multiplier for outlier features.
    #[arg(long)]
    outlier_multiplier: Option<f32>,
    #[arg(long)]
    weight_seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output calibration table (TPQT).
    #[arg(long)]
    out: PathBuf,
    /// EMA smoothing constant in (0, 1].
    #[arg(long)]
    gamma: Option<f32>,
    /// Device count; defaults to the dataset manifest's value.
    #[arg(long)]
    devices: Option<usize>,
    /// Optional human-readable JSON export of the table.
    #[arg(long)]
    json_out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    /// Calibration table (TPQT) from `calibrate`.
    #[arg(long)]
    table: PathBuf,
    /// Output selection JSON.
    #[arg(long)]
    out: PathBuf,
    /// Selection strategy: "selected" (top range), "random", or "none".
    #[arg(long)]
    strategy: Option<String>,
    /// Seed for the random strategy.
    #[arg(long)]
    seed: Option<u64>,
    /// Explicit selection size; overrides --k-denom.
    #[arg(long)]
    k: Option<usize>,
    /// Selection size denominator: k = floor(E / denom).
    #[arg(long)]
    k_denom: Option<usize>,
    /// Quantization bit width for the emitted codec table.
    #[arg(long)]
    bits: Option<u8>,
    /// Optional codec table output (TPQS).
    #[arg(long)]
    codec_out: Option<PathBuf>,
    /// Optional CSV of aggregated ranges sorted descending.
    #[arg(long)]
    ranges_csv: Option<PathBuf>,
    /// Max-normalize the ranges CSV so the top range is 1.
    #[arg(long)]
    normalize: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Calibration table (TPQT) from `calibrate`.
    #[arg(long)]
    table: PathBuf,
    /// Output report JSON ("-" for stdout).
    #[arg(long)]
    out: PathBuf,
    /// Sync strategy: "selected", "random", "int4", or "full".
    #[arg(long)]
    strategy: Option<String>,
    /// Quantization bit width.
    #[arg(long)]
    bits: Option<u8>,
    /// Seed for the random strategy.
    #[arg(long)]
    seed: Option<u64>,
    /// Explicit selection size; overrides --k-denom.
    #[arg(long)]
    k: Option<usize>,
    /// Selection size denominator: k = floor(E / denom).
    #[arg(long)]
    k_denom: Option<usize>,
    /// Code rounding: "nearest" or "dithered".
    #[arg(long)]
    rounding: Option<String>,
    /// Dither seed (dithered rounding only).
    #[arg(long)]
    dither_seed: Option<u64>,
    /// Reduction precision: "f32" or "bf16".
    #[arg(long)]
    reduce: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset directory from `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Calibration table (TPQT) from `calibrate`.
    #[arg(long)]
    table: PathBuf,
    /// Output CSV ("-" for stdout).
    #[arg(long)]
    out: PathBuf,
    /// Bit widths: "lo:hi", a comma list, or a single value (e.g. "2:8").
    #[arg(long)]
    bits: Option<String>,
    /// Comma list of strategies, or "all" for int4,random,selected.
    #[arg(long)]
    strategies: Option<String>,
    /// Seed for the random strategy.
    #[arg(long)]
    seed: Option<u64>,
    /// Explicit selection size; overrides --k-denom.
    #[arg(long)]
    k: Option<usize>,
    /// Selection size denominator: k = floor(E / denom).
    #[arg(long)]
    k_denom: Option<usize>,
}

enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match err {
            Error::Internal(msg) => CliError::Internal(msg),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    let file_config = match FileConfig::load(cli.config.as_deref()) {
        Ok(cfg) => cfg,
        Err(err) => return report(err),
    };
    let outcome = match cli.command {
        Command::Gen(args) => cmd_gen(args, &file_config),
        Command::Calibrate(args) => cmd_calibrate(args, &file_config),
        Command::Select(args) => cmd_select(args, &file_config),
        Command::Simulate(args) => cmd_simulate(args, &file_config),
        Command::Sweep(args) => cmd_sweep(args, &file_config),
    };
    match outcome {
        Ok(()) => 0,
        Err(err) => report(err),
    }
}

fn report(err: CliError) -> i32 {
    match err {
        CliError::Usage(msg) => {
            eprintln!("error: {msg}");
            1
        }
        CliError::Data(msg) => {
            eprintln!("error: {msg}");
            2
        }
        CliError::Internal(msg) => {
            eprintln!("internal error: {msg}");
            3
        }
    }
}

/// Flat JSON object whose keys mirror long flag names.
struct FileConfig(serde_json::Map<String, Value>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig(serde_json::Map::new()));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("config file {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("config file {}: {e}", path.display())))?;
        match value {
            Value::Object(map) => Ok(FileConfig(map)),
            _ => Err(CliError::Data(format!(
                "config file {} must contain a JSON object",
                path.display()
            ))),
        }
    }

    fn get<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(value) => serde_json::from_value(value.clone())
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key \"{key}\": {e}"))),
        }
    }
}

/// `flag.or(config[key]).unwrap_or(default)`.
fn resolve<T: serde::de::DeserializeOwned>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, CliError> {
    Ok(flag.or(cfg.get(key)?).unwrap_or(default))
}

fn resolve_opt<T: serde::de::DeserializeOwned>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
) -> Result<Option<T>, CliError> {
    Ok(flag.or(cfg.get(key)?))
}

fn banner(command: &str, config: Value) {
    let mut wrapped = json!({ "command": command });
    if let (Value::Object(dst), Value::Object(src)) = (&mut wrapped, config) {
        dst.extend(src);
    }
    eprintln!("config: {wrapped}");
}

fn write_text_output(path: &Path, text: &str) -> Result<(), CliError> {
    if path.as_os_str() == "-" {
        print!("{text}");
        return Ok(());
    }
    atomic_write(path, text.as_bytes())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn preset_spec(name: &str) -> Result<SyntheticSpec, CliError> {
    match name {
        "default" => Ok(SyntheticSpec::default()),
        "small" => {
            let mut spec = SyntheticSpec {
                input_features: 64,
                output_features: 64,
                seq_len: 16,
                devices: 4,
                calibration_sequences: 32,
                evaluation_sequences: 8,
                base_std: 1.0,
                outlier_indices: Vec::new(),
                outlier_multiplier: 50.0,
                weight_seed: 7,
                data_seed: 42,
            };
            spec.outlier_indices = sample_outlier_indices(&spec, 4);
            Ok(spec)
        }
        other => Err(CliError::Usage(format!(
            "unknown preset \"{other}\" (expected \"default\" or \"small\")"
        ))),
    }
}

fn cmd_gen(args: GenArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let preset = resolve(args.preset, cfg, "preset", "default".to_string())?;
    let mut spec = preset_spec(&preset)?;
    let default_outliers = spec.outlier_indices.len();

    spec.input_features = resolve(args.input_features, cfg, "input_features", spec.input_features)?;
    spec.output_features =
        resolve(args.output_features, cfg, "output_features", spec.output_features)?;
    spec.seq_len = resolve(args.seq_len, cfg, "seq_len", spec.seq_len)?;
    spec.devices = resolve(args.devices, cfg, "devices", spec.devices)?;
    spec.calibration_sequences =
        resolve(args.calib_seqs, cfg, "calib_seqs", spec.calibration_sequences)?;
    spec.evaluation_sequences = resolve(args.eval_seqs, cfg, "eval_seqs", spec.evaluation_sequences)?;
    spec.base_std = resolve(args.base_std, cfg, "base_std", spec.base_std)?;
    spec.outlier_multiplier =
        resolve(args.outlier_multiplier, cfg, "outlier_multiplier", spec.outlier_multiplier)?;
    spec.weight_seed = resolve(args.weight_seed, cfg, "weight_seed", spec.weight_seed)?;
    spec.data_seed = resolve(args.data_seed, cfg, "data_seed", spec.data_seed)?;
    let outlier_count = resolve(args.outliers, cfg, "outliers", default_outliers)?;
    if outlier_count > spec.output_features {
        return Err(CliError::Usage(format!(
            "--outliers {outlier_count} exceeds output feature count {}",
            spec.output_features
        )));
    }
    spec.outlier_indices = sample_outlier_indices(&spec, outlier_count);
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    banner(
        "gen",
        json!({
            "out": args.out,
            "preset": preset,
            "spec": spec,
        }),
    );

    let data = generate_synthetic(&spec)?;
    save_dataset(&args.out, &spec, &data)?;
    eprintln!(
        "wrote dataset to {} ({} calibration + {} evaluation sequences)",
        args.out.display(),
        spec.calibration_sequences,
        spec.evaluation_sequences
    );
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let gamma = resolve(args.gamma, cfg, "gamma", DEFAULT_GAMMA)?;
    let (spec, data) = load_dataset(&args.data)?;
    let devices = resolve(args.devices, cfg, "devices", spec.devices)?;
    let json_out = resolve_opt(args.json_out, cfg, "json_out")?;

    banner(
        "calibrate",
        json!({
            "data": args.data,
            "out": args.out,
            "gamma": gamma,
            "devices": devices,
            "json_out": json_out,
            "sequences": spec.calibration_sequences,
        }),
    );

    let sharded = shard_layer(&data.layer, devices)?;
    let table = run_calibration(&sharded, &data.calibration, gamma)?;
    table.save_tpqt(&args.out)?;
    eprintln!("wrote {}", args.out.display());
    if let Some(json_path) = json_out {
        atomic_write(&json_path, table.to_json()?.as_bytes())?;
        eprintln!("wrote {}", json_path.display());
    }
    Ok(())
}

fn parse_k_policy(
    k: Option<usize>,
    k_denom: Option<usize>,
    cfg: &FileConfig,
) -> Result<KPolicy, CliError> {
    let k = resolve_opt(k, cfg, "k")?;
    let k_denom = resolve_opt(k_denom, cfg, "k_denom")?;
    match (k, k_denom) {
        (Some(k), _) => Ok(KPolicy::Explicit(k)),
        (None, Some(denom)) => Ok(KPolicy::FractionDenominator(denom)),
        (None, None) => Ok(KPolicy::FractionDenominator(64)),
    }
}

fn load_calibration(path: &Path) -> Result<CalibrationTable, CliError> {
    let table = CalibrationTable::load_tpqt(path)?;
    if table.sequences_seen() == 0 {
        return Err(CliError::Data(
            "degenerate calibration: table has no observed sequences".into(),
        ));
    }
    Ok(table)
}

fn cmd_select(args: SelectArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let strategy_name = resolve(args.strategy, cfg, "strategy", "selected".to_string())?;
    let seed = resolve(args.seed, cfg, "seed", 0u64)?;
    let bits = resolve(args.bits, cfg, "bits", 4u8)?;
    let k_policy = parse_k_policy(args.k, args.k_denom, cfg)?;
    let codec_out = resolve_opt(args.codec_out, cfg, "codec_out")?;
    let ranges_csv_path = resolve_opt(args.ranges_csv, cfg, "ranges_csv")?;
    let normalize = args.normalize || cfg.get::<bool>("normalize")?.unwrap_or(false);

    let table = load_calibration(&args.table)?;
    let ranges = table.compute_ranges()?;
    if ranges.aggregated_all().iter().all(|r| *r == 0.0) {
        return Err(Error::DegenerateCalibration("all aggregated ranges are zero".into()).into());
    }
    let k = k_policy.resolve(table.feature_count())?;

    banner(
        "select",
        json!({
            "table": args.table,
            "out": args.out,
            "strategy": strategy_name,
            "seed": seed,
            "k": k,
            "bits": bits,
            "codec_out": codec_out,
            "ranges_csv": ranges_csv_path,
            "normalize": normalize,
        }),
    );

    let strategy = match strategy_name.as_str() {
        "selected" | "top_range" => SyncStrategy::SelectedBf16,
        "random" => SyncStrategy::RandomBf16 { seed },
        "none" | "int4" | "pure" => SyncStrategy::PureLowBit,
        other => {
            return Err(CliError::Usage(format!(
                "unknown selection strategy \"{other}\" (expected selected, random, or none)"
            )))
        }
    };
    let selection = selection_for(strategy, &ranges, k)?;
    write_text_output(&args.out, &(selection.to_json()? + "\n"))?;

    if let Some(path) = codec_out {
        let codec = build_codec_table(&ranges, selection, bits)?;
        codec.save_tpqs(&path)?;
        eprintln!("wrote {}", path.display());
    }
    if let Some(path) = ranges_csv_path {
        let rows = export_sorted_ranges(&ranges, normalize)?;
        write_text_output(&path, &ranges_to_csv(&rows))?;
    }
    Ok(())
}

fn parse_sync_strategy(name: &str, seed: u64) -> Result<SyncStrategy, CliError> {
    match name {
        "full" | "full_precision" => Ok(SyncStrategy::FullPrecision),
        "int4" | "pure" | "pure_low_bit" => Ok(SyncStrategy::PureLowBit),
        "random" | "random_bf16" => Ok(SyncStrategy::RandomBf16 { seed }),
        "selected" | "selected_bf16" => Ok(SyncStrategy::SelectedBf16),
        other => Err(CliError::Usage(format!(
            "unknown strategy \"{other}\" (expected full, int4, random, or selected)"
        ))),
    }
}

fn cmd_simulate(args: SimulateArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let strategy_name = resolve(args.strategy, cfg, "strategy", "selected".to_string())?;
    let seed = resolve(args.seed, cfg, "seed", 0u64)?;
    let bits = resolve(args.bits, cfg, "bits", 4u8)?;
    let k_policy = parse_k_policy(args.k, args.k_denom, cfg)?;
    let rounding_name = resolve(args.rounding, cfg, "rounding", "nearest".to_string())?;
    let dither_seed = resolve(args.dither_seed, cfg, "dither_seed", 0u64)?;
    let reduce_name = resolve(args.reduce, cfg, "reduce", "f32".to_string())?;

    let strategy = parse_sync_strategy(&strategy_name, seed)?;
    let rounding = match rounding_name.as_str() {
        "nearest" => Rounding::Nearest,
        "dithered" => Rounding::Dithered { seed: dither_seed },
        other => {
            return Err(CliError::Usage(format!(
                "unknown rounding \"{other}\" (expected nearest or dithered)"
            )))
        }
    };
    let reduce = match reduce_name.as_str() {
        "f32" => ReducePrecision::F32,
        "bf16" => ReducePrecision::Bf16,
        other => {
            return Err(CliError::Usage(format!(
                "unknown reduce precision \"{other}\" (expected f32 or bf16)"
            )))
        }
    };

    let (spec, data) = load_dataset(&args.data)?;
    let calibration = load_calibration(&args.table)?;
    let ranges = calibration.compute_ranges()?;
    let k = k_policy.resolve(calibration.feature_count())?;

    banner(
        "simulate",
        json!({
            "data": args.data,
            "table": args.table,
            "out": args.out,
            "strategy": strategy_name,
            "seed": seed,
            "bits": bits,
            "k": k,
            "rounding": rounding_name,
            "dither_seed": dither_seed,
            "reduce": reduce_name,
        }),
    );

    let sharded = shard_layer(&data.layer, spec.devices)?;
    check_table_matches(&calibration, sharded.device_count(), sharded.output_features())?;
    let selection = selection_for(strategy, &ranges, k)?;
    let codec = build_codec_table(&ranges, selection, bits)?;
    let sync_cfg =
        SyncConfig::new(strategy, bits).with_rounding(rounding).with_reduce_precision(reduce);
    let report = evaluate_sync(&sharded, &data.evaluation, &codec, &sync_cfg)?;
    let json = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    write_text_output(&args.out, &(json + "\n"))?;
    Ok(())
}

fn check_table_matches(
    calibration: &CalibrationTable,
    devices: usize,
    features: usize,
) -> Result<(), CliError> {
    if calibration.device_count() != devices || calibration.feature_count() != features {
        return Err(CliError::Data(format!(
            "calibration table is {}x{} (devices x features) but dataset is {}x{}",
            calibration.device_count(),
            calibration.feature_count(),
            devices,
            features
        )));
    }
    Ok(())
}

fn parse_bit_widths(text: &str) -> Result<Vec<u8>, CliError> {
    let parse_one = |s: &str| -> Result<u8, CliError> {
        s.trim()
            .parse::<u8>()
            .map_err(|_| CliError::Usage(format!("invalid bit width \"{s}\"")))
    };
    let bits: Vec<u8> = if let Some((lo, hi)) = text.split_once(':') {
        let (lo, hi) = (parse_one(lo)?, parse_one(hi)?);
        if lo > hi {
            return Err(CliError::Usage(format!("empty bit range \"{text}\"")));
        }
        (lo..=hi).collect()
    } else {
        text.split(',').map(parse_one).collect::<Result<_, _>>()?
    };
    for &b in &bits {
        if !(2..=8).contains(&b) {
            return Err(CliError::Usage(format!("bit width {b} out of range [2, 8]")));
        }
    }
    Ok(bits)
}

fn parse_strategies(text: &str, seed: u64) -> Result<Vec<SyncStrategy>, CliError> {
    if text == "all" {
        return Ok(vec![
            SyncStrategy::PureLowBit,
            SyncStrategy::RandomBf16 { seed },
            SyncStrategy::SelectedBf16,
        ]);
    }
    text.split(',').map(|s| parse_sync_strategy(s.trim(), seed)).collect()
}

fn cmd_sweep(args: SweepArgs, cfg: &FileConfig) -> Result<(), CliError> {
    let bits_text = resolve(args.bits, cfg, "bits", "2:8".to_string())?;
    let strategies_text = resolve(args.strategies, cfg, "strategies", "all".to_string())?;
    let seed = resolve(args.seed, cfg, "seed", 0u64)?;
    let k_policy = parse_k_policy(args.k, args.k_denom, cfg)?;

    let bit_widths = parse_bit_widths(&bits_text)?;
    let strategies = parse_strategies(&strategies_text, seed)?;

    let (spec, data) = load_dataset(&args.data)?;
    let calibration = load_calibration(&args.table)?;
    let ranges = calibration.compute_ranges()?;
    let k = k_policy.resolve(calibration.feature_count())?;

    banner(
        "sweep",
        json!({
            "data": args.data,
            "table": args.table,
            "out": args.out,
            "bits": bit_widths,
            "strategies": strategies_text,
            "seed": seed,
            "k": k,
        }),
    );

    let sharded = shard_layer(&data.layer, spec.devices)?;
    check_table_matches(&calibration, sharded.device_count(), sharded.output_features())?;
    let result = run_sweep(
        &sharded,
        &ranges,
        &data.evaluation,
        &strategies,
        &bit_widths,
        KPolicy::Explicit(k),
    )?;
    write_text_output(&args.out, &result.to_csv())?;
    Ok(())
}
