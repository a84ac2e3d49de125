//! Synthetic activation generation with planted outlier features, activation
//! dump file I/O, experiment sweeps, and range exports.
//!
//! Real calibration corpora are replaced by Gaussian activations whose
//! weight columns at a known set of outlier indices are scaled up, which
//! reproduces the structural property the selection method exploits: a small
//! number of output features with far larger ranges than the rest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::RangeVector;
use crate::codec::{bits_per_value, build_codec_table};
use crate::collective::{
    exact_from_partials, sync_from_partials, SyncConfig, SyncStrategy,
};
use crate::error::{Error, Result};
use crate::layer::{LinearLayer, ShardedLayer};
use crate::numeric::{gaussian_matrix, Matrix, Rng};
use crate::selection::{select_random, select_top_range, FeatureSelection};
use crate::wire::{u32_of, Reader, Writer};

const TPQA_MAGIC: &[u8; 4] = b"TPQA";
const TPQA_VERSION: u8 = 1;

// Sub-stream layout. Weight-seed streams cover layer parameters and the
// outlier placement; data-seed streams cover calibration and evaluation
// sequences (disjoint stream ranges, same distribution).
const STREAM_WEIGHT: u64 = 0;
const STREAM_BIAS: u64 = 1;
const STREAM_OUTLIERS: u64 = 2;
const STREAM_EVAL_BASE: u64 = 1 << 32;

/// Shape and seed description of a synthetic experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Input feature count D.
    pub input_features: usize,
    /// Output feature count E.
    pub output_features: usize,
    /// Rows per sequence S.
    pub seq_len: usize,
    /// Device count N.
    pub devices: usize,
    /// Calibration sequence count.
    pub calibration_sequences: usize,
    /// Evaluation sequence count.
    pub evaluation_sequences: usize,
    /// Per-column std of the input activations.
    pub base_std: f32,
    /// Output features whose weight columns are scaled up.
    pub outlier_indices: Vec<usize>,
    /// Scale multiplier for outlier columns (1 disables planting).
    pub outlier_multiplier: f32,
    pub weight_seed: u64,
    pub data_seed: u64,
}

impl Default for SyntheticSpec {
    /// Desk-scale default: D=E=512, S=128, N=8, 256 calibration and 64
    /// evaluation sequences, 8 planted outliers at multiplier 50.
    fn default() -> Self {
        SyntheticSpec::with_seeds(7, 42)
    }
}

impl SyntheticSpec {
    /// The default shape with fresh seeds; outlier positions are re-sampled
    /// from the weight seed.
    pub fn with_seeds(weight_seed: u64, data_seed: u64) -> Self {
        let mut spec = SyntheticSpec {
            input_features: 512,
            output_features: 512,
            seq_len: 128,
            devices: 8,
            calibration_sequences: 256,
            evaluation_sequences: 64,
            base_std: 1.0,
            outlier_indices: Vec::new(),
            outlier_multiplier: 50.0,
            weight_seed,
            data_seed,
        };
        spec.outlier_indices = sample_outlier_indices(&spec, 8);
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_features == 0
            || self.output_features == 0
            || self.seq_len == 0
            || self.devices == 0
            || self.calibration_sequences == 0
        {
            return Err(Error::InvalidArgument("synthetic spec has a zero dimension".into()));
        }
        if self.input_features % self.devices != 0 {
            return Err(Error::ShardCount {
                devices: self.devices,
                input_features: self.input_features,
            });
        }
        if !(self.base_std > 0.0 && self.base_std.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "base_std must be positive and finite, got {}",
                self.base_std
            )));
        }
        if !(self.outlier_multiplier >= 1.0 && self.outlier_multiplier.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "outlier_multiplier must be >= 1, got {}",
                self.outlier_multiplier
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &j in &self.outlier_indices {
            if j >= self.output_features {
                return Err(Error::InvalidArgument(format!(
                    "outlier index {j} out of range [0, {})",
                    self.output_features
                )));
            }
            if !seen.insert(j) {
                return Err(Error::InvalidArgument(format!("duplicate outlier index {j}")));
            }
        }
        Ok(())
    }
}

/// Deterministic outlier placement for a spec's weight seed.
pub fn sample_outlier_indices(spec: &SyntheticSpec, count: usize) -> Vec<usize> {
    let mut rng = Rng::with_stream(spec.weight_seed, STREAM_OUTLIERS);
    let mut indices: Vec<usize> =
        rand::seq::index::sample(&mut rng, spec.output_features, count.min(spec.output_features))
            .into_vec();
    indices.sort_unstable();
    indices
}

/// A generated experiment: the layer plus disjoint calibration and
/// evaluation splits.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub layer: LinearLayer,
    pub calibration: Vec<Matrix>,
    pub evaluation: Vec<Matrix>,
}

/// Generates the layer and both activation splits, deterministically from
/// the spec's seeds.
///
/// Weight columns use std `1/sqrt(D)`, scaled by the outlier multiplier at
/// the planted indices, so outlier output columns have expected magnitude
/// `outlier_multiplier` times the base columns.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let d = spec.input_features;
    let e = spec.output_features;

    let base_w = 1.0 / (d as f32).sqrt();
    let mut col_std = vec![base_w; e];
    for &j in &spec.outlier_indices {
        col_std[j] *= spec.outlier_multiplier;
    }
    let weight =
        gaussian_matrix(&mut Rng::with_stream(spec.weight_seed, STREAM_WEIGHT), d, e, &col_std);
    let bias = gaussian_matrix(
        &mut Rng::with_stream(spec.weight_seed, STREAM_BIAS),
        1,
        e,
        &vec![0.1 * spec.base_std; e],
    );
    let layer = LinearLayer::new(weight, bias)?;

    let input_std = vec![spec.base_std; d];
    let calibration = (0..spec.calibration_sequences)
        .map(|t| {
            gaussian_matrix(
                &mut Rng::with_stream(spec.data_seed, t as u64),
                spec.seq_len,
                d,
                &input_std,
            )
        })
        .collect();
    let evaluation = (0..spec.evaluation_sequences)
        .map(|u| {
            gaussian_matrix(
                &mut Rng::with_stream(spec.data_seed, STREAM_EVAL_BASE + u as u64),
                spec.seq_len,
                d,
                &input_std,
            )
        })
        .collect();

    Ok(SyntheticData { layer, calibration, evaluation })
}

// ---------------------------------------------------------------------------
// Activation dump format (TPQA)
// ---------------------------------------------------------------------------

/// Serializes a matrix as a TPQA dump: magic, version, rows, cols, f32 data,
/// all little-endian. Total length is `13 + 4 * rows * cols`.
pub fn activation_dump_bytes(matrix: &Matrix) -> Result<Vec<u8>> {
    let mut w = Writer::with_capacity(13 + 4 * matrix.len());
    w.magic(TPQA_MAGIC);
    w.u8(TPQA_VERSION);
    w.u32(u32_of(matrix.rows(), "rows")?);
    w.u32(u32_of(matrix.cols(), "cols")?);
    w.f32_slice(matrix.as_slice());
    Ok(w.into_bytes())
}

/// Parses a TPQA dump, rejecting truncated or oversized payloads.
pub fn activation_dump_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes);
    r.magic(TPQA_MAGIC)?;
    let version = r.u8("version")?;
    if version != TPQA_VERSION {
        return Err(Error::Format(format!("unsupported TPQA version {version}")));
    }
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("TPQA shape overflows".into()))?;
    let data = r.f32_vec(len, "matrix data")?;
    r.finish("TPQA dump")?;
    Matrix::from_vec(rows, cols, data)
}

pub fn save_activation_dump(path: impl AsRef<Path>, matrix: &Matrix) -> Result<()> {
    atomic_write(path.as_ref(), &activation_dump_bytes(matrix)?)
}

pub fn load_activation_dump(path: impl AsRef<Path>) -> Result<Matrix> {
    activation_dump_from_bytes(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    spec: SyntheticSpec,
}

/// Writes a generated dataset under `dir`: `manifest.json`,
/// `layer_weight.tpqa`, `layer_bias.tpqa`, and per-sequence dumps under
/// `calib/` and `eval/`.
pub fn save_dataset(dir: impl AsRef<Path>, spec: &SyntheticSpec, data: &SyntheticData) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("calib"))?;
    std::fs::create_dir_all(dir.join("eval"))?;
    let manifest = DatasetManifest { format_version: 1, spec: spec.clone() };
    atomic_write(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    save_activation_dump(dir.join("layer_weight.tpqa"), data.layer.weight())?;
    save_activation_dump(dir.join("layer_bias.tpqa"), data.layer.bias())?;
    for (t, seq) in data.calibration.iter().enumerate() {
        save_activation_dump(dir.join(format!("calib/seq_{t:05}.tpqa")), seq)?;
    }
    for (u, seq) in data.evaluation.iter().enumerate() {
        save_activation_dump(dir.join(format!("eval/seq_{u:05}.tpqa")), seq)?;
    }
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(SyntheticSpec, SyntheticData)> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format_version != 1 {
        return Err(Error::Format(format!(
            "unsupported dataset format version {}",
            manifest.format_version
        )));
    }
    let spec = manifest.spec;
    spec.validate()?;
    let weight = load_activation_dump(dir.join("layer_weight.tpqa"))?;
    let bias = load_activation_dump(dir.join("layer_bias.tpqa"))?;
    let layer = LinearLayer::new(weight, bias)?;
    if layer.input_features() != spec.input_features
        || layer.output_features() != spec.output_features
    {
        return Err(Error::Format(format!(
            "layer dumps are {}x{}, manifest says {}x{}",
            layer.input_features(),
            layer.output_features(),
            spec.input_features,
            spec.output_features
        )));
    }
    let load_split = |name: &str, count: usize| -> Result<Vec<Matrix>> {
        (0..count)
            .map(|t| {
                let seq = load_activation_dump(dir.join(format!("{name}/seq_{t:05}.tpqa")))?;
                if seq.rows() != spec.seq_len || seq.cols() != spec.input_features {
                    return Err(Error::Format(format!(
                        "{name} sequence {t} is {}x{}, expected {}x{}",
                        seq.rows(),
                        seq.cols(),
                        spec.seq_len,
                        spec.input_features
                    )));
                }
                Ok(seq)
            })
            .collect()
    };
    let calibration = load_split("calib", spec.calibration_sequences)?;
    let evaluation = load_split("eval", spec.evaluation_sequences)?;
    Ok((spec, SyntheticData { layer, calibration, evaluation }))
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// How the selection size is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KPolicy {
    /// `k = floor(E / denominator)`; the default denominator is 64.
    FractionDenominator(usize),
    /// Explicit k.
    Explicit(usize),
}

impl KPolicy {
    pub fn resolve(&self, features: usize) -> Result<usize> {
        match *self {
            KPolicy::FractionDenominator(0) => {
                Err(Error::InvalidArgument("k denominator must be nonzero".into()))
            }
            KPolicy::FractionDenominator(denom) => Ok(features / denom),
            KPolicy::Explicit(k) if k > features => {
                Err(Error::SelectionTooLarge { k, features })
            }
            KPolicy::Explicit(k) => Ok(k),
        }
    }
}

/// One (strategy, bit width) sweep outcome.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub strategy: SyncStrategy,
    pub bit_width: u8,
    pub k: usize,
    pub bits_per_value: f64,
    pub mse: f64,
    pub max_abs_error: f64,
    pub rel_frobenius: f64,
    pub bytes_on_wire: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    /// RFC-4180-style CSV with a header row; floats print in shortest
    /// round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,bit_width,k,bits_per_value,mse,max_abs_error,rel_frobenius,bytes_on_wire\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?},{:?},{}\n",
                row.strategy,
                row.bit_width,
                row.k,
                row.bits_per_value,
                row.mse,
                row.max_abs_error,
                row.rel_frobenius,
                row.bytes_on_wire
            ));
        }
        out
    }
}

/// Runs one full simulate-and-score pass per requested (strategy, bit width)
/// combination over the evaluation split. Partial outputs and exact
/// reductions are computed once and shared across combinations.
///
/// Calibration must already have produced `ranges` from the calibration
/// split of the same sharded layer.
pub fn run_sweep(
    sharded: &ShardedLayer,
    ranges: &RangeVector,
    evaluation: &[Matrix],
    strategies: &[SyncStrategy],
    bit_widths: &[u8],
    k_policy: KPolicy,
) -> Result<SweepResult> {
    if evaluation.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let features = sharded.output_features();
    let k = k_policy.resolve(features)?;

    let mut partials_per_seq = Vec::with_capacity(evaluation.len());
    let mut exact_per_seq = Vec::with_capacity(evaluation.len());
    for x in evaluation {
        let partials = crate::collective::compute_partials(sharded, x)?;
        exact_per_seq.push(exact_from_partials(&partials, sharded.bias())?);
        partials_per_seq.push(partials);
    }

    let mut rows = Vec::with_capacity(strategies.len() * bit_widths.len());
    for &strategy in strategies {
        let selection = selection_for(strategy, ranges, k)?;
        for &bit_width in bit_widths {
            let table = build_codec_table(ranges, selection.clone(), bit_width)?;
            let cfg = SyncConfig::new(strategy, bit_width);
            rows.push(score_combo(
                &partials_per_seq,
                &exact_per_seq,
                sharded.bias(),
                &table,
                &cfg,
            )?);
        }
    }
    Ok(SweepResult { rows })
}

/// Pooled error and traffic metrics for one configuration over precomputed
/// partials.
fn score_combo(
    partials_per_seq: &[Vec<Matrix>],
    exact_per_seq: &[Matrix],
    bias: &Matrix,
    table: &crate::codec::CodecTable,
    cfg: &SyncConfig,
) -> Result<SweepRow> {
    let features = table.feature_count();
    let mut sse = 0.0f64;
    let mut ref_ss = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut entries = 0usize;
    let mut bytes_on_wire = 0u64;
    for (partials, exact) in partials_per_seq.iter().zip(exact_per_seq) {
        let result = sync_from_partials(partials, bias, table, cfg)?;
        bytes_on_wire += result.bytes_on_wire() as u64;
        for (o, e) in result.output().as_slice().iter().zip(exact.as_slice()) {
            let err = (*o - *e) as f64;
            sse += err * err;
            ref_ss += (*e as f64) * (*e as f64);
            max_abs = max_abs.max(err.abs());
        }
        entries += exact.len();
    }
    let k = match cfg.strategy {
        SyncStrategy::FullPrecision => features,
        _ => table.selection().k(),
    };
    Ok(SweepRow {
        strategy: cfg.strategy,
        bit_width: cfg.bit_width,
        k,
        bits_per_value: match cfg.strategy {
            SyncStrategy::FullPrecision => 16.0,
            _ => bits_per_value(features, k, cfg.bit_width),
        },
        mse: sse / entries.max(1) as f64,
        max_abs_error: max_abs,
        rel_frobenius: if ref_ss == 0.0 { 0.0 } else { (sse / ref_ss).sqrt() },
        bytes_on_wire,
    })
}

/// Evaluation report for a single sync configuration.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub row: SweepRow,
    pub bytes_baseline_bf16: u64,
    pub sequences: usize,
}

/// Runs one fully custom sync configuration (any rounding and reduce
/// precision) over the evaluation split.
pub fn evaluate_sync(
    sharded: &ShardedLayer,
    evaluation: &[Matrix],
    table: &crate::codec::CodecTable,
    cfg: &SyncConfig,
) -> Result<EvalReport> {
    if evaluation.is_empty() {
        return Err(Error::InvalidArgument("evaluation split is empty".into()));
    }
    let mut partials_per_seq = Vec::with_capacity(evaluation.len());
    let mut exact_per_seq = Vec::with_capacity(evaluation.len());
    for x in evaluation {
        let partials = crate::collective::compute_partials(sharded, x)?;
        exact_per_seq.push(exact_from_partials(&partials, sharded.bias())?);
        partials_per_seq.push(partials);
    }
    let row = score_combo(&partials_per_seq, &exact_per_seq, sharded.bias(), table, cfg)?;
    let rows: usize = evaluation.iter().map(Matrix::rows).sum();
    Ok(EvalReport {
        row,
        bytes_baseline_bf16: (2 * rows * sharded.output_features() * sharded.device_count())
            as u64,
        sequences: evaluation.len(),
    })
}

/// The static selection a strategy uses for a given range vector.
pub fn selection_for(
    strategy: SyncStrategy,
    ranges: &RangeVector,
    k: usize,
) -> Result<FeatureSelection> {
    match strategy {
        SyncStrategy::FullPrecision | SyncStrategy::PureLowBit => {
            Ok(FeatureSelection::none(ranges.feature_count()))
        }
        SyncStrategy::RandomBf16 { seed } => {
            select_random(ranges.feature_count(), k, &mut Rng::new(seed))
        }
        SyncStrategy::SelectedBf16 => select_top_range(ranges, k),
    }
}

// ---------------------------------------------------------------------------
// Range export
// ---------------------------------------------------------------------------

/// One row of the sorted aggregated-range export.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RangeRow {
    /// 1-based position in the descending order.
    pub rank: usize,
    pub feature_index: usize,
    pub range: f32,
}

/// Aggregated ranges sorted descending (ties toward the lower index) and
/// normalized so the maximum is 1.
///
/// Errors if every aggregated range is zero.
pub fn figure1_export(ranges: &RangeVector) -> Result<Vec<RangeRow>> {
    let rows = export_sorted_ranges(ranges, true)?;
    Ok(rows)
}

/// Sorted aggregated ranges, optionally max-normalized.
pub fn export_sorted_ranges(ranges: &RangeVector, normalize: bool) -> Result<Vec<RangeRow>> {
    let aggregated = ranges.aggregated_all();
    let max = aggregated.iter().copied().fold(0.0f32, f32::max);
    if normalize && max == 0.0 {
        return Err(Error::DegenerateCalibration(
            "all aggregated ranges are zero".into(),
        ));
    }
    let mut order: Vec<usize> = (0..aggregated.len()).collect();
    order.sort_by(|&a, &b| aggregated[b].total_cmp(&aggregated[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(pos, feature_index)| RangeRow {
            rank: pos + 1,
            feature_index,
            range: if normalize { aggregated[feature_index] / max } else { aggregated[feature_index] },
        })
        .collect())
}

/// CSV form of a range export (header `rank,feature_index,range`).
pub fn ranges_to_csv(rows: &[RangeRow]) -> String {
    let mut out = String::from("rank,feature_index,range\n");
    for row in rows {
        out.push_str(&format!("{},{},{:?}\n", row.rank, row.feature_index, row.range));
    }
    out
}

// ---------------------------------------------------------------------------
// Filesystem helpers
// ---------------------------------------------------------------------------

/// `std::fs::read` with the path attached to any error.
pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
}

/// `std::fs::read_to_string` with the path attached to any error.
pub fn read_file_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = parent.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
