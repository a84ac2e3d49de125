//! Single-process simulation of the sync step: AllGather of compressed
//! partial outputs followed by a local decompress-and-reduce.
//!
//! "Devices" are logical shards. Every message really is serialized and
//! re-parsed, so the byte accounting reflects actual wire sizes, and the
//! reduction runs in a fixed device-ascending order so results are
//! bit-reproducible.

use serde::Serialize;

use crate::codec::{
    decode_with, encode_full_bf16, encode_with, CodecTable, Rounding,
};
use crate::error::{Error, Result};
use crate::layer::{partial_forward, ShardedLayer};
use crate::numeric::{Bf16, Matrix};
use crate::selection::SelectionStrategy;

/// Which compression scheme the sync uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncStrategy {
    /// Transport everything as BF16 (16 bits/value reference).
    FullPrecision,
    /// Quantize every feature to the configured bit width.
    PureLowBit,
    /// Keep a uniformly random feature set at BF16.
    RandomBf16 { seed: u64 },
    /// Keep the top-range feature set at BF16.
    SelectedBf16,
}

impl std::fmt::Display for SyncStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SyncStrategy::FullPrecision => write!(f, "full_precision"),
            SyncStrategy::PureLowBit => write!(f, "pure_low_bit"),
            SyncStrategy::RandomBf16 { .. } => write!(f, "random_bf16"),
            SyncStrategy::SelectedBf16 => write!(f, "selected_bf16"),
        }
    }
}

/// Precision of the local reduction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducePrecision {
    /// Accumulate in f32 and round once at the end (default).
    #[default]
    F32,
    /// Round the running sum to BF16 after every addition, mirroring a
    /// transport that sums in BF16.
    Bf16,
}

/// Sync configuration; strategy and bit width must match the codec table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyncConfig {
    pub strategy: SyncStrategy,
    pub bit_width: u8,
    pub reduce_precision: ReducePrecision,
    pub rounding: Rounding,
}

impl SyncConfig {
    pub fn new(strategy: SyncStrategy, bit_width: u8) -> Self {
        SyncConfig {
            strategy,
            bit_width,
            reduce_precision: ReducePrecision::F32,
            rounding: Rounding::Nearest,
        }
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn with_reduce_precision(mut self, reduce_precision: ReducePrecision) -> Self {
        self.reduce_precision = reduce_precision;
        self
    }
}

/// Outcome of one simulated sync.
#[derive(Clone, Debug)]
pub struct SyncResult {
    output: Matrix,
    bytes_on_wire: usize,
    bytes_baseline_bf16: usize,
    messages: Vec<crate::codec::CompressedMessage>,
}

impl SyncResult {
    /// Reduced activations with the bias applied.
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    /// Sum of the serialized lengths of all gathered messages.
    pub fn bytes_on_wire(&self) -> usize {
        self.bytes_on_wire
    }

    /// Comparison figure: `2 * S * E * N` for a plain BF16 gather.
    pub fn bytes_baseline_bf16(&self) -> usize {
        self.bytes_baseline_bf16
    }

    /// The gathered messages, retained for audit.
    pub fn messages(&self) -> &[crate::codec::CompressedMessage] {
        &self.messages
    }
}

/// Error statistics of a sync output against the exact reduction.
#[derive(Clone, Debug, Serialize)]
pub struct ErrorStats {
    pub mse: f64,
    pub max_abs_error: f64,
    pub rel_frobenius: f64,
    /// Mean squared error per output feature.
    pub per_feature_mse: Vec<f64>,
    /// Raw per-entry errors (output - exact), for distribution tests.
    #[serde(skip)]
    pub errors: Vec<f32>,
}

/// Per-device partial outputs for one input batch, in device order.
pub fn compute_partials(sharded: &ShardedLayer, x: &Matrix) -> Result<Vec<Matrix>> {
    sharded.shards().iter().map(|s| partial_forward(s, x)).collect()
}

/// f32 sum of partials plus bias: the oracle all sync results are scored
/// against.
pub fn exact_from_partials(partials: &[Matrix], bias: &Matrix) -> Result<Matrix> {
    let (rows, features) = validate_partials(partials, bias)?;
    let mut out = Matrix::zeros(rows, features);
    for p in partials {
        for (acc, v) in out.as_mut_slice().iter_mut().zip(p.as_slice()) {
            *acc += *v;
        }
    }
    add_bias(&mut out, bias, ReducePrecision::F32);
    Ok(out)
}

/// Uncompressed reference sync.
pub fn sync_exact(sharded: &ShardedLayer, x: &Matrix) -> Result<Matrix> {
    let partials = compute_partials(sharded, x)?;
    exact_from_partials(&partials, sharded.bias())
}

/// Full simulated sync: encode each device's partial, gather the serialized
/// messages, decode each with the sender's scales, reduce, add the bias once.
pub fn sync_allgather_reduce(
    sharded: &ShardedLayer,
    x: &Matrix,
    table: &CodecTable,
    cfg: &SyncConfig,
) -> Result<SyncResult> {
    if sharded.device_count() != table.device_count()
        || sharded.output_features() != table.feature_count()
    {
        return Err(Error::ShapeMismatch(format!(
            "sharded layer is {}x{} (devices x features), table is {}x{}",
            sharded.device_count(),
            sharded.output_features(),
            table.device_count(),
            table.feature_count()
        )));
    }
    let partials = compute_partials(sharded, x)?;
    sync_from_partials(&partials, sharded.bias(), table, cfg)
}

/// [`sync_allgather_reduce`] starting from precomputed partial outputs.
/// Sweeps use this to amortize the forward passes across configurations.
pub fn sync_from_partials(
    partials: &[Matrix],
    bias: &Matrix,
    table: &CodecTable,
    cfg: &SyncConfig,
) -> Result<SyncResult> {
    let (rows, features) = validate_partials(partials, bias)?;
    if partials.len() != table.device_count() || features != table.feature_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} partials of {} features vs table for {} devices x {} features",
            partials.len(),
            features,
            table.device_count(),
            table.feature_count()
        )));
    }
    check_config(table, cfg)?;

    // AllGather: every message crosses a real serialize/parse boundary.
    let mut messages = Vec::with_capacity(partials.len());
    let mut bytes_on_wire = 0usize;
    for (device, partial) in partials.iter().enumerate() {
        let message = match cfg.strategy {
            SyncStrategy::FullPrecision => encode_full_bf16(partial, table, device)?,
            _ => encode_with(partial, table, device, cfg.rounding)?,
        };
        let wire = message.to_bytes();
        bytes_on_wire += wire.len();
        messages.push(crate::codec::CompressedMessage::from_bytes(&wire)?);
    }

    // Local reduction, device-ascending.
    let mut output = Matrix::zeros(rows, features);
    for message in &messages {
        let decoded = decode_with(message, table, cfg.rounding)?;
        match cfg.reduce_precision {
            ReducePrecision::F32 => {
                for (acc, v) in output.as_mut_slice().iter_mut().zip(decoded.as_slice()) {
                    *acc += *v;
                }
            }
            ReducePrecision::Bf16 => {
                for (acc, v) in output.as_mut_slice().iter_mut().zip(decoded.as_slice()) {
                    *acc = Bf16::from_f32(*acc + *v).to_f32();
                }
            }
        }
    }
    add_bias(&mut output, bias, cfg.reduce_precision);

    Ok(SyncResult {
        output,
        bytes_on_wire,
        bytes_baseline_bf16: 2 * rows * features * partials.len(),
        messages,
    })
}

/// Compares a sync result against the exact reduction.
pub fn error_report(result: &SyncResult, exact: &Matrix) -> Result<ErrorStats> {
    output_error_stats(&result.output, exact)
}

/// Error statistics between an output matrix and the exact reduction.
pub fn output_error_stats(output: &Matrix, exact: &Matrix) -> Result<ErrorStats> {
    if output.rows() != exact.rows() || output.cols() != exact.cols() {
        return Err(Error::ShapeMismatch(format!(
            "output is {}x{}, exact is {}x{}",
            output.rows(),
            output.cols(),
            exact.rows(),
            exact.cols()
        )));
    }
    let features = output.cols();
    let mut errors = Vec::with_capacity(output.len());
    let mut per_feature_sse = vec![0.0f64; features];
    let mut sse = 0.0f64;
    let mut ref_ss = 0.0f64;
    let mut max_abs = 0.0f64;
    for r in 0..output.rows() {
        let o = output.row(r);
        let e = exact.row(r);
        for j in 0..features {
            let err = o[j] - e[j];
            errors.push(err);
            let err64 = err as f64;
            sse += err64 * err64;
            per_feature_sse[j] += err64 * err64;
            ref_ss += (e[j] as f64) * (e[j] as f64);
            max_abs = max_abs.max(err64.abs());
        }
    }
    let count = output.len() as f64;
    let rel_frobenius = if ref_ss == 0.0 {
        if sse == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (sse / ref_ss).sqrt()
    };
    let row_count = output.rows().max(1) as f64;
    Ok(ErrorStats {
        mse: if count == 0.0 { 0.0 } else { sse / count },
        max_abs_error: max_abs,
        rel_frobenius,
        per_feature_mse: per_feature_sse.into_iter().map(|s| s / row_count).collect(),
        errors,
    })
}

fn validate_partials(partials: &[Matrix], bias: &Matrix) -> Result<(usize, usize)> {
    let first = partials
        .first()
        .ok_or_else(|| Error::InvalidArgument("no partial outputs to reduce".into()))?;
    let shape = (first.rows(), first.cols());
    for (i, p) in partials.iter().enumerate() {
        if (p.rows(), p.cols()) != shape {
            return Err(Error::ShapeMismatch(format!(
                "partial {i} is {}x{}, expected {}x{}",
                p.rows(),
                p.cols(),
                shape.0,
                shape.1
            )));
        }
    }
    if bias.rows() != 1 || bias.cols() != shape.1 {
        return Err(Error::ShapeMismatch(format!(
            "bias is {}x{}, expected 1x{}",
            bias.rows(),
            bias.cols(),
            shape.1
        )));
    }
    Ok(shape)
}

fn add_bias(out: &mut Matrix, bias: &Matrix, precision: ReducePrecision) {
    for r in 0..out.rows() {
        for (acc, b) in out.row_mut(r).iter_mut().zip(bias.row(0)) {
            match precision {
                ReducePrecision::F32 => *acc += *b,
                ReducePrecision::Bf16 => *acc = Bf16::from_f32(*acc + *b).to_f32(),
            }
        }
    }
}

/// Rejects configurations that cannot have produced the supplied table.
fn check_config(table: &CodecTable, cfg: &SyncConfig) -> Result<()> {
    if cfg.strategy != SyncStrategy::FullPrecision && cfg.bit_width != table.bit_width() {
        return Err(Error::StrategyMismatch(format!(
            "config bit width {} != table bit width {}",
            cfg.bit_width,
            table.bit_width()
        )));
    }
    let provenance = table.selection().strategy();
    match cfg.strategy {
        SyncStrategy::PureLowBit => {
            if table.selection().k() != 0 {
                return Err(Error::StrategyMismatch(format!(
                    "pure low-bit sync against a table with k={} selected features",
                    table.selection().k()
                )));
            }
        }
        SyncStrategy::SelectedBf16 => {
            if let SelectionStrategy::Random { seed } = provenance {
                return Err(Error::StrategyMismatch(format!(
                    "selected-BF16 sync against a random selection (seed {seed})"
                )));
            }
        }
        SyncStrategy::RandomBf16 { seed } => {
            if let SelectionStrategy::Random { seed: table_seed } = provenance {
                if table_seed != seed {
                    return Err(Error::StrategyMismatch(format!(
                        "random selection seed {seed} != table selection seed {table_seed}"
                    )));
                }
            }
        }
        SyncStrategy::FullPrecision => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{run_calibration, RangeVector};
    use crate::codec::{bits_per_value, build_codec_table, MESSAGE_HEADER_BYTES};
    use crate::layer::{reference_forward, shard_layer, LinearLayer};
    use crate::numeric::{gaussian_matrix, Rng};
    use crate::selection::{select_top_range, FeatureSelection};

    fn random_layer(rng: &mut Rng, d: usize, e: usize) -> LinearLayer {
        let std = 1.0 / (d as f32).sqrt();
        let w = gaussian_matrix(rng, d, e, &vec![std; e]);
        let b = gaussian_matrix(rng, 1, e, &vec![0.1; e]);
        LinearLayer::new(w, b).unwrap()
    }

    #[test]
    fn sync_exact_matches_reference() {
        let mut rng = Rng::new(1);
        let layer = random_layer(&mut rng, 16, 8);
        let x = gaussian_matrix(&mut rng, 4, 16, &vec![1.0; 16]);
        let reference = reference_forward(&layer, &x).unwrap();
        for n in [1usize, 2, 4, 8] {
            let sharded = shard_layer(&layer, n).unwrap();
            let exact = sync_exact(&sharded, &x).unwrap();
            let dist = exact.rel_frobenius_distance(&reference);
            assert!(dist <= 1e-4, "N={n}: {dist}");
            if n == 1 {
                assert_eq!(exact, reference);
            }
        }
    }

    #[test]
    fn zero_input_broadcasts_bias() {
        let mut rng = Rng::new(2);
        let layer = random_layer(&mut rng, 8, 4);
        let sharded = shard_layer(&layer, 2).unwrap();
        let exact = sync_exact(&sharded, &Matrix::zeros(3, 8)).unwrap();
        for r in 0..3 {
            assert_eq!(exact.row(r), layer.bias().row(0));
        }
    }

    fn calibrated_table(
        rng: &mut Rng,
        layer: &LinearLayer,
        n: usize,
        k: usize,
        bit_width: u8,
    ) -> (ShardedLayer, CodecTable) {
        let sharded = shard_layer(layer, n).unwrap();
        let d = layer.input_features();
        let seqs: Vec<Matrix> =
            (0..8).map(|_| gaussian_matrix(rng, 6, d, &vec![1.0; d])).collect();
        let table = run_calibration(&sharded, &seqs, 0.01).unwrap();
        let ranges = table.compute_ranges().unwrap();
        let sel = select_top_range(&ranges, k).unwrap();
        let codec = build_codec_table(&ranges, sel, bit_width).unwrap();
        (sharded, codec)
    }

    #[test]
    fn full_precision_single_device_bytes_and_error() {
        let mut rng = Rng::new(3);
        let layer = random_layer(&mut rng, 8, 8);
        let (sharded, codec) = calibrated_table(&mut rng, &layer, 1, 0, 4);
        let x = gaussian_matrix(&mut rng, 5, 8, &vec![1.0; 8]);

        let cfg = SyncConfig::new(SyncStrategy::FullPrecision, 4);
        let result = sync_allgather_reduce(&sharded, &x, &codec, &cfg).unwrap();
        assert_eq!(
            result.bytes_on_wire(),
            result.bytes_baseline_bf16() + MESSAGE_HEADER_BYTES
        );

        let exact = sync_exact(&sharded, &x).unwrap();
        let stats = error_report(&result, &exact).unwrap();
        // BF16 transport: relative Frobenius error within 2^-7.
        assert!(stats.rel_frobenius <= 2f64.powi(-7), "{}", stats.rel_frobenius);
    }

    /// Ranges that cover every value of the given per-device partials, so
    /// no quantization clamps.
    fn covering_ranges(partials: &[Matrix]) -> RangeVector {
        let features = partials[0].cols();
        let mut per_device = Vec::with_capacity(partials.len() * features);
        for p in partials {
            for j in 0..features {
                let mut max_abs = 0.0f32;
                for r in 0..p.rows() {
                    max_abs = max_abs.max(p.get(r, j).abs());
                }
                per_device.push(2.0 * max_abs * 1.01);
            }
        }
        RangeVector::from_per_device(partials.len(), features, per_device).unwrap()
    }

    #[test]
    fn quantized_sync_error_respects_per_feature_bound() {
        let mut rng = Rng::new(4);
        let n = 4;
        let layer = random_layer(&mut rng, 16, 8);
        let sharded = shard_layer(&layer, n).unwrap();
        let x = gaussian_matrix(&mut rng, 6, 16, &vec![1.0; 16]);
        let partials = compute_partials(&sharded, &x).unwrap();

        // In-range by construction: the triangle-inequality bound over
        // per-device half-steps applies without clamping terms.
        let ranges = covering_ranges(&partials);
        let sel = select_top_range(&ranges, 2).unwrap();
        let codec = build_codec_table(&ranges, sel, 4).unwrap();
        let cfg = SyncConfig::new(SyncStrategy::SelectedBf16, 4);
        let result = sync_from_partials(&partials, sharded.bias(), &codec, &cfg).unwrap();
        let exact = exact_from_partials(&partials, sharded.bias()).unwrap();

        for r in 0..exact.rows() {
            for j in 0..exact.cols() {
                let err = (result.output().get(r, j) - exact.get(r, j)).abs();
                let bound: f32 = if codec.selection().mask()[j] {
                    (0..n)
                        .map(|i| 2f32.powi(-8) * partials[i].get(r, j).abs())
                        .sum::<f32>()
                        + 1e-4
                } else {
                    (0..n).map(|i| codec.scale(i, j) / 2.0).sum::<f32>() * 1.001 + 1e-5
                };
                assert!(err <= bound, "({r},{j}): {err} > {bound}");
            }
        }
    }

    #[test]
    fn reduction_order_only_reassociates() {
        let mut rng = Rng::new(5);
        let layer = random_layer(&mut rng, 16, 8);
        let (sharded, codec) = calibrated_table(&mut rng, &layer, 4, 1, 4);
        let x = gaussian_matrix(&mut rng, 3, 16, &vec![1.0; 16]);
        let cfg = SyncConfig::new(SyncStrategy::SelectedBf16, 4);
        let result = sync_allgather_reduce(&sharded, &x, &codec, &cfg).unwrap();

        // Re-reduce the retained messages in reverse device order.
        let mut reversed = Matrix::zeros(3, 8);
        for message in result.messages().iter().rev() {
            let decoded = decode_with(message, &codec, cfg.rounding).unwrap();
            for (acc, v) in reversed.as_mut_slice().iter_mut().zip(decoded.as_slice()) {
                *acc += *v;
            }
        }
        add_bias(&mut reversed, sharded.bias(), ReducePrecision::F32);
        let dist = reversed.rel_frobenius_distance(result.output());
        assert!(dist <= 1e-4, "{dist}");

        // Byte counts are order-invariant exactly.
        let recount: usize = result.messages().iter().map(|m| m.to_bytes().len()).sum();
        assert_eq!(recount, result.bytes_on_wire());
    }

    #[test]
    fn error_report_examples() {
        let exact = Matrix::zeros(10, 10);
        let mut output = Matrix::zeros(10, 10);
        let zero = output_error_stats(&output, &exact).unwrap();
        assert_eq!(zero.mse, 0.0);
        assert_eq!(zero.max_abs_error, 0.0);
        assert_eq!(zero.rel_frobenius, 0.0);

        output.set(3, 7, 1.0);
        let stats = output_error_stats(&output, &exact).unwrap();
        assert!((stats.mse - 0.01).abs() < 1e-12);
        assert_eq!(stats.max_abs_error, 1.0);
        assert_eq!(stats.per_feature_mse[7], 0.1);
    }

    #[test]
    fn strategy_table_mismatches_are_rejected() {
        let rv = RangeVector::from_per_device(2, 4, vec![2.0; 8]).unwrap();
        let sel = select_top_range(&rv, 1).unwrap();
        let table = build_codec_table(&rv, sel, 4).unwrap();
        let partials = vec![Matrix::zeros(1, 4), Matrix::zeros(1, 4)];
        let bias = Matrix::zeros(1, 4);

        let bad_bits = SyncConfig::new(SyncStrategy::SelectedBf16, 5);
        assert!(matches!(
            sync_from_partials(&partials, &bias, &table, &bad_bits),
            Err(Error::StrategyMismatch(_))
        ));

        let pure = SyncConfig::new(SyncStrategy::PureLowBit, 4);
        assert!(matches!(
            sync_from_partials(&partials, &bias, &table, &pure),
            Err(Error::StrategyMismatch(_))
        ));

        let empty = build_codec_table(&rv, FeatureSelection::none(4), 4).unwrap();
        assert!(sync_from_partials(&partials, &bias, &empty, &pure).is_ok());
    }

    #[test]
    fn dithered_aggregated_error_is_near_uniform_sum() {
        // Equal scales, N=4 devices, ~32k samples: the aggregated error
        // variance should be near N * s^2 / 12. The tight-tolerance version
        // runs in the acceptance suite.
        let n = 4;
        let features = 64;
        let rows = 128;
        let bit_width = 6;
        let qmax = crate::codec::qmax_for_bit_width(bit_width) as f32;
        let sigma = 1.0f32;
        let scale = 6.0 * sigma / qmax;
        let rv =
            RangeVector::from_per_device(n, features, vec![2.0 * qmax * scale; n * features])
                .unwrap();
        let table = build_codec_table(&rv, FeatureSelection::none(features), bit_width).unwrap();

        let mut rng = Rng::new(909);
        let bias = Matrix::zeros(1, features);
        let mut errors = Vec::new();
        for sync_round in 0..4u64 {
            let partials: Vec<Matrix> = (0..n)
                .map(|_| gaussian_matrix(&mut rng, rows, features, &vec![sigma; features]))
                .collect();
            let cfg = SyncConfig::new(SyncStrategy::PureLowBit, bit_width)
                .with_rounding(Rounding::Dithered { seed: 5000 + sync_round });
            let result = sync_from_partials(&partials, &bias, &table, &cfg).unwrap();
            let exact = exact_from_partials(&partials, &bias).unwrap();
            for (o, e) in result.output().as_slice().iter().zip(exact.as_slice()) {
                errors.push((*o - *e) as f64);
            }
        }
        let count = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / count;
        let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / count;
        let expected = n as f64 * (scale as f64).powi(2) / 12.0;
        assert!(
            (var / expected - 1.0).abs() < 0.1,
            "var {var} vs expected {expected}"
        );
    }

    #[test]
    fn bf16_reduce_mode_still_tracks_exact() {
        let mut rng = Rng::new(6);
        let layer = random_layer(&mut rng, 8, 4);
        let sharded = shard_layer(&layer, 2).unwrap();
        let x = gaussian_matrix(&mut rng, 4, 8, &vec![1.0; 8]);
        let partials = compute_partials(&sharded, &x).unwrap();
        let ranges = covering_ranges(&partials);
        let codec = build_codec_table(&ranges, FeatureSelection::none(4), 8).unwrap();

        let cfg = SyncConfig::new(SyncStrategy::PureLowBit, 8)
            .with_reduce_precision(ReducePrecision::Bf16);
        let result = sync_from_partials(&partials, sharded.bias(), &codec, &cfg).unwrap();
        let exact = exact_from_partials(&partials, sharded.bias()).unwrap();
        let stats = error_report(&result, &exact).unwrap();
        assert!(stats.rel_frobenius < 0.05, "{}", stats.rel_frobenius);
    }

    #[test]
    fn sweep_sanity_bits_per_value() {
        assert_eq!(bits_per_value(512, 8, 4), 4.1875);
    }
}
