//! Per-device, per-feature EMA min/max quantization statistics.
//!
//! For each device `i` and output feature `j` the table tracks exponential
//! moving averages of the per-sequence column minimum and maximum:
//!
//! ```text
//! m[i][j] <- (1 - gamma) * m[i][j] + gamma * min(column j of Y_i)
//! M[i][j] <- (1 - gamma) * M[i][j] + gamma * max(column j of Y_i)
//! ```
//!
//! The first observed sequence initializes `m`/`M` to the raw column min/max.
//! The symmetric quantization range per device is `R = 2 * max(-m, M)`, and
//! ranges aggregate across devices by summation.
//!
//! Statistics are kept in `f32`; tests bound the drift against a double
//! precision replay of the same recursion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{partial_forward, ShardedLayer};
use crate::numeric::Matrix;
use crate::wire::{u32_of, Reader, Writer};

/// The paper's calibration smoothing constant.
pub const DEFAULT_GAMMA: f32 = 0.01;

const TPQT_MAGIC: &[u8; 4] = b"TPQT";
const TPQT_VERSION: u8 = 1;

/// EMA min/max state for every (device, feature) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    devices: usize,
    features: usize,
    gamma: f32,
    min_ema: Vec<f32>,
    max_ema: Vec<f32>,
    seen: Vec<u64>,
}

/// Per-device symmetric ranges and their aggregate across devices.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeVector {
    devices: usize,
    features: usize,
    per_device: Vec<f32>,
    aggregated: Vec<f32>,
}

impl CalibrationTable {
    pub fn new(devices: usize, features: usize, gamma: f32) -> Result<Self> {
        if devices == 0 || features == 0 {
            return Err(Error::InvalidArgument(
                "calibration table must have nonzero shape".into(),
            ));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be in (0, 1], got {gamma}"
            )));
        }
        Ok(CalibrationTable {
            devices,
            features,
            gamma,
            min_ema: vec![0.0; devices * features],
            max_ema: vec![0.0; devices * features],
            seen: vec![0; devices],
        })
    }

    pub fn device_count(&self) -> usize {
        self.devices
    }

    pub fn feature_count(&self) -> usize {
        self.features
    }

    pub fn gamma(&self) -> f32 {
        self.gamma
    }

    /// Number of complete calibration rounds: the minimum per-device
    /// sequence count (0 until every device has observed something).
    pub fn sequences_seen(&self) -> u64 {
        self.seen.iter().copied().min().unwrap_or(0)
    }

    pub fn device_sequences_seen(&self, device: usize) -> u64 {
        self.seen[device]
    }

    pub fn min_ema(&self, device: usize, feature: usize) -> f32 {
        self.min_ema[device * self.features + feature]
    }

    pub fn max_ema(&self, device: usize, feature: usize) -> f32 {
        self.max_ema[device * self.features + feature]
    }

    /// Folds one sequence's partial output for `device` into the EMA state.
    ///
    /// Columns run over output features; rows over sequence positions. Any
    /// non-finite activation aborts calibration: silently skipping values
    /// would bias the ranges.
    pub fn observe_sequence(&mut self, device: usize, partial: &Matrix) -> Result<()> {
        if device >= self.devices {
            return Err(Error::InvalidArgument(format!(
                "device {device} out of range [0, {})",
                self.devices
            )));
        }
        if partial.cols() != self.features {
            return Err(Error::ShapeMismatch(format!(
                "sequence has {} feature columns, table expects {}",
                partial.cols(),
                self.features
            )));
        }
        if partial.rows() == 0 {
            return Err(Error::InvalidArgument("sequence must have at least one row".into()));
        }

        let mut col_min = partial.row(0).to_vec();
        let mut col_max = partial.row(0).to_vec();
        for r in 0..partial.rows() {
            for (j, &v) in partial.row(r).iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "activation at row {r}, feature {j} on device {device}"
                    )));
                }
                if v < col_min[j] {
                    col_min[j] = v;
                }
                if v > col_max[j] {
                    col_max[j] = v;
                }
            }
        }

        let base = device * self.features;
        if self.seen[device] == 0 {
            self.min_ema[base..base + self.features].copy_from_slice(&col_min);
            self.max_ema[base..base + self.features].copy_from_slice(&col_max);
        } else {
            let g = self.gamma;
            for j in 0..self.features {
                let m = &mut self.min_ema[base + j];
                *m = (1.0 - g) * *m + g * col_min[j];
                let x = &mut self.max_ema[base + j];
                *x = (1.0 - g) * *x + g * col_max[j];
            }
        }
        self.seen[device] += 1;
        Ok(())
    }

    /// Per-device ranges `R = 2 * max(-m, M)` plus their sum across devices.
    ///
    /// Errors if any device has observed no sequences.
    pub fn compute_ranges(&self) -> Result<RangeVector> {
        for (device, &count) in self.seen.iter().enumerate() {
            if count == 0 {
                return Err(Error::Uncalibrated { device });
            }
        }
        let mut per_device = vec![0.0f32; self.devices * self.features];
        let mut aggregated = vec![0.0f32; self.features];
        for i in 0..self.devices {
            for j in 0..self.features {
                let idx = i * self.features + j;
                let r = 2.0 * f32::max(-self.min_ema[idx], self.max_ema[idx]);
                per_device[idx] = r;
                aggregated[j] += r;
            }
        }
        Ok(RangeVector { devices: self.devices, features: self.features, per_device, aggregated })
    }

    /// Serializes to the TPQT container.
    ///
    /// The format stores a single sequence count, so every device must have
    /// seen the same number of sequences (always true after
    /// [`run_calibration`]).
    pub fn to_tpqt_bytes(&self) -> Result<Vec<u8>> {
        let count = self.seen[0];
        if self.seen.iter().any(|&c| c != count) {
            return Err(Error::InvalidArgument(
                "cannot serialize a table with uneven per-device sequence counts".into(),
            ));
        }
        let mut w = Writer::with_capacity(25 + 8 * self.min_ema.len());
        w.magic(TPQT_MAGIC);
        w.u8(TPQT_VERSION);
        w.u32(u32_of(self.devices, "device count")?);
        w.u32(u32_of(self.features, "feature count")?);
        w.f32(self.gamma);
        w.u64(count);
        w.f32_slice(&self.min_ema);
        w.f32_slice(&self.max_ema);
        Ok(w.into_bytes())
    }

    pub fn from_tpqt_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(TPQT_MAGIC)?;
        let version = r.u8("version")?;
        if version != TPQT_VERSION {
            return Err(Error::Format(format!("unsupported TPQT version {version}")));
        }
        let devices = r.u32("device count")? as usize;
        let features = r.u32("feature count")? as usize;
        if devices == 0 || features == 0 {
            return Err(Error::Format("TPQT table has zero shape".into()));
        }
        let gamma = r.f32("gamma")?;
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Format(format!("TPQT gamma {gamma} out of (0, 1]")));
        }
        let count = r.u64("sequences_seen")?;
        let len = devices
            .checked_mul(features)
            .ok_or_else(|| Error::Format("TPQT shape overflows".into()))?;
        let min_ema = r.f32_vec(len, "min ema")?;
        let max_ema = r.f32_vec(len, "max ema")?;
        r.finish("TPQT table")?;
        for (idx, (&m, &x)) in min_ema.iter().zip(&max_ema).enumerate() {
            if !m.is_finite() || !x.is_finite() {
                return Err(Error::Format(format!("non-finite EMA entry at index {idx}")));
            }
            if count >= 1 && m > x {
                return Err(Error::Format(format!(
                    "min ema {m} exceeds max ema {x} at index {idx}"
                )));
            }
        }
        Ok(CalibrationTable {
            devices,
            features,
            gamma,
            min_ema,
            max_ema,
            seen: vec![count; devices],
        })
    }

    pub fn save_tpqt(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::harness::atomic_write(path.as_ref(), &self.to_tpqt_bytes()?)
    }

    pub fn load_tpqt(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tpqt_bytes(&std::fs::read(path)?)
    }

    /// Human-readable JSON with the same fields as the TPQT container.
    pub fn to_json(&self) -> Result<String> {
        let view = CalibrationTableJson {
            devices: self.devices,
            features: self.features,
            gamma: self.gamma,
            sequences_seen: self.sequences_seen(),
            min_ema: self.min_ema.chunks(self.features).map(<[f32]>::to_vec).collect(),
            max_ema: self.max_ema.chunks(self.features).map(<[f32]>::to_vec).collect(),
        };
        Ok(serde_json::to_string_pretty(&view)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CalibrationTableJson {
    devices: usize,
    features: usize,
    gamma: f32,
    sequences_seen: u64,
    min_ema: Vec<Vec<f32>>,
    max_ema: Vec<Vec<f32>>,
}

impl RangeVector {
    pub fn device_count(&self) -> usize {
        self.devices
    }

    pub fn feature_count(&self) -> usize {
        self.features
    }

    /// `R[device][feature]`.
    pub fn device_range(&self, device: usize, feature: usize) -> f32 {
        self.per_device[device * self.features + feature]
    }

    pub fn device_ranges(&self, device: usize) -> &[f32] {
        &self.per_device[device * self.features..(device + 1) * self.features]
    }

    /// Aggregated range of one feature: the sum of per-device ranges.
    pub fn aggregated(&self, feature: usize) -> f32 {
        self.aggregated[feature]
    }

    pub fn aggregated_all(&self) -> &[f32] {
        &self.aggregated
    }

    /// Builds a range vector directly from per-device ranges (row-major
    /// `devices x features`); mostly useful for tests and tools.
    pub fn from_per_device(devices: usize, features: usize, per_device: Vec<f32>) -> Result<Self> {
        if per_device.len() != devices * features {
            return Err(Error::ShapeMismatch(format!(
                "expected {} range entries, got {}",
                devices * features,
                per_device.len()
            )));
        }
        if per_device.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidArgument("ranges must be finite and >= 0".into()));
        }
        let mut aggregated = vec![0.0f32; features];
        for i in 0..devices {
            for j in 0..features {
                aggregated[j] += per_device[i * features + j];
            }
        }
        Ok(RangeVector { devices, features, per_device, aggregated })
    }
}

/// Runs the full calibration pass: every device observes every sequence in
/// stream order, and the returned table is frozen by convention afterwards.
pub fn run_calibration(
    sharded: &ShardedLayer,
    sequences: &[Matrix],
    gamma: f32,
) -> Result<CalibrationTable> {
    if sequences.is_empty() {
        return Err(Error::InvalidArgument("calibration stream is empty".into()));
    }
    let mut table =
        CalibrationTable::new(sharded.device_count(), sharded.output_features(), gamma)?;
    for shard in sharded.shards() {
        for seq in sequences {
            let partial = partial_forward(shard, seq)?;
            table.observe_sequence(shard.device_id(), &partial)?;
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::{shard_layer, LinearLayer};
    use crate::numeric::{gaussian_matrix, Rng};

    fn table_1x3() -> CalibrationTable {
        CalibrationTable::new(1, 3, DEFAULT_GAMMA).unwrap()
    }

    #[test]
    fn first_sequence_sets_raw_min_max() {
        let mut t = table_1x3();
        let seq = Matrix::from_vec(3, 3, vec![-3.0, 0.0, 5.0, 1.0, 0.0, -5.0, 2.0, 0.0, 0.5])
            .unwrap();
        t.observe_sequence(0, &seq).unwrap();
        assert_eq!(t.min_ema(0, 0), -3.0);
        assert_eq!(t.max_ema(0, 0), 2.0);
        assert_eq!(t.min_ema(0, 1), 0.0);
        assert_eq!(t.max_ema(0, 1), 0.0);
        assert_eq!(t.min_ema(0, 2), -5.0);
        assert_eq!(t.max_ema(0, 2), 5.0);
    }

    #[test]
    fn ema_update_matches_hand_arithmetic() {
        let mut t = CalibrationTable::new(1, 1, 0.01).unwrap();
        t.observe_sequence(0, &Matrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap()).unwrap();
        // min: 0.99*(-1.0) + 0.01*(-3.0) = -1.02
        // max: 0.99*1.0 + 0.01*2.0 = 1.01
        t.observe_sequence(0, &Matrix::from_vec(2, 1, vec![-3.0, 2.0]).unwrap()).unwrap();
        assert!((t.min_ema(0, 0) - (-1.02)).abs() <= 1e-6, "{}", t.min_ema(0, 0));
        assert!((t.max_ema(0, 0) - 1.01).abs() <= 1e-6, "{}", t.max_ema(0, 0));
    }

    #[test]
    fn repeated_sequence_is_a_fixed_point() {
        let mut t = table_1x3();
        let seq =
            Matrix::from_vec(2, 3, vec![-1.0, 2.0, 0.25, 4.0, -2.0, 0.5]).unwrap();
        t.observe_sequence(0, &seq).unwrap();
        let (m, x): (Vec<f32>, Vec<f32>) =
            ((0..3).map(|j| t.min_ema(0, j)).collect(), (0..3).map(|j| t.max_ema(0, j)).collect());
        t.observe_sequence(0, &seq).unwrap();
        for j in 0..3 {
            assert_eq!(t.min_ema(0, j), m[j]);
            assert_eq!(t.max_ema(0, j), x[j]);
        }
    }

    #[test]
    fn nan_activation_aborts() {
        let mut t = table_1x3();
        let seq = Matrix::from_vec(1, 3, vec![1.0, f32::NAN, 0.0]).unwrap();
        match t.observe_sequence(0, &seq) {
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn ranges_from_min_max() {
        let mut t = CalibrationTable::new(1, 3, 0.5).unwrap();
        // Feature 0: m=-2, M=5 -> R=10. Feature 1: constant zero -> R=0.
        // Feature 2: m=1, M=3 (all positive) -> R=6.
        let seq =
            Matrix::from_vec(2, 3, vec![-2.0, 0.0, 1.0, 5.0, 0.0, 3.0]).unwrap();
        t.observe_sequence(0, &seq).unwrap();
        let ranges = t.compute_ranges().unwrap();
        assert_eq!(ranges.device_range(0, 0), 10.0);
        assert_eq!(ranges.device_range(0, 1), 0.0);
        assert_eq!(ranges.device_range(0, 2), 6.0);
    }

    #[test]
    fn aggregated_range_sums_devices() {
        let mut t = CalibrationTable::new(3, 1, 0.5).unwrap();
        for (device, half) in [(0usize, 0.5f32), (1, 1.0), (2, 1.5)] {
            let seq = Matrix::from_vec(1, 1, vec![half]).unwrap();
            t.observe_sequence(device, &seq).unwrap();
        }
        let ranges = t.compute_ranges().unwrap();
        assert_eq!(ranges.device_range(0, 0), 1.0);
        assert_eq!(ranges.device_range(1, 0), 2.0);
        assert_eq!(ranges.device_range(2, 0), 3.0);
        assert_eq!(ranges.aggregated(0), 6.0);
    }

    #[test]
    fn uncalibrated_device_is_an_error() {
        let mut t = CalibrationTable::new(2, 1, 0.5).unwrap();
        t.observe_sequence(0, &Matrix::from_vec(1, 1, vec![1.0]).unwrap()).unwrap();
        match t.compute_ranges() {
            Err(Error::Uncalibrated { device: 1 }) => {}
            other => panic!("expected Uncalibrated, got {other:?}"),
        }
    }

    #[test]
    fn ema_stays_between_previous_value_and_observation() {
        let mut rng = Rng::new(11);
        let mut t = CalibrationTable::new(1, 4, 0.1).unwrap();
        let mut prev: Option<Vec<f32>> = None;
        for _ in 0..50 {
            let seq = gaussian_matrix(&mut rng, 5, 4, &[1.0, 2.0, 0.5, 3.0]);
            let col_min: Vec<f32> = (0..4)
                .map(|j| (0..5).map(|r| seq.get(r, j)).fold(f32::INFINITY, f32::min))
                .collect();
            t.observe_sequence(0, &seq).unwrap();
            if let Some(prev_m) = prev {
                for j in 0..4 {
                    let lo = prev_m[j].min(col_min[j]) - 1e-6;
                    let hi = prev_m[j].max(col_min[j]) + 1e-6;
                    let m = t.min_ema(0, j);
                    assert!(m >= lo && m <= hi, "feature {j}: {m} not in [{lo}, {hi}]");
                }
            }
            prev = Some((0..4).map(|j| t.min_ema(0, j)).collect());
        }
    }

    #[test]
    fn run_calibration_matches_f64_replay() {
        let mut rng = Rng::new(21);
        let d = 16;
        let e = 8;
        let n = 4;
        let w = gaussian_matrix(&mut rng, d, e, &vec![0.5; e]);
        let b = Matrix::zeros(1, e);
        let layer = LinearLayer::new(w, b).unwrap();
        let sharded = shard_layer(&layer, n).unwrap();
        let sequences: Vec<Matrix> =
            (0..40).map(|_| gaussian_matrix(&mut rng, 6, d, &vec![1.0; d])).collect();

        let table = run_calibration(&sharded, &sequences, 0.01).unwrap();
        assert_eq!(table.sequences_seen(), 40);

        // Independent replay in f64 over the same partial outputs.
        for shard in sharded.shards() {
            let mut m = vec![0.0f64; e];
            let mut x = vec![0.0f64; e];
            for (t, seq) in sequences.iter().enumerate() {
                let y = partial_forward(shard, seq).unwrap();
                for j in 0..e {
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for r in 0..y.rows() {
                        lo = lo.min(y.get(r, j) as f64);
                        hi = hi.max(y.get(r, j) as f64);
                    }
                    if t == 0 {
                        m[j] = lo;
                        x[j] = hi;
                    } else {
                        m[j] = 0.99 * m[j] + 0.01 * lo;
                        x[j] = 0.99 * x[j] + 0.01 * hi;
                    }
                }
            }
            for j in 0..e {
                let dm = (table.min_ema(shard.device_id(), j) as f64 - m[j]).abs();
                let dx = (table.max_ema(shard.device_id(), j) as f64 - x[j]).abs();
                assert!(dm <= 1e-5 && dx <= 1e-5, "device {} feature {j}: {dm} {dx}", shard.device_id());
            }
        }
    }

    #[test]
    fn tpqt_round_trip_is_exact() {
        let mut rng = Rng::new(31);
        let mut t = CalibrationTable::new(2, 3, 0.01).unwrap();
        for device in 0..2 {
            for _ in 0..3 {
                let seq = gaussian_matrix(&mut rng, 4, 3, &[1.0, 2.0, 3.0]);
                t.observe_sequence(device, &seq).unwrap();
            }
        }
        let bytes = t.to_tpqt_bytes().unwrap();
        assert_eq!(bytes.len(), 25 + 2 * 4 * 2 * 3);
        let back = CalibrationTable::from_tpqt_bytes(&bytes).unwrap();
        assert_eq!(back, t);
        // Re-serialization is byte-identical.
        assert_eq!(back.to_tpqt_bytes().unwrap(), bytes);
    }

    #[test]
    fn tpqt_rejects_corruption() {
        let t = {
            let mut t = CalibrationTable::new(1, 2, 0.01).unwrap();
            t.observe_sequence(0, &Matrix::from_vec(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
            t
        };
        let bytes = t.to_tpqt_bytes().unwrap();
        assert!(CalibrationTable::from_tpqt_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(CalibrationTable::from_tpqt_bytes(&bad_magic).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(CalibrationTable::from_tpqt_bytes(&trailing).is_err());
    }
}
