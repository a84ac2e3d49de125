//! The compression/decompression pair for sync traffic.
//!
//! Non-selected features are symmetrically quantized to `b in [2, 8]` bits
//! with static per-feature per-device scales derived from calibration;
//! selected outlier features pass through as BF16. Codes travel as unsigned
//! offsets (`code + qmax`) in a little-endian bitstream, feature-ascending
//! within each row, rows padded to byte boundaries.
//!
//! Scales and the selection are exchanged once out of band inside the
//! [`CodecTable`]; messages carry only a 64-bit table checksum so both sides
//! can detect a stale table.

use std::path::Path;

use crate::calibration::RangeVector;
use crate::error::{Error, Result};
use crate::numeric::{Bf16, Matrix, Rng};
use crate::selection::{FeatureSelection, SelectionStrategy};
use crate::wire::{fnv1a64, u32_of, Reader, Writer};

pub const MIN_BIT_WIDTH: u8 = 2;
pub const MAX_BIT_WIDTH: u8 = 8;

const TPQS_MAGIC: &[u8; 4] = b"TPQS";
const TPQS_VERSION: u8 = 1;
const TPQC_MAGIC: &[u8; 4] = b"TPQC";
const TPQC_VERSION: u8 = 1;

/// Serialized message header size in bytes: magic, version, device id,
/// row count, feature count, outlier count, bit width, table checksum.
pub const MESSAGE_HEADER_BYTES: usize = 4 + 1 + 2 + 4 + 4 + 4 + 1 + 8;

/// Largest representable code magnitude for a bit width: `2^(b-1) - 1`.
pub fn qmax_for_bit_width(bit_width: u8) -> i32 {
    (1i32 << (bit_width - 1)) - 1
}

fn check_bit_width(bit_width: u8) -> Result<()> {
    if !(MIN_BIT_WIDTH..=MAX_BIT_WIDTH).contains(&bit_width) {
        return Err(Error::InvalidBitWidth(bit_width));
    }
    Ok(())
}

/// Rounding mode for the quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rounding {
    /// Round half away from zero. The default inference path.
    Nearest,
    /// Subtractive dithered rounding: the encoder adds a uniform dither in
    /// [-0.5, 0.5) to the scaled value before rounding and the decoder
    /// subtracts the same dither, which makes each value's quantization
    /// error exactly uniform on (-scale/2, scale/2] and independent of the
    /// input. Both sides derive the dither stream from this seed, the
    /// device id, and the row index; use a fresh seed per sync.
    Dithered { seed: u64 },
}

/// Frozen per-device per-feature scales plus the outlier selection.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecTable {
    devices: usize,
    features: usize,
    bit_width: u8,
    scales: Vec<f32>,
    selection: FeatureSelection,
    selected: Vec<bool>,
    checksum: u64,
}

impl CodecTable {
    pub fn device_count(&self) -> usize {
        self.devices
    }

    pub fn feature_count(&self) -> usize {
        self.features
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    pub fn qmax(&self) -> i32 {
        qmax_for_bit_width(self.bit_width)
    }

    pub fn selection(&self) -> &FeatureSelection {
        &self.selection
    }

    /// Scale for a (device, feature) pair. Selected features keep a computed
    /// value here but it carries no semantics on the wire.
    pub fn scale(&self, device: usize, feature: usize) -> f32 {
        self.scales[device * self.features + feature]
    }

    pub fn device_scales(&self, device: usize) -> &[f32] {
        &self.scales[device * self.features..(device + 1) * self.features]
    }

    /// FNV-1a digest of the serialized table preamble; stable under
    /// re-serialization and embedded in every message.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    fn preamble_bytes(
        devices: usize,
        features: usize,
        bit_width: u8,
        selection: &FeatureSelection,
        scales: &[f32],
    ) -> Result<Vec<u8>> {
        let mut w = Writer::with_capacity(18 + 4 * selection.k() + 4 * scales.len());
        w.magic(TPQS_MAGIC);
        w.u8(TPQS_VERSION);
        w.u32(u32_of(devices, "device count")?);
        w.u32(u32_of(features, "feature count")?);
        w.u8(bit_width);
        w.u32(u32_of(selection.k(), "selection size")?);
        for &i in selection.indices() {
            w.u32(i);
        }
        w.f32_slice(scales);
        Ok(w.into_bytes())
    }

    /// Serializes to the TPQS container (preamble + FNV-1a checksum).
    pub fn to_tpqs_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = Self::preamble_bytes(
            self.devices,
            self.features,
            self.bit_width,
            &self.selection,
            &self.scales,
        )?;
        bytes.extend_from_slice(&self.checksum.to_le_bytes());
        Ok(bytes)
    }

    /// Parses and validates a TPQS container.
    ///
    /// The container does not record selection provenance; a non-empty
    /// selection loads as `TopRange`, an empty one as `None`.
    pub fn from_tpqs_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(TPQS_MAGIC)?;
        let version = r.u8("version")?;
        if version != TPQS_VERSION {
            return Err(Error::Format(format!("unsupported TPQS version {version}")));
        }
        let devices = r.u32("device count")? as usize;
        let features = r.u32("feature count")? as usize;
        if devices == 0 || features == 0 {
            return Err(Error::Format("TPQS table has zero shape".into()));
        }
        let bit_width = r.u8("bit width")?;
        check_bit_width(bit_width).map_err(|_| {
            Error::Format(format!("TPQS bit width {bit_width} out of range [2, 8]"))
        })?;
        let k = r.u32("selection size")? as usize;
        let mut indices = Vec::with_capacity(k);
        for _ in 0..k {
            indices.push(r.u32("selection index")?);
        }
        let len = devices
            .checked_mul(features)
            .ok_or_else(|| Error::Format("TPQS shape overflows".into()))?;
        let scales = r.f32_vec(len, "scales")?;
        let preamble_len = r.position();
        let checksum = r.u64("checksum")?;
        r.finish("TPQS table")?;

        let computed = fnv1a64(&bytes[..preamble_len]);
        if computed != checksum {
            return Err(Error::Format(format!(
                "TPQS checksum mismatch: stored {checksum:#018x}, computed {computed:#018x}"
            )));
        }
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Format("TPQS scales must be finite and >= 0".into()));
        }
        let selection = FeatureSelection::new(features, indices, SelectionStrategy::TopRange)
            .map_err(|e| Error::Format(format!("TPQS selection invalid: {e}")))?;
        let selected = selection.mask();
        Ok(CodecTable { devices, features, bit_width, scales, selection, selected, checksum })
    }

    pub fn save_tpqs(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::harness::atomic_write(path.as_ref(), &self.to_tpqs_bytes()?)
    }

    pub fn load_tpqs(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tpqs_bytes(&std::fs::read(path)?)
    }
}

/// Builds the frozen codec table: `scale = (R/2) / qmax` per (device,
/// feature), the given outlier selection, and the wire checksum.
pub fn build_codec_table(
    ranges: &RangeVector,
    selection: FeatureSelection,
    bit_width: u8,
) -> Result<CodecTable> {
    check_bit_width(bit_width)?;
    if selection.feature_count() != ranges.feature_count() {
        return Err(Error::ShapeMismatch(format!(
            "selection covers {} features, ranges cover {}",
            selection.feature_count(),
            ranges.feature_count()
        )));
    }
    let devices = ranges.device_count();
    let features = ranges.feature_count();
    let qmax = qmax_for_bit_width(bit_width) as f32;
    let mut scales = Vec::with_capacity(devices * features);
    for device in 0..devices {
        for feature in 0..features {
            scales.push(ranges.device_range(device, feature) * 0.5 / qmax);
        }
    }
    let preamble =
        CodecTable::preamble_bytes(devices, features, bit_width, &selection, &scales)?;
    let checksum = fnv1a64(&preamble);
    let selected = selection.mask();
    Ok(CodecTable { devices, features, bit_width, scales, selection, selected, checksum })
}

/// Symmetric quantization: `clamp(round_half_away_from_zero(x / scale))`.
///
/// A zero scale encodes the degenerate all-zero feature: the code is 0.
/// Out-of-range values clamp to ±qmax (static calibration means inference
/// may exceed the calibrated range).
pub fn quantize_value(x: f32, scale: f32, qmax: i32) -> i32 {
    quantize_scaled(x, scale, qmax, 0.0)
}

/// [`quantize_value`] with a subtractive dither added before rounding.
pub fn quantize_value_dithered(x: f32, scale: f32, qmax: i32, dither: f64) -> i32 {
    quantize_scaled(x, scale, qmax, dither)
}

#[inline]
fn quantize_scaled(x: f32, scale: f32, qmax: i32, dither: f64) -> i32 {
    if scale <= 0.0 {
        return 0;
    }
    // The division happens in f64 so rounding decisions near half-steps are
    // exact at f32 input granularity; f64::round is half-away-from-zero.
    let q = (x as f64 / scale as f64 + dither).round();
    if q.is_nan() {
        return 0;
    }
    (q as i64).clamp(-(qmax as i64), qmax as i64) as i32
}

/// `code * scale`.
pub fn dequantize_value(code: i32, scale: f32) -> f32 {
    code as f32 * scale
}

/// `(code - dither) * scale`, undoing the encoder's dither.
pub fn dequantize_value_dithered(code: i32, scale: f32, dither: f64) -> f32 {
    ((code as f64 - dither) * scale as f64) as f32
}

/// Average communicated payload bits per output feature,
/// `(16k + b(E - k)) / E`. Headers and the one-time static table exchange
/// are excluded.
pub fn bits_per_value(features: usize, k: usize, bit_width: u8) -> f64 {
    assert!(k <= features, "bits_per_value: k={k} > E={features}");
    (16 * k + bit_width as usize * (features - k)) as f64 / features as f64
}

/// Code payload bytes for one row: `ceil(b * (E - k) / 8)`.
pub fn row_code_bytes(features: usize, k: usize, bit_width: u8) -> usize {
    (bit_width as usize * (features - k) + 7) / 8
}

/// Exact serialized message size for a given shape.
pub fn message_byte_len(rows: usize, features: usize, k: usize, bit_width: u8) -> usize {
    MESSAGE_HEADER_BYTES + rows * (2 * k + row_code_bytes(features, k, bit_width))
}

/// One device's compressed partial output: BF16 outliers plus bit-packed
/// low-bit codes. Construct via [`encode`] or [`CompressedMessage::from_bytes`];
/// payload sizes are always consistent with the header.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedMessage {
    device_id: u16,
    rows: u32,
    features: u32,
    outlier_count: u32,
    bit_width: u8,
    table_checksum: u64,
    /// `rows * outlier_count` BF16 values, row-major, selection order.
    outliers: Vec<u8>,
    /// `rows` rows of bit-packed codes, each padded to a byte boundary.
    codes: Vec<u8>,
}

impl CompressedMessage {
    pub fn device_id(&self) -> u16 {
        self.device_id
    }

    pub fn rows(&self) -> usize {
        self.rows as usize
    }

    pub fn feature_count(&self) -> usize {
        self.features as usize
    }

    pub fn outlier_count(&self) -> usize {
        self.outlier_count as usize
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    pub fn table_checksum(&self) -> u64 {
        self.table_checksum
    }

    /// Serialized size in bytes.
    pub fn byte_len(&self) -> usize {
        MESSAGE_HEADER_BYTES + self.outliers.len() + self.codes.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(self.byte_len());
        w.magic(TPQC_MAGIC);
        w.u8(TPQC_VERSION);
        w.u16(self.device_id);
        w.u32(self.rows);
        w.u32(self.features);
        w.u32(self.outlier_count);
        w.u8(self.bit_width);
        w.u64(self.table_checksum);
        w.raw(&self.outliers);
        w.raw(&self.codes);
        w.into_bytes()
    }

    /// Parses a wire message, rejecting truncated or oversized payloads.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(TPQC_MAGIC).map_err(|e| malformed(format!("{e}")))?;
        let version = r.u8("version")?;
        if version != TPQC_VERSION {
            return Err(malformed(format!("unsupported TPQC version {version}")));
        }
        let device_id = r.u16("device id")?;
        let rows = r.u32("row count")?;
        let features = r.u32("feature count")?;
        let outlier_count = r.u32("outlier count")?;
        let bit_width = r.u8("bit width")?;
        check_bit_width(bit_width)
            .map_err(|_| malformed(format!("bit width {bit_width} out of range [2, 8]")))?;
        let table_checksum = r.u64("table checksum")?;
        if outlier_count > features {
            return Err(malformed(format!(
                "outlier count {outlier_count} exceeds feature count {features}"
            )));
        }
        let outlier_bytes = 2 * rows as usize * outlier_count as usize;
        let code_bytes = rows as usize
            * row_code_bytes(features as usize, outlier_count as usize, bit_width);
        let outliers = r
            .bytes(outlier_bytes, "outlier payload")
            .map_err(|e| malformed(format!("{e}")))?
            .to_vec();
        let codes = r
            .bytes(code_bytes, "code payload")
            .map_err(|e| malformed(format!("{e}")))?
            .to_vec();
        r.finish("TPQC message").map_err(|e| malformed(format!("{e}")))?;
        Ok(CompressedMessage {
            device_id,
            rows,
            features,
            outlier_count,
            bit_width,
            table_checksum,
            outliers,
            codes,
        })
    }
}

fn malformed(msg: String) -> Error {
    Error::MalformedMessage(msg)
}

fn dither_rng(seed: u64, device: usize, row: usize) -> Rng {
    Rng::with_stream(seed, ((device as u64) << 32) | row as u64)
}

/// Compresses one device's partial output with deterministic rounding.
pub fn encode(partial: &Matrix, table: &CodecTable, device: usize) -> Result<CompressedMessage> {
    encode_with(partial, table, device, Rounding::Nearest)
}

/// [`encode`] with an explicit rounding mode.
pub fn encode_with(
    partial: &Matrix,
    table: &CodecTable,
    device: usize,
    rounding: Rounding,
) -> Result<CompressedMessage> {
    check_device_shape(partial, table, device)?;
    let features = table.features;
    let k = table.selection.k();
    let qmax = table.qmax();
    let bit_width = table.bit_width;
    let scales = table.device_scales(device);

    let mut outliers = Vec::with_capacity(2 * partial.rows() * k);
    let mut codes = Vec::with_capacity(partial.rows() * row_code_bytes(features, k, bit_width));

    for r in 0..partial.rows() {
        let row = partial.row(r);
        for &j in table.selection.indices() {
            outliers.extend_from_slice(&Bf16::from_f32(row[j as usize]).to_le_bytes());
        }
        let mut packer = BitPacker::new(&mut codes, bit_width);
        match rounding {
            Rounding::Nearest => {
                for (j, &x) in row.iter().enumerate() {
                    if table.selected[j] {
                        continue;
                    }
                    let code = quantize_value(x, scales[j], qmax);
                    packer.push((code + qmax) as u32);
                }
            }
            Rounding::Dithered { seed } => {
                let mut rng = dither_rng(seed, device, r);
                for (j, &x) in row.iter().enumerate() {
                    if table.selected[j] {
                        continue;
                    }
                    let code = quantize_value_dithered(x, scales[j], qmax, rng.unit_dither());
                    packer.push((code + qmax) as u32);
                }
            }
        }
        packer.finish_row();
    }

    Ok(CompressedMessage {
        device_id: device as u16,
        rows: u32_of(partial.rows(), "row count")?,
        features: u32_of(features, "feature count")?,
        outlier_count: u32_of(k, "outlier count")?,
        bit_width,
        table_checksum: table.checksum,
        outliers,
        codes,
    })
}

/// Encodes every feature as BF16 (the 16-bit full-precision transport used
/// by the uncompressed baseline). Decodes through the same [`decode`] path.
pub fn encode_full_bf16(
    partial: &Matrix,
    table: &CodecTable,
    device: usize,
) -> Result<CompressedMessage> {
    check_device_shape(partial, table, device)?;
    let features = table.features;
    let mut outliers = Vec::with_capacity(2 * partial.rows() * features);
    for r in 0..partial.rows() {
        for &x in partial.row(r) {
            outliers.extend_from_slice(&Bf16::from_f32(x).to_le_bytes());
        }
    }
    Ok(CompressedMessage {
        device_id: device as u16,
        rows: u32_of(partial.rows(), "row count")?,
        features: u32_of(features, "feature count")?,
        outlier_count: u32_of(features, "outlier count")?,
        bit_width: table.bit_width,
        table_checksum: table.checksum,
        outliers,
        codes: Vec::new(),
    })
}

fn check_device_shape(partial: &Matrix, table: &CodecTable, device: usize) -> Result<()> {
    if device >= table.devices {
        return Err(Error::InvalidArgument(format!(
            "device {device} out of range [0, {})",
            table.devices
        )));
    }
    if partial.cols() != table.features {
        return Err(Error::ShapeMismatch(format!(
            "partial output has {} features, table expects {}",
            partial.cols(),
            table.features
        )));
    }
    Ok(())
}

/// Decompresses a message with deterministic rounding semantics.
pub fn decode(message: &CompressedMessage, table: &CodecTable) -> Result<Matrix> {
    decode_with(message, table, Rounding::Nearest)
}

/// [`decode`] with an explicit rounding mode; dithered messages must be
/// decoded with the same mode (and seed) they were encoded with.
pub fn decode_with(
    message: &CompressedMessage,
    table: &CodecTable,
    rounding: Rounding,
) -> Result<Matrix> {
    if message.table_checksum != table.checksum {
        return Err(Error::StaleCodecTable {
            message: message.table_checksum,
            table: table.checksum,
        });
    }
    if message.feature_count() != table.features {
        return Err(malformed(format!(
            "message has {} features, table expects {}",
            message.feature_count(),
            table.features
        )));
    }
    if message.bit_width != table.bit_width {
        return Err(malformed(format!(
            "message bit width {} != table bit width {}",
            message.bit_width, table.bit_width
        )));
    }
    let device = message.device_id as usize;
    if device >= table.devices {
        return Err(malformed(format!(
            "device id {device} out of range [0, {})",
            table.devices
        )));
    }
    let features = table.features;
    let full_bf16 = message.outlier_count() == features;
    if !full_bf16 && message.outlier_count() != table.selection.k() {
        return Err(malformed(format!(
            "message carries {} outliers, table selection has {}",
            message.outlier_count(),
            table.selection.k()
        )));
    }
    let rows = message.rows();
    let expected_outliers = 2 * rows * message.outlier_count();
    let expected_codes =
        rows * row_code_bytes(features, message.outlier_count(), message.bit_width);
    if message.outliers.len() != expected_outliers || message.codes.len() != expected_codes {
        return Err(malformed("payload sizes inconsistent with header".into()));
    }

    let mut out = Matrix::zeros(rows, features);
    let qmax = table.qmax();
    let scales = table.device_scales(device);
    let row_bytes = row_code_bytes(features, message.outlier_count(), message.bit_width);

    for r in 0..rows {
        let out_row = out.row_mut(r);
        if full_bf16 {
            for j in 0..features {
                let at = 2 * (r * features + j);
                out_row[j] =
                    Bf16::from_le_bytes([message.outliers[at], message.outliers[at + 1]]).to_f32();
            }
            continue;
        }
        for (s, &j) in table.selection.indices().iter().enumerate() {
            let at = 2 * (r * message.outlier_count() + s);
            out_row[j as usize] =
                Bf16::from_le_bytes([message.outliers[at], message.outliers[at + 1]]).to_f32();
        }
        let mut unpacker = BitUnpacker::new(
            &message.codes[r * row_bytes..(r + 1) * row_bytes],
            message.bit_width,
        );
        match rounding {
            Rounding::Nearest => {
                for (j, out_v) in out_row.iter_mut().enumerate() {
                    if table.selected[j] {
                        continue;
                    }
                    let code = unpacker.next(qmax)?;
                    *out_v = dequantize_value(code, scales[j]);
                }
            }
            Rounding::Dithered { seed } => {
                let mut rng = dither_rng(seed, device, r);
                for (j, out_v) in out_row.iter_mut().enumerate() {
                    if table.selected[j] {
                        continue;
                    }
                    let code = unpacker.next(qmax)?;
                    *out_v = dequantize_value_dithered(code, scales[j], rng.unit_dither());
                }
            }
        }
        unpacker.finish_row()?;
    }
    Ok(out)
}

/// LSB-first little-endian bit packer; rows are padded to byte boundaries
/// with zero bits.
struct BitPacker<'a> {
    out: &'a mut Vec<u8>,
    bit_width: u8,
    acc: u64,
    bits: u32,
}

impl<'a> BitPacker<'a> {
    fn new(out: &'a mut Vec<u8>, bit_width: u8) -> Self {
        BitPacker { out, bit_width, acc: 0, bits: 0 }
    }

    fn push(&mut self, value: u32) {
        debug_assert!(value < (1u32 << self.bit_width));
        self.acc |= (value as u64) << self.bits;
        self.bits += self.bit_width as u32;
        while self.bits >= 8 {
            self.out.push((self.acc & 0xFF) as u8);
            self.acc >>= 8;
            self.bits -= 8;
        }
    }

    fn finish_row(&mut self) {
        if self.bits > 0 {
            self.out.push((self.acc & 0xFF) as u8);
        }
        self.acc = 0;
        self.bits = 0;
    }
}

struct BitUnpacker<'a> {
    bytes: &'a [u8],
    bit_width: u8,
    pos: usize,
    acc: u64,
    bits: u32,
}

impl<'a> BitUnpacker<'a> {
    fn new(bytes: &'a [u8], bit_width: u8) -> Self {
        BitUnpacker { bytes, bit_width, pos: 0, acc: 0, bits: 0 }
    }

    /// Reads one offset-binary code and recenters it to `[-qmax, qmax]`.
    fn next(&mut self, qmax: i32) -> Result<i32> {
        while self.bits < self.bit_width as u32 {
            if self.pos >= self.bytes.len() {
                return Err(malformed("code payload exhausted mid-row".into()));
            }
            self.acc |= (self.bytes[self.pos] as u64) << self.bits;
            self.pos += 1;
            self.bits += 8;
        }
        let mask = (1u64 << self.bit_width) - 1;
        let offset = (self.acc & mask) as i64;
        self.acc >>= self.bit_width;
        self.bits -= self.bit_width as u32;
        if offset > 2 * qmax as i64 {
            return Err(malformed(format!(
                "code offset {offset} exceeds 2*qmax = {}",
                2 * qmax
            )));
        }
        Ok((offset - qmax as i64) as i32)
    }

    /// Verifies padding bits are zero and the row consumed every byte.
    fn finish_row(&mut self) -> Result<()> {
        if self.acc != 0 {
            return Err(malformed("nonzero padding bits in code row".into()));
        }
        if self.pos != self.bytes.len() {
            return Err(malformed("unconsumed bytes in code row".into()));
        }
        Ok(())
    }
}
