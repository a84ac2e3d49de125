//! Row-block sharding of a pre-sync linear layer `f(x) = xW + b` across N
//! simulated devices.
//!
//! Shard `i` holds rows `[i*D/N, (i+1)*D/N)` of `W` and consumes the matching
//! column slice of the input; the sum of all partial outputs plus the bias
//! reproduces the single-device layer up to f32 reassociation.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numeric::{matmul, matmul_col_range, Matrix};

/// A dense linear layer `f(x) = xW + b` with `W: D x E` and `b: 1 x E`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    weight: Matrix,
    bias: Matrix,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if weight.rows() == 0 || weight.cols() == 0 {
            return Err(Error::InvalidArgument("layer must have nonzero shape".into()));
        }
        if bias.rows() != 1 || bias.cols() != weight.cols() {
            return Err(Error::ShapeMismatch(format!(
                "bias must be 1x{}, got {}x{}",
                weight.cols(),
                bias.rows(),
                bias.cols()
            )));
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite("layer parameters".into()));
        }
        Ok(LinearLayer { weight, bias })
    }

    /// Input feature count D.
    pub fn input_features(&self) -> usize {
        self.weight.rows()
    }

    /// Output feature count E.
    pub fn output_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }
}

/// One device's slice of a sharded layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceShard {
    device_id: usize,
    weight: Matrix,
    input_range: Range<usize>,
}

impl DeviceShard {
    pub fn device_id(&self) -> usize {
        self.device_id
    }

    /// This shard's `(D/N) x E` weight block.
    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    /// Half-open column range of the full input this shard consumes.
    pub fn input_range(&self) -> Range<usize> {
        self.input_range.clone()
    }
}

/// A linear layer partitioned across `N` devices.
///
/// The bias is not assigned to any device; it is added exactly once after
/// the reduction, on the receiving side.
#[derive(Clone, Debug, PartialEq)]
pub struct ShardedLayer {
    shards: Vec<DeviceShard>,
    bias: Matrix,
    input_features: usize,
}

impl ShardedLayer {
    pub fn device_count(&self) -> usize {
        self.shards.len()
    }

    pub fn input_features(&self) -> usize {
        self.input_features
    }

    pub fn output_features(&self) -> usize {
        self.bias.cols()
    }

    pub fn shards(&self) -> &[DeviceShard] {
        &self.shards
    }

    pub fn shard(&self, device: usize) -> &DeviceShard {
        &self.shards[device]
    }

    pub fn bias(&self) -> &Matrix {
        &self.bias
    }
}

/// Splits a layer into `devices` contiguous row blocks.
///
/// The device count must divide D exactly; no padding is performed.
pub fn shard_layer(layer: &LinearLayer, devices: usize) -> Result<ShardedLayer> {
    let d = layer.input_features();
    if devices == 0 || d % devices != 0 {
        return Err(Error::ShardCount { devices, input_features: d });
    }
    let rows_per_shard = d / devices;
    let shards = (0..devices)
        .map(|i| {
            let range = i * rows_per_shard..(i + 1) * rows_per_shard;
            Ok(DeviceShard {
                device_id: i,
                weight: layer.weight().row_block(range.clone())?,
                input_range: range,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShardedLayer { shards, bias: layer.bias().clone(), input_features: d })
}

/// One device's partial output `X[:, slice] * W_i`; no bias.
pub fn partial_forward(shard: &DeviceShard, x: &Matrix) -> Result<Matrix> {
    if shard.input_range.end > x.cols() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, shard {} consumes {:?}",
            x.cols(),
            shard.device_id,
            shard.input_range
        )));
    }
    matmul_col_range(x, shard.input_range(), &shard.weight)
}

/// Single-device ground truth `xW + b`; the oracle for all end-to-end
/// error metrics.
pub fn reference_forward(layer: &LinearLayer, x: &Matrix) -> Result<Matrix> {
    let mut out = matmul(x, layer.weight())?;
    let bias = layer.bias();
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(bias.row(0)) {
            *o += *b;
        }
    }
    Ok(out)
}
