//! 1D-CNN genomes, shape inference and the analytic hardware cost model.

mod cost;
mod text;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cost::{
    check_constraints, count_flops, count_params, estimate, layer_costs, max_tensor, Admissibility, BnAccounting,
    HwCost, HwThresholds, LayerCost, Violation, ViolationKind,
};
pub use text::{parse_arch, serialize_arch, ParseError};

pub const MAX_DEPTH: usize = 5;
pub const FILTERS_RANGE: (u32, u32) = (16, 140);
pub const KERNEL_RANGE: (u32, u32) = (3, 7);
pub const STRIDE_RANGE: (u32, u32) = (1, 6);
pub const POOL_SIZE_RANGE: (u32, u32) = (2, 3);
pub const DROPOUT_RANGE: (f64, f64) = (0.1, 0.5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        }
    }

    /// Output length of a sliding window under this padding rule.
    pub fn out_len(self, in_len: usize, window: usize, stride: usize) -> Option<usize> {
        match self {
            Padding::Valid => (in_len >= window).then(|| (in_len - window) / stride + 1),
            Padding::Same => (in_len >= 1).then(|| in_len.div_ceil(stride)),
        }
    }

    /// Zeros added on the (left, right); any odd extra zero goes right.
    pub fn pads(self, in_len: usize, window: usize, stride: usize) -> (usize, usize) {
        match self {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let out = in_len.div_ceil(stride);
                let total = ((out - 1) * stride + window).saturating_sub(in_len);
                (total / 2, total - total / 2)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

impl PoolKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolKind::Max => "max",
            PoolKind::Avg => "avg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub size: u32,
    pub stride: u32,
    pub padding: Padding,
}

/// conv → batch norm → ReLU → optional pool → optional dropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub filters: u32,
    pub kernel: u32,
    pub stride: u32,
    pub padding: Padding,
    pub pool: Option<PoolSpec>,
    /// 0 disables the dropout layer.
    pub dropout: f64,
}

impl BlockSpec {
    pub fn conv(filters: u32, kernel: u32, stride: u32, padding: Padding) -> Self {
        Self {
            filters,
            kernel,
            stride,
            padding,
            pool: None,
            dropout: 0.0,
        }
    }

    pub fn with_pool(mut self, kind: PoolKind, size: u32, stride: u32, padding: Padding) -> Self {
        self.pool = Some(PoolSpec {
            kind,
            size,
            stride,
            padding,
        });
        self
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    /// Checks the search-space bounds on every field.
    pub fn validate(&self) -> Result<(), String> {
        let in_range = |v: u32, (lo, hi): (u32, u32)| (lo..=hi).contains(&v);
        if !in_range(self.filters, FILTERS_RANGE) {
            return Err(format!("filters {} outside {:?}", self.filters, FILTERS_RANGE));
        }
        if !in_range(self.kernel, KERNEL_RANGE) {
            return Err(format!("kernel {} outside {:?}", self.kernel, KERNEL_RANGE));
        }
        if !in_range(self.stride, STRIDE_RANGE) {
            return Err(format!("stride {} outside {:?}", self.stride, STRIDE_RANGE));
        }
        if let Some(p) = &self.pool {
            if !in_range(p.size, POOL_SIZE_RANGE) {
                return Err(format!("pool_size {} outside {:?}", p.size, POOL_SIZE_RANGE));
            }
            if p.stride == 0 {
                return Err("pool_stride must be positive".into());
            }
        }
        if !valid_dropout(self.dropout) {
            return Err(format!("dropout {} not in {{0}} or [0.1, 0.5]", self.dropout));
        }
        Ok(())
    }

    /// Positivity checks only; what shape inference needs to be well defined.
    pub fn validate_structural(&self) -> Result<(), String> {
        if self.filters == 0 || self.kernel == 0 || self.stride == 0 {
            return Err("filters, kernel and stride must be positive".into());
        }
        if let Some(p) = &self.pool {
            if p.size == 0 || p.stride == 0 {
                return Err("pool_size and pool_stride must be positive".into());
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

pub fn valid_dropout(rate: f64) -> bool {
    rate == 0.0 || (DROPOUT_RANGE.0..=DROPOUT_RANGE.1).contains(&rate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_len: usize,
    pub input_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub n_classes: usize,
}

impl Architecture {
    pub fn new(input_len: usize, blocks: Vec<BlockSpec>, n_classes: usize) -> Self {
        Self {
            input_len,
            input_channels: 1,
            blocks,
            n_classes,
        }
    }

    /// The best architecture reported for the 11-class VPN/non-VPN task.
    pub fn reference(input_len: usize) -> Self {
        Self::new(
            input_len,
            vec![
                BlockSpec::conv(129, 7, 5, Padding::Valid),
                BlockSpec::conv(110, 4, 2, Padding::Valid).with_pool(PoolKind::Avg, 3, 2, Padding::Same),
                BlockSpec::conv(38, 7, 2, Padding::Valid).with_pool(PoolKind::Max, 2, 2, Padding::Same),
            ],
            11,
        )
    }

    pub fn with_input_len(&self, input_len: usize) -> Self {
        Self {
            input_len,
            ..self.clone()
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub length: usize,
    pub channels: usize,
}

impl TensorShape {
    pub fn new(length: usize, channels: usize) -> Self {
        Self { length, channels }
    }

    pub fn elements(&self) -> usize {
        self.length * self.channels
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.length == 1 {
            write!(f, "{}", self.channels)
        } else {
            write!(f, "{} x {}", self.length, self.channels)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv { block: usize },
    Pool { block: usize, kind: PoolKind },
    Gap,
    Dense,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerKind::Conv { block } => write!(f, "conv{}", block + 1),
            LayerKind::Pool { block, kind } => write!(f, "{}pool{}", kind.as_str(), block + 1),
            LayerKind::Gap => f.write_str("gap"),
            LayerKind::Dense => f.write_str("dense"),
        }
    }
}

/// One shape-changing layer with its input and output shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub input: TensorShape,
    pub output: TensorShape,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShapeError {
    #[error("degenerate shape at layer {layer} ({kind}): input length {in_len} too short")]
    DegenerateShape { layer: usize, kind: String, in_len: usize },
    #[error("invalid architecture: {0}")]
    Invalid(String),
}

/// Shape trace over conv, pool, GAP and dense layers (batch norm, ReLU and
/// dropout keep their input shape and are omitted).
pub fn infer_shapes(arch: &Architecture) -> Result<Vec<LayerShape>, ShapeError> {
    if arch.input_len == 0 || arch.input_channels == 0 || arch.n_classes == 0 {
        return Err(ShapeError::Invalid(
            "input_len, input_channels and n_classes must be positive".into(),
        ));
    }
    let mut layers = Vec::with_capacity(arch.blocks.len() * 2 + 2);
    let mut cur = TensorShape::new(arch.input_len, arch.input_channels);
    for (b, block) in arch.blocks.iter().enumerate() {
        block
            .validate_structural()
            .map_err(|e| ShapeError::Invalid(format!("block {}: {e}", b + 1)))?;
        let kind = LayerKind::Conv { block: b };
        let len = block
            .padding
            .out_len(cur.length, block.kernel as usize, block.stride as usize)
            .ok_or_else(|| ShapeError::DegenerateShape {
                layer: layers.len() + 1,
                kind: kind.to_string(),
                in_len: cur.length,
            })?;
        let out = TensorShape::new(len, block.filters as usize);
        layers.push(LayerShape {
            kind,
            input: cur,
            output: out,
        });
        cur = out;
        if let Some(pool) = &block.pool {
            let kind = LayerKind::Pool {
                block: b,
                kind: pool.kind,
            };
            let len = pool
                .padding
                .out_len(cur.length, pool.size as usize, pool.stride as usize)
                .ok_or_else(|| ShapeError::DegenerateShape {
                    layer: layers.len() + 1,
                    kind: kind.to_string(),
                    in_len: cur.length,
                })?;
            let out = TensorShape::new(len, cur.channels);
            layers.push(LayerShape {
                kind,
                input: cur,
                output: out,
            });
            cur = out;
        }
    }
    let gap = TensorShape::new(1, cur.channels);
    layers.push(LayerShape {
        kind: LayerKind::Gap,
        input: cur,
        output: gap,
    });
    layers.push(LayerShape {
        kind: LayerKind::Dense,
        input: gap,
        output: TensorShape::new(1, arch.n_classes),
    });
    Ok(layers)
}
