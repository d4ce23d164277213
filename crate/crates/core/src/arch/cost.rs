use std::fmt;

use serde::{Deserialize, Serialize};

use super::{infer_shapes, Architecture, LayerKind, ShapeError, TensorShape};

/// How batch-norm layers contribute to the parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnAccounting {
    /// γ, β and both running statistics: 4 per channel.
    #[default]
    Full,
    /// γ and β only: 2 per channel.
    Trainable,
}

impl BnAccounting {
    fn per_channel(self) -> u64 {
        match self {
            BnAccounting::Full => 4,
            BnAccounting::Trainable => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HwCost {
    pub params: u64,
    pub flops: u64,
    pub max_tensor: u64,
}

/// Exclusive upper bounds; a candidate is admissible only when every metric is strictly below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HwThresholds {
    pub params: u64,
    pub max_tensor: u64,
    pub flops: u64,
}

impl HwThresholds {
    pub const DEFAULT: HwThresholds = HwThresholds {
        params: 120_000,
        max_tensor: 22_000,
        flops: 11_000_000,
    };

    pub fn unbounded() -> Self {
        Self {
            params: u64::MAX,
            max_tensor: u64::MAX,
            flops: u64::MAX,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.params == 0 || self.max_tensor == 0 || self.flops == 0 {
            return Err("thresholds must be positive".into());
        }
        Ok(())
    }
}

impl Default for HwThresholds {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Cost of one row in the per-layer breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub output: TensorShape,
    pub params: u64,
    pub flops: u64,
}

/// Per-layer breakdown: input, then conv/bn/relu/pool per block, then gap, dense, softmax.
pub fn layer_costs(arch: &Architecture, bn: BnAccounting) -> Result<Vec<LayerCost>, ShapeError> {
    let shapes = infer_shapes(arch)?;
    let mut rows = vec![LayerCost {
        name: "input".into(),
        output: TensorShape::new(arch.input_len, arch.input_channels),
        params: 0,
        flops: 0,
    }];
    for layer in &shapes {
        let out = layer.output;
        let out_el = out.elements() as u64;
        match layer.kind {
            LayerKind::Conv { block } => {
                let k = arch.blocks[block].kernel as u64;
                let c_in = layer.input.channels as u64;
                let c_out = out.channels as u64;
                rows.push(LayerCost {
                    name: layer.kind.to_string(),
                    output: out,
                    params: k * c_in * c_out + c_out,
                    flops: 2 * out.length as u64 * c_out * k * c_in,
                });
                rows.push(LayerCost {
                    name: format!("bn{}", block + 1),
                    output: out,
                    params: bn.per_channel() * c_out,
                    flops: 2 * out_el,
                });
                rows.push(LayerCost {
                    name: format!("relu{}", block + 1),
                    output: out,
                    params: 0,
                    flops: out_el,
                });
            }
            LayerKind::Pool { block, .. } => {
                let size = arch.blocks[block].pool.map_or(0, |p| p.size) as u64;
                rows.push(LayerCost {
                    name: layer.kind.to_string(),
                    output: out,
                    params: 0,
                    flops: size * out_el,
                });
            }
            LayerKind::Gap => rows.push(LayerCost {
                name: "gap".into(),
                output: out,
                params: 0,
                flops: layer.input.elements() as u64,
            }),
            LayerKind::Dense => {
                let c_in = layer.input.channels as u64;
                let c_out = out.channels as u64;
                rows.push(LayerCost {
                    name: "dense".into(),
                    output: out,
                    params: c_in * c_out + c_out,
                    flops: 2 * c_in * c_out,
                });
                rows.push(LayerCost {
                    name: "softmax".into(),
                    output: out,
                    params: 0,
                    flops: 5 * c_out,
                });
            }
        }
    }
    Ok(rows)
}

pub fn estimate(arch: &Architecture, bn: BnAccounting) -> Result<HwCost, ShapeError> {
    let rows = layer_costs(arch, bn)?;
    Ok(HwCost {
        params: rows.iter().map(|r| r.params).sum(),
        flops: rows.iter().map(|r| r.flops).sum(),
        max_tensor: rows.iter().map(|r| r.output.elements() as u64).max().unwrap_or(0),
    })
}

pub fn count_params(arch: &Architecture, bn: BnAccounting) -> Result<u64, ShapeError> {
    estimate(arch, bn).map(|c| c.params)
}

pub fn count_flops(arch: &Architecture) -> Result<u64, ShapeError> {
    estimate(arch, BnAccounting::Full).map(|c| c.flops)
}

pub fn max_tensor(arch: &Architecture) -> Result<u64, ShapeError> {
    estimate(arch, BnAccounting::Full).map(|c| c.max_tensor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Params,
    MaxTensor,
    Flops,
    DegenerateShape,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::Params => "params",
            ViolationKind::MaxTensor => "max_tensor",
            ViolationKind::Flops => "flops",
            ViolationKind::DegenerateShape => "degenerate_shape",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Measured value and bound; both zero for a degenerate shape.
    pub value: u64,
    pub bound: u64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ViolationKind::DegenerateShape => f.write_str("degenerate_shape"),
            k => write!(f, "{k} {} >= {}", self.value, self.bound),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admissibility {
    Admissible(HwCost),
    Inadmissible {
        cost: Option<HwCost>,
        violations: Vec<Violation>,
    },
}

impl Admissibility {
    pub fn is_admissible(&self) -> bool {
        matches!(self, Admissibility::Admissible(_))
    }

    pub fn violations(&self) -> &[Violation] {
        match self {
            Admissibility::Admissible(_) => &[],
            Admissibility::Inadmissible { violations, .. } => violations,
        }
    }

    pub fn cost(&self) -> Option<HwCost> {
        match self {
            Admissibility::Admissible(c) => Some(*c),
            Admissibility::Inadmissible { cost, .. } => *cost,
        }
    }
}

/// Strict-inequality check of all three budgets; reports every violated bound.
pub fn check_constraints(arch: &Architecture, th: &HwThresholds, bn: BnAccounting) -> Admissibility {
    let cost = match estimate(arch, bn) {
        Ok(c) => c,
        Err(_) => {
            return Admissibility::Inadmissible {
                cost: None,
                violations: vec![Violation {
                    kind: ViolationKind::DegenerateShape,
                    value: 0,
                    bound: 0,
                }],
            }
        }
    };
    let mut violations = Vec::new();
    for (kind, value, bound) in [
        (ViolationKind::Params, cost.params, th.params),
        (ViolationKind::MaxTensor, cost.max_tensor, th.max_tensor),
        (ViolationKind::Flops, cost.flops, th.flops),
    ] {
        if value >= bound {
            violations.push(Violation { kind, value, bound });
        }
    }
    if violations.is_empty() {
        Admissibility::Admissible(cost)
    } else {
        Admissibility::Inadmissible {
            cost: Some(cost),
            violations,
        }
    }
}
