//! Plain-text and CSV renderings of the hardware cost of one architecture.

use std::fmt::Write;

use serde::Serialize;

use crate::arch::{
    layer_costs, Architecture, BnAccounting, HwCost, HwThresholds, LayerCost, ShapeError, ViolationKind,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConstraintCheck {
    pub metric: ViolationKind,
    pub value: u64,
    pub bound: u64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimateReport {
    pub input_len: usize,
    pub layers: Vec<LayerCost>,
    pub cost: HwCost,
    pub checks: Vec<ConstraintCheck>,
}

impl EstimateReport {
    pub fn new(arch: &Architecture, th: &HwThresholds, bn: BnAccounting) -> Result<Self, ShapeError> {
        let layers = layer_costs(arch, bn)?;
        let cost = HwCost {
            params: layers.iter().map(|l| l.params).sum(),
            flops: layers.iter().map(|l| l.flops).sum(),
            max_tensor: layers.iter().map(|l| l.output.elements() as u64).max().unwrap_or(0),
        };
        let checks = [
            (ViolationKind::Params, cost.params, th.params),
            (ViolationKind::MaxTensor, cost.max_tensor, th.max_tensor),
            (ViolationKind::Flops, cost.flops, th.flops),
        ]
        .into_iter()
        .map(|(metric, value, bound)| ConstraintCheck {
            metric,
            value,
            bound,
            pass: value < bound,
        })
        .collect();
        Ok(Self {
            input_len: arch.input_len,
            layers,
            cost,
            checks,
        })
    }

    pub fn admissible(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input length {}", self.input_len);
        let _ = writeln!(s, "{:<12} {:>12} {:>10} {:>12}", "layer", "output", "params", "flops");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<12} {:>12} {:>10} {:>12}",
                l.name,
                l.output.to_string(),
                l.params,
                l.flops
            );
        }
        let _ = writeln!(
            s,
            "total: params {} flops {} max_tensor {}",
            self.cost.params, self.cost.flops, self.cost.max_tensor
        );
        for c in &self.checks {
            let verdict = if c.pass { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{verdict} {} {} < {}", c.metric, c.value, c.bound);
        }
        s
    }

    /// Per-layer rows, then a `total` row and one row per constraint.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,name,output_len,output_channels,params,flops,bound,pass\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "layer,{},{},{},{},{},,",
                l.name, l.output.length, l.output.channels, l.params, l.flops
            );
        }
        let _ = writeln!(
            s,
            "total,all,,,{},{},,{}",
            self.cost.params,
            self.cost.flops,
            self.admissible()
        );
        for c in &self.checks {
            let _ = writeln!(s, "constraint,{},,,{},,{},{}", c.metric, c.value, c.bound, c.pass);
        }
        s
    }
}
