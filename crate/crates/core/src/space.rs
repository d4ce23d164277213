//! Search-space ranges, random blocks and the mutation operator.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{
    check_constraints, Admissibility, Architecture, BlockSpec, BnAccounting, HwCost, HwThresholds, Padding, PoolKind,
    PoolSpec, Violation,
};

/// Re-draws allowed before a mutation falls back to a parameter modification.
pub const MAX_REDRAWS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpaceConfig {
    pub filters_range: (u32, u32),
    pub kernel_range: (u32, u32),
    pub stride_range: (u32, u32),
    pub dropout_range: (f64, f64),
    /// Probability that a freshly drawn block carries a dropout layer.
    pub dropout_probability: f64,
    pub pool_sizes: Vec<u32>,
    /// Candidate pool strides for parameter modification; new pools use stride = size.
    pub pool_strides: Vec<u32>,
    /// `None` means no pooling layer.
    pub pool_kinds: Vec<Option<PoolKind>>,
    pub paddings: Vec<Padding>,
    pub max_depth: usize,
    pub mutations_per_child: usize,
}

impl Default for SearchSpaceConfig {
    fn default() -> Self {
        Self {
            filters_range: (16, 140),
            kernel_range: (3, 7),
            stride_range: (1, 6),
            dropout_range: (0.1, 0.5),
            dropout_probability: 0.5,
            pool_sizes: vec![2, 3],
            pool_strides: vec![2, 3],
            pool_kinds: vec![Some(PoolKind::Max), Some(PoolKind::Avg), None],
            paddings: vec![Padding::Valid, Padding::Same],
            max_depth: crate::arch::MAX_DEPTH,
            mutations_per_child: 2,
        }
    }
}

impl SearchSpaceConfig {
    pub fn validate(&self) -> Result<(), String> {
        let ordered = |(lo, hi): (u32, u32), name: &str| {
            if lo > hi || lo == 0 {
                Err(format!("{name} range [{lo}, {hi}] is empty or non-positive"))
            } else {
                Ok(())
            }
        };
        ordered(self.filters_range, "filters")?;
        ordered(self.kernel_range, "kernel")?;
        ordered(self.stride_range, "stride")?;
        let (dlo, dhi) = self.dropout_range;
        if !(0.0..1.0).contains(&dlo) || !(0.0..1.0).contains(&dhi) || dlo > dhi {
            return Err(format!("dropout range [{dlo}, {dhi}] invalid"));
        }
        if !(0.0..=1.0).contains(&self.dropout_probability) {
            return Err("dropout_probability must be in [0, 1]".into());
        }
        if self.pool_sizes.is_empty() || self.pool_sizes.contains(&0) {
            return Err("pool_sizes must be non-empty and positive".into());
        }
        if self.pool_strides.is_empty() || self.pool_strides.contains(&0) {
            return Err("pool_strides must be non-empty and positive".into());
        }
        if self.pool_kinds.is_empty() || self.paddings.is_empty() {
            return Err("pool_kinds and paddings must be non-empty".into());
        }
        if self.max_depth == 0 {
            return Err("max_depth must be at least 1".into());
        }
        Ok(())
    }

    /// Whether `block` lies inside this space.
    pub fn contains(&self, block: &BlockSpec) -> bool {
        let within = |v: u32, (lo, hi): (u32, u32)| (lo..=hi).contains(&v);
        let pool_ok = match &block.pool {
            None => self.pool_kinds.contains(&None),
            Some(p) => {
                self.pool_kinds.contains(&Some(p.kind))
                    && self.pool_sizes.contains(&p.size)
                    && (self.pool_strides.contains(&p.stride) || p.stride == p.size)
                    && self.paddings.contains(&p.padding)
            }
        };
        let dropout_ok = block.dropout == 0.0 || (self.dropout_range.0..=self.dropout_range.1).contains(&block.dropout);
        within(block.filters, self.filters_range)
            && within(block.kernel, self.kernel_range)
            && within(block.stride, self.stride_range)
            && self.paddings.contains(&block.padding)
            && pool_ok
            && dropout_ok
    }

    /// The default initial parent: one 32-filter, kernel 5, stride 2 valid block.
    pub fn initial_architecture(&self, input_len: usize, n_classes: usize) -> Architecture {
        Architecture::new(input_len, vec![BlockSpec::conv(32, 5, 2, Padding::Valid)], n_classes)
    }
}

fn pick<T: Clone, R: Rng + ?Sized>(rng: &mut R, items: &[T]) -> T {
    items[rng.gen_range(0..items.len())].clone()
}

fn draw_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (u32, u32)) -> u32 {
    rng.gen_range(lo..=hi)
}

fn draw_dropout<R: Rng + ?Sized>(rng: &mut R, cfg: &SearchSpaceConfig) -> f64 {
    if rng.gen_bool(cfg.dropout_probability) {
        let (lo, hi) = cfg.dropout_range;
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    } else {
        0.0
    }
}

fn draw_pool<R: Rng + ?Sized>(rng: &mut R, cfg: &SearchSpaceConfig) -> Option<PoolSpec> {
    pick(rng, &cfg.pool_kinds).map(|kind| {
        let size = pick(rng, &cfg.pool_sizes);
        PoolSpec {
            kind,
            size,
            stride: size,
            padding: pick(rng, &cfg.paddings),
        }
    })
}

/// A block with every field drawn uniformly from its range.
pub fn random_block<R: Rng + ?Sized>(cfg: &SearchSpaceConfig, rng: &mut R) -> BlockSpec {
    let filters = draw_range(rng, cfg.filters_range);
    let kernel = draw_range(rng, cfg.kernel_range);
    let stride = draw_range(rng, cfg.stride_range);
    let padding = pick(rng, &cfg.paddings);
    let pool = draw_pool(rng, cfg);
    let dropout = draw_dropout(rng, cfg);
    BlockSpec {
        filters,
        kernel,
        stride,
        padding,
        pool,
        dropout,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockField {
    Filters,
    Kernel,
    Stride,
    Padding,
    PoolKind,
    PoolSize,
    PoolStride,
    PoolPadding,
    Dropout,
}

impl BlockField {
    fn applicable(block: &BlockSpec) -> &'static [BlockField] {
        use BlockField::*;
        if block.pool.is_some() {
            &[
                Filters,
                Kernel,
                Stride,
                Padding,
                PoolKind,
                PoolSize,
                PoolStride,
                PoolPadding,
                Dropout,
            ]
        } else {
            &[Filters, Kernel, Stride, Padding, PoolKind, Dropout]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    InsertBlock {
        position: usize,
        block: BlockSpec,
    },
    RemoveBlock {
        position: usize,
    },
    ModifyParam {
        position: usize,
        field: BlockField,
        block: BlockSpec,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Insert,
    Remove,
    Modify,
}

fn feasible(kind: Kind, depth: usize, max_depth: usize) -> bool {
    match kind {
        Kind::Insert => depth < max_depth,
        Kind::Remove => depth > 1,
        Kind::Modify => depth >= 1,
    }
}

fn modify_field<R: Rng + ?Sized>(block: &mut BlockSpec, field: BlockField, cfg: &SearchSpaceConfig, rng: &mut R) {
    match field {
        BlockField::Filters => block.filters = draw_range(rng, cfg.filters_range),
        BlockField::Kernel => block.kernel = draw_range(rng, cfg.kernel_range),
        BlockField::Stride => block.stride = draw_range(rng, cfg.stride_range),
        BlockField::Padding => block.padding = pick(rng, &cfg.paddings),
        BlockField::PoolKind => match pick(rng, &cfg.pool_kinds) {
            None => block.pool = None,
            Some(kind) => match block.pool.as_mut() {
                Some(p) => p.kind = kind,
                None => {
                    let size = pick(rng, &cfg.pool_sizes);
                    block.pool = Some(PoolSpec {
                        kind,
                        size,
                        stride: size,
                        padding: pick(rng, &cfg.paddings),
                    });
                }
            },
        },
        BlockField::PoolSize => {
            if let Some(p) = block.pool.as_mut() {
                p.size = pick(rng, &cfg.pool_sizes);
            }
        }
        BlockField::PoolStride => {
            if let Some(p) = block.pool.as_mut() {
                p.stride = pick(rng, &cfg.pool_strides);
            }
        }
        BlockField::PoolPadding => {
            if let Some(p) = block.pool.as_mut() {
                p.padding = pick(rng, &cfg.paddings);
            }
        }
        BlockField::Dropout => block.dropout = draw_dropout(rng, cfg),
    }
}

fn apply_one<R: Rng + ?Sized>(arch: &mut Architecture, cfg: &SearchSpaceConfig, rng: &mut R) -> Mutation {
    let depth = arch.blocks.len();
    let mut kind = None;
    for _ in 0..=MAX_REDRAWS {
        let k = pick(rng, &[Kind::Insert, Kind::Remove, Kind::Modify]);
        if feasible(k, depth, cfg.max_depth) {
            kind = Some(k);
            break;
        }
    }
    let kind = kind.unwrap_or(if depth == 0 { Kind::Insert } else { Kind::Modify });
    match kind {
        Kind::Insert => {
            let position = rng.gen_range(0..=depth);
            let block = random_block(cfg, rng);
            arch.blocks.insert(position, block.clone());
            Mutation::InsertBlock { position, block }
        }
        Kind::Remove => {
            let position = rng.gen_range(0..depth);
            arch.blocks.remove(position);
            Mutation::RemoveBlock { position }
        }
        Kind::Modify => {
            let position = rng.gen_range(0..depth);
            let block = &mut arch.blocks[position];
            let field = pick(rng, BlockField::applicable(block));
            modify_field(block, field, cfg, rng);
            Mutation::ModifyParam {
                position,
                field,
                block: block.clone(),
            }
        }
    }
}

/// Child of `parent` after `mutations_per_child` sequential mutations, with the mutation log.
pub fn mutate_traced<R: Rng + ?Sized>(
    parent: &Architecture,
    cfg: &SearchSpaceConfig,
    rng: &mut R,
) -> (Architecture, Vec<Mutation>) {
    let mut child = parent.clone();
    let log = (0..cfg.mutations_per_child)
        .map(|_| apply_one(&mut child, cfg, rng))
        .collect();
    (child, log)
}

pub fn mutate<R: Rng + ?Sized>(parent: &Architecture, cfg: &SearchSpaceConfig, rng: &mut R) -> Architecture {
    mutate_traced(parent, cfg, rng).0
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SpaceError {
    #[error("spawn budget exhausted: {admitted}/{wanted} admissible children after {attempts} attempts")]
    BudgetExhausted {
        attempts: usize,
        admitted: usize,
        wanted: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub arch: Architecture,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spawned {
    pub children: Vec<(Architecture, HwCost)>,
    pub attempts: usize,
    pub rejected: Vec<Rejection>,
}

/// Mutates `parent` until `n` children pass the hardware gate.
///
/// `cap` bounds total attempts; `None` uses `1000 * n`.
pub fn spawn_admissible<R: Rng + ?Sized>(
    parent: &Architecture,
    cfg: &SearchSpaceConfig,
    th: &HwThresholds,
    bn: BnAccounting,
    n: usize,
    cap: Option<usize>,
    rng: &mut R,
) -> Result<Spawned, SpaceError> {
    let cap = cap.unwrap_or(1000 * n.max(1));
    let mut children = Vec::with_capacity(n);
    let mut rejected = Vec::new();
    let mut attempts = 0;
    while children.len() < n {
        if attempts >= cap {
            return Err(SpaceError::BudgetExhausted {
                attempts,
                admitted: children.len(),
                wanted: n,
            });
        }
        attempts += 1;
        let child = mutate(parent, cfg, rng);
        match check_constraints(&child, th, bn) {
            Admissibility::Admissible(cost) => children.push((child, cost)),
            Admissibility::Inadmissible { violations, .. } => rejected.push(Rejection {
                arch: child,
                violations,
            }),
        }
    }
    Ok(Spawned {
        children,
        attempts,
        rejected,
    })
}
