mod common;

use flownas_core::arch::{
    check_constraints, estimate, infer_shapes, layer_costs, Architecture, BlockSpec, BnAccounting, HwThresholds,
    Padding, PoolKind, TensorShape, ViolationKind,
};
use flownas_core::space::{spawn_admissible, SearchSpaceConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracle_cost;

const INPUT_SIZES: [usize; 8] = [784, 676, 576, 484, 400, 324, 256, 196];
const FLOPS_M: [f64; 8] = [10.08, 8.61, 7.25, 6.07, 4.90, 3.95, 3.01, 2.24];
const TENSOR_K: [f64; 8] = [20.12, 17.29, 14.71, 12.38, 10.19, 8.26, 6.45, 4.90];

fn within(value: u64, target: f64, rel: f64) -> bool {
    (value as f64 - target).abs() <= rel * target
}

#[test]
fn reference_shape_trace_matches_the_published_input_dims() {
    let shapes = infer_shapes(&Architecture::reference(784)).unwrap();
    let inputs: Vec<TensorShape> = shapes.iter().map(|s| s.input).collect();
    let want = [(784, 1), (156, 129), (77, 110), (39, 110), (17, 38), (9, 38), (1, 38)];
    assert_eq!(inputs.len(), want.len());
    for (got, (l, c)) in inputs.iter().zip(want) {
        assert_eq!((got.length, got.channels), (l, c));
    }
    assert_eq!(shapes.last().unwrap().output, TensorShape::new(1, 11));
}

#[test]
fn reference_cost_at_full_length() {
    let arch = Architecture::reference(784);
    let c = estimate(&arch, BnAccounting::Full).unwrap();
    let conv = (7 * 129 + 129) + (4 * 129 * 110 + 110) + (7 * 110 * 38 + 38);
    let bn = 4 * (129 + 110 + 38);
    let dense = 38 * 11 + 11;
    assert_eq!(c.params, (conv + bn + dense) as u64);
    assert!(within(c.params, 88_260.0, 0.01), "params {}", c.params);
    assert_eq!(c.max_tensor, 20_124);
    assert!(within(c.flops, 10.08e6, 0.02), "flops {}", c.flops);
    let t = estimate(&arch, BnAccounting::Trainable).unwrap();
    assert_eq!(c.params - t.params, 2 * (129 + 110 + 38));
}

#[test]
fn reference_cost_scales_with_input_length() {
    let p784 = estimate(&Architecture::reference(784), BnAccounting::Full)
        .unwrap()
        .params;
    for ((len, f), t) in INPUT_SIZES.iter().zip(FLOPS_M).zip(TENSOR_K) {
        let c = estimate(&Architecture::reference(*len), BnAccounting::Full).unwrap();
        assert!(within(c.flops, f * 1e6, 0.02), "L={len}: flops {}", c.flops);
        assert!(
            within(c.max_tensor, t * 1e3, 0.02),
            "L={len}: max_tensor {}",
            c.max_tensor
        );
        assert_eq!(c.params, p784);
    }
    let c196 = estimate(&Architecture::reference(196), BnAccounting::Full).unwrap();
    assert_eq!(c196.max_tensor, 38 * 129);
}

#[test]
fn layer_rows_sum_to_the_estimate() {
    let arch = Architecture::reference(784);
    let rows = layer_costs(&arch, BnAccounting::Full).unwrap();
    let c = estimate(&arch, BnAccounting::Full).unwrap();
    assert_eq!(rows.iter().map(|r| r.params).sum::<u64>(), c.params);
    assert_eq!(rows.iter().map(|r| r.flops).sum::<u64>(), c.flops);
    assert_eq!(rows.first().unwrap().name, "input");
    assert_eq!(rows.last().unwrap().name, "softmax");
}

fn tags(arch: &Architecture, th: &HwThresholds) -> Vec<ViolationKind> {
    let mut v: Vec<_> = check_constraints(arch, th, BnAccounting::Full)
        .violations()
        .iter()
        .map(|v| v.kind)
        .collect();
    v.sort_by_key(|k| *k as u8);
    v
}

fn expected_tags(arch: &Architecture, th: &HwThresholds) -> Vec<ViolationKind> {
    match oracle_cost(arch, 4) {
        None => vec![ViolationKind::DegenerateShape],
        Some(c) => [
            (ViolationKind::Params, c.params >= th.params),
            (ViolationKind::MaxTensor, c.max_tensor >= th.max_tensor),
            (ViolationKind::Flops, c.flops >= th.flops),
        ]
        .into_iter()
        .filter(|(_, bad)| *bad)
        .map(|(k, _)| k)
        .collect(),
    }
}

#[test]
fn reference_is_admissible_and_pushed_variants_are_tagged() {
    let th = HwThresholds::DEFAULT;
    let reference = Architecture::reference(784);
    assert!(check_constraints(&reference, &th, BnAccounting::Full).is_admissible());

    let mut wide = reference.clone();
    wide.blocks[1].kernel = 7;
    assert!(tags(&wide, &th).contains(&ViolationKind::Params));

    let mut long = reference.clone();
    long.blocks[0].stride = 4;
    assert!(tags(&long, &th).contains(&ViolationKind::MaxTensor));

    let mut heavy = reference.clone();
    heavy.blocks[2].filters = 90;
    assert!(tags(&heavy, &th).contains(&ViolationKind::Flops));

    let mut short = reference.clone();
    short.input_len = 20;
    assert_eq!(tags(&short, &th), vec![ViolationKind::DegenerateShape]);

    for v in [&wide, &long, &heavy, &short] {
        assert_eq!(tags(v, &th), expected_tags(v, &th));
    }

    let c = estimate(&reference, BnAccounting::Full).unwrap();
    for (kind, th) in [
        (ViolationKind::Params, HwThresholds { params: c.params, ..th }),
        (
            ViolationKind::MaxTensor,
            HwThresholds {
                max_tensor: c.max_tensor,
                ..th
            },
        ),
        (ViolationKind::Flops, HwThresholds { flops: c.flops, ..th }),
    ] {
        assert_eq!(tags(&reference, &th), vec![kind]);
    }
}

#[test]
fn spawned_children_re_verify_as_admissible() {
    let th = HwThresholds::DEFAULT;
    let cfg = SearchSpaceConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut parent = cfg.initial_architecture(784, 11);
    for _ in 0..20 {
        let out = spawn_admissible(&parent, &cfg, &th, BnAccounting::Full, 10, None, &mut rng).unwrap();
        assert_eq!(out.children.len(), 10);
        assert_eq!(out.attempts, 10 + out.rejected.len());
        for (child, cost) in &out.children {
            let o = oracle_cost(child, 4).unwrap();
            assert_eq!(
                (o.params, o.flops, o.max_tensor),
                (cost.params, cost.flops, cost.max_tensor)
            );
            assert!(o.params < th.params && o.flops < th.flops && o.max_tensor < th.max_tensor);
            assert!(child.depth() >= 1 && child.depth() <= cfg.max_depth);
            assert!(child.blocks.iter().all(|b| cfg.contains(b)));
        }
        for r in &out.rejected {
            assert!(!r.violations.is_empty());
            let mut got: Vec<_> = r.violations.iter().map(|v| v.kind).collect();
            got.sort_by_key(|k| *k as u8);
            assert_eq!(got, expected_tags(&r.arch, &th));
        }
        parent = out.children[rng.gen_range(0..10)].0.clone();
    }
}

fn any_block() -> impl Strategy<Value = BlockSpec> {
    (
        1u32..=140,
        1u32..=7,
        1u32..=6,
        any::<bool>(),
        prop::option::of((any::<bool>(), 2u32..=3, 1u32..=3, any::<bool>())),
    )
        .prop_map(|(f, k, s, same, pool)| {
            let pad = |b| if b { Padding::Same } else { Padding::Valid };
            let b = BlockSpec::conv(f, k, s, pad(same));
            match pool {
                None => b,
                Some((max, size, stride, pp)) => {
                    let kind = if max { PoolKind::Max } else { PoolKind::Avg };
                    b.with_pool(kind, size, stride, pad(pp))
                }
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn estimate_matches_closed_form(
        len in 1usize..1000,
        blocks in prop::collection::vec(any_block(), 0..=5),
        classes in 1usize..20,
    ) {
        let arch = Architecture::new(len, blocks, classes);
        match (estimate(&arch, BnAccounting::Full), oracle_cost(&arch, 4)) {
            (Ok(c), Some(o)) => {
                prop_assert_eq!((c.params, c.flops, c.max_tensor), (o.params, o.flops, o.max_tensor));
                let t = estimate(&arch, BnAccounting::Trainable).unwrap();
                prop_assert_eq!(t.params, oracle_cost(&arch, 2).unwrap().params);
            }
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "estimate {:?} vs oracle {:?}", a, b),
        }
    }

    #[test]
    fn params_do_not_depend_on_input_length(a in 200usize..2000, b in 200usize..2000) {
        let pa = estimate(&Architecture::reference(a), BnAccounting::Full).unwrap().params;
        let pb = estimate(&Architecture::reference(b), BnAccounting::Full).unwrap().params;
        prop_assert_eq!(pa, pb);
    }
}
