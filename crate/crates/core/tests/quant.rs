mod common;

use flownas_core::engine::{BatchTensor, ModelWeights};
use flownas_core::quant::{
    compare_predictions, fold_batch_norm, folded_forward, QuantConfig, QuantError, QuantParams, QuantizedModel,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

#[test]
fn folding_preserves_eval_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let arch = small_arch(&mut rng, 3);
        let w = random_weights(&arch, &mut rng);
        let x = random_batch(&mut rng, 4, arch.input_len);
        let got = folded_forward(&arch, &fold_batch_norm(&w), &x).unwrap();
        for (n, row) in eval_logits(&arch, &w, &x).iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                assert!(close(got.data[n * 3 + k], *v, 1e-5, 1e-9));
            }
        }
    }
}

fn quantized(
    arch: &flownas_core::arch::Architecture,
    w: &ModelWeights,
    bits: u8,
    calib: &BatchTensor,
) -> QuantizedModel {
    let mut q = QuantizedModel::new(
        arch,
        w,
        QuantConfig {
            bits,
            per_channel: false,
        },
    )
    .unwrap();
    q.calibrate(std::slice::from_ref(calib)).unwrap();
    q
}

fn max_abs_diff(a: &BatchTensor, b: &BatchTensor) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn zero_weights_and_input_give_zero_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arch = small_arch(&mut rng, 4);
    let w = ModelWeights::zeros(&arch).unwrap();
    let x = BatchTensor::zeros(3, arch.input_len, 1);
    let q = quantized(&arch, &w, 8, &x);
    assert!(q.forward(&x).unwrap().data.iter().all(|v| *v == 0.0));
    let y = random_batch(&mut rng, 3, arch.input_len);
    assert!(q.forward(&y).unwrap().data.iter().all(|v| *v == 0.0));
}

#[test]
fn sixteen_bit_tracks_real_logits_and_error_shrinks_with_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let arch = small_arch(&mut rng, 3);
        let w = random_weights(&arch, &mut rng);
        let x = random_batch(&mut rng, 8, arch.input_len);
        let calib = x.clone();
        let real = folded_forward(&arch, &fold_batch_norm(&w), &x).unwrap();
        let scale = real.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let errs: Vec<f64> = [4u8, 8, 12, 16]
            .iter()
            .map(|&b| max_abs_diff(&quantized(&arch, &w, b, &calib).forward(&x).unwrap(), &real))
            .collect();
        assert!(errs[3] <= 1e-2 * scale, "16-bit error {}", errs[3]);
        for pair in errs.windows(2) {
            assert!(pair[1] <= pair[0], "{errs:?}");
        }
    }
}

#[test]
fn calibration_ranges_are_the_union_over_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let arch = small_arch(&mut rng, 2);
    let w = random_weights(&arch, &mut rng);
    let a = random_batch(&mut rng, 5, arch.input_len);
    let mut b = random_batch(&mut rng, 7, arch.input_len);
    b.data.iter_mut().for_each(|v| *v *= 3.0);
    let cfg = QuantConfig::default();
    let ranges = |batches: &[BatchTensor]| {
        let mut q = QuantizedModel::new(&arch, &w, cfg).unwrap();
        q.calibrate(batches).unwrap();
        q.activation_ranges().unwrap().to_vec()
    };
    let lo = a.data.iter().chain(&b.data).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.data.iter().chain(&b.data).cloned().fold(f64::NEG_INFINITY, f64::max);
    let both = ranges(&[a.clone(), b.clone()]);
    for ((u, x), y) in both.iter().zip(ranges(&[a])).zip(ranges(&[b])) {
        assert_eq!(u.0, x.0.min(y.0));
        assert_eq!(u.1, x.1.max(y.1));
    }
    assert_eq!(both.len(), arch.blocks.len() + 1);
    assert_eq!(both[0], (lo, hi));
}

#[test]
fn misuse_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let arch = small_arch(&mut rng, 2);
    let w = random_weights(&arch, &mut rng);
    let x = random_batch(&mut rng, 2, arch.input_len);
    let mut q = QuantizedModel::new(&arch, &w, QuantConfig::default()).unwrap();
    assert!(matches!(q.forward(&x), Err(QuantError::NotCalibrated)));
    assert!(matches!(q.calibrate(&[]), Err(QuantError::EmptyCalibration)));
    for bits in [0u8, 1, 17] {
        let e = QuantizedModel::new(
            &arch,
            &w,
            QuantConfig {
                bits,
                per_channel: false,
            },
        );
        assert!(matches!(e, Err(QuantError::InvalidBits(b)) if b == bits));
    }
}

#[test]
fn per_channel_weights_stay_within_half_a_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let arch = small_arch(&mut rng, 3);
    let w = random_weights(&arch, &mut rng);
    for per_channel in [false, true] {
        let q = QuantizedModel::new(&arch, &w, QuantConfig { bits: 8, per_channel }).unwrap();
        let folded = q.folded();
        for ((wt, b), params) in folded.convs.iter().zip(&q.weight_params) {
            let groups = if per_channel { b.len() } else { 1 };
            assert_eq!(params.len(), groups);
            let per = wt.len() / groups;
            for (g, p) in params.iter().enumerate() {
                let max_abs = wt[g * per..(g + 1) * per].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                assert_eq!(p.zero_point, 0);
                assert!(close(p.scale, max_abs / 127.0, 1e-12, 1e-8));
                for v in &wt[g * per..(g + 1) * per] {
                    assert!((p.fake(*v) - v).abs() <= p.scale / 2.0 + 1e-12);
                }
            }
        }
        assert_eq!(q.weight_params.last().unwrap().len(), if per_channel { 3 } else { 1 });
    }
}

#[test]
fn every_eight_bit_code_round_trips() {
    for (lo, hi) in [(-1.0, 1.0), (0.0, 5.0), (-3.0, 0.5), (0.2, 0.9), (-7.0, -2.0)] {
        let p = QuantParams::asymmetric(lo, hi, 8);
        assert_eq!(p.fake(0.0), 0.0);
        for q in -128..=127 {
            assert_eq!(p.quantize(p.dequantize(q)), q);
        }
        let (lo, hi) = (lo.min(0.0), hi.max(0.0));
        for i in 0..=1000 {
            let x = lo + (hi - lo) * i as f64 / 1000.0;
            assert!((p.fake(x) - x).abs() <= p.scale / 2.0 + 1e-12, "{x}");
        }
        assert_eq!(p.quantize(hi + 100.0), 127);
        assert_eq!(p.quantize(lo - 100.0), -128);
    }
    let s = QuantParams::symmetric(2.0, 8);
    assert_eq!((s.quantize(2.0), s.quantize(-2.0), s.zero_point), (127, -127, 0));
}

proptest! {
    #[test]
    fn asymmetric_grids_cover_their_range(lo in -100.0f64..100.0, width in 0.0f64..100.0, bits in 2u8..=16) {
        let hi = lo + width;
        let p = QuantParams::asymmetric(lo, hi, bits);
        prop_assert!(p.scale >= 1e-8);
        prop_assert!(p.zero_point >= QuantParams::qmin(bits) && p.zero_point <= QuantParams::qmax(bits));
        prop_assert_eq!(p.fake(0.0), 0.0);
        for x in [lo.min(0.0), hi.max(0.0), (lo + hi) / 2.0] {
            prop_assert!((p.fake(x) - x).abs() <= p.scale * 0.5 + 1e-9 * x.abs().max(1.0));
        }
    }
}

#[test]
fn report_rows_follow_predictions() {
    let labels = [0, 0, 1, 1, 2, 2];
    let real = [0, 0, 1, 1, 2, 0];
    let quant = [0, 1, 1, 1, 2, 0];
    let r = compare_predictions(&labels, &real, &quant, 3, 8);
    let o = r.overall();
    assert_eq!(o.support, 6);
    assert!((o.acc_real - 5.0 / 6.0).abs() < 1e-12);
    assert!((o.acc_quant - 4.0 / 6.0).abs() < 1e-12);
    assert!((o.delta - 1.0 / 6.0).abs() < 1e-12);
    assert_eq!(r.rows[1].support, 2);
    assert_eq!((r.rows[1].acc_real, r.rows[1].acc_quant), (1.0, 0.5));
    let csv = r.to_csv();
    assert!(csv.starts_with("class,support,acc_real,acc_quant,delta\nall,6,"));
    assert_eq!(csv.lines().count(), 5);
}
