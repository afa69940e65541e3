use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tripf_core::loss::*;
use tripf_core::{Tape, Tensor};

const N: usize = 3;
const S: usize = 8;

/// Batch of three 8×8 masks: a square liver with a 2×2 tumor, a liver
/// without tumor, and an empty slice.
fn masks() -> (Tensor, Tensor) {
    let mut liver = Tensor::zeros([N, 1, S, S]);
    let mut tumor = Tensor::zeros([N, 1, S, S]);
    for y in 2..6 {
        for x in 1..7 {
            liver.data_mut()[y * S + x] = 1.0;
            liver.data_mut()[S * S + y * S + x] = 1.0;
        }
    }
    for y in 3..5 {
        for x in 3..5 {
            tumor.data_mut()[y * S + x] = 1.0;
        }
    }
    (liver, tumor)
}

fn random(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([N, 1, S, S], |_| rng.random_range(0.0..1.0))
}

fn eval(f: impl FnOnce(&mut Tape, tripf_core::Var) -> tripf_core::Result<tripf_core::Var>, pred: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone(), true);
    let l = f(&mut tape, p).unwrap();
    tape.value(l).item()
}

/// Region membership of one pixel: 0 background, 1 parenchyma, 2 tumor.
fn region(liver: &Tensor, tumor: &Tensor, i: usize) -> u8 {
    if tumor.data()[i] == 1.0 {
        2
    } else if liver.data()[i] == 1.0 {
        1
    } else {
        0
    }
}

fn loop_mean(v: &Tensor, liver: &Tensor, tumor: &Tensor, img: usize, r: u8) -> Option<f64> {
    let (mut s, mut c) = (0.0, 0.0);
    for j in 0..S * S {
        let i = img * S * S + j;
        if region(liver, tumor, i) == r {
            s += v.data()[i];
            c += 1.0;
        }
    }
    (c > 0.0).then(|| s / c)
}

fn abs_diff(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.shape().to_vec(), |i| (a.data()[i] - b.data()[i]).abs())
}

struct Oracle {
    back: f64,
    liver: f64,
    tumor: f64,
}

fn oracle(pred: &Tensor, target: &Tensor, t1: &Tensor, w: &RgsfWeights) -> Oracle {
    let (liver, tumor) = masks();
    let err = abs_diff(pred, target);
    let (mut b, mut l, mut t) = (0.0, 0.0, 0.0);
    for img in 0..N {
        b += loop_mean(&err, &liver, &tumor, img, 0).unwrap_or(0.0);
        if let Some(l1) = loop_mean(&err, &liver, &tumor, img, 1) {
            let base = loop_mean(t1, &liver, &tumor, img, 1).unwrap();
            let mp = loop_mean(pred, &liver, &tumor, img, 1).unwrap();
            l += l1 + (base + w.delta_liver - mp).max(0.0);
        }
        if let Some(l1) = loop_mean(&err, &liver, &tumor, img, 2) {
            let c_pred = loop_mean(pred, &liver, &tumor, img, 1).unwrap()
                - loop_mean(pred, &liver, &tumor, img, 2).unwrap();
            let c_real = loop_mean(target, &liver, &tumor, img, 1).unwrap()
                - loop_mean(target, &liver, &tumor, img, 2).unwrap();
            t += l1 + w.delta_tumor_contrast * (c_pred - c_real).abs();
        }
    }
    let n = N as f64;
    Oracle {
        back: b / n,
        liver: l / n,
        tumor: t / n,
    }
}

fn terms(pred: &Tensor, target: &Tensor, t1: &Tensor, w: &RgsfWeights) -> (f64, f64, f64, f64) {
    let (liver, tumor) = masks();
    let r = RegionMasks::new(&liver, &tumor).unwrap();
    (
        eval(|t, p| l_back(t, p, target, &r), pred),
        eval(|t, p| l_liver(t, p, target, t1, &r, w.delta_liver), pred),
        eval(|t, p| l_tumor(t, p, target, &r, w.delta_tumor_contrast), pred),
        eval(|t, p| rgsf(t, p, target, t1, &r, w), pred),
    )
}

#[test]
fn terms_match_loop_oracles() {
    let w = RgsfWeights::default();
    for seed in 0..10 {
        let (pred, target, t1) = (random(seed), random(seed + 100), random(seed + 200));
        let (b, l, t, _) = terms(&pred, &target, &t1, &w);
        let o = oracle(&pred, &target, &t1, &w);
        assert!((b - o.back).abs() <= 1e-12, "back {b} vs {}", o.back);
        assert!((l - o.liver).abs() <= 1e-12, "liver {l} vs {}", o.liver);
        assert!((t - o.tumor).abs() <= 1e-12, "tumor {t} vs {}", o.tumor);
    }
}

#[test]
fn decomposition_is_exact() {
    let w = RgsfWeights {
        lambda_back: 0.7,
        lambda_liver: 1.9,
        lambda_tumor: 3.3,
        delta_liver: 0.2,
        delta_tumor_contrast: 0.6,
    };
    for seed in 0..10 {
        let (pred, target, t1) = (random(seed), random(seed + 1), random(seed + 2));
        let (b, l, t, total) = terms(&pred, &target, &t1, &w);
        let expect = (w.lambda_back * b + w.lambda_liver * l) + w.lambda_tumor * t;
        assert!((total - expect).abs() <= 1e-12);
    }
}

#[test]
fn single_weight_selects_one_term() {
    let w = RgsfWeights {
        lambda_back: 1.0,
        lambda_liver: 0.0,
        lambda_tumor: 0.0,
        ..RgsfWeights::default()
    };
    let (pred, target, t1) = (random(1), random(2), random(3));
    let (b, _, _, total) = terms(&pred, &target, &t1, &w);
    assert_eq!(total, b);
}

#[test]
fn trivial_values() {
    let (liver, tumor) = masks();
    let r = RegionMasks::new(&liver, &tumor).unwrap();
    let target = random(5);
    // T1 well below the target inside the liver, so the hinge is inactive.
    let t1 = Tensor::from_fn([N, 1, S, S], |i| target.data()[i] * 0.2);
    assert_eq!(eval(|t, p| l_back(t, p, &target, &r), &target), 0.0);
    assert_eq!(eval(|t, p| l_tumor(t, p, &target, &r, 1.0), &target), 0.0);

    let shifted = Tensor::from_fn([N, 1, S, S], |i| target.data()[i] + 0.1);
    assert!((eval(|t, p| l_back(t, p, &target, &r), &shifted) - 0.1).abs() < 1e-12);
    // contrast is shift invariant; only image 0 has a tumor, so the batch
    // mean is 0.1 / 3
    let lt = eval(|t, p| l_tumor(t, p, &target, &r, 1.0), &shifted);
    assert!((lt - 0.1 / 3.0).abs() < 1e-12);

    // pred == t1: the hinge equals the margin for each image with liver.
    let lt1 = eval(|t, p| l_liver(t, p, &t1, &t1, &r, 0.05), &t1);
    assert!((lt1 - 2.0 * 0.05 / 3.0).abs() < 1e-12);

    let hi_t1 = Tensor::from_fn([N, 1, S, S], |i| target.data()[i] * 0.2);
    let zero = eval(|t, p| rgsf(t, p, &target, &hi_t1, &r, &RgsfWeights::default()), &target);
    assert_eq!(zero, 0.0);
}

#[test]
fn shape_mismatch_is_rejected() {
    let (liver, tumor) = masks();
    let r = RegionMasks::new(&liver, &tumor).unwrap();
    let wrong = Tensor::zeros([N, 1, S, S + 1]);
    let mut tape = Tape::new();
    let p = tape.leaf(random(1), true);
    assert!(l_back(&mut tape, p, &wrong, &r).is_err());
    assert!(RegionMasks::new(&liver, &wrong).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Changing the prediction only in the background moves `l_back` and
    /// nothing else.
    #[test]
    fn background_perturbation_is_isolated(seed in any::<u64>(), bump in 0.01f64..0.5) {
        let (liver, tumor) = masks();
        let w = RgsfWeights::default();
        let (pred, target, t1) = (random(seed), random(seed ^ 1), random(seed ^ 2));
        let moved = Tensor::from_fn([N, 1, S, S], |i| {
            let v = pred.data()[i];
            if region(&liver, &tumor, i) == 0 { v + bump } else { v }
        });
        let (b0, l0, t0, _) = terms(&pred, &target, &t1, &w);
        let (b1, l1, t1v, _) = terms(&moved, &target, &t1, &w);
        prop_assert!(b0 != b1);
        prop_assert_eq!(l0, l1);
        prop_assert_eq!(t0, t1v);
    }

    #[test]
    fn rgsf_is_nonnegative(seed in any::<u64>()) {
        let (pred, target, t1) = (random(seed), random(seed ^ 5), random(seed ^ 6));
        let (.., total) = terms(&pred, &target, &t1, &RgsfWeights::default());
        prop_assert!(total >= 0.0);
    }

    /// Zero loss requires both a perfect prediction and an inactive hinge.
    #[test]
    fn rgsf_zero_exactly_when_perfect_and_enhanced(seed in any::<u64>(), margin in -0.3f64..0.3) {
        let target = random(seed);
        let (liver, tumor) = masks();
        let r = RegionMasks::new(&liver, &tumor).unwrap();
        let w = RgsfWeights::default();
        // T1 whose parenchyma mean sits `margin` below the target's.
        let t1 = Tensor::from_fn([N, 1, S, S], |i| target.data()[i] - margin);
        let zero = eval(|t, p| rgsf(t, p, &target, &t1, &r, &w), &target);
        let hinge_inactive = margin >= w.delta_liver;
        prop_assert_eq!(zero == 0.0, hinge_inactive);
        let off = Tensor::from_fn([N, 1, S, S], |i| target.data()[i] + if i == 0 { 0.01 } else { 0.0 });
        prop_assert!(eval(|t, p| rgsf(t, p, &target, &t1, &r, &w), &off) > 0.0);
    }
}
