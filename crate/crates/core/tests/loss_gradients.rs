//! Analytic gradients against central finite differences (h = 1e-4).
//!
//! Error per trial is `max|analytic - numeric| / max(max|analytic|, max|numeric|)`.
//! Inputs are drawn away from the kinks of each loss (probability clamps,
//! Wasserstein sort ties and zero differences) so the check is meaningful.

use kdcascade::losses::{
    adaptive_avg_pool, masked_bce_with_grad, soft_bce_with_grad, DistillObjective, FeatureTerm, SampleTargets, TapInput,
};
use kdcascade::types::SoftLabelMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TRIALS: usize = 120;
const TOLERANCE: f64 = 1e-3;

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + H;
            let up = f(&probe);
            probe[i] = x[i] - H;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

fn assert_trials(name: &str, errors: &[f64]) {
    assert!(errors.len() >= 100, "{name}: only {} trials", errors.len());
    let worst = errors.iter().copied().fold(0.0, f64::max);
    assert!(worst < TOLERANCE, "{name}: worst relative error {worst:e}");
}

#[test]
fn hard_bce_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let mut errors = Vec::new();
    for _ in 0..TRIALS {
        let c = r.random_range(1..8);
        let y: Vec<f64> = (0..c).map(|_| f64::from(r.random_range(0..2u8))).collect();
        let mask: Vec<f32> = (0..c).map(|_| if r.random_bool(0.8) { 1.0 } else { 0.0 }).collect();
        let z = uniform(&mut r, c, -6.0, 6.0);
        let (_, g) = masked_bce_with_grad(&y, Some(&mask), &z);
        let n = numeric_grad(&z, |z| masked_bce_with_grad(&y, Some(&mask), z).0);
        errors.push(rel_error(&g, &n));
    }
    assert_trials("hard bce", &errors);
}

#[test]
fn soft_bce_gradient_in_both_modes() {
    let mut r = ChaCha8Rng::seed_from_u64(102);
    for mode in [SoftLabelMode::PerClassSigmoid, SoftLabelMode::Softmax] {
        let mut errors = Vec::new();
        for _ in 0..TRIALS {
            let c = r.random_range(1..7);
            let t = r.random_range(0.5..25.0);
            let y = uniform(&mut r, c, 0.0, 1.0);
            let z = uniform(&mut r, c, -5.0, 5.0);
            let (_, g) = soft_bce_with_grad(&y, &z, t, mode);
            let n = numeric_grad(&z, |z| soft_bce_with_grad(&y, z, t, mode).0);
            errors.push(rel_error(&g, &n));
        }
        assert_trials(&format!("soft bce ({mode})"), &errors);
    }
}

/// Learner raw map plus an aligned reference such that pooled learner
/// values are pairwise separated and never coincide with a reference value.
fn separated_maps(r: &mut ChaCha8Rng, channels: usize, side: usize, size: usize) -> (Vec<f64>, Vec<f64>) {
    let shape = (channels, side, side);
    let plane = size * size;
    loop {
        let learner = uniform(r, channels * side * side, -2.0, 2.0);
        let reference = uniform(r, channels * plane, -1.0, 1.0);
        let pooled = adaptive_avg_pool(&learner, shape, size);
        let ok = (0..channels).all(|c| {
            let l = &pooled[c * plane..(c + 1) * plane];
            let a = &reference[c * plane..(c + 1) * plane];
            l.iter()
                .enumerate()
                .all(|(i, x)| l[i + 1..].iter().all(|y| (x - y).abs() > 1e-3) && a.iter().all(|y| (x - y).abs() > 1e-3))
        });
        if ok {
            return (learner, reference);
        }
    }
}

#[test]
fn kl_feature_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(103);
    let mut errors = Vec::new();
    for _ in 0..TRIALS {
        let channels = r.random_range(1..4);
        let side = [4, 6, 8][r.random_range(0..3)];
        let shape = (channels, side, side);
        let learner = uniform(&mut r, channels * side * side, -3.0, 3.0);
        let reference = uniform(&mut r, channels * 16, -3.0, 3.0);
        let term = FeatureTerm::Kl;
        let (_, g) = term.value_and_grad(&reference, &learner, shape, 4);
        let n = numeric_grad(&learner, |x| term.value_and_grad(&reference, x, shape, 4).0);
        errors.push(rel_error(&g, &n));
    }
    assert_trials("kl", &errors);
}

#[test]
fn wasserstein_feature_gradient() {
    let mut r = ChaCha8Rng::seed_from_u64(104);
    let mut errors = Vec::new();
    for trial in 0..TRIALS {
        let p = 1 + (trial % 3) as u32;
        let channels = r.random_range(1..3);
        let side = [4, 8][r.random_range(0..2)];
        let shape = (channels, side, side);
        let (learner, reference) = separated_maps(&mut r, channels, side, 4);
        let term = FeatureTerm::Wasserstein { p };
        let (_, g) = term.value_and_grad(&reference, &learner, shape, 4);
        let n = numeric_grad(&learner, |x| term.value_and_grad(&reference, x, shape, 4).0);
        errors.push(rel_error(&g, &n));
    }
    assert_trials("wasserstein", &errors);
}

struct Case {
    hard: Vec<f64>,
    mask: Vec<f32>,
    soft: Vec<f64>,
    logits: Vec<f64>,
    taps: Vec<(Vec<f32>, (usize, usize, usize))>,
    references: Vec<Vec<f64>>,
}

fn case(r: &mut ChaCha8Rng, mode: SoftLabelMode) -> Case {
    let c = r.random_range(2..6);
    let hard: Vec<f64> = (0..c).map(|_| f64::from(r.random_range(0..2u8))).collect();
    let mask: Vec<f32> = (0..c).map(|_| if r.random_bool(0.85) { 1.0 } else { 0.0 }).collect();
    let soft = match mode {
        SoftLabelMode::PerClassSigmoid => uniform(r, c, 0.0, 1.0),
        SoftLabelMode::Softmax => {
            let raw = uniform(r, c, 0.1, 1.0);
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        }
    };
    let logits = uniform(r, c, -4.0, 4.0);
    let mut taps = Vec::new();
    let mut references = Vec::new();
    for (channels, side) in [(2, 8), (3, 4)] {
        let (learner, reference) = separated_maps(r, channels, side, 4);
        // Snap to multiples of 1/4096 (exact in f32) and re-check the
        // separation on the values the objective will actually see.
        let learner: Vec<f32> = learner.iter().map(|v| ((v * 4096.0).round() / 4096.0) as f32).collect();
        let pooled = adaptive_avg_pool(&learner, (channels, side, side), 4);
        let plane = 16;
        let separated = (0..channels).all(|ch| {
            let l = &pooled[ch * plane..(ch + 1) * plane];
            let a = &reference[ch * plane..(ch + 1) * plane];
            l.iter()
                .enumerate()
                .all(|(i, x)| l[i + 1..].iter().all(|y| (x - y).abs() > 5e-4) && a.iter().all(|y| (x - y).abs() > 5e-4))
        });
        if !separated {
            return case(r, mode);
        }
        taps.push((learner, (channels, side, side)));
        references.push(reference);
    }
    Case {
        hard,
        mask,
        soft,
        logits,
        taps,
        references,
    }
}

fn objective_value(obj: &DistillObjective, x: &Case, logits: &[f64], taps: &[Vec<f32>]) -> f64 {
    let targets = SampleTargets {
        hard: &x.hard,
        mask: Some(&x.mask),
        soft: Some(&x.soft),
        references: &x.references,
    };
    let inputs: Vec<TapInput<'_>> = taps
        .iter()
        .zip(&x.taps)
        .map(|(d, (_, shape))| TapInput { data: d, shape: *shape })
        .collect();
    obj.evaluate(logits, &targets, &inputs).unwrap().0.total
}

fn composite_errors(feature: FeatureTerm, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::new();
    for trial in 0..TRIALS {
        let mode = if trial % 2 == 0 {
            SoftLabelMode::PerClassSigmoid
        } else {
            SoftLabelMode::Softmax
        };
        let obj = DistillObjective {
            feature,
            lambda: r.random_range(0.1..5.0),
            mode,
            learner_temperature: if trial % 3 == 0 {
                None
            } else {
                Some(r.random_range(1.0..20.0))
            },
            soft_weight: if trial % 4 == 0 { 1.0 } else { r.random_range(1.0..50.0) },
            align_size: 4,
        };
        let x = case(&mut r, mode);
        let taps: Vec<Vec<f32>> = x.taps.iter().map(|t| t.0.clone()).collect();
        let targets = SampleTargets {
            hard: &x.hard,
            mask: Some(&x.mask),
            soft: Some(&x.soft),
            references: &x.references,
        };
        let inputs: Vec<TapInput<'_>> = x.taps.iter().map(|(d, s)| TapInput { data: d, shape: *s }).collect();
        let (_, grad) = obj.evaluate(&x.logits, &targets, &inputs).unwrap();

        let mut analytic = grad.logits.clone();
        let mut numeric = numeric_grad(&x.logits, |z| objective_value(&obj, &x, z, &taps));
        // Tap values live in f32: difference at the representable neighbours
        // and divide by the step actually taken.
        let mut probe = taps.clone();
        for (t, tap) in taps.iter().enumerate() {
            for i in 0..tap.len() {
                let base = tap[i];
                let up = (f64::from(base) + H) as f32;
                let down = (f64::from(base) - H) as f32;
                probe[t][i] = up;
                let fu = objective_value(&obj, &x, &x.logits, &probe);
                probe[t][i] = down;
                let fd = objective_value(&obj, &x, &x.logits, &probe);
                probe[t][i] = base;
                numeric.push((fu - fd) / (f64::from(up) - f64::from(down)));
            }
            analytic.extend(&grad.taps[t]);
        }
        errors.push(rel_error(&analytic, &numeric));
    }
    errors
}

#[test]
fn assistant_composite_gradient() {
    assert_trials("assistant composite", &composite_errors(FeatureTerm::Kl, 105));
}

#[test]
fn student_composite_gradient() {
    let mut errors = composite_errors(FeatureTerm::Wasserstein { p: 2 }, 106);
    errors.extend(composite_errors(FeatureTerm::Wasserstein { p: 1 }, 107));
    assert_trials("student composite", &errors);
}
