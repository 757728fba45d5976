use kdcascade::losses::temperature_soften;
use kdcascade::types::SoftLabelMode;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Logits with a unique maximum and no ties, so argmax is well defined.
fn distinct_logits(r: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..c).map(|_| r.random_range(-8.0..8.0)).collect();
        let mut sorted = z.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[1] - w[0] > 1e-3) {
            return z;
        }
    }
}

#[test]
fn softmax_outputs_sum_to_one() {
    let mut r = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..500 {
        let c = r.random_range(1..12);
        let z: Vec<f64> = (0..c).map(|_| r.random_range(-50.0..50.0)).collect();
        let t = 10f64.powf(r.random_range(-3.0..3.0));
        let s = temperature_soften(&z, t, SoftLabelMode::Softmax).unwrap();
        assert!((s.values().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn argmax_is_invariant_under_temperature() {
    let mut r = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..500 {
        let c = r.random_range(2..10);
        let z = distinct_logits(&mut r, c);
        let t = 10f64.powf(r.random_range(-2.0..3.0));
        let s = temperature_soften(&z, t, SoftLabelMode::Softmax).unwrap();
        assert_eq!(argmax(s.values()), argmax(&z), "T {t}");
        // Sigmoid outputs round to exactly 1.0 past |z/T| ~ 37, which would
        // manufacture ties; stay below that.
        if z.iter().all(|v| (v / t).abs() < 30.0) {
            let s = temperature_soften(&z, t, SoftLabelMode::PerClassSigmoid).unwrap();
            assert_eq!(argmax(s.values()), argmax(&z), "sigmoid, T {t}");
        }
    }
}

#[test]
fn spread_strictly_decreases_with_temperature() {
    let mut r = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..500 {
        let c = r.random_range(2..10);
        let z = distinct_logits(&mut r, c);
        let t1 = r.random_range(0.5..30.0);
        let t2 = t1 * r.random_range(1.05..4.0);
        let a = temperature_soften(&z, t1, SoftLabelMode::Softmax).unwrap();
        let b = temperature_soften(&z, t2, SoftLabelMode::Softmax).unwrap();
        assert!(spread(b.values()) < spread(a.values()), "T {t1} -> {t2}");
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(max(b.values()) < max(a.values()));

        // Per-class sigmoid: every non-zero logit moves strictly towards 1/2.
        let a = temperature_soften(&z, t1, SoftLabelMode::PerClassSigmoid).unwrap();
        let b = temperature_soften(&z, t2, SoftLabelMode::PerClassSigmoid).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert!((y - 0.5).abs() < (x - 0.5).abs());
        }
    }
}

#[test]
fn unit_temperature_is_the_standard_softmax() {
    let mut r = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..200 {
        let c = r.random_range(1..10);
        let z: Vec<f64> = (0..c).map(|_| r.random_range(-20.0..20.0)).collect();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = e.iter().sum();
        let standard: Vec<f64> = e.iter().map(|v| v / sum).collect();
        let s = temperature_soften(&z, 1.0, SoftLabelMode::Softmax).unwrap();
        assert_eq!(s.values(), standard.as_slice());
    }
}

#[test]
fn constant_logits_give_uniform_output() {
    for t in [0.1, 1.0, 20.0] {
        let s = temperature_soften(&[1.5; 4], t, SoftLabelMode::Softmax).unwrap();
        assert!(s.values().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
