use std::path::Path;

use kdcascade::config::{
    FeatureMatching, FeatureReference, LabelPolicy, MissingImage, SamplingMode, SoftScaling, KEY_DOCS,
};
use kdcascade::data::{
    parse_manifest_str, resample, sampling_groups, target_counts, DatasetSplit, RawLabel, Sample, SamplingPolicy,
};
use kdcascade::metrics::{ratios, score_predictions};
use kdcascade::types::{LabelVector, SoftLabelMode};
use kdcascade::RunConfig;
use proptest::prelude::*;

fn name() -> impl Strategy<Value = String> {
    "[a-z][a-z0-9_]{0,7}"
}

fn positive() -> impl Strategy<Value = f64> {
    1e-6f64..1e3
}

fn pick<T: Copy + std::fmt::Debug + 'static>(all: &'static [T]) -> impl Strategy<Value = T> {
    proptest::sample::select(all)
}

prop_compose! {
    fn stage()(lr in positive(), wd in 0.0f64..1.0, epochs in 0usize..50, bs in 1usize..64)
        -> kdcascade::config::StageHparams {
        kdcascade::config::StageHparams { learning_rate: lr, weight_decay: wd, epochs, batch_size: bs }
    }
}

prop_compose! {
    fn head()(
        class_count in 1usize..8,
        named in any::<bool>(),
        temperature in positive(),
        lambda1 in 0.0f64..100.0,
        lambda2 in 0.0f64..100.0,
        wasserstein_p in 1u32..5,
        mode in pick(&[SoftLabelMode::Softmax, SoftLabelMode::PerClassSigmoid]),
        learner_temperature in any::<bool>(),
        soft_scaling in pick(SoftScaling::ALL),
        reference in pick(FeatureReference::ALL),
        matching in pick(FeatureMatching::ALL),
        align_size in 1usize..9,
    )(
        class_names in if named { proptest::collection::vec(name(), class_count).boxed() } else { Just(Vec::new()).boxed() },
        class_count in Just(class_count), temperature in Just(temperature), lambda1 in Just(lambda1),
        lambda2 in Just(lambda2), wasserstein_p in Just(wasserstein_p), mode in Just(mode),
        learner_temperature in Just(learner_temperature), soft_scaling in Just(soft_scaling),
        reference in Just(reference), matching in Just(matching), align_size in Just(align_size),
    ) -> RunConfig {
        RunConfig {
            class_count, class_names, temperature, lambda1, lambda2, wasserstein_p,
            soft_label_mode: mode, learner_temperature, soft_scaling,
            feature_reference: reference, feature_matching: matching, align_size,
            ..RunConfig::default()
        }
    }
}

prop_compose! {
    fn config()(
        base in head(),
        teacher in stage(), assistant in stage(), student in stage(),
        teacher_backbones in proptest::collection::vec(name(), 1..4),
        assistant_backbone in name(),
        student_backbone in name(),
        seed in any::<u64>(),
        ablation_seeds in proptest::collection::vec(any::<u64>(), 1..5),
        threshold in 0.001f64..0.999,
        label_policy in pick(LabelPolicy::ALL),
        sampling_policy in pick(SamplingMode::ALL),
        sampling_ratio in positive(),
        rest in (1usize..512, 0.0f64..0.99, "[a-z/._]{0,12}", "[a-z/._]{0,12}", pick(MissingImage::ALL),
                 0usize..16, 1usize..5000, any::<u64>(), 0.0f64..5.0),
    ) -> RunConfig {
        let (image_size, validation_fraction, train_manifest, validation_manifest, missing_image,
             threads, synth_samples, synth_rule_seed, synth_noise) = rest;
        RunConfig {
            teacher, assistant, student, teacher_backbones, assistant_backbone, student_backbone,
            seed, ablation_seeds, threshold, label_policy, sampling_policy, sampling_ratio,
            image_size, validation_fraction, train_manifest, validation_manifest, missing_image,
            threads, synth_samples, synth_rule_seed, synth_noise,
            ..base
        }
    }
}

proptest! {
    #[test]
    fn config_text_round_trips(cfg in config()) {
        prop_assume!(cfg.validate().is_ok());
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.serialize(), text);
        prop_assert_eq!(back.fingerprint(), cfg.fingerprint());
    }

    #[test]
    fn arbitrary_overrides_never_panic(key in "[a-z._0-9]{0,20}", value in "\\PC{0,16}") {
        let known = KEY_DOCS.iter().any(|(k, _)| *k == key);
        let result = RunConfig::default().with_overrides(&[format!("{key}={value}")]);
        if !known {
            prop_assert!(result.is_err());
        }
    }

    #[test]
    fn arbitrary_config_text_never_panics(text in "(\\PC{0,30}\n){0,6}") {
        let _ = RunConfig::parse(&text);
    }

    #[test]
    fn label_tokens_parse_exactly_the_grammar(token in "[-01. a-z]{0,5}") {
        let expected = match token.trim() {
            "1" | "1.0" => Some(RawLabel::Positive),
            "0" | "0.0" => Some(RawLabel::Negative),
            "-1" | "-1.0" => Some(RawLabel::Uncertain),
            "" => Some(RawLabel::Blank),
            _ => None,
        };
        prop_assert_eq!(RawLabel::parse(&token), expected);
        let text = format!("sample_id,image_path,a\ns1,x.png,{token}\n");
        let parsed = parse_manifest_str(&text, &["a".to_string()], Path::new("."));
        match expected {
            Some(label) => prop_assert_eq!(parsed.unwrap()[0].raw_labels.clone(), vec![label]),
            None => prop_assert!(parsed.is_err()),
        }
    }

    #[test]
    fn manifest_fuzz_never_panics(body in "[-01a-z,.\n\"]{0,80}") {
        let names = vec!["a".to_string(), "b".to_string()];
        let _ = parse_manifest_str(&format!("sample_id,image_path,a,b\n{body}"), &names, Path::new("."));
        let _ = parse_manifest_str(&body, &names, Path::new("."));
    }
}

fn labelled_split(rows: &[Vec<u8>]) -> DatasetSplit {
    let c = rows[0].len();
    let train = rows
        .iter()
        .enumerate()
        .map(|(i, l)| Sample {
            sample_id: format!("s{i}"),
            image_path: format!("s{i}.png").into(),
            labels: LabelVector::new(l.clone()).unwrap(),
            mask: vec![1; c],
        })
        .collect();
    let names = (0..c).map(|k| format!("c{k}")).collect();
    DatasetSplit::new(train, Vec::new(), names).unwrap()
}

fn split_strategy() -> impl Strategy<Value = DatasetSplit> {
    (1usize..4).prop_flat_map(|c| {
        proptest::collection::vec(
            proptest::collection::vec(prop_oneof![3 => Just(0u8), 1 => Just(1u8)], c),
            4..60,
        )
        .prop_filter("every class and the no-finding group present", move |rows| {
            (0..c).all(|k| rows.iter().any(|r| r[k] == 1)) && rows.iter().any(|r| r.iter().all(|&v| v == 0))
        })
        .prop_map(|rows| labelled_split(&rows))
    })
}

fn multiset(samples: &[Sample]) -> std::collections::BTreeMap<String, usize> {
    let mut m = std::collections::BTreeMap::new();
    for s in samples {
        *m.entry(s.sample_id.clone()).or_insert(0) += 1;
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn resampling_invariants(
        split in split_strategy(),
        mode in pick(&[SamplingMode::UndersampleMajority, SamplingMode::OversampleMinority, SamplingMode::Both]),
        ratio in 0.2f64..1.5,
        seed in any::<u64>(),
    ) {
        let before = split.clone();
        let policy = SamplingPolicy { mode, target_ratio: ratio, seed };
        let out = resample(&split, &policy).unwrap();
        prop_assert_eq!(&split, &before);
        prop_assert_eq!(&resample(&split, &policy).unwrap(), &out);
        prop_assert_eq!(out.validation(), split.validation());

        let c = split.class_count();
        let sizes: Vec<usize> = sampling_groups(split.train(), c).iter().map(Vec::len).collect();
        let targets = target_counts(&sizes, mode, ratio);
        let got: Vec<usize> = sampling_groups(out.train(), c).iter().map(Vec::len).collect();
        for (g, (&want, &have)) in targets.iter().zip(&got).enumerate() {
            prop_assert!(want.abs_diff(have) <= 1, "group {}: target {} got {}", g, want, have);
        }

        let original = multiset(split.train());
        let resampled = multiset(out.train());
        let by_id: std::collections::HashMap<&str, &Sample> =
            split.train().iter().map(|s| (s.sample_id.as_str(), s)).collect();
        for s in out.train() {
            prop_assert_eq!(by_id.get(s.sample_id.as_str()).copied(), Some(s));
        }
        match mode {
            SamplingMode::UndersampleMajority => {
                for (id, n) in &resampled {
                    prop_assert!(*n == 1 && original.contains_key(id));
                }
            }
            SamplingMode::OversampleMinority => {
                for id in original.keys() {
                    prop_assert!(resampled.contains_key(id), "original {} dropped", id);
                }
            }
            _ => {}
        }
    }
}

fn recount(probs: &[Vec<f64>], labels: &[Vec<u8>], masks: &[Vec<u8>], threshold: f64, k: usize) -> [u64; 4] {
    let mut out = [0u64; 4];
    for i in 0..probs.len() {
        if masks[i][k] == 0 {
            continue;
        }
        let predicted = probs[i][k] >= threshold;
        let actual = labels[i][k] == 1;
        let slot = usize::from(!predicted) * 2 + usize::from(!actual);
        // slot: 0 tp, 1 fp, 2 fn, 3 tn
        out[slot] += 1;
    }
    out
}

/// Probabilities, labels and masks, one row per sample.
type EvalInputs = (Vec<Vec<f64>>, Vec<Vec<u8>>, Vec<Vec<u8>>);

fn eval_inputs() -> impl Strategy<Value = EvalInputs> {
    (1usize..5, 1usize..40).prop_flat_map(|(c, n)| {
        (
            proptest::collection::vec(proptest::collection::vec(0.0f64..=1.0, c), n),
            proptest::collection::vec(proptest::collection::vec(0u8..2, c), n),
            proptest::collection::vec(
                proptest::collection::vec(prop_oneof![4 => Just(1u8), 1 => Just(0u8)], c),
                n,
            ),
        )
    })
}

proptest! {
    #[test]
    fn metrics_match_an_independent_recount((probs, labels, masks) in eval_inputs(), threshold in 0.01f64..0.99) {
        let c = probs[0].len();
        let names: Vec<String> = (0..c).map(|k| format!("k{k}")).collect();
        let lv: Vec<LabelVector> = labels.iter().map(|l| LabelVector::new(l.clone()).unwrap()).collect();
        let report = score_predictions(&probs, &lv, &masks, threshold, &names).unwrap();
        let mut pooled = [0u64; 4];
        for k in 0..c {
            let [tp, fp, fn_, tn] = recount(&probs, &labels, &masks, threshold, k);
            let m = &report.classes[k];
            prop_assert_eq!((m.tp, m.fp, m.fn_, m.tn), (tp, fp, fn_, tn));
            let f1 = if tp + fp + fn_ == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
            prop_assert!((m.f1 - f1).abs() < 1e-12);
            for (p, v) in pooled.iter_mut().zip([tp, fp, fn_, tn]) {
                *p += v;
            }
        }
        let micro = ratios(pooled[0], pooled[1], pooled[2]);
        prop_assert!((report.micro.f1 - micro.f1).abs() < 1e-12);
        prop_assert!((report.micro.precision - micro.precision).abs() < 1e-12);
        let macro_f1 = report.classes.iter().map(|m| m.f1).sum::<f64>() / c as f64;
        prop_assert!((report.macro_avg.f1 - macro_f1).abs() < 1e-12);
        for m in &report.classes {
            prop_assert!((0.0..=1.0).contains(&m.precision) && (0.0..=1.0).contains(&m.recall));
        }
    }

    #[test]
    fn raising_the_threshold_never_adds_predicted_positives(
        (probs, labels, masks) in eval_inputs(),
        a in 0.01f64..0.99,
        b in 0.01f64..0.99,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let c = probs[0].len();
        let names: Vec<String> = (0..c).map(|k| format!("k{k}")).collect();
        let lv: Vec<LabelVector> = labels.iter().map(|l| LabelVector::new(l.clone()).unwrap()).collect();
        let low = score_predictions(&probs, &lv, &masks, lo, &names).unwrap();
        let high = score_predictions(&probs, &lv, &masks, hi, &names).unwrap();
        for (l, h) in low.classes.iter().zip(&high.classes) {
            prop_assert!(h.tp + h.fp <= l.tp + l.fp);
            prop_assert!(h.tp <= l.tp);
            prop_assert!(h.recall <= l.recall + 1e-12);
        }
    }
}
