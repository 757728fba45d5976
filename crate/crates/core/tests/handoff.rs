mod common;

use common::{naive_sigmoid, plain_bce, pool, synth_config};
use kdcascade::distill::{
    alignment, backbone_specs, evaluate_objective, export_distill_records, learner_objective, learner_tap_channels,
    prepare_data, train_assistant, train_student, FeatureSource, Guidance, RecordStore, Workspace, TEACHER_CHECKPOINT,
};
use kdcascade::models::{BackboneRegistry, Checkpoint, Network};
use kdcascade::nn::Execution;
use kdcascade::types::{Role, SoftLabelMode};
use kdcascade::{Error, RunConfig};

const SEQ: Execution = Execution::Sequential;

fn untrained(config: &RunConfig, role: Role, seed: u64) -> Checkpoint {
    let registry = BackboneRegistry::desk_scale();
    let members = backbone_specs(config, &registry, role)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(m, spec)| Network::build(spec, config.class_count, seed + m as u64).unwrap())
        .collect();
    Checkpoint::new(role, "test", members)
}

fn export(config: &RunConfig, ckpt: &Checkpoint, learner: Role, data: &kdcascade::distill::TrainingSet) -> RecordStore {
    let registry = BackboneRegistry::desk_scale();
    let channels = learner_tap_channels(config, &registry, learner).unwrap();
    export_distill_records(
        ckpt,
        &ckpt.checksum(),
        data,
        config.temperature,
        config.soft_label_mode,
        &channels,
        &alignment(config),
        SEQ,
    )
    .unwrap()
}

#[test]
fn record_store_round_trip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth_config(dir.path(), 40, 16, 1);
    let data = prepare_data(&config).unwrap();
    let teacher = untrained(&config, Role::Teacher, 11);
    let store = export(&config, &teacher, Role::Assistant, &data.train);
    assert_eq!(store.records.len(), data.train.len());

    let bytes = store.to_bytes().unwrap();
    let path = dir.path().join("teacher.records");
    store.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let back = RecordStore::load(&path).unwrap();
    assert_eq!(back, store);
    assert_eq!(back.to_bytes().unwrap(), bytes);
    for (a, b) in back.records.iter().zip(&store.records) {
        for (x, y) in a.feature_refs.iter().flatten().zip(b.feature_refs.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.soft_labels.values().iter().zip(b.soft_labels.values()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    let again = export(&config, &teacher, Role::Assistant, &data.train);
    assert_eq!(again.to_bytes().unwrap(), bytes);
}

#[test]
fn corrupted_store_bytes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth_config(dir.path(), 40, 16, 1);
    let data = prepare_data(&config).unwrap();
    let store = export(
        &config,
        &untrained(&config, Role::Teacher, 3),
        Role::Assistant,
        &data.train,
    );
    let bytes = store.to_bytes().unwrap();
    let path = dir.path().join("x.records");
    assert!(RecordStore::from_bytes(&bytes[..bytes.len() - 3], &path).is_err());
    assert!(RecordStore::from_bytes(&bytes[4..], &path).is_err());
}

#[test]
fn store_bound_to_another_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth_config(dir.path(), 40, 16, 1);
    let registry = BackboneRegistry::desk_scale();
    let data = prepare_data(&config).unwrap();
    let teacher = untrained(&config, Role::Teacher, 5);
    let other = untrained(&config, Role::Teacher, 6);
    let store = export(&config, &teacher, Role::Assistant, &data.train);

    let err = train_assistant(&config, &registry, &data.train, &store, &other.checksum(), None, SEQ).unwrap_err();
    assert!(matches!(err, Error::Checksum { .. }), "{err}");
    let err = train_student(&config, &registry, &data.train, &store, &other.checksum(), None, SEQ).unwrap_err();
    assert!(
        matches!(err, Error::Checksum { .. } | Error::CheckpointMismatch(_)),
        "{err}"
    );
    train_assistant(&config, &registry, &data.train, &store, &teacher.checksum(), None, SEQ).unwrap();
}

#[test]
fn replacing_the_teacher_on_disk_invalidates_its_records() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth_config(dir.path(), 40, 16, 1);
    let ws = Workspace::open(&config, &dir.path().join("run"))
        .unwrap()
        .with_execution(SEQ);
    ws.train_teacher(false).unwrap();
    ws.export_records(Role::Assistant, false).unwrap();
    untrained(&config, Role::Teacher, 99)
        .save(&ws.path(TEACHER_CHECKPOINT))
        .unwrap();
    let err = ws.train_learner(Role::Assistant, false).unwrap_err();
    assert!(matches!(err, Error::Checksum { .. }), "{err}");
}

#[test]
fn missing_record_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let config = synth_config(dir.path(), 40, 16, 1);
    let registry = BackboneRegistry::desk_scale();
    let data = prepare_data(&config).unwrap();
    let teacher = untrained(&config, Role::Teacher, 5);
    let mut store = export(&config, &teacher, Role::Assistant, &data.train);
    let dropped = store.records.remove(3).sample_id;
    match train_assistant(&config, &registry, &data.train, &store, &teacher.checksum(), None, SEQ) {
        Err(Error::MissingRecord(id)) => assert_eq!(id, dropped),
        other => panic!("expected a missing record error, got {other:?}"),
    }
}

/// With both feature weights at zero, no learner temperature and soft
/// targets equal to the hard ones, each composite is twice the plain BCE.
#[test]
fn zero_lambdas_with_hard_soft_targets_double_the_bce() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = synth_config(dir.path(), 40, 16, 1);
    config.lambda1 = 0.0;
    config.lambda2 = 0.0;
    config.learner_temperature = false;
    let registry = BackboneRegistry::desk_scale();
    let data = prepare_data(&config).unwrap();
    for role in [Role::Assistant, Role::Student] {
        let spec = backbone_specs(&config, &registry, role).unwrap().remove(0);
        let net = Network::build(&spec, config.class_count, 21).unwrap();
        let guidance = Guidance {
            soft: data.train.targets.clone(),
            features: FeatureSource::Stored(Vec::new()),
        };
        let loss = evaluate_objective(
            &net,
            &learner_objective(&config, role),
            &data.train,
            Some(&guidance),
            SEQ,
        )
        .unwrap();
        let shape = data.train.images.shape();
        let plain = (0..data.train.len())
            .map(|i| {
                let logits = net.forward(data.train.images.sample(i), shape).unwrap().logits_f64();
                plain_bce(&data.train.targets[i], &logits)
            })
            .sum::<f64>()
            / data.train.len() as f64;
        assert!(
            (loss.total - 2.0 * plain).abs() < 1e-6,
            "{role}: {} vs 2 x {plain}",
            loss.total
        );
        assert!((loss.hard_bce - loss.soft_bce).abs() < 1e-9);
        assert_eq!(loss.kl_term + loss.wasserstein_term, 0.0);
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Feature terms reported at initialization, recomputed from the stored
/// references with scalar loops.
#[test]
fn feature_terms_at_init_match_recomputation_from_stored_refs() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = synth_config(dir.path(), 40, 16, 1);
    config.lambda1 = 0.7;
    config.lambda2 = 1.3;
    let registry = BackboneRegistry::desk_scale();
    let data = prepare_data(&config).unwrap();
    let shape = data.train.images.shape();
    let s = config.align_size;

    for (learner, producer) in [(Role::Assistant, Role::Teacher), (Role::Student, Role::Assistant)] {
        let store = export(&config, &untrained(&config, producer, 40), learner, &data.train);
        let spec = backbone_specs(&config, &registry, learner).unwrap().remove(0);
        let net = Network::build(&spec, config.class_count, 41).unwrap();
        let guidance = Guidance {
            soft: store.records.iter().map(|r| r.soft_labels.values().to_vec()).collect(),
            features: FeatureSource::Stored(
                store
                    .records
                    .iter()
                    .map(|r| {
                        r.feature_refs
                            .iter()
                            .map(|f| f.iter().map(|&v| f64::from(v)).collect())
                            .collect()
                    })
                    .collect(),
            ),
        };
        let objective = learner_objective(&config, learner);
        let loss = evaluate_objective(&net, &objective, &data.train, Some(&guidance), SEQ).unwrap();

        let mut expected = 0.0;
        for (i, record) in store.records.iter().enumerate() {
            assert_eq!(record.sample_id, data.train.sample_ids[i]);
            let trace = net.forward(data.train.images.sample(i), shape).unwrap();
            let mut per_tap = 0.0;
            for ((tap, tap_shape), reference) in trace.taps().iter().zip(&record.feature_refs) {
                let l = pool(tap, *tap_shape, s);
                let r: Vec<f64> = reference.iter().map(|&v| f64::from(v)).collect();
                per_tap += match learner {
                    Role::Assistant => {
                        let (p, q) = (softmax(&r), softmax(&l));
                        p.iter()
                            .zip(&q)
                            .map(|(p, q)| if *p > 0.0 { p * (p / q).ln() } else { 0.0 })
                            .sum::<f64>()
                    }
                    _ => {
                        let n = s * s;
                        let c = tap_shape.0;
                        (0..c)
                            .map(|ch| {
                                let mut a = r[ch * n..(ch + 1) * n].to_vec();
                                let mut b = l[ch * n..(ch + 1) * n].to_vec();
                                a.sort_by(f64::total_cmp);
                                b.sort_by(f64::total_cmp);
                                let m = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
                                m.sqrt()
                            })
                            .sum::<f64>()
                            / c as f64
                    }
                };
            }
            expected += objective.lambda * per_tap / trace.taps().len() as f64;
        }
        expected /= data.train.len() as f64;
        let got = loss.kl_term + loss.wasserstein_term;
        assert!(got > 0.0);
        assert!(
            (got - expected).abs() < 1e-6 * expected.max(1.0),
            "{learner}: {got} vs {expected}"
        );
        assert!((loss.total - loss.component_sum()).abs() < 1e-5);
    }
}

#[test]
fn unit_temperature_soft_labels_are_the_checkpoint_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = synth_config(dir.path(), 40, 16, 1);
    config.temperature = 1.0;
    let data = prepare_data(&config).unwrap();
    let assistant = untrained(&config, Role::Assistant, 8);
    let store = export(&config, &assistant, Role::Student, &data.train);
    let shape = data.train.images.shape();
    for (i, r) in store.records.iter().enumerate() {
        let logits = assistant.members[0]
            .forward(data.train.images.sample(i), shape)
            .unwrap()
            .logits_f64();
        for (q, z) in r.soft_labels.values().iter().zip(&logits) {
            assert!((q - naive_sigmoid(*z)).abs() < 1e-12);
        }
    }
    assert_eq!(store.mode, SoftLabelMode::PerClassSigmoid);
}
