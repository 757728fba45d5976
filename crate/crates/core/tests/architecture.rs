use kdcascade::models::{
    ensemble_probabilities, student_spec, teacher_ensemble_predict, BackboneRegistry, LayerSpec, Network,
};
use kdcascade::types::{ImageBatch, Role};
use kdcascade::Error;

fn image(len: usize, salt: u64) -> Vec<f32> {
    (0..len)
        .map(|i| ((i as u64 * 2_654_435_761 + salt * 97) % 1000) as f32 / 500.0 - 1.0)
        .collect()
}

#[test]
fn student_is_three_conv_blocks_with_the_stated_filters() {
    let spec = student_spec();
    assert_eq!(spec.stages.len(), 3);
    assert_eq!(spec.plain_convs(), vec![(64, 5), (64, 3), (128, 3)]);
    for stage in &spec.stages {
        let convs = stage
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }))
            .count();
        assert_eq!(convs, 1, "{}", stage.tap_name);
    }
    assert_eq!(spec.input_channels, 1);
}

#[test]
fn student_conv_stack_has_112448_parameters() {
    // filters * (k * k * in_channels) + filters, per block
    let by_formula: usize = [(64, 5, 1), (64, 3, 64), (128, 3, 64)]
        .iter()
        .map(|&(f, k, c)| f * k * k * c + f)
        .sum();
    assert_eq!(by_formula, 112_448);
    assert_eq!(student_spec().backbone_parameter_count(), 112_448);
    let net = Network::build(&student_spec(), 3, 0).unwrap();
    assert_eq!(net.backbone_parameter_count(), 112_448);
    assert_eq!(net.parameter_count(), net.params().len());
    assert_eq!(net.parameter_count() as u64, student_spec().parameter_count(3));
}

#[test]
fn student_on_64px_input_gives_three_taps_and_c_logits() {
    let net = Network::build(&student_spec(), 5, 1).unwrap();
    let trace = net.forward(&image(64 * 64, 1), (1, 64, 64)).unwrap();
    assert_eq!(trace.logits().len(), 5);
    let shapes: Vec<_> = trace.taps().iter().map(|(_, s)| *s).collect();
    assert_eq!(shapes, vec![(64, 32, 32), (64, 16, 16), (128, 8, 8)]);
    assert_eq!(net.tap_shapes(64, 64), shapes);
}

#[test]
fn capacity_ordering_holds_in_every_registry() {
    for registry in [BackboneRegistry::desk_scale(), BackboneRegistry::full_scale()] {
        registry.check_capacity_ordering(3).unwrap();
    }
    let desk = BackboneRegistry::desk_scale();
    let count = |n: &str| desk.get(n).unwrap().parameter_count(3);
    assert_ne!(count("tiny-b6"), count("tiny-b7"));
    assert!(count("tiny-b6").min(count("tiny-b7")) > count("tiny-densenet"));
    assert!(count("tiny-densenet") > count("student"));
    for spec in desk.specs() {
        let built = Network::build(spec, 3, 0).unwrap();
        assert_eq!(built.parameter_count() as u64, spec.parameter_count(3), "{}", spec.name);
    }
}

#[test]
fn full_scale_backbones_cannot_be_built_in_process() {
    let registry = BackboneRegistry::full_scale();
    for spec in registry.specs().iter().filter(|s| s.role != Role::Student) {
        assert!(!spec.is_buildable());
        assert!(matches!(Network::build(spec, 3, 0), Err(Error::Registry(_))));
    }
    assert!(matches!(registry.get("resnet-9000"), Err(Error::Registry(_))));
}

#[test]
fn initialization_is_seed_deterministic() {
    for spec in BackboneRegistry::desk_scale().specs() {
        let a = Network::build(spec, 3, 7).unwrap();
        let b = Network::build(spec, 3, 7).unwrap();
        let c = Network::build(spec, 3, 8).unwrap();
        let bits = |n: &Network| n.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b), "{}", spec.name);
        assert_ne!(bits(&a), bits(&c), "{}", spec.name);
    }
}

#[test]
fn recorded_taps_equal_truncated_forward() {
    for spec in BackboneRegistry::desk_scale().specs() {
        let net = Network::build(spec, 3, 4).unwrap();
        let shape = (1, 24, 24);
        let input = image(24 * 24, 5);
        let trace = net.forward(&input, shape).unwrap();
        assert_eq!(trace.taps().len(), spec.tap_names().len());
        for (t, (data, tap_shape)) in trace.taps().iter().enumerate() {
            let (again, again_shape) = net.forward_truncated(&input, shape, t).unwrap();
            assert_eq!(*tap_shape, again_shape);
            assert_eq!(data, &again, "{} tap {t}", spec.name);
        }
    }
}

#[test]
fn zero_image_gives_zero_block_outputs_with_zero_conv_bias() {
    let mut net = Network::build(&student_spec(), 3, 2).unwrap();
    let biases: Vec<(usize, usize)> = net
        .blocks()
        .iter()
        .filter(|b| b.name.starts_with("block") && b.name.ends_with("bias"))
        .map(|b| (b.offset, b.len))
        .collect();
    assert_eq!(biases.len(), 3);
    for (offset, len) in biases {
        net.params_mut()[offset..offset + len].fill(0.0);
    }
    let trace = net.forward(&vec![0.0; 32 * 32], (1, 32, 32)).unwrap();
    for (data, _) in trace.taps() {
        assert!(data.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn ensemble_averages_member_probabilities() {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let single = ensemble_probabilities(&[vec![0.3, -1.2]]).unwrap();
    assert!((single[0] - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-15);
    let pair = ensemble_probabilities(&[vec![logit(0.2)], vec![logit(0.8)]]).unwrap();
    assert!((pair[0] - 0.5).abs() < 1e-12);

    let members = [vec![0.4, -2.0, 1.5], vec![-0.7, 0.1, 3.0], vec![2.2, -0.3, -1.0]];
    let got = ensemble_probabilities(&members).unwrap();
    for k in 0..3 {
        let mean = members.iter().map(|m| 1.0 / (1.0 + (-m[k]).exp())).sum::<f64>() / 3.0;
        assert!((got[k] - mean).abs() < 1e-6);
    }
    assert!(ensemble_probabilities(&[vec![0.0], vec![0.0, 1.0]]).is_err());
    assert!(ensemble_probabilities(&[]).is_err());
}

#[test]
fn ensemble_prediction_of_built_members() {
    let registry = BackboneRegistry::desk_scale();
    let b6 = Network::build(registry.get("tiny-b6").unwrap(), 3, 1).unwrap();
    let b7 = Network::build(registry.get("tiny-b7").unwrap(), 3, 2).unwrap();
    let batch = ImageBatch::new(image(2 * 16 * 16, 9), 2, 1, 16, 16).unwrap();
    let alone = teacher_ensemble_predict(std::slice::from_ref(&b6), &batch).unwrap();
    let both = teacher_ensemble_predict(&[b6.clone(), b7.clone()], &batch).unwrap();
    let l6 = b6.predict_logits(&batch).unwrap();
    let l7 = b7.predict_logits(&batch).unwrap();
    for i in 0..2 {
        for k in 0..3 {
            let p6 = 1.0 / (1.0 + (-l6[i][k]).exp());
            let p7 = 1.0 / (1.0 + (-l7[i][k]).exp());
            assert!((alone[i].probabilities()[k] - p6).abs() < 1e-9);
            assert!((both[i].probabilities()[k] - (p6 + p7) / 2.0).abs() < 1e-9);
        }
    }
}
