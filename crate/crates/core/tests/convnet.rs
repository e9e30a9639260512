mod common;

use common::*;
use webseg::convnet::{
    checkpoint, mean_loss, train_classifier, train_segmenter, Dense, Head, Layer, Network, Target,
    TrainSchedule,
};
use webseg::{FeatureMap, LabelImage, IGNORE};

fn fc_only(weights: Vec<f64>, k: usize) -> Network {
    let inputs = weights.len() / k;
    Network::new(
        vec![
            Layer::GlobalAvgPool,
            Layer::Dense(Dense { inputs, outputs: k, weights, bias: Vec::new() }),
            Layer::Softmax,
        ],
        Head::Classifier,
        k,
        Vec::new(),
    )
    .unwrap()
}

#[test]
fn zero_image_gives_uniform_probabilities() {
    let net = Network::reference_classifier(3, 5, 1);
    let p = net.classify(&FeatureMap::zeros(3, 64, 64)).unwrap();
    for v in p {
        assert!((v - 0.2).abs() < 1e-12);
    }
}

#[test]
fn identity_fc_softmax() {
    let net = fc_only(vec![1.0, 0.0, 0.0, 1.0], 2);
    let p = net.classify(&FeatureMap::from_vector(vec![1.0, 2.0]).unwrap()).unwrap();
    assert!((p[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
    assert!((p[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
}

#[test]
fn softmax_of_ln2_and_zero() {
    let net = fc_only(vec![1.0, 0.0], 2);
    let p = net
        .classify(&FeatureMap::from_vector(vec![std::f64::consts::LN_2]).unwrap())
        .unwrap();
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn forward_matches_reference_loop_nest() {
    let mut r = rng(5);
    for _ in 0..5 {
        let net = small_classifier(&mut r, 2, 4, -1.0, 1.0);
        let img = random_map(&mut r, 2, 8, 8, 0.0, 1.0);
        let trace = net.forward(&img).unwrap();
        let reference = reference_forward(&net, &img);
        assert_eq!(trace.len(), net.layers().len());
        for (a, b) in trace.outputs.iter().zip(&reference) {
            assert_eq!(a.shape(), b.shape());
            assert!(max_abs_diff(a.values(), b.values()) < 1e-12);
        }
        assert_eq!(net.classify(&img).unwrap(), trace.last().values());
    }
}

#[test]
fn reference_classifier_matches_loop_nest() {
    let net = Network::reference_classifier(3, 5, 9);
    let img = random_map(&mut rng(3), 3, 64, 64, 0.0, 1.0);
    let trace = net.forward(&img).unwrap();
    let reference = reference_forward(&net, &img);
    let logits = &trace.outputs[net.layers().len() - 2];
    assert!(max_abs_diff(logits.values(), reference[net.layers().len() - 2].values()) < 1e-12);
    for (i, l) in net.layers().iter().enumerate() {
        if matches!(l, Layer::Relu) {
            assert!(trace.outputs[i].values().iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn segmenter_matches_loop_nest_and_normalizes() {
    let mut r = rng(8);
    let net = small_segmenter(&mut r, 3, 3);
    let img = random_map(&mut r, 3, 8, 8, 0.0, 1.0);
    let probs = net.segment_probs(&img).unwrap();
    let reference = reference_forward(&net, &img);
    assert!(max_abs_diff(probs.values(), reference.last().unwrap().values()) < 1e-12);

    let seg = Network::reference_segmenter(3, 5, 4);
    let img = random_map(&mut r, 3, 64, 64, 0.0, 1.0);
    let probs = seg.segment_probs(&img).unwrap();
    assert_eq!(probs.shape(), (6, 64, 64));
    for i in 0..100 {
        let (y, x) = ((i * 37) % 64, (i * 53 + 7) % 64);
        let s: f64 = (0..6).map(|c| probs.get(c, y, x)).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_final_layer_gives_uniform_pixels() {
    let mut seg = Network::reference_segmenter(3, 4, 2);
    let n = seg.layers().len();
    if let Layer::Conv(c) = &mut seg.layers_mut()[n - 3] {
        c.weights.fill(0.0);
        c.bias.fill(0.0);
    }
    let img = random_map(&mut rng(1), 3, 64, 64, 0.0, 1.0);
    let probs = seg.segment_probs(&img).unwrap();
    assert!(probs.values().iter().all(|&p| (p - 0.2).abs() < 1e-12));
}

#[test]
fn head_mismatch_is_usage_error() {
    let cls = Network::reference_classifier(3, 3, 0);
    let seg = Network::reference_segmenter(3, 3, 0);
    let img = FeatureMap::zeros(3, 64, 64);
    assert!(matches!(cls.segment_probs(&img), Err(webseg::Error::Usage(_))));
    assert!(matches!(seg.classify(&img), Err(webseg::Error::Usage(_))));
}

#[test]
fn shape_mismatch_is_config_error() {
    let net = Network::reference_classifier(3, 3, 0);
    assert!(matches!(net.forward(&FeatureMap::zeros(1, 64, 64)), Err(webseg::Error::Config(_))));
}

#[test]
fn classifier_fc_must_be_bias_free() {
    let layers = vec![
        Layer::GlobalAvgPool,
        Layer::Dense(Dense { inputs: 2, outputs: 2, weights: vec![0.0; 4], bias: vec![0.0; 2] }),
        Layer::Softmax,
    ];
    assert!(Network::new(layers, Head::Classifier, 2, Vec::new()).is_err());
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut r = rng(21);
    // Redraw until no ±h step crosses a ReLU or max-pool kink.
    let (net, seg, imgs) = loop {
        let net = small_classifier(&mut r, 2, 3, -1.0, 1.0);
        let seg = small_segmenter(&mut r, 2, 2);
        let imgs: Vec<FeatureMap> = (0..2).map(|_| random_map(&mut r, 2, 8, 8, 0.0, 1.0)).collect();
        if kink_free(&net, &[&imgs[0], &imgs[1]], 1e-4) && kink_free(&seg, &[&imgs[0], &imgs[1]], 1e-4) {
            break (net, seg, imgs);
        }
    };
    let batch = vec![(&imgs[0], Target::Class(1)), (&imgs[1], Target::Class(3))];
    assert!(gradient_check(&net, &batch, 1e-4, 1e-6) < 1e-4);

    let masks: Vec<LabelImage> = (0..2).map(|_| random_mask(&mut r, 8, 8, 2, 0.3)).collect();
    let batch = vec![(&imgs[0], Target::Mask(&masks[0])), (&imgs[1], Target::Mask(&masks[1]))];
    assert!(gradient_check(&seg, &batch, 1e-4, 1e-6) < 1e-4);
}

#[test]
fn ignore_only_batch_has_zero_gradient() {
    let mut r = rng(2);
    let seg = small_segmenter(&mut r, 2, 2);
    let img = random_map(&mut r, 2, 8, 8, 0.0, 1.0);
    let mask = LabelImage::filled(8, 8, IGNORE);
    let g = seg.gradient(&[(&img, Target::Mask(&mask))]).unwrap();
    assert!(g.gradients.is_zero());
    assert_eq!(g.terms, 0);
}

#[test]
fn duplicated_batch_doubles_gradient() {
    let mut r = rng(4);
    let net = small_classifier(&mut r, 2, 3, -1.0, 1.0);
    let img = random_map(&mut r, 2, 8, 8, 0.0, 1.0);
    let one = net.gradient(&[(&img, Target::Class(2))]).unwrap();
    let two = net.gradient(&[(&img, Target::Class(2)), (&img, Target::Class(2))]).unwrap();
    for (a, b) in one.gradients.groups.iter().flatten().zip(two.gradients.groups.iter().flatten()) {
        assert_eq!(2.0 * a, *b);
    }
}

/// Bright left half = class 1, bright right half = class 2.
fn separable_set(n: usize, seed: u64) -> Vec<(FeatureMap, usize)> {
    use rand::Rng;
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let label = 1 + i % 2;
            let mut m = random_map(&mut r, 3, 16, 16, 0.0, 0.2);
            for c in 0..3 {
                for y in 0..16 {
                    for x in 0..8 {
                        let xx = if label == 1 { x } else { x + 8 };
                        m.set(c, y, xx, 0.6 + 0.4 * r.gen::<f64>());
                    }
                }
            }
            (m, label)
        })
        .collect()
}

#[test]
fn classifier_learns_separable_toy_set() {
    let data = separable_set(64, 3);
    let net = Network::reference_classifier(3, 2, 17);
    let probe: Vec<_> = data.iter().map(|(m, l)| (m, Target::Class(*l))).collect();
    let before = mean_loss(&net, &probe).unwrap();
    let schedule = TrainSchedule { iterations: 300, seed: 5, ..TrainSchedule::default() };
    let trained = train_classifier(net, &data, &schedule).unwrap();
    let after = mean_loss(&trained, &probe).unwrap();
    assert!(after < before);
    let correct = data
        .iter()
        .filter(|(m, l)| {
            let p = trained.classify(m).unwrap();
            (if p[0] > p[1] { 1 } else { 2 }) == *l
        })
        .count();
    // Reference run with these seeds reaches 64/64.
    assert!(correct as f64 / 64.0 >= 0.95, "accuracy {correct}/64");
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let data = separable_set(8, 1);
    let net = Network::reference_classifier(3, 2, 2);
    let schedule = TrainSchedule { learning_rate: 0.0, iterations: 5, batch_size: 4, ..Default::default() };
    let out = train_classifier(net.clone(), &data, &schedule).unwrap();
    assert_eq!(checkpoint::encode(&out), checkpoint::encode(&net));

    let seg = net.segmenter_from_classifier(1).unwrap();
    let masks: Vec<(FeatureMap, LabelImage)> =
        data.iter().map(|(m, l)| (m.clone(), LabelImage::filled(16, 16, *l as u32))).collect();
    let out = train_segmenter(seg.clone(), &masks, &schedule).unwrap();
    assert_eq!(out, seg);
}

#[test]
fn single_small_step_descends() {
    let data = separable_set(1, 9);
    let net = Network::reference_classifier(3, 2, 4);
    let probe = [(&data[0].0, Target::Class(data[0].1))];
    let before = mean_loss(&net, &probe).unwrap();
    let schedule = TrainSchedule { learning_rate: 1e-4, iterations: 1, batch_size: 1, ..Default::default() };
    let after = mean_loss(&train_classifier(net, &data, &schedule).unwrap(), &probe).unwrap();
    assert!(after < before);
}

#[test]
fn all_ignore_masks_leave_segmenter_unchanged() {
    let data: Vec<(FeatureMap, LabelImage)> = separable_set(4, 2)
        .into_iter()
        .map(|(m, _)| (m, LabelImage::filled(16, 16, IGNORE)))
        .collect();
    let seg = Network::reference_segmenter(3, 2, 3);
    let schedule = TrainSchedule { iterations: 10, batch_size: 2, ..Default::default() };
    assert_eq!(train_segmenter(seg.clone(), &data, &schedule).unwrap(), seg);
}

#[test]
fn segmenter_overfits_single_image() {
    let (img, _) = separable_set(1, 6).remove(0);
    let mut mask = LabelImage::filled(16, 16, 0);
    for y in 0..16 {
        for x in 0..8 {
            mask.set(y, x, 1);
        }
        mask.set(y, 12, IGNORE);
    }
    let data = vec![(img.clone(), mask.clone())];
    let seg = Network::reference_segmenter(3, 2, 5);
    let probe = [(&img, Target::Mask(&mask))];
    let before = mean_loss(&seg, &probe).unwrap();
    let schedule = TrainSchedule { iterations: 200, batch_size: 1, seed: 2, ..Default::default() };
    let trained = train_segmenter(seg, &data, &schedule).unwrap();
    assert!(mean_loss(&trained, &probe).unwrap() < before);
    let pred = trained.predict_mask(&img).unwrap();
    let (mut ok, mut total) = (0, 0);
    for (p, t) in pred.labels().iter().zip(mask.labels()) {
        if *t != IGNORE {
            total += 1;
            ok += usize::from(p == t);
        }
    }
    assert!(ok as f64 / total as f64 >= 0.9, "pixel accuracy {ok}/{total}");
}

#[test]
fn training_is_reproducible() {
    let data = separable_set(16, 4);
    let schedule = TrainSchedule { iterations: 20, batch_size: 4, seed: 3, ..Default::default() };
    let a = train_classifier(Network::reference_classifier(3, 2, 1), &data, &schedule).unwrap();
    let b = train_classifier(Network::reference_classifier(3, 2, 1), &data, &schedule).unwrap();
    assert_eq!(checkpoint::encode(&a), checkpoint::encode(&b));
}

#[test]
fn divergence_is_reported() {
    let data = separable_set(8, 4);
    let schedule = TrainSchedule { learning_rate: 1e6, iterations: 50, batch_size: 4, ..Default::default() };
    let r = train_classifier(Network::reference_classifier(3, 2, 1), &data, &schedule);
    assert!(matches!(r, Err(webseg::Error::Divergence { .. })));
}

#[test]
fn checkpoint_round_trips_and_rejects_truncation() {
    let net = Network::reference_segmenter(3, 4, 12);
    let bytes = checkpoint::encode(&net);
    assert_eq!(checkpoint::decode(&bytes).unwrap(), net);
    assert_eq!(checkpoint::encode(&checkpoint::decode(&bytes).unwrap()), bytes);
    match checkpoint::decode(&bytes[..bytes.len() - 3]) {
        Err(webseg::Error::Parse { offset, .. }) => assert!(offset > 0),
        other => panic!("expected parse error, got {other:?}"),
    }
    assert!(checkpoint::decode(b"NOTANET\0").is_err());
}
