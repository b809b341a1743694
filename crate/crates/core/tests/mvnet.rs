use musart::audio::MelSpectrogram;
use musart::diff::{Binder, Graph, Mode, Tensor};
use musart::imaging::ImageTensor;
use musart::mvnet::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_mel(seed: u64) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MelSpectrogram::from_tensor(Tensor::uniform(&[128, 256, 3], 0.0, 3.0, &mut rng)).unwrap()
}

fn random_image(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageTensor::new(Tensor::uniform(&[64, 64, 3], -1.0, 1.0, &mut rng)).unwrap()
}

#[test]
fn full_width_layer_shapes() {
    let net = MVNet::new(MVNetConfig::default(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = net.noise(&mut rng);
    assert_eq!(z.tensor().shape(), &[8, 8, 256]);
    let trace = net.trace(&random_mel(1), &z).unwrap();
    let expected: Vec<(&str, Vec<usize>)> = vec![
        ("enc.stage0", vec![128, 256, 32]),
        ("enc.stage1", vec![64, 128, 64]),
        ("enc.stage2", vec![32, 64, 128]),
        ("enc.stage3", vec![16, 32, 256]),
        ("enc.stage4", vec![8, 16, 256]),
        ("enc.out", vec![8, 16, 1]),
        ("gen.resized_v", vec![8, 8, 1]),
        ("gen.input", vec![8, 8, 257]),
        ("gen.deconv0", vec![16, 16, 256]),
        ("gen.deconv1", vec![32, 32, 128]),
        ("gen.attn0", vec![32, 32, 128]),
        ("gen.attn1", vec![32, 32, 128]),
        ("gen.out", vec![64, 64, 3]),
        ("disc.conv0", vec![32, 32, 64]),
        ("disc.conv1", vec![16, 16, 128]),
        ("disc.conv2", vec![8, 8, 256]),
        ("disc.conv3", vec![4, 4, 256]),
        ("cls.conv0", vec![32, 32, 64]),
        ("cls.conv1", vec![16, 16, 128]),
        ("cls.conv2", vec![8, 8, 256]),
        ("cls.conv3", vec![4, 4, 256]),
        ("cls.logits", vec![54]),
    ];
    let got: Vec<(&str, Vec<usize>)> = trace
        .shapes
        .iter()
        .map(|(l, s)| (l.as_str(), s.clone()))
        .collect();
    assert_eq!(got, expected);
}

#[test]
fn encoder_is_deterministic_in_eval_mode() {
    let net = MVNet::new(MVNetConfig::desk(), 5).unwrap();
    let x = random_mel(2);
    let a = net.encode(&x).unwrap();
    let b = net.encode(&x).unwrap();
    assert_eq!(a.tensor().shape(), &[8, 16, 1]);
    assert_eq!(a.tensor().to_le_bytes(), b.tensor().to_le_bytes());
}

#[test]
fn wrong_input_shapes_are_rejected() {
    let net = MVNet::new(MVNetConfig::desk(), 5).unwrap();
    assert!(net.encode_batch(&Tensor::zeros(&[1, 64, 256, 3])).is_err());
    assert!(net
        .generate_batch(
            &Tensor::zeros(&[1, 8, 8, 1]),
            &Tensor::zeros(&[1, 8, 8, 256])
        )
        .is_err());
    assert!(net
        .generate_batch(
            &Tensor::zeros(&[1, 8, 16, 1]),
            &Tensor::zeros(&[1, 8, 8, 16])
        )
        .is_err());
    assert!(net.classify_batch(&Tensor::zeros(&[1, 32, 32, 3])).is_err());
    assert!(LatentCode::new(Tensor::zeros(&[8, 8, 1])).is_err());
}

#[test]
fn generator_output_is_bounded_and_noise_sensitive() {
    let net = MVNet::new(MVNetConfig::desk(), 6).unwrap();
    let v = net.encode(&random_mel(3)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let outs: Vec<ImageTensor> = (0..8)
        .map(|_| net.generate(&v, &net.noise(&mut rng)).unwrap())
        .collect();
    for o in &outs {
        assert_eq!(o.tensor().shape(), &[64, 64, 3]);
        assert!(o.tensor().max_abs() <= 1.0);
    }
    for i in 0..outs.len() {
        for j in i + 1..outs.len() {
            let d: f64 = outs[i]
                .tensor()
                .data()
                .iter()
                .zip(outs[j].tensor().data())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            assert!(d > 0.0);
        }
    }
}

#[test]
fn zero_gate_hides_attention_parameters() {
    let net = MVNet::new(MVNetConfig::desk(), 7).unwrap();
    let v = net.encode(&random_mel(4)).unwrap();
    let z = net.noise(&mut ChaCha8Rng::seed_from_u64(2));
    let base = net.generate(&v, &z).unwrap();
    let mut perturbed = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (name, p) in perturbed.generator.iter_mut() {
        if name.starts_with("gen.attn") && !name.ends_with("gamma") {
            p.value = Tensor::randn(p.value.shape(), &mut rng);
        }
    }
    assert_eq!(perturbed.generate(&v, &z).unwrap(), base);

    // With a nonzero gate the branch matters.
    perturbed
        .generator
        .get_mut("gen.attn0.gamma")
        .unwrap()
        .value = Tensor::new(&[1], vec![0.5]);
    assert_ne!(perturbed.generate(&v, &z).unwrap(), base);
}

#[test]
fn attention_rows_are_distributions() {
    let net = MVNet::new(MVNetConfig::desk(), 8).unwrap();
    let z = net.noise(&mut ChaCha8Rng::seed_from_u64(3));
    let trace = net.trace(&random_mel(5), &z).unwrap();
    assert_eq!(trace.attention.len(), MVNetConfig::desk().attention_blocks);
    for a in &trace.attention {
        assert_eq!(a.shape(), &[1, 1024, 1024]);
        for row in a.data().chunks(1024) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn discriminator_map_shape_and_homogeneity() {
    let net = MVNet::new(MVNetConfig::default(), 9).unwrap();
    let img = random_image(1);
    let map = net.discriminate(&img).unwrap();
    assert_eq!(map.shape(), &[4, 4, 256]);
    assert_eq!(net.discriminate(&img).unwrap(), map);

    // LeakyReLU is positively homogeneous, so doubling the last layer doubles every score.
    let mut doubled = net.clone();
    for name in ["disc.conv3.w", "disc.conv3.b"] {
        let p = doubled.discriminator.get_mut(name).unwrap();
        p.value = p.value.scale(2.0);
    }
    let map2 = doubled.discriminate(&img).unwrap();
    let mut positives = 0;
    for (a, b) in map.data().iter().zip(map2.data()) {
        if *a > 0.0 {
            positives += 1;
            assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
    assert!(positives > 0);
}

#[test]
fn classifier_logits() {
    let mut net = MVNet::new(MVNetConfig::desk(), 10).unwrap();
    let img = random_image(2);
    let logits = net.classify(&img).unwrap();
    assert_eq!(logits.len(), 54);
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);

    net.classifier.get_mut("cls.head.w").unwrap().value = Tensor::zeros(&[32, 54]);
    let logits = net.classify(&img).unwrap();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    let ce = lse - logits[7];
    assert!((ce - 54f64.ln()).abs() < 1e-12);
}

#[test]
fn critic_gradients_reach_generator_but_not_data() {
    let net = MVNet::new(MVNetConfig::desk(), 11).unwrap();
    let cfg = &net.config;
    let mut g = Graph::new();
    let mut be = Binder::new(&net.encoder, true);
    let mut bg = Binder::new(&net.generator, true);
    let mut bc = Binder::new(&net.classifier, false);
    let mut bd = Binder::new(&net.discriminator, false);
    let x = g.input(Tensor::stack(&[
        random_mel(6).tensor(),
        random_mel(7).tensor(),
    ]));
    let y = g.input(Tensor::stack(&[
        random_image(3).tensor(),
        random_image(4).tensor(),
    ]));
    let v = encoder_forward(&mut g, &mut be, cfg, x, Mode::Train, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = g.input(Tensor::randn(&[2, 8, 8, 256], &mut rng));
    let m = generator_forward(&mut g, &mut bg, cfg, v, z, None).unwrap();
    let both = g.concat_batch(&[m, y]);
    let logits = classifier_forward(&mut g, &mut bc, cfg, both, None).unwrap();
    let s = discriminator_scores(&mut g, &mut bd, cfg, both).unwrap();
    let a = g.sum(logits);
    let b = g.sum(s);
    let loss = g.add(a, b);
    let grads = g.backward(loss);
    assert!(grads.get(y).is_none());
    assert!(grads.get(x).is_none());
    let gg = bg.grads(&grads);
    assert!(gg
        .iter()
        .any(|(n, t)| n == "gen.deconv2.w" && t.max_abs() > 0.0));
    assert!(be.grads(&grads).iter().any(|(_, t)| t.max_abs() > 0.0));
    assert!(bc.grads(&grads).is_empty());
    assert!(bd.grads(&grads).is_empty());
}

#[test]
fn seeded_init_is_reproducible() {
    let a = MVNet::new(MVNetConfig::desk(), 42).unwrap();
    let b = MVNet::new(MVNetConfig::desk(), 42).unwrap();
    let c = MVNet::new(MVNetConfig::desk(), 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let x = random_mel(8);
    let z = a.noise(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(
        a.visualize(&x, &z).unwrap().tensor().to_le_bytes(),
        b.visualize(&x, &z).unwrap().tensor().to_le_bytes()
    );
}
