use musart::diff::conv::resize_bilinear;
use musart::diff::{
    grad_check, Activation, GradCheckOptions, Graph, SpectralState, Tensor, Var, NORM_EPS,
};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weighted sum with fixed random weights so every output element matters.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let w = Tensor::randn(g.shape(y), &mut rng(seed));
    let w = g.input(w);
    let p = g.mul(y, w);
    g.sum(p)
}

fn check(name: &str, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let rep = grad_check(f, inputs, GradCheckOptions::default());
    assert!(
        rep.max_rel_err < 1e-6,
        "{name}: rel err {} at {:?}",
        rep.max_rel_err,
        rep.worst
    );
}

#[test]
fn conv2d_output_shape_matches_encoder_first_row() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 128, 256, 3]));
    let w = g.input(Tensor::zeros(&[3, 3, 3, 32]));
    let y = g.conv2d(x, w, 1, 1);
    assert_eq!(g.shape(y), &[1, 128, 256, 32]);
}

#[test]
fn pointwise_identity_conv_is_identity() {
    let mut g = Graph::new();
    let xt = Tensor::randn(&[2, 3, 4, 5], &mut rng(1));
    let mut eye = Tensor::zeros(&[1, 1, 5, 5]);
    for c in 0..5 {
        eye.data_mut()[c * 5 + c] = 1.0;
    }
    let x = g.input(xt.clone());
    let w = g.input(eye);
    let y = g.conv2d(x, w, 1, 0);
    assert_eq!(g.value(y), &xt);
}

#[test]
fn strided_all_ones_conv_matches_hand_result() {
    let mut g = Graph::new();
    let x = g.input(Tensor::ones(&[1, 4, 4, 1]));
    let w = g.input(Tensor::ones(&[2, 2, 1, 1]));
    let y = g.conv2d(x, w, 2, 0);
    assert_eq!(g.shape(y), &[1, 2, 2, 1]);
    assert!(g.value(y).data().iter().all(|&v| v == 4.0));
}

#[test]
fn deconv_shapes_match_generator_rows() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 8, 8, 257]));
    let w = g.input(Tensor::zeros(&[4, 4, 257, 256]));
    let y = g.deconv2d(x, w, 2, 1);
    assert_eq!(g.shape(y), &[1, 16, 16, 256]);
    let x = g.input(Tensor::zeros(&[1, 32, 32, 128]));
    let w = g.input(Tensor::zeros(&[4, 4, 128, 3]));
    let y = g.deconv2d(x, w, 2, 1);
    assert_eq!(g.shape(y), &[1, 64, 64, 3]);
}

/// `<deconv(x), y> = <x, conv(y)>` with the conv kernel `W'[a,b,co,ci] = W[a,b,ci,co]`.
#[test]
fn deconv_is_adjoint_of_tied_conv() {
    let mut r = rng(2);
    for (h, ci, co, k, s, p) in [(3, 2, 3, 4, 2, 1), (4, 3, 2, 3, 1, 1), (5, 1, 2, 4, 2, 1)] {
        let w = Tensor::randn(&[k, k, ci, co], &mut r);
        let mut wt = Tensor::zeros(&[k, k, co, ci]);
        for ab in 0..k * k {
            for i in 0..ci {
                for o in 0..co {
                    wt.data_mut()[(ab * co + o) * ci + i] = w.data()[(ab * ci + i) * co + o];
                }
            }
        }
        let x = Tensor::randn(&[2, h, h, ci], &mut r);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w);
        let dx = g.deconv2d(xv, wv, s, p);
        let oshape = g.shape(dx).to_vec();
        let y = Tensor::randn(&oshape, &mut r);
        let yv = g.input(y.clone());
        let wtv = g.input(wt);
        let cy = g.conv2d(yv, wtv, s, p);
        assert_eq!(g.shape(cy), x.shape());
        let lhs = g.value(dx).dot(&y);
        let rhs = x.dot(g.value(cy));
        assert!(
            (lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0),
            "{lhs} vs {rhs}"
        );
    }
}

/// Each linear op's backward is its adjoint: `<A x, y> = <x, A^T y>`.
#[test]
fn backward_passes_are_adjoint_for_linear_ops() {
    let mut r = rng(3);
    let x0 = Tensor::randn(&[2, 6, 4, 3], &mut r);
    let ops: Vec<(&str, Box<dyn Fn(&mut Graph, Var) -> Var>)> = vec![
        ("avg_pool2", Box::new(|g, x| g.avg_pool2(x))),
        ("upsample2", Box::new(|g, x| g.upsample2(x))),
        ("bilinear", Box::new(|g, x| g.bilinear_resize(x, 5, 7))),
        ("gap", Box::new(|g, x| g.global_avg_pool(x))),
    ];
    for (name, op) in ops {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = op(&mut g, x);
        let ys = Tensor::randn(g.shape(y), &mut r);
        let lhs = g.value(y).dot(&ys);
        let grads = g.backward_with(y, ys);
        let rhs = x0.dot(grads.get(x).unwrap());
        assert!(
            (lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0),
            "{name}: {lhs} vs {rhs}"
        );
    }
}

#[test]
fn primitive_gradients_match_central_differences() {
    let mut r = rng(4);
    let x = Tensor::randn(&[2, 4, 4, 3], &mut r);
    let w3 = Tensor::randn(&[3, 3, 3, 2], &mut r);
    let w4 = Tensor::randn(&[4, 4, 3, 2], &mut r);
    let w1 = Tensor::randn(&[1, 1, 3, 4], &mut r);
    check("conv3x3", &[x.clone(), w3.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 1);
        probe(g, y, 10)
    });
    check("conv4x4s2", &[x.clone(), w4.clone()], |g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1);
        probe(g, y, 11)
    });
    check("conv1x1", &[x.clone(), w1], |g, v| {
        let y = g.conv2d(v[0], v[1], 1, 0);
        probe(g, y, 12)
    });
    check("deconv", &[x.clone(), w4], |g, v| {
        let y = g.deconv2d(v[0], v[1], 2, 1);
        probe(g, y, 13)
    });
    let scale = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
    let shift = Tensor::randn(&[3], &mut r);
    check(
        "batch_norm_train",
        &[x.clone(), scale.clone(), shift.clone()],
        |g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2]);
            probe(g, y, 14)
        },
    );
    check(
        "batch_norm_eval",
        &[x.clone(), scale.clone(), shift.clone()],
        |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0]);
            probe(g, y, 15)
        },
    );
    check("instance_norm", &[x.clone(), scale, shift], |g, v| {
        let y = g.instance_norm(v[0], v[1], v[2]);
        probe(g, y, 16)
    });
    // Inputs nudged away from 0 so no central difference straddles a kink.
    let xs = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("leaky", Activation::LeakyRelu(0.2)),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
    ] {
        check(name, std::slice::from_ref(&xs), |g, v| {
            let y = g.activation(v[0], kind);
            probe(g, y, 17)
        });
    }
    check("max_pool2", std::slice::from_ref(&x), |g, v| {
        let y = g.max_pool2(v[0]);
        probe(g, y, 18)
    });
    check("avg_pool2", std::slice::from_ref(&x), |g, v| {
        let y = g.avg_pool2(v[0]);
        probe(g, y, 19)
    });
    check("bilinear", std::slice::from_ref(&x), |g, v| {
        let y = g.bilinear_resize(v[0], 3, 7);
        probe(g, y, 20)
    });
    check("softplus/abs/square", std::slice::from_ref(&xs), |g, v| {
        let a = g.softplus(v[0]);
        let b = g.abs(v[0]);
        let c = g.square(v[0]);
        let s = g.add_n(&[a, b, c]);
        probe(g, s, 21)
    });
    let m = Tensor::randn(&[2, 5, 3], &mut r);
    let n = Tensor::randn(&[2, 4, 3], &mut r);
    check("bmm^T", &[m.clone(), n.clone()], |g, v| {
        let y = g.bmm(v[0], v[1], false, true);
        probe(g, y, 22)
    });
    check(
        "bmm T",
        &[m.clone(), Tensor::randn(&[2, 5, 2], &mut rng(5))],
        |g, v| {
            let y = g.bmm(v[0], v[1], true, false);
            probe(g, y, 23)
        },
    );
    check("softmax", std::slice::from_ref(&m), |g, v| {
        let y = g.softmax_last(v[0]);
        probe(g, y, 24)
    });
    check(
        "log_softmax+gather",
        &[Tensor::randn(&[3, 6], &mut r)],
        |g, v| {
            let y = g.log_softmax_last(v[0]);
            let p = g.gather_rows(y, &[0, 5, 2]);
            probe(g, p, 25)
        },
    );
    check(
        "concat/scale_by/div_by",
        &[m.clone(), Tensor::scalar(1.7)],
        |g, v| {
            let c = g.concat_channels(v[0], v[0]);
            let s = g.scale_by(c, v[1]);
            let d = g.div_by(s, v[1]);
            let e = g.mul(d, s);
            probe(g, e, 26)
        },
    );
    check(
        "spectral_normalize",
        &[Tensor::randn(&[3, 3, 2, 4], &mut r)],
        |g, v| {
            let u = SpectralState::new(&[3, 3, 2, 4], &mut rng(6)).u;
            let (w, _) = g.spectral_normalize(v[0], &u);
            probe(g, w, 27)
        },
    );
}

#[test]
fn max_pool_routes_gradient_to_block_maximum() {
    let mut g = Graph::new();
    let x = g.param(Tensor::new(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]));
    let y = g.max_pool2(x);
    assert_eq!(g.value(y).data(), &[4.0]);
    let grads = g.backward(y);
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 2, 2, 1], 5.0));
    let y = g.max_pool2(x);
    let grads = g.backward(y);
    assert_eq!(
        grads.get(x).unwrap().data(),
        &[1.0, 0.0, 0.0, 0.0],
        "ties go to the first element"
    );
}

#[test]
fn max_pool_halves_constant_tensors() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 128, 256, 4], 0.5));
    let y = g.max_pool2(x);
    assert_eq!(g.shape(y), &[1, 64, 128, 4]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.5));
}

fn channel_stats(t: &Tensor, n_range: std::ops::Range<usize>, ch: usize) -> (f64, f64) {
    let (_, h, w, c) = t.dims4();
    let vals: Vec<f64> = n_range
        .flat_map(|s| (0..h * w).map(move |p| (s, p)))
        .map(|(s, p)| t.data()[(s * h * w + p) * c + ch])
        .collect();
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
    (m, v)
}

#[test]
fn batch_norm_standardizes_each_channel() {
    let x = Tensor::randn(&[3, 4, 5, 2], &mut rng(7)).map(|v| 3.0 * v + 1.5);
    let mut g = Graph::new();
    let xv = g.input(x);
    let s = g.input(Tensor::ones(&[2]));
    let b = g.input(Tensor::zeros(&[2]));
    let (y, _) = g.batch_norm_train(xv, s, b);
    for ch in 0..2 {
        let (m, v) = channel_stats(g.value(y), 0..3, ch);
        assert!(m.abs() < 1e-5 && (v - 1.0).abs() < 1e-5, "{m} {v}");
    }
    // Already standardized (mean 0, variance 1): unchanged.
    let again = Tensor::new(
        &[2, 2, 2, 2],
        (0..16)
            .map(|i| if (i / 2) % 2 == 0 { 1.0 } else { -1.0 })
            .collect(),
    );
    let yv = g.input(again.clone());
    let (z, _) = g.batch_norm_train(yv, s, b);
    for (a, b) in g.value(z).data().iter().zip(again.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batch_norm_two_values_map_to_plus_minus_one() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]));
    let s = g.input(Tensor::ones(&[1]));
    let b = g.input(Tensor::zeros(&[1]));
    let (y, stats) = g.batch_norm_train(x, s, b);
    let want = 1.0 / (1.0f64 + NORM_EPS).sqrt();
    assert!((g.value(y).data()[0] + want).abs() < 1e-12);
    assert!((g.value(y).data()[1] - want).abs() < 1e-12);
    assert_eq!(stats.mean, vec![2.0]);
    assert!(
        (stats.var[0] - 2.0).abs() < 1e-12,
        "unbiased variance of {{1,3}}"
    );
}

#[test]
fn instance_norm_is_per_sample() {
    let mut x = Tensor::randn(&[2, 3, 3, 2], &mut rng(8));
    for v in &mut x.data_mut()[18..] {
        *v = *v * 10.0 - 4.0;
    }
    // Channel 1 of sample 0 is constant.
    for p in 0..9 {
        x.data_mut()[p * 2 + 1] = 7.0;
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let s = g.input(Tensor::ones(&[2]));
    let b = g.input(Tensor::zeros(&[2]));
    let y = g.instance_norm(xv, s, b);
    let out = g.value(y).clone();
    assert!(out.is_finite());
    for p in 0..9 {
        assert_eq!(out.data()[p * 2 + 1], 0.0);
    }
    for (sample, ch) in [(0, 0), (1, 0), (1, 1)] {
        let (m, v) = channel_stats(&out, sample..sample + 1, ch);
        assert!(m.abs() < 1e-5 && (v.sqrt() - 1.0).abs() < 1e-5);
        // Closed form per sample.
        let (m0, v0) = channel_stats(&x, sample..sample + 1, ch);
        let first = out.data()[(sample * 9) * 2 + ch];
        let want = (x.data()[(sample * 9) * 2 + ch] - m0) / (v0 + NORM_EPS).sqrt();
        assert!((first - want).abs() < 1e-12);
    }
}

#[test]
fn activation_values() {
    let mut g = Graph::new();
    let x = g.input(Tensor::new(&[3], vec![-1.0, 2.0, -10.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    let l = g.leaky_relu(x, 0.2);
    assert_eq!(g.value(l).data()[2], -2.0);
    let big = g.input(Tensor::new(&[4], vec![-1e3, -3.0, 3.0, 1e3]));
    let t = g.tanh(big);
    assert!(g.value(t).data().iter().all(|v| v.abs() <= 1.0));
    let t = g.tanh(x);
    assert!(g.value(t).data().iter().all(|v| v.abs() < 1.0));
}

fn sigma_max(t: &Tensor) -> f64 {
    let c = *t.shape().last().unwrap();
    let r = t.len() / c;
    let m = DMatrix::from_row_slice(r, c, t.data());
    // Largest eigenvalue of M^T M as an independent oracle.
    let mtm = m.transpose() * &m;
    mtm.symmetric_eigenvalues().max().sqrt()
}

#[test]
fn spectral_normalization_of_diagonal_and_orthogonal() {
    let mut st = SpectralState { u: vec![0.6, 0.8] };
    let w = Tensor::new(&[2, 2], vec![3.0, 0.0, 0.0, 1.0]);
    let n = st.normalize(&w, 60);
    for (a, b) in n.data().iter().zip([1.0, 0.0, 0.0, 1.0 / 3.0]) {
        assert!((a - b).abs() < 1e-9, "{n:?}");
    }
    let th = 0.3f64;
    let rot = Tensor::new(&[2, 2], vec![th.cos(), -th.sin(), th.sin(), th.cos()]);
    let n = SpectralState { u: vec![1.0, 0.0] }.normalize(&rot, 1);
    for (a, b) in n.data().iter().zip(rot.data()) {
        assert!((a - b).abs() < 1e-3);
    }
    let zero = Tensor::zeros(&[3, 2]);
    assert_eq!(
        SpectralState { u: vec![1.0, 0.0] }.normalize(&zero, 5),
        zero
    );
}

#[test]
fn spectral_normalization_of_random_matrix() {
    let mut r = rng(9);
    let w = Tensor::randn(&[8, 8], &mut r);
    let mut st = SpectralState::new(&[8, 8], &mut r);
    let n = st.normalize(&w, 50);
    let s = sigma_max(&n);
    assert!((s - 1.0).abs() < 1e-2, "sigma after normalization {s}");
    assert!(s <= 1.0 + 1e-3);
}

#[test]
fn bilinear_resize_examples() {
    let mut r = rng(10);
    let x = Tensor::randn(&[1, 8, 16, 1], &mut r);
    let y = resize_bilinear(&x, 8, 8);
    assert_eq!(y.shape(), &[1, 8, 8, 1]);
    // Half-pixel centres: halving the width averages adjacent column pairs.
    for i in 0..8 {
        for j in 0..8 {
            let want = 0.5 * (x.data()[i * 16 + 2 * j] + x.data()[i * 16 + 2 * j + 1]);
            assert!((y.data()[i * 8 + j] - want).abs() < 1e-12);
        }
    }
    assert_eq!(resize_bilinear(&x, 8, 16), x);
    let c = Tensor::full(&[1, 3, 5, 2], 0.25);
    assert!(resize_bilinear(&c, 7, 2)
        .data()
        .iter()
        .all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut r = rng(11);
        let mut g = Graph::new();
        let x = g.param(Tensor::randn(&[2, 8, 8, 3], &mut r));
        let w = g.param(Tensor::randn(&[3, 3, 3, 4], &mut r));
        let y = g.conv2d(x, w, 1, 1);
        let y = g.relu(y);
        let y = g.max_pool2(y);
        let l = probe(&mut g, y, 12);
        let grads = g.backward(l);
        (
            g.value(l).item().to_bits(),
            grads.get(w).unwrap().to_le_bytes(),
        )
    };
    assert_eq!(run(), run());
}
