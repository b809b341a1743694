//! Central-difference checks of every layer primitive, every loss term and the full
//! `{E, G}` objective on small random inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::MelSpectrogram;
use crate::dataset::{Corpus, EraLabel, LabelIndex};
use crate::diff::{
    grad_check, Activation, GradCheckOptions, GradCheckReport, Graph, SpectralState, Tensor, Var,
};
use crate::error::Result;
use crate::losses::{
    cross_entropy_graph, ragan_graph, style_loss_graph, total_loss_graph, triplet_graph,
    FeatureExtractor, LossWeights, Side,
};
use crate::mvnet::MVNetConfig;
use crate::trainer::{
    eg_grad_check, prepare_batch, step_rng, Ablation, Batch, TrainConfig, TrainState,
};

/// Acceptance threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Step for the whole-network objective. A step of 1e-5 moves thousands of ReLU and
/// pooling units at once, and some of them cross their kinks on both sides.
pub const FULL_OBJECTIVE_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < TOLERANCE
    }
}

fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let w = Tensor::randn(g.shape(y), &mut ChaCha8Rng::seed_from_u64(seed));
    let w = g.input(w);
    let p = g.mul(y, w);
    g.sum(p)
}

/// Runs every primitive and loss check with central-difference step `eps`, then the
/// whole-network objective with [`FULL_OBJECTIVE_EPS`].
pub fn run(eps: f64, seed: u64) -> Result<Vec<SuiteResult>> {
    let opts = GradCheckOptions {
        eps,
        ..GradCheckOptions::default()
    };
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &str, inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var| {
        out.push(SuiteResult {
            name: name.to_string(),
            report: grad_check(f, inputs, opts),
        });
    };

    let x = Tensor::randn(&[2, 4, 4, 3], &mut r);
    let xs = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let w3 = Tensor::randn(&[3, 3, 3, 2], &mut r);
    let w4 = Tensor::randn(&[4, 4, 3, 2], &mut r);
    let w1 = Tensor::randn(&[1, 1, 3, 4], &mut r);
    check("conv3x3", &[x.clone(), w3], &|g, v| {
        let y = g.conv2d(v[0], v[1], 1, 1);
        probe(g, y, 10)
    });
    check("conv4x4 stride 2", &[x.clone(), w4.clone()], &|g, v| {
        let y = g.conv2d(v[0], v[1], 2, 1);
        probe(g, y, 11)
    });
    check("conv1x1", &[x.clone(), w1], &|g, v| {
        let y = g.conv2d(v[0], v[1], 1, 0);
        probe(g, y, 12)
    });
    check("deconv4x4 stride 2", &[x.clone(), w4], &|g, v| {
        let y = g.deconv2d(v[0], v[1], 2, 1);
        probe(g, y, 13)
    });
    let scale = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
    let shift = Tensor::randn(&[3], &mut r);
    check(
        "batch norm (train)",
        &[x.clone(), scale.clone(), shift.clone()],
        &|g, v| {
            let (y, _) = g.batch_norm_train(v[0], v[1], v[2]);
            probe(g, y, 14)
        },
    );
    check(
        "batch norm (eval)",
        &[x.clone(), scale.clone(), shift.clone()],
        &|g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0]);
            probe(g, y, 15)
        },
    );
    check("instance norm", &[x.clone(), scale, shift], &|g, v| {
        let y = g.instance_norm(v[0], v[1], v[2]);
        probe(g, y, 16)
    });
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("leaky relu", Activation::LeakyRelu(0.2)),
        ("tanh", Activation::Tanh),
        ("sigmoid", Activation::Sigmoid),
    ] {
        check(name, std::slice::from_ref(&xs), &|g, v| {
            let y = g.activation(v[0], kind);
            probe(g, y, 17)
        });
    }
    check("max pool", std::slice::from_ref(&x), &|g, v| {
        let y = g.max_pool2(v[0]);
        probe(g, y, 18)
    });
    check("avg pool", std::slice::from_ref(&x), &|g, v| {
        let y = g.avg_pool2(v[0]);
        probe(g, y, 19)
    });
    check("bilinear resize", std::slice::from_ref(&x), &|g, v| {
        let y = g.bilinear_resize(v[0], 3, 7);
        probe(g, y, 20)
    });
    check("global avg pool", std::slice::from_ref(&x), &|g, v| {
        let y = g.global_avg_pool(v[0]);
        probe(g, y, 21)
    });
    let m = Tensor::randn(&[2, 5, 3], &mut r);
    let n = Tensor::randn(&[2, 4, 3], &mut r);
    check("batched matmul", &[m.clone(), n], &|g, v| {
        let y = g.bmm(v[0], v[1], false, true);
        probe(g, y, 22)
    });
    check("softmax", std::slice::from_ref(&m), &|g, v| {
        let y = g.softmax_last(v[0]);
        probe(g, y, 23)
    });
    check(
        "spectral normalization",
        &[Tensor::randn(&[3, 3, 2, 4], &mut r)],
        &|g, v| {
            let u = SpectralState::new(&[3, 3, 2, 4], &mut ChaCha8Rng::seed_from_u64(6)).u;
            let (w, _) = g.spectral_normalize(v[0], &u);
            probe(g, w, 24)
        },
    );
    let feat = Tensor::randn(&[1, 4, 4, 8], &mut r);
    check("self-attention", &[feat], &|g, v| {
        let mut prng = ChaCha8Rng::seed_from_u64(7);
        let p = |shape: &[usize], g: &mut Graph, rng: &mut ChaCha8Rng| {
            g.input(Tensor::randn(shape, rng).scale(0.5))
        };
        let wq = p(&[8, 1], g, &mut prng);
        let bq = p(&[1], g, &mut prng);
        let wk = p(&[8, 1], g, &mut prng);
        let bk = p(&[1], g, &mut prng);
        let wv = p(&[8, 8], g, &mut prng);
        let bv = p(&[8], g, &mut prng);
        let gamma = g.input(Tensor::new(&[1], vec![0.7]));
        let vars = crate::diff::AttentionVars {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            gamma,
        };
        let (y, _) = g.self_attention(v[0], &vars);
        probe(g, y, 25)
    });

    let va = Tensor::randn(&[3, 2, 4, 1], &mut r);
    check(
        "triplet",
        &[va.clone(), va.map(|v| v + 0.3), va.map(|v| v - 0.1)],
        &|g, x| triplet_graph(g, x[0], x[1], x[2], 1.0),
    );
    let fx = FeatureExtractor::with_widths(1, &[4, 8]);
    check(
        "style",
        &[
            Tensor::uniform(&[2, 8, 8, 3], -1.0, 1.0, &mut r),
            Tensor::uniform(&[2, 8, 8, 3], -1.0, 1.0, &mut r),
        ],
        &|g, x| style_loss_graph(g, &fx, x[0], x[1]),
    );
    let (real, fake) = (Tensor::randn(&[4], &mut r), Tensor::randn(&[3], &mut r));
    check(
        "relativistic (discriminator)",
        &[real.clone(), fake.clone()],
        &|g, x| ragan_graph(g, x[0], x[1], Side::Discriminator),
    );
    check("relativistic (generator)", &[real, fake], &|g, x| {
        ragan_graph(g, x[0], x[1], Side::Generator)
    });
    check(
        "cross-entropy",
        &[Tensor::randn(&[3, 54], &mut r)],
        &|g, x| cross_entropy_graph(g, x[0], &[0, 17, 53]).expect("labels in range"),
    );
    let w = LossWeights::default();
    check("weighted total", &[Tensor::randn(&[4], &mut r)], &|g, x| {
        let parts: Vec<Var> = (0..4)
            .map(|i| {
                let s = g.slice_batch(x[0], i, 1);
                g.sum(s)
            })
            .collect();
        total_loss_graph(
            g,
            Some(parts[0]),
            Some(parts[1]),
            Some(parts[2]),
            Some(parts[3]),
            &w,
        )
        .expect("terms present")
    });

    out.push(SuiteResult {
        name: "full objective (2-sample batch)".into(),
        report: full_objective(FULL_OBJECTIVE_EPS, seed)?,
    });
    Ok(out)
}

/// Objective gradient of a narrow network on a random 2-sample, 2-class batch.
pub fn full_objective(eps: f64, seed: u64) -> Result<GradCheckReport> {
    let (state, batch, cfg) = setup(seed)?;
    let opts = GradCheckOptions {
        eps,
        floor: 1e-4,
        max_coords: Some(2),
        seed,
    };
    eg_grad_check(&state.net, &state.extractor, &batch, &cfg, opts)
}

/// Untrained narrow network, its config and one random 2-sample batch.
pub fn setup(seed: u64) -> Result<(TrainState, Batch, TrainConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = 2;
    let n = 6;
    let music = (0..n)
        .map(|_| MelSpectrogram::from_tensor(Tensor::uniform(&[128, 256, 3], 0.0, 3.0, &mut rng)))
        .collect::<Result<Vec<_>>>()?;
    let images = (0..n)
        .map(|_| Tensor::uniform(&[80, 80, 3], 0.0, 1.0, &mut rng))
        .collect();
    let labels: Vec<EraLabel> = (0..n)
        .map(|i| EraLabel::new(i % k))
        .collect::<Result<_>>()?;
    let corpus = Corpus {
        music,
        images,
        index: LabelIndex::new(labels.clone(), labels),
        music_paths: Vec::new(),
        image_paths: Vec::new(),
    };
    let cfg = TrainConfig {
        batch: 2,
        seed,
        ablation: Ablation::Full,
        model: MVNetConfig {
            encoder_widths: vec![2, 2, 4, 4, 4],
            generator_widths: vec![8, 8],
            discriminator_widths: vec![2, 4, 4, 4],
            classifier_widths: vec![2, 4, 4, 4],
            noise_channels: 8,
            attention_blocks: 1,
            n_classes: k,
        },
        ..TrainConfig::default()
    };
    let state = TrainState::new(&cfg)?;
    let plan = corpus.index.shuffle_pairs_epoch(seed, 0);
    let mut rng = step_rng(cfg.seed, 0);
    let batch = prepare_batch(
        &corpus,
        &plan[..2],
        true,
        cfg.model.noise_channels,
        &mut rng,
    )?;
    Ok((state, batch, cfg))
}
