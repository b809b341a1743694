//! MVNet training: one discriminator, one classifier and one encoder/generator update
//! per step, epoch checkpoints, resumption and era-classification evaluation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, PairIndex};
use crate::diff::gradcheck::{rel_err, straddles_kink};
use crate::diff::{
    AdamConfig, AdamState, Binder, Checkpoint, GradCheckOptions, GradCheckReport, Graph, Mode,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::imaging::write_file;
use crate::losses::{
    batch_grams, cross_entropy_graph, ragan_graph, style_loss_to_grams, total_loss_graph,
    triplet_graph, FeatureExtractor, LossWeights, Side,
};
use crate::mvnet::{
    classifier_forward, discriminator_scores, encoder_forward, generator_forward, MVNet,
    MVNetConfig, NoiseCode, SubNet,
};

const STEP_STREAM: u64 = 1 << 40;
const EVAL_STREAM: u64 = 2 << 40;

/// Parameter gradients by name.
pub type NamedGrads = Vec<(String, Tensor)>;

/// Which terms train `{E, G}` and which auxiliary networks are updated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Style term only; D and C stay frozen.
    StyleOnly,
    /// Style, triplet and generator-side classification; D stays frozen.
    ClsTrip,
    #[default]
    Full,
}

impl Ablation {
    pub fn trains_discriminator(self) -> bool {
        self == Self::Full
    }

    pub fn trains_classifier(self) -> bool {
        self != Self::StyleOnly
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "style" | "style_only" => Ok(Self::StyleOnly),
            "cls_trip" => Ok(Self::ClsTrip),
            "full" => Ok(Self::Full),
            other => Err(Error::invalid(format!(
                "unknown ablation {other:?} (expected style, cls_trip or full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub model: MVNetConfig,
    /// Generated samples scored by the era classifier after every epoch; 0 disables.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch: 16,
            weight_decay: 1e-4,
            epochs: 30,
            seed: 0,
            weights: LossWeights::default(),
            ablation: Ablation::Full,
            model: MVNetConfig::default(),
            eval_samples: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!(
                "batch size {} is below 2",
                self.batch
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} outside [0, 1)")));
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay {} is negative",
                self.weight_decay
            )));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub net: MVNet,
    pub extractor: FeatureExtractor,
    pub opt_e: AdamState,
    pub opt_g: AdamState,
    pub opt_d: AdamState,
    pub opt_c: AdamState,
    pub epoch: usize,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let a = cfg.adam();
        Ok(Self {
            net: MVNet::new(cfg.model.clone(), cfg.seed)?,
            extractor: FeatureExtractor::new(cfg.seed),
            opt_e: AdamState::new(a),
            opt_g: AdamState::new(a),
            opt_d: AdamState::new(a),
            opt_c: AdamState::new(a),
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({}));
        self.net.write_checkpoint(&mut ck);
        for (group, st) in [
            ("e", &self.opt_e),
            ("g", &self.opt_g),
            ("d", &self.opt_d),
            ("c", &self.opt_c),
        ] {
            ck.put_adam(group, st);
        }
        ck.meta["extractor"] = self.extractor.meta();
        ck.meta["train"] =
            serde_json::json!({ "epoch": self.epoch, "step": self.step, "config": cfg });
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let bad = |reason: &str| Error::Checkpoint {
            path: PathBuf::new(),
            reason: reason.to_string(),
        };
        let train = ck
            .meta
            .get("train")
            .ok_or_else(|| bad("no training metadata"))?;
        let cfg: TrainConfig =
            serde_json::from_value(train["config"].clone()).map_err(|e| bad(&e.to_string()))?;
        let state = Self {
            net: MVNet::from_checkpoint(ck)?,
            extractor: FeatureExtractor::from_meta(&ck.meta["extractor"])?,
            opt_e: ck.get_adam("e")?,
            opt_g: ck.get_adam("g")?,
            opt_d: ck.get_adam("d")?,
            opt_c: ck.get_adam("c")?,
            epoch: train["epoch"].as_u64().ok_or_else(|| bad("epoch"))? as usize,
            step: train["step"].as_u64().ok_or_else(|| bad("step"))?,
        };
        Ok((state, cfg))
    }
}

/// Tensors for one step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub labels: Vec<usize>,
    /// Positive and negative music for each anchor; absent when no triplet term is used.
    pub triplets: Option<(Tensor, Tensor)>,
    pub z: Tensor,
}

/// RNG for the sampling of global step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STEP_STREAM + step);
    rng
}

/// Augments the images, draws triplet partners for each music anchor and fresh noise.
pub fn prepare_batch<R: Rng>(
    corpus: &Corpus,
    pairs: &[PairIndex],
    with_triplets: bool,
    noise_channels: usize,
    rng: &mut R,
) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(Error::Dataset("empty batch".into()));
    }
    let mut ys = Vec::with_capacity(pairs.len());
    for p in pairs {
        ys.push(crate::dataset::augment_image(&corpus.images[p.image], rng)?.into_tensor());
    }
    let x = Tensor::stack(
        &pairs
            .iter()
            .map(|p| corpus.music[p.music].tensor())
            .collect::<Vec<_>>(),
    );
    let triplets = if with_triplets {
        let mut pos = Vec::with_capacity(pairs.len());
        let mut neg = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (ip, ineg) = corpus.index.sample_triplet_for(p.music, rng)?;
            pos.push(corpus.music[ip].tensor());
            neg.push(corpus.music[ineg].tensor());
        }
        Some((Tensor::stack(&pos), Tensor::stack(&neg)))
    } else {
        None
    };
    let zs: Vec<Tensor> = (0..pairs.len())
        .map(|_| NoiseCode::sample(noise_channels, rng).tensor().clone())
        .collect();
    Ok(Batch {
        x,
        y: Tensor::stack(&ys.iter().collect::<Vec<_>>()),
        labels: pairs.iter().map(|p| p.label.index()).collect(),
        triplets,
        z: Tensor::stack(&zs.iter().collect::<Vec<_>>()),
    })
}

/// Loss values of one step. Inactive terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    /// Discriminator-side relativistic loss.
    pub d: f64,
    /// Classifier cross-entropy on real images.
    pub cls_c: f64,
    /// Generator-side relativistic loss.
    pub adv: f64,
    pub tri: f64,
    pub sty: f64,
    /// Classifier cross-entropy on generated images.
    pub cls_g: f64,
    /// Weighted objective of `{E, G}`.
    pub total: f64,
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// One optimization step: D, then C, then `{E, G}`. The fakes seen by D come from the
/// same `{E, G}` forward pass that is later differentiated, since neither changes
/// before its own update. Parameters only move after their loss was found finite.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepLosses> {
    let ab = cfg.ablation;
    let mut out = StepLosses::default();
    if batch.labels.len() < 2 {
        return Err(Error::invalid("a training batch needs at least 2 pairs"));
    }

    let mut g = Graph::new();
    let mut be = Binder::new(&state.net.encoder, true);
    let mut bg = Binder::new(&state.net.generator, true);
    let xv = g.input(batch.x.clone());
    let zv = g.input(batch.z.clone());
    let v = encoder_forward(&mut g, &mut be, &cfg.model, xv, Mode::Train, None)?;
    let m = generator_forward(&mut g, &mut bg, &cfg.model, v, zv, None)?;

    if ab.trains_discriminator() {
        let mut gd = Graph::new();
        let mut bd = Binder::new(&state.net.discriminator, true);
        let real = gd.input(batch.y.clone());
        let fake = gd.input(g.value(m).clone());
        let sr = discriminator_scores(&mut gd, &mut bd, &cfg.model, real)?;
        let sf = discriminator_scores(&mut gd, &mut bd, &cfg.model, fake)?;
        let loss = ragan_graph(&mut gd, sr, sf, Side::Discriminator);
        out.d = finite(gd.value(loss).item(), "discriminator loss")?;
        let grads = gd.backward(loss);
        let named = bd.grads(&grads);
        state.opt_d.step(&mut state.net.discriminator, &named)?;
    }

    if ab.trains_classifier() {
        let mut gc = Graph::new();
        let mut bc = Binder::new(&state.net.classifier, true);
        let real = gc.input(batch.y.clone());
        let logits = classifier_forward(&mut gc, &mut bc, &cfg.model, real, None)?;
        let loss = cross_entropy_graph(&mut gc, logits, &batch.labels)?;
        out.cls_c = finite(gc.value(loss).item(), "classifier loss")?;
        let grads = gc.backward(loss);
        let named = bc.grads(&grads);
        state.opt_c.step(&mut state.net.classifier, &named)?;
    }

    let bd = Binder::new(&state.net.discriminator, false);
    let bc = Binder::new(&state.net.classifier, false);
    let terms = eg_terms(&mut g, &mut be, bd, bc, &state.extractor, batch, cfg, v, m)?;
    let total = terms.total;
    terms.record(&g, &mut out)?;
    let grads = g.backward(total);
    let (ge, gg) = (be.grads(&grads), bg.grads(&grads));
    let (_, bn) = be.into_updates();
    let (sn, _) = bg.into_updates();
    state.opt_e.step(&mut state.net.encoder, &ge)?;
    state.opt_g.step(&mut state.net.generator, &gg)?;
    state.net.encoder.apply_bn_updates(bn);
    state.net.generator.apply_spectral_updates(sn);
    state.step += 1;
    Ok(out)
}

/// Graph nodes of the `{E, G}` objective.
struct EgTerms {
    adv: Option<Var>,
    tri: Option<Var>,
    sty: Var,
    cls_g: Option<Var>,
    total: Var,
}

impl EgTerms {
    fn record(&self, g: &Graph, out: &mut StepLosses) -> Result<()> {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        out.adv = val(self.adv);
        out.tri = val(self.tri);
        out.sty = g.value(self.sty).item();
        out.cls_g = val(self.cls_g);
        out.total = finite(g.value(self.total).item(), "total loss")?;
        Ok(())
    }
}

/// Adds the ablation's `{E, G}` terms on top of an encoder output `v` and generated
/// batch `m`, with D and C frozen.
#[allow(clippy::too_many_arguments)]
fn eg_terms(
    g: &mut Graph,
    be: &mut Binder,
    mut bd: Binder,
    mut bc: Binder,
    fx: &FeatureExtractor,
    batch: &Batch,
    cfg: &TrainConfig,
    v: Var,
    m: Var,
) -> Result<EgTerms> {
    let w = &cfg.weights;
    let ab = cfg.ablation;
    let targets = batch_grams(fx, &batch.y);
    let sty = style_loss_to_grams(g, fx, m, &targets);
    let (mut adv, mut tri, mut cls_g): (Option<Var>, Option<Var>, Option<Var>) = (None, None, None);
    if ab != Ablation::StyleOnly {
        let (xp, xn) = batch
            .triplets
            .as_ref()
            .ok_or_else(|| Error::invalid("batch has no triplets"))?;
        let xp = g.input(xp.clone());
        let xn = g.input(xn.clone());
        let vp = encoder_forward(g, be, &cfg.model, xp, Mode::Train, None)?;
        let vn = encoder_forward(g, be, &cfg.model, xn, Mode::Train, None)?;
        tri = Some(triplet_graph(g, v, vp, vn, w.margin));
        let logits = classifier_forward(g, &mut bc, &cfg.model, m, None)?;
        cls_g = Some(cross_entropy_graph(g, logits, &batch.labels)?);
    }
    if ab == Ablation::Full {
        let real = g.input(batch.y.clone());
        let sr = discriminator_scores(g, &mut bd, &cfg.model, real)?;
        let sf = discriminator_scores(g, &mut bd, &cfg.model, m)?;
        adv = Some(ragan_graph(g, sr, sf, Side::Generator));
    }
    let total =
        total_loss_graph(g, adv, tri, Some(sty), cls_g, w).expect("style term is always present");
    Ok(EgTerms {
        adv,
        tri,
        sty,
        cls_g,
        total,
    })
}

fn eg_eval(
    net: &MVNet,
    fx: &FeatureExtractor,
    batch: &Batch,
    cfg: &TrainConfig,
    with_grads: bool,
) -> Result<(StepLosses, NamedGrads, NamedGrads)> {
    let mut g = Graph::new();
    let mut be = Binder::new(&net.encoder, with_grads);
    let mut bg = Binder::new(&net.generator, with_grads);
    let xv = g.input(batch.x.clone());
    let zv = g.input(batch.z.clone());
    let v = encoder_forward(&mut g, &mut be, &cfg.model, xv, Mode::Train, None)?;
    let m = generator_forward(&mut g, &mut bg, &cfg.model, v, zv, None)?;
    let bd = Binder::new(&net.discriminator, false);
    let bc = Binder::new(&net.classifier, false);
    let terms = eg_terms(&mut g, &mut be, bd, bc, fx, batch, cfg, v, m)?;
    let mut out = StepLosses::default();
    terms.record(&g, &mut out)?;
    if !with_grads {
        return Ok((out, Vec::new(), Vec::new()));
    }
    let grads = g.backward(terms.total);
    Ok((out, be.grads(&grads), bg.grads(&grads)))
}

/// The `{E, G}` objective and its gradients at the current parameters, with nothing
/// updated. Returns the loss values and the encoder and generator gradients.
pub fn eg_objective(
    net: &MVNet,
    fx: &FeatureExtractor,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(StepLosses, NamedGrads, NamedGrads)> {
    eg_eval(net, fx, batch, cfg, true)
}

/// Central-difference check of the `{E, G}` objective gradient. Inputs are numbered
/// over the encoder gradients followed by the generator gradients. At coordinates
/// within `eps` of a ReLU, pooling or hinge kink the analytic value must match one
/// of the one-sided differences instead.
pub fn eg_grad_check(
    net: &MVNet,
    fx: &FeatureExtractor,
    batch: &Batch,
    cfg: &TrainConfig,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, ge, gg) = eg_objective(net, fx, batch, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work = net.clone();
    let named = ge
        .iter()
        .map(|g| (SubNet::Encoder, g))
        .chain(gg.iter().map(|g| (SubNet::Generator, g)));
    for (i, (sub, (name, grad))) in named.enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < grad.len() => {
                rand::seq::index::sample(&mut rng, grad.len(), k).into_vec()
            }
            _ => (0..grad.len()).collect(),
        };
        for j in coords {
            let orig = net.params(sub).value(name)?.data()[j];
            let mut at = |x: f64| -> Result<f64> {
                work.params_mut(sub)
                    .get_mut(name)
                    .expect("named parameter")
                    .value
                    .data_mut()[j] = x;
                Ok(eg_eval(&work, fx, batch, cfg, false)?.0.total)
            };
            let fp = at(orig + opts.eps)?;
            let fm = at(orig - opts.eps)?;
            let f0 = at(orig)?;
            let numeric = (fp - fm) / (2.0 * opts.eps);
            let a = grad.data()[j];
            let mut e = rel_err(a, numeric, opts.floor);
            if straddles_kink(fm, f0, fp, opts.eps, opts.floor) {
                report.kinks += 1;
                let one_sided = [(fp - f0) / opts.eps, (f0 - fm) / opts.eps];
                e = one_sided
                    .iter()
                    .map(|&s| rel_err(a, s, opts.floor))
                    .fold(e, f64::min);
            }
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Fraction of generated images whose predicted class matches the music's label.
/// `classify` maps an `[N, 64, 64, 3]` batch to `[N, K]` logits.
pub fn eval_with(
    net: &MVNet,
    music: &[(&Tensor, usize)],
    n_samples: usize,
    rng: &mut ChaCha8Rng,
    classify: &mut dyn FnMut(&Tensor) -> Result<Tensor>,
) -> Result<f64> {
    if music.is_empty() || n_samples == 0 {
        return Err(Error::Dataset(
            "era accuracy needs at least one music clip and sample".into(),
        ));
    }
    const CHUNK: usize = 16;
    let mut correct = 0;
    let mut i = 0;
    while i < n_samples {
        let idx: Vec<usize> = (i..(i + CHUNK).min(n_samples))
            .map(|k| k % music.len())
            .collect();
        let x = Tensor::stack(&idx.iter().map(|&k| music[k].0).collect::<Vec<_>>());
        let zs: Vec<Tensor> = idx
            .iter()
            .map(|_| net.noise(rng).tensor().clone())
            .collect();
        let v = net.encode_batch(&x)?;
        let m = net.generate_batch(&v, &Tensor::stack(&zs.iter().collect::<Vec<_>>()))?;
        let logits = classify(&m)?;
        let k = logits.shape()[1];
        for (row, &j) in logits.data().chunks(k).zip(&idx) {
            let pred = row
                .iter()
                .enumerate()
                .fold(0, |best, (c, &v)| if v > row[best] { c } else { best });
            correct += usize::from(pred == music[j].1);
        }
        i += idx.len();
    }
    Ok(correct as f64 / n_samples as f64)
}

/// Accuracy of the network's own classifier on `n_samples` generated images with
/// fresh noise, cycling through the music clips.
pub fn eval_era_accuracy(
    net: &MVNet,
    music: &[(&Tensor, usize)],
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    eval_with(net, music, n_samples, rng, &mut |m| net.classify_batch(m))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    /// Per-step means.
    pub losses: StepLosses,
    pub era_accuracy: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(format!("epoch_{epoch}.ck"))
}

pub const REPORT_FILE: &str = "report.jsonl";
pub const CONFIG_FILE: &str = "config.json";

fn read_report(path: &Path) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

fn write_report(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

/// Music of the corpus paired with labels, as used by the per-epoch evaluation.
pub fn labelled_music(corpus: &Corpus) -> Vec<(&Tensor, usize)> {
    corpus
        .music
        .iter()
        .zip(&corpus.index.music_labels)
        .map(|(m, l)| (m.tensor(), l.index()))
        .collect()
}

/// Trains from `state` until `cfg.epochs` epochs are complete, writing `epoch_<n>.ck`
/// after every epoch (and `epoch_0.ck` for a fresh state), appending to
/// `report.jsonl` and echoing the config to `config.json`. Batches of a single pair
/// are dropped. Deterministic for a fixed seed.
pub fn train_from(
    state: &mut TrainState,
    corpus: &Corpus,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    write_file(
        &run_dir.join(CONFIG_FILE),
        serde_json::to_string_pretty(cfg)
            .expect("config serializes")
            .as_bytes(),
    )?;
    let report_path = run_dir.join(REPORT_FILE);
    let mut records: Vec<EpochRecord> = read_report(&report_path)?
        .into_iter()
        .filter(|r| r.epoch < state.epoch)
        .collect();
    write_report(&report_path, &records)?;
    let mut last_good = checkpoint_path(run_dir, state.epoch);
    if !last_good.exists() {
        state.to_checkpoint(cfg).save(&last_good)?;
    }
    let with_triplets = cfg.ablation != Ablation::StyleOnly;
    let music = labelled_music(corpus);
    while state.epoch < cfg.epochs {
        let start = Instant::now();
        let plan = corpus.index.shuffle_pairs_epoch(cfg.seed, state.epoch);
        let mut sums = StepLosses::default();
        let mut steps = 0;
        for chunk in plan.chunks(cfg.batch).filter(|c| c.len() >= 2) {
            let mut rng = step_rng(cfg.seed, state.step);
            let batch = prepare_batch(
                corpus,
                chunk,
                with_triplets,
                cfg.model.noise_channels,
                &mut rng,
            )?;
            let l = train_step(state, &batch, cfg).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{what} at step {}; last good checkpoint {}",
                    state.step,
                    last_good.display()
                )),
                other => other,
            })?;
            for (s, v) in [
                (&mut sums.d, l.d),
                (&mut sums.cls_c, l.cls_c),
                (&mut sums.adv, l.adv),
                (&mut sums.tri, l.tri),
                (&mut sums.sty, l.sty),
                (&mut sums.cls_g, l.cls_g),
                (&mut sums.total, l.total),
            ] {
                *s += v;
            }
            steps += 1;
        }
        let k = steps.max(1) as f64;
        let losses = StepLosses {
            d: sums.d / k,
            cls_c: sums.cls_c / k,
            adv: sums.adv / k,
            tri: sums.tri / k,
            sty: sums.sty / k,
            cls_g: sums.cls_g / k,
            total: sums.total / k,
        };
        let era_accuracy = if cfg.eval_samples > 0 && !music.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(EVAL_STREAM + state.epoch as u64);
            Some(eval_era_accuracy(
                &state.net,
                &music,
                cfg.eval_samples,
                &mut rng,
            )?)
        } else {
            None
        };
        state.epoch += 1;
        let rec = EpochRecord {
            epoch: state.epoch - 1,
            steps,
            losses,
            era_accuracy,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} steps {} total {:.4} accuracy {:?} ({:.1} s)",
            rec.epoch,
            rec.steps,
            rec.losses.total,
            rec.era_accuracy,
            rec.wall_seconds
        );
        records.push(rec);
        write_report(&report_path, &records)?;
        last_good = checkpoint_path(run_dir, state.epoch);
        state.to_checkpoint(cfg).save(&last_good)?;
    }
    Ok(TrainReport { epochs: records })
}

/// Fresh training run.
pub fn train_loop(
    corpus: &Corpus,
    cfg: &TrainConfig,
    run_dir: &Path,
) -> Result<(TrainState, TrainReport)> {
    let mut state = TrainState::new(cfg)?;
    let report = train_from(&mut state, corpus, cfg, run_dir)?;
    Ok((state, report))
}

/// Continues from a checkpoint written by [`train_from`]. `epochs` overrides the
/// stored target when given.
pub fn resume(
    ck_path: &Path,
    corpus: &Corpus,
    epochs: Option<usize>,
    run_dir: &Path,
) -> Result<(TrainState, TrainReport)> {
    let ck = Checkpoint::load(ck_path)?;
    let (mut state, mut cfg) = TrainState::from_checkpoint(&ck).map_err(|e| match e {
        Error::Checkpoint { reason, .. } => Error::Checkpoint {
            path: ck_path.to_path_buf(),
            reason,
        },
        other => other,
    })?;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let report = train_from(&mut state, corpus, &cfg, run_dir)?;
    Ok((state, report))
}
