//! Music visualization network: encoder E, generator G, patch discriminator D and
//! era classifier C.
//!
//! All tensors are NHWC. Layer stacks with the default [`MVNetConfig`]:
//!
//! ```text
//! E: 128x256x3 -> Conv3x3-BN-ReLU 128x256x32 -> [MaxPool-Conv3x3-BN-ReLU] x4
//!    64x128x64, 32x64x128, 16x32x256, 8x16x256 -> Conv1x1 8x16x1
//! G: resize(v) 8x8x1 ++ z 8x8x256 = 8x8x257 -> DeConv4x4-IN-ReLU 16x16x256
//!    -> DeConv4x4-IN-ReLU 32x32x128 -> SelfAttention x2 -> DeConv4x4-Tanh 64x64x3
//! D: 64x64x3 -> [Conv4x4/2-LeakyReLU] x4 -> 32x32x64, 16x16x128, 8x8x256, 4x4x256
//! C: D-shaped trunk -> global average pool -> linear -> 54 logits
//! ```

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{MelSpectrogram, FRAMES_PER_CHANNEL, N_CHANNELS, N_MELS};
use crate::diff::init::orthogonal;
use crate::diff::{
    AttentionVars, Binder, Checkpoint, Graph, Mode, ParamSet, Tensor, LEAKY_SLOPE, QK_REDUCTION,
};
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, IMAGE_CHANNELS, IMAGE_SIZE};

pub const N_CLASSES: usize = 54;
pub const LATENT_H: usize = 8;
pub const LATENT_W: usize = 16;
pub const NOISE_HW: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MVNetConfig {
    /// Five encoder stage widths.
    pub encoder_widths: Vec<usize>,
    /// Widths of the two inner generator deconvolutions.
    pub generator_widths: Vec<usize>,
    /// Four discriminator conv widths.
    pub discriminator_widths: Vec<usize>,
    /// Four classifier trunk widths.
    pub classifier_widths: Vec<usize>,
    pub noise_channels: usize,
    pub attention_blocks: usize,
    pub n_classes: usize,
}

impl Default for MVNetConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![32, 64, 128, 256, 256],
            generator_widths: vec![256, 128],
            discriminator_widths: vec![64, 128, 256, 256],
            classifier_widths: vec![64, 128, 256, 256],
            noise_channels: 256,
            attention_blocks: 2,
            n_classes: N_CLASSES,
        }
    }
}

impl MVNetConfig {
    /// Narrow variant with a single attention block, sized for single-core training runs.
    pub fn desk() -> Self {
        Self {
            encoder_widths: vec![4, 8, 8, 16, 16],
            generator_widths: vec![32, 16],
            discriminator_widths: vec![8, 16, 32, 32],
            classifier_widths: vec![8, 16, 32, 32],
            noise_channels: 256,
            attention_blocks: 1,
            n_classes: N_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: &[usize], n: usize| {
            if v.len() != n || v.contains(&0) {
                Err(Error::Config(format!(
                    "{name} needs {n} positive widths, got {v:?}"
                )))
            } else {
                Ok(())
            }
        };
        check("encoder_widths", &self.encoder_widths, 5)?;
        check("generator_widths", &self.generator_widths, 2)?;
        check("discriminator_widths", &self.discriminator_widths, 4)?;
        check("classifier_widths", &self.classifier_widths, 4)?;
        if self.attention_blocks > 0 && !self.generator_widths[1].is_multiple_of(QK_REDUCTION) {
            return Err(Error::Config(format!(
                "attention input width {} is not divisible by {QK_REDUCTION}",
                self.generator_widths[1]
            )));
        }
        if self.noise_channels == 0 || self.n_classes < 2 {
            return Err(Error::Config(
                "noise_channels must be positive and n_classes at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Encoder output `v`, `8 x 16 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Tensor);

impl LatentCode {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape() != [LATENT_H, LATENT_W, 1] {
            return Err(Error::shape(format!(
                "latent code must be 8x16x1, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Generator noise `z`, `8 x 8 x channels` i.i.d. standard normal.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseCode(Tensor);

impl NoiseCode {
    pub fn sample<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        Self(Tensor::randn(&[NOISE_HW, NOISE_HW, channels], rng))
    }

    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 || t.shape()[..2] != [NOISE_HW, NOISE_HW] {
            return Err(Error::shape(format!(
                "noise code must be 8x8xC, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Records the output shape of every layer and the attention weights of a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub shapes: Vec<(String, Vec<usize>)>,
    pub attention: Vec<Tensor>,
}

fn note(g: &Graph, trace: &mut Option<&mut Trace>, label: &str, v: crate::diff::Var) {
    if let Some(t) = trace.as_deref_mut() {
        t.shapes.push((label.to_string(), g.shape(v)[1..].to_vec()));
    }
}

fn expect_shape(g: &Graph, v: crate::diff::Var, tail: &[usize], what: &str) -> Result<()> {
    let s = g.shape(v);
    if s.len() != tail.len() + 1 || s[1..] != *tail {
        return Err(Error::shape(format!(
            "{what} expects [N, {tail:?}], got {s:?}"
        )));
    }
    Ok(())
}

fn add_conv<R: Rng>(
    p: &mut ParamSet,
    name: &str,
    k: usize,
    ci: usize,
    co: usize,
    rng: &mut R,
) -> Result<()> {
    p.add_weight(format!("{name}.w"), orthogonal(&[k, k, ci, co], rng))
}

fn add_norm(p: &mut ParamSet, name: &str, c: usize, running: bool) -> Result<()> {
    p.add_weight(format!("{name}.scale"), Tensor::ones(&[c]))?;
    p.add_weight(format!("{name}.shift"), Tensor::zeros(&[c]))?;
    if running {
        p.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]))?;
        p.add_buffer(format!("{name}.running_var"), Tensor::ones(&[c]))?;
    }
    Ok(())
}

pub fn init_encoder<R: Rng>(cfg: &MVNetConfig, rng: &mut R) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    let mut ci = N_CHANNELS;
    for (i, &co) in cfg.encoder_widths.iter().enumerate() {
        add_conv(&mut p, &format!("enc.conv{i}"), 3, ci, co, rng)?;
        add_norm(&mut p, &format!("enc.bn{i}"), co, true)?;
        ci = co;
    }
    add_conv(&mut p, "enc.out", 1, ci, 1, rng)?;
    p.add_weight("enc.out.b", Tensor::zeros(&[1]))?;
    Ok(p)
}

pub fn init_generator<R: Rng>(cfg: &MVNetConfig, rng: &mut R) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    let widths = [
        1 + cfg.noise_channels,
        cfg.generator_widths[0],
        cfg.generator_widths[1],
        IMAGE_CHANNELS,
    ];
    for i in 0..3 {
        let w = orthogonal(&[4, 4, widths[i], widths[i + 1]], rng);
        p.add_spectral_weight(format!("gen.deconv{i}.w"), w, rng)?;
        if i < 2 {
            add_norm(&mut p, &format!("gen.in{i}"), widths[i + 1], false)?;
        }
    }
    p.add_weight("gen.deconv2.b", Tensor::zeros(&[IMAGE_CHANNELS]))?;
    let c = cfg.generator_widths[1];
    let ck = c / QK_REDUCTION;
    for a in 0..cfg.attention_blocks {
        let pre = format!("gen.attn{a}");
        p.add_weight(format!("{pre}.wq"), orthogonal(&[c, ck], rng))?;
        p.add_weight(format!("{pre}.bq"), Tensor::zeros(&[ck]))?;
        p.add_weight(format!("{pre}.wk"), orthogonal(&[c, ck], rng))?;
        p.add_weight(format!("{pre}.bk"), Tensor::zeros(&[ck]))?;
        p.add_weight(format!("{pre}.wv"), orthogonal(&[c, c], rng))?;
        p.add_weight(format!("{pre}.bv"), Tensor::zeros(&[c]))?;
        p.add_weight(format!("{pre}.gamma"), Tensor::zeros(&[1]))?;
    }
    Ok(p)
}

fn init_trunk<R: Rng>(p: &mut ParamSet, prefix: &str, widths: &[usize], rng: &mut R) -> Result<()> {
    let mut ci = IMAGE_CHANNELS;
    for (i, &co) in widths.iter().enumerate() {
        add_conv(p, &format!("{prefix}.conv{i}"), 4, ci, co, rng)?;
        p.add_weight(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[co]))?;
        ci = co;
    }
    Ok(())
}

pub fn init_discriminator<R: Rng>(cfg: &MVNetConfig, rng: &mut R) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    init_trunk(&mut p, "disc", &cfg.discriminator_widths, rng)?;
    Ok(p)
}

pub fn init_classifier<R: Rng>(cfg: &MVNetConfig, rng: &mut R) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    init_trunk(&mut p, "cls", &cfg.classifier_widths, rng)?;
    let c = *cfg.classifier_widths.last().unwrap();
    p.add_weight("cls.head.w", orthogonal(&[c, cfg.n_classes], rng))?;
    p.add_weight("cls.head.b", Tensor::zeros(&[cfg.n_classes]))?;
    Ok(p)
}

/// `x: [N, 128, 256, 3]` to `v: [N, 8, 16, 1]`. In train mode batch statistics are
/// recorded on the binder.
pub fn encoder_forward(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &MVNetConfig,
    x: crate::diff::Var,
    mode: Mode,
    mut trace: Option<&mut Trace>,
) -> Result<crate::diff::Var> {
    expect_shape(g, x, &[N_MELS, FRAMES_PER_CHANNEL, N_CHANNELS], "encoder")?;
    let mut h = x;
    for i in 0..cfg.encoder_widths.len() {
        if i > 0 {
            h = g.max_pool2(h);
        }
        let w = b.weight(g, &format!("enc.conv{i}.w"))?;
        h = g.conv2d(h, w, 1, 1);
        let bn = format!("enc.bn{i}");
        let scale = b.var(g, &format!("{bn}.scale"))?;
        let shift = b.var(g, &format!("{bn}.shift"))?;
        h = match mode {
            Mode::Train => {
                if g.shape(h)[0] < 2 {
                    return Err(Error::invalid(
                        "train-mode batch norm needs a batch of at least 2",
                    ));
                }
                let (y, stats) = g.batch_norm_train(h, scale, shift);
                b.record_bn(&bn, stats);
                y
            }
            Mode::Eval => {
                let mean = b.buffer(&format!("{bn}.running_mean"))?.data().to_vec();
                let var = b.buffer(&format!("{bn}.running_var"))?.data().to_vec();
                g.batch_norm_eval(h, scale, shift, &mean, &var)
            }
        };
        h = g.relu(h);
        note(g, &mut trace, &format!("enc.stage{i}"), h);
    }
    let w = b.weight(g, "enc.out.w")?;
    h = g.conv2d(h, w, 1, 0);
    let bias = b.var(g, "enc.out.b")?;
    h = g.add_bias(h, bias);
    note(g, &mut trace, "enc.out", h);
    Ok(h)
}

/// `v: [N, 8, 16, 1]`, `z: [N, 8, 8, Cz]` to `m: [N, 64, 64, 3]`.
pub fn generator_forward(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &MVNetConfig,
    v: crate::diff::Var,
    z: crate::diff::Var,
    mut trace: Option<&mut Trace>,
) -> Result<crate::diff::Var> {
    expect_shape(g, v, &[LATENT_H, LATENT_W, 1], "generator latent")?;
    expect_shape(
        g,
        z,
        &[NOISE_HW, NOISE_HW, cfg.noise_channels],
        "generator noise",
    )?;
    if g.shape(v)[0] != g.shape(z)[0] {
        return Err(Error::shape("latent and noise batch sizes differ"));
    }
    let vr = g.bilinear_resize(v, NOISE_HW, NOISE_HW);
    note(g, &mut trace, "gen.resized_v", vr);
    let mut h = g.concat_channels(vr, z);
    note(g, &mut trace, "gen.input", h);
    for i in 0..2 {
        let w = b.weight(g, &format!("gen.deconv{i}.w"))?;
        h = g.deconv2d(h, w, 2, 1);
        let scale = b.var(g, &format!("gen.in{i}.scale"))?;
        let shift = b.var(g, &format!("gen.in{i}.shift"))?;
        h = g.instance_norm(h, scale, shift);
        h = g.relu(h);
        note(g, &mut trace, &format!("gen.deconv{i}"), h);
    }
    for a in 0..cfg.attention_blocks {
        let pre = format!("gen.attn{a}");
        let p = AttentionVars {
            wq: b.var(g, &format!("{pre}.wq"))?,
            bq: b.var(g, &format!("{pre}.bq"))?,
            wk: b.var(g, &format!("{pre}.wk"))?,
            bk: b.var(g, &format!("{pre}.bk"))?,
            wv: b.var(g, &format!("{pre}.wv"))?,
            bv: b.var(g, &format!("{pre}.bv"))?,
            gamma: b.var(g, &format!("{pre}.gamma"))?,
        };
        let (y, attn) = g.self_attention(h, &p);
        h = y;
        note(g, &mut trace, &pre, h);
        if let Some(t) = trace.as_deref_mut() {
            t.attention.push(g.value(attn).clone());
        }
    }
    let w = b.weight(g, "gen.deconv2.w")?;
    h = g.deconv2d(h, w, 2, 1);
    let bias = b.var(g, "gen.deconv2.b")?;
    h = g.add_bias(h, bias);
    h = g.tanh(h);
    note(g, &mut trace, "gen.out", h);
    Ok(h)
}

fn trunk_forward(
    g: &mut Graph,
    b: &mut Binder,
    prefix: &str,
    depth: usize,
    img: crate::diff::Var,
    trace: &mut Option<&mut Trace>,
) -> Result<crate::diff::Var> {
    expect_shape(g, img, &[IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS], prefix)?;
    let mut h = img;
    for i in 0..depth {
        let w = b.weight(g, &format!("{prefix}.conv{i}.w"))?;
        h = g.conv2d(h, w, 2, 1);
        let bias = b.var(g, &format!("{prefix}.conv{i}.b"))?;
        h = g.add_bias(h, bias);
        h = g.leaky_relu(h, LEAKY_SLOPE);
        note(g, trace, &format!("{prefix}.conv{i}"), h);
    }
    Ok(h)
}

/// Raw patch score map `[N, 4, 4, C]` (no sigmoid).
pub fn discriminator_forward(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &MVNetConfig,
    img: crate::diff::Var,
    mut trace: Option<&mut Trace>,
) -> Result<crate::diff::Var> {
    trunk_forward(
        g,
        b,
        "disc",
        cfg.discriminator_widths.len(),
        img,
        &mut trace,
    )
}

/// Scalar critic value per sample: the mean of the patch map, `[N]`.
pub fn discriminator_scores(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &MVNetConfig,
    img: crate::diff::Var,
) -> Result<crate::diff::Var> {
    let map = discriminator_forward(g, b, cfg, img, None)?;
    Ok(g.mean_per_sample(map))
}

/// Era logits `[N, n_classes]`.
pub fn classifier_forward(
    g: &mut Graph,
    b: &mut Binder,
    cfg: &MVNetConfig,
    img: crate::diff::Var,
    mut trace: Option<&mut Trace>,
) -> Result<crate::diff::Var> {
    let h = trunk_forward(g, b, "cls", cfg.classifier_widths.len(), img, &mut trace)?;
    let pooled = g.global_avg_pool(h);
    let w = b.var(g, "cls.head.w")?;
    let bias = b.var(g, "cls.head.b")?;
    let logits = g.matmul(pooled, w, false, false);
    let logits = g.add_bias(logits, bias);
    note(g, &mut trace, "cls.logits", logits);
    Ok(logits)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SubNet {
    Encoder,
    Generator,
    Discriminator,
    Classifier,
}

/// Parameters of all four sub-networks.
#[derive(Clone, Debug, PartialEq)]
pub struct MVNet {
    pub config: MVNetConfig,
    pub seed: u64,
    pub encoder: ParamSet,
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    pub classifier: ParamSet,
}

impl MVNet {
    pub fn new(config: MVNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = init_encoder(&config, &mut rng)?;
        let generator = init_generator(&config, &mut rng)?;
        let discriminator = init_discriminator(&config, &mut rng)?;
        let classifier = init_classifier(&config, &mut rng)?;
        Ok(Self {
            config,
            seed,
            encoder,
            generator,
            discriminator,
            classifier,
        })
    }

    pub fn params(&self, net: SubNet) -> &ParamSet {
        match net {
            SubNet::Encoder => &self.encoder,
            SubNet::Generator => &self.generator,
            SubNet::Discriminator => &self.discriminator,
            SubNet::Classifier => &self.classifier,
        }
    }

    pub fn params_mut(&mut self, net: SubNet) -> &mut ParamSet {
        match net {
            SubNet::Encoder => &mut self.encoder,
            SubNet::Generator => &mut self.generator,
            SubNet::Discriminator => &mut self.discriminator,
            SubNet::Classifier => &mut self.classifier,
        }
    }

    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseCode {
        NoiseCode::sample(self.config.noise_channels, rng)
    }

    /// Eval-mode encoding of a `[N, 128, 256, 3]` batch.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.encoder, false);
        let xv = g.input(x.clone());
        let v = encoder_forward(&mut g, &mut b, &self.config, xv, Mode::Eval, None)?;
        Ok(g.value(v).clone())
    }

    pub fn generate_batch(&self, v: &Tensor, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.generator, false);
        let (vv, zv) = (g.input(v.clone()), g.input(z.clone()));
        let m = generator_forward(&mut g, &mut b, &self.config, vv, zv, None)?;
        Ok(g.value(m).clone())
    }

    pub fn classify_batch(&self, imgs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.classifier, false);
        let x = g.input(imgs.clone());
        let logits = classifier_forward(&mut g, &mut b, &self.config, x, None)?;
        Ok(g.value(logits).clone())
    }

    pub fn encode(&self, x: &MelSpectrogram) -> Result<LatentCode> {
        let v = self.encode_batch(&x.tensor().clone().unsqueeze0())?;
        LatentCode::new(v.reshape(&[LATENT_H, LATENT_W, 1]))
    }

    pub fn generate(&self, v: &LatentCode, z: &NoiseCode) -> Result<ImageTensor> {
        let m = self.generate_batch(
            &v.tensor().clone().unsqueeze0(),
            &z.tensor().clone().unsqueeze0(),
        )?;
        ImageTensor::new(m.reshape(&[IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS]))
    }

    /// Patch score map `4 x 4 x C`.
    pub fn discriminate(&self, img: &ImageTensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.discriminator, false);
        let x = g.input(img.tensor().clone().unsqueeze0());
        let map = discriminator_forward(&mut g, &mut b, &self.config, x, None)?;
        let s = g.shape(map)[1..].to_vec();
        Ok(g.value(map).clone().reshape(&s))
    }

    pub fn classify(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self
            .classify_batch(&img.tensor().clone().unsqueeze0())?
            .into_data())
    }

    /// `G(E(x), z)` with eval-mode statistics.
    pub fn visualize(&self, x: &MelSpectrogram, z: &NoiseCode) -> Result<ImageTensor> {
        self.generate(&self.encode(x)?, z)
    }

    /// Runs E then G on one sample, recording every intermediate shape and the
    /// attention maps, then D on the generated image.
    pub fn trace(&self, x: &MelSpectrogram, z: &NoiseCode) -> Result<Trace> {
        let mut trace = Trace::default();
        let mut g = Graph::new();
        let mut be = Binder::new(&self.encoder, false);
        let xv = g.input(x.tensor().clone().unsqueeze0());
        let v = encoder_forward(
            &mut g,
            &mut be,
            &self.config,
            xv,
            Mode::Eval,
            Some(&mut trace),
        )?;
        let mut bg = Binder::new(&self.generator, false);
        let zv = g.input(z.tensor().clone().unsqueeze0());
        let m = generator_forward(&mut g, &mut bg, &self.config, v, zv, Some(&mut trace))?;
        let mut bd = Binder::new(&self.discriminator, false);
        discriminator_forward(&mut g, &mut bd, &self.config, m, Some(&mut trace))?;
        let mut bc = Binder::new(&self.classifier, false);
        classifier_forward(&mut g, &mut bc, &self.config, m, Some(&mut trace))?;
        Ok(trace)
    }

    /// Stores config, seed and all parameters.
    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        if !ck.meta.is_object() {
            ck.meta = serde_json::json!({});
        }
        ck.meta["mvnet"] = serde_json::json!({ "config": self.config, "seed": self.seed });
        for net in [
            SubNet::Encoder,
            SubNet::Generator,
            SubNet::Discriminator,
            SubNet::Classifier,
        ] {
            ck.put_params(self.params(net));
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint {
            path: Default::default(),
            reason,
        };
        let meta = ck
            .meta
            .get("mvnet")
            .ok_or_else(|| bad("no network metadata".into()))?;
        let config: MVNetConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| bad(format!("network config: {e}")))?;
        let seed = meta["seed"]
            .as_u64()
            .ok_or_else(|| bad("network seed".into()))?;
        let mut net = Self::new(config, seed)?;
        for sub in [
            SubNet::Encoder,
            SubNet::Generator,
            SubNet::Discriminator,
            SubNet::Classifier,
        ] {
            ck.restore_params(net.params_mut(sub))?;
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(MVNetConfig::default().validate().is_ok());
        assert!(MVNetConfig::desk().validate().is_ok());
        let mut c = MVNetConfig::desk();
        c.generator_widths = vec![32, 12];
        assert!(c.validate().is_err());
        c.generator_widths = vec![32];
        assert!(c.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique_across_subnets() {
        let net = MVNet::new(MVNetConfig::desk(), 1).unwrap();
        let mut names: Vec<&String> = [
            &net.encoder,
            &net.generator,
            &net.discriminator,
            &net.classifier,
        ]
        .iter()
        .flat_map(|p| p.iter().map(|(n, _)| n))
        .collect();
        let total = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), total);
        for (name, p) in net.generator.iter() {
            assert_eq!(
                p.spectral_normalized(),
                name.starts_with("gen.deconv") && name.ends_with(".w"),
                "{name}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_everything() {
        let net = MVNet::new(MVNetConfig::desk(), 9).unwrap();
        let mut ck = Checkpoint::new(serde_json::json!({}));
        net.write_checkpoint(&mut ck);
        let bytes = ck.to_bytes();
        let back = MVNet::from_checkpoint(
            &Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap(),
        )
        .unwrap();
        assert_eq!(back, net);
    }
}
