//! Style transfer backends at the deepest extractor tap: AdaIN, whitening-coloring
//! (WCT) and a closed-form linear covariance transform, plus the trainable decoder
//! that maps tap features back to images.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::diff::init::orthogonal;
use crate::diff::{AdamConfig, AdamState, Binder, Checkpoint, Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::losses::FeatureExtractor;
use crate::mvnet::{MVNet, NoiseCode};

/// Eigenvalues at or below this (relative to the largest) are treated as zero.
pub const EIGEN_REL_FLOOR: f64 = 1e-9;
/// Ridge added to the content covariance by the linear backend.
pub const LINEAR_RIDGE: f64 = 1e-5;
/// A channel whose variance is at or below this is considered constant.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Adain,
    Wct,
    #[default]
    Linear,
}

impl FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adain" => Ok(Self::Adain),
            "wct" => Ok(Self::Wct),
            "linear" => Ok(Self::Linear),
            other => Err(Error::invalid(format!(
                "unknown backend {other:?} (expected adain, wct or linear)"
            ))),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adain => "adain",
            Self::Wct => "wct",
            Self::Linear => "linear",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub backend: Backend,
    /// 1 is fully stylized, 0 reproduces the content round trip.
    pub blend: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Linear,
            blend: 1.0,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::Config(format!(
                "blend {} outside [0, 1]",
                self.blend
            )));
        }
        Ok(())
    }
}

/// Per-channel mean and population covariance of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `H x W x C` map as an `HW x C` matrix.
fn as_matrix(feat: &Tensor) -> DMatrix<f64> {
    let c = *feat.shape().last().unwrap();
    DMatrix::from_row_slice(feat.len() / c, c, feat.data())
}

fn from_matrix(m: &DMatrix<f64>, shape: &[usize]) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        data.extend(m.row(r).iter());
    }
    Tensor::new(shape, data)
}

impl FeatureStats {
    pub fn of(feat: &Tensor) -> Self {
        Self::of_matrix(&as_matrix(feat))
    }

    fn of_matrix(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mean = x.row_mean().transpose();
        let centered = centered(x, &mean);
        let cov = centered.transpose() * &centered / n;
        Self { mean, cov }
    }

    pub fn std(&self) -> DVector<f64> {
        self.cov.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

fn recentre(mut x: DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    for mut row in x.row_iter_mut() {
        row += mean.transpose();
    }
    x
}

/// Symmetric matrix power `E f(L) E^T` with eigenvalues clamped at 0 and values
/// below the relative floor mapped by `small`.
fn sym_power(cov: &DMatrix<f64>, f: impl Fn(f64) -> f64, small: f64) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(cov.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite())
        || eig.eigenvectors.iter().any(|v| !v.is_finite())
    {
        return None;
    }
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let floor = EIGEN_REL_FLOOR * top;
    let d = eig
        .eigenvalues
        .map(|l| if l > floor && l > 0.0 { f(l) } else { small });
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Matches each content channel's spatial mean and std to the style's.
pub fn adain_features(content: &Tensor, style: &Tensor) -> Tensor {
    let c = *content.shape().last().unwrap();
    let sc = FeatureStats::of(content);
    let ss = FeatureStats::of(style);
    let (std_c, std_s) = (sc.std(), ss.std());
    let mut out = content.clone();
    for px in out.data_mut().chunks_mut(c) {
        for k in 0..c {
            let scale = if std_c[k] > VARIANCE_FLOOR.sqrt() {
                std_s[k] / std_c[k]
            } else {
                0.0
            };
            px[k] = (px[k] - sc.mean[k]) * scale + ss.mean[k];
        }
    }
    out
}

/// Centers and whitens content features; directions with zero variance map to zero.
pub fn whiten_features(content: &Tensor) -> Option<Tensor> {
    let x = as_matrix(content);
    let st = FeatureStats::of_matrix(&x);
    let w = sym_power(&st.cov, |l| 1.0 / l.sqrt(), 0.0)?;
    Some(from_matrix(&(centered(&x, &st.mean) * w), content.shape()))
}

/// Colors whitened features with the style covariance square root and style mean.
pub fn color_features(whitened: &Tensor, style: &FeatureStats) -> Option<Tensor> {
    let root = sym_power(&style.cov, f64::sqrt, 0.0)?;
    Some(from_matrix(
        &recentre(as_matrix(whitened) * root, &style.mean),
        whitened.shape(),
    ))
}

/// Whether WCT must fall back to AdaIN: the features are not finite, or every channel
/// of the content or the style is constant. Rank-deficient covariances are handled
/// by eigenvalue clamping instead.
pub fn wct_is_degenerate(content: &Tensor, style: &Tensor) -> bool {
    if !content.is_finite() || !style.is_finite() {
        return true;
    }
    let flat = |t: &Tensor| {
        FeatureStats::of(t)
            .cov
            .diagonal()
            .iter()
            .all(|&v| v <= VARIANCE_FLOOR)
    };
    flat(content) || flat(style)
}

/// Whitening-coloring transform. The flag reports an AdaIN fallback.
pub fn wct_features(content: &Tensor, style: &Tensor) -> (Tensor, bool) {
    if !wct_is_degenerate(content, style) {
        let ss = FeatureStats::of(style);
        if let Some(out) = whiten_features(content).and_then(|w| color_features(&w, &ss)) {
            if out.is_finite() {
                return (out, false);
            }
        }
    }
    log::warn!("degenerate feature covariance, falling back to AdaIN");
    (adain_features(content, style), true)
}

/// `T = Cov_s^{1/2} (Cov_c + ridge I)^{-1/2}`.
pub fn linear_matrix(cov_c: &DMatrix<f64>, cov_s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = cov_c.nrows();
    let reg = cov_c + DMatrix::identity(n, n) * LINEAR_RIDGE;
    let inv_root = sym_power(&reg, |l| 1.0 / l.sqrt(), 0.0)
        .ok_or_else(|| Error::NonFinite("content covariance".into()))?;
    let root = sym_power(cov_s, f64::sqrt, 0.0)
        .ok_or_else(|| Error::NonFinite("style covariance".into()))?;
    Ok(root * inv_root)
}

pub fn linear_features(content: &Tensor, style: &Tensor) -> Result<Tensor> {
    let x = as_matrix(content);
    let sc = FeatureStats::of_matrix(&x);
    let ss = FeatureStats::of(style);
    let t = linear_matrix(&sc.cov, &ss.cov)?;
    // Rows are samples, so x' = T x becomes X' = X T^T.
    let out = recentre(centered(&x, &sc.mean) * t.transpose(), &ss.mean);
    Ok(from_matrix(&out, content.shape()))
}

pub const DECODER_WIDTHS: [usize; 3] = [64, 32, 16];

/// Mirror of the extractor from the deepest tap back to a `64 x 64 x 3` image:
/// `[upsample2, conv3x3, ReLU] x 3`, then `conv3x3-Tanh`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub params: ParamSet,
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub seed: u64,
}

impl Decoder {
    pub fn new(in_channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut ci = in_channels;
        for (i, &co) in widths
            .iter()
            .chain(std::iter::once(&IMAGE_CHANNELS))
            .enumerate()
        {
            let gain = if i < widths.len() {
                std::f64::consts::SQRT_2
            } else {
                1.0
            };
            params.add_weight(
                format!("dec.conv{i}.w"),
                orthogonal(&[3, 3, ci, co], &mut rng).scale(gain),
            )?;
            params.add_weight(format!("dec.conv{i}.b"), Tensor::zeros(&[co]))?;
            ci = co;
        }
        Ok(Self {
            params,
            in_channels,
            widths: widths.to_vec(),
            seed,
        })
    }

    pub fn for_extractor(fx: &FeatureExtractor, seed: u64) -> Result<Self> {
        Self::new(*fx.widths().last().unwrap(), &DECODER_WIDTHS, seed)
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder, feat: Var) -> Result<Var> {
        let mut h = feat;
        for i in 0..=self.widths.len() {
            if i < self.widths.len() {
                h = g.upsample2(h);
            }
            let w = b.var(g, &format!("dec.conv{i}.w"))?;
            let bias = b.var(g, &format!("dec.conv{i}.b"))?;
            h = g.conv2d(h, w, 1, 1);
            h = g.add_bias(h, bias);
            h = if i < self.widths.len() {
                g.relu(h)
            } else {
                g.tanh(h)
            };
        }
        Ok(h)
    }

    /// Decodes one `H x W x C` map.
    pub fn decode(&self, feat: &Tensor) -> Result<ImageTensor> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let x = g.input(feat.clone().unsqueeze0());
        let y = self.forward(&mut g, &mut b, x)?;
        ImageTensor::clamped(
            g.value(y)
                .clone()
                .reshape(&[IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS]),
        )
    }

    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        if !ck.meta.is_object() {
            ck.meta = serde_json::json!({});
        }
        ck.meta["decoder"] = serde_json::json!({ "in_channels": self.in_channels, "widths": self.widths, "seed": self.seed });
        ck.put_params(&self.params);
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |r: &str| Error::Checkpoint {
            path: Default::default(),
            reason: r.to_string(),
        };
        let meta = ck
            .meta
            .get("decoder")
            .ok_or_else(|| bad("no decoder metadata"))?;
        let in_channels = meta["in_channels"]
            .as_u64()
            .ok_or_else(|| bad("decoder in_channels"))? as usize;
        let widths: Vec<usize> =
            serde_json::from_value(meta["widths"].clone()).map_err(|_| bad("decoder widths"))?;
        let seed = meta["seed"].as_u64().ok_or_else(|| bad("decoder seed"))?;
        let mut dec = Self::new(in_channels, &widths, seed)?;
        ck.restore_params(&mut dec.params)?;
        Ok(dec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderTrainConfig {
    pub max_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Stop once the relative RMS round-trip error on the training images is below this.
    pub target_rel_rms: f64,
    /// Steps between evaluations of the stopping criterion.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 2000,
            batch: 8,
            lr: 1e-3,
            target_rel_rms: 0.02,
            eval_every: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderReport {
    pub steps: usize,
    /// `|decode(extract(y)) - y| / |y|` over all training images.
    pub rel_rms: f64,
    pub reached_target: bool,
}

/// Relative RMS round-trip error `|decode(extract(y)) - y| / |y|` over a set of images.
pub fn round_trip_error(
    fx: &FeatureExtractor,
    dec: &Decoder,
    images: &[ImageTensor],
) -> Result<f64> {
    let deepest = fx.num_taps() - 1;
    let (mut num, mut den) = (0.0, 0.0);
    for img in images {
        let out = dec.decode(&fx.extract(img.tensor(), deepest)?)?;
        for (a, b) in out.tensor().data().iter().zip(img.tensor().data()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
    }
    Ok((num / den.max(1e-300)).sqrt())
}

/// Fits the decoder with Adam on mean squared reconstruction error of deepest-tap
/// features, stopping at the target error or after `max_steps`.
pub fn train_decoder(
    fx: &FeatureExtractor,
    dec: &mut Decoder,
    images: &[ImageTensor],
    cfg: &DecoderTrainConfig,
) -> Result<DecoderReport> {
    if images.is_empty() {
        return Err(Error::Dataset(
            "decoder training needs at least one image".into(),
        ));
    }
    let deepest = fx.num_taps() - 1;
    let feats: Vec<Tensor> = images
        .iter()
        .map(|i| fx.extract(i.tensor(), deepest))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: 0.0,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = Vec::new();
    let mut steps = 0;
    let mut err = round_trip_error(fx, dec, images)?;
    while steps < cfg.max_steps && err >= cfg.target_rel_rms {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.min(images.len()) {
            if order.is_empty() {
                order = (0..images.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().unwrap());
        }
        let x = Tensor::stack(&idx.iter().map(|&i| &feats[i]).collect::<Vec<_>>());
        let y = Tensor::stack(&idx.iter().map(|&i| images[i].tensor()).collect::<Vec<_>>());
        let mut g = Graph::new();
        let mut b = Binder::new(&dec.params, true);
        let xv = g.input(x);
        let yv = g.input(y);
        let out = dec.forward(&mut g, &mut b, xv)?;
        let d = g.sub(out, yv);
        let d = g.square(d);
        let loss = g.mean(d);
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite(format!("decoder loss at step {steps}")));
        }
        let grads = g.backward(loss);
        let named = b.grads(&grads);
        adam.step(&mut dec.params, &named)?;
        steps += 1;
        if steps % cfg.eval_every.max(1) == 0 || steps == cfg.max_steps {
            err = round_trip_error(fx, dec, images)?;
        }
    }
    Ok(DecoderReport {
        steps,
        rel_rms: err,
        reached_target: err < cfg.target_rel_rms,
    })
}

/// Result of one style transfer.
#[derive(Clone, Debug, PartialEq)]
pub struct Transferred {
    pub image: ImageTensor,
    /// Set when WCT fell back to AdaIN.
    pub fell_back: bool,
}

/// Frozen extractor plus decoder.
#[derive(Clone, Debug)]
pub struct StyleTransfer {
    pub extractor: FeatureExtractor,
    pub decoder: Decoder,
}

impl StyleTransfer {
    pub fn new(extractor: FeatureExtractor, decoder: Decoder) -> Self {
        Self { extractor, decoder }
    }

    fn deepest(&self) -> usize {
        self.extractor.num_taps() - 1
    }

    /// Transformed and blended deepest-tap features of `content`.
    pub fn transfer_features(
        &self,
        content: &ImageTensor,
        style: &ImageTensor,
        cfg: &TransferConfig,
    ) -> Result<(Tensor, bool)> {
        cfg.validate()?;
        let fc = self.extractor.extract(content.tensor(), self.deepest())?;
        let fs = self.extractor.extract(style.tensor(), self.deepest())?;
        let (ft, fell_back) = match cfg.backend {
            Backend::Adain => (adain_features(&fc, &fs), false),
            Backend::Wct => wct_features(&fc, &fs),
            Backend::Linear => (linear_features(&fc, &fs)?, false),
        };
        let blended = if cfg.blend == 1.0 {
            ft
        } else {
            ft.zip_map(&fc, |t, c| cfg.blend * t + (1.0 - cfg.blend) * c)
        };
        Ok((blended, fell_back))
    }

    pub fn transfer(
        &self,
        content: &ImageTensor,
        style: &ImageTensor,
        cfg: &TransferConfig,
    ) -> Result<Transferred> {
        let (feat, fell_back) = self.transfer_features(content, style, cfg)?;
        Ok(Transferred {
            image: self.decoder.decode(&feat)?,
            fell_back,
        })
    }

    /// Plain encode-decode of an image.
    pub fn round_trip(&self, img: &ImageTensor) -> Result<ImageTensor> {
        self.decoder
            .decode(&self.extractor.extract(img.tensor(), self.deepest())?)
    }

    /// Generates the style image from music, then transfers it onto `content`.
    pub fn stylize(
        &self,
        content: &ImageTensor,
        music: &MelSpectrogram,
        mvnet: &MVNet,
        z: &NoiseCode,
        cfg: &TransferConfig,
    ) -> Result<(Transferred, ImageTensor)> {
        let style = mvnet.visualize(music, z)?;
        Ok((self.transfer(content, &style, cfg)?, style))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backend_names_round_trip() {
        for b in [Backend::Adain, Backend::Wct, Backend::Linear] {
            assert_eq!(b.to_string().parse::<Backend>().unwrap(), b);
        }
        assert!("avatar".parse::<Backend>().is_err());
        assert_eq!(Backend::default(), Backend::Linear);
    }

    #[test]
    fn decoder_output_shape() {
        let fx = FeatureExtractor::new(0);
        let dec = Decoder::for_extractor(&fx, 1).unwrap();
        let out = dec.decode(&Tensor::zeros(&[8, 8, 128])).unwrap();
        assert_eq!(out.tensor().shape(), &[64, 64, 3]);
    }

    #[test]
    fn blend_range_is_checked() {
        assert!(TransferConfig {
            blend: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
