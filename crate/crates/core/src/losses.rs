//! Training objectives and the fixed feature extractor behind the Gram style loss.
//!
//! Batch reductions: triplet, style and classification terms sum over the batch;
//! the relativistic adversarial term uses batch means.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::init::orthogonal;
use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_tri: f64,
    pub w_sty: f64,
    pub w_cls: f64,
    /// Triplet hinge margin.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_tri: 0.1,
            w_sty: 10.0,
            w_cls: 0.1,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_tri, self.w_sty, self.w_cls, self.margin]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

pub const EXTRACTOR_WIDTHS: [usize; 4] = [16, 32, 64, 128];

/// Frozen stack of `[conv3x3, ReLU, tap, avgpool2]` stages.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    seed: u64,
    widths: Vec<usize>,
    weights: Vec<Tensor>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        Self::with_widths(seed, &EXTRACTOR_WIDTHS)
    }

    pub fn with_widths(seed: u64, widths: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ci = 3;
        let weights = widths
            .iter()
            .map(|&co| {
                let w = orthogonal(&[3, 3, ci, co], &mut rng).scale(std::f64::consts::SQRT_2);
                ci = co;
                w
            })
            .collect();
        Self {
            seed,
            widths: widths.to_vec(),
            weights,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn num_taps(&self) -> usize {
        self.widths.len()
    }

    pub fn weight(&self, stage: usize) -> &Tensor {
        &self.weights[stage]
    }

    /// Tap feature maps of an NHWC batch, the first `upto` of them.
    pub fn forward_upto(&self, g: &mut Graph, x: Var, upto: usize) -> Vec<Var> {
        let mut taps = Vec::with_capacity(upto);
        let mut h = x;
        for (i, w) in self.weights.iter().take(upto).enumerate() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            let wv = g.input(w.clone());
            h = g.conv2d(h, wv, 1, 1);
            h = g.relu(h);
            taps.push(h);
        }
        taps
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        self.forward_upto(g, x, self.num_taps())
    }

    /// Feature map of one image at tap `layer`.
    pub fn extract(&self, img: &Tensor, layer: usize) -> Result<Tensor> {
        if layer >= self.num_taps() {
            return Err(Error::invalid(format!(
                "tap {layer} out of range (extractor has {})",
                self.num_taps()
            )));
        }
        if img.ndim() != 3 || img.shape()[2] != 3 {
            return Err(Error::shape(format!(
                "expected HxWx3 image, got {:?}",
                img.shape()
            )));
        }
        let mut g = Graph::new();
        let x = g.input(img.clone().unsqueeze0());
        let taps = self.forward_upto(&mut g, x, layer + 1);
        let t = g.value(taps[layer]).clone();
        let s = t.shape()[1..].to_vec();
        Ok(t.reshape(&s))
    }

    pub fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "seed": self.seed, "widths": self.widths })
    }

    pub fn from_meta(meta: &serde_json::Value) -> Result<Self> {
        let bad = || Error::Config(format!("invalid feature extractor metadata: {meta}"));
        let seed = meta.get("seed").and_then(|s| s.as_u64()).ok_or_else(bad)?;
        let widths: Vec<usize> =
            serde_json::from_value(meta.get("widths").cloned().ok_or_else(bad)?)
                .map_err(|_| bad())?;
        Ok(Self::with_widths(seed, &widths))
    }
}

/// `[N, H, W, C] -> [N, C, C]` Gram matrices normalized by `H * W * C`.
pub fn gram(g: &mut Graph, feat: Var) -> Var {
    let (n, h, w, c) = g.value(feat).dims4();
    let flat = g.reshape(feat, &[n, h * w, c]);
    let gm = g.bmm(flat, flat, true, false);
    g.scale(gm, 1.0 / (h * w * c) as f64)
}

/// Gram matrix of a single `H x W x C` map.
pub fn gram_matrix(feat: &Tensor) -> Tensor {
    let s = feat.shape();
    let mut g = Graph::new();
    let x = g.input(feat.clone().reshape(&[1, s[0], s[1], s[2]]));
    let gm = gram(&mut g, x);
    g.value(gm).clone().reshape(&[s[2], s[2]])
}

/// Sum over taps and batch of the elementwise L1 distance between Gram matrices.
pub fn style_loss_graph(g: &mut Graph, fx: &FeatureExtractor, m: Var, y: Var) -> Var {
    let fm = fx.forward(g, m);
    let fy = fx.forward(g, y);
    let terms: Vec<Var> = fm
        .into_iter()
        .zip(fy)
        .map(|(a, b)| {
            let ga = gram(g, a);
            let gb = gram(g, b);
            let d = g.sub(ga, gb);
            let d = g.abs(d);
            g.sum(d)
        })
        .collect();
    g.add_n(&terms)
}

/// Style loss against precomputed target Gram matrices (one `[N, C, C]` per tap).
pub fn style_loss_to_grams(
    g: &mut Graph,
    fx: &FeatureExtractor,
    m: Var,
    targets: &[Tensor],
) -> Var {
    let fm = fx.forward(g, m);
    let terms: Vec<Var> = fm
        .into_iter()
        .zip(targets)
        .map(|(a, t)| {
            let ga = gram(g, a);
            let tv = g.input(t.clone());
            let d = g.sub(ga, tv);
            let d = g.abs(d);
            g.sum(d)
        })
        .collect();
    g.add_n(&terms)
}

/// Per-tap `[N, C, C]` Gram matrices of a batch.
pub fn batch_grams(fx: &FeatureExtractor, imgs: &Tensor) -> Vec<Tensor> {
    let mut g = Graph::new();
    let x = g.input(imgs.clone());
    let taps = fx.forward(&mut g, x);
    taps.into_iter()
        .map(|t| {
            let gm = gram(&mut g, t);
            g.value(gm).clone()
        })
        .collect()
}

pub fn style_loss(m: &ImageTensor, y: &ImageTensor, fx: &FeatureExtractor) -> f64 {
    let mut g = Graph::new();
    let mv = g.input(m.tensor().clone().unsqueeze0());
    let yv = g.input(y.tensor().clone().unsqueeze0());
    let l = style_loss_graph(&mut g, fx, mv, yv);
    g.value(l).item()
}

/// `sum_i max(0, |a_i - p_i|^2 - |a_i - n_i|^2 + margin)` over the leading axis.
pub fn triplet_graph(g: &mut Graph, va: Var, vp: Var, vn: Var, margin: f64) -> Var {
    let dp = g.sub(va, vp);
    let dp = g.square(dp);
    let dp = g.sum_per_sample(dp);
    let dn = g.sub(va, vn);
    let dn = g.square(dn);
    let dn = g.sum_per_sample(dn);
    let h = g.sub(dp, dn);
    let h = g.add_scalar(h, margin);
    let h = g.relu(h);
    g.sum(h)
}

pub fn triplet_loss(va: &Tensor, vp: &Tensor, vn: &Tensor, margin: f64) -> Result<f64> {
    if va.shape() != vp.shape() || va.shape() != vn.shape() {
        return Err(Error::shape("triplet codes must share a shape"));
    }
    let mut g = Graph::new();
    let b = |t: &Tensor| {
        if t.ndim() == 0 {
            t.clone().reshape(&[1]).unsqueeze0()
        } else {
            t.clone().unsqueeze0()
        }
    };
    let (a, p, n) = (g.input(b(va)), g.input(b(vp)), g.input(b(vn)));
    let l = triplet_graph(&mut g, a, p, n, margin);
    Ok(g.value(l).item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Discriminator,
    Generator,
}

/// Relativistic-average loss on per-sample critic values `real: [N]`, `fake: [M]`.
///
/// ```text
/// discriminator: mean softplus(-(r - mean f)) + mean softplus(f - mean r)
/// generator:     mean softplus(-(f - mean r)) + mean softplus(r - mean f)
/// ```
///
/// `softplus(-d) = -log sigmoid(d)` and `softplus(d) = -log(1 - sigmoid(d))`.
pub fn ragan_graph(g: &mut Graph, real: Var, fake: Var, side: Side) -> Var {
    let mr = g.mean(real);
    let mf = g.mean(fake);
    let nmr = g.neg(mr);
    let nmf = g.neg(mf);
    let r_rel = g.add_scalar_var(real, nmf);
    let f_rel = g.add_scalar_var(fake, nmr);
    let (up, down) = match side {
        Side::Discriminator => (r_rel, f_rel),
        Side::Generator => (f_rel, r_rel),
    };
    let up = g.neg(up);
    let a = g.softplus(up);
    let a = g.mean(a);
    let b = g.softplus(down);
    let b = g.mean(b);
    g.add(a, b)
}

pub fn ragan_loss(real: &[f64], fake: &[f64], side: Side) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::invalid(
            "relativistic loss needs at least one real and one fake score",
        ));
    }
    let mut g = Graph::new();
    let r = g.input(Tensor::new(&[real.len()], real.to_vec()));
    let f = g.input(Tensor::new(&[fake.len()], fake.to_vec()));
    let l = ragan_graph(&mut g, r, f, side);
    Ok(g.value(l).item())
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= k) {
        Some(l) => Err(Error::invalid(format!(
            "label {l} out of range for {k} classes"
        ))),
        None => Ok(()),
    }
}

/// Cross-entropy summed over the batch, `logits: [N, K]`.
pub fn cross_entropy_graph(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape(format!(
            "logits {s:?} do not match {} labels",
            labels.len()
        )));
    }
    check_labels(labels, s[1])?;
    let lp = g.log_softmax_last(logits);
    let picked = g.gather_rows(lp, labels);
    let total = g.sum(picked);
    Ok(g.neg(total))
}

pub fn classification_loss(logits: &[f64], label: usize) -> Result<f64> {
    check_labels(&[label], logits.len())?;
    let mut g = Graph::new();
    let l = g.input(Tensor::new(&[1, logits.len()], logits.to_vec()));
    let ce = cross_entropy_graph(&mut g, l, &[label])?;
    Ok(g.value(ce).item())
}

pub fn total_loss(adv: f64, tri: f64, sty: f64, cls_g: f64, w: &LossWeights) -> f64 {
    adv + w.w_tri * tri + w.w_sty * sty + w.w_cls * cls_g
}

/// Weighted sum of scalar graph terms; absent terms contribute nothing.
pub fn total_loss_graph(
    g: &mut Graph,
    adv: Option<Var>,
    tri: Option<Var>,
    sty: Option<Var>,
    cls_g: Option<Var>,
    w: &LossWeights,
) -> Option<Var> {
    let mut parts = Vec::new();
    if let Some(a) = adv {
        parts.push(a);
    }
    for (v, k) in [(tri, w.w_tri), (sty, w.w_sty), (cls_g, w.w_cls)] {
        if let Some(v) = v {
            parts.push(g.scale(v, k));
        }
    }
    (!parts.is_empty()).then(|| g.add_n(&parts))
}
