//! Batch and instance normalization with affine scale/shift.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// Added to every variance before it is inverted.
pub const NORM_EPS: f64 = 1e-5;

/// Per-channel statistics of one batch-norm forward, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Normalizes over groups. With `per_sample` each (sample, channel) is a group
/// (instance norm); otherwise each channel across the batch is a group (batch norm).
fn normalize_groups(x: &Tensor, per_sample: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, h, w, c) = x.dims4();
    let hw = h * w;
    let groups = if per_sample { n * c } else { c };
    let count = if per_sample { hw } else { n * hw } as f64;
    let gid = |s: usize, ch: usize| if per_sample { s * c + ch } else { ch };
    let xv = x.data();
    let mut mean = vec![0.0; groups];
    for s in 0..n {
        for p in 0..hw {
            for ch in 0..c {
                mean[gid(s, ch)] += xv[(s * hw + p) * c + ch];
            }
        }
    }
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![0.0; groups];
    for s in 0..n {
        for p in 0..hw {
            for ch in 0..c {
                let d = xv[(s * hw + p) * c + ch] - mean[gid(s, ch)];
                var[gid(s, ch)] += d * d;
            }
        }
    }
    for v in &mut var {
        *v /= count;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; xv.len()];
    for s in 0..n {
        for p in 0..hw {
            for ch in 0..c {
                let i = (s * hw + p) * c + ch;
                let g = gid(s, ch);
                xhat[i] = (xv[i] - mean[g]) * inv_std[g];
            }
        }
    }
    (xhat, mean, var)
}

impl Graph {
    fn group_norm_affine(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        per_sample: bool,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let (n, h, w, c) = self.value(x).dims4();
        assert_eq!(self.value(scale).len(), c, "norm scale length");
        assert_eq!(self.value(shift).len(), c, "norm shift length");
        let (xhat, mean, var) = normalize_groups(self.value(x), per_sample);
        let gamma = self.value(scale).data().to_vec();
        let beta = self.value(shift).data().to_vec();
        let hw = h * w;
        let mut out = xhat.clone();
        for px in out.chunks_exact_mut(c) {
            for ((v, &gm), &bt) in px.iter_mut().zip(&gamma).zip(&beta) {
                *v = gm * *v + bt;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let y = self.push(
            Tensor::new(&[n, h, w, c], out),
            &[x, scale, shift],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let gamma = ctx.inputs[1].data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (gp, xp) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += gp[ch] * xp[ch];
                        dbeta[ch] += gp[ch];
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let groups = inv_std.len();
                    let gid = |s: usize, ch: usize| if per_sample { s * c + ch } else { ch };
                    let count = if per_sample { hw } else { n * hw } as f64;
                    // Per group: mean(dxhat) and mean(dxhat * xhat).
                    let mut m1 = vec![0.0; groups];
                    let mut m2 = vec![0.0; groups];
                    for s in 0..n {
                        for p in 0..hw {
                            for ch in 0..c {
                                let i = (s * hw + p) * c + ch;
                                let d = g[i] * gamma[ch];
                                m1[gid(s, ch)] += d;
                                m2[gid(s, ch)] += d * xhat[i];
                            }
                        }
                    }
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for p in 0..hw {
                            for (ch, &gm) in gamma.iter().enumerate().take(c) {
                                let i = (s * hw + p) * c + ch;
                                let k = gid(s, ch);
                                let d = g[i] * gm;
                                dx[i] = inv_std[k] * (d - m1[k] / count - xhat[i] * m2[k] / count);
                            }
                        }
                    }
                    Tensor::new(&[n, h, w, c], dx)
                });
                vec![
                    gx,
                    Some(Tensor::new(&[c], dgamma)),
                    Some(Tensor::new(&[c], dbeta)),
                ]
            }),
        );
        (y, mean, var)
    }

    /// Training-mode batch norm over batch and spatial axes.
    ///
    /// Panics on a batch of one; callers validate that first.
    pub fn batch_norm_train(&mut self, x: Var, scale: Var, shift: Var) -> (Var, BatchStats) {
        let (n, h, w, _) = self.value(x).dims4();
        assert!(
            n >= 2,
            "batch norm in train mode needs at least two samples"
        );
        let (y, mean, var) = self.group_norm_affine(x, scale, shift, false);
        let count = (n * h * w) as f64;
        let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
        (
            y,
            BatchStats {
                mean,
                var: unbiased,
            },
        )
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Var {
        let (n, h, w, c) = self.value(x).dims4();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mean = mean.to_vec();
        let xv = self.value(x).data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut out = Vec::with_capacity(xv.len());
        for px in xv.chunks_exact(c) {
            out.extend((0..c).map(|ch| gamma[ch] * (px[ch] - mean[ch]) * inv_std[ch] + beta[ch]));
        }
        self.push(
            Tensor::new(&[n, h, w, c], out),
            &[x, scale, shift],
            Box::new(move |ctx| {
                let g = ctx.grad.data();
                let xv = ctx.inputs[0].data();
                let gamma = ctx.inputs[1].data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for ((gp, xp), dp) in g
                    .chunks_exact(c)
                    .zip(xv.chunks_exact(c))
                    .zip(dx.chunks_exact_mut(c))
                {
                    for ch in 0..c {
                        dgamma[ch] += gp[ch] * (xp[ch] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gp[ch];
                        dp[ch] = gp[ch] * gamma[ch] * inv_std[ch];
                    }
                }
                vec![
                    Some(Tensor::new(&[n, h, w, c], dx)),
                    Some(Tensor::new(&[c], dgamma)),
                    Some(Tensor::new(&[c], dbeta)),
                ]
            }),
        )
    }

    /// Instance norm: per sample and channel over the spatial axes.
    pub fn instance_norm(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (_, h, w, _) = self.value(x).dims4();
        assert!(
            h * w >= 2,
            "instance norm needs at least two spatial positions"
        );
        self.group_norm_affine(x, scale, shift, true).0
    }
}
