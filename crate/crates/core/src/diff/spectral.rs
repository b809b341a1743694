//! Spectral normalization by power iteration.
//!
//! A weight tensor whose trailing axis is the output-feature axis is viewed as an
//! `R x C` matrix `M` (`C` = output features). One power-iteration step with the
//! persisted vector `u` gives
//!
//! ```text
//! v = M u / |M u|,   sigma = |M^T v|,   u' = M^T v / sigma
//! ```
//!
//! and the normalized weight is `W / max(sigma, eps)`. The graph op differentiates
//! through the whole step, so gradients stay exact for a fixed `u`.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;

pub const SIGMA_EPS: f64 = 1e-12;

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().expect("spectral norm of a scalar");
    (shape.iter().product::<usize>() / c, c)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `M u` for row-major `M` (`r x c`).
fn mat_vec(m: &[f64], r: usize, c: usize, u: &[f64]) -> Vec<f64> {
    (0..r)
        .map(|i| {
            m[i * c..(i + 1) * c]
                .iter()
                .zip(u)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// `M^T v` for row-major `M` (`r x c`).
fn mat_t_vec(m: &[f64], r: usize, c: usize, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for i in 0..r {
        let vi = v[i];
        for (o, a) in out.iter_mut().zip(&m[i * c..(i + 1) * c]) {
            *o += a * vi;
        }
    }
    out
}

struct PowerStep {
    v: Vec<f64>,
    u_next: Vec<f64>,
    sigma: f64,
    a_norm: f64,
}

fn power_step(m: &[f64], r: usize, c: usize, u: &[f64]) -> PowerStep {
    let a = mat_vec(m, r, c, u);
    let a_norm = norm(&a).max(SIGMA_EPS);
    let v: Vec<f64> = a.iter().map(|x| x / a_norm).collect();
    let b = mat_t_vec(m, r, c, &v);
    let sigma = norm(&b);
    let u_next = if sigma > SIGMA_EPS {
        b.iter().map(|x| x / sigma).collect()
    } else {
        u.to_vec()
    };
    PowerStep {
        v,
        u_next,
        sigma,
        a_norm,
    }
}

/// Persistent power-iteration vector for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f64>,
}

impl SpectralState {
    pub fn new<R: Rng + ?Sized>(weight_shape: &[usize], rng: &mut R) -> Self {
        let (_, c) = matrix_dims(weight_shape);
        let u = Tensor::randn(&[c], rng).into_data();
        let n = norm(&u).max(SIGMA_EPS);
        Self {
            u: u.into_iter().map(|x| x / n).collect(),
        }
    }

    /// One power-iteration step; updates `u` and returns the sigma estimate.
    pub fn step(&mut self, weight: &Tensor) -> f64 {
        let (r, c) = matrix_dims(weight.shape());
        let ps = power_step(weight.data(), r, c, &self.u);
        self.u = ps.u_next;
        ps.sigma
    }

    /// Runs `iters` power-iteration steps and returns `W / sigma`.
    ///
    /// A zero matrix comes back unchanged.
    pub fn normalize(&mut self, weight: &Tensor, iters: usize) -> Tensor {
        let mut sigma = 0.0;
        for _ in 0..iters.max(1) {
            sigma = self.step(weight);
        }
        weight.scale(1.0 / sigma.max(SIGMA_EPS))
    }
}

impl Graph {
    /// Differentiable sigma estimate for `w` from one power step started at the
    /// constant `u`. Also returns the next `u` for the caller to persist.
    pub fn spectral_sigma(&mut self, w: Var, u: &[f64]) -> (Var, Vec<f64>) {
        let (r, c) = matrix_dims(self.shape(w));
        assert_eq!(u.len(), c, "power-iteration vector length");
        let ps = power_step(self.value(w).data(), r, c, u);
        let u0 = u.to_vec();
        let u_next = ps.u_next.clone();
        let sigma = ps.sigma.max(SIGMA_EPS);
        let live = ps.sigma > SIGMA_EPS;
        let var = self.push(
            Tensor::scalar(sigma),
            &[w],
            Box::new(move |ctx| {
                let g = ctx.grad.item();
                let m = ctx.inputs[0].data();
                let mut grad = vec![0.0; r * c];
                if live {
                    // d sigma / dM = v u'^T + ((I - v v^T) M u' / |M u|) u^T
                    let q = mat_vec(m, r, c, &ps.u_next);
                    let vq: f64 = ps.v.iter().zip(&q).map(|(a, b)| a * b).sum();
                    for i in 0..r {
                        let ri = (q[i] - ps.v[i] * vq) / ps.a_norm;
                        for j in 0..c {
                            grad[i * c + j] = g * (ps.v[i] * ps.u_next[j] + ri * u0[j]);
                        }
                    }
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), grad))]
            }),
        );
        (var, u_next)
    }

    /// `W / sigma(W)` with the one-step estimate above.
    pub fn spectral_normalize(&mut self, w: Var, u: &[f64]) -> (Var, Vec<f64>) {
        let (sigma, u_next) = self.spectral_sigma(w, u);
        (self.div_by(w, sigma), u_next)
    }
}
