//! Elementwise, reduction and reshaping ops.

use super::graph::{Graph, Var};
use super::tensor::{gemm, Tensor};

/// Elementwise nonlinearities used by the networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

/// Slope used by every LeakyReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let out = self.value(x).map(f);
        self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let xin = ctx.inputs[0].data();
                let y = ctx.output.data();
                let data = ctx
                    .grad
                    .data()
                    .iter()
                    .zip(xin.iter().zip(y))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(Tensor::new(ctx.grad.shape(), data))]
            }),
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::LeakyRelu(s) => self.leaky_relu(x, s),
            Activation::Tanh => self.tanh(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, move |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, move |x| x + k, |_, _| 1.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            out,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            out,
            &[a, b],
            Box::new(|ctx| vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-1.0))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            out,
            &[a, b],
            Box::new(|ctx| {
                let ga = ctx.needs[0].then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y));
                let gb = ctx.needs[1].then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x));
                vec![ga, gb]
            }),
        )
    }

    /// Sum of several same-shape tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut out = self.value(xs[0]).clone();
        for &x in &xs[1..] {
            out.add_assign(self.value(x));
        }
        let n = xs.len();
        self.push(
            out,
            xs,
            Box::new(move |ctx| (0..n).map(|_| Some(ctx.grad.clone())).collect()),
        )
    }

    /// Multiplies every element by a single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let out = self.value(x).scale(k);
        self.push(
            out,
            &[x, s],
            Box::new(|ctx| {
                let k = ctx.inputs[1].item();
                let gx = ctx.needs[0].then(|| ctx.grad.scale(k));
                let gs = ctx.needs[1]
                    .then(|| Tensor::new(ctx.inputs[1].shape(), vec![ctx.grad.dot(ctx.inputs[0])]));
                vec![gx, gs]
            }),
        )
    }

    /// Divides every element by a single-element tensor `s`.
    pub fn div_by(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let out = self.value(x).scale(1.0 / k);
        self.push(
            out,
            &[x, s],
            Box::new(|ctx| {
                let k = ctx.inputs[1].item();
                let gx = ctx.needs[0].then(|| ctx.grad.scale(1.0 / k));
                let gs = ctx.needs[1].then(|| {
                    Tensor::new(
                        ctx.inputs[1].shape(),
                        vec![-ctx.grad.dot(ctx.inputs[0]) / (k * k)],
                    )
                });
                vec![gx, gs]
            }),
        )
    }

    /// Adds a single-element tensor `s` to every element.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v + k);
        self.push(
            out,
            &[x, s],
            Box::new(|ctx| {
                let gs =
                    ctx.needs[1].then(|| Tensor::new(ctx.inputs[1].shape(), vec![ctx.grad.sum()]));
                vec![Some(ctx.grad.clone()), gs]
            }),
        )
    }

    /// Broadcast-adds a `[C]` vector over the trailing axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.value(b).len();
        let mut out = self.value(x).clone();
        assert_eq!(*out.shape().last().unwrap(), c, "bias length mismatch");
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        self.push(
            out,
            &[x, b],
            Box::new(move |ctx| {
                let gb = ctx.needs[1].then(|| {
                    let mut acc = vec![0.0; c];
                    for row in ctx.grad.data().chunks(c) {
                        for (a, g) in acc.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    Tensor::new(&[c], acc)
                });
                vec![Some(ctx.grad.clone()), gb]
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(
            out,
            &[x],
            Box::new(|ctx| vec![Some(Tensor::full(ctx.inputs[0].shape(), ctx.grad.item()))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums each leading-axis sample: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.shape()[0];
        let per = t.len() / n;
        let out = Tensor::new(&[n], t.data().chunks(per).map(|c| c.iter().sum()).collect());
        self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(n * per);
                for &gi in ctx.grad.data() {
                    g.extend(std::iter::repeat_n(gi, per));
                }
                vec![Some(Tensor::new(ctx.inputs[0].shape(), g))]
            }),
        )
    }

    /// Means each leading-axis sample: `[N, ...] -> [N]`.
    pub fn mean_per_sample(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let per = (t.len() / t.shape()[0]) as f64;
        let s = self.sum_per_sample(x);
        self.scale(s, 1.0 / per)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        self.push(
            out,
            &[x],
            Box::new(|ctx| vec![Some(ctx.grad.clone().reshape(ctx.inputs[0].shape()))]),
        )
    }

    /// Leading-axis slice `[start, start + count)`.
    pub fn slice_batch(&mut self, x: Var, start: usize, count: usize) -> Var {
        let out = self.value(x).slice_batch(start, count);
        self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let inp = ctx.inputs[0];
                let per = inp.len() / inp.shape()[0];
                let mut g = Tensor::zeros(inp.shape());
                g.data_mut()[start * per..(start + count) * per].copy_from_slice(ctx.grad.data());
                vec![Some(g)]
            }),
        )
    }

    /// Leading-axis concatenation.
    pub fn concat_batch(&mut self, xs: &[Var]) -> Var {
        let parts: Vec<&Tensor> = xs.iter().map(|&x| self.value(x)).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| p.len()).collect();
        let out = Tensor::stack_batch(&parts);
        self.push(
            out,
            xs,
            Box::new(move |ctx| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(&ctx.inputs)
                    .map(|(&len, inp)| {
                        let g = Tensor::new(inp.shape(), ctx.grad.data()[off..off + len].to_vec());
                        off += len;
                        Some(g)
                    })
                    .collect()
            }),
        )
    }

    /// Concatenates rank-matching tensors along the trailing (channel) axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let ca = *ta.shape().last().unwrap();
        let cb = *tb.shape().last().unwrap();
        assert_eq!(
            ta.shape()[..ta.ndim() - 1],
            tb.shape()[..tb.ndim() - 1],
            "concat_channels leading shape mismatch"
        );
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for (ra, rb) in ta.data().chunks(ca).zip(tb.data().chunks(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        self.push(
            Tensor::new(&shape, data),
            &[a, b],
            Box::new(move |ctx| {
                let mut ga = Vec::with_capacity(ctx.inputs[0].len());
                let mut gb = Vec::with_capacity(ctx.inputs[1].len());
                for row in ctx.grad.data().chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                vec![
                    Some(Tensor::new(ctx.inputs[0].shape(), ga)),
                    Some(Tensor::new(ctx.inputs[1].shape(), gb)),
                ]
            }),
        )
    }

    /// Matrix product of rank-2 tensors with optional transposes.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (ar, ac) = (self.shape(a)[0], self.shape(a)[1]);
        let (br, bc) = (self.shape(b)[0], self.shape(b)[1]);
        let a1 = self.reshape(a, &[1, ar, ac]);
        let b1 = self.reshape(b, &[1, br, bc]);
        let y = self.bmm(a1, b1, trans_a, trans_b);
        let s = self.shape(y).to_vec();
        self.reshape(y, &[s[1], s[2]])
    }

    /// Batched matrix product of `[N, r, c]` tensors with optional transposes.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(ta.ndim(), 3, "bmm expects rank-3 inputs");
        assert_eq!(tb.ndim(), 3, "bmm expects rank-3 inputs");
        let n = ta.shape()[0];
        assert_eq!(tb.shape()[0], n, "bmm batch mismatch");
        let (m, k) = if trans_a {
            (ta.shape()[2], ta.shape()[1])
        } else {
            (ta.shape()[1], ta.shape()[2])
        };
        let (k2, p) = if trans_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        assert_eq!(k, k2, "bmm inner dimension mismatch");
        let mut out = vec![0.0; n * m * p];
        for i in 0..n {
            gemm(
                m,
                k,
                p,
                &ta.data()[i * m * k..],
                trans_a,
                &tb.data()[i * k * p..],
                trans_b,
                0.0,
                &mut out[i * m * p..],
            );
        }
        self.push(
            Tensor::new(&[n, m, p], out),
            &[a, b],
            Box::new(move |ctx| {
                let (ta, tb, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad.data());
                let ga = ctx.needs[0].then(|| {
                    // dA = dY * B^T, stored in A's layout.
                    let mut ga = vec![0.0; n * m * k];
                    for i in 0..n {
                        let gi = &g[i * m * p..];
                        let bi = &tb.data()[i * k * p..];
                        if trans_a {
                            // A^T is m x k: dA^T = dY * op(B)^T -> dA = op(B) * dY^T, k x m
                            gemm(k, p, m, bi, trans_b, gi, true, 0.0, &mut ga[i * m * k..]);
                        } else {
                            gemm(m, p, k, gi, false, bi, !trans_b, 0.0, &mut ga[i * m * k..]);
                        }
                    }
                    Tensor::new(ta.shape(), ga)
                });
                let gb = ctx.needs[1].then(|| {
                    let mut gb = vec![0.0; n * k * p];
                    for i in 0..n {
                        let gi = &g[i * m * p..];
                        let ai = &ta.data()[i * m * k..];
                        if trans_b {
                            // dB^T = op(A)^T * dY -> dB = dY^T * op(A), p x k
                            gemm(p, m, k, gi, true, ai, trans_a, 0.0, &mut gb[i * k * p..]);
                        } else {
                            gemm(k, m, p, ai, !trans_a, gi, false, 0.0, &mut gb[i * k * p..]);
                        }
                    }
                    Tensor::new(tb.shape(), gb)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().unwrap();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(c).zip(ctx.output.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = *t.shape().last().unwrap();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = ctx.grad.clone();
                for (grow, yrow) in g.data_mut().chunks_mut(c).zip(ctx.output.data().chunks(c)) {
                    let s: f64 = grow.iter().sum();
                    for (gv, &y) in grow.iter_mut().zip(yrow) {
                        *gv -= y.exp() * s;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Picks `x[i, index[i]]` from a `[N, K]` tensor.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let t = self.value(x);
        let (n, k) = (t.shape()[0], t.shape()[1]);
        assert_eq!(index.len(), n, "one index per row");
        let out = Tensor::new(
            &[n],
            index
                .iter()
                .enumerate()
                .map(|(i, &j)| t.data()[i * k + j])
                .collect(),
        );
        let index = index.to_vec();
        self.push(
            out,
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(&[n, k]);
                for (i, &j) in index.iter().enumerate() {
                    g.data_mut()[i * k + j] = ctx.grad.data()[i];
                }
                vec![Some(g)]
            }),
        )
    }

    /// Spatial mean of an NHWC tensor: `[N, H, W, C] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, h, w, c) = self.value(x).dims4();
        let hw = h * w;
        let mut out = vec![0.0; n * c];
        for (i, sample) in self.value(x).data().chunks(hw * c).enumerate() {
            for px in sample.chunks(c) {
                for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(px) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= hw as f64;
        }
        self.push(
            Tensor::new(&[n, c], out),
            &[x],
            Box::new(move |ctx| {
                let mut g = Vec::with_capacity(n * hw * c);
                for i in 0..n {
                    let row: Vec<f64> = ctx.grad.data()[i * c..(i + 1) * c]
                        .iter()
                        .map(|v| v / hw as f64)
                        .collect();
                    for _ in 0..hw {
                        g.extend_from_slice(&row);
                    }
                }
                vec![Some(Tensor::new(&[n, h, w, c], g))]
            }),
        )
    }
}
