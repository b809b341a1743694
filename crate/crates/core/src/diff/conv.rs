//! Spatial ops on NHWC tensors: convolution, transposed convolution, pooling, resizing.
//!
//! Convolution weights are `[k, k, c_in, c_out]`, which is already the row-major
//! `(k*k*c_in) x c_out` matrix multiplied against im2col patches.

use super::graph::{Graph, Var};
use super::tensor::{gemm, Tensor};

/// Geometry shared by a convolution and its transpose. The "big" side is the
/// convolution input (and transposed-convolution output); the "small" side is the
/// convolution output.
#[derive(Clone, Copy, Debug)]
struct Geom {
    big_h: usize,
    big_w: usize,
    big_c: usize,
    small_h: usize,
    small_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.big_c
    }

    fn small_len(&self) -> usize {
        self.small_h * self.small_w
    }

    /// Gathers `[small_h * small_w, k * k * big_c]` patches from one big-side image.
    fn im2col(&self, big: &[f64], cols: &mut [f64]) {
        let pl = self.patch_len();
        let c = self.big_c;
        for oy in 0..self.small_h {
            for ox in 0..self.small_w {
                let row = &mut cols[(oy * self.small_w + ox) * pl..][..pl];
                let ix0 = (ox * self.stride) as isize - self.pad as isize;
                let inside_x = ix0 >= 0 && ix0 as usize + self.k <= self.big_w;
                for a in 0..self.k {
                    let iy = (oy * self.stride + a) as isize - self.pad as isize;
                    if inside_x && iy >= 0 && (iy as usize) < self.big_h {
                        let src = (iy as usize * self.big_w + ix0 as usize) * c;
                        row[a * self.k * c..(a + 1) * self.k * c]
                            .copy_from_slice(&big[src..src + self.k * c]);
                        continue;
                    }
                    for b in 0..self.k {
                        let ix = ix0 + b as isize;
                        let dst = &mut row[(a * self.k + b) * c..][..c];
                        if iy < 0
                            || ix < 0
                            || iy >= self.big_h as isize
                            || ix >= self.big_w as isize
                        {
                            dst.fill(0.0);
                        } else {
                            let src = (iy as usize * self.big_w + ix as usize) * c;
                            dst.copy_from_slice(&big[src..src + c]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds patches back onto one big-side image (adjoint of `im2col`).
    fn col2im(&self, cols: &[f64], big: &mut [f64]) {
        let pl = self.patch_len();
        let c = self.big_c;
        for oy in 0..self.small_h {
            for ox in 0..self.small_w {
                let row = &cols[(oy * self.small_w + ox) * pl..][..pl];
                let ix0 = (ox * self.stride) as isize - self.pad as isize;
                let inside_x = ix0 >= 0 && ix0 as usize + self.k <= self.big_w;
                for a in 0..self.k {
                    let iy = (oy * self.stride + a) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.big_h as isize {
                        continue;
                    }
                    if inside_x {
                        let dst = (iy as usize * self.big_w + ix0 as usize) * c;
                        let src = &row[a * self.k * c..(a + 1) * self.k * c];
                        for (d, s) in big[dst..dst + self.k * c].iter_mut().zip(src) {
                            *d += s;
                        }
                        continue;
                    }
                    for b in 0..self.k {
                        let ix = ix0 + b as isize;
                        if ix < 0 || ix >= self.big_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.big_w + ix as usize) * c;
                        for (d, s) in big[dst..dst + c]
                            .iter_mut()
                            .zip(&row[(a * self.k + b) * c..][..c])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(
        len + 2 * pad >= k,
        "kernel {k} larger than padded input {len}+2*{pad}"
    );
    (len + 2 * pad - k) / stride + 1
}

/// `[k, k, ci, co]` -> `[ci, k, k, co]`, the matrix a transposed convolution multiplies by.
fn permute_deconv_weight(w: &[f64], k: usize, ci: usize, co: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for ab in 0..k * k {
        for i in 0..ci {
            let src = (ab * ci + i) * co;
            let dst = (i * k * k + ab) * co;
            out[dst..dst + co].copy_from_slice(&w[src..src + co]);
        }
    }
    out
}

fn unpermute_deconv_weight(p: &[f64], k: usize, ci: usize, co: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for ab in 0..k * k {
        for i in 0..ci {
            let src = (i * k * k + ab) * co;
            let dst = (ab * ci + i) * co;
            out[dst..dst + co].copy_from_slice(&p[src..src + co]);
        }
    }
    out
}

impl Graph {
    /// Cross-correlation of `[N, H, W, Cin]` with a `[k, k, Cin, Cout]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (n, h, wd, ci) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [k, k, cin, cout]");
        assert_eq!(ws[0], ws[1], "square kernels only");
        assert_eq!(ws[2], ci, "conv input channels {ci} vs weight {:?}", ws);
        let (k, co) = (ws[0], ws[3]);
        let geom = Geom {
            big_h: h,
            big_w: wd,
            big_c: ci,
            small_h: conv_out(h, k, stride, pad),
            small_w: conv_out(wd, k, stride, pad),
            k,
            stride,
            pad,
        };
        let (sl, pl) = (geom.small_len(), geom.patch_len());
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let mut out = vec![0.0; n * sl * co];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = if pointwise {
                Vec::new()
            } else {
                vec![0.0; sl * pl]
            };
            for s in 0..n {
                let xs = &xv[s * h * wd * ci..(s + 1) * h * wd * ci];
                let a = if pointwise {
                    xs
                } else {
                    geom.im2col(xs, &mut cols);
                    &cols
                };
                gemm(
                    sl,
                    pl,
                    co,
                    a,
                    false,
                    wv,
                    false,
                    0.0,
                    &mut out[s * sl * co..],
                );
            }
        }
        self.push(
            Tensor::new(&[n, geom.small_h, geom.small_w, co], out),
            &[x, w],
            Box::new(move |ctx| {
                let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
                let big = geom.big_h * geom.big_w * geom.big_c;
                let mut gx = ctx.needs[0].then(|| vec![0.0; n * big]);
                let mut gw = ctx.needs[1].then(|| vec![0.0; pl * co]);
                let mut cols = vec![0.0; sl * pl];
                for s in 0..n {
                    let gs = &g[s * sl * co..(s + 1) * sl * co];
                    if let Some(gw) = gw.as_mut() {
                        let xs = &xv[s * big..(s + 1) * big];
                        let a: &[f64] = if pointwise {
                            xs
                        } else {
                            geom.im2col(xs, &mut cols);
                            &cols
                        };
                        gemm(pl, sl, co, a, true, gs, false, 1.0, gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        if pointwise {
                            gemm(sl, co, pl, gs, false, wv, true, 0.0, &mut gx[s * big..]);
                        } else {
                            gemm(sl, co, pl, gs, false, wv, true, 0.0, &mut cols);
                            geom.col2im(&cols, &mut gx[s * big..(s + 1) * big]);
                        }
                    }
                }
                vec![
                    gx.map(|d| Tensor::new(ctx.inputs[0].shape(), d)),
                    gw.map(|d| Tensor::new(ctx.inputs[1].shape(), d)),
                ]
            }),
        )
    }

    /// Transposed convolution of `[N, H, W, Cin]` with a `[k, k, Cin, Cout]` kernel.
    /// The output side is `(H - 1) * stride - 2 * pad + k`; with k=4, s=2, p=1 that
    /// doubles each spatial dimension.
    pub fn deconv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (n, h, wd, ci) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "deconv weight must be [k, k, cin, cout]");
        assert_eq!(ws[2], ci, "deconv input channels {ci} vs weight {:?}", ws);
        let (k, co) = (ws[0], ws[3]);
        let oh = (h - 1) * stride + k - 2 * pad;
        let ow = (wd - 1) * stride + k - 2 * pad;
        let geom = Geom {
            big_h: oh,
            big_w: ow,
            big_c: co,
            small_h: h,
            small_w: wd,
            k,
            stride,
            pad,
        };
        assert_eq!(
            conv_out(oh, k, stride, pad),
            h,
            "deconv geometry is not invertible"
        );
        let (sl, pl) = (geom.small_len(), geom.patch_len());
        let wp = permute_deconv_weight(self.value(w).data(), k, ci, co);
        let big = oh * ow * co;
        let mut out = vec![0.0; n * big];
        {
            let xv = self.value(x).data();
            let mut cols = vec![0.0; sl * pl];
            for s in 0..n {
                gemm(
                    sl,
                    ci,
                    pl,
                    &xv[s * sl * ci..],
                    false,
                    &wp,
                    false,
                    0.0,
                    &mut cols,
                );
                geom.col2im(&cols, &mut out[s * big..(s + 1) * big]);
            }
        }
        self.push(
            Tensor::new(&[n, oh, ow, co], out),
            &[x, w],
            Box::new(move |ctx| {
                let (xv, g) = (ctx.inputs[0].data(), ctx.grad.data());
                let wp = permute_deconv_weight(ctx.inputs[1].data(), k, ci, co);
                let mut gx = ctx.needs[0].then(|| vec![0.0; n * sl * ci]);
                let mut gwp = ctx.needs[1].then(|| vec![0.0; ci * pl]);
                let mut cols = vec![0.0; sl * pl];
                for s in 0..n {
                    geom.im2col(&g[s * big..(s + 1) * big], &mut cols);
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            sl,
                            pl,
                            ci,
                            &cols,
                            false,
                            &wp,
                            true,
                            0.0,
                            &mut gx[s * sl * ci..],
                        );
                    }
                    if let Some(gwp) = gwp.as_mut() {
                        gemm(ci, sl, pl, &xv[s * sl * ci..], true, &cols, false, 1.0, gwp);
                    }
                }
                vec![
                    gx.map(|d| Tensor::new(ctx.inputs[0].shape(), d)),
                    gwp.map(|d| {
                        Tensor::new(
                            ctx.inputs[1].shape(),
                            unpermute_deconv_weight(&d, k, ci, co),
                        )
                    }),
                ]
            }),
        )
    }

    /// 2x2 non-overlapping max pooling. Ties resolve to the first element in
    /// row-major order within the window.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, h, w, c) = self.value(x).dims4();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "max_pool2 needs even spatial dims, got {h}x{w}"
        );
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for s in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let i = ((s * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xv[i] > best {
                                best = xv[i];
                                best_i = i;
                            }
                        }
                        let o = ((s * oh + oy) * ow + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[n, oh, ow, c], out),
            &[x],
            Box::new(move |ctx| {
                let mut g = Tensor::zeros(ctx.inputs[0].shape());
                let gd = g.data_mut();
                for (o, &i) in argmax.iter().enumerate() {
                    gd[i] += ctx.grad.data()[o];
                }
                vec![Some(g)]
            }),
        )
    }

    /// 2x2 non-overlapping average pooling.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (n, h, w, c) = self.value(x).dims4();
        assert!(
            h % 2 == 0 && w % 2 == 0,
            "avg_pool2 needs even spatial dims, got {h}x{w}"
        );
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * oh * ow * c];
        for s in 0..n {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((s * h + y) * w + xx) * c;
                    let dst = ((s * oh + y / 2) * ow + xx / 2) * c;
                    for ch in 0..c {
                        out[dst + ch] += 0.25 * xv[src + ch];
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[n, oh, ow, c], out),
            &[x],
            Box::new(move |ctx| {
                let gv = ctx.grad.data();
                let mut g = vec![0.0; n * h * w * c];
                for s in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = ((s * h + y) * w + xx) * c;
                            let src = ((s * oh + y / 2) * ow + xx / 2) * c;
                            for ch in 0..c {
                                g[dst + ch] = 0.25 * gv[src + ch];
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, h, w, c], g))]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, h, w, c) = self.value(x).dims4();
        let (oh, ow) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * oh * ow * c];
        for s in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let dst = ((s * oh + y) * ow + xx) * c;
                    let src = ((s * h + y / 2) * w + xx / 2) * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        self.push(
            Tensor::new(&[n, oh, ow, c], out),
            &[x],
            Box::new(move |ctx| {
                let gv = ctx.grad.data();
                let mut g = vec![0.0; n * h * w * c];
                for s in 0..n {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let src = ((s * oh + y) * ow + xx) * c;
                            let dst = ((s * h + y / 2) * w + xx / 2) * c;
                            for ch in 0..c {
                                g[dst + ch] += gv[src + ch];
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, h, w, c], g))]
            }),
        )
    }

    /// Bilinear resize with half-pixel centres (`align_corners = false`).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (n, h, w, c) = self.value(x).dims4();
        assert!(out_h >= 1 && out_w >= 1, "resize target must be non-empty");
        let rows = bilinear_taps(h, out_h);
        let cols = bilinear_taps(w, out_w);
        let out = resize_apply(self.value(x).data(), n, h, w, c, &rows, &cols);
        self.push(
            Tensor::new(&[n, out_h, out_w, c], out),
            &[x],
            Box::new(move |ctx| {
                let gv = ctx.grad.data();
                let mut g = vec![0.0; n * h * w * c];
                for s in 0..n {
                    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                            let src = &gv[((s * out_h + oy) * out_w + ox) * c..][..c];
                            for (yy, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                                for (xx, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                    let wt = wy * wx;
                                    if wt == 0.0 {
                                        continue;
                                    }
                                    let dst = ((s * h + yy) * w + xx) * c;
                                    for ch in 0..c {
                                        g[dst + ch] += wt * src[ch];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&[n, h, w, c], g))]
            }),
        )
    }
}

/// Per output index: `(lower source index, upper source index, upper weight)`.
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let f = if i1 == i0 { 0.0 } else { pos - i0 as f64 };
            (i0, i1, f)
        })
        .collect()
}

pub(crate) fn resize_apply(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    rows: &[(usize, usize, f64)],
    cols: &[(usize, usize, f64)],
) -> Vec<f64> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = vec![0.0; n * oh * ow * c];
    for s in 0..n {
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let dst = ((s * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let at = |yy: usize, xx: usize| x[((s * h + yy) * w + xx) * c + ch];
                    let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                    let bot = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                    out[dst + ch] = (1.0 - fy) * top + fy * bot;
                }
            }
        }
    }
    out
}

/// Bilinear resize of a plain NHWC tensor, outside any graph.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, h, w, c) = x.dims4();
    let rows = bilinear_taps(h, out_h);
    let cols = bilinear_taps(w, out_w);
    Tensor::new(
        &[n, out_h, out_w, c],
        resize_apply(x.data(), n, h, w, c, &rows, &cols),
    )
}
