use super::{Real, Tape, Tensor, Var};
use crate::error::{param_err, shape_err, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub enum BnMode<'a, T> {
    /// Normalize with batch statistics and fold them into the running stats.
    Train(&'a mut RunningStats<T>),
    /// Normalize with the running statistics.
    Eval(&'a RunningStats<T>),
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns whose stride-1 source column `ox + kx - pad` is
    /// inside the image.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).min(self.ow);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow).max(lo);
        (lo, hi)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_ox(kx);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        out_row[lo..hi].copy_from_slice(&src[lo + kx - g.pad..hi + kx - g.pad]);
                        continue;
                    }
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_ox(kx);
                        let start = iy as usize * g.w + lo + kx - g.pad;
                        let dst = &mut plane[start..start + (hi - lo)];
                        for (d, &v) in dst.iter_mut().zip(&src[oy * g.ow + lo..oy * g.ow + hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{what}: shapes differ {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    /// 2-D cross-correlation. `weight` is `(out, in, kh, kw)`, `bias` has
    /// shape `[out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(param_err!("conv2d stride must be >= 1"));
        }
        let (b, cin, h, w) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4()?;
        if wcin != cin {
            return Err(shape_err!(
                "conv2d: weight expects {wcin} input channels, input {:?} has {cin}",
                self.value(x).shape()
            ));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [cout] {
                return Err(shape_err!(
                    "conv2d: bias shape {:?} does not match {cout} output channels",
                    self.value(bv).shape()
                ));
            }
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        let g = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, cols) = (g.rows(), g.cols());
        let mut out = vec![T::zero(); b * cout * cols];
        {
            let xv = self.value(x).data();
            let wv = self.value(weight).data();
            let mut col = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); rows * cols]
            };
            for n in 0..b {
                let xb = &xv[n * cin * h * w..(n + 1) * cin * h * w];
                let colref: &[T] = if g.is_pointwise() {
                    xb
                } else {
                    im2col(xb, &g, &mut col);
                    &col
                };
                let ob = &mut out[n * cout * cols..(n + 1) * cout * cols];
                T::gemm(
                    cout,
                    rows,
                    cols,
                    T::one(),
                    wv,
                    (rows as isize, 1),
                    colref,
                    (cols as isize, 1),
                    T::zero(),
                    ob,
                    (cols as isize, 1),
                );
            }
            if let Some(bv) = bias {
                let bias = self.value(bv).data();
                for (chunk, &bo) in out.chunks_mut(cols).zip(bias.iter().cycle()) {
                    chunk.iter_mut().for_each(|v| *v += bo);
                }
            }
        }
        let value = Tensor::new(&[b, cout, g.oh, g.ow], out)?;
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(value, &parents, move |ctx| {
            let xv = ctx.parents[0].data();
            let wv = ctx.parents[1].data();
            let dy = ctx.grad.data();
            let mut dx = ctx.wants[0].then(|| vec![T::zero(); xv.len()]);
            let mut dw = ctx.wants[1].then(|| vec![T::zero(); wv.len()]);
            let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { rows * cols }];
            let mut dcol = vec![T::zero(); if dx.is_some() { rows * cols } else { 0 }];
            for n in 0..b {
                let dyb = &dy[n * cout * cols..(n + 1) * cout * cols];
                if let Some(dw) = dw.as_mut() {
                    let xb = &xv[n * cin * h * w..(n + 1) * cin * h * w];
                    let colref: &[T] = if g.is_pointwise() {
                        xb
                    } else {
                        im2col(xb, &g, &mut col);
                        &col
                    };
                    T::gemm(
                        cout,
                        cols,
                        rows,
                        T::one(),
                        dyb,
                        (cols as isize, 1),
                        colref,
                        (1, cols as isize),
                        T::one(),
                        dw,
                        (rows as isize, 1),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[n * cin * h * w..(n + 1) * cin * h * w];
                    if g.is_pointwise() {
                        T::gemm(
                            rows,
                            cout,
                            cols,
                            T::one(),
                            wv,
                            (1, rows as isize),
                            dyb,
                            (cols as isize, 1),
                            T::zero(),
                            dxb,
                            (cols as isize, 1),
                        );
                    } else {
                        T::gemm(
                            rows,
                            cout,
                            cols,
                            T::one(),
                            wv,
                            (1, rows as isize),
                            dyb,
                            (cols as isize, 1),
                            T::zero(),
                            &mut dcol,
                            (cols as isize, 1),
                        );
                        col2im(&dcol, &g, dxb);
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(ctx.parents[0].shape(), d).expect("dx shape")),
                dw.map(|d| Tensor::new(ctx.parents[1].shape(), d).expect("dw shape")),
            ];
            if ctx.parents.len() == 3 {
                grads.push(ctx.wants[2].then(|| {
                    let mut db = vec![T::zero(); cout];
                    for (chunk, o) in dy.chunks(cols).zip((0..cout).cycle()) {
                        db[o] += chunk.iter().copied().sum();
                    }
                    Tensor::new(&[cout], db).expect("db shape")
                }));
            }
            grads
        }))
    }

    /// Per-channel batch normalization with fixed epsilon [`BN_EPS`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(shape_err!(
                    "batch_norm: {name} shape {:?} does not match {c} channels",
                    self.value(v).shape()
                ));
            }
        }
        let plane = h * w;
        let count = b * plane;
        let eps = T::lit(BN_EPS);
        let xv = self.value(x).data();
        let (mean, var) = match &mode {
            BnMode::Train(_) => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for n in 0..b {
                        let off = (n * c + ch) * plane;
                        s += xv[off..off + plane].iter().copied().sum::<T>();
                    }
                    let m = s / T::from_usize(count).unwrap();
                    let mut sq = T::zero();
                    for n in 0..b {
                        let off = (n * c + ch) * plane;
                        sq += xv[off..off + plane]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / T::from_usize(count).unwrap();
                }
                (mean, var)
            }
            BnMode::Eval(stats) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(shape_err!(
                        "batch_norm: running stats have {} channels, input has {c}",
                        stats.mean.len()
                    ));
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..b {
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                for i in off..off + plane {
                    let z = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = gv[ch] * z + bv[ch];
                }
            }
        }
        let training = matches!(mode, BnMode::Train(_));
        if let BnMode::Train(stats) = mode {
            if stats.mean.len() != c {
                return Err(shape_err!(
                    "batch_norm: running stats have {} channels, input has {c}",
                    stats.mean.len()
                ));
            }
            let mom = T::lit(BN_MOMENTUM);
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            for ch in 0..c {
                stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
            }
        }
        let value = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(value, &[x, gamma, beta], move |ctx| {
            let dy = ctx.grad.data();
            let gv = ctx.parents[1].data();
            let mut sum_dy = vec![T::zero(); c];
            let mut sum_dy_xhat = vec![T::zero(); c];
            for n in 0..b {
                for ch in 0..c {
                    let off = (n * c + ch) * plane;
                    for i in off..off + plane {
                        sum_dy[ch] += dy[i];
                        sum_dy_xhat[ch] += dy[i] * xhat[i];
                    }
                }
            }
            let dx = ctx.wants[0].then(|| {
                let mut dx = vec![T::zero(); dy.len()];
                let nf = T::from_usize(count).unwrap();
                for n in 0..b {
                    for ch in 0..c {
                        let off = (n * c + ch) * plane;
                        let k = gv[ch] * inv_std[ch];
                        for i in off..off + plane {
                            dx[i] = if training {
                                k * (dy[i] - sum_dy[ch] / nf - xhat[i] * sum_dy_xhat[ch] / nf)
                            } else {
                                k * dy[i]
                            };
                        }
                    }
                }
                Tensor::new(ctx.parents[0].shape(), dx).expect("dx shape")
            });
            vec![
                dx,
                ctx.wants[1].then(|| Tensor::new(&[c], sum_dy_xhat.clone()).unwrap()),
                ctx.wants[2].then(|| Tensor::new(&[c], sum_dy.clone()).unwrap()),
            ]
        }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(value, &[x], |ctx| {
            let g = ctx
                .grad
                .zip_map(ctx.output, |g, y| if y > T::zero() { g } else { T::zero() })
                .expect("relu grad shape");
            vec![Some(g)]
        })
    }

    /// 2×2 mean pooling with stride 2. Height and width must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("avg_pool2 needs even height and width, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(value, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                for y in 0..h {
                    for xx in 0..w {
                        dx[p * h * w + y * w + xx] = g[p * oh * ow + (y / 2) * ow + xx / 2] * quarter;
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).unwrap())]
        }))
    }

    /// Doubles height and width with bilinear interpolation
    /// (half-pixel centers, edge clamped).
    pub fn upsample_bilinear2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let ys = bilinear_taps::<T>(h);
        let xs = bilinear_taps::<T>(w);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                    dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(value, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut dx = vec![T::zero(); b * c * h * w];
            for p in 0..b * c {
                let gsrc = &g[p * oh * ow..(p + 1) * oh * ow];
                let d = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, ly)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in xs.iter().enumerate() {
                        let gv = gsrc[oy * ow + ox];
                        let top = gv * (T::one() - ly);
                        let bot = gv * ly;
                        d[y0 * w + x0] += top * (T::one() - lx);
                        d[y0 * w + x1] += top * lx;
                        d[y1 * w + x0] += bot * (T::one() - lx);
                        d[y1 * w + x1] += bot * lx;
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], dx).unwrap())]
        }))
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| param_err!("concat_channels needs at least one input"))?;
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut chans = Vec::with_capacity(xs.len());
        for &v in xs {
            let (vb, vc, vh, vw) = self.value(v).dims4()?;
            if (vb, vh, vw) != (b, h, w) {
                return Err(shape_err!(
                    "concat_channels: {:?} does not match batch/spatial dims of {:?}",
                    self.value(v).shape(),
                    self.value(first).shape()
                ));
            }
            chans.push(vc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for n in 0..b {
            for (&v, &c) in xs.iter().zip(&chans) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[b, total, h, w], out)?;
        Ok(self.push(value, xs, move |ctx| {
            let g = ctx.grad.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(chans.len());
            for (i, &c) in chans.iter().enumerate() {
                if !ctx.wants[i] {
                    grads.push(None);
                    offset += c;
                    continue;
                }
                let mut d = Vec::with_capacity(b * c * plane);
                for n in 0..b {
                    let start = (n * total + offset) * plane;
                    d.extend_from_slice(&g[start..start + c * plane]);
                }
                grads.push(Some(Tensor::new(&[b, c, h, w], d).unwrap()));
                offset += c;
            }
            grads
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, &[a, b], |ctx| {
            vec![
                ctx.wants[0].then(|| ctx.grad.clone()),
                ctx.wants[1].then(|| ctx.grad.clone()),
            ]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, &[a, b], |ctx| {
            vec![
                ctx.wants[0].then(|| ctx.grad.clone()),
                ctx.wants[1].then(|| ctx.grad.map(|g| -g)),
            ]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, &[a, b], |ctx| {
            vec![
                ctx.wants[0].then(|| ctx.grad.zip_map(ctx.parents[1], |g, y| g * y).unwrap()),
                ctx.wants[1].then(|| ctx.grad.zip_map(ctx.parents[0], |g, x| g * x).unwrap()),
            ]
        }))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, &[x], move |ctx| vec![Some(ctx.grad.map(|g| g * factor))])
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.value(x).shape().to_vec();
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, &[x], move |ctx| {
            vec![Some(Tensor::full(&shape, ctx.grad.data()[0]))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }
}

/// Source taps for 2× bilinear upsampling along one axis.
fn bilinear_taps<T: Real>(n: usize) -> Vec<(usize, usize, T)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-loop cross-correlation with zero padding.
    fn naive_conv(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Tensor<f64> {
        let (n, cin, h, wd) = x.dims4().unwrap();
        let (cout, _, kh, kw) = w.dims4().unwrap();
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        for bn in 0..n {
            for o in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for i in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += w.at4(o, i, ky, kx) * x.at4(bn, i, iy as usize, ix as usize);
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bn * cout + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_counts_overlap() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 1, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.at4(0, 0, 1, 1), 9.0);
        for (y, x) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(v.at4(0, 0, y, x), 4.0);
        }
    }

    #[test]
    fn conv_identity_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xt = rand_tensor(&[2, 1, 4, 5], &mut rng);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xt.clone());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn conv_matches_naive_oracle_on_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // The fixed example: 1×2×5×5 input, 3 outputs, pad 1.
        let mut cases = vec![(1, 2, 5, 5, 3, 3, 1, 1)];
        for _ in 0..49 {
            let k = [1, 3, 5][rng.random_range(0..3)];
            let h = rng.random_range(k..k + 6);
            let w = rng.random_range(k..k + 6);
            cases.push((
                rng.random_range(1..3),
                rng.random_range(1..4),
                h,
                w,
                rng.random_range(1..4),
                k,
                rng.random_range(1..3),
                rng.random_range(0..2),
            ));
        }
        for (n, cin, h, w, cout, k, stride, pad) in cases {
            let xt = rand_tensor(&[n, cin, h, w], &mut rng);
            let wt = rand_tensor(&[cout, cin, k, k], &mut rng);
            let bt = rand_tensor(&[cout], &mut rng);
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(xt.clone());
            let wv = tape.constant(wt.clone());
            let bv = tape.constant(bt.clone());
            let y = tape.conv2d(x, wv, Some(bv), stride, pad).unwrap();
            let expect = naive_conv(&xt, &wt, bt.data(), stride, pad);
            assert!(tape.value(y).max_abs_diff(&expect) < 1e-6);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn batch_norm_constant_channel_gives_beta() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 2, 3, 3], |i| if i % 18 < 9 { 0.7 } else { -3.0 }));
        let g = tape.constant(Tensor::new(&[2], vec![2.0, 5.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2], vec![0.25, -1.5]).unwrap());
        let mut stats = RunningStats::new(2);
        let y = tape.batch_norm(x, g, b, BnMode::Train(&mut stats)).unwrap();
        let v = tape.value(y);
        for n in 0..2 {
            for i in 0..9 {
                assert!((v.data()[n * 18 + i] - 0.25).abs() < 1e-9);
                assert!((v.data()[n * 18 + 9 + i] + 1.5).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batch_norm_standardizes_random_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = Tensor::from_fn(&[4, 3, 5, 5], |_| rng.random_range(-2.0..5.0));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xt);
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let mut stats = RunningStats::new(3);
        let y = tape.batch_norm(x, g, b, BnMode::Train(&mut stats)).unwrap();
        let v = tape.value(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| v.data()[(n * 3 + ch) * 25..(n * 3 + ch + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-5);
            // Epsilon shrinks the variance by var/(var+eps).
            assert!((var - 1.0).abs() < 1e-4, "variance {var}");
        }
        // The running stats moved a tenth of the way toward the batch stats.
        assert!(stats.mean.iter().all(|m| *m > 0.0 && *m < 0.5));
    }

    #[test]
    fn batch_norm_standardized_input_is_identity() {
        let raw = [-1.5, -0.5, 0.5, 1.5];
        let m = 0.0;
        let var: f64 = raw.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 4.0;
        let xt = Tensor::new(&[1, 1, 2, 2], raw.iter().map(|x| x / var.sqrt()).collect()).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(xt.clone());
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        let y = tape.batch_norm(x, g, b, BnMode::Train(&mut stats)).unwrap();
        assert!(tape.value(y).max_abs_diff(&xt) < 1e-5);
    }

    #[test]
    fn relu_clips_negatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn pool_then_upsample_keeps_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 4, 6], 0.3));
        let p = tape.avg_pool2(x).unwrap();
        let u = tape.upsample_bilinear2(p).unwrap();
        assert_eq!(tape.value(u).shape(), &[1, 2, 4, 6]);
        assert!(tape.value(u).max_abs_diff(tape.value(x)) < 1e-15);
    }

    #[test]
    fn pool_rejects_odd_dims() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.avg_pool2(x).is_err());
    }

    #[test]
    fn upsample_matches_closed_form_bilinear() {
        // Half-pixel-center bilinear weights written out per output index:
        // output o samples source coordinate o/2 - 1/4, clamped to [0, n-1].
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let u = tape.upsample_bilinear2(x).unwrap();
        let axis = [(0usize, 0usize, 0.0f64), (0, 1, 0.25), (0, 1, 0.75), (1, 1, 0.0)];
        let src = [[0.0, 1.0], [2.0, 3.0]];
        for (oy, &(y0, y1, ly)) in axis.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in axis.iter().enumerate() {
                let e = (1.0 - ly) * ((1.0 - lx) * src[y0][x0] + lx * src[y0][x1])
                    + ly * ((1.0 - lx) * src[y1][x0] + lx * src[y1][x1]);
                assert!((tape.value(u).at4(0, 0, oy, ox) - e).abs() < 1e-6);
            }
        }
        // Row 1 of the output is 0.75·row0 + 0.25·row1 → [0.5, 0.75, 1.25, 1.5].
        let row: Vec<f64> = (0..4).map(|x| tape.value(u).at4(0, 0, 1, x)).collect();
        assert_eq!(row, vec![0.5, 0.75, 1.25, 1.5]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 2, 4, 2]));
        assert!(tape.concat_channels(&[a, b]).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[1, 2, 3, 3], &mut rng);
        let check = finite_difference_check(
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum(sq))
            },
            &x,
            1e-6,
            usize::MAX,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-7, "{check:?}");
    }

    #[test]
    fn gradient_of_sum_is_sum_of_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xt = rand_tensor(&[1, 1, 4, 4], &mut rng);
        let run = |which: u8| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(xt.clone(), true);
            let p = tape.avg_pool2(x).unwrap();
            let u = tape.upsample_bilinear2(p).unwrap();
            let f = tape.mul(u, u).unwrap();
            let f = tape.sum(f);
            let r = tape.relu(x);
            let g = tape.mul(r, x).unwrap();
            let g = tape.sum(g);
            let root = match which {
                0 => f,
                1 => g,
                _ => tape.add(f, g).unwrap(),
            };
            tape.backward(root).unwrap().take(x).unwrap()
        };
        let (gf, gg, gs) = (run(0), run(1), run(2));
        let summed = gf.zip_map(&gg, |a, b| a + b).unwrap();
        assert!(summed.max_abs_diff(&gs) < 1e-10);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(20))]

        #[test]
        fn every_tensor_op_passes_gradcheck(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..3);
            let c = rng.random_range(1..3);
            let h = 2 * rng.random_range(1..4);
            let w = 2 * rng.random_range(1..4);
            let x = rand_tensor(&[n, c, h, w], &mut rng);
            let wt = rand_tensor(&[2, c, 3, 3], &mut rng);
            let bt = rand_tensor(&[2], &mut rng);
            let gamma = rand_tensor(&[2], &mut rng);
            let beta = rand_tensor(&[2], &mut rng);
            let probe = rand_tensor(&[n, 2 + c, 2 * h, 2 * w], &mut rng);
            let stride = rng.random_range(1..3);

            // Gradient through every op with respect to the input image.
            let build = |tape: &mut Tape<f64>, x: Var, train: bool| -> Result<Var> {
                let wv = tape.constant(wt.clone());
                let bv = tape.constant(bt.clone());
                let y = tape.conv2d(x, wv, Some(bv), 1, 1)?;
                let gv = tape.constant(gamma.clone());
                let be = tape.constant(beta.clone());
                let mut stats = RunningStats::new(2);
                stats.mean = vec![0.1, -0.2];
                stats.var = vec![0.5, 2.0];
                let y = if train {
                    tape.batch_norm(y, gv, be, BnMode::Train(&mut stats))?
                } else {
                    tape.batch_norm(y, gv, be, BnMode::Eval(&stats))?
                };
                let y = tape.relu(y);
                let y = tape.concat_channels(&[y, x])?;
                let y = tape.avg_pool2(y)?;
                let y = tape.upsample_bilinear2(y)?;
                let y = tape.upsample_bilinear2(y)?;
                let pr = tape.constant(probe.clone());
                let y = tape.mul(y, pr)?;
                let y = tape.sub(y, pr)?;
                let y = tape.scale(y, 0.5);
                Ok(tape.mean(y))
            };
            for train in [true, false] {
                let check = finite_difference_check(|t, v| build(t, v, train), &x, 1e-5, 64).unwrap();
                proptest::prop_assert!(check.max_rel_err < 1e-4, "train={train} {check:?}");
            }

            // Gradient with respect to conv weights, bias and BN affine params.
            let xin = x.clone();
            let wrt_weight = |tape: &mut Tape<f64>, w: Var| -> Result<Var> {
                let xv = tape.constant(xin.clone());
                let bv = tape.constant(bt.clone());
                let y = tape.conv2d(xv, w, Some(bv), stride, 1)?;
                let y = tape.mul(y, y)?;
                Ok(tape.sum(y))
            };
            let check = finite_difference_check(wrt_weight, &wt, 1e-5, 64).unwrap();
            proptest::prop_assert!(check.max_rel_err < 1e-4, "weight {check:?}");
            let wrt_bias = |tape: &mut Tape<f64>, b: Var| -> Result<Var> {
                let xv = tape.constant(xin.clone());
                let wv = tape.constant(wt.clone());
                let y = tape.conv2d(xv, wv, Some(b), stride, 1)?;
                let y = tape.mul(y, y)?;
                Ok(tape.sum(y))
            };
            let check = finite_difference_check(wrt_bias, &bt, 1e-5, 64).unwrap();
            proptest::prop_assert!(check.max_rel_err < 1e-4, "bias {check:?}");
            let pre = {
                let mut tape = Tape::<f64>::new();
                let xv = tape.constant(x.clone());
                let wv = tape.constant(wt.clone());
                let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
                tape.value(y).clone()
            };
            let probe2 = rand_tensor(pre.shape(), &mut rng);
            for which in 0..2 {
                let f = |tape: &mut Tape<f64>, p: Var| -> Result<Var> {
                    let xv = tape.constant(pre.clone());
                    let other = tape.constant(if which == 0 { beta.clone() } else { gamma.clone() });
                    let (g, b) = if which == 0 { (p, other) } else { (other, p) };
                    let mut stats = RunningStats::new(2);
                    let y = tape.batch_norm(xv, g, b, BnMode::Train(&mut stats))?;
                    let pr = tape.constant(probe2.clone());
                    let y = tape.mul(y, pr)?;
                    Ok(tape.sum(y))
                };
                let point = if which == 0 { gamma.clone() } else { beta.clone() };
                let check = finite_difference_check(f, &point, 1e-5, 64).unwrap();
                proptest::prop_assert!(check.max_rel_err < 1e-4, "bn param {which} {check:?}");
            }
        }
    }
}
