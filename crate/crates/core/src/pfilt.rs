//! Spatially-variant predictive filtering.
//!
//! A [`KernelField`] stores one `K×K` kernel per pixel and per color channel
//! in a `(batch, C·K², H, W)` tensor; channel index `c·K² + ty·K + tx` holds
//! the weight for offset `(ty − r, tx − r)`, `r = (K − 1)/2`. Filtering at
//! dilation `s` reads the neighbor at `p + s·t`, so all scales share the same
//! predicted weights and each scale costs exactly `K²·H·W·C` multiply-adds.
//! Out-of-image neighbors are replicated from the border.

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Receives one tick per multiply-accumulate in the filtering loops.
pub trait MacTally {
    fn mac(&mut self);
}

impl MacTally for () {
    #[inline(always)]
    fn mac(&mut self) {}
}

/// Counts multiply-accumulates performed by the instrumented filters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub count: u64,
}

impl MacTally for MacCounter {
    #[inline(always)]
    fn mac(&mut self) {
        self.count += 1;
    }
}

/// Per-pixel, per-channel filter weights.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField<T> {
    weights: Tensor<T>,
    ksize: usize,
    channels: usize,
}

impl<T: Real> KernelField<T> {
    pub fn new(weights: Tensor<T>, ksize: usize) -> Result<Self> {
        if ksize % 2 == 0 {
            return Err(param_err!("kernel size must be odd, got {ksize}"));
        }
        let (_, depth, _, _) = weights.dims4()?;
        let k2 = ksize * ksize;
        if depth % k2 != 0 {
            return Err(shape_err!(
                "kernel field depth {depth} is not a multiple of K²={k2}"
            ));
        }
        Ok(Self {
            weights,
            ksize,
            channels: depth / k2,
        })
    }

    /// Kernels with weight 1 at the center tap and 0 elsewhere.
    pub fn center_delta(batch: usize, channels: usize, h: usize, w: usize, ksize: usize) -> Result<Self> {
        let k2 = ksize * ksize;
        let center = k2 / 2;
        let plane = h * w;
        let weights = Tensor::from_fn(&[batch, channels * k2, h, w], |i| {
            if (i / plane) % k2 == center {
                T::one()
            } else {
                T::zero()
            }
        });
        Self::new(weights, ksize)
    }

    pub fn ksize(&self) -> usize {
        self.ksize
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor<T> {
        self.weights
    }

    /// The `K×K` kernel of channel `c` at pixel `(y, x)`, row-major.
    pub fn kernel_at(&self, n: usize, c: usize, y: usize, x: usize) -> Vec<T> {
        let k2 = self.ksize * self.ksize;
        (0..k2)
            .map(|t| self.weights.at4(n, c * k2 + t, y, x))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterStrategy {
    /// One predicted 3×3 kernel reused at every dilation.
    WeightSharing,
    /// An independently predicted dense `(2s+1)²` kernel per scale.
    MultiHead,
}

/// Multiply-accumulates needed to filter an `H×W×C` image at scales `1..=S`.
pub fn flop_count(h: u64, w: u64, c: u64, k: u64, scales: u64, strategy: FilterStrategy) -> u64 {
    match strategy {
        FilterStrategy::WeightSharing => scales * k * k * h * w * c,
        FilterStrategy::MultiHead => {
            let taps: u64 = (1..=scales).map(|s| (s * (k - 1) + 1).pow(2)).sum();
            c * h * w * taps
        }
    }
}

struct Geometry {
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
    ksize: usize,
    dilation: usize,
}

impl Geometry {
    fn check<T: Real>(image: &Tensor<T>, kernels: &Tensor<T>, ksize: usize, dilation: usize) -> Result<Self> {
        if dilation == 0 {
            return Err(param_err!("dilation must be >= 1, got 0"));
        }
        if ksize % 2 == 0 {
            return Err(param_err!("kernel size must be odd, got {ksize}"));
        }
        let (b, c, h, w) = image.dims4()?;
        let (kb, kd, kh, kw) = kernels.dims4()?;
        if (kb, kh, kw) != (b, h, w) {
            return Err(shape_err!(
                "image {:?} and kernel field {:?} disagree on batch or spatial size",
                image.shape(),
                kernels.shape()
            ));
        }
        if kd != c * ksize * ksize {
            return Err(shape_err!(
                "kernel field has {kd} channels; image with {c} channels needs {}",
                c * ksize * ksize
            ));
        }
        Ok(Self {
            batch: b,
            channels: c,
            h,
            w,
            ksize,
            dilation,
        })
    }

    /// Clamped source index along an axis for each output index and tap.
    fn taps(&self, len: usize) -> Vec<Vec<usize>> {
        let r = (self.ksize / 2) as isize;
        (0..self.ksize)
            .map(|t| {
                let off = (t as isize - r) * self.dilation as isize;
                (0..len)
                    .map(|i| (i as isize + off).clamp(0, len as isize - 1) as usize)
                    .collect()
            })
            .collect()
    }
}

fn filter_forward<T: Real, M: MacTally>(
    image: &[T],
    kernels: &[T],
    g: &Geometry,
    tally: &mut M,
) -> Vec<T> {
    let plane = g.h * g.w;
    let k2 = g.ksize * g.ksize;
    let ys = g.taps(g.h);
    let xs = g.taps(g.w);
    let mut out = vec![T::zero(); g.batch * g.channels * plane];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let src = &image[(n * g.channels + c) * plane..][..plane];
            let dst = &mut out[(n * g.channels + c) * plane..][..plane];
            let kbase = (n * g.channels + c) * k2 * plane;
            for t in 0..k2 {
                let kp = &kernels[kbase + t * plane..][..plane];
                let (yt, xt) = (&ys[t / g.ksize], &xs[t % g.ksize]);
                for y in 0..g.h {
                    let row = &src[yt[y] * g.w..][..g.w];
                    let krow = &kp[y * g.w..][..g.w];
                    let orow = &mut dst[y * g.w..][..g.w];
                    for x in 0..g.w {
                        orow[x] += krow[x] * row[xt[x]];
                        tally.mac();
                    }
                }
            }
        }
    }
    out
}

/// Gradients with respect to the image and the kernel field.
fn filter_backward<T: Real>(
    image: &[T],
    kernels: &[T],
    grad: &[T],
    g: &Geometry,
    want_image: bool,
    want_kernels: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.h * g.w;
    let k2 = g.ksize * g.ksize;
    let ys = g.taps(g.h);
    let xs = g.taps(g.w);
    let mut dimg = want_image.then(|| vec![T::zero(); image.len()]);
    let mut dker = want_kernels.then(|| vec![T::zero(); kernels.len()]);
    for n in 0..g.batch {
        for c in 0..g.channels {
            let base = (n * g.channels + c) * plane;
            let kbase = (n * g.channels + c) * k2 * plane;
            let gp = &grad[base..base + plane];
            for t in 0..k2 {
                let (yt, xt) = (&ys[t / g.ksize], &xs[t % g.ksize]);
                for y in 0..g.h {
                    for x in 0..g.w {
                        let p = y * g.w + x;
                        let q = yt[y] * g.w + xt[x];
                        if let Some(d) = dimg.as_mut() {
                            d[base + q] += kernels[kbase + t * plane + p] * gp[p];
                        }
                        if let Some(d) = dker.as_mut() {
                            d[kbase + t * plane + p] = gp[p] * image[base + q];
                        }
                    }
                }
            }
        }
    }
    (dimg, dker)
}

/// `Î[p] = Σ_t K_p[t] · I[p + t]`, each channel filtered independently.
pub fn apply_spfilt<T: Real>(image: &Tensor<T>, kernels: &KernelField<T>) -> Result<Tensor<T>> {
    apply_dilated_filter(image, kernels, 1)
}

/// `Î[p] = Σ_t K_p[t] · I[p + s·t]` without materializing the dilated kernel.
pub fn apply_dilated_filter<T: Real>(
    image: &Tensor<T>,
    kernels: &KernelField<T>,
    dilation: usize,
) -> Result<Tensor<T>> {
    apply_dilated_filter_counted(image, kernels, dilation, &mut ())
}

/// [`apply_dilated_filter`] reporting every multiply-accumulate to `tally`.
pub fn apply_dilated_filter_counted<T: Real, M: MacTally>(
    image: &Tensor<T>,
    kernels: &KernelField<T>,
    dilation: usize,
    tally: &mut M,
) -> Result<Tensor<T>> {
    let g = Geometry::check(image, &kernels.weights, kernels.ksize, dilation)?;
    let out = filter_forward(image.data(), kernels.weights.data(), &g, tally);
    Tensor::new(image.shape(), out)
}

/// Spreads each `K×K` kernel onto a `(s(K−1)+1)²` grid: weight `t` lands at
/// offset `s·t`, every other position is zero.
pub fn materialize_dilated_kernels<T: Real>(kernels: &KernelField<T>, dilation: usize) -> Result<KernelField<T>> {
    if dilation == 0 {
        return Err(param_err!("dilation must be >= 1, got 0"));
    }
    if dilation == 1 {
        return Ok(kernels.clone());
    }
    let (b, _, h, w) = kernels.weights.dims4()?;
    let k = kernels.ksize;
    let big = dilation * (k - 1) + 1;
    let plane = h * w;
    let c = kernels.channels;
    let mut out = vec![T::zero(); b * c * big * big * plane];
    let src = kernels.weights.data();
    for n in 0..b {
        for ch in 0..c {
            for ty in 0..k {
                for tx in 0..k {
                    let from = ((n * c + ch) * k * k + ty * k + tx) * plane;
                    let to = ((n * c + ch) * big * big + ty * dilation * big + tx * dilation) * plane;
                    out[to..to + plane].copy_from_slice(&src[from..from + plane]);
                }
            }
        }
    }
    KernelField::new(Tensor::new(&[b, c * big * big, h, w], out)?, big)
}

/// Per-pixel mean over all `C·K²` kernel weights, shape `(batch, 1, H, W)`.
pub fn uncertainty_map<T: Real>(kernels: &KernelField<T>) -> Tensor<T> {
    channel_mean(&kernels.weights).expect("kernel field is 4-D")
}

fn channel_mean<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, d, h, w) = x.dims4()?;
    let plane = h * w;
    let denom = T::from_usize(d).unwrap();
    let data = x.data();
    let mut out = vec![T::zero(); b * plane];
    for n in 0..b {
        for p in 0..plane {
            let mut s = T::zero();
            for ch in 0..d {
                s += data[(n * d + ch) * plane + p];
            }
            out[n * plane + p] = s / denom;
        }
    }
    Tensor::new(&[b, 1, h, w], out)
}

/// Learnable 3×3 fusion over the channel concatenation of several images.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights<T> {
    /// `(C, n·C, 3, 3)`
    pub weight: Tensor<T>,
    /// `[C]`
    pub bias: Tensor<T>,
}

impl<T: Real> FusionWeights<T> {
    /// Initialization under which the fused output is the mean of the inputs.
    pub fn mean_init(inputs: usize, channels: usize) -> Result<Self> {
        if inputs == 0 {
            return Err(param_err!("fusion needs at least one input"));
        }
        let inv = T::one() / T::from_usize(inputs).unwrap();
        let cin = inputs * channels;
        let weight = Tensor::from_fn(&[channels, cin, 3, 3], |i| {
            let o = i / (cin * 9);
            let src = (i / 9) % cin;
            if i % 9 == 4 && src % channels == o {
                inv
            } else {
                T::zero()
            }
        });
        Ok(Self {
            weight,
            bias: Tensor::zeros(&[channels]),
        })
    }
}

/// Value-level fusion: `Conv3×3(concat(images))`.
pub fn fuse<T: Real>(images: &[Tensor<T>], fusion: &FusionWeights<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = images.iter().map(|t| tape.constant(t.clone())).collect();
    let w = tape.constant(fusion.weight.clone());
    let b = tape.constant(fusion.bias.clone());
    let out = tape.fuse(&vars, w, b)?;
    Ok(tape.value(out).clone())
}

impl<T: Real> Tape<T> {
    /// Differentiable dilated predictive filtering; `dilation = 1` is plain
    /// spatially-variant filtering.
    pub fn dilated_filter(&mut self, image: Var, kernels: Var, ksize: usize, dilation: usize) -> Result<Var> {
        let g = Geometry::check(self.value(image), self.value(kernels), ksize, dilation)?;
        let out = filter_forward(self.value(image).data(), self.value(kernels).data(), &g, &mut ());
        let value = Tensor::new(self.value(image).shape(), out)?;
        Ok(self.push(value, &[image, kernels], move |ctx| {
            let (di, dk) = filter_backward(
                ctx.parents[0].data(),
                ctx.parents[1].data(),
                ctx.grad.data(),
                &g,
                ctx.wants[0],
                ctx.wants[1],
            );
            vec![
                di.map(|d| Tensor::new(ctx.parents[0].shape(), d).unwrap()),
                dk.map(|d| Tensor::new(ctx.parents[1].shape(), d).unwrap()),
            ]
        }))
    }

    /// Differentiable per-pixel mean over channels (the uncertainty map).
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let value = channel_mean(self.value(x))?;
        let (_, d, _, _) = self.value(x).dims4()?;
        Ok(self.push(value, &[x], move |ctx| {
            let (b, _, h, w) = ctx.parents[0].dims4().unwrap();
            let plane = h * w;
            let inv = T::one() / T::from_usize(d).unwrap();
            let g = ctx.grad.data();
            let dx = Tensor::from_fn(&[b, d, h, w], |i| {
                let n = i / (d * plane);
                g[n * plane + i % plane] * inv
            });
            vec![Some(dx)]
        }))
    }

    /// `Conv3×3(concat(images))` with padding 1.
    pub fn fuse(&mut self, images: &[Var], weight: Var, bias: Var) -> Result<Var> {
        if images.is_empty() {
            return Err(param_err!("fusion needs at least one input image"));
        }
        let first = self.value(images[0]).shape().to_vec();
        for &v in images {
            if self.value(v).shape() != first.as_slice() {
                return Err(shape_err!(
                    "fusion inputs disagree: {:?} vs {first:?}",
                    self.value(v).shape()
                ));
            }
        }
        let cat = if images.len() == 1 {
            images[0]
        } else {
            self.concat_channels(images)?
        };
        self.conv2d(cat, weight, Some(bias), 1, 1)
    }

    /// Filters at dilations `1..=scales` with shared kernels and fuses the
    /// results; a single scale skips fusion.
    pub fn multiscale_filter(
        &mut self,
        image: Var,
        kernels: Var,
        ksize: usize,
        scales: usize,
        fusion: Option<(Var, Var)>,
    ) -> Result<Var> {
        if scales == 0 {
            return Err(param_err!("number of scales must be >= 1"));
        }
        if scales == 1 {
            return self.dilated_filter(image, kernels, ksize, 1);
        }
        let (w, b) = fusion.ok_or_else(|| param_err!("{scales} scales need fusion weights"))?;
        let outs = (1..=scales)
            .map(|s| self.dilated_filter(image, kernels, ksize, s))
            .collect::<Result<Vec<_>>>()?;
        self.fuse(&outs, w, b)
    }
}
