//! Training losses and evaluation metrics.
//!
//! SSIM follows the usual single-scale formulation: an 11×11 Gaussian window
//! (σ = 1.5) applied separably with zero padding, `C1 = 0.01²` and
//! `C2 = 0.03²` for data on [0, 1]. The index is the mean of the local map
//! over every pixel, channel and batch item.

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const SSIM_TAPS: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported PSNR when the images are (numerically) identical.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MIN_MSE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the SSIM term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.2 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(param_err!("loss lambda must be non-negative, got {}", self.lambda));
        }
        Ok(())
    }
}

fn gaussian_taps() -> [f64; SSIM_TAPS] {
    let r = (SSIM_TAPS / 2) as f64;
    let mut taps = [0.0; SSIM_TAPS];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let z: f64 = taps.iter().sum();
    taps.map(|t| t / z)
}

/// Separable zero-padded "same" Gaussian blur of every `h×w` plane.
fn blur(src: &[f64], h: usize, w: usize, taps: &[f64; SSIM_TAPS]) -> Vec<f64> {
    let r = SSIM_TAPS / 2;
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for (row, dst) in src.chunks_exact(w).zip(tmp.chunks_exact_mut(w)) {
        for (x, d) in dst.iter_mut().enumerate() {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            let t = &taps[lo + r - x..hi + r - x];
            *d = row[lo..hi].iter().zip(t).map(|(v, t)| v * t).sum();
        }
    }
    for (plane, dst) in tmp.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            let d = &mut dst[y * w..(y + 1) * w];
            for yy in lo..=hi {
                let t = taps[yy + r - y];
                for (o, &v) in d.iter_mut().zip(&plane[yy * w..(yy + 1) * w]) {
                    *o += t * v;
                }
            }
        }
    }
    out
}

/// Local statistics of a pair of images (all in f64).
struct SsimStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn plane_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize)> {
    if a.shape() != b.shape() {
        return Err(shape_err!("ssim: shapes differ {:?} vs {:?}", a.shape(), b.shape()));
    }
    let (_, _, h, w) = a.dims4()?;
    Ok((h, w))
}

fn ssim_stats(x: &[f64], y: &[f64], h: usize, w: usize) -> SsimStats {
    let taps = gaussian_taps();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    SsimStats {
        mx: blur(x, h, w, &taps),
        my: blur(y, h, w, &taps),
        exx: blur(&xx, h, w, &taps),
        eyy: blur(&yy, h, w, &taps),
        exy: blur(&xy, h, w, &taps),
    }
}

/// Factors `(A1, A2, B1, B2)` of `S = A1·A2 / (B1·B2)` at pixel `i`.
///
/// Operation order is chosen so that `x == y` gives `A1 == B1` and
/// `A2 == B2` bitwise, and swapping `x` and `y` gives the same factors.
#[inline]
fn ssim_factors(s: &SsimStats, i: usize) -> (f64, f64, f64, f64) {
    let (mx, my) = (s.mx[i], s.my[i]);
    let mxy = mx * my;
    let mxx = mx * mx;
    let myy = my * my;
    let sxy = s.exy[i] - mxy;
    let sxx = s.exx[i] - mxx;
    let syy = s.eyy[i] - myy;
    (
        (mxy + mxy) + SSIM_C1,
        (sxy + sxy) + SSIM_C2,
        (mxx + myy) + SSIM_C1,
        (sxx + syy) + SSIM_C2,
    )
}

fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

/// Per-pixel SSIM map, same shape as the inputs.
pub fn ssim_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<f64>> {
    let (h, w) = plane_dims(a, b)?;
    let s = ssim_stats(&to_f64(a), &to_f64(b), h, w);
    Tensor::new(
        a.shape(),
        (0..a.len())
            .map(|i| {
                let (a1, a2, b1, b2) = ssim_factors(&s, i);
                (a1 * a2) / (b1 * b2)
            })
            .collect(),
    )
}

/// Mean SSIM index; `ssim_index(a, a) == 1` exactly.
pub fn ssim_index<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let map = ssim_map(a, b)?;
    Ok(map.data().iter().sum::<f64>() / map.len() as f64)
}

/// PSNR in dB with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(shape_err!("psnr: shapes differ {:?} vs {:?}", a.shape(), b.shape()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse < PSNR_MIN_MSE {
        return Ok(PSNR_CAP_DB);
    }
    Ok(-10.0 * mse.log10())
}

/// Gradient of `g · mean(SSIM(x, y))` with respect to `x`. With
/// `swap` set, `s` holds the statistics of `(y, x)` instead.
fn ssim_grad(s: &SsimStats, x: &[f64], y: &[f64], h: usize, w: usize, g: f64, swap: bool) -> Vec<f64> {
    let taps = gaussian_taps();
    let k = g / x.len() as f64;
    let mut da = vec![0.0; x.len()];
    let mut db = vec![0.0; x.len()];
    let mut dc = vec![0.0; x.len()];
    for i in 0..x.len() {
        let (a1, a2, b1, b2) = ssim_factors(s, i);
        let val = (a1 * a2) / (b1 * b2);
        let (mx, my) = if swap { (s.my[i], s.mx[i]) } else { (s.mx[i], s.my[i]) };
        da[i] = k * val * (2.0 * my / a1 - 2.0 * mx / b1 - 2.0 * my / a2 + 2.0 * mx / b2);
        db[i] = -k * val / b2;
        dc[i] = k * 2.0 * val / a2;
    }
    // The window is symmetric and zero-padded, so the blur is self-adjoint.
    let ga = blur(&da, h, w, &taps);
    let gb = blur(&db, h, w, &taps);
    let gc = blur(&dc, h, w, &taps);
    (0..x.len())
        .map(|i| ga[i] + 2.0 * x[i] * gb[i] + y[i] * gc[i])
        .collect()
}

impl<T: Real> Tape<T> {
    /// Mean SSIM index of two `(N, C, H, W)` values, as a scalar.
    pub fn ssim_mean(&mut self, x: Var, y: Var) -> Result<Var> {
        let (h, w) = plane_dims(self.value(x), self.value(y))?;
        let (xs, ys) = (to_f64(self.value(x)), to_f64(self.value(y)));
        let stats = ssim_stats(&xs, &ys, h, w);
        let v = (0..xs.len())
            .map(|i| {
                let (a1, a2, b1, b2) = ssim_factors(&stats, i);
                (a1 * a2) / (b1 * b2)
            })
            .sum::<f64>()
            / xs.len() as f64;
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::scalar(T::lit(v)), &[x, y], move |ctx| {
            let g = ctx.grad.data()[0].as_f64();
            let wrap = |d: Vec<f64>| Tensor::new(&shape, d.into_iter().map(T::lit).collect()).ok();
            vec![
                if ctx.wants[0] { wrap(ssim_grad(&stats, &xs, &ys, h, w, g, false)) } else { None },
                if ctx.wants[1] { wrap(ssim_grad(&stats, &ys, &xs, h, w, g, true)) } else { None },
            ]
        }))
    }

    /// `mean |x − y|` as a scalar. The subgradient at zero is zero.
    pub fn l1_mean(&mut self, x: Var, y: Var) -> Result<Var> {
        let (a, b) = (self.value(x), self.value(y));
        if a.shape() != b.shape() {
            return Err(shape_err!("l1: shapes differ {:?} vs {:?}", a.shape(), b.shape()));
        }
        let n = a.len() as f64;
        let total: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p.as_f64() - q.as_f64()).abs())
            .sum();
        Ok(self.push(Tensor::scalar(T::lit(total / n)), &[x, y], move |ctx| {
            let k = ctx.grad.data()[0] / T::lit(n);
            let sign = ctx.parents[0].zip_map(ctx.parents[1], |p, q| {
                if p > q {
                    k
                } else if p < q {
                    -k
                } else {
                    T::zero()
                }
            });
            let Ok(sign) = sign else { return vec![None, None] };
            vec![
                ctx.wants[0].then(|| sign.clone()),
                ctx.wants[1].then(|| sign.map(|v| -v)),
            ]
        }))
    }
}

/// `mean|Î − I*| − λ·SSIM(Î, I*)`.
pub fn l1_ssim_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let l1 = tape.l1_mean(pred, target)?;
    let ssim = tape.ssim_mean(pred, target)?;
    let weighted = tape.scale(ssim, T::lit(cfg.lambda));
    tape.sub(l1, weighted)
}

/// Sum of the L1/SSIM loss over the fused output and both stage outputs.
pub fn uc_loss<T: Real>(
    tape: &mut Tape<T>,
    fused: Var,
    stage1: Var,
    stage2: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let a = l1_ssim_loss(tape, fused, target, cfg)?;
    let b = l1_ssim_loss(tape, stage1, target, cfg)?;
    let c = l1_ssim_loss(tape, stage2, target, cfg)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Value-level L1/SSIM loss.
pub fn l1_ssim_loss_value<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<f64> {
    let mut tape = Tape::<T>::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = l1_ssim_loss(&mut tape, p, t, cfg)?;
    Ok(tape.value(l).data()[0].as_f64())
}
