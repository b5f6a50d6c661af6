//! Procedural rain streaks.

use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{param_err, Result};
use crate::tensor::{Real, Tensor};

/// Pixels per expected streak at density 1.
const PIXELS_PER_STREAK: f64 = 50.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreakParams {
    /// In (0, 1]; the expected streak count is `density·H·W/50`.
    pub density: f64,
    /// Segment length in pixels.
    pub length: f64,
    /// Direction in degrees measured from vertical.
    pub angle: f64,
    /// Cross-section width (two standard deviations) in pixels.
    pub width: f64,
    /// Peak brightness; each streak draws its own in `[0.6, 1]·intensity`.
    pub intensity: f64,
}

impl Default for StreakParams {
    fn default() -> Self {
        Self {
            density: 0.5,
            length: 14.0,
            angle: 10.0,
            width: 1.2,
            intensity: 0.8,
        }
    }
}

/// Intervals from which [`StreakParams`] are drawn uniformly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreakRanges {
    pub density: (f64, f64),
    pub length: (f64, f64),
    pub angle: (f64, f64),
    pub width: (f64, f64),
    pub intensity: (f64, f64),
}

impl Default for StreakRanges {
    fn default() -> Self {
        Self {
            density: (0.15, 0.5),
            length: (8.0, 20.0),
            angle: (-20.0, 20.0),
            width: (0.8, 1.8),
            intensity: (0.3, 0.7),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

impl StreakRanges {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> StreakParams {
        StreakParams {
            density: uniform(rng, self.density),
            length: uniform(rng, self.length),
            angle: uniform(rng, self.angle),
            width: uniform(rng, self.width),
            intensity: uniform(rng, self.intensity),
        }
    }
}

/// Renders a `(1, 1, H, W)` layer of line segments with a Gaussian cross
/// profile. Overlapping streaks combine by maximum, so values stay in [0, 1].
pub fn synth_rain_streaks<T: Real, R: Rng + ?Sized>(
    h: usize,
    w: usize,
    p: &StreakParams,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(param_err!("rain layer needs positive size, got {h}x{w}"));
    }
    if !(p.density > 0.0 && p.density <= 1.0) {
        return Err(param_err!("streak density must be in (0, 1], got {}", p.density));
    }
    if !(p.length > 0.0 && p.width > 0.0) {
        return Err(param_err!("streak length and width must be positive"));
    }
    if !(0.0..=1.0).contains(&p.intensity) {
        return Err(param_err!("streak intensity must be in [0, 1], got {}", p.intensity));
    }
    let lambda = p.density * (h * w) as f64 / PIXELS_PER_STREAK;
    let count = Poisson::new(lambda)
        .map_err(|e| param_err!("streak count rate {lambda}: {e}"))?
        .sample(rng) as usize;
    let (sin, cos) = p.angle.to_radians().sin_cos();
    let sigma = p.width / 2.0;
    let reach = 3.0 * sigma;
    let half = p.length / 2.0;
    let mut out = vec![0.0f64; h * w];
    for _ in 0..count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let peak = p.intensity * rng.random_range(0.6..=1.0);
        let (x0, y0) = (cx - sin * half, cy - cos * half);
        let (x1, y1) = (cx + sin * half, cy + cos * half);
        let xs = (x0.min(x1) - reach).floor().max(0.0) as usize;
        let xe = ((x0.max(x1) + reach).ceil().max(0.0) as usize).min(w - 1);
        let ys = (y0.min(y1) - reach).floor().max(0.0) as usize;
        let ye = ((y0.max(y1) + reach).ceil().max(0.0) as usize).min(h - 1);
        for y in ys..=ye {
            for x in xs..=xe {
                // distance from the pixel to the segment
                let (px, py) = (x as f64 - x0, y as f64 - y0);
                let t = ((px * sin + py * cos) / p.length).clamp(0.0, 1.0);
                let (dx, dy) = (px - t * p.length * sin, py - t * p.length * cos);
                let d2 = dx * dx + dy * dy;
                if d2 > reach * reach {
                    continue;
                }
                let v = peak * (-d2 / (2.0 * sigma * sigma)).exp();
                let o = &mut out[y * w + x];
                *o = o.max(v);
            }
        }
    }
    Tensor::new(&[1, 1, h, w], out.into_iter().map(T::lit).collect())
}
