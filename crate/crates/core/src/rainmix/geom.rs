//! Affine geometric operations on image planes.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeomOp {
    Rot,
    ShearX,
    ShearY,
    TransX,
    TransY,
    ZoomX,
    ZoomY,
}

impl GeomOp {
    pub const ALL: [GeomOp; 7] = [
        GeomOp::Rot,
        GeomOp::ShearX,
        GeomOp::ShearY,
        GeomOp::TransX,
        GeomOp::TransY,
        GeomOp::ZoomX,
        GeomOp::ZoomY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeomOp::Rot => "rot",
            GeomOp::ShearX => "shear_x",
            GeomOp::ShearY => "shear_y",
            GeomOp::TransX => "trans_x",
            GeomOp::TransY => "trans_y",
            GeomOp::ZoomX => "zoom_x",
            GeomOp::ZoomY => "zoom_y",
        }
    }

    /// Magnitude that leaves the image unchanged.
    pub fn identity_magnitude(self) -> f64 {
        match self {
            GeomOp::ZoomX | GeomOp::ZoomY => 1.0,
            _ => 0.0,
        }
    }
}

impl fmt::Display for GeomOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeomOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GeomOp::ALL
            .into_iter()
            .find(|op| op.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown geometric op {s:?}")))
    }
}

/// Row-major 3×3 homogeneous transform acting on `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub [[f64; 3]; 3]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn after(&self, first: &Affine) -> Affine {
        let (a, b) = (&self.0, &first.0);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Affine(out)
    }

    /// Inverse of the 2×2 linear part plus translation.
    pub fn inverse(&self) -> Option<Affine> {
        let m = &self.0;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 {
            return None;
        }
        let (a, b, c, d) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
        let (tx, ty) = (m[0][2], m[1][2]);
        Some(Affine([
            [a, b, -(a * tx + b * ty)],
            [c, d, -(c * tx + d * ty)],
            [0.0, 0.0, 1.0],
        ]))
    }

    /// Forward transform of `op` about the center of an `h×w` image.
    /// Angles are in degrees; translations are fractions of the side.
    pub fn for_op(op: GeomOp, magnitude: f64, h: usize, w: usize) -> Affine {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let linear = |a: f64, b: f64, c: f64, d: f64| {
            Affine([
                [a, b, cx - a * cx - b * cy],
                [c, d, cy - c * cx - d * cy],
                [0.0, 0.0, 1.0],
            ])
        };
        match op {
            GeomOp::Rot => {
                let (s, c) = magnitude.to_radians().sin_cos();
                linear(c, -s, s, c)
            }
            GeomOp::ShearX => linear(1.0, magnitude, 0.0, 1.0),
            GeomOp::ShearY => linear(1.0, 0.0, magnitude, 1.0),
            GeomOp::ZoomX => linear(magnitude, 0.0, 0.0, 1.0),
            GeomOp::ZoomY => linear(1.0, 0.0, 0.0, magnitude),
            GeomOp::TransX => Affine([[1.0, 0.0, magnitude * w as f64], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
            GeomOp::TransY => Affine([[1.0, 0.0, 0.0], [0.0, 1.0, magnitude * h as f64], [0.0, 0.0, 1.0]]),
        }
    }
}

/// Warps every `H×W` plane of `x` by the forward transform `t`, sampling
/// bilinearly with replicated borders.
pub fn warp<T: Real>(x: &Tensor<T>, t: &Affine) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    let inv = t
        .inverse()
        .ok_or_else(|| Error::Param(format!("singular transform {t:?}")))?
        .0;
    let mut taps = Vec::with_capacity(h * w);
    for oy in 0..h {
        for ox in 0..w {
            let (fx, fy) = (ox as f64, oy as f64);
            let sx = (inv[0][0] * fx + inv[0][1] * fy + inv[0][2]).clamp(0.0, (w - 1) as f64);
            let sy = (inv[1][0] * fx + inv[1][1] * fy + inv[1][2]).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (T::lit(sx - x0 as f64), T::lit(sy - y0 as f64));
            taps.push((y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1, ax, ay));
        }
    }
    let mut out = Tensor::zeros(x.shape());
    for (src, dst) in x.data().chunks_exact(h * w).zip(out.data_mut().chunks_exact_mut(h * w)) {
        for (d, &(i00, i01, i10, i11, ax, ay)) in dst.iter_mut().zip(&taps) {
            let top = src[i00] + (src[i01] - src[i00]) * ax;
            let bot = src[i10] + (src[i11] - src[i10]) * ax;
            *d = top + (bot - top) * ay;
        }
    }
    Ok(out)
}

/// Applies a single operation.
pub fn geometric_apply<T: Real>(x: &Tensor<T>, op: GeomOp, magnitude: f64) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    warp(x, &Affine::for_op(op, magnitude, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn card(h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Tensor::from_fn(&[1, 2, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identity_magnitudes_are_exact() {
        let x = card(17, 23);
        for op in GeomOp::ALL {
            assert_eq!(geometric_apply(&x, op, op.identity_magnitude()).unwrap(), x, "{op}");
        }
    }

    #[test]
    fn unknown_op_name_is_an_error() {
        assert!("flip".parse::<GeomOp>().is_err());
        assert_eq!("zoom_y".parse::<GeomOp>().unwrap(), GeomOp::ZoomY);
    }

    #[test]
    fn rotation_by_90_is_an_index_permutation() {
        let n = 15;
        let x = card(n, n);
        let r = geometric_apply(&x, GeomOp::Rot, 90.0).unwrap();
        for c in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    let want = x.at4(0, c, n - 1 - j, i);
                    assert!((r.at4(0, c, i, j) - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn translation_round_trip_recovers_interior() {
        let x = card(20, 20);
        let k = 3.0 / 20.0;
        let there = geometric_apply(&x, GeomOp::TransX, k).unwrap();
        let back = geometric_apply(&there, GeomOp::TransX, -k).unwrap();
        for c in 0..2 {
            for y in 0..20 {
                for xx in 3..17 {
                    assert!((back.at4(0, c, y, xx) - x.at4(0, c, y, xx)).abs() < 1e-5);
                }
            }
        }
        // content moved right by exactly three pixels
        assert!((there.at4(0, 0, 5, 10) - x.at4(0, 0, 5, 7)).abs() < 1e-9);
    }

    #[test]
    fn composition_matches_sequential_application_for_translations() {
        let x = card(16, 16);
        let a = Affine::for_op(GeomOp::TransX, 2.0 / 16.0, 16, 16);
        let b = Affine::for_op(GeomOp::TransY, 1.0 / 16.0, 16, 16);
        let once = warp(&x, &b.after(&a)).unwrap();
        let twice = warp(&warp(&x, &a).unwrap(), &b).unwrap();
        for y in 1..16 {
            for xx in 2..16 {
                assert!((once.at4(0, 1, y, xx) - twice.at4(0, 1, y, xx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 3, 12, 12], 0.37);
        for op in GeomOp::ALL {
            let m = if matches!(op, GeomOp::ZoomX | GeomOp::ZoomY) { 1.3 } else { 0.2 };
            let y = geometric_apply(&x, op, m).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn singular_zoom_is_rejected() {
        assert!(geometric_apply(&card(8, 8), GeomOp::ZoomX, 0.0).is_err());
    }
}
