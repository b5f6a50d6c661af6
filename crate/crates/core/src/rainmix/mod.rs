//! RainMix augmentation: random geometric op chains mixed with Dirichlet
//! weights and blended with the original under a Beta weight, applied
//! separately to rain layers and backgrounds.

mod geom;
mod streaks;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Real, Tensor};

pub use geom::{geometric_apply, warp, Affine, GeomOp};
pub use streaks::{synth_rain_streaks, StreakParams, StreakRanges};

/// Sampling ranges for op magnitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnitudeRanges {
    /// Rotation, ± degrees.
    pub rot_deg: f64,
    /// Shear factor, ±.
    pub shear: f64,
    /// Translation, ± fraction of the side.
    pub trans: f64,
    /// Zoom factor interval per axis.
    pub zoom: (f64, f64),
}

impl Default for MagnitudeRanges {
    fn default() -> Self {
        Self {
            rot_deg: 30.0,
            shear: 0.3,
            trans: 0.25,
            zoom: (0.7, 1.4),
        }
    }
}

impl MagnitudeRanges {
    pub fn range(&self, op: GeomOp) -> (f64, f64) {
        match op {
            GeomOp::Rot => (-self.rot_deg, self.rot_deg),
            GeomOp::ShearX | GeomOp::ShearY => (-self.shear, self.shear),
            GeomOp::TransX | GeomOp::TransY => (-self.trans, self.trans),
            GeomOp::ZoomX | GeomOp::ZoomY => self.zoom,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Number of mixed op chains (N).
    pub n_paths: usize,
    /// Ops sampled per chain.
    pub ops_per_path: usize,
    pub ops: Vec<GeomOp>,
    pub dirichlet_alpha: f64,
    pub beta: (f64, f64),
    pub ranges: MagnitudeRanges,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            n_paths: 4,
            ops_per_path: 3,
            ops: GeomOp::ALL.to_vec(),
            dirichlet_alpha: 1.0,
            beta: (1.0, 1.0),
            ranges: MagnitudeRanges::default(),
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.ops_per_path == 0 {
            return Err(param_err!(
                "rainmix needs at least one path and one op per path (got {} and {})",
                self.n_paths,
                self.ops_per_path
            ));
        }
        if self.ops.is_empty() {
            return Err(param_err!("rainmix op set is empty"));
        }
        if !(self.dirichlet_alpha > 0.0) || !(self.beta.0 > 0.0) || !(self.beta.1 > 0.0) {
            return Err(param_err!("rainmix distribution parameters must be positive"));
        }
        let r = &self.ranges;
        if !(r.rot_deg >= 0.0 && r.shear >= 0.0 && r.trans >= 0.0 && r.zoom.0 > 0.0 && r.zoom.0 <= r.zoom.1) {
            return Err(param_err!("invalid rainmix magnitude ranges {r:?}"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledOp {
    pub op: GeomOp,
    pub magnitude: f64,
}

/// One chain: the sampled ops and how many of them (from the front) are
/// composed.
#[derive(Clone, Debug, PartialEq)]
pub struct PathDraw {
    pub ops: Vec<SampledOp>,
    pub prefix: usize,
}

impl PathDraw {
    /// Forward transform of the applied prefix `o_prefix ∘ … ∘ o_1`.
    pub fn transform(&self, h: usize, w: usize) -> Affine {
        self.ops[..self.prefix]
            .iter()
            .fold(Affine::IDENTITY, |acc, s| Affine::for_op(s.op, s.magnitude, h, w).after(&acc))
    }
}

/// Everything random about one RainMix application.
#[derive(Clone, Debug, PartialEq)]
pub struct RainMixDraw {
    pub weights: Vec<f64>,
    pub paths: Vec<PathDraw>,
    pub blend: f64,
}

/// Symmetric Dirichlet sample via normalized Gamma(α, 1) variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(param_err!("dirichlet needs at least one component"));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| param_err!("dirichlet alpha {alpha}: {e}"))?;
    let mut g: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = g.iter().sum();
    if total > 0.0 {
        g.iter_mut().for_each(|v| *v /= total);
    } else {
        g.fill(1.0 / n as f64);
    }
    Ok(g)
}

pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(a, b).map_err(|e| param_err!("beta({a}, {b}): {e}"))?;
    Ok(beta.sample(rng))
}

/// Samples mixing weights, op chains and the blend weight, in that order.
pub fn sample_draw<R: Rng + ?Sized>(spec: &AugmentSpec, rng: &mut R) -> Result<RainMixDraw> {
    spec.validate()?;
    let weights = sample_dirichlet(spec.n_paths, spec.dirichlet_alpha, rng)?;
    let paths = (0..spec.n_paths)
        .map(|_| {
            let ops = (0..spec.ops_per_path)
                .map(|_| {
                    let op = spec.ops[rng.random_range(0..spec.ops.len())];
                    let (lo, hi) = spec.ranges.range(op);
                    let magnitude = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                    SampledOp { op, magnitude }
                })
                .collect();
            let prefix = rng.random_range(1..=spec.ops_per_path);
            PathDraw { ops, prefix }
        })
        .collect();
    let blend = sample_beta(spec.beta.0, spec.beta.1, rng)?;
    Ok(RainMixDraw { weights, paths, blend })
}

/// Mixture of the warped chains, before blending.
pub fn mix<T: Real>(x: &Tensor<T>, draw: &RainMixDraw) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.dims4()?;
    let mut acc = Tensor::zeros(x.shape());
    for (path, &wi) in draw.paths.iter().zip(&draw.weights) {
        let warped = warp(x, &path.transform(h, w))?;
        let wi = T::lit(wi);
        for (a, v) in acc.data_mut().iter_mut().zip(warped.data()) {
            *a = *a + wi * *v;
        }
    }
    Ok(acc)
}

/// `clamp(w·X + (1 − w)·X_mix, 0, 1)`.
pub fn apply_draw<T: Real>(x: &Tensor<T>, draw: &RainMixDraw) -> Result<Tensor<T>> {
    if draw.weights.len() != draw.paths.len() {
        return Err(param_err!(
            "draw has {} weights for {} paths",
            draw.weights.len(),
            draw.paths.len()
        ));
    }
    let mixed = mix(x, draw)?;
    let (w, iw) = (T::lit(draw.blend), T::lit(1.0 - draw.blend));
    Ok(x.zip_map(&mixed, |o, m| (w * o + iw * m).max(T::zero()).min(T::one()))?)
}

pub fn rainmix<T: Real, R: Rng + ?Sized>(x: &Tensor<T>, spec: &AugmentSpec, rng: &mut R) -> Result<Tensor<T>> {
    let draw = sample_draw(spec, rng)?;
    apply_draw(x, &draw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RainSource {
    /// `clamp(rainy − clean)` from a training pair.
    Subtracted,
    /// Procedurally generated streaks.
    Synthetic,
}

/// A single-channel additive rain layer, shape `(1, 1, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RainLayer<T> {
    pub data: Tensor<T>,
    pub source: RainSource,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RainLayerSet<T> {
    pub layers: Vec<RainLayer<T>>,
}

impl<T> RainLayerSet<T> {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// Per-pixel maximum over color of `clamp(rainy − clean, 0, 1)`.
pub fn subtract_rain<T: Real>(rainy: &Tensor<T>, clean: &Tensor<T>) -> Result<Tensor<T>> {
    if rainy.shape() != clean.shape() {
        return Err(shape_err!(
            "rain pair shapes differ: {:?} vs {:?}",
            rainy.shape(),
            clean.shape()
        ));
    }
    let (n, c, h, w) = rainy.dims4()?;
    if n != 1 {
        return Err(shape_err!("rain pair must hold a single image, got batch {n}"));
    }
    let mut out = Tensor::<T>::zeros(&[1, 1, h, w]);
    for ch in 0..c {
        let r = &rainy.data()[ch * h * w..(ch + 1) * h * w];
        let k = &clean.data()[ch * h * w..(ch + 1) * h * w];
        for ((o, &a), &b) in out.data_mut().iter_mut().zip(r).zip(k) {
            *o = (*o).max((a - b).max(T::zero()).min(T::one()));
        }
    }
    Ok(out)
}

/// Subtracted layers from every pair followed by `synth_count`
/// procedural layers sized like the first pair.
pub fn build_rain_layer_set<T: Real, R: Rng + ?Sized>(
    pairs: &[(Tensor<T>, Tensor<T>)],
    synth_count: usize,
    ranges: &StreakRanges,
    rng: &mut R,
) -> Result<RainLayerSet<T>> {
    let mut layers = Vec::with_capacity(pairs.len() + synth_count);
    for (rainy, clean) in pairs {
        layers.push(RainLayer {
            data: subtract_rain(rainy, clean)?,
            source: RainSource::Subtracted,
        });
    }
    if synth_count > 0 {
        let (h, w) = match pairs.first() {
            Some((r, _)) => {
                let (_, _, h, w) = r.dims4()?;
                (h, w)
            }
            None => return Err(param_err!("synthetic rain layers need at least one pair to size them")),
        };
        for _ in 0..synth_count {
            let p = ranges.sample(rng);
            layers.push(RainLayer {
                data: synth_rain_streaks::<T, R>(h, w, &p, rng)?,
                source: RainSource::Synthetic,
            });
        }
    }
    Ok(RainLayerSet { layers })
}

/// `clamp(background + rain, 0, 1)` with the single-channel rain
/// broadcast over color.
pub fn compose_rainy<T: Real>(background: &Tensor<T>, rain: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = background.dims4()?;
    let (rn, rc, rh, rw) = rain.dims4()?;
    if rc != 1 || (rh, rw) != (h, w) || (rn != n && rn != 1) {
        return Err(shape_err!(
            "rain layer {:?} does not fit background {:?}",
            rain.shape(),
            background.shape()
        ));
    }
    let mut out = background.clone();
    let plane = h * w;
    for ni in 0..n {
        let r = &rain.data()[(ni % rn) * plane..(ni % rn + 1) * plane];
        for ci in 0..c {
            let start = (ni * c + ci) * plane;
            for (o, &v) in out.data_mut()[start..start + plane].iter_mut().zip(r) {
                *o = (*o + v).max(T::zero()).min(T::one());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn dirichlet_draws_sum_to_one_with_uniform_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (n, draws) = (4, 10_000);
        let mut sums = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for _ in 0..draws {
            let w = sample_dirichlet(n, 1.0, &mut rng).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v >= 0.0));
            for (i, v) in w.iter().enumerate() {
                sums[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..n {
            let mean = sums[i] / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            let se = (var / draws as f64).sqrt();
            assert!((mean - 0.25).abs() < 3.0 * se, "component {i}: {mean}");
        }
        assert_eq!(sample_dirichlet(1, 1.0, &mut rng).unwrap(), vec![1.0]);
    }

    #[test]
    fn beta_one_one_is_uniform_by_ks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let mut xs: Vec<f64> = (0..n).map(|_| sample_beta(1.0, 1.0, &mut rng).unwrap()).collect();
        xs.sort_by(f64::total_cmp);
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / n as f64 - x).max(x - i as f64 / n as f64))
            .fold(0.0, f64::max);
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    #[test]
    fn unit_blend_returns_the_original() {
        let x = img(2, &[1, 3, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = sample_draw(&AugmentSpec::default(), &mut rng).unwrap();
        draw.blend = 1.0;
        assert_eq!(apply_draw(&x, &draw).unwrap(), x);
    }

    #[test]
    fn identity_ops_return_the_original_for_any_weights() {
        let x = img(4, &[1, 3, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut draw = sample_draw(&AugmentSpec::default(), &mut rng).unwrap();
        for p in &mut draw.paths {
            for s in &mut p.ops {
                s.magnitude = s.op.identity_magnitude();
            }
        }
        assert!(apply_draw(&x, &draw).unwrap().max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn constant_input_stays_constant() {
        let x = Tensor::<f64>::full(&[1, 3, 24, 24], 0.42);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let y = rainmix(&x, &AugmentSpec::default(), &mut rng).unwrap();
            assert!(y.data().iter().all(|v| (v - 0.42).abs() < 1e-9));
        }
    }

    #[test]
    fn draw_order_is_weights_chains_blend() {
        let spec = AugmentSpec::default();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let d = sample_draw(&spec, &mut a).unwrap();
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(d.weights, sample_dirichlet(4, 1.0, &mut b).unwrap());
        assert_eq!(d.paths.len(), 4);
        assert!(d.paths.iter().all(|p| p.ops.len() == 3 && (1..=3).contains(&p.prefix)));
        assert!((0.0..=1.0).contains(&d.blend));
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = AugmentSpec { n_paths: 0, ..AugmentSpec::default() };
        assert!(sample_draw(&bad, &mut rng).is_err());
        let bad = AugmentSpec { ops: vec![], ..AugmentSpec::default() };
        assert!(sample_draw(&bad, &mut rng).is_err());
    }

    #[test]
    fn subtracted_layers() {
        let clean = img(7, &[1, 3, 8, 8]);
        let zero = subtract_rain(&clean, &clean).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let mask = Tensor::from_fn(&[1, 1, 8, 8], |i| if i % 3 == 0 { 0.3 } else { 0.0 });
        let clean = clean.map(|v| v * 0.7);
        let rainy = compose_rainy(&clean, &mask).unwrap();
        let got = subtract_rain(&rainy, &clean).unwrap();
        assert!(got.max_abs_diff(&mask) < 1e-12);

        assert!(subtract_rain(&clean, &img(8, &[1, 3, 8, 4])).is_err());
    }

    #[test]
    fn layer_set_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pairs: Vec<_> = (0..5).map(|s| (img(s, &[1, 3, 16, 16]), img(s + 50, &[1, 3, 16, 16]))).collect();
        let set = build_rain_layer_set(&pairs, 3, &StreakRanges::default(), &mut rng).unwrap();
        assert_eq!(set.len(), 8);
        assert_eq!(set.layers[4].source, RainSource::Subtracted);
        assert_eq!(set.layers[5].source, RainSource::Synthetic);
        assert!(set.layers.iter().all(|l| l.data.shape() == [1, 1, 16, 16]));
    }

    #[test]
    fn compose_edge_cases() {
        let bg = img(11, &[2, 3, 8, 8]);
        assert_eq!(compose_rainy(&bg, &Tensor::zeros(&[1, 1, 8, 8])).unwrap(), bg);
        let sat = compose_rainy(&bg, &Tensor::full(&[2, 1, 8, 8], 1.0)).unwrap();
        assert!(sat.data().iter().all(|&v| v == 1.0));
        assert!(compose_rainy(&bg, &Tensor::zeros(&[1, 3, 8, 8])).is_err());
    }

    #[test]
    fn psnr_falls_as_rain_energy_rises() {
        let bg = img(12, &[1, 3, 32, 32]).map(|v| v * 0.5);
        let streaks = img(13, &[1, 1, 32, 32]).map(|v| if v > 0.8 { 1.0 } else { 0.0 });
        let mut last = f64::INFINITY;
        for k in 1..=5 {
            let rain = streaks.map(|v| v * 0.08 * k as f64);
            let p = psnr(&compose_rainy(&bg, &rain).unwrap(), &bg).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn output_in_unit_range_and_reproducible(seed in 0u64..10_000) {
            let x = img(seed, &[1, 3, 16, 16]);
            let spec = AugmentSpec::default();
            let a = rainmix(&x, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = rainmix(&x, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(a, b);
        }
    }
}
