//! Paired image data: the procedural toy dataset and training patch crops.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{load_png, quantize, reflect_index, save_png};
use crate::rainmix::{compose_rainy, synth_rain_streaks, StreakRanges};
use crate::tensor::{Real, Tensor};

pub const MANIFEST: &str = "manifest.txt";
pub const RAINY_DIR: &str = "rainy";
pub const CLEAN_DIR: &str = "clean";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDatasetSpec {
    pub count: usize,
    pub size: usize,
    /// Fraction of pairs held out, rounded to the nearest count.
    pub val_fraction: f64,
    pub seed: u64,
    pub streaks: StreakRanges,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            count: 200,
            size: 64,
            val_fraction: 0.2,
            seed: 0,
            streaks: StreakRanges::default(),
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 2 || self.size < 8 {
            return Err(Error::Config(format!(
                "toy dataset needs at least 2 images of at least 8x8, got {} of {}",
                self.count, self.size
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    fn val_count(&self) -> usize {
        ((self.count as f64 * self.val_fraction).round() as usize).clamp(1, self.count - 1)
    }
}

/// Smooth two-color gradient with a few flat-colored rectangles and discs.
fn toy_background<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Tensor<f64> {
    let plane = size * size;
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let (dy, dx) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
    let mut img = vec![0.0; 3 * plane];
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            // projection onto the gradient direction, mapped to [0, 1]
            let t = (((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy) / std::f64::consts::SQRT_2 + 0.5)
                .clamp(0.0, 1.0);
            for c in 0..3 {
                img[c * plane + y * size + x] = c0[c] + (c1[c] - c0[c]) * t;
            }
        }
    }
    let shapes = rng.random_range(3..=6);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let cx = rng.random_range(0.0..s);
        let cy = rng.random_range(0.0..s);
        let r = rng.random_range(0.08..0.3) * s;
        let disc = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc {
                    px * px + py * py <= r * r
                } else {
                    px.abs() <= r && py.abs() <= 0.6 * r
                };
                if inside {
                    for c in 0..3 {
                        img[c * plane + y * size + x] = color[c];
                    }
                }
            }
        }
    }
    Tensor::new(&[1, 3, size, size], img).expect("sized above")
}

/// A generated pair, already quantized to 8 bits.
pub fn toy_pair(spec: &ToyDatasetSpec, index: usize) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let clean = quantize(&toy_background(spec.size, &mut rng));
    let params = spec.streaks.sample(&mut rng);
    let rain = synth_rain_streaks::<f64, _>(spec.size, spec.size, &params, &mut rng)?;
    let rainy = quantize(&compose_rainy(&clean, &rain)?);
    Ok((rainy, clean))
}

/// Which pairs are held out, by index.
pub fn toy_splits(spec: &ToyDatasetSpec) -> Vec<Split> {
    let mut order: Vec<usize> = (0..spec.count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let mut splits = vec![Split::Train; spec.count];
    for &i in &order[..spec.val_count()] {
        splits[i] = Split::Val;
    }
    splits
}

fn file_name(i: usize) -> String {
    format!("{i:04}.png")
}

/// Writes `rainy/NNNN.png`, `clean/NNNN.png` and a manifest with one row
/// per pair.
pub fn make_toy_dataset(spec: &ToyDatasetSpec, dir: &Path) -> Result<()> {
    spec.validate()?;
    for sub in [RAINY_DIR, CLEAN_DIR] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let splits = toy_splits(spec);
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# toy deraining pairs: name split");
    let _ = writeln!(
        manifest,
        "# seed={} count={} size={} val_fraction={}",
        spec.seed, spec.count, spec.size, spec.val_fraction
    );
    for (i, split) in splits.iter().enumerate() {
        let (rainy, clean) = toy_pair(spec, i)?;
        let name = file_name(i);
        save_png(&dir.join(RAINY_DIR).join(&name), &rainy)?;
        save_png(&dir.join(CLEAN_DIR).join(&name), &clean)?;
        let _ = writeln!(manifest, "{name} {}", split.name());
    }
    let path = dir.join(MANIFEST);
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Debug)]
pub struct Pair {
    pub name: String,
    pub rainy: Tensor<f32>,
    pub clean: Tensor<f32>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
}

impl Dataset {
    /// Reads a dataset directory laid out by [`make_toy_dataset`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut ds = Dataset::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (Some(name), Some(split), None) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Data(format!("{}:{}: expected `name split`", path.display(), i + 1)));
            };
            let pair = Pair {
                name: name.to_string(),
                rainy: load_png(&dir.join(RAINY_DIR).join(name))?,
                clean: load_png(&dir.join(CLEAN_DIR).join(name))?,
            };
            if pair.rainy.shape() != pair.clean.shape() {
                return Err(Error::Data(format!("{name}: rainy and clean sizes differ")));
            }
            match split {
                "train" => ds.train.push(pair),
                "val" => ds.val.push(pair),
                other => {
                    return Err(Error::Data(format!(
                        "{}:{}: unknown split {other:?}",
                        path.display(),
                        i + 1
                    )))
                }
            }
        }
        if ds.train.is_empty() {
            return Err(Error::Data(format!("{} lists no training pairs", path.display())));
        }
        Ok(ds)
    }

    /// Keeps the first `n` training pairs.
    pub fn truncate_train(&mut self, n: usize) {
        self.train.truncate(n);
    }
}

/// Top-left corner of a random `patch×patch` window over an `h×w` image.
/// Images smaller than the patch always get offset 0 and are padded.
pub fn sample_offset<R: Rng + ?Sized>(h: usize, w: usize, patch: usize, rng: &mut R) -> (usize, usize) {
    let oy = if h > patch { rng.random_range(0..=h - patch) } else { 0 };
    let ox = if w > patch { rng.random_range(0..=w - patch) } else { 0 };
    (oy, ox)
}

/// `patch×patch` window of a single image starting at `(oy, ox)`, with
/// reflection beyond the borders.
pub fn crop_patch<T: Real>(t: &Tensor<T>, (oy, ox): (usize, usize), patch: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4()?;
    let src = t.data();
    Ok(Tensor::from_fn(&[n, c, patch, patch], |i| {
        let x = i % patch;
        let y = (i / patch) % patch;
        let plane = i / (patch * patch);
        let sy = reflect_index((oy + y) as isize, h);
        let sx = reflect_index((ox + x) as isize, w);
        src[(plane * h + sy) * w + sx]
    }))
}
