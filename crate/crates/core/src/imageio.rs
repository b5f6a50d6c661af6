//! 8-bit PNG I/O and size padding.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Decodes any PNG to RGB as a `(1, 3, H, W)` tensor on [0, 1].
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    let d = t.data_mut();
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            d[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    t
}

/// Round-half-up 8-bit quantization of a [0, 1] value (clamped first).
pub fn quantize_u8<T: Real>(v: T) -> u8 {
    let v = v.as_f64().clamp(0.0, 1.0);
    (v * 255.0 + 0.5).floor() as u8
}

/// Encodes item `n` of an `(N, 3, H, W)` tensor.
pub fn to_rgb8<T: Real>(t: &Tensor<T>, n: usize) -> Result<RgbImage> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 || n >= b {
        return Err(shape_err!("cannot encode item {n} of {:?} as RGB", t.shape()));
    }
    let base = n * 3 * h * w;
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = base + y as usize * w + x as usize;
        Rgb([quantize_u8(d[i]), quantize_u8(d[i + h * w]), quantize_u8(d[i + 2 * h * w])])
    }))
}

pub fn save_png<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    to_rgb8(t, 0)?.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// The values an image takes after an 8-bit round trip.
pub fn quantize<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| T::lit(quantize_u8(v) as f64 / 255.0))
}

/// Mirror index without repeating the edge sample (`… 2 1 | 0 1 2 … n-1 | n-2 …`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Pads the bottom and right edges by reflection up to the next multiple of
/// `multiple`. Returns the padded tensor and the original `(H, W)`.
pub fn pad_to_multiple<T: Real>(t: &Tensor<T>, multiple: usize) -> Result<(Tensor<T>, (usize, usize))> {
    let (n, c, h, w) = t.dims4()?;
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if (ph, pw) == (h, w) {
        return Ok((t.clone(), (h, w)));
    }
    let src = t.data();
    let out = Tensor::from_fn(&[n, c, ph, pw], |i| {
        let x = i % pw;
        let y = (i / pw) % ph;
        let plane = i / (ph * pw);
        let sy = reflect_index(y as isize, h);
        let sx = reflect_index(x as isize, w);
        src[(plane * h + sy) * w + sx]
    });
    Ok((out, (h, w)))
}

/// Top-left `h×w` window of every plane.
pub fn crop<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, th, tw) = t.dims4()?;
    if h > th || w > tw {
        return Err(shape_err!("crop {h}x{w} larger than {th}x{tw}"));
    }
    let src = t.data();
    Ok(Tensor::from_fn(&[n, c, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let plane = i / (h * w);
        src[(plane * th + y) * tw + x]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(quantize_u8(0.5f64 / 255.0), 1);
        assert_eq!(quantize_u8(0.49f64 / 255.0), 0);
        assert_eq!(quantize_u8(-0.2f64), 0);
        assert_eq!(quantize_u8(1.7f64), 255);
        assert_eq!(quantize_u8(200.0f32 / 255.0), 200);
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let t = Tensor::from_fn(&[1, 3, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0);
        save_png(&path, &t).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back, t);
        let again = dir.path().join("b.png");
        save_png(&again, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn undecodable_file_is_an_image_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png").unwrap();
        assert!(matches!(load_png(&path), Err(Error::Image { .. })));
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_restores_the_image() {
        let t = Tensor::from_fn(&[1, 3, 20, 37], |i| i as f64);
        let (p, (h, w)) = pad_to_multiple(&t, 16).unwrap();
        assert_eq!(p.shape(), &[1, 3, 32, 48]);
        assert_eq!(p.at4(0, 1, 20, 3), t.at4(0, 1, 18, 3));
        assert_eq!(p.at4(0, 2, 2, 37), t.at4(0, 2, 2, 35));
        assert_eq!(crop(&p, h, w).unwrap(), t);
        let (same, _) = pad_to_multiple(&p, 16).unwrap();
        assert_eq!(same, p);
    }
}
