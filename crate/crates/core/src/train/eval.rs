//! Held-out evaluation and padded whole-image inference.

use crate::error::Result;
use crate::imageio::{crop, pad_to_multiple};
use crate::metrics::{psnr, ssim_index};
use crate::net::{DerainModel, Prediction, SIZE_MULTIPLE};
use crate::tensor::{Real, Tensor};

use super::data::Pair;

/// Eval-mode prediction on an image of any size: reflect-padded to a
/// multiple of 16, then cropped back.
pub fn predict_padded<T: Real>(model: &DerainModel<T>, image: &Tensor<T>) -> Result<Prediction<T>> {
    let (padded, (h, w)) = pad_to_multiple(image, SIZE_MULTIPLE)?;
    let p = model.predict(&padded)?;
    let back = |t: Tensor<T>| crop(&t, h, w);
    Ok(Prediction {
        derained: back(p.derained)?,
        stage1: back(p.stage1)?,
        stage2: p.stage2.map(back).transpose()?,
        uncertainty: p.uncertainty.map(back).transpose()?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub images: usize,
    /// Rainy input against ground truth.
    pub input_psnr: f64,
    pub input_ssim: f64,
    /// Final output against ground truth.
    pub psnr: f64,
    pub ssim: f64,
    /// First-stage output against ground truth.
    pub stage1_psnr: f64,
}

impl EvalReport {
    pub fn gain_db(&self) -> f64 {
        self.psnr - self.input_psnr
    }
}

/// Mean metrics over `pairs`, with outputs clamped to [0, 1].
pub fn evaluate(model: &DerainModel<f32>, pairs: &[Pair]) -> Result<EvalReport> {
    let mut r = EvalReport {
        images: pairs.len(),
        ..EvalReport::default()
    };
    if pairs.is_empty() {
        return Ok(r);
    }
    for p in pairs {
        let pred = predict_padded(model, &p.rainy)?;
        let out = pred.derained.clamp01();
        r.input_psnr += psnr(&p.rainy, &p.clean)?;
        r.input_ssim += ssim_index(&p.rainy, &p.clean)?;
        r.psnr += psnr(&out, &p.clean)?;
        r.ssim += ssim_index(&out, &p.clean)?;
        r.stage1_psnr += psnr(&pred.stage1.clamp01(), &p.clean)?;
    }
    let n = pairs.len() as f64;
    for v in [&mut r.input_psnr, &mut r.input_ssim, &mut r.psnr, &mut r.ssim, &mut r.stage1_psnr] {
        *v /= n;
    }
    Ok(r)
}
