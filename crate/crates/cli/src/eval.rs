use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use derain_core::imageio::load_png;
use derain_core::metrics::{psnr, ssim_index};

use crate::args::EvalArgs;
use crate::files::{file_name, list_files};
use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ms: f64,
}

impl fmt::Display for EvalRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "name={} psnr={} ssim={} ms={:.3}", self.name, self.psnr, self.ssim, self.ms)
    }
}

fn png_names(dir: &Path) -> CliResult<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(CliError::Data(format!("{} is not a directory", dir.display())));
    }
    Ok(list_files(dir, false)?
        .iter()
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .map(|p| file_name(p))
        .collect())
}

fn missing(names: &BTreeSet<String>, other: &BTreeSet<String>, dir: &Path) -> CliResult<()> {
    match names.difference(other).next() {
        Some(n) => Err(CliError::Data(format!("{n}: missing counterpart in {}", dir.display()))),
        None => Ok(()),
    }
}

/// Per-image and mean PSNR/SSIM over the PNG files of two directories with
/// identical name sets.
pub fn cmd_eval(args: &EvalArgs) -> CliResult<Vec<EvalRecord>> {
    let pred = png_names(&args.pred)?;
    let gt = png_names(&args.gt)?;
    missing(&pred, &gt, &args.gt)?;
    missing(&gt, &pred, &args.pred)?;
    if pred.is_empty() {
        return Err(CliError::Data(format!("no PNG files in {}", args.pred.display())));
    }
    let mut records = Vec::new();
    for name in &pred {
        let (p, g): (PathBuf, PathBuf) = (args.pred.join(name), args.gt.join(name));
        let (a, b) = (load_png(&p)?, load_png(&g)?);
        if a.shape() != b.shape() {
            return Err(CliError::Data(format!(
                "{name}: prediction {:?} and ground truth {:?} differ in size",
                a.shape(),
                b.shape()
            )));
        }
        let start = Instant::now();
        let (p, s) = (psnr(&a, &b)?, ssim_index(&a, &b)?);
        let rec = EvalRecord {
            name: name.clone(),
            psnr: p,
            ssim: s,
            ms: start.elapsed().as_secs_f64() * 1e3,
        };
        println!("{rec}");
        records.push(rec);
    }
    let n = records.len() as f64;
    let mean_psnr = records.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = records.iter().map(|r| r.ssim).sum::<f64>() / n;
    println!("mean images={} psnr={mean_psnr} ssim={mean_ssim}", records.len());
    eprintln!("{:<24} {:>10} {:>8}", "image", "psnr", "ssim");
    for r in &records {
        eprintln!("{:<24} {:>10.3} {:>8.4}", r.name, r.psnr, r.ssim);
    }
    eprintln!("{:<24} {:>10.3} {:>8.4}", "mean", mean_psnr, mean_ssim);
    Ok(records)
}
