use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use derain_core::imageio::{load_png, save_png};
use derain_core::metrics::{psnr, ssim_index};
use derain_core::train::{predict_padded, Checkpoint};

use crate::args::DerainArgs;
use crate::files::{create_dir, file_name, list_files, write_text};
use crate::{CliError, CliResult};

pub const RECORDS_FILE: &str = "records.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct DerainRecord {
    pub name: String,
    /// Position in the frame sequence, when run with `--frames`.
    pub frame: Option<usize>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub ms: f64,
}

impl fmt::Display for DerainRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        write!(f, "name={}", self.name)?;
        if let Some(i) = self.frame {
            write!(f, " frame={i}")?;
        }
        write!(f, " psnr={} ssim={} ms={:.3}", opt(self.psnr), opt(self.ssim), self.ms)
    }
}

fn inputs(args: &DerainArgs) -> CliResult<Vec<PathBuf>> {
    if args.input.is_dir() {
        list_files(&args.input, args.frames)
    } else if args.frames {
        Err(CliError::Usage("--frames needs a directory input".into()))
    } else if args.input.is_file() {
        Ok(vec![args.input.clone()])
    } else {
        Err(CliError::Data(format!("input {} does not exist", args.input.display())))
    }
}

fn ground_truth(args: &DerainArgs, input: &Path) -> Option<PathBuf> {
    let gt = args.gt.as_ref()?;
    Some(if gt.is_dir() { gt.join(file_name(input)) } else { gt.clone() })
}

/// Derains every input, writing `<output>/<stem>.png` per image and the
/// records to stdout and `<output>/records.txt`.
pub fn cmd_derain(args: &DerainArgs) -> CliResult<Vec<DerainRecord>> {
    let ckpt = Checkpoint::load(&args.model)?;
    let model = ckpt.model;
    let files = inputs(args)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no input images in {}", args.input.display())));
    }
    create_dir(&args.output)?;
    let mut records = Vec::new();
    let mut failed = 0usize;
    for (i, path) in files.iter().enumerate() {
        let image = match load_png(path) {
            Ok(t) => t,
            Err(e) => {
                log::error!("skipping {}: {e}", path.display());
                failed += 1;
                continue;
            }
        };
        let start = Instant::now();
        let out = predict_padded(&model, &image)?.derained;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if !out.all_finite() {
            return Err(CliError::Numeric(format!("{}: output is not finite", path.display())));
        }
        let out = out.clamp01();
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        save_png(&args.output.join(format!("{stem}.png")), &out)?;
        let (mut p, mut s) = (None, None);
        if let Some(gt_path) = ground_truth(args, path) {
            match load_png(&gt_path) {
                Ok(gt) => {
                    p = Some(psnr(&out, &gt)?);
                    s = Some(ssim_index(&out, &gt)?);
                }
                Err(e) => log::warn!("no ground truth for {}: {e}", path.display()),
            }
        }
        let rec = DerainRecord {
            name: file_name(path),
            frame: args.frames.then_some(i),
            psnr: p,
            ssim: s,
            ms,
        };
        println!("{rec}");
        records.push(rec);
    }
    if records.is_empty() {
        return Err(CliError::Data(format!("all {failed} inputs failed to decode")));
    }
    let text: String = records.iter().map(|r| format!("{r}\n")).collect();
    write_text(&args.output.join(RECORDS_FILE), &text)?;
    eprintln!("derained {} of {} images", records.len(), files.len());
    Ok(records)
}
