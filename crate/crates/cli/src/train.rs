use std::fmt::Write as _;
use std::path::PathBuf;

use derain_core::train::{
    evaluate, make_toy_dataset, run_ablation, summary_table, AblationRow, Checkpoint, Dataset, EvalReport,
    ToyDatasetSpec, TrainConfig, Trainer, Variant,
};

use crate::args::TrainArgs;
use crate::files::{create_dir, write_text};
use crate::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const ABLATION_FILE: &str = "ablation.txt";
/// Where a toy dataset is generated when no data directory is given.
pub const TOY_DATA_DIR: &str = "data";

fn eval_record(r: &EvalReport) -> String {
    format!(
        "eval images={} input_psnr={} input_ssim={} psnr={} ssim={} stage1_psnr={} gain_db={}",
        r.images,
        r.input_psnr,
        r.input_ssim,
        r.psnr,
        r.ssim,
        r.stage1_psnr,
        r.gain_db()
    )
}

pub fn ablation_record(r: &AblationRow) -> String {
    format!(
        "variant={} uc={} ms={} rm={} seed={} psnr={} ssim={} input_psnr={} final_loss={} wall_s={:.1}",
        r.variant.name(),
        r.variant.uc,
        r.variant.multiscale,
        r.variant.rainmix,
        r.seed,
        r.report.psnr,
        r.report.ssim,
        r.report.input_psnr,
        r.final_loss,
        r.wall_s
    )
}

fn load_data(cfg: &TrainConfig, out: &std::path::Path) -> CliResult<Dataset> {
    let dir = match &cfg.data_dir {
        Some(d) => d.clone(),
        None => {
            let d = out.join(TOY_DATA_DIR);
            if !d.join("manifest.txt").is_file() {
                eprintln!("no data directory given; writing the toy dataset to {}", d.display());
                make_toy_dataset(&ToyDatasetSpec::default(), &d)?;
            }
            d
        }
    };
    Ok(Dataset::load(&dir)?)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = &args.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    let out: PathBuf = cfg
        .out_dir
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set out_dir".into()))?;
    cfg.validate()?;
    create_dir(&out)?;
    let data = load_data(&cfg, &out)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_text())?;

    if args.ablation {
        let seeds: Vec<u64> = (0..args.seeds).map(|k| cfg.seed + k).collect();
        if seeds.is_empty() {
            return Err(CliError::Usage("--seeds must be >= 1".into()));
        }
        let rows = run_ablation(&cfg, &data, &Variant::all(), &seeds, Some(&out), |r| {
            println!("{}", ablation_record(r))
        })?;
        let table = summary_table(&rows);
        let mut text = table.clone();
        for r in &rows {
            let _ = writeln!(text, "{}", ablation_record(r));
        }
        write_text(&out.join(ABLATION_FILE), &text)?;
        eprint!("{table}");
        return Ok(());
    }

    let mut trainer = match &args.resume {
        Some(dir) => Trainer::resume(cfg, data, Checkpoint::load(dir)?)?,
        None => Trainer::new(cfg, data)?,
    };
    let summary = trainer.run(Some(&out), |r| println!("{r}"))?;
    let report = evaluate(&trainer.model, &trainer.data().val)?;
    let line = eval_record(&report);
    println!("{line}");
    write_text(&out.join(EVAL_FILE), &format!("{line}\n"))?;
    eprintln!(
        "trained {} + {} steps; held-out PSNR {:.2} dB (input {:.2} dB, gain {:+.2} dB)",
        summary.stage1_steps,
        summary.stage2_steps,
        report.psnr,
        report.input_psnr,
        report.gain_db()
    );
    Ok(())
}
