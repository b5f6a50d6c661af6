//! On/off matrix over the three components: uncertainty-aware cascade,
//! shared-weight multi-scale filtering and RainMix.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::Result;
use crate::net::Cascade;
use crate::rainmix::AugmentSpec;

use super::config::TrainConfig;
use super::data::Dataset;
use super::eval::{evaluate, EvalReport};
use super::trainer::Trainer;

/// Dilation count used when multi-scale filtering is switched on and the
/// base config has a single scale.
const DEFAULT_SCALES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Variant {
    pub uc: bool,
    pub multiscale: bool,
    pub rainmix: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        uc: true,
        multiscale: true,
        rainmix: true,
    };
    pub const BASE: Variant = Variant {
        uc: false,
        multiscale: false,
        rainmix: false,
    };

    /// All eight combinations, full model first.
    pub fn all() -> Vec<Variant> {
        (0..8u8)
            .map(|m| Variant {
                uc: m & 4 == 0,
                multiscale: m & 2 == 0,
                rainmix: m & 1 == 0,
            })
            .collect()
    }

    /// e.g. `uc+ms+rm`, `ms`, `base`.
    pub fn name(&self) -> String {
        let parts: Vec<&str> = [(self.uc, "uc"), (self.multiscale, "ms"), (self.rainmix, "rm")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join("+")
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.model.cascade = match (self.uc, base.model.cascade) {
            (false, _) => Cascade::None,
            (true, Cascade::None) => Cascade::Uncertainty,
            (true, c) => c,
        };
        cfg.model.scales = match (self.multiscale, base.model.scales) {
            (false, _) => 1,
            (true, 1) => DEFAULT_SCALES,
            (true, s) => s,
        };
        cfg.rainmix = self
            .rainmix
            .then(|| base.rainmix.clone().unwrap_or_else(AugmentSpec::default));
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub report: EvalReport,
    pub final_loss: f64,
    pub wall_s: f64,
}

/// Trains every `(variant, seed)` combination and evaluates it on the
/// held-out pairs. With an output directory each run writes its loss curve
/// and checkpoints under `<variant>/seed<k>/`.
pub fn run_ablation(
    base: &TrainConfig,
    data: &Dataset,
    variants: &[Variant],
    seeds: &[u64],
    out: Option<&Path>,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let mut cfg = variant.apply(base);
            cfg.seed = seed;
            let start = Instant::now();
            let mut trainer = Trainer::new(cfg, data.clone())?;
            let run_dir = out.map(|d| d.join(variant.name()).join(format!("seed{seed}")));
            let summary = trainer.run(run_dir.as_deref(), |_| {})?;
            let report = evaluate(&trainer.model, &data.val)?;
            let row = AblationRow {
                variant,
                seed,
                report,
                final_loss: summary.losses.last().map_or(f64::NAN, |r| r.loss),
                wall_s: start.elapsed().as_secs_f64(),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median held-out PSNR of each variant, in first-appearance order.
pub fn median_psnr(rows: &[AblationRow]) -> Vec<(Variant, f64)> {
    let mut order: Vec<Variant> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let mut vals: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.report.psnr).collect();
            (v, median(&mut vals))
        })
        .collect()
}

/// Human-readable table: one line per variant with median metrics.
pub fn summary_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<10} {:>3} {:>3} {:>3} {:>6} {:>12} {:>12} {:>12}",
        "variant", "uc", "ms", "rm", "seeds", "median_psnr", "median_ssim", "input_psnr"
    );
    for (v, p) in median_psnr(rows) {
        let of_v: Vec<&AblationRow> = rows.iter().filter(|r| r.variant == v).collect();
        let mut ssim: Vec<f64> = of_v.iter().map(|r| r.report.ssim).collect();
        let mut input: Vec<f64> = of_v.iter().map(|r| r.report.input_psnr).collect();
        let mark = |b: bool| if b { "on" } else { "-" };
        let _ = writeln!(
            s,
            "{:<10} {:>3} {:>3} {:>3} {:>6} {:>12.3} {:>12.4} {:>12.3}",
            v.name(),
            mark(v.uc),
            mark(v.multiscale),
            mark(v.rainmix),
            of_v.len(),
            p,
            median(&mut ssim),
            median(&mut input)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_distinct_variants() {
        let all = Variant::all();
        assert_eq!(all.len(), 8);
        assert_eq!(all[0], Variant::FULL);
        assert_eq!(all[7], Variant::BASE);
        let mut names: Vec<String> = all.iter().map(Variant::name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 8);
    }

    #[test]
    fn variants_switch_the_config() {
        let base = TrainConfig::default();
        let b = Variant::BASE.apply(&base);
        assert_eq!((b.model.cascade, b.model.scales, b.rainmix.is_some()), (Cascade::None, 1, false));
        let f = Variant::FULL.apply(&b);
        assert_eq!(
            (f.model.cascade, f.model.scales, f.rainmix.is_some()),
            (Cascade::Uncertainty, 4, true)
        );
        let naive = TrainConfig {
            model: crate::net::ModelConfig {
                cascade: Cascade::Naive,
                ..base.model
            },
            ..base.clone()
        };
        assert_eq!(Variant::FULL.apply(&naive).model.cascade, Cascade::Naive);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
