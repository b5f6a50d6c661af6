use derain_core::bench::{run_bench, table, ws_time_ratio, BenchConfig, BenchRow};
use derain_core::net::SIZE_MULTIPLE;
use derain_core::pfilt::FilterStrategy;

use crate::args::BenchArgs;
use crate::{CliError, CliResult};

/// Shared-weight stage time at the largest scale may be at most this
/// multiple of the single-scale time.
pub const WS_FLAT_LIMIT: f64 = 1.5;

fn stage_ms(rows: &[BenchRow], strategy: FilterStrategy, s: usize, h: usize, w: usize) -> Option<f64> {
    rows.iter()
        .find(|r| r.strategy == strategy && r.scales == s && (r.h, r.w) == (h, w))
        .map(|r| r.stage_ms)
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult<Vec<BenchRow>> {
    if args.sizes.iter().any(|&(h, w)| h == 0 || w == 0 || h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0) {
        return Err(CliError::Usage(format!("sizes must be positive multiples of {SIZE_MULTIPLE}")));
    }
    if args.scales.iter().any(|&s| s == 0) {
        return Err(CliError::Usage("scales must be >= 1".into()));
    }
    if args.runs == 0 {
        return Err(CliError::Usage("--runs must be >= 1".into()));
    }
    let cfg = BenchConfig {
        sizes: args.sizes.clone(),
        scales: args.scales.clone(),
        strategies: args.strategies.clone(),
        warmup: args.warmup,
        runs: args.runs,
        depth: args.depth,
        width: args.width,
        seed: args.seed,
    };
    let rows = run_bench(&cfg, |r| {
        println!("{}", r.record());
        log::info!("{}", r.record());
    })?;
    eprint!("{}", table(&rows));

    let max_s = args.scales.iter().copied().max().unwrap_or(1);
    for &(h, w) in &args.sizes {
        if max_s > 1 {
            if let Some(ratio) = ws_time_ratio(&rows, h, w, max_s) {
                println!(
                    "check=ws_time_flat H={h} W={w} S={max_s} ratio={ratio:.4} within_{WS_FLAT_LIMIT}x={}",
                    ratio <= WS_FLAT_LIMIT
                );
            }
        }
        let multi: Vec<usize> = args.scales.iter().copied().filter(|&s| s >= 2).collect();
        if let (Some(&lo), Some(&hi)) = (multi.iter().min(), multi.iter().max()) {
            let growth = |st| Some(stage_ms(&rows, st, hi, h, w)? / stage_ms(&rows, st, lo, h, w)?);
            if let (Some(ws), Some(mh), true) = (
                growth(FilterStrategy::WeightSharing),
                growth(FilterStrategy::MultiHead),
                hi > lo,
            ) {
                println!(
                    "check=ws_growth_below_mh H={h} W={w} S={lo}..{hi} ws_growth={ws:.4} mh_growth={mh:.4} holds={}",
                    ws < mh
                );
            }
        }
    }
    if let Some(bad) = rows.iter().find(|r| !r.macs_match()) {
        return Err(CliError::Numeric(format!(
            "MAC counter disagrees with the formula: {}",
            bad.record()
        )));
    }
    Ok(rows)
}
