//! Cost of the two multi-scale strategies: analytic and counted
//! multiply-accumulates, filter time and whole-stage time.
//!
//! A stage is kernel prediction plus filtering plus fusion. Shared-weight
//! filtering predicts one 3×3 field and applies it at every dilation; the
//! multi-head baseline predicts a dense `(2s+1)²` field per scale from a
//! wider head on the same backbone.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{build_predictive_net, Depth, NetConfig, WidthScale, IMAGE_CHANNELS, KERNEL_SIZE};
use crate::params::{Graph, Mode, ParamStore};
use crate::pfilt::{
    apply_dilated_filter, apply_dilated_filter_counted, flop_count, fuse, FilterStrategy, FusionWeights, KernelField,
    MacCounter,
};
use crate::tensor::Tensor;

pub fn strategy_name(s: FilterStrategy) -> &'static str {
    match s {
        FilterStrategy::WeightSharing => "ws",
        FilterStrategy::MultiHead => "mh",
    }
}

impl FromStr for FilterStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ws" => Ok(FilterStrategy::WeightSharing),
            "mh" => Ok(FilterStrategy::MultiHead),
            other => Err(Error::Config(format!("unknown strategy {other:?} (expected ws or mh)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// `(H, W)` pairs; each must be a multiple of 16.
    pub sizes: Vec<(usize, usize)>,
    pub scales: Vec<usize>,
    pub strategies: Vec<FilterStrategy>,
    pub warmup: usize,
    pub runs: usize,
    /// Backbone used for kernel prediction.
    pub depth: Depth,
    pub width: WidthScale,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![(256, 256)],
            scales: vec![1, 2, 3, 4],
            strategies: vec![FilterStrategy::WeightSharing, FilterStrategy::MultiHead],
            warmup: 5,
            runs: 20,
            depth: Depth::L49,
            width: WidthScale::TINY,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub strategy: FilterStrategy,
    pub scales: usize,
    pub h: usize,
    pub w: usize,
    pub analytic_macs: u64,
    pub counted_macs: u64,
    /// Median filtering time over all scales, excluding prediction and fusion.
    pub filter_ms: f64,
    /// Median time of prediction, filtering and fusion.
    pub stage_ms: f64,
    /// Kernel fields plus per-scale outputs alive before fusion.
    pub peak_bytes: usize,
}

impl BenchRow {
    pub fn macs_match(&self) -> bool {
        self.analytic_macs == self.counted_macs
    }

    /// Plain-text `key=value` record.
    pub fn record(&self) -> String {
        format!(
            "strategy={} S={} H={} W={} macs={} counted_macs={} filter_ms={:.3} stage_ms={:.3} peak_bytes={}",
            strategy_name(self.strategy),
            self.scales,
            self.h,
            self.w,
            self.analytic_macs,
            self.counted_macs,
            self.filter_ms,
            self.stage_ms,
            self.peak_bytes
        )
    }
}

fn median_ms(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Kernel sizes predicted by one stage.
fn kernel_sizes(strategy: FilterStrategy, scales: usize) -> Vec<usize> {
    match strategy {
        FilterStrategy::WeightSharing => vec![KERNEL_SIZE],
        FilterStrategy::MultiHead => (1..=scales).map(|s| s * (KERNEL_SIZE - 1) + 1).collect(),
    }
}

struct Stage {
    net: crate::net::PredictiveNet,
    store: ParamStore<f32>,
    fusion: Option<FusionWeights<f32>>,
    strategy: FilterStrategy,
    scales: usize,
}

impl Stage {
    fn new(cfg: &BenchConfig, strategy: FilterStrategy, scales: usize) -> Result<Self> {
        let out: usize = kernel_sizes(strategy, scales).iter().map(|k| IMAGE_CHANNELS * k * k).sum();
        let net_cfg = NetConfig {
            out_channels: out,
            ..NetConfig::new(cfg.depth, cfg.width, IMAGE_CHANNELS)
        };
        let (net, store) = build_predictive_net::<f32>(net_cfg, cfg.seed)?;
        let fusion = (scales > 1)
            .then(|| FusionWeights::mean_init(scales, IMAGE_CHANNELS))
            .transpose()?;
        Ok(Self {
            net,
            store,
            fusion,
            strategy,
            scales,
        })
    }

    fn predict(&self, image: &Tensor<f32>) -> Result<Vec<KernelField<f32>>> {
        let mut g = Graph::new(&self.store, Mode::Eval, false);
        let x = g.input(image.clone());
        let k = self.net.predict_kernels(&mut g, x)?;
        let all = g.value(k);
        let (b, _, h, w) = all.dims4()?;
        let plane = h * w;
        let mut start = 0;
        let mut fields = Vec::new();
        for ks in kernel_sizes(self.strategy, self.scales) {
            let depth = IMAGE_CHANNELS * ks * ks;
            let mut data = Vec::with_capacity(b * depth * plane);
            let total = all.shape()[1];
            for n in 0..b {
                let from = (n * total + start) * plane;
                data.extend_from_slice(&all.data()[from..from + depth * plane]);
            }
            fields.push(KernelField::new(Tensor::new(&[b, depth, h, w], data)?, ks)?);
            start += depth;
        }
        Ok(fields)
    }

    /// `(dilation, field index)` for each scale.
    fn schedule(&self) -> Vec<(usize, usize)> {
        match self.strategy {
            FilterStrategy::WeightSharing => (1..=self.scales).map(|s| (s, 0)).collect(),
            FilterStrategy::MultiHead => (0..self.scales).map(|i| (1, i)).collect(),
        }
    }

    fn filter(&self, image: &Tensor<f32>, fields: &[KernelField<f32>]) -> Result<Vec<Tensor<f32>>> {
        self.schedule()
            .into_iter()
            .map(|(d, i)| apply_dilated_filter(image, &fields[i], d))
            .collect()
    }

    fn run(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let fields = self.predict(image)?;
        let outs = self.filter(image, &fields)?;
        match &self.fusion {
            Some(f) => fuse(&outs, f),
            None => Ok(outs.into_iter().next().expect("one scale")),
        }
    }
}

pub fn run_bench(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>> {
    if cfg.runs == 0 {
        return Err(Error::Config("bench needs at least one timed run".into()));
    }
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for &(h, w) in &cfg.sizes {
        let image = Tensor::from_fn(&[1, IMAGE_CHANNELS, h, w], |_| rng.random_range(0.0f32..1.0));
        for &strategy in &cfg.strategies {
            for &scales in &cfg.scales {
                if scales == 0 {
                    return Err(Error::Config("scales must be >= 1".into()));
                }
                let stage = Stage::new(cfg, strategy, scales)?;
                let fields = stage.predict(&image)?;
                let mut counter = MacCounter::default();
                let mut peak = fields.iter().map(|f| f.weights().len()).sum::<usize>();
                for (d, i) in stage.schedule() {
                    let out = apply_dilated_filter_counted(&image, &fields[i], d, &mut counter)?;
                    peak += out.len();
                }
                let mut filter_times = Vec::with_capacity(cfg.runs);
                let mut stage_times = Vec::with_capacity(cfg.runs);
                for i in 0..cfg.warmup + cfg.runs {
                    let t = Instant::now();
                    std::hint::black_box(stage.filter(&image, &fields)?);
                    let filter_ms = t.elapsed().as_secs_f64() * 1e3;
                    let t = Instant::now();
                    std::hint::black_box(stage.run(&image)?);
                    let stage_ms = t.elapsed().as_secs_f64() * 1e3;
                    if i >= cfg.warmup {
                        filter_times.push(filter_ms);
                        stage_times.push(stage_ms);
                    }
                }
                let row = BenchRow {
                    strategy,
                    scales,
                    h,
                    w,
                    analytic_macs: flop_count(
                        h as u64,
                        w as u64,
                        IMAGE_CHANNELS as u64,
                        KERNEL_SIZE as u64,
                        scales as u64,
                        strategy,
                    ),
                    counted_macs: counter.count,
                    filter_ms: median_ms(filter_times),
                    stage_ms: median_ms(stage_times),
                    peak_bytes: peak * std::mem::size_of::<f32>(),
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn find(rows: &[BenchRow], strategy: FilterStrategy, scales: usize, h: usize, w: usize) -> Option<&BenchRow> {
    rows.iter()
        .find(|r| r.strategy == strategy && r.scales == scales && (r.h, r.w) == (h, w))
}

/// Shared-weight stage time at `S = max` over `S = 1`, per size.
pub fn ws_time_ratio(rows: &[BenchRow], h: usize, w: usize, scales: usize) -> Option<f64> {
    let one = find(rows, FilterStrategy::WeightSharing, 1, h, w)?;
    let s = find(rows, FilterStrategy::WeightSharing, scales, h, w)?;
    Some(s.stage_ms / one.stage_ms)
}

pub fn table(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<4} {:>2} {:>9} {:>12} {:>7} {:>10} {:>10} {:>12}",
        "strat", "S", "size", "MACs", "counted", "filter_ms", "stage_ms", "peak_bytes"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<4} {:>2} {:>9} {:>12} {:>7} {:>10.3} {:>10.3} {:>12}",
            strategy_name(r.strategy),
            r.scales,
            format!("{}x{}", r.h, r.w),
            r.analytic_macs,
            if r.macs_match() { "ok" } else { "MISMATCH" },
            r.filter_ms,
            r.stage_ms,
            r.peak_bytes
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(strategies: Vec<FilterStrategy>) -> BenchConfig {
        BenchConfig {
            sizes: vec![(32, 48)],
            strategies,
            warmup: 1,
            runs: 2,
            depth: Depth::L17,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn counted_macs_equal_the_formula() {
        let rows = run_bench(&quick(vec![FilterStrategy::WeightSharing, FilterStrategy::MultiHead]), |_| {}).unwrap();
        assert_eq!(rows.len(), 8);
        for r in &rows {
            assert!(r.macs_match(), "{}", r.record());
            assert!(r.stage_ms > 0.0 && r.filter_ms > 0.0);
        }
        let ws4 = find(&rows, FilterStrategy::WeightSharing, 4, 32, 48).unwrap();
        let mh4 = find(&rows, FilterStrategy::MultiHead, 4, 32, 48).unwrap();
        assert!(mh4.peak_bytes > ws4.peak_bytes);
        assert!(ws_time_ratio(&rows, 32, 48, 4).is_some());
        assert!(table(&rows).lines().count() == 9);
    }

    #[test]
    fn strategy_names_parse() {
        assert_eq!("ws".parse::<FilterStrategy>().unwrap(), FilterStrategy::WeightSharing);
        assert_eq!("mh".parse::<FilterStrategy>().unwrap(), FilterStrategy::MultiHead);
        assert!("xx".parse::<FilterStrategy>().is_err());
    }
}
