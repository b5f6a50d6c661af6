//! Plain-text `key = value` training configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. Relative `data_dir` / `out_dir` paths are kept as written; the
//! caller resolves them.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seed` | 0 | model init, sampling and augmentation seed |
//! | `lr` | 1e-4 | Adam learning rate (both stages); 0 is a dry run |
//! | `batch` | 8 | samples per step |
//! | `patch` | 64 | square crop size, multiple of 16 |
//! | `stage1_steps` / `stage2_steps` | 2000 / 2000 | step limits |
//! | `plateau_window` | 100 | steps averaged for the stop rule |
//! | `plateau_patience` | 500 | stop after this many steps without a new best windowed loss (0 = never) |
//! | `loss_lambda` | 0.2 | SSIM weight |
//! | `model.phi1_depth` / `model.phi2_depth` | 49 / 17 | 49, 33 or 17 |
//! | `model.width` | 1/8 | channel width scale |
//! | `model.cascade` | uc | `none`, `naive` or `uc` |
//! | `model.scales` | 4 | dilations 1..=S |
//! | `rainmix` | on | `on` / `off` |
//! | `rainmix.n_paths` / `rainmix.ops_per_path` | 4 / 3 | chains and ops per chain |
//! | `rainmix.ops` | all seven | comma-separated op names |
//! | `rainmix.dirichlet_alpha` | 1.0 | mixing concentration |
//! | `rainmix.beta` | 1.0,1.0 | blend distribution |
//! | `rainmix.rot_deg` / `.shear` / `.trans` / `.zoom` | 30 / 0.3 / 0.25 / 0.7,1.4 | magnitude ranges |
//! | `rainmix.synth_layers` | 50 | procedural layers added to the subtracted ones |
//! | `log_every` | 1 | loss record interval |
//! | `checkpoint_every` | 0 | mid-run checkpoint interval (0 = end of stage only) |
//! | `data_dir` / `out_dir` | none | dataset and output directories |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::LossConfig;
use crate::net::{Cascade, Depth, ModelConfig, WidthScale, SIZE_MULTIPLE};
use crate::rainmix::{AugmentSpec, GeomOp};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub patch: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub plateau_window: usize,
    pub plateau_patience: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub rainmix: Option<AugmentSpec>,
    pub synth_layers: usize,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-4,
            batch: 8,
            patch: 64,
            stage1_steps: 2000,
            stage2_steps: 2000,
            plateau_window: 100,
            plateau_patience: 500,
            loss: LossConfig::default(),
            model: ModelConfig::final_design(WidthScale::TINY),
            rainmix: Some(AugmentSpec::default()),
            synth_layers: 50,
            log_every: 1,
            checkpoint_every: 0,
            data_dir: None,
            out_dir: None,
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn parse_pair(v: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = v.split_once(',').ok_or_else(|| format!("expected two comma-separated numbers, got {v:?}"))?;
    Ok((parse_num(a.trim())?, parse_num(b.trim())?))
}

fn parse_switch(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(format!("expected on or off, got {v:?}")),
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.patch == 0 || self.patch % SIZE_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "patch must be a positive multiple of {SIZE_MULTIPLE}, got {}",
                self.patch
            )));
        }
        if self.plateau_window == 0 {
            return Err(Error::Config("plateau_window must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        self.loss.validate()?;
        self.model.validate()?;
        if let Some(spec) = &self.rainmix {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses and validates a configuration, starting from the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut rainmix_on = true;
        let mut spec = AugmentSpec::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |msg: String| Error::ConfigLine { line: idx + 1, msg };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, got {line:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            let r: std::result::Result<(), String> = (|| {
                match key {
                    "seed" => cfg.seed = parse_num(v)?,
                    "lr" => cfg.lr = parse_num(v)?,
                    "batch" => cfg.batch = parse_num(v)?,
                    "patch" => cfg.patch = parse_num(v)?,
                    "stage1_steps" => cfg.stage1_steps = parse_num(v)?,
                    "stage2_steps" => cfg.stage2_steps = parse_num(v)?,
                    "plateau_window" => cfg.plateau_window = parse_num(v)?,
                    "plateau_patience" => cfg.plateau_patience = parse_num(v)?,
                    "loss_lambda" => cfg.loss.lambda = parse_num(v)?,
                    "model.phi1_depth" => cfg.model.phi1_depth = v.parse::<Depth>().map_err(|e| e.to_string())?,
                    "model.phi2_depth" => cfg.model.phi2_depth = v.parse::<Depth>().map_err(|e| e.to_string())?,
                    "model.width" => cfg.model.width = v.parse::<WidthScale>().map_err(|e| e.to_string())?,
                    "model.cascade" => cfg.model.cascade = v.parse::<Cascade>().map_err(|e| e.to_string())?,
                    "model.scales" => cfg.model.scales = parse_num(v)?,
                    "rainmix" => rainmix_on = parse_switch(v)?,
                    "rainmix.n_paths" => spec.n_paths = parse_num(v)?,
                    "rainmix.ops_per_path" => spec.ops_per_path = parse_num(v)?,
                    "rainmix.ops" => {
                        spec.ops = v
                            .split(',')
                            .map(|s| s.trim().parse::<GeomOp>().map_err(|e| e.to_string()))
                            .collect::<std::result::Result<_, _>>()?
                    }
                    "rainmix.dirichlet_alpha" => spec.dirichlet_alpha = parse_num(v)?,
                    "rainmix.beta" => spec.beta = parse_pair(v)?,
                    "rainmix.rot_deg" => spec.ranges.rot_deg = parse_num(v)?,
                    "rainmix.shear" => spec.ranges.shear = parse_num(v)?,
                    "rainmix.trans" => spec.ranges.trans = parse_num(v)?,
                    "rainmix.zoom" => spec.ranges.zoom = parse_pair(v)?,
                    "rainmix.synth_layers" => cfg.synth_layers = parse_num(v)?,
                    "log_every" => cfg.log_every = parse_num(v)?,
                    "checkpoint_every" => cfg.checkpoint_every = parse_num(v)?,
                    "data_dir" => cfg.data_dir = Some(PathBuf::from(v)),
                    "out_dir" => cfg.out_dir = Some(PathBuf::from(v)),
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            })();
            r.map_err(at)?;
        }
        cfg.rainmix = rainmix_on.then_some(spec);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every setting; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.model;
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "lr = {:e}", self.lr);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "stage1_steps = {}", self.stage1_steps);
        let _ = writeln!(s, "stage2_steps = {}", self.stage2_steps);
        let _ = writeln!(s, "plateau_window = {}", self.plateau_window);
        let _ = writeln!(s, "plateau_patience = {}", self.plateau_patience);
        let _ = writeln!(s, "loss_lambda = {}", self.loss.lambda);
        let _ = writeln!(s, "model.phi1_depth = {}", m.phi1_depth);
        let _ = writeln!(s, "model.phi2_depth = {}", m.phi2_depth);
        let _ = writeln!(s, "model.width = {}", m.width);
        let _ = writeln!(s, "model.cascade = {}", m.cascade);
        let _ = writeln!(s, "model.scales = {}", m.scales);
        let _ = writeln!(s, "rainmix = {}", if self.rainmix.is_some() { "on" } else { "off" });
        let spec = self.rainmix.clone().unwrap_or_default();
        let ops: Vec<&str> = spec.ops.iter().map(|o| o.name()).collect();
        let _ = writeln!(s, "rainmix.n_paths = {}", spec.n_paths);
        let _ = writeln!(s, "rainmix.ops_per_path = {}", spec.ops_per_path);
        let _ = writeln!(s, "rainmix.ops = {}", ops.join(","));
        let _ = writeln!(s, "rainmix.dirichlet_alpha = {}", spec.dirichlet_alpha);
        let _ = writeln!(s, "rainmix.beta = {},{}", spec.beta.0, spec.beta.1);
        let _ = writeln!(s, "rainmix.rot_deg = {}", spec.ranges.rot_deg);
        let _ = writeln!(s, "rainmix.shear = {}", spec.ranges.shear);
        let _ = writeln!(s, "rainmix.trans = {}", spec.ranges.trans);
        let _ = writeln!(s, "rainmix.zoom = {},{}", spec.ranges.zoom.0, spec.ranges.zoom.1);
        let _ = writeln!(s, "rainmix.synth_layers = {}", self.synth_layers);
        let _ = writeln!(s, "log_every = {}", self.log_every);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        if let Some(d) = &self.data_dir {
            let _ = writeln!(s, "data_dir = {}", d.display());
        }
        if let Some(d) = &self.out_dir {
            let _ = writeln!(s, "out_dir = {}", d.display());
        }
        s
    }
}
