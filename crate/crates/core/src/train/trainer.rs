//! The two-stage training loop.
//!
//! Stage 1 fits the first predictive network (and its multi-scale fusion)
//! on the first-stage output alone. Stage 2 trains every parameter on the
//! sum of the losses of the fused, first and second outputs, with a fresh
//! optimizer. Models without a cascade run a single stage for the combined
//! step budget.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{l1_ssim_loss, uc_loss};
use crate::net::{Cascade, DerainModel};
use crate::params::{Graph, Mode};
use crate::rainmix::{apply_draw, build_rain_layer_set, compose_rainy, sample_draw, RainLayerSet, StreakRanges};
use crate::tensor::Tensor;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::checkpoint::{Checkpoint, ResumeState};
use super::config::TrainConfig;
use super::data::{crop_patch, sample_offset, Dataset};
use super::plateau::Plateau;

/// Rng stream used for batch sampling and augmentation.
const TRAIN_STREAM: u64 = 1;
/// Rng stream used once to synthesize the procedural rain layers.
const RAIN_SET_STREAM: u64 = 2;

pub const LOSS_FILE: &str = "loss.txt";
pub const STAGE1_DIR: &str = "stage1";
pub const FINAL_DIR: &str = "final";
pub const LATEST_DIR: &str = "latest";
pub const DIAGNOSTIC_DIR: &str = "diagnostic";

/// One line of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub stage: u8,
    /// 1-based step within the stage.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage={} step={} loss={} lr={} wall_ms={:.3}",
            self.stage, self.step, self.loss, self.lr, self.wall_ms
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub losses: Vec<LossRecord>,
}

pub struct Trainer {
    cfg: TrainConfig,
    data: Dataset,
    rain: RainLayerSet<f32>,
    pub model: DerainModel<f32>,
    state: ResumeState,
}

fn stage_limit(cfg: &TrainConfig, stage: u8) -> u64 {
    match (stage, cfg.model.cascade) {
        (1, Cascade::None) => cfg.stage1_steps + cfg.stage2_steps,
        (1, _) => cfg.stage1_steps,
        (_, Cascade::None) => 0,
        _ => cfg.stage2_steps,
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let model = DerainModel::new(cfg.model, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TRAIN_STREAM);
        let state = ResumeState {
            stage: 1,
            step: 0,
            rng,
            adam: AdamState::new(&model.store),
            plateau: Plateau::new(cfg.plateau_window, cfg.plateau_patience),
            draws: 0,
        };
        Self::assemble(cfg, data, model, state)
    }

    /// Continues a run from a checkpoint written by [`Trainer::save`].
    pub fn resume(cfg: TrainConfig, data: Dataset, ckpt: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.model.config() != &cfg.model || ckpt.seed != cfg.seed {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained with {:?} seed {}, config asks for {:?} seed {}",
                ckpt.model.config(),
                ckpt.seed,
                cfg.model,
                cfg.seed
            )));
        }
        let state = ckpt
            .resume
            .ok_or_else(|| Error::Config("checkpoint holds no training state".into()))?;
        Self::assemble(cfg, data, ckpt.model, state)
    }

    fn assemble(cfg: TrainConfig, data: Dataset, model: DerainModel<f32>, state: ResumeState) -> Result<Self> {
        if data.train.is_empty() {
            return Err(Error::Data("no training pairs".into()));
        }
        let rain = if cfg.rainmix.is_some() {
            let pairs: Vec<_> = data.train.iter().map(|p| (p.rainy.clone(), p.clean.clone())).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(RAIN_SET_STREAM);
            build_rain_layer_set(&pairs, cfg.synth_layers, &StreakRanges::default(), &mut rng)?
        } else {
            RainLayerSet::default()
        };
        Ok(Self {
            cfg,
            data,
            rain,
            model,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn stage(&self) -> u8 {
        self.state.stage
    }

    /// Steps completed in the current stage.
    pub fn step_in_stage(&self) -> u64 {
        self.state.step
    }

    /// Number of RainMix draws consumed.
    pub fn rainmix_draws(&self) -> u64 {
        self.state.draws
    }

    /// Position in the training rng stream.
    pub fn rng_word_pos(&self) -> u128 {
        self.state.rng.get_word_pos()
    }

    fn stage_done(&self) -> bool {
        let s = &self.state;
        let plateaued = s.plateau.patience > 0 && s.plateau.since_best >= s.plateau.patience;
        s.step >= stage_limit(&self.cfg, s.stage) || plateaued
    }

    /// Moves past finished stages. Returns false once training is over.
    fn advance(&mut self) -> bool {
        while self.stage_done() {
            if self.state.stage == 2 {
                return false;
            }
            self.state.stage = 2;
            self.state.step = 0;
            self.state.adam = AdamState::new(&self.model.store);
            self.state.plateau = Plateau::new(self.cfg.plateau_window, self.cfg.plateau_patience);
        }
        true
    }

    /// Draws one `(input, target)` training batch.
    fn sample_batch(&mut self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let patch = self.cfg.patch;
        let mut inputs = Vec::with_capacity(self.cfg.batch);
        let mut targets = Vec::with_capacity(self.cfg.batch);
        let rng = &mut self.state.rng;
        for _ in 0..self.cfg.batch {
            let pair = &self.data.train[rng.random_range(0..self.data.train.len())];
            let (_, _, h, w) = pair.rainy.dims4()?;
            let off = sample_offset(h, w, patch, rng);
            let rainy = crop_patch(&pair.rainy, off, patch)?;
            let clean = crop_patch(&pair.clean, off, patch)?;
            let Some(spec) = &self.cfg.rainmix else {
                inputs.push(rainy);
                targets.push(clean);
                continue;
            };
            let layer = &self.rain.layers[rng.random_range(0..self.rain.len())].data;
            let (_, _, lh, lw) = layer.dims4()?;
            let rain = crop_patch(layer, sample_offset(lh, lw, patch, rng), patch)?;
            let rain_draw = sample_draw(spec, rng)?;
            let rain = apply_draw(&rain, &rain_draw)?;
            let background = if rng.random_bool(0.5) { &rainy } else { &clean };
            let bg_draw = sample_draw(spec, rng)?;
            self.state.draws += 2;
            inputs.push(compose_rainy(&apply_draw(background, &bg_draw)?, &rain)?);
            targets.push(apply_draw(&clean, &bg_draw)?);
        }
        Ok((Tensor::stack(&inputs)?, Tensor::stack(&targets)?))
    }

    /// Runs one optimization step, or returns `None` when training is over.
    /// A non-finite loss or gradient leaves the model untouched.
    pub fn step(&mut self) -> Result<Option<LossRecord>> {
        if !self.advance() {
            return Ok(None);
        }
        let start = Instant::now();
        let (input, target) = self.sample_batch()?;
        let stage = self.state.stage;
        let loss_cfg = self.cfg.loss;
        let mut g = Graph::new(&self.model.store, Mode::Train, true);
        let x = g.input(input);
        let t = g.input(target);
        let loss = if stage == 1 {
            let (out, _) = self.model.forward_stage1(&mut g, x)?;
            l1_ssim_loss(&mut g.tape, out, t, &loss_cfg)?
        } else {
            let o = self.model.forward(&mut g, x)?;
            let s2 = o.stage2.expect("stage 2 runs only with a cascade");
            uc_loss(&mut g.tape, o.derained, o.stage1, s2, t, &loss_cfg)?
        };
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value} at stage {stage} step {}", self.state.step + 1)));
        }
        let grads = g.param_grads(loss)?;
        let stats = g.take_running_stats();
        drop(g);
        let adam = AdamConfig {
            lr: self.cfg.lr,
            ..AdamConfig::default()
        };
        adam_step(&mut self.model.store, &grads, &mut self.state.adam, &adam)?;
        Graph::commit_running_stats(stats, &mut self.model.store);
        self.state.step += 1;
        self.state.plateau.push(value);
        Ok(Some(LossRecord {
            stage,
            step: self.state.step,
            loss: value,
            lr: self.cfg.lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        }))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            seed: self.cfg.seed,
            resume: Some(self.state.clone()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.checkpoint().save(dir)
    }

    /// Trains to completion.
    ///
    /// With an output directory, loss records are appended to `loss.txt`
    /// and checkpoints are written to `stage1/` (end of stage 1),
    /// `final/`, and `latest/` every `checkpoint_every` steps. A numeric
    /// failure saves the pre-step state to `diagnostic/` before returning
    /// the error.
    pub fn run(&mut self, out: Option<&Path>, mut on_record: impl FnMut(&LossRecord)) -> Result<RunSummary> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOSS_FILE);
                let f: File = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((f, path))
            }
            None => None,
        };
        let mut summary = RunSummary {
            stage1_steps: 0,
            stage2_steps: 0,
            losses: Vec::new(),
        };
        loop {
            let rec = match self.step() {
                Ok(Some(rec)) => rec,
                Ok(None) => break,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = out {
                        self.write_diagnostic(&dir.join(DIAGNOSTIC_DIR), &e)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            match rec.stage {
                1 => summary.stage1_steps += 1,
                _ => summary.stage2_steps += 1,
            }
            if rec.step % self.cfg.log_every == 0 {
                if let Some((f, path)) = log.as_mut() {
                    writeln!(f, "{rec}").map_err(|e| Error::io(path.as_path(), e))?;
                }
                on_record(&rec);
            }
            summary.losses.push(rec);
            if let Some(dir) = out {
                if rec.stage == 1 && self.stage_done() {
                    self.save(&dir.join(STAGE1_DIR))?;
                }
                if self.cfg.checkpoint_every > 0 && rec.step % self.cfg.checkpoint_every == 0 {
                    self.save(&dir.join(LATEST_DIR))?;
                }
            }
        }
        if let Some(dir) = out {
            self.save(&dir.join(FINAL_DIR))?;
        }
        Ok(summary)
    }

    fn write_diagnostic(&self, dir: &Path, err: &Error) -> Result<()> {
        self.save(dir)?;
        let path: PathBuf = dir.join("error.txt");
        let text = format!(
            "error = {err}\nstage = {}\nstep = {}\nwindowed_loss = {:?}\n",
            self.state.stage,
            self.state.step,
            self.state.plateau.windowed_mean()
        );
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
