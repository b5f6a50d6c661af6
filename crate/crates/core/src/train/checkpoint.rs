//! Checkpoint directories: `manifest.txt` plus `params.bin`.
//!
//! The manifest is `key = value` lines followed by one line per blob entry:
//!
//! ```text
//! param phi1.block1.conv0.weight f32 8,3,3,3
//! adam.m phi1.block1.conv0.weight f32 8,3,3,3
//! ```
//!
//! `params.bin` holds the entries' values as little-endian `f32` in
//! manifest order. Optimizer, rng and stop-rule state are present only in
//! checkpoints written during training.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::{DerainModel, ModelConfig};
use crate::tensor::Tensor;

use super::adam::AdamState;
use super::plateau::Plateau;

pub const FORMAT: &str = "derain-checkpoint-1";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "params.bin";

/// Position within a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct ResumeState {
    /// 1 or 2.
    pub stage: u8,
    /// Steps completed in the current stage.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub adam: AdamState<f32>,
    pub plateau: Plateau,
    /// RainMix draws consumed so far.
    pub draws: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DerainModel<f32>,
    pub seed: u64,
    pub resume: Option<ResumeState>,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

fn f64_bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn push_tensor(blob: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut m = String::new();
        let mut entries = String::new();
        let mut blob = Vec::new();
        let _ = writeln!(m, "format = {FORMAT}");
        for (k, v) in self.model.config().to_pairs() {
            let _ = writeln!(m, "{k} = {v}");
        }
        let _ = writeln!(m, "seed = {}", self.seed);
        for e in self.model.store.entries() {
            let _ = writeln!(entries, "param {} f32 {}", e.name, shape_text(e.value.shape()));
            push_tensor(&mut blob, &e.value);
        }
        if let Some(r) = &self.resume {
            let _ = writeln!(m, "stage = {}", r.stage);
            let _ = writeln!(m, "step = {}", r.step);
            let _ = writeln!(m, "rng.seed = {}", hex(&r.rng.get_seed()));
            let _ = writeln!(m, "rng.stream = {}", r.rng.get_stream());
            let _ = writeln!(m, "rng.word_pos = {}", r.rng.get_word_pos());
            let _ = writeln!(m, "rainmix.draws = {}", r.draws);
            let _ = writeln!(m, "adam.t = {}", r.adam.t);
            let p = &r.plateau;
            let _ = writeln!(m, "plateau.window = {}", p.window);
            let _ = writeln!(m, "plateau.patience = {}", p.patience);
            let _ = writeln!(m, "plateau.best = {}", f64_bits(p.best));
            let _ = writeln!(m, "plateau.since_best = {}", p.since_best);
            let recent: Vec<String> = p.recent.iter().map(|&v| f64_bits(v)).collect();
            let _ = writeln!(m, "plateau.recent = {}", recent.join(","));
            for (e, mom) in self.model.store.entries().iter().zip(&r.adam.moments) {
                if let Some((mt, vt)) = mom {
                    let _ = writeln!(entries, "adam.m {} f32 {}", e.name, shape_text(mt.shape()));
                    push_tensor(&mut blob, mt);
                    let _ = writeln!(entries, "adam.v {} f32 {}", e.name, shape_text(vt.shape()));
                    push_tensor(&mut blob, vt);
                }
            }
        }
        let _ = writeln!(m, "blob.bytes = {}", blob.len());
        m.push_str(&entries);
        let bin = dir.join(BLOB_FILE);
        std::fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
        let man = dir.join(MANIFEST_FILE);
        std::fs::write(&man, m).map_err(|e| Error::io(&man, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let man = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
        let bin = dir.join(BLOB_FILE);
        let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        Manifest::parse(&text)?.build(&blob)
    }

    /// Loads and checks that the stored architecture is `expected`.
    pub fn load_expecting(dir: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(dir)?;
        let got = ckpt.model.config();
        if got != expected {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint {} holds {got:?}, expected {expected:?}",
                dir.display()
            )));
        }
        Ok(ckpt)
    }
}

struct Entry {
    kind: String,
    name: String,
    shape: Vec<usize>,
}

struct Manifest {
    keys: BTreeMap<String, String>,
    entries: Vec<Entry>,
}

fn integrity(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl Manifest {
    fn parse(text: &str) -> Result<Self> {
        let mut keys = BTreeMap::new();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if !matches!(parts[0], "param" | "adam.m" | "adam.v") {
                if let Some((k, v)) = line.split_once('=') {
                    keys.insert(k.trim().to_string(), v.trim().to_string());
                    continue;
                }
            }
            match parts.as_slice() {
                [kind @ ("param" | "adam.m" | "adam.v"), name, "f32", shape] => {
                    let shape = shape
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| integrity(format!("entry {name}: bad shape {shape:?}")))?;
                    entries.push(Entry {
                        kind: kind.to_string(),
                        name: name.to_string(),
                        shape,
                    });
                }
                _ => return Err(integrity(format!("manifest line {}: cannot parse {line:?}", i + 1))),
            }
        }
        Ok(Self { keys, entries })
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.keys
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| integrity(format!("manifest is missing {key}")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| integrity(format!("manifest {key} = {v:?} is not a number")))
    }

    fn bits(&self, key: &str, v: &str) -> Result<f64> {
        u64::from_str_radix(v, 16)
            .map(f64::from_bits)
            .map_err(|_| integrity(format!("manifest {key} has bad value {v:?}")))
    }

    fn model_config(&self) -> Result<ModelConfig> {
        let cfg_err = |k: &str, e: Error| integrity(format!("manifest {k}: {e}"));
        Ok(ModelConfig {
            phi1_depth: self.get("model.phi1_depth")?.parse().map_err(|e| cfg_err("model.phi1_depth", e))?,
            phi2_depth: self.get("model.phi2_depth")?.parse().map_err(|e| cfg_err("model.phi2_depth", e))?,
            width: self.get("model.width")?.parse().map_err(|e| cfg_err("model.width", e))?,
            cascade: self.get("model.cascade")?.parse().map_err(|e| cfg_err("model.cascade", e))?,
            scales: self.num("model.scales")?,
        })
    }

    fn build(self, blob: &[u8]) -> Result<Checkpoint> {
        let format = self.get("format")?;
        if format != FORMAT {
            return Err(integrity(format!("unsupported checkpoint format {format:?}")));
        }
        let declared: usize = self.num("blob.bytes")?;
        if declared != blob.len() {
            // name the first entry the blob cannot fully supply
            let mut offset = 0usize;
            for e in &self.entries {
                let end = offset + 4 * e.shape.iter().product::<usize>();
                if end > blob.len() {
                    return Err(integrity(format!(
                        "{} {} needs bytes {offset}..{end} but the blob holds {} (manifest declares {declared})",
                        e.kind,
                        e.name,
                        blob.len()
                    )));
                }
                offset = end;
            }
            return Err(integrity(format!(
                "blob holds {} bytes, manifest declares {declared}",
                blob.len()
            )));
        }

        let config = self.model_config()?;
        let seed: u64 = self.num("seed")?;
        let mut model = DerainModel::<f32>::new(config, seed)?;

        let mut offset = 0usize;
        let mut take = |e: &Entry| -> Result<Tensor<f32>> {
            let n: usize = e.shape.iter().product();
            let end = offset + 4 * n;
            let bytes = blob
                .get(offset..end)
                .ok_or_else(|| integrity(format!("{} {} runs past the end of the blob", e.kind, e.name)))?;
            offset = end;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(&e.shape, data)
        };

        let mut it = self.entries.iter().peekable();
        for slot in 0..model.store.len() {
            let id = model.store.ids().nth(slot).expect("in range");
            let want = &model.store.entry(id).name;
            let e = it
                .next()
                .filter(|e| e.kind == "param")
                .ok_or_else(|| integrity(format!("param {want} missing from manifest")))?;
            if &e.name != want || e.shape.as_slice() != model.store.value(id).shape() {
                return Err(integrity(format!(
                    "param {} {:?} does not match the architecture's {want} {:?}",
                    e.name,
                    e.shape,
                    model.store.value(id).shape()
                )));
            }
            let value = take(e)?;
            model.store.set(id, value)?;
        }

        let resume = if self.keys.contains_key("stage") {
            let mut adam = AdamState::new(&model.store);
            adam.t = self.num("adam.t")?;
            for id in model.store.ids().collect::<Vec<_>>() {
                let Some(slot) = adam.moments[id.index()].as_mut() else {
                    continue;
                };
                let name = &model.store.entry(id).name;
                for (kind, dst) in [("adam.m", &mut slot.0), ("adam.v", &mut slot.1)] {
                    let e = it
                        .next()
                        .filter(|e| e.kind == kind && &e.name == name && e.shape.as_slice() == dst.shape())
                        .ok_or_else(|| integrity(format!("{kind} {name} missing or out of order")))?;
                    *dst = take(e)?;
                }
            }
            let seed_bytes: [u8; 32] = unhex(self.get("rng.seed")?)
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| integrity("manifest rng.seed is not 32 hex bytes"))?;
            let mut rng = ChaCha8Rng::from_seed(seed_bytes);
            rng.set_stream(self.num("rng.stream")?);
            rng.set_word_pos(self.num("rng.word_pos")?);
            let recent_text = self.get("plateau.recent")?;
            let recent = recent_text
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| self.bits("plateau.recent", s))
                .collect::<Result<VecDeque<_>>>()?;
            let plateau = Plateau {
                window: self.num("plateau.window")?,
                patience: self.num("plateau.patience")?,
                recent,
                best: self.bits("plateau.best", self.get("plateau.best")?)?,
                since_best: self.num("plateau.since_best")?,
            };
            let stage: u8 = self.num("stage")?;
            if !(1..=2).contains(&stage) {
                return Err(integrity(format!("manifest stage = {stage}")));
            }
            Some(ResumeState {
                stage,
                step: self.num("step")?,
                rng,
                adam,
                plateau,
                draws: self.num("rainmix.draws")?,
            })
        } else {
            None
        };
        if let Some(extra) = it.next() {
            return Err(integrity(format!("unexpected entry {} {}", extra.kind, extra.name)));
        }
        Ok(Checkpoint { model, seed, resume })
    }
}
