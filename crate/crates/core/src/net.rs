//! Kernel-predicting UNets and the cascaded deraining model.
//!
//! Block layout (channel widths at width scale 1):
//!
//! | block | input      | resolution | width |
//! |-------|------------|------------|-------|
//! | 1     | image      | H          | 64    |
//! | 2     | pool(x1)   | H/2        | 128   |
//! | 3     | pool(x2)   | H/4        | 256   |
//! | 4     | pool(x3)   | H/8        | 512   |
//! | 5     | pool(x4)   | H/16       | 512   |
//! | 6     | up(x5)     | H/8        | 512   |
//! | 7     | up[x6,x4]  | H/4        | 256   |
//! | 8     | up[x7,x3]  | H/2        | 27    |
//! | head  | up[x8,x2]  | H          | 27 (1×1, linear) |
//!
//! Every 3×3 conv is followed by batch norm and ReLU; blocks repeat their
//! conv 3, 2 or 1 times for the 49-, 33- and 17-layer variants.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{param_err, shape_err, Error, Result};
use crate::params::{BnIds, Graph, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor, Var};

/// Kernel size of the predicted per-pixel filters.
pub const KERNEL_SIZE: usize = 3;
/// Color channels filtered by the model.
pub const IMAGE_CHANNELS: usize = 3;
/// Channels of the kernel field: `C·K²`.
pub const KERNEL_CHANNELS: usize = IMAGE_CHANNELS * KERNEL_SIZE * KERNEL_SIZE;
/// Spatial sizes must be multiples of this (four 2× poolings).
pub const SIZE_MULTIPLE: usize = 16;

const BASE_WIDTHS: [usize; 7] = [64, 128, 256, 512, 512, 512, 256];
const BLOCK8_WIDTH: usize = 27;
/// Scale applied to the He-uniform head initialization, so an untrained
/// network predicts kernels close to the center delta.
const HEAD_GAIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Depth {
    L49,
    L33,
    L17,
}

impl Depth {
    pub fn convs_per_block(self) -> usize {
        match self {
            Depth::L49 => 3,
            Depth::L33 => 2,
            Depth::L17 => 1,
        }
    }

    pub fn layers(self) -> usize {
        16 * self.convs_per_block() + 1
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.layers())
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "49" => Ok(Depth::L49),
            "33" => Ok(Depth::L33),
            "17" => Ok(Depth::L17),
            other => Err(Error::Config(format!("unknown depth {other:?} (expected 49, 33 or 17)"))),
        }
    }
}

/// Channel width multiplier, `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WidthScale {
    pub num: u32,
    pub den: u32,
}

impl WidthScale {
    pub const FULL: WidthScale = WidthScale { num: 1, den: 1 };
    pub const TINY: WidthScale = WidthScale { num: 1, den: 8 };

    pub fn apply(self, width: usize) -> usize {
        width * self.num as usize / self.den as usize
    }
}

impl fmt::Display for WidthScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for WidthScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid width scale {s:?} (expected e.g. 1/8)"));
        let (num, den) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => (s.trim().parse().map_err(|_| bad())?, 1),
        };
        if num == 0 || den == 0 {
            return Err(bad());
        }
        Ok(WidthScale { num, den })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NetConfig {
    pub depth: Depth,
    pub width: WidthScale,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl NetConfig {
    pub fn new(depth: Depth, width: WidthScale, in_channels: usize) -> Self {
        Self {
            depth,
            width,
            in_channels,
            out_channels: KERNEL_CHANNELS,
        }
    }

    /// The desk-scale network: 17-layer structure at width 1/8.
    pub fn tiny(in_channels: usize) -> Self {
        Self::new(Depth::L17, WidthScale::TINY, in_channels)
    }

    /// Output widths of blocks 1..=8.
    pub fn block_widths(&self) -> Result<[usize; 8]> {
        let mut out = [BLOCK8_WIDTH; 8];
        for (o, &base) in out.iter_mut().zip(BASE_WIDTHS.iter()) {
            *o = self.width.apply(base);
            if *o == 0 {
                return Err(Error::Config(format!(
                    "width scale {} leaves a block with zero channels",
                    self.width
                )));
            }
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("network needs at least one input and output channel".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvBn {
    weight: ParamId,
    bn: BnIds,
}

/// A kernel-predicting UNet whose parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct PredictiveNet {
    cfg: NetConfig,
    blocks: Vec<Vec<ConvBn>>,
    head_weight: ParamId,
    head_bias: ParamId,
}

fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

impl PredictiveNet {
    /// Registers all parameters under `prefix` and initializes them from `rng`.
    pub fn build<T: Real>(
        cfg: NetConfig,
        prefix: &str,
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let widths = cfg.block_widths()?;
        let block_inputs = [
            cfg.in_channels,
            widths[0],
            widths[1],
            widths[2],
            widths[3],
            widths[4],
            widths[5] + widths[3],
            widths[6] + widths[2],
        ];
        let mut blocks = Vec::with_capacity(8);
        for (b, (&cin, &cout)) in block_inputs.iter().zip(widths.iter()).enumerate() {
            let mut convs = Vec::with_capacity(cfg.depth.convs_per_block());
            for i in 0..cfg.depth.convs_per_block() {
                let fan = if i == 0 { cin } else { cout };
                let name = format!("{prefix}.block{}.conv{i}", b + 1);
                let weight = store.add(
                    format!("{name}.weight"),
                    he_uniform(&[cout, fan, 3, 3], fan * 9, 1.0, rng),
                    ParamKind::Trainable,
                );
                let bn = BnIds {
                    gamma: store.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], T::one()), ParamKind::Trainable),
                    beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]), ParamKind::Trainable),
                    running_mean: store.add(format!("{name}.bn.running_mean"), Tensor::zeros(&[cout]), ParamKind::Buffer),
                    running_var: store.add(
                        format!("{name}.bn.running_var"),
                        Tensor::full(&[cout], T::one()),
                        ParamKind::Buffer,
                    ),
                };
                convs.push(ConvBn { weight, bn });
            }
            blocks.push(convs);
        }
        let head_in = widths[7] + widths[1];
        let head_weight = store.add(
            format!("{prefix}.head.weight"),
            he_uniform(&[cfg.out_channels, head_in, 1, 1], head_in, HEAD_GAIN, rng),
            ParamKind::Trainable,
        );
        let k2 = KERNEL_SIZE * KERNEL_SIZE;
        let bias = if cfg.out_channels % k2 == 0 {
            Tensor::from_fn(&[cfg.out_channels], |i| if i % k2 == k2 / 2 { T::one() } else { T::zero() })
        } else {
            Tensor::zeros(&[cfg.out_channels])
        };
        let head_bias = store.add(format!("{prefix}.head.bias"), bias, ParamKind::Trainable);
        Ok(Self {
            cfg,
            blocks,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_weight, self.head_bias)
    }

    fn block<T: Real>(&self, g: &mut Graph<'_, T>, idx: usize, mut x: Var) -> Result<Var> {
        for conv in &self.blocks[idx] {
            let w = g.param(conv.weight);
            let y = g.tape.conv2d(x, w, None, 1, 1)?;
            let y = g.batch_norm(y, conv.bn)?;
            x = g.tape.relu(y);
        }
        Ok(x)
    }

    /// Predicts a `(batch, out_channels, H, W)` kernel field.
    pub fn predict_kernels<T: Real>(&self, g: &mut Graph<'_, T>, input: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(input).dims4()?;
        if c != self.cfg.in_channels {
            return Err(shape_err!(
                "network expects {} input channels, got {c}",
                self.cfg.in_channels
            ));
        }
        if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
            return Err(shape_err!(
                "input {h}x{w} is not a multiple of {SIZE_MULTIPLE} in both dimensions"
            ));
        }
        let x1 = self.block(g, 0, input)?;
        let p = g.tape.avg_pool2(x1)?;
        let x2 = self.block(g, 1, p)?;
        let p = g.tape.avg_pool2(x2)?;
        let x3 = self.block(g, 2, p)?;
        let p = g.tape.avg_pool2(x3)?;
        let x4 = self.block(g, 3, p)?;
        let p = g.tape.avg_pool2(x4)?;
        let x5 = self.block(g, 4, p)?;
        let u = g.tape.upsample_bilinear2(x5)?;
        let x6 = self.block(g, 5, u)?;
        let cat = g.tape.concat_channels(&[x6, x4])?;
        let u = g.tape.upsample_bilinear2(cat)?;
        let x7 = self.block(g, 6, u)?;
        let cat = g.tape.concat_channels(&[x7, x3])?;
        let u = g.tape.upsample_bilinear2(cat)?;
        let x8 = self.block(g, 7, u)?;
        let cat = g.tape.concat_channels(&[x8, x2])?;
        let u = g.tape.upsample_bilinear2(cat)?;
        let hw = g.param(self.head_weight);
        let hb = g.param(self.head_bias);
        g.tape.conv2d(u, hw, Some(hb), 1, 0)
    }
}

/// Builds a standalone network with its own parameter store.
pub fn build_predictive_net<T: Real>(cfg: NetConfig, seed: u64) -> Result<(PredictiveNet, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = PredictiveNet::build(cfg, "phi", &mut store, &mut rng)?;
    Ok((net, store))
}

/// How (and whether) a second predictive stage refines the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cascade {
    /// Single-stage predictive filtering.
    None,
    /// Second network sees only the first-stage output.
    Naive,
    /// Second network sees the first-stage output and the uncertainty map.
    Uncertainty,
}

impl fmt::Display for Cascade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cascade::None => "none",
            Cascade::Naive => "naive",
            Cascade::Uncertainty => "uc",
        })
    }
}

impl FromStr for Cascade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Cascade::None),
            "naive" => Ok(Cascade::Naive),
            "uc" => Ok(Cascade::Uncertainty),
            other => Err(Error::Config(format!("unknown cascade {other:?} (expected none, naive or uc)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub phi1_depth: Depth,
    pub phi2_depth: Depth,
    pub width: WidthScale,
    pub cascade: Cascade,
    pub scales: usize,
}

impl ModelConfig {
    /// 49-layer first stage, 17-layer uncertainty-aware second stage,
    /// four shared-weight dilations.
    pub fn final_design(width: WidthScale) -> Self {
        Self {
            phi1_depth: Depth::L49,
            phi2_depth: Depth::L17,
            width,
            cascade: Cascade::Uncertainty,
            scales: 4,
        }
    }

    pub fn phi1(&self) -> NetConfig {
        NetConfig::new(self.phi1_depth, self.width, IMAGE_CHANNELS)
    }

    pub fn phi2(&self) -> Option<NetConfig> {
        let inputs = match self.cascade {
            Cascade::None => return None,
            Cascade::Naive => IMAGE_CHANNELS,
            Cascade::Uncertainty => IMAGE_CHANNELS + 1,
        };
        Some(NetConfig::new(self.phi2_depth, self.width, inputs))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.scales) {
            return Err(param_err!("scales must be in 1..=4, got {}", self.scales));
        }
        self.phi1().block_widths()?;
        Ok(())
    }

    /// `key value` lines, used by checkpoint manifests.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("model.phi1_depth", self.phi1_depth.to_string()),
            ("model.phi2_depth", self.phi2_depth.to_string()),
            ("model.width", self.width.to_string()),
            ("model.cascade", self.cascade.to_string()),
            ("model.scales", self.scales.to_string()),
        ]
    }
}

/// Symbolic outputs of a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// Final prediction (`Î`).
    pub derained: Var,
    /// First-stage prediction (`Î1`).
    pub stage1: Var,
    /// Second-stage prediction (`Î2`).
    pub stage2: Option<Var>,
    /// Per-pixel kernel mean of the first stage (`M`).
    pub uncertainty: Option<Var>,
    /// First-stage kernel field.
    pub kernels: Var,
}

/// Concrete tensors of a forward pass in eval mode.
#[derive(Clone, Debug)]
pub struct Prediction<T> {
    pub derained: Tensor<T>,
    pub stage1: Tensor<T>,
    pub stage2: Option<Tensor<T>>,
    pub uncertainty: Option<Tensor<T>>,
}

#[derive(Clone, Copy, Debug)]
struct FusionIds {
    weight: ParamId,
    bias: ParamId,
}

/// The deraining model: first-stage network, optional second stage, the
/// per-stage multi-scale fusion convs and the cascade fusion conv.
#[derive(Clone, Debug)]
pub struct DerainModel<T> {
    config: ModelConfig,
    pub store: ParamStore<T>,
    phi1: PredictiveNet,
    phi2: Option<PredictiveNet>,
    ms1: Option<FusionIds>,
    ms2: Option<FusionIds>,
    fusion: Option<FusionIds>,
}

fn add_fusion<T: Real>(store: &mut ParamStore<T>, prefix: &str, inputs: usize) -> Result<FusionIds> {
    let init = crate::pfilt::FusionWeights::<T>::mean_init(inputs, IMAGE_CHANNELS)?;
    Ok(FusionIds {
        weight: store.add(format!("{prefix}.weight"), init.weight, ParamKind::Trainable),
        bias: store.add(format!("{prefix}.bias"), init.bias, ParamKind::Trainable),
    })
}

impl<T: Real> DerainModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let phi1 = PredictiveNet::build(config.phi1(), "phi1", &mut store, &mut rng)?;
        let ms1 = (config.scales > 1)
            .then(|| add_fusion(&mut store, "ms1", config.scales))
            .transpose()?;
        let (phi2, ms2, fusion) = match config.phi2() {
            Some(cfg2) => {
                let phi2 = PredictiveNet::build(cfg2, "phi2", &mut store, &mut rng)?;
                let ms2 = (config.scales > 1)
                    .then(|| add_fusion(&mut store, "ms2", config.scales))
                    .transpose()?;
                let fusion = add_fusion(&mut store, "fusion", 2)?;
                (Some(phi2), ms2, Some(fusion))
            }
            None => (None, None, None),
        };
        Ok(Self {
            config,
            store,
            phi1,
            phi2,
            ms1,
            ms2,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn phi1(&self) -> &PredictiveNet {
        &self.phi1
    }

    pub fn phi2(&self) -> Option<&PredictiveNet> {
        self.phi2.as_ref()
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> DerainModel<U> {
        DerainModel {
            config: self.config,
            store: self.store.cast(),
            phi1: self.phi1.clone(),
            phi2: self.phi2.clone(),
            ms1: self.ms1,
            ms2: self.ms2,
            fusion: self.fusion,
        }
    }

    fn filter_stage(
        &self,
        g: &mut Graph<'_, T>,
        image: Var,
        kernels: Var,
        ms: Option<FusionIds>,
    ) -> Result<Var> {
        let fusion = ms.map(|f| (g.param(f.weight), g.param(f.bias)));
        g.tape
            .multiscale_filter(image, kernels, KERNEL_SIZE, self.config.scales, fusion)
    }

    /// First stage only: `K = φ1(I)`, `Î1 = filter(I, K)`.
    pub fn forward_stage1(&self, g: &mut Graph<'_, T>, input: Var) -> Result<(Var, Var)> {
        let kernels = self.phi1.predict_kernels(g, input)?;
        let out = self.filter_stage(g, input, kernels, self.ms1)?;
        Ok((out, kernels))
    }

    /// Full forward pass through every configured stage.
    pub fn forward(&self, g: &mut Graph<'_, T>, input: Var) -> Result<Outputs> {
        let (stage1, kernels) = self.forward_stage1(g, input)?;
        let Some(phi2) = self.phi2.as_ref() else {
            return Ok(Outputs {
                derained: stage1,
                stage1,
                stage2: None,
                uncertainty: None,
                kernels,
            });
        };
        let (second_input, uncertainty) = match self.config.cascade {
            Cascade::Uncertainty => {
                let m = g.tape.channel_mean(kernels)?;
                (g.tape.concat_channels(&[stage1, m])?, Some(m))
            }
            _ => (stage1, None),
        };
        let kernels2 = phi2.predict_kernels(g, second_input)?;
        let stage2 = self.filter_stage(g, stage1, kernels2, self.ms2)?;
        let f = self.fusion.expect("cascade has a fusion layer");
        let (w, b) = (g.param(f.weight), g.param(f.bias));
        let derained = g.tape.fuse(&[stage1, stage2], w, b)?;
        Ok(Outputs {
            derained,
            stage1,
            stage2: Some(stage2),
            uncertainty,
            kernels,
        })
    }

    /// Eval-mode forward returning every intermediate image.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new(&self.store, Mode::Eval, false);
        let input = g.input(image.clone());
        let out = self.forward(&mut g, input)?;
        Ok(Prediction {
            derained: g.value(out.derained).clone(),
            stage1: g.value(out.stage1).clone(),
            stage2: out.stage2.map(|v| g.value(v).clone()),
            uncertainty: out.uncertainty.map(|v| g.value(v).clone()),
        })
    }

    /// Eval-mode first-stage kernel field.
    pub fn predict_kernels(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store, Mode::Eval, false);
        let input = g.input(image.clone());
        let k = self.phi1.predict_kernels(&mut g, input)?;
        Ok(g.value(k).clone())
    }

    /// Eval-mode derained image (unclamped).
    pub fn derain(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.predict(image)?.derained)
    }

    /// Sets every kernel head to emit center-delta kernels regardless of
    /// input, which makes each filtering stage an identity map.
    pub fn force_identity_kernels(&mut self) {
        for net in std::iter::once(&self.phi1).chain(self.phi2.as_ref()) {
            let (w, b) = net.head_ids();
            let k2 = KERNEL_SIZE * KERNEL_SIZE;
            self.store.value_mut(w).data_mut().fill(T::zero());
            for (i, v) in self.store.value_mut(b).data_mut().iter_mut().enumerate() {
                *v = if i % k2 == k2 / 2 { T::one() } else { T::zero() };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pfilt::KernelField;

    fn rand_image(seed: u64, shape: &[usize]) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn tiny_net_kernel_shape() {
        let (net, store) = build_predictive_net::<f32>(NetConfig::tiny(3), 0).unwrap();
        let mut g = Graph::new(&store, Mode::Eval, false);
        let x = g.input(rand_image(1, &[1, 3, 64, 64]));
        let k = net.predict_kernels(&mut g, x).unwrap();
        assert_eq!(g.value(k).shape(), &[1, 27, 64, 64]);
    }

    #[test]
    fn parameter_count_matches_layer_table() {
        // (input channels, output channels) of every 3×3 conv in the
        // 17-layer table, then the 1×1 head over [x8, x2].
        let convs = [
            (3, 64),
            (64, 128),
            (128, 256),
            (256, 512),
            (512, 512),
            (512, 512),
            (512 + 512, 256),
            (256 + 256, 27),
        ];
        let expected: usize = convs.iter().map(|(i, o)| i * o * 9 + 2 * o).sum::<usize>() + (27 + 128) * 27 + 27;
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        PredictiveNet::build(NetConfig::new(Depth::L17, WidthScale::FULL, 3), "phi", &mut store, &mut rng).unwrap();
        assert_eq!(store.trainable_scalars(), expected);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = build_predictive_net::<f32>(NetConfig::tiny(3), 42).unwrap();
        let (_, b) = build_predictive_net::<f32>(NetConfig::tiny(3), 42).unwrap();
        assert_eq!(a, b);
        let (_, c) = build_predictive_net::<f32>(NetConfig::tiny(3), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_width_is_a_config_error() {
        let cfg = NetConfig::new(Depth::L17, WidthScale { num: 1, den: 128 }, 3);
        assert!(matches!(build_predictive_net::<f32>(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn indivisible_input_names_the_multiple() {
        let (net, store) = build_predictive_net::<f32>(NetConfig::tiny(3), 0).unwrap();
        let mut g = Graph::new(&store, Mode::Eval, false);
        let x = g.input(Tensor::zeros(&[1, 3, 40, 64]));
        let err = net.predict_kernels(&mut g, x).unwrap_err();
        assert!(err.to_string().contains("multiple of 16"), "{err}");
    }

    #[test]
    fn kernels_vary_with_input() {
        let (net, store) = build_predictive_net::<f32>(NetConfig::tiny(3), 0).unwrap();
        let mut g = Graph::new(&store, Mode::Eval, false);
        let a = g.input(rand_image(1, &[1, 3, 32, 32]));
        let b = g.input(rand_image(2, &[1, 3, 32, 32]));
        let ka = net.predict_kernels(&mut g, a).unwrap();
        let kb = net.predict_kernels(&mut g, b).unwrap();
        assert_ne!(g.value(ka), g.value(kb));
    }

    #[test]
    fn identity_heads_reproduce_the_input_at_every_scale() {
        let img = rand_image(3, &[1, 3, 32, 32]);
        for scales in 1..=4 {
            for cascade in [Cascade::None, Cascade::Naive, Cascade::Uncertainty] {
                let cfg = ModelConfig {
                    phi1_depth: Depth::L17,
                    phi2_depth: Depth::L17,
                    width: WidthScale::TINY,
                    cascade,
                    scales,
                };
                let mut model = DerainModel::<f32>::new(cfg, 5).unwrap();
                model.force_identity_kernels();
                let p = model.predict(&img).unwrap();
                if scales == 1 {
                    assert_eq!(p.stage1, img, "{cascade}");
                }
                assert!(p.stage1.max_abs_diff(&img) < 1e-6, "scales {scales} {cascade}");
                if cascade == Cascade::Uncertainty {
                    let m = p.uncertainty.unwrap();
                    assert_eq!(m.shape(), &[1, 1, 32, 32]);
                    assert!(m.data().iter().all(|&v| v == 1.0 / 9.0));
                }
                assert!(p.derained.max_abs_diff(&img) < 1e-6);
            }
        }
    }

    #[test]
    fn cascade_output_shapes() {
        let img = rand_image(4, &[2, 3, 32, 48]);
        for cascade in [Cascade::Naive, Cascade::Uncertainty] {
            let cfg = ModelConfig {
                cascade,
                ..ModelConfig::final_design(WidthScale::TINY)
            };
            let model = DerainModel::<f32>::new(cfg, 0).unwrap();
            let p = model.predict(&img).unwrap();
            assert_eq!(p.derained.shape(), img.shape());
            assert_eq!(p.stage1.shape(), img.shape());
            assert_eq!(p.stage2.unwrap().shape(), img.shape());
            assert_eq!(p.uncertainty.is_some(), cascade == Cascade::Uncertainty);
            assert!(p.derained.all_finite());
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let img = rand_image(5, &[1, 3, 32, 32]);
        let a = DerainModel::<f32>::new(ModelConfig::final_design(WidthScale::TINY), 9).unwrap();
        let b = DerainModel::<f32>::new(ModelConfig::final_design(WidthScale::TINY), 9).unwrap();
        assert_eq!(a.derain(&img).unwrap(), b.derain(&img).unwrap());
    }

    #[test]
    fn stage1_equals_filtering_with_predicted_kernels() {
        let img = rand_image(6, &[1, 3, 32, 32]);
        let cfg = ModelConfig {
            scales: 1,
            cascade: Cascade::None,
            ..ModelConfig::final_design(WidthScale::TINY)
        };
        let model = DerainModel::<f32>::new(cfg, 1).unwrap();
        let k = KernelField::new(model.predict_kernels(&img).unwrap(), 3).unwrap();
        let direct = crate::pfilt::apply_spfilt(&img, &k).unwrap();
        assert_eq!(model.derain(&img).unwrap(), direct);
    }

    /// With 16×16 inputs the bottleneck is 1×1, so stacked batch-statistics
    /// layers hit exact ties on ReLU kinks; the 49-layer first stage is
    /// therefore checked with running statistics.
    #[test]
    fn cascade_loss_gradient_matches_finite_differences() {
        let tiny = ModelConfig {
            phi1_depth: Depth::L17,
            ..ModelConfig::final_design(WidthScale::TINY)
        };
        let checked = cascade_gradcheck(tiny, Mode::Train) + cascade_gradcheck(ModelConfig::final_design(WidthScale::TINY), Mode::Eval);
        assert!(checked >= 10);
    }

    fn cascade_gradcheck(cfg: ModelConfig, mode: Mode) -> usize {
        use crate::metrics::{uc_loss, LossConfig};
        use crate::tensor::finite_difference_check;

        let model = DerainModel::<f64>::new(cfg, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let input: Tensor<f64> = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
        let target: Tensor<f64> = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
        let names = [
            "phi1.block1.conv0.weight",
            "phi1.block5.conv0.bn.gamma",
            "phi1.head.weight",
            "phi1.head.bias",
            "ms1.weight",
            "phi2.block1.conv0.weight",
            "phi2.block8.conv0.bn.beta",
            "phi2.head.weight",
            "ms2.bias",
            "fusion.weight",
        ];
        let mut checked = 0;
        for name in names {
            let id = model.store.find(name).unwrap_or_else(|| panic!("{name}"));
            let (store, input, target) = (&model.store, &input, &target);
            let report = finite_difference_check(
                |tape, v| {
                    let mut g = Graph::new(store, mode, true);
                    g.tape = std::mem::take(tape);
                    g.bind(id, v);
                    let x = g.input(input.clone());
                    let t = g.input(target.clone());
                    let out = model.forward(&mut g, x)?;
                    let loss = uc_loss(
                        &mut g.tape,
                        out.derained,
                        out.stage1,
                        out.stage2.unwrap(),
                        t,
                        &LossConfig::default(),
                    );
                    *tape = std::mem::take(&mut g.tape);
                    loss
                },
                model.store.value(id),
                1e-6,
                2,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-3, "{name} ({mode:?}): {report:?}");
            checked += report.coords_checked;
        }
        checked
    }
}
