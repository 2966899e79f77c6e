//! SegNet-family encoder/decoder networks.
//!
//! Four variants form a ladder:
//!
//! | label | skip | residual | attention |
//! |-------|------|----------|-----------|
//! | `m1`  |      |          |           |
//! | `m2`  | x    |          |           |
//! | `m3`  | x    | x        |           |
//! | `m4`  | x    | x        | x         |
//!
//! Without skip connections the decoder upsamples by scattering values back
//! to the encoder's max-pool positions. With skip connections it upsamples
//! by nearest-neighbour doubling plus a convolution, concatenates the
//! same-resolution encoder output (optionally attention-gated), and reduces
//! the channel count with a 1x1 convolution. Residual variants replace each
//! stage's equal-width convolution pair with an identity-shortcut block.
//! There are no fully connected layers anywhere.

pub mod blocks;
pub mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{PoolIndices, Real, Tape, Tensor, Var};
pub use blocks::{
    AttentionGate, BatchNormLayer, ConvLayer, ConvStack, ConvUnit, Forward, GateOutput, Mode,
    ResidualBlock, StackBody, StatUpdate,
};
pub use params::{Param, ParamId, ParamKind, ParamStore};

/// Default per-stage channel widths before `width_factor` scaling.
pub const DEFAULT_STAGE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];

/// Probability threshold used to turn network output into a mask.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VariantFlags {
    pub skip: bool,
    pub residual: bool,
    pub attention: bool,
}

impl VariantFlags {
    pub const M1: VariantFlags = VariantFlags::new(false, false, false);
    pub const M2: VariantFlags = VariantFlags::new(true, false, false);
    pub const M3: VariantFlags = VariantFlags::new(true, true, false);
    pub const M4: VariantFlags = VariantFlags::new(true, true, true);
    pub const ALL: [VariantFlags; 4] = [Self::M1, Self::M2, Self::M3, Self::M4];

    pub const fn new(skip: bool, residual: bool, attention: bool) -> Self {
        VariantFlags {
            skip,
            residual,
            attention,
        }
    }

    /// Only the four ladder settings are accepted; attention requires skip.
    pub fn validate(&self) -> Result<()> {
        if Self::ALL.contains(self) {
            Ok(())
        } else if self.attention && !self.skip {
            Err(Error::Config(
                "attention gates operate on skip features; enable skip connections".into(),
            ))
        } else {
            Err(Error::Config(format!(
                "flags {self:?} do not match any of the variants m1..m4"
            )))
        }
    }

    pub fn label(&self) -> &'static str {
        match (self.skip, self.residual, self.attention) {
            (false, false, false) => "m1",
            (true, false, false) => "m2",
            (true, true, false) => "m3",
            (true, true, true) => "m4",
            _ => "custom",
        }
    }
}

impl fmt::Display for VariantFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for VariantFlags {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(Self::M1),
            "m2" => Ok(Self::M2),
            "m3" => Ok(Self::M3),
            "m4" => Ok(Self::M4),
            other => Err(Error::InvalidArgument(format!("unknown variant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub input_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub depth: usize,
    /// Unscaled widths, one per stage.
    pub stage_widths: Vec<usize>,
    pub width_factor: f64,
    pub use_batch_norm: bool,
    /// Attention intermediate width is `max(1, skip_width / gate_reduction)`.
    pub gate_reduction: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_channels: 3,
            input_h: 192,
            input_w: 256,
            depth: 5,
            stage_widths: DEFAULT_STAGE_WIDTHS.to_vec(),
            width_factor: 1.0,
            use_batch_norm: true,
            gate_reduction: 2,
        }
    }
}

impl ArchConfig {
    /// Reduced configuration using the first `depth` default widths.
    pub fn desk(input_h: usize, input_w: usize, depth: usize, width_factor: f64) -> Self {
        ArchConfig {
            input_h,
            input_w,
            depth,
            stage_widths: DEFAULT_STAGE_WIDTHS.iter().copied().take(depth).collect(),
            width_factor,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.stage_widths.len() != self.depth {
            return Err(Error::Config(format!(
                "{} stage widths for depth {}",
                self.stage_widths.len(),
                self.depth
            )));
        }
        if self.stage_widths.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if !(self.width_factor > 0.0 && self.width_factor.is_finite()) {
            return Err(Error::Config(format!("width_factor {} must be positive", self.width_factor)));
        }
        if self.input_channels == 0 || self.gate_reduction == 0 {
            return Err(Error::Config("input_channels and gate_reduction must be positive".into()));
        }
        let step = 1usize << self.depth;
        if self.input_h == 0 || self.input_w == 0 || !self.input_h.is_multiple_of(step) || !self.input_w.is_multiple_of(step) {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by 2^{} = {step}",
                self.input_h, self.input_w, self.depth
            )));
        }
        Ok(())
    }

    /// Channel widths after applying `width_factor`.
    pub fn widths(&self) -> Vec<usize> {
        self.stage_widths
            .iter()
            .map(|&w| ((w as f64 * self.width_factor).round() as usize).max(1))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStage {
    pub stack: ConvStack,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Upsampling {
    /// Sparse unpooling with the mirrored encoder's indices.
    Unpool,
    Skip {
        up: ConvUnit,
        gate: Option<AttentionGate>,
        reduce: ConvUnit,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStage {
    /// Encoder stage (0-based) whose resolution this stage restores.
    pub mirrors: usize,
    pub upsampling: Upsampling,
    pub stack: ConvStack,
}

/// Layer kinds present in a model, for structural assertions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv { kernel: usize },
    BatchNorm,
    MaxPool,
    MaxUnpool,
    UpsampleNearest,
    Concat,
    AttentionGate,
    ResidualAdd,
    Sigmoid,
}

/// Feature maps recorded during a forward pass with capture enabled.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Captures<T> {
    /// `(label, [N, C, H, W])`, encoder blocks first, then decoder blocks.
    pub blocks: Vec<(String, Tensor<T>)>,
    /// `(label, [N, 1, H, W])` attention coefficients per gated stage.
    pub attention: Vec<(String, Tensor<T>)>,
}

pub struct ForwardOutput<T> {
    pub probs: Var,
    pub captures: Option<Captures<T>>,
    pub stat_updates: Vec<StatUpdate<T>>,
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// `[N, 1, H, W]` foreground probabilities.
    pub probs: Tensor<T>,
    pub captures: Option<Captures<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ArchConfig,
    pub flags: VariantFlags,
    pub params: ParamStore<T>,
    pub encoder: Vec<EncoderStage>,
    pub decoder: Vec<DecoderStage>,
    pub head: ConvLayer,
}

pub fn build_model<T: Real>(config: &ArchConfig, flags: VariantFlags, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    flags.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let widths = config.widths();
    let bn = config.use_batch_norm;

    let mut encoder = Vec::with_capacity(config.depth);
    let mut in_c = config.input_channels;
    for (i, &w) in widths.iter().enumerate() {
        let stack = ConvStack::new(&mut store, &format!("enc{}", i + 1), in_c, w, flags.residual, bn, &mut rng)?;
        encoder.push(EncoderStage { stack });
        in_c = w;
    }

    let mut decoder = Vec::with_capacity(config.depth);
    for (k, mirrors) in (0..config.depth).rev().enumerate() {
        let name = format!("dec{}", k + 1);
        let w = widths[mirrors];
        let out_c = if mirrors == 0 { widths[0] } else { widths[mirrors - 1] };
        let upsampling = if flags.skip {
            let up = ConvUnit::new(&mut store, &format!("{name}.up"), w, w, 3, bn, &mut rng)?;
            let gate = if flags.attention {
                let inter = (w / config.gate_reduction).max(1);
                Some(AttentionGate::new(&mut store, &format!("{name}.gate"), w, w, inter, &mut rng)?)
            } else {
                None
            };
            let reduce = ConvUnit::new(&mut store, &format!("{name}.reduce"), 2 * w, w, 1, bn, &mut rng)?;
            Upsampling::Skip { up, gate, reduce }
        } else {
            Upsampling::Unpool
        };
        let stack = ConvStack::new(&mut store, &name, w, out_c, flags.residual, bn, &mut rng)?;
        decoder.push(DecoderStage {
            mirrors,
            upsampling,
            stack,
        });
    }
    let head = ConvLayer::new(&mut store, "head", widths[0], 1, 1, true, &mut rng)?;
    Ok(Model {
        config: config.clone(),
        flags,
        params: store,
        encoder,
        decoder,
        head,
    })
}

impl<T: Real> Model<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.weight_count()
    }

    /// Records the network on `tape`. `batch` must be `[N, C, H, W]` with the
    /// configured channel count and spatial size.
    pub fn forward(&self, tape: &mut Tape<T>, batch: Var, mode: Mode, capture: bool) -> Result<ForwardOutput<T>> {
        let shape = tape.shape(batch).to_vec();
        let cfg = &self.config;
        if shape.len() != 4 || shape[1] != cfg.input_channels || shape[2] != cfg.input_h || shape[3] != cfg.input_w {
            return Err(Error::shape(
                "model_forward",
                &shape,
                &[shape.first().copied().unwrap_or(0), cfg.input_channels, cfg.input_h, cfg.input_w],
            ));
        }
        let mut f = Forward::new(tape, &self.params, mode);
        let mut captures = capture.then(Captures::default);

        let mut skips: Vec<Var> = Vec::with_capacity(cfg.depth);
        let mut indices: Vec<PoolIndices> = Vec::with_capacity(cfg.depth);
        let mut x = batch;
        for (i, stage) in self.encoder.iter().enumerate() {
            let out = stage.stack.forward(&mut f, x)?;
            if let Some(c) = captures.as_mut() {
                c.blocks.push((format!("Convolutional block {}", i + 1), f.tape.tensor(out)));
            }
            let (pooled, idx) = f.tape.max_pool_2x2(out)?;
            skips.push(out);
            indices.push(idx);
            x = pooled;
        }

        for (k, stage) in self.decoder.iter().enumerate() {
            let j = stage.mirrors;
            let merged = match &stage.upsampling {
                Upsampling::Unpool => {
                    let (h, w) = indices[j].input_hw;
                    f.tape.max_unpool_2x2(x, &indices[j], h, w)?
                }
                Upsampling::Skip { up, gate, reduce } => {
                    let upsampled = f.tape.upsample_nearest_2x(x)?;
                    let upsampled = up.forward(&mut f, upsampled, true)?;
                    let mut skip = skips[j];
                    if let Some(gate) = gate {
                        let g = gate.forward(&mut f, skip, x)?;
                        if let Some(c) = captures.as_mut() {
                            c.attention.push((format!("Attention gate {}", k + 1), f.tape.tensor(g.alpha)));
                        }
                        skip = g.gated;
                    }
                    let cat = f.tape.concat_channels(upsampled, skip)?;
                    reduce.forward(&mut f, cat, true)?
                }
            };
            x = stage.stack.forward(&mut f, merged)?;
            if let Some(c) = captures.as_mut() {
                c.blocks.push((format!("Deconvolutional block {}", k + 1), f.tape.tensor(x)));
            }
        }
        let logits = self.head.forward(&mut f, x)?;
        let probs = f.tape.sigmoid(logits);
        Ok(ForwardOutput {
            probs,
            captures,
            stat_updates: f.finish(),
        })
    }

    /// Inference with running statistics.
    pub fn predict(&self, batch: &Tensor<T>, capture: bool) -> Result<Prediction<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(&batch.clone().with_requires_grad(false));
        let out = self.forward(&mut tape, x, Mode::Eval, capture)?;
        Ok(Prediction {
            probs: tape.tensor(out.probs),
            captures: out.captures,
        })
    }

    /// Blends observed batch statistics into the running buffers.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        let m = T::of_f64(blocks::BN_MOMENTUM);
        let keep = T::one() - m;
        for u in updates {
            for (id, batch) in [(u.running_mean, &u.batch.mean), (u.running_var, &u.batch.var)] {
                let t = self.params.tensor_mut(id);
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * *b;
                }
            }
        }
    }

    /// Whether each decoder stage (execution order) consumes pooling indices.
    pub fn decoder_uses_pool_indices(&self) -> Vec<bool> {
        self.decoder
            .iter()
            .map(|d| matches!(d.upsampling, Upsampling::Unpool))
            .collect()
    }

    /// Flat list of layer kinds in execution order.
    pub fn layer_registry(&self) -> Vec<LayerKind> {
        let mut out = Vec::new();
        let unit = |u: &ConvUnit, out: &mut Vec<LayerKind>| {
            out.push(LayerKind::Conv { kernel: u.conv.kernel });
            if u.norm.is_some() {
                out.push(LayerKind::BatchNorm);
            }
        };
        let stack = |s: &ConvStack, out: &mut Vec<LayerKind>| {
            unit(&s.entry, out);
            match &s.body {
                StackBody::Plain(a, b) => {
                    unit(a, out);
                    unit(b, out);
                }
                StackBody::Residual(r) => {
                    unit(&r.first, out);
                    unit(&r.second, out);
                    out.push(LayerKind::ResidualAdd);
                }
            }
        };
        for e in &self.encoder {
            stack(&e.stack, &mut out);
            out.push(LayerKind::MaxPool);
        }
        for d in &self.decoder {
            match &d.upsampling {
                Upsampling::Unpool => out.push(LayerKind::MaxUnpool),
                Upsampling::Skip { up, gate, reduce } => {
                    out.push(LayerKind::UpsampleNearest);
                    unit(up, &mut out);
                    if gate.is_some() {
                        out.push(LayerKind::AttentionGate);
                    }
                    out.push(LayerKind::Concat);
                    unit(reduce, &mut out);
                }
            }
            stack(&d.stack, &mut out);
        }
        out.push(LayerKind::Conv { kernel: self.head.kernel });
        out.push(LayerKind::Sigmoid);
        out
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            flags: self.flags,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
        }
    }
}
