//! Building blocks shared by all variants and the forward-pass context.

use rand::Rng;

use super::params::{ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, Real, RunningStats, Tape, Tensor, Var};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, parameters tracked for gradients.
    Train,
    /// Running statistics, nothing tracked.
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch: RunningStats<T>,
    /// Values per channel behind `batch`.
    pub count: usize,
}

/// Per-pass state: the tape, the parameter leaves created so far, and the
/// running-stat updates to apply once the pass is done.
pub struct Forward<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    params: &'a ParamStore<T>,
    mode: Mode,
    leaves: Vec<Option<Var>>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a ParamStore<T>, mode: Mode) -> Self {
        Forward {
            tape,
            params,
            mode,
            leaves: vec![None; params.len()],
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Leaf for a parameter, created once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.index()] {
            return v;
        }
        let p = self.params.get(id);
        let v = match (self.mode, p.kind) {
            (Mode::Train, ParamKind::Weight) => self.tape.tagged_leaf(&p.tensor, id.index()),
            _ => {
                let t = &p.tensor;
                self.tape
                    .constant(t.shape().to_vec(), t.data().to_vec())
                    .expect("parameter shape")
            }
        };
        self.leaves[id.index()] = Some(v);
        v
    }

    pub fn finish(self) -> Vec<StatUpdate<T>> {
        self.stat_updates
    }
}

/// Convolution with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.conv_weight(format!("{name}.weight"), out_c, in_c, kernel, rng)?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), ParamKind::Weight, Tensor::zeros(vec![out_c]))?)
        } else {
            None
        };
        Ok(ConvLayer {
            weight,
            bias,
            kernel,
            padding: kernel / 2,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        let b = self.bias.map(|b| f.param(b));
        f.tape.conv2d(x, w, b, 1, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub scale: ParamId,
    pub shift: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNormLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNormLayer {
            scale: store.register(format!("{name}.scale"), ParamKind::Weight, Tensor::full(vec![channels], T::one()))?,
            shift: store.register(format!("{name}.shift"), ParamKind::Weight, Tensor::zeros(vec![channels]))?,
            running_mean: store.register(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(vec![channels]))?,
            running_var: store.register(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::full(vec![channels], T::one()),
            )?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let scale = f.param(self.scale);
        let shift = f.param(self.shift);
        let out = match f.mode {
            Mode::Train => f.tape.batch_norm(x, scale, shift, BatchNormMode::Train, BN_EPS)?,
            Mode::Eval => {
                let running = RunningStats {
                    mean: f.params.tensor(self.running_mean).data().to_vec(),
                    var: f.params.tensor(self.running_var).data().to_vec(),
                };
                f.tape.batch_norm(x, scale, shift, BatchNormMode::Eval(&running), BN_EPS)?
            }
        };
        if let Some(batch) = out.batch_stats {
            f.stat_updates.push(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                batch,
                count: out.count,
            });
        }
        Ok(out.out)
    }
}

/// `conv -> [batch norm] -> [relu]`. The convolution carries a bias only
/// when no normalisation follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub conv: ConvLayer,
    pub norm: Option<BatchNormLayer>,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        batch_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let conv = ConvLayer::new(store, &format!("{name}.conv"), in_c, out_c, kernel, !batch_norm, rng)?;
        let norm = if batch_norm {
            Some(BatchNormLayer::new(store, &format!("{name}.bn"), out_c)?)
        } else {
            None
        };
        Ok(ConvUnit { conv, norm })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var, relu: bool) -> Result<Var> {
        let mut y = self.conv.forward(f, x)?;
        if let Some(n) = &self.norm {
            y = n.forward(f, y)?;
        }
        Ok(if relu { f.tape.relu(y) } else { y })
    }
}

/// Identity-shortcut residual block: `relu(F(x) + x)` with
/// `F = conv -> norm -> relu -> conv -> norm`. Input and output widths are
/// equal, so the shortcut adds no parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub first: ConvUnit,
    pub second: ConvUnit,
    pub channels: usize,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        batch_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_c != out_c {
            return Err(Error::Config(format!(
                "{name}: identity shortcut needs equal channels, got {in_c} -> {out_c}"
            )));
        }
        Ok(ResidualBlock {
            first: ConvUnit::new(store, &format!("{name}.a"), in_c, out_c, 3, batch_norm, rng)?,
            second: ConvUnit::new(store, &format!("{name}.b"), out_c, out_c, 3, batch_norm, rng)?,
            channels: out_c,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.first.forward(f, x, true)?;
        let h = self.second.forward(f, h, false)?;
        let sum = f.tape.add(h, x)?;
        Ok(f.tape.relu(sum))
    }
}

/// The equal-width part of a stage: two plain conv units or one residual block.
#[derive(Clone, Debug, PartialEq)]
pub enum StackBody {
    Plain(ConvUnit, ConvUnit),
    Residual(ResidualBlock),
}

/// One stage's convolutions: a width-changing entry unit followed by the body.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub entry: ConvUnit,
    pub body: StackBody,
}

impl ConvStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        residual: bool,
        batch_norm: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let entry = ConvUnit::new(store, &format!("{name}.entry"), in_c, out_c, 3, batch_norm, rng)?;
        let body = if residual {
            StackBody::Residual(ResidualBlock::new(store, &format!("{name}.res"), out_c, out_c, batch_norm, rng)?)
        } else {
            StackBody::Plain(
                ConvUnit::new(store, &format!("{name}.stack.a"), out_c, out_c, 3, batch_norm, rng)?,
                ConvUnit::new(store, &format!("{name}.stack.b"), out_c, out_c, 3, batch_norm, rng)?,
            )
        };
        Ok(ConvStack { entry, body })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let h = self.entry.forward(f, x, true)?;
        match &self.body {
            StackBody::Plain(a, b) => {
                let h = a.forward(f, h, true)?;
                b.forward(f, h, true)
            }
            StackBody::Residual(block) => block.forward(f, h),
        }
    }
}

/// Additive attention gate over skip features.
///
/// `alpha = sigmoid(psi(relu(Wx x + Wg up(g))))`, one coefficient per pixel,
/// and the output is `alpha * x` broadcast over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGate {
    pub wx: ConvLayer,
    pub wg: ConvLayer,
    pub psi: ConvLayer,
}

pub struct GateOutput {
    pub gated: Var,
    pub alpha: Var,
}

impl AttentionGate {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        skip_c: usize,
        gating_c: usize,
        inter_c: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(AttentionGate {
            wx: ConvLayer::new(store, &format!("{name}.wx"), skip_c, inter_c, 1, false, rng)?,
            wg: ConvLayer::new(store, &format!("{name}.wg"), gating_c, inter_c, 1, true, rng)?,
            psi: ConvLayer::new(store, &format!("{name}.psi"), inter_c, 1, 1, true, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var, g: Var) -> Result<GateOutput> {
        let xs = f.tape.shape(x).to_vec();
        let gs = f.tape.shape(g).to_vec();
        if xs.len() != 4 || gs.len() != 4 || xs[0] != gs[0] {
            return Err(Error::shape("attention_gate", &xs, &gs));
        }
        let theta = self.wx.forward(f, x)?;
        let mut phi = self.wg.forward(f, g)?;
        if (gs[2] * 2, gs[3] * 2) == (xs[2], xs[3]) {
            // a 1x1 convolution commutes with nearest upsampling
            phi = f.tape.upsample_nearest_2x(phi)?;
        } else if (gs[2], gs[3]) != (xs[2], xs[3]) {
            return Err(Error::invalid_shape(
                "attention_gate",
                format!(
                    "gating resolution {}x{} cannot be matched to skip resolution {}x{} by one 2x upsample",
                    gs[2], gs[3], xs[2], xs[3]
                ),
            ));
        }
        let s = f.tape.add(theta, phi)?;
        let s = f.tape.relu(s);
        let logits = self.psi.forward(f, s)?;
        let alpha = f.tape.sigmoid(logits);
        let gated = f.tape.scale_channels(x, alpha)?;
        Ok(GateOutput { gated, alpha })
    }
}
