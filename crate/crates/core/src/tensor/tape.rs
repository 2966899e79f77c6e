use super::kernels::{self, ConvGeom};
use super::{PoolIndices, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

enum Op<T> {
    Leaf {
        tag: Option<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        input: Var,
        positions: Vec<usize>,
        in_plane: usize,
        out_plane: usize,
    },
    MaxUnpool {
        input: Var,
        positions: Vec<usize>,
        in_plane: usize,
        out_plane: usize,
    },
    Upsample2x {
        input: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ScaleChannels {
        x: Var,
        gate: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    FocalLoss {
        probs: Var,
        target: Vec<bool>,
        alpha: Option<f64>,
        gamma: f64,
    },
    Sum(Var),
    Mean(Var),
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub enum BatchNormMode<'a, T> {
    /// Normalise with batch statistics.
    Train,
    /// Normalise with stored running statistics.
    Eval(&'a RunningStats<T>),
}

pub struct BatchNormOutput<T> {
    pub out: Var,
    /// Batch mean and unbiased variance, present in training mode.
    pub batch_stats: Option<RunningStats<T>>,
    /// Values per channel that the batch statistics were computed from.
    pub count: usize,
}

/// Records operations for a single forward pass; [`Tape::backward`]
/// replays them in reverse.
///
/// Nodes only ever reference earlier nodes, so insertion order is a
/// topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf; it receives a gradient iff the tensor requires one.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf { tag: None },
        )
    }

    /// Records a leaf carrying an external tag (e.g. a parameter slot) so
    /// its gradient can be routed back after [`Tape::backward`].
    pub fn tagged_leaf(&mut self, t: &Tensor<T>, tag: usize) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf { tag: Some(tag) },
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, value)?;
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape")
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<[usize; 4]> {
        match self.shape(v)[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::invalid_shape(
                op,
                format!("expected a 4-D tensor, got {s:?}"),
            )),
        }
    }

    /// Cross-correlation of `input [N,C,H,W]` with `weight [O,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "conv2d")?;
        let [o, wc, kh, kw] = self.dims4(weight, "conv2d")?;
        if wc != c {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(weight)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[o]));
            }
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let extent = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::invalid_shape(
                    "conv2d",
                    format!(
                        "output extent ({size} + 2*{padding} - {k}) / {stride} + 1 is not a positive integer"
                    ),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            padding,
            oh: extent(h, kh)?,
            ow: extent(w, kw)?,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            vec![n, o, geom.oh, geom.ow],
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn max_pool_2x2(&mut self, input: Var) -> Result<(Var, PoolIndices)> {
        let [n, c, h, w] = self.dims4(input, "max_pool_2x2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid_shape(
                "max_pool_2x2",
                format!("spatial extent {h}x{w} is odd; pad the input to even height and width"),
            ));
        }
        let (out, positions) = kernels::max_pool_2x2(self.value(input), n * c, h, w);
        let indices = PoolIndices {
            shape: vec![n, c, h / 2, w / 2],
            input_hw: (h, w),
            positions: positions.clone(),
        };
        let rg = self.rg(input);
        let v = self.push(
            indices.shape.clone(),
            out,
            rg,
            Op::MaxPool {
                input,
                positions,
                in_plane: h * w,
                out_plane: (h / 2) * (w / 2),
            },
        );
        Ok((v, indices))
    }

    /// Scatters each input value to its recorded argmax position; zeros elsewhere.
    pub fn max_unpool_2x2(
        &mut self,
        input: Var,
        indices: &PoolIndices,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "max_unpool_2x2")?;
        if indices.shape != [n, c, h, w] {
            return Err(Error::shape("max_unpool_2x2", self.shape(input), &indices.shape));
        }
        if out_h != 2 * h || out_w != 2 * w || indices.input_hw != (out_h, out_w) {
            return Err(Error::invalid_shape(
                "max_unpool_2x2",
                format!("output {out_h}x{out_w} must be twice the input {h}x{w}"),
            ));
        }
        indices.validate()?;
        let in_plane = h * w;
        let out_plane = out_h * out_w;
        let mut out = vec![T::zero(); n * c * out_plane];
        let src = self.value(input);
        for p in 0..n * c {
            for i in 0..in_plane {
                out[p * out_plane + indices.positions[p * in_plane + i]] = src[p * in_plane + i];
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            vec![n, c, out_h, out_w],
            out,
            rg,
            Op::MaxUnpool {
                input,
                positions: indices.positions.clone(),
                in_plane,
                out_plane,
            },
        ))
    }

    pub fn upsample_nearest_2x(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(input, "upsample_nearest_2x")?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.value(input);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(p * oh + y) * ow + x] = src[(p * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::Upsample2x { input }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, rg, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, rg, op))
    }

    /// Multiplies `x [N,C,H,W]` by a single-channel map `gate [N,1,H,W]`,
    /// broadcast over channels.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4(x, "scale_channels")?;
        if self.shape(gate) != [n, 1, h, w] {
            return Err(Error::shape("scale_channels", self.shape(x), self.shape(gate)));
        }
        let plane = h * w;
        let xv = self.value(x);
        let gv = self.value(gate);
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            let g = &gv[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in 0..plane {
                    out[off + i] = xv[off + i] * g[i];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(vec![n, c, h, w], out, rg, Op::ScaleChannels { x, gate }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.dims4(a, "concat_channels")?;
        let [nb, cb, hb, wb] = self.dims4(b, "concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", self.shape(a), self.shape(b)));
        }
        let plane = h * w;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&bv[i * cb * plane..(i + 1) * cb * plane]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, ca + cb, h, w], out, rg, Op::Concat { a, b }))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<BatchNormOutput<T>> {
        let [n, c, h, w] = self.dims4(input, "batch_norm")?;
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape("batch_norm", self.shape(input), self.shape(scale)));
        }
        let plane = h * w;
        let count = n * plane;
        let x = self.value(input);
        let (mean, var_biased, batch_stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s += x[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        ss += x[off..off + plane]
                            .iter()
                            .map(|v| (v.as_f64() - m).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let unbiased = if count > 1 {
                    var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect()
                } else {
                    var.clone()
                };
                let stats = RunningStats {
                    mean: mean.iter().map(|&v| T::of_f64(v)).collect(),
                    var: unbiased.into_iter().map(T::of_f64).collect::<Vec<_>>(),
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval(running) => {
                if running.mean.len() != c || running.var.len() != c {
                    return Err(Error::shape("batch_norm running stats", &[c], &[running.mean.len()]));
                }
                (
                    running.mean.iter().map(|v| v.as_f64()).collect(),
                    running.var.iter().map(|v| v.as_f64()).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<T> = var_biased
            .iter()
            .map(|v| T::of_f64(1.0 / (v.max(0.0) + eps).sqrt()))
            .collect();
        let (sc, sh) = (self.value(scale), self.value(shift));
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let m = T::of_f64(mean[ch]);
                for i in off..off + plane {
                    let xh = (x[i] - m) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = xh * sc[ch] + sh[ch];
                }
            }
        }
        let training = batch_stats.is_some();
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        let out = self.push(
            vec![n, c, h, w],
            out,
            rg,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                training,
            },
        );
        Ok(BatchNormOutput {
            out,
            batch_stats,
            count,
        })
    }

    /// Mean focal loss over all pixels of `probs` against a binary target.
    ///
    /// `alpha` weights the foreground class (background gets `1 - alpha`);
    /// `None` disables class weighting.
    pub fn focal_loss(
        &mut self,
        probs: Var,
        target: &[bool],
        alpha: Option<f64>,
        gamma: f64,
    ) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != target.len() {
            return Err(Error::shape("focal_loss", self.shape(probs), &[target.len()]));
        }
        let total: f64 = p
            .iter()
            .zip(target)
            .map(|(&p, &t)| focal_term(p.as_f64(), t, alpha, gamma).0)
            .sum();
        let loss = total / p.len() as f64;
        let rg = self.rg(probs);
        Ok(self.push(
            vec![1],
            vec![T::of_f64(loss)],
            rg,
            Op::FocalLoss {
                probs,
                target: target.to_vec(),
                alpha,
                gamma,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v.as_f64()).sum::<f64>();
        let rg = self.rg(x);
        self.push(vec![1], vec![T::of_f64(s)], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().map(|v| v.as_f64()).sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![1], vec![T::of_f64(s)], rg, Op::Mean(x))
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
            // Keep interior gradients available for inspection.
            grads[idx] = Some(gout);
        }
        let tags = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { tag: Some(t) } if n.requires_grad => Some((t, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, tags })
    }

    fn backward_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.rg(v) {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(g);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let x = self.value(*input);
                let wv = self.value(*weight);
                let mut gi = self.rg(*input).then(|| vec![T::zero(); x.len()]);
                let mut gw = self.rg(*weight).then(|| vec![T::zero(); wv.len()]);
                let mut gb = bias
                    .filter(|b| self.rg(*b))
                    .map(|_| vec![T::zero(); geom.o]);
                kernels::conv2d_backward(
                    geom,
                    x,
                    wv,
                    gout,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    acc(*input, &mut |g| add_into(g, &gi));
                }
                if let Some(gw) = gw {
                    acc(*weight, &mut |g| add_into(g, &gw));
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    acc(*b, &mut |g| add_into(g, &gb));
                }
            }
            Op::MaxPool {
                input,
                positions,
                in_plane,
                out_plane,
            } => acc(*input, &mut |g| {
                for (i, (&pos, &go)) in positions.iter().zip(gout).enumerate() {
                    g[(i / out_plane) * in_plane + pos] += go;
                }
            }),
            Op::MaxUnpool {
                input,
                positions,
                in_plane,
                out_plane,
            } => acc(*input, &mut |g| {
                for (i, &pos) in positions.iter().enumerate() {
                    g[i] += gout[(i / in_plane) * out_plane + pos];
                }
            }),
            Op::Upsample2x { input } => {
                let [n, c, h, w] = self.dims4(*input, "").expect("4-D");
                let ow = 2 * w;
                acc(*input, &mut |g| {
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for x in 0..ow {
                                g[(p * h + y / 2) * w + x / 2] += gout[(p * 2 * h + y) * ow + x];
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if xv[i] > T::zero() {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::ScaleChannels { x, gate } => {
                let [n, c, h, w] = node.shape[..] else {
                    unreachable!()
                };
                let plane = h * w;
                let (xv, gv) = (self.value(*x), self.value(*gate));
                acc(*x, &mut |g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            for i in 0..plane {
                                g[off + i] += gout[off + i] * gv[b * plane + i];
                            }
                        }
                    }
                });
                acc(*gate, &mut |g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            for i in 0..plane {
                                g[b * plane + i] += gout[off + i] * xv[off + i];
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.dims4(*a, "").expect("4-D");
                let cb = self.shape(*b)[1];
                let plane = h * w;
                let ct = ca + cb;
                acc(*a, &mut |g| {
                    for i in 0..n {
                        add_into(
                            &mut g[i * ca * plane..(i + 1) * ca * plane],
                            &gout[i * ct * plane..(i * ct + ca) * plane],
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..n {
                        add_into(
                            &mut g[i * cb * plane..(i + 1) * cb * plane],
                            &gout[(i * ct + ca) * plane..(i + 1) * ct * plane],
                        );
                    }
                });
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                training,
            } => {
                let [n, c, h, w] = node.shape[..] else {
                    unreachable!()
                };
                let plane = h * w;
                let count = T::of_f64((n * plane) as f64);
                let sc = self.value(*scale);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            sum_dy[ch] += gout[i];
                            sum_dy_xhat[ch] += gout[i] * xhat[i];
                        }
                    }
                }
                acc(*scale, &mut |g| add_into(g, &sum_dy_xhat));
                acc(*shift, &mut |g| add_into(g, &sum_dy));
                acc(*input, &mut |g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = sc[ch] * inv_std[ch];
                            for i in off..off + plane {
                                g[i] += if *training {
                                    k * (gout[i]
                                        - (sum_dy[ch] + xhat[i] * sum_dy_xhat[ch]) / count)
                                } else {
                                    k * gout[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::FocalLoss {
                probs,
                target,
                alpha,
                gamma,
            } => {
                let p = self.value(*probs);
                let scale = gout[0].as_f64() / p.len() as f64;
                acc(*probs, &mut |g| {
                    for i in 0..g.len() {
                        let d = focal_term(p[i].as_f64(), target[i], *alpha, *gamma).1;
                        g[i] += T::of_f64(d * scale);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += gout[0])),
            Op::Mean(x) => {
                let k = gout[0] / T::of_f64(self.value(*x).len() as f64);
                acc(*x, &mut |g| g.iter_mut().for_each(|v| *v += k));
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    tags: Vec<(usize, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(tag, gradient)` for every tagged leaf that required a gradient.
    pub fn tagged(&self) -> impl Iterator<Item = (usize, &[T])> + '_ {
        self.tags
            .iter()
            .filter_map(|&(tag, v)| self.get(v).map(|g| (tag, g)))
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += *s);
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) const PROB_CLAMP: f64 = 1e-7;

/// Per-pixel focal loss and its derivative with respect to the probability.
pub(crate) fn focal_term(p: f64, foreground: bool, alpha: Option<f64>, gamma: f64) -> (f64, f64) {
    let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let inside = clamped == p;
    let (pt, sign) = if foreground {
        (clamped, 1.0)
    } else {
        (1.0 - clamped, -1.0)
    };
    let at = match alpha {
        Some(a) if foreground => a,
        Some(a) => 1.0 - a,
        None => 1.0,
    };
    let q = 1.0 - pt;
    let ln = pt.ln();
    let loss = -at * q.powf(gamma) * ln;
    if !inside {
        return (loss, 0.0);
    }
    // d/dpt [-(1-pt)^g ln pt] = g (1-pt)^(g-1) ln pt - (1-pt)^g / pt
    let modulating_slope = if gamma == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * ln
    };
    let d_pt = at * (modulating_slope - q.powf(gamma) / pt);
    (loss, sign * d_pt)
}

#[cfg(test)]
mod tests;
