use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Depthwise {
        input: Var,
        bank: Arc<Tensor>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale {
        input: Var,
        factor: f64,
    },
    Shift {
        input: Var,
    },
    Abs {
        input: Var,
    },
    Sum {
        input: Var,
    },
    MaskedMean {
        input: Var,
        mask: Arc<Tensor>,
        count: f64,
    },
    MeanSpatial {
        input: Var,
    },
    AddSpatial {
        input: Var,
        offset: Var,
    },
    MaskedSoftmax {
        input: Var,
    },
    RepeatBatch {
        input: Var,
        times: usize,
    },
    WeightedSum {
        features: Vec<Var>,
        weights: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Record of a forward computation, replayed in reverse by [`Tape::backward`].
///
/// Node ids are assigned in execution order, so every operation's inputs
/// precede its output and a reverse sweep over ids is a valid topological
/// order. A tape is single-use for differentiation: calling `backward` a
/// second time without [`Tape::zero_grad`] is an error.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected [N,C,H,W], got {s:?}"))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<[usize; 2]> {
    match *t.shape() {
        [a, b] => Ok([a, b]),
        ref s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a leaf. Leaves with `requires_grad` receive a gradient
    /// (zeros when disconnected from the loss) after [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// 2-D cross-correlation of `input` `[N,C,H,W]` with `kernel`
    /// `[O,C,k,k]`, plus an optional per-output-channel bias `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, c, h, w] = dims4("conv2d", self.value(input))?;
        let [o, kc, kh, kw] = dims4("conv2d", self.value(kernel))?;
        if kc != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {kc}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be square with odd size, got {kh}x{kw}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let span_h = (h + 2 * padding).checked_sub(kh);
        let span_w = (w + 2 * padding).checked_sub(kw);
        let (span_h, span_w) = match (span_h, span_w) {
            (Some(a), Some(b)) if a % stride == 0 && b % stride == 0 => (a, b),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "input {h}x{w} with padding {padding}, kernel {kh}, stride {stride} \
                         does not tile evenly"
                    ),
                ))
            }
        };
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [o] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias must be [{o}], got {bs:?}"),
                ));
            }
        }
        let geom = ConvGeom {
            batch: n,
            in_ch: c,
            out_ch: o,
            h,
            w,
            k: kh,
            stride,
            pad: padding,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new([n, o, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        ))
    }

    /// Filters each channel of `input` with every kernel of a fixed bank
    /// `[K,1,k,k]` ("same" padding). Output has `C*K` channels; the bank
    /// never receives a gradient.
    pub fn depthwise_fixed(&mut self, input: Var, bank: Arc<Tensor>) -> Result<Var> {
        let [n, c, h, w] = dims4("depthwise", self.value(input))?;
        let [nk, one, k, k2] = dims4("depthwise", &bank)?;
        if one != 1 || k != k2 || k % 2 == 0 {
            return Err(Error::shape(
                "depthwise",
                format!("bank must be [K,1,k,k] with odd k, got {:?}", bank.shape()),
            ));
        }
        let out =
            kernels::depthwise_forward(n, c, h, w, bank.data(), nk, k, self.value(input).data());
        let value = Tensor::new([n, c * nk, h, w], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::Depthwise { input, bank }))
    }

    /// Non-overlapping max pooling. Ties resolve to the first row-major
    /// position inside the window, which also receives the gradient.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("maxpool2d", self.value(input))?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "maxpool2d",
                format!("spatial size {h}x{w} is not divisible by window {window}"),
            ));
        }
        let (oh, ow) = (h / window, w / window);
        let src = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::MaxPool { input, argmax }))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::InvalidArgument(
                "upsample_nearest: factor must be >= 1".into(),
            ));
        }
        let [n, c, h, w] = dims4("upsample_nearest", self.value(input))?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(input).data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let plane = &src[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for y in 0..oh {
                let row = &plane[(y / factor) * w..(y / factor + 1) * w];
                for x in 0..ow {
                    dst[y * ow + x] = row[x / factor];
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::Upsample { input, factor }))
    }

    /// Concatenates along axis 1. Works for `[N,C,...]` of any trailing rank.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(
                "concat_channels",
                format!("non-channel dims differ: {sa:?} vs {sb:?}"),
            ));
        }
        let n = sa[0];
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * inner);
        for i in 0..n {
            out.extend_from_slice(&da[i * ca * inner..(i + 1) * ca * inner]);
            out.extend_from_slice(&db[i * cb * inner..(i + 1) * cb * inner]);
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, Op::Concat { a, b }))
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let src = self.value(input);
        let value = Tensor::from_fn(src.shape().to_vec(), |i| kind.apply(src.data()[i]));
        let rg = self.rg(input);
        self.push(value, rg, Op::Activation { input, kind })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    /// `input · weightᵀ + bias` for `input [N,Din]`, `weight [Dout,Din]`,
    /// `bias [Dout]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, din] = dims2("affine", self.value(input))?;
        let [dout, win] = dims2("affine", self.value(weight))?;
        if win != din || self.value(bias).shape() != [dout] {
            return Err(Error::shape(
                "affine",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    self.value(input).shape(),
                    self.value(weight).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let mut out = vec![0.0; n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(self.value(bias).data());
        }
        kernels::gemm(
            n,
            din,
            dout,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            1.0,
            &mut out,
        );
        let value = Tensor::new([n, dout], out)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            value,
            rg,
            Op::Affine {
                input,
                weight,
                bias,
            },
        ))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var> {
        same_shape(op, self.value(a), self.value(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, rg, node))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let src = self.value(input);
        let value = Tensor::from_fn(src.shape().to_vec(), |i| src.data()[i] * factor);
        let rg = self.rg(input);
        self.push(value, rg, Op::Scale { input, factor })
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, input: Var, offset: f64) -> Var {
        let src = self.value(input);
        let value = Tensor::from_fn(src.shape().to_vec(), |i| src.data()[i] + offset);
        let rg = self.rg(input);
        self.push(value, rg, Op::Shift { input })
    }

    /// Elementwise absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, input: Var) -> Var {
        let src = self.value(input);
        let value = Tensor::from_fn(src.shape().to_vec(), |i| src.data()[i].abs());
        let rg = self.rg(input);
        self.push(value, rg, Op::Abs { input })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), rg, Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel().max(1) as f64;
        let s = self.sum(input);
        self.scale(s, 1.0 / n)
    }

    /// `Σ mask·x / Σ mask` as a scalar. A mask with zero total weight yields
    /// a constant 0 that carries no gradient.
    pub fn masked_mean(&mut self, input: Var, mask: Arc<Tensor>) -> Result<Var> {
        same_shape("masked_mean", self.value(input), &mask)?;
        let count: f64 = mask.data().iter().sum();
        if count == 0.0 {
            return Ok(self.constant(Tensor::scalar(0.0)));
        }
        let total: f64 = self
            .value(input)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(x, m)| x * m)
            .sum();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(total / count),
            rg,
            Op::MaskedMean { input, mask, count },
        ))
    }

    /// Global average pool `[N,C,H,W] -> [N,C]`.
    pub fn mean_spatial(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("mean_spatial", self.value(input))?;
        let hw = (h * w) as f64;
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let value = Tensor::new([n, c], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::MeanSpatial { input }))
    }

    /// Adds a per-sample channel vector `[N,C]` at every spatial position of
    /// `[N,C,H,W]`.
    pub fn add_spatial(&mut self, input: Var, offset: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("add_spatial", self.value(input))?;
        if self.value(offset).shape() != [n, c] {
            return Err(Error::shape(
                "add_spatial",
                format!(
                    "offset must be [{n},{c}], got {:?}",
                    self.value(offset).shape()
                ),
            ));
        }
        let off = self.value(offset).data();
        let mut out = self.value(input).data().to_vec();
        for (i, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += off[i]);
        }
        let value = Tensor::new([n, c, h, w], out)?;
        let rg = self.rg(input) || self.rg(offset);
        Ok(self.push(value, rg, Op::AddSpatial { input, offset }))
    }

    /// Row-wise softmax of `[N,P]` scores restricted to entries whose mask is
    /// set; masked entries get weight exactly 0. Every row needs at least one
    /// unmasked entry.
    pub fn masked_softmax(&mut self, input: Var, mask: &[bool]) -> Result<Var> {
        let [n, p] = dims2("masked_softmax", self.value(input))?;
        if mask.len() != n * p {
            return Err(Error::shape(
                "masked_softmax",
                format!("mask has {} entries for [{n},{p}]", mask.len()),
            ));
        }
        let src = self.value(input).data();
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let row = &src[i * p..(i + 1) * p];
            let m = &mask[i * p..(i + 1) * p];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!(
                    "masked_softmax: row {i} has no available entry"
                )));
            }
            let dst = &mut out[i * p..(i + 1) * p];
            let mut z = 0.0;
            for j in 0..p {
                if m[j] {
                    dst[j] = (row[j] - max).exp();
                    z += dst[j];
                }
            }
            dst.iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor::new([n, p], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::MaskedSoftmax { input }))
    }

    /// `Σ_j weights[n,j] · features[j][n]` for equally shaped features and
    /// `weights [N,P]`.
    pub fn weighted_sum(&mut self, features: &[Var], weights: Var) -> Result<Var> {
        let first = *features
            .first()
            .ok_or_else(|| Error::InvalidArgument("weighted_sum of no features".into()))?;
        let shape = self.value(first).shape().to_vec();
        let n = shape[0];
        if self.value(weights).shape() != [n, features.len()] {
            return Err(Error::shape(
                "weighted_sum",
                format!(
                    "weights must be [{n},{}], got {:?}",
                    features.len(),
                    self.value(weights).shape()
                ),
            ));
        }
        for &f in features {
            same_shape("weighted_sum", self.value(first), self.value(f))?;
        }
        let inner = self.value(first).numel() / n;
        let p = features.len();
        let wts = self.value(weights).data();
        let mut out = vec![0.0; n * inner];
        for (j, &f) in features.iter().enumerate() {
            let src = self.value(f).data();
            for i in 0..n {
                let wv = wts[i * p + j];
                if wv == 0.0 {
                    continue;
                }
                let dst = &mut out[i * inner..(i + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&src[i * inner..(i + 1) * inner]) {
                    *d += wv * s;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(weights) || features.iter().any(|&f| self.rg(f));
        Ok(self.push(
            value,
            rg,
            Op::WeightedSum {
                features: features.to_vec(),
                weights,
            },
        ))
    }

    /// Tiles a `[1,...]` value `times` along axis 0.
    pub fn repeat_batch(&mut self, input: Var, times: usize) -> Result<Var> {
        let src = self.value(input);
        if src.shape().first() != Some(&1) || times == 0 {
            return Err(Error::shape(
                "repeat_batch",
                format!("need a [1,...] value and times >= 1, got {:?}", src.shape()),
            ));
        }
        let mut shape = src.shape().to_vec();
        shape[0] = times;
        let mut out = Vec::with_capacity(src.numel() * times);
        for _ in 0..times {
            out.extend_from_slice(src.data());
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::RepeatBatch { input, times }))
    }

    /// Reverse accumulation from a scalar `loss`. Afterwards every leaf
    /// registered with `requires_grad` holds a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward called twice without zero_grad".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Autodiff("loss is not on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Autodiff(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            self.propagate(id, &g);
        }

        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(accumulate(&mut node.grad, len))
    }

    fn add_grad(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if let Some(slot) = self.grad_slot(v) {
            f(slot);
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Ops only read values of their inputs, which sit strictly below `id`.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (input, kernel) = (*input, *kernel);
                let mut gi = self.rg(input).then(|| vec![0.0; self.value(input).numel()]);
                let mut gk = self
                    .rg(kernel)
                    .then(|| vec![0.0; self.value(kernel).numel()]);
                let mut gb = bias
                    .filter(|&b| self.rg(b))
                    .map(|b| vec![0.0; self.value(b).numel()]);
                kernels::conv2d_backward(
                    geom,
                    self.value(input).data(),
                    self.value(kernel).data(),
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gi) = gi {
                    self.add_grad(input, |s| add_into(s, &gi));
                }
                if let Some(gk) = gk {
                    self.add_grad(kernel, |s| add_into(s, &gk));
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    self.add_grad(*b, |s| add_into(s, &gb));
                }
            }
            Op::Depthwise { input, bank } => {
                let input = *input;
                if self.rg(input) {
                    let [n, c, h, w] = dims4("depthwise", self.value(input)).expect("shape");
                    let [nk, _, k, _] = dims4("depthwise", bank).expect("shape");
                    self.add_grad(input, |s| {
                        kernels::depthwise_backward(n, c, h, w, bank.data(), nk, k, g, s)
                    });
                }
            }
            Op::MaxPool { input, argmax } => {
                self.add_grad(*input, |s| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        s[src] += gv;
                    }
                });
            }
            Op::Upsample { input, factor } => {
                let f = *factor;
                let [_, _, h, w] = dims4("upsample", self.value(*input)).expect("shape");
                let (oh, ow) = (h * f, w * f);
                self.add_grad(*input, |s| {
                    for (nc, plane) in s.chunks_mut(h * w).enumerate() {
                        let go = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        for y in 0..oh {
                            for x in 0..ow {
                                plane[(y / f) * w + x / f] += go[y * ow + x];
                            }
                        }
                    }
                });
            }
            Op::Concat { a, b } => {
                let sa = self.value(*a).shape().to_vec();
                let cb = self.value(*b).shape()[1];
                let inner: usize = sa[2..].iter().product();
                let (n, ca) = (sa[0], sa[1]);
                let stride = (ca + cb) * inner;
                self.add_grad(*a, |s| {
                    for i in 0..n {
                        add_into(
                            &mut s[i * ca * inner..(i + 1) * ca * inner],
                            &g[i * stride..i * stride + ca * inner],
                        );
                    }
                });
                self.add_grad(*b, |s| {
                    for i in 0..n {
                        add_into(
                            &mut s[i * cb * inner..(i + 1) * cb * inner],
                            &g[i * stride + ca * inner..(i + 1) * stride],
                        );
                    }
                });
            }
            Op::Activation { input, kind } => {
                let local: Vec<f64> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(self.nodes[id].value.data())
                    .zip(g)
                    .map(|((&x, &y), &gv)| gv * kind.derivative(x, y))
                    .collect();
                self.add_grad(*input, |s| add_into(s, &local));
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let [n, din] = dims2("affine", self.value(input)).expect("shape");
                let dout = self.value(weight).shape()[0];
                if self.rg(input) {
                    let mut gi = vec![0.0; n * din];
                    kernels::gemm(
                        n,
                        dout,
                        din,
                        g,
                        false,
                        self.value(weight).data(),
                        false,
                        0.0,
                        &mut gi,
                    );
                    self.add_grad(input, |s| add_into(s, &gi));
                }
                if self.rg(weight) {
                    let mut gw = vec![0.0; dout * din];
                    kernels::gemm(
                        dout,
                        n,
                        din,
                        g,
                        true,
                        self.value(input).data(),
                        false,
                        0.0,
                        &mut gw,
                    );
                    self.add_grad(weight, |s| add_into(s, &gw));
                }
                self.add_grad(bias, |s| {
                    for row in g.chunks(dout) {
                        add_into(s, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.add_grad(*a, |s| add_into(s, g));
                self.add_grad(*b, |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, |s| add_into(s, g));
                self.add_grad(*b, |s| {
                    s.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(gv, y)| gv * y)
                        .collect();
                    self.add_grad(a, |s| add_into(s, &ga));
                }
                if self.rg(b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(gv, x)| gv * x)
                        .collect();
                    self.add_grad(b, |s| add_into(s, &gb));
                }
            }
            Op::Scale { input, factor } => {
                let f = *factor;
                self.add_grad(*input, |s| {
                    s.iter_mut().zip(g).for_each(|(d, gv)| *d += f * gv);
                });
            }
            Op::Shift { input } => {
                self.add_grad(*input, |s| add_into(s, g));
            }
            Op::Abs { input } => {
                let local: Vec<f64> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gv)| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.add_grad(*input, |s| add_into(s, &local));
            }
            Op::Sum { input } => {
                let gv = g[0];
                self.add_grad(*input, |s| s.iter_mut().for_each(|d| *d += gv));
            }
            Op::MaskedMean { input, mask, count } => {
                let gv = g[0] / count;
                self.add_grad(*input, |s| {
                    s.iter_mut()
                        .zip(mask.data())
                        .for_each(|(d, m)| *d += gv * m);
                });
            }
            Op::MeanSpatial { input } => {
                let [_, _, h, w] = dims4("mean_spatial", self.value(*input)).expect("shape");
                let hw = (h * w) as f64;
                self.add_grad(*input, |s| {
                    for (plane, &gv) in s.chunks_mut(h * w).zip(g) {
                        plane.iter_mut().for_each(|d| *d += gv / hw);
                    }
                });
            }
            Op::AddSpatial { input, offset } => {
                let [_, _, h, w] = dims4("add_spatial", self.value(*input)).expect("shape");
                self.add_grad(*input, |s| add_into(s, g));
                self.add_grad(*offset, |s| {
                    for (d, plane) in s.iter_mut().zip(g.chunks(h * w)) {
                        *d += plane.iter().sum::<f64>();
                    }
                });
            }
            Op::MaskedSoftmax { input } => {
                let p = self.nodes[id].value.shape()[1];
                let y = self.nodes[id].value.data().to_vec();
                self.add_grad(*input, |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(p).zip(y.chunks(p)).zip(g.chunks(p)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..p {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::RepeatBatch { input, times } => {
                let inner = g.len() / times;
                self.add_grad(*input, |s| {
                    for chunk in g.chunks(inner) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::WeightedSum { features, weights } => {
                let weights = *weights;
                let p = features.len();
                let n = self.value(weights).shape()[0];
                let inner = g.len() / n;
                let wts = self.value(weights).data().to_vec();
                if self.rg(weights) {
                    let mut gw = vec![0.0; n * p];
                    for (j, &f) in features.iter().enumerate() {
                        let src = self.value(f).data();
                        for i in 0..n {
                            gw[i * p + j] = src[i * inner..(i + 1) * inner]
                                .iter()
                                .zip(&g[i * inner..(i + 1) * inner])
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    self.add_grad(weights, |s| add_into(s, &gw));
                }
                for (j, &f) in features.iter().enumerate() {
                    self.add_grad(f, |s| {
                        for i in 0..n {
                            let wv = wts[i * p + j];
                            if wv == 0.0 {
                                continue;
                            }
                            s[i * inner..(i + 1) * inner]
                                .iter_mut()
                                .zip(&g[i * inner..(i + 1) * inner])
                                .for_each(|(d, gv)| *d += wv * gv);
                        }
                    });
                }
            }
        }
        self.nodes[id].op = op;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
