use super::conv::{self, Conv2dGeometry};
use super::fused::FusedNeuron;
use super::gemm::{gemm, MatRef};
use super::{sigmoid_slice, tanh_slice, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddConst { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Spike { h: Var, threshold: Var, width: f64 },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Conv2dGeometry,
    },
    AvgPool { input: Var, kernel: usize },
    Reshape { x: Var },
    Stack { parts: Vec<Var> },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SquaredError { x: Var, target: Vec<f64> },
    NeuronSequence {
        x: Var,
        alpha: Var,
        beta: Var,
        cfg: FusedNeuron,
        steps: usize,
        shared: bool,
        features: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in execution order for reverse-mode differentiation.
///
/// Leaves whose tensor has `requires_grad` set receive gradients. Gradients
/// from repeated [`Tape::backward`] calls accumulate until [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

/// How a binary elementwise op pairs its operands.
#[derive(Clone, Copy)]
enum Pairing {
    Same,
    ScalarLeft,
    ScalarRight,
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records `t` as a leaf. It is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Moves a value out of the tape, leaving an empty tensor behind.
    /// Only valid once the backward pass no longer needs it.
    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => {
                return Err(Error::dim(
                    "matmul",
                    format!("expected two matrices, got {sa:?} and {sb:?}"),
                ))
            }
        };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner extents differ: [{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(self.value(a).data(), m, k),
            MatRef::row_major(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, needs))
    }

    /// `x[m, n] + bias[n]` with the bias repeated over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = match (sx, sb) {
            ([_, n], [nb]) if n == nb => *n,
            _ => {
                return Err(Error::dim(
                    "add_bias",
                    format!("bias {sb:?} does not match rows of {sx:?}"),
                ))
            }
        };
        let b = self.value(bias).data();
        let mut out = self.value(x).clone().with_requires_grad(false);
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, needs))
    }

    fn pairing(&self, op: &'static str, a: Var, b: Var) -> Result<(Pairing, Vec<usize>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok((Pairing::Same, ta.shape().to_vec()))
        } else if tb.is_scalar() && (!ta.is_scalar() || ta.shape().len() >= tb.shape().len()) {
            // Two single-element operands keep the higher-rank shape.
            Ok((Pairing::ScalarRight, ta.shape().to_vec()))
        } else if ta.is_scalar() {
            Ok((Pairing::ScalarLeft, tb.shape().to_vec()))
        } else if tb.is_scalar() {
            Ok((Pairing::ScalarRight, ta.shape().to_vec()))
        } else {
            Err(Error::dim(
                op,
                format!(
                    "shapes {:?} and {:?} are neither equal nor scalar-vs-tensor",
                    ta.shape(),
                    tb.shape()
                ),
            ))
        }
    }

    fn zip_with(&self, a: Var, b: Var, pairing: Pairing, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (da, db) = (self.value(a).data(), self.value(b).data());
        match pairing {
            Pairing::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Pairing::ScalarLeft => db.iter().map(|&y| f(da[0], y)).collect(),
            Pairing::ScalarRight => da.iter().map(|&x| f(x, db[0])).collect(),
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (pairing, shape) = self.pairing(name, a, b)?;
        let data = self.zip_with(a, b, pairing, f);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// 0/1 mask of `a >= b`; carries no gradient.
    pub fn compare_ge(&mut self, a: Var, b: Var) -> Result<Var> {
        let (pairing, shape) = self.pairing("compare_ge", a, b)?;
        let data = self.zip_with(a, b, pairing, |x, y| if x >= y { 1.0 } else { 0.0 });
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, factor }, needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(out, Op::AddConst { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map_slice(|xs, o| sigmoid_slice(xs, 1.0, o));
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map_slice(tanh_slice);
        let needs = self.needs(x);
        self.push(out, Op::Tanh { x }, needs)
    }

    /// Heaviside spike `h - threshold > 0` with a rectangular surrogate of
    /// width `width` in the backward pass: `(1/width) * 1[|h - threshold| < width/2]`.
    pub fn spike(&mut self, h: Var, threshold: Var, width: f64) -> Result<Var> {
        if !(width > 0.0) {
            return Err(Error::Parameter {
                name: "surrogate width",
                value: width,
                expected: "> 0",
            });
        }
        if self.shape(h) != self.shape(threshold) && !self.value(threshold).is_scalar() {
            return Err(Error::dim(
                "spike",
                format!(
                    "threshold {:?} must match potential {:?} or be scalar",
                    self.shape(threshold),
                    self.shape(h)
                ),
            ));
        }
        let (pairing, shape) = self.pairing("spike", h, threshold)?;
        let data = self.zip_with(h, threshold, pairing, |x, th| if x - th > 0.0 { 1.0 } else { 0.0 });
        let needs = self.needs(h) || self.needs(threshold);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Spike {
                h,
                threshold,
                width,
            },
            needs,
        ))
    }

    /// Cross-correlation of `input` [B,C,H,W] with `weight` [O,C,k,k] plus an
    /// optional per-channel `bias` [O].
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        let (b, c, h, w, o, c2, kh, kw) = match (si, sw) {
            ([b, c, h, w], [o, c2, kh, kw]) => (*b, *c, *h, *w, *o, *c2, *kh, *kw),
            _ => {
                return Err(Error::dim(
                    "conv2d",
                    format!("expected input [B,C,H,W] and weight [O,C,k,k], got {si:?} and {sw:?}"),
                ))
            }
        };
        if c != c2 || kh != kw {
            return Err(Error::dim(
                "conv2d",
                format!("weight {sw:?} incompatible with input {si:?}"),
            ));
        }
        let (Some(oh), Some(ow)) = (
            conv::conv2d_output_extent(h, kh, stride, padding),
            conv::conv2d_output_extent(w, kw, stride, padding),
        ) else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (padding {padding}, stride {stride})"),
            ));
        };
        if let Some(bv) = bias {
            if self.shape(bv) != [o] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} must be [{o}]", self.shape(bv)),
                ));
            }
        }
        let geom = Conv2dGeometry {
            batch: b,
            in_channels: c,
            height: h,
            width: w,
            out_channels: o,
            kernel: kh,
            stride,
            padding,
            out_height: oh,
            out_width: ow,
        };
        let (hw, patch) = (geom.out_plane(), geom.patch_len());
        let wt = self.value(weight).data();
        let bias_v = bias.map(|bv| self.value(bv).data());
        let mut out = vec![0.0; b * o * hw];
        let low = conv::Lowering::new(&geom);
        let mut cols = Vec::with_capacity(hw * patch);
        for (img, dst) in self.value(input).data().chunks_exact(geom.in_image()).zip(out.chunks_exact_mut(o * hw)) {
            low.im2col(img, &mut cols);
            gemm(
                MatRef::row_major(wt, o, patch),
                MatRef::row_major(&cols, patch, hw),
                dst,
                0.0,
            );
            if let Some(bb) = bias_v {
                for (row, &bc) in dst.chunks_exact_mut(hw).zip(bb) {
                    row.iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|bv| self.needs(bv));
        Ok(self.push(
            Tensor::new(vec![b, o, oh, ow], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            needs,
        ))
    }

    /// Non-overlapping `kernel x kernel` average pooling of [B,C,H,W].
    pub fn avgpool2d(&mut self, input: Var, kernel: usize) -> Result<Var> {
        let s = self.shape(input);
        let [b, c, h, w] = *s else {
            return Err(Error::dim("avgpool2d", format!("expected [B,C,H,W], got {s:?}")));
        };
        if kernel == 0 || h < kernel || w < kernel {
            return Err(Error::dim(
                "avgpool2d",
                format!("pool {kernel} does not fit {h}x{w}"),
            ));
        }
        let out = conv::avgpool(b * c, h, w, kernel, self.value(input).data());
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::new(vec![b, c, h / kernel, w / kernel], out)?,
            Op::AvgPool { input, kernel },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape { x }, needs))
    }

    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::stack(&values)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::Stack {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean { x }, needs)
    }

    /// Mean over rows of `-log softmax(logits)[label]` for logits [N, C].
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let [n, c] = *s else {
            return Err(Error::dim("cross_entropy", format!("expected [N, C], got {s:?}")));
        };
        if labels.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, (row, p)) in data.chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            loss += log_z - row[labels[i]];
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - log_z).exp();
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// `mean((x - target)^2)` against a constant target of the same shape.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.shape(x) != target.shape() {
            return Err(Error::dim(
                "mse",
                format!("target {:?} vs input {:?}", target.shape(), self.shape(x)),
            ));
        }
        let xs = self.value(x).data();
        let sq: f64 = xs.iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::scalar(sq / xs.len() as f64),
            Op::SquaredError {
                x,
                target: target.data().to_vec(),
            },
            needs,
        ))
    }

    /// Spikes of a neuron layer over `steps` steps from a zero state, as
    /// `[steps * B, ...]` in step-major order. With `shared` the input `x`
    /// is one step `[B, ...]` applied at every step; otherwise `x` is already
    /// `[steps * B, ...]`. `alpha` and `beta` are scalars; hard and soft
    /// resets ignore them.
    pub fn neuron_sequence(&mut self, cfg: FusedNeuron, x: Var, steps: usize, shared: bool, alpha: Var, beta: Var) -> Result<Var> {
        if !(cfg.width > 0.0) {
            return Err(Error::Parameter {
                name: "surrogate width",
                value: cfg.width,
                expected: "> 0",
            });
        }
        if steps == 0 {
            return Err(Error::Contract("neuron sequence needs at least one step".into()));
        }
        if !self.value(alpha).is_scalar() || !self.value(beta).is_scalar() {
            return Err(Error::dim("neuron sequence", "alpha and beta must be scalars"));
        }
        let mut shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::dim("neuron sequence", "input needs a batch axis"));
        }
        if shared {
            shape[0] *= steps;
        } else if shape[0] % steps != 0 {
            return Err(Error::dim(
                "neuron sequence",
                format!("leading extent {} is not a multiple of {steps} steps", shape[0]),
            ));
        }
        let (a, b) = (self.value(alpha).data()[0], self.value(beta).data()[0]);
        let adaptive = cfg.is_adaptive();
        let needs = self.needs(x)
            || (adaptive && !cfg.alpha_fixed && self.needs(alpha))
            || (adaptive && !cfg.threshold_fixed && self.needs(beta));
        let (spikes, mut features) = cfg.run(self.value(x).data(), steps, shared, a, b);
        if !needs {
            features = Vec::new();
        }
        Ok(self.push(
            Tensor::new(shape, spikes)?,
            Op::NeuronSequence {
                x,
                alpha,
                beta,
                cfg,
                steps,
                shared,
                features,
            },
            needs,
        ))
    }

    /// Propagates `d loss / d node` from the scalar `loss` back to every
    /// gradient-tracking leaf, adding into previously accumulated gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(g) = grads[i].take() else { continue };
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(MatRef::row_major(g, m, n), MatRef::transposed(val(*b), k, n), &mut da, 0.0);
                    accumulate(grads, *a, da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(MatRef::transposed(val(*a), m, k), MatRef::row_major(g, m, n), &mut db, 0.0);
                    accumulate(grads, *b, db);
                }
            }
            Op::AddBias { x, bias } => {
                if needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if needs(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Add { a, b } => {
                self.binary_grad(grads, *a, g, |_, _, gi| gi);
                self.binary_grad(grads, *b, g, |_, _, gi| gi);
            }
            Op::Sub { a, b } => {
                self.binary_grad(grads, *a, g, |_, _, gi| gi);
                self.binary_grad(grads, *b, g, |_, _, gi| -gi);
            }
            Op::Mul { a, b } => {
                // d(a*b)/da = b, evaluated with the operand pairing of the forward pass.
                let (pa, pb) = (self.value(*a), self.value(*b));
                let at = |t: &Tensor, j: usize| if t.is_scalar() { t.data()[0] } else { t.data()[j] };
                self.binary_grad(grads, *a, g, |j, _, gi| gi * at(pb, j));
                self.binary_grad(grads, *b, g, |j, _, gi| gi * at(pa, j));
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.iter().map(|v| v * factor).collect());
            }
            Op::AddConst { x } => accumulate(grads, *x, g.to_vec()),
            Op::Sigmoid { x } => {
                let y = node.value.data();
                accumulate(grads, *x, g.iter().zip(y).map(|(gi, s)| gi * s * (1.0 - s)).collect());
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                accumulate(grads, *x, g.iter().zip(y).map(|(gi, t)| gi * (1.0 - t * t)).collect());
            }
            Op::Spike { h, threshold, width } => {
                let hv = val(*h);
                let th = self.value(*threshold);
                let half = width / 2.0;
                let inv = 1.0 / width;
                let surrogate: Vec<f64> = hv
                    .iter()
                    .enumerate()
                    .map(|(j, &x)| {
                        let t = if th.is_scalar() { th.data()[0] } else { th.data()[j] };
                        if (x - t).abs() < half {
                            inv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if needs(*h) {
                    accumulate(grads, *h, g.iter().zip(&surrogate).map(|(a, b)| a * b).collect());
                }
                if needs(*threshold) {
                    let dth: Vec<f64> = g.iter().zip(&surrogate).map(|(a, b)| -a * b).collect();
                    if th.is_scalar() {
                        accumulate(grads, *threshold, vec![dth.iter().sum()]);
                    } else {
                        accumulate(grads, *threshold, dth);
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (o, hw, patch) = (geom.out_channels, geom.out_plane(), geom.patch_len());
                let wt = val(*weight);
                let (gw, gx) = (needs(*weight), needs(*input));
                let mut dw = if gw { vec![0.0; o * patch] } else { Vec::new() };
                let mut dx = if gx { vec![0.0; self.value(*input).numel()] } else { Vec::new() };
                let low = conv::Lowering::new(geom);
                let mut cols = Vec::with_capacity(hw * patch);
                let mut dcols = if gx { vec![0.0; hw * patch] } else { Vec::new() };
                for (i, (img, gb)) in val(*input).chunks_exact(geom.in_image()).zip(g.chunks_exact(o * hw)).enumerate() {
                    if gw {
                        low.im2col(img, &mut cols);
                        gemm(MatRef::row_major(gb, o, hw), MatRef::transposed(&cols, patch, hw), &mut dw, 1.0);
                    }
                    if gx {
                        gemm(MatRef::transposed(wt, o, patch), MatRef::row_major(gb, o, hw), &mut dcols, 0.0);
                        let n = geom.in_image();
                        low.col2im(&dcols, &mut dx[i * n..(i + 1) * n]);
                    }
                }
                if gw {
                    accumulate(grads, *weight, dw);
                }
                if let Some(bv) = bias.filter(|bv| needs(*bv)) {
                    let mut db = vec![0.0; o];
                    for gb in g.chunks_exact(o * hw) {
                        for (d, row) in db.iter_mut().zip(gb.chunks_exact(hw)) {
                            *d += row.iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, bv, db);
                }
                if gx {
                    accumulate(grads, *input, dx);
                }
            }
            Op::AvgPool { input, kernel } => {
                let s = self.shape(*input);
                let dx = conv::avgpool_backward(s[0] * s[1], s[2], s[3], *kernel, g);
                accumulate(grads, *input, dx);
            }
            Op::Reshape { x } => accumulate(grads, *x, g.to_vec()),
            Op::Stack { parts } => {
                let inner = g.len() / parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    if needs(p) {
                        accumulate(grads, p, g[j * inner..(j + 1) * inner].to_vec());
                    }
                }
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * c + l] -= scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::SquaredError { x, target } => {
                let xs = val(*x);
                let scale = 2.0 * g[0] / xs.len() as f64;
                accumulate(grads, *x, xs.iter().zip(target).map(|(a, b)| scale * (a - b)).collect());
            }
            Op::NeuronSequence {
                x,
                alpha,
                beta,
                cfg,
                steps,
                shared,
                features,
            } => {
                let d = cfg.run_backward(val(*x), features, *steps, *shared, val(*alpha)[0], val(*beta)[0], g);
                if needs(*x) {
                    accumulate(grads, *x, d.x);
                }
                if cfg.is_adaptive() && !cfg.alpha_fixed && needs(*alpha) {
                    accumulate(grads, *alpha, vec![d.alpha]);
                }
                if cfg.is_adaptive() && !cfg.threshold_fixed && needs(*beta) {
                    accumulate(grads, *beta, vec![d.beta]);
                }
            }
        }
    }

    /// Routes an elementwise gradient to `operand`, summing it when the
    /// operand was a broadcast scalar. `f(j, operand_value, g_j)`.
    fn binary_grad(&self, grads: &mut [Option<Vec<f64>>], operand: Var, g: &[f64], f: impl Fn(usize, f64, f64) -> f64) {
        if !self.needs(operand) {
            return;
        }
        let t = self.value(operand);
        if t.is_scalar() && g.len() != 1 {
            let s: f64 = g.iter().enumerate().map(|(j, &gi)| f(j, t.data()[0], gi)).sum();
            accumulate(grads, operand, vec![s]);
        } else {
            let d = g.iter().enumerate().map(|(j, &gi)| f(j, t.data()[j], gi)).collect();
            accumulate(grads, operand, d);
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(tape: &mut Tape, shape: &[usize], data: &[f64], grad: bool) -> Var {
        tape.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_requires_grad(grad))
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let a = mat(&mut t, &[2, 2], &[1.0, 2.0, 3.0, 4.0], false);
        let ones = mat(&mut t, &[2, 1], &[1.0, 1.0], false);
        let c = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);

        let eye = mat(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0], false);
        let x = mat(&mut t, &[2, 2], &[0.3, -1.2, 5.0, 0.25], false);
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.value(y).data(), t.value(x).data());

        let zero = mat(&mut t, &[2, 2], &[0.0; 4], false);
        let z = t.matmul(zero, x).unwrap();
        assert!(t.value(z).data().iter().all(|&v| v == 0.0));

        let wrong = t.constant(Tensor::zeros(&[3, 1]));
        assert!(matches!(t.matmul(a, wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let x = mat(&mut t, &[3], &[0.0, 2.0, 0.0], false);
        let s = t.sigmoid(x);
        assert_eq!(t.value(s).data()[0], 0.5);
        assert_abs_diff_eq!(t.value(s).data()[1], 0.8808, epsilon = 1e-4);
        let th = t.tanh(x);
        assert_eq!(t.value(th).data()[0], 0.0);

        let y = mat(&mut t, &[2], &[1.0, 2.0], false);
        assert!(matches!(t.add(x, y), Err(Error::Dimension { .. })));
        let half = t.scalar(0.5);
        let m = t.compare_ge(x, half).unwrap();
        assert_eq!(t.value(m).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn square_and_sigmoid_derivatives() {
        let mut t = Tape::new();
        let w = mat(&mut t, &[1], &[3.0], true);
        let sq = t.mul(w, w).unwrap();
        t.backward(sq).unwrap();
        assert_eq!(t.grad(w), Some(&[6.0][..]));

        let mut t = Tape::new();
        let w = mat(&mut t, &[1], &[0.0], true);
        let s = t.sigmoid(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w), Some(&[0.25][..]));
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut t = Tape::new();
        let w = mat(&mut t, &[1], &[2.0], true);
        let y = t.scale(w, 3.0);
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(w), Some(&[6.0][..]));
        t.zero_grad();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let w = mat(&mut t, &[2], &[1.0, 2.0], true);
        assert!(matches!(t.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn spike_forward_is_strict_and_backward_rectangular() {
        let mut t = Tape::new();
        let h = mat(&mut t, &[5], &[1.1, 1.4, 1.6, 0.5, 1.0], true);
        let th = t.scalar(1.0);
        let s = t.spike(h, th, 1.0).unwrap();
        assert_eq!(t.value(s).data(), &[1.0, 1.0, 1.0, 0.0, 0.0]);
        let total = t.sum(s);
        t.backward(total).unwrap();
        // |0.6| and |−0.5| are outside the open window.
        assert_eq!(t.grad(h), Some(&[1.0, 1.0, 0.0, 0.0, 1.0][..]));

        let mut t = Tape::new();
        let h = mat(&mut t, &[1], &[1.0], false);
        let th = t.scalar(1.0);
        assert!(matches!(t.spike(h, th, 0.0), Err(Error::Parameter { .. })));
    }

    #[test]
    fn threshold_gradient_is_negated_surrogate() {
        let mut t = Tape::new();
        let h = mat(&mut t, &[3], &[1.2, 0.9, 3.0], false);
        let th = mat(&mut t, &[3], &[1.0, 1.0, 1.0], true);
        let s = t.spike(h, th, 2.0).unwrap();
        let total = t.sum(s);
        t.backward(total).unwrap();
        assert_eq!(t.grad(th), Some(&[-0.5, -0.5, 0.0][..]));
    }

    #[test]
    fn scalar_operand_gradient_is_summed() {
        let mut t = Tape::new();
        let alpha = mat(&mut t, &[1], &[0.5], true);
        let x = mat(&mut t, &[3], &[1.0, 2.0, 3.0], false);
        let y = t.mul(alpha, x).unwrap();
        let total = t.sum(y);
        t.backward(total).unwrap();
        assert_eq!(t.grad(alpha), Some(&[6.0][..]));
    }

    #[test]
    fn shared_subgraph_sums_both_paths() {
        let mut t = Tape::new();
        let w = mat(&mut t, &[1], &[1.5], true);
        let a = t.scale(w, 2.0);
        let b = t.tanh(w);
        let y = t.add(a, b).unwrap();
        t.backward(y).unwrap();
        let expect = 2.0 + (1.0 - 1.5f64.tanh().powi(2));
        assert_abs_diff_eq!(t.grad(w).unwrap()[0], expect, epsilon = 1e-15);
    }

    #[test]
    fn conv_examples() {
        let mut t = Tape::new();
        let x = mat(&mut t, &[1, 1, 3, 3], &[1.0; 9], false);
        let k = mat(&mut t, &[1, 1, 3, 3], &[1.0; 9], false);
        let y = t.conv2d(x, k, None, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).data(), &[9.0]);

        let img: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = mat(&mut t, &[1, 1, 3, 4], &img, false);
        let one = mat(&mut t, &[1, 1, 1, 1], &[1.0], false);
        let y = t.conv2d(x, one, None, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &img[..]);

        let big = mat(&mut t, &[1, 1, 5, 5], &[0.0; 25], false);
        assert!(matches!(t.conv2d(x, big, None, 1, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let mut t = Tape::new();
        let z = mat(&mut t, &[1, 2], &[0.0, 0.0], false);
        let l = t.cross_entropy(z, &[0]).unwrap();
        assert_abs_diff_eq!(t.value(l).item().unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(matches!(t.cross_entropy(z, &[2]), Err(Error::Data(_))));
    }
}
