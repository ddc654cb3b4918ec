use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv::{self, ConvGeometry};
use crate::error::{check_dim, AutodiffError, Result};
use crate::norm::{self, NormKind, NormStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this crate.
pub trait CustomBackward<F: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` where not needed), each with
    /// the input's element count.
    fn backward(&self, inputs: &[&Tensor<F>], output: &Tensor<F>, grad: &[F]) -> Vec<Option<Vec<F>>>;
}

enum Op<F: Scalar> {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    },
    Prelu {
        input: Var,
        alpha: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Norm {
        kind: NormKind,
        input: Var,
        gain: Var,
        bias: Var,
        stats: NormStats,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Dropout {
        input: Var,
        mask: Vec<F>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Concat(Var, Var),
    Narrow {
        input: Var,
        start: usize,
    },
    Window {
        input: Var,
        start: isize,
    },
    WeightedSum {
        input: Var,
        weights: Vec<F>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<F>>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar root with respect to the leaves that require them.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Tape of tensor operations recorded in evaluation order.
///
/// With gradients disabled, [`Graph::release`] frees intermediate values so
/// long inference passes stay within memory.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    training: bool,
    detach_norm_stats: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            training: false,
            detach_norm_stats: false,
        }
    }

    /// Graph that records no backward information.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Treat normalization statistics as constants in the backward pass.
    /// Used for receptive-field probing, never for training.
    pub fn set_detach_norm_stats(&mut self, detach: bool) {
        self.detach_norm_stats = detach;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Drops the stored value of `v` when gradients are disabled.
    pub fn release(&mut self, v: Var) {
        if !self.grad_enabled {
            if let Some(n) = self.nodes.get_mut(v.0) {
                n.value = Tensor::from_parts(vec![0], Vec::new());
            }
        }
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        t.expect_rank(op, 2)?;
        Ok((t.dim(0), t.dim(1)))
    }

    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let s = conv::conv_shape(
            self.value(input).shape(),
            self.value(weight).shape(),
            bias.map(|b| self.value(b).shape()),
            &geom,
        )?;
        let out = conv::conv1d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &s,
            &geom,
        );
        let value = Tensor::from_parts(vec![s.c_out, s.t_out], out);
        let mut ins = vec![input, weight];
        ins.extend(bias);
        self.push(
            "conv1d",
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
            },
            &ins,
        )
    }

    /// Overlap-add synthesis: `weight` is `[C_in, C_out, P]` and the output
    /// has `(frames - 1) * stride + P` samples.
    pub fn conv_transpose1d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let s = conv::conv_transpose_shape(
            self.value(input).shape(),
            self.value(weight).shape(),
            bias.map(|b| self.value(b).shape()),
            stride,
        )?;
        let out = conv::conv_transpose_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &s,
            stride,
        );
        let value = Tensor::from_parts(vec![s.c_out, s.t_out], out);
        let mut ins = vec![input, weight];
        ins.extend(bias);
        self.push(
            "transposed_conv1d",
            value,
            Op::ConvTranspose1d {
                input,
                weight,
                bias,
                stride,
            },
            &ins,
        )
    }

    /// Per-channel parametric ReLU on a `[C, T]` input.
    pub fn prelu(&mut self, input: Var, alpha: Var) -> Result<Var> {
        let (c, t) = self.rank2("prelu", input)?;
        check_dim("prelu", "alpha length", c, self.value(alpha).numel())?;
        let x = self.value(input).data();
        let a = self.value(alpha).data();
        let mut out = Vec::with_capacity(x.len());
        for ch in 0..c {
            let av = a[ch];
            out.extend(x[ch * t..(ch + 1) * t].iter().map(|&v| if v >= F::zero() { v } else { av * v }));
        }
        let value = Tensor::from_parts(vec![c, t], out);
        self.push("prelu", value, Op::Prelu { input, alpha }, &[input, alpha])
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v.max(F::zero())).collect(),
        );
        self.push("relu", value, Op::Relu(input), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let value = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().map(|&v| F::one() / (F::one() + (-v).exp())).collect(),
        );
        self.push("sigmoid", value, Op::Sigmoid(input), &[input])
    }

    /// Layer normalization with per-channel gain and bias.
    pub fn layer_norm(&mut self, kind: NormKind, input: Var, gain: Var, bias: Var) -> Result<Var> {
        let (c, k) = self.rank2("layer_norm", input)?;
        check_dim("layer_norm", "gain length", c, self.value(gain).numel())?;
        check_dim("layer_norm", "bias length", c, self.value(bias).numel())?;
        let (out, stats) = norm::norm_forward(
            kind,
            self.value(input).data(),
            c,
            k,
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let value = Tensor::from_parts(vec![c, k], out);
        self.push(
            "layer_norm",
            value,
            Op::Norm {
                kind,
                input,
                gain,
                bias,
                stats,
            },
            &[input, gain, bias],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != sb.len() {
            return Err(AutodiffError::Rank {
                op,
                expected: sa.len(),
                got: sb.len(),
            });
        }
        for (&x, &y) in sa.iter().zip(sb) {
            check_dim(op, "operand extent", x, y)?;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect(),
        );
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let value = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect(),
        );
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Inverted dropout with a seeded mask. Identity outside training mode.
    pub fn dropout(&mut self, input: Var, rate: f64, seed: u64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(input);
        }
        if rate >= 1.0 {
            return Err(AutodiffError::Invalid {
                op: "dropout",
                msg: format!("rate {rate} must be < 1"),
            });
        }
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = self.value(input);
        let mask: Vec<F> = (0..x.numel())
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let value = Tensor::from_parts(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        );
        self.push("dropout", value, Op::Dropout { input, mask }, &[input])
    }

    /// Nearest-neighbour upsampling along time: `[C, T] -> [C, T * factor]`.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (c, t) = self.rank2("upsample", input)?;
        if factor == 0 {
            return Err(AutodiffError::Invalid {
                op: "upsample",
                msg: "factor must be >= 1".into(),
            });
        }
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(c * t * factor);
        for &v in x {
            out.extend(std::iter::repeat(v).take(factor));
        }
        let value = Tensor::from_parts(vec![c, t * factor], out);
        self.push("upsample", value, Op::Upsample { input, factor }, &[input])
    }

    /// Stacks `[C1, T]` and `[C2, T]` into `[C1 + C2, T]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, ta) = self.rank2("concat", a)?;
        let (cb, tb) = self.rank2("concat", b)?;
        check_dim("concat", "time", ta, tb)?;
        let mut out = Vec::with_capacity((ca + cb) * ta);
        out.extend_from_slice(self.value(a).data());
        out.extend_from_slice(self.value(b).data());
        let value = Tensor::from_parts(vec![ca + cb, ta], out);
        self.push("concat", value, Op::Concat(a, b), &[a, b])
    }

    /// Channels `start..start + len` of a `[C, T]` input.
    pub fn narrow_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (c, t) = self.rank2("narrow", input)?;
        if len == 0 || start + len > c {
            return Err(AutodiffError::Invalid {
                op: "narrow",
                msg: format!("channel range {start}..{} outside 0..{c}", start + len),
            });
        }
        let value = Tensor::from_parts(vec![len, t], self.value(input).data()[start * t..(start + len) * t].to_vec());
        self.push("narrow", value, Op::Narrow { input, start }, &[input])
    }

    /// Samples `start..start + len` along time, zero outside the input.
    pub fn window_time(&mut self, input: Var, start: isize, len: usize) -> Result<Var> {
        let (c, t) = self.rank2("window", input)?;
        if len == 0 {
            return Err(AutodiffError::Invalid {
                op: "window",
                msg: "empty window".into(),
            });
        }
        let x = self.value(input).data();
        let mut out = vec![F::zero(); c * len];
        for ch in 0..c {
            for j in 0..len {
                let src = start + j as isize;
                if src >= 0 && (src as usize) < t {
                    out[ch * len + j] = x[ch * t + src as usize];
                }
            }
        }
        let value = Tensor::from_parts(vec![c, len], out);
        self.push("window", value, Op::Window { input, start }, &[input])
    }

    /// Scalar `sum_i w_i x_i` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<F>) -> Result<Var> {
        check_dim("weighted_sum", "weights", self.value(input).numel(), weights.len())?;
        let s: F = self.value(input).data().iter().zip(&weights).map(|(&x, &w)| x * w).sum();
        let value = Tensor::from_parts(vec![1], vec![s]);
        self.push("weighted_sum", value, Op::WeightedSum { input, weights }, &[input])
    }

    /// Records a value computed elsewhere together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<F>, rule: Box<dyn CustomBackward<F>>) -> Result<Var> {
        let name = rule.name();
        self.push(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            inputs,
        )
    }

    /// Reverse sweep from a scalar root. Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        let numel = self.value(root).numel();
        if numel != 1 {
            return Err(AutodiffError::NonScalarRoot { numel });
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![F::one()]);
        let mut leaf_grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[i] = Some(gout);
                continue;
            }
            self.propagate(node, &gout, &mut grads)?;
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<F>, gout: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let mut acc = |v: Var, g: Vec<F>| accumulate(grads, v, g);
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                geom,
            } => {
                let s = conv::conv_shape(
                    self.value(*input).shape(),
                    self.value(*weight).shape(),
                    bias.map(|b| self.value(b).shape()),
                    geom,
                )?;
                let g = conv::conv1d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gout,
                    &s,
                    geom,
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(d) = g.input {
                    acc(*input, d);
                }
                if let Some(d) = g.weight {
                    acc(*weight, d);
                }
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    acc(*b, d);
                }
            }
            Op::ConvTranspose1d {
                input,
                weight,
                bias,
                stride,
            } => {
                let s = conv::conv_transpose_shape(
                    self.value(*input).shape(),
                    self.value(*weight).shape(),
                    bias.map(|b| self.value(b).shape()),
                    *stride,
                )?;
                let g = conv::conv_transpose_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    gout,
                    &s,
                    *stride,
                    self.wants(*input),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(d) = g.input {
                    acc(*input, d);
                }
                if let Some(d) = g.weight {
                    acc(*weight, d);
                }
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    acc(*b, d);
                }
            }
            Op::Prelu { input, alpha } => {
                let xv = self.value(*input);
                let (c, t) = (xv.dim(0), xv.dim(1));
                let x = xv.data();
                let a = self.value(*alpha).data();
                if self.wants(*input) {
                    let mut dx = Vec::with_capacity(x.len());
                    for ch in 0..c {
                        let av = a[ch];
                        for i in ch * t..(ch + 1) * t {
                            dx.push(if x[i] >= F::zero() { gout[i] } else { av * gout[i] });
                        }
                    }
                    acc(*input, dx);
                }
                if self.wants(*alpha) {
                    let da = (0..c)
                        .map(|ch| {
                            (ch * t..(ch + 1) * t)
                                .filter(|&i| x[i] < F::zero())
                                .map(|i| gout[i] * x[i])
                                .sum()
                        })
                        .collect();
                    acc(*alpha, da);
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                acc(
                    *input,
                    x.iter()
                        .zip(gout)
                        .map(|(&v, &g)| if v > F::zero() { g } else { F::zero() })
                        .collect(),
                );
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                acc(
                    *input,
                    y.iter().zip(gout).map(|(&s, &g)| g * s * (F::one() - s)).collect(),
                );
            }
            Op::Norm {
                kind,
                input,
                gain,
                bias,
                stats,
            } => {
                let xv = self.value(*input);
                let g = norm::norm_backward(
                    *kind,
                    xv.data(),
                    xv.dim(0),
                    xv.dim(1),
                    self.value(*gain).data(),
                    stats,
                    gout,
                    self.detach_norm_stats,
                );
                if self.wants(*input) {
                    acc(*input, g.input);
                }
                if self.wants(*gain) {
                    acc(*gain, g.gain);
                }
                if self.wants(*bias) {
                    acc(*bias, g.bias);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, gout.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, gout.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let y = self.value(*b).data();
                    acc(*a, gout.iter().zip(y).map(|(&g, &v)| g * v).collect());
                }
                if self.wants(*b) {
                    let x = self.value(*a).data();
                    acc(*b, gout.iter().zip(x).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Dropout { input, mask } => {
                acc(*input, gout.iter().zip(mask).map(|(&g, &m)| g * m).collect());
            }
            Op::Upsample { input, factor } => {
                let d = gout.chunks(*factor).map(|ch| ch.iter().copied().sum()).collect();
                acc(*input, d);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).numel();
                if self.wants(*a) {
                    acc(*a, gout[..na].to_vec());
                }
                if self.wants(*b) {
                    acc(*b, gout[na..].to_vec());
                }
            }
            Op::Narrow { input, start } => {
                let xv = self.value(*input);
                let t = xv.dim(1);
                let mut d = vec![F::zero(); xv.numel()];
                d[start * t..start * t + gout.len()].copy_from_slice(gout);
                acc(*input, d);
            }
            Op::Window { input, start } => {
                let xv = self.value(*input);
                let (c, t) = (xv.dim(0), xv.dim(1));
                let len = node.value.dim(1);
                let mut d = vec![F::zero(); xv.numel()];
                for ch in 0..c {
                    for j in 0..len {
                        let src = start + j as isize;
                        if src >= 0 && (src as usize) < t {
                            d[ch * t + src as usize] += gout[ch * len + j];
                        }
                    }
                }
                acc(*input, d);
            }
            Op::WeightedSum { input, weights } => {
                let g = gout[0];
                acc(*input, weights.iter().map(|&w| w * g).collect());
            }
            Op::Custom { inputs, rule } => {
                let vals: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = rule.backward(&vals, &node.value, gout);
                for (v, g) in inputs.iter().zip(gs) {
                    if let Some(g) = g {
                        if self.wants(*v) {
                            check_dim(rule.name(), "gradient length", self.value(*v).numel(), g.len())?;
                            acc(*v, g);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
