//! Receptive field of a model: analytic, by propagating index intervals
//! backwards through a layer graph, and empirical, from the support of the
//! gradient of one output sample.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tasnet_autodiff::{Graph, Tensor};

use super::{Bound, ForwardOptions, SeparationModel};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Input,
    /// Output `j` reads inputs `stride*j - pad_left + dilation*[0, kernel-1]`.
    Conv {
        src: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        pad_left: usize,
    },
    /// Output `t` receives every frame `k` with `stride*k <= t < stride*k + kernel`.
    ConvTranspose { src: usize, kernel: usize, stride: usize },
    /// Output `j` copies input `j / factor`.
    Upsample { src: usize, factor: usize },
    /// Position-wise combination of same-rate inputs (activations, masks,
    /// residual sums, channel concatenation).
    Merge(Vec<usize>),
}

/// Layer graph in construction order; node 0 is the input signal.
#[derive(Clone, Debug)]
pub struct Topology {
    nodes: Vec<Node>,
}

impl Default for Topology {
    fn default() -> Self {
        Self::new()
    }
}

impl Topology {
    pub fn new() -> Self {
        Self { nodes: vec![Node::Input] }
    }

    pub const INPUT: usize = 0;

    pub fn push(&mut self, node: Node) -> usize {
        let srcs: Vec<usize> = match &node {
            Node::Input => panic!("only one input node"),
            Node::Conv { src, .. } | Node::ConvTranspose { src, .. } | Node::Upsample { src, .. } => vec![*src],
            Node::Merge(s) => s.clone(),
        };
        assert!(srcs.iter().all(|&s| s < self.nodes.len()), "sources must precede their consumer");
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    pub fn conv(&mut self, src: usize, kernel: usize, stride: usize, dilation: usize, pad_left: usize) -> usize {
        self.push(Node::Conv {
            src,
            kernel,
            stride,
            dilation,
            pad_left,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Input interval `[lo, hi]` that output sample `t` of node `output`
    /// depends on, for an unbounded signal.
    pub fn dependency(&self, output: usize, t: i64) -> (i64, i64) {
        let mut demand: Vec<Option<(i64, i64)>> = vec![None; self.nodes.len()];
        demand[output] = Some((t, t));
        let widen = |d: &mut Option<(i64, i64)>, (a, b): (i64, i64)| {
            *d = Some(match *d {
                None => (a, b),
                Some((x, y)) => (x.min(a), y.max(b)),
            });
        };
        for i in (1..=output).rev() {
            let Some((a, b)) = demand[i] else { continue };
            match &self.nodes[i] {
                Node::Input => unreachable!(),
                Node::Conv {
                    src,
                    kernel,
                    stride,
                    dilation,
                    pad_left,
                } => {
                    let (s, p) = (*stride as i64, *pad_left as i64);
                    let span = (*dilation * (*kernel - 1)) as i64;
                    widen(&mut demand[*src], (s * a - p, s * b - p + span));
                }
                Node::ConvTranspose { src, kernel, stride } => {
                    let (s, k) = (*stride as i64, *kernel as i64);
                    let lo = -((k - 1 - a).div_euclid(s));
                    widen(&mut demand[*src], (lo, b.div_euclid(s)));
                }
                Node::Upsample { src, factor } => {
                    let f = *factor as i64;
                    widen(&mut demand[*src], (a.div_euclid(f), b.div_euclid(f)));
                }
                Node::Merge(srcs) => {
                    for &s in srcs {
                        widen(&mut demand[s], (a, b));
                    }
                }
            }
        }
        demand[0].expect("output depends on the input")
    }

    fn period(&self) -> i64 {
        self.nodes
            .iter()
            .map(|n| match n {
                Node::Conv { stride, .. } | Node::ConvTranspose { stride, .. } => *stride as i64,
                Node::Upsample { factor, .. } => *factor as i64,
                _ => 1,
            })
            .product::<i64>()
            .clamp(1, 1 << 16)
    }

    /// Receptive field maximised over one period of output positions.
    pub fn analyze(&self) -> ReceptiveField {
        let out = self.nodes.len() - 1;
        let t0 = 1i64 << 30;
        let mut rf = ReceptiveField::default();
        for t in t0..t0 + self.period() {
            let (lo, hi) = self.dependency(out, t);
            rf.width = rf.width.max((hi - lo + 1) as usize);
            rf.history = rf.history.max((t - lo).max(0) as usize);
            rf.lookahead = rf.lookahead.max((hi - t).max(0) as usize);
        }
        rf
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReceptiveField {
    /// Number of input samples one output sample can depend on.
    pub width: usize,
    /// Past samples (before the output position) inside the field.
    pub history: usize,
    /// Future samples (after the output position) inside the field.
    pub lookahead: usize,
}

/// Analytic receptive field compared with a reference value.
#[derive(Clone, Debug)]
pub struct RfReport {
    pub model: String,
    pub analytic: ReceptiveField,
    pub reference: Option<usize>,
    pub derivation: String,
}

impl RfReport {
    pub const TOLERANCE: f64 = 0.10;

    pub fn new(model: &dyn SeparationModel, derivation: String) -> Self {
        Self {
            model: model.kind().to_string(),
            analytic: model.topology().analyze(),
            reference: model.reference_receptive_field(),
            derivation,
        }
    }

    /// Report for any model, using its own derivation text.
    pub fn of(model: &dyn SeparationModel) -> Self {
        Self::new(model, model.rf_derivation())
    }

    /// Relative deviation from the reference value.
    pub fn deviation(&self) -> Option<f64> {
        self.reference
            .map(|r| (self.analytic.width as f64 - r as f64) / r as f64)
    }

    pub fn flagged(&self) -> bool {
        self.deviation().is_some_and(|d| d.abs() > Self::TOLERANCE)
    }
}

impl fmt::Display for RfReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rf = &self.analytic;
        writeln!(
            f,
            "{} receptive field: {} samples ({:.3} s at 8 kHz), history {} samples, lookahead {} samples",
            self.model,
            rf.width,
            rf.width as f64 / 8000.0,
            rf.history,
            rf.lookahead
        )?;
        if let (Some(r), Some(d)) = (self.reference, self.deviation()) {
            writeln!(f, "reference value: {r} samples, deviation {:+.1} %", 100.0 * d)?;
            if self.flagged() {
                writeln!(f, "FLAG: deviation exceeds {:.0} %", 100.0 * Self::TOLERANCE)?;
            }
        }
        write!(f, "derivation: {}", self.derivation)
    }
}

/// Input span whose samples have a nonzero gradient on output sample `t`
/// of the first output, for a random input of `len` samples. Normalization
/// statistics are treated as constants so the support reflects the
/// convolutional structure only.
pub fn empirical_receptive_field(model: &dyn SeparationModel, len: usize, t: usize, seed: u64) -> Result<(usize, usize)> {
    if t >= len {
        return Err(Error::Model(format!("probe position {t} outside signal of {len} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y: Vec<f32> = (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut g = Graph::<f32>::new();
    g.set_detach_norm_stats(true);
    let p = Bound::new(&mut g, model.params(), false);
    let x = g.param(Tensor::signal(y));
    let outs = model.forward_f32(&mut g, &p, x, &ForwardOptions::default())?;
    let mut w = vec![0.0f32; len];
    w[t] = 1.0;
    let s = g.weighted_sum(outs[0], w)?;
    let grads = g.backward(s)?;
    let gx = grads.get(x).ok_or_else(|| Error::Model("no gradient reached the input".into()))?;
    let lo = gx.iter().position(|&v| v != 0.0);
    let hi = gx.iter().rposition(|&v| v != 0.0);
    match (lo, hi) {
        (Some(lo), Some(hi)) => Ok((lo, hi)),
        _ => Err(Error::Model("output does not depend on the input".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_kernel_eleven() {
        let mut t = Topology::new();
        t.conv(Topology::INPUT, 11, 1, 1, 5);
        let rf = t.analyze();
        assert_eq!(rf.width, 11);
        assert_eq!((rf.history, rf.lookahead), (5, 5));
    }

    #[test]
    fn dilated_causal_stack() {
        let mut t = Topology::new();
        let mut n = Topology::INPUT;
        for d in [1, 2, 4, 8] {
            n = t.conv(n, 3, 1, d, 2 * d);
        }
        let rf = t.analyze();
        assert_eq!(rf.width, 1 + 2 * 15);
        assert_eq!(rf.lookahead, 0);
    }

    #[test]
    fn strided_analysis_synthesis_pair() {
        // Each output sample sees two frames of 16 samples, hop 8: 24 samples.
        let mut t = Topology::new();
        let e = t.conv(Topology::INPUT, 16, 8, 1, 0);
        t.push(Node::ConvTranspose { src: e, kernel: 16, stride: 8 });
        assert_eq!(t.analyze().width, 24);
        assert_eq!(t.analyze().lookahead, 15);
    }

    #[test]
    fn upsample_then_conv() {
        let mut t = Topology::new();
        let d = t.conv(Topology::INPUT, 3, 2, 1, 1);
        let u = t.push(Node::Upsample { src: d, factor: 2 });
        t.push(Node::Merge(vec![u, Topology::INPUT]));
        // Output j reads down-sampled position j/2, which covers inputs j/2*2 - 1 ..= j/2*2 + 1.
        let (lo, hi) = t.dependency(3, 101);
        assert_eq!((lo, hi), (99, 101));
    }
}
