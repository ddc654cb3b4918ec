//! Learned-filterbank masking network: strided conv encoder, dilated
//! temporal-convolution separator estimating one mask per source, and a
//! transposed-conv decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tasnet_autodiff::{ConvGeometry, Graph, NormKind, Padding, Scalar, Tensor, Var};

use super::receptive::{Node, RfReport, Topology};
use super::{drop_value, Bound, ForwardOptions, ParamStore, SeparationModel};
use crate::error::{Error, Result};
use crate::rng::{substream, INIT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormChoice {
    Gln,
    Cln,
}

impl NormChoice {
    pub fn kind(self) -> NormKind {
        match self {
            NormChoice::Gln => NormKind::Global,
            NormChoice::Cln => NormKind::Cumulative,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Linear,
    Rectified,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TasNetConfig {
    /// Encoder window length L in samples.
    pub window: usize,
    /// Encoder hop K in samples.
    pub hop: usize,
    /// Encoder filters N.
    pub filters: usize,
    /// Blocks per repeat X (dilations 1, 2, .., 2^(X-1)).
    pub blocks: usize,
    /// Repeats R.
    pub repeats: usize,
    /// Bottleneck channels B.
    pub bottleneck: usize,
    /// Hidden channels per block H.
    pub hidden: usize,
    /// Depthwise kernel length P.
    pub kernel: usize,
    pub norm: NormChoice,
    pub causal: bool,
    /// Number of estimated sources I.
    pub speakers: usize,
    pub encoder: EncoderMode,
}

impl Default for TasNetConfig {
    fn default() -> Self {
        Self {
            window: 16,
            hop: 8,
            filters: 512,
            blocks: 8,
            repeats: 3,
            bottleneck: 128,
            hidden: 512,
            kernel: 3,
            norm: NormChoice::Gln,
            causal: false,
            speakers: 1,
            encoder: EncoderMode::Rectified,
        }
    }
}

/// Receptive field quoted for the published default configuration.
pub const REFERENCE_RF: usize = 15_310;

impl TasNetConfig {
    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v.clone()).map_err(|e| Error::json("tasnet config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("tasnet: {m}")));
        for (name, v) in [
            ("window", self.window),
            ("hop", self.hop),
            ("filters", self.filters),
            ("blocks", self.blocks),
            ("repeats", self.repeats),
            ("bottleneck", self.bottleneck),
            ("hidden", self.hidden),
            ("kernel", self.kernel),
        ] {
            if v == 0 {
                return bad(&format!("{name} must be positive"));
            }
        }
        if self.hop > self.window {
            return bad(&format!("hop {} exceeds window {}", self.hop, self.window));
        }
        if self.kernel % 2 == 0 {
            return bad(&format!("kernel {} must be odd", self.kernel));
        }
        if self.causal && self.norm != NormChoice::Cln {
            return bad("a causal network needs cumulative layer normalization (norm = \"cln\")");
        }
        if !(1..=2).contains(&self.speakers) {
            return bad(&format!("speakers must be 1 or 2, got {}", self.speakers));
        }
        if self.blocks > 20 {
            return bad("blocks above 20 give dilations beyond any practical signal length");
        }
        Ok(())
    }

    /// Sets window and hop from milliseconds at 8 kHz.
    pub fn with_window_hop_ms(mut self, window_ms: f64, hop_ms: f64) -> Result<Self> {
        let to_samples = |ms: f64, what: &str| {
            let s = ms * 8.0;
            if s < 1.0 || (s - s.round()).abs() > 1e-9 {
                Err(Error::Config(format!("{what} of {ms} ms is not a whole number of samples at 8 kHz")))
            } else {
                Ok(s.round() as usize)
            }
        };
        self.window = to_samples(window_ms, "window")?;
        self.hop = to_samples(hop_ms, "hop")?;
        self.validate()?;
        Ok(self)
    }

    fn padding(&self) -> Padding {
        if self.causal {
            Padding::SameCausal
        } else {
            Padding::SameCentered
        }
    }
}

pub struct TasNet {
    cfg: TasNetConfig,
    params: ParamStore,
}

impl TasNet {
    pub const KIND: &'static str = "tasnet";

    pub fn new(cfg: TasNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng: ChaCha8Rng = substream(seed, INIT);
        let mut p = ParamStore::new();
        let (n, b, h, l, pk) = (cfg.filters, cfg.bottleneck, cfg.hidden, cfg.window, cfg.kernel);
        p.insert_uniform("encoder.weight", &[n, 1, l], l, &mut rng)?;
        p.insert_full("separator.norm.gain", &[n], 1.0)?;
        p.insert_full("separator.norm.bias", &[n], 0.0)?;
        p.insert_uniform("separator.bottleneck.weight", &[b, n, 1], n, &mut rng)?;
        p.insert_uniform("separator.bottleneck.bias", &[b], n, &mut rng)?;
        for i in 0..cfg.repeats * cfg.blocks {
            let pre = format!("separator.block{i}");
            p.insert_uniform(format!("{pre}.in.weight"), &[h, b, 1], b, &mut rng)?;
            p.insert_uniform(format!("{pre}.in.bias"), &[h], b, &mut rng)?;
            p.insert_full(format!("{pre}.prelu1"), &[h], 0.25)?;
            p.insert_full(format!("{pre}.norm1.gain"), &[h], 1.0)?;
            p.insert_full(format!("{pre}.norm1.bias"), &[h], 0.0)?;
            p.insert_uniform(format!("{pre}.depthwise.weight"), &[h, 1, pk], pk, &mut rng)?;
            p.insert_uniform(format!("{pre}.depthwise.bias"), &[h], pk, &mut rng)?;
            p.insert_full(format!("{pre}.prelu2"), &[h], 0.25)?;
            p.insert_full(format!("{pre}.norm2.gain"), &[h], 1.0)?;
            p.insert_full(format!("{pre}.norm2.bias"), &[h], 0.0)?;
            p.insert_uniform(format!("{pre}.out.weight"), &[b, h, 1], h, &mut rng)?;
            p.insert_uniform(format!("{pre}.out.bias"), &[b], h, &mut rng)?;
        }
        p.insert_full("separator.mask.prelu", &[b], 0.25)?;
        p.insert_uniform("separator.mask.weight", &[cfg.speakers * n, b, 1], b, &mut rng)?;
        p.insert_uniform("separator.mask.bias", &[cfg.speakers * n], b, &mut rng)?;
        p.insert_uniform("decoder.weight", &[n, 1, l], l, &mut rng)?;
        Ok(Self { cfg, params: p })
    }

    pub fn tasnet_config(&self) -> &TasNetConfig {
        &self.cfg
    }

    /// Frames produced for `len` input samples (input zero-padded at the end
    /// so the last window is complete).
    pub fn frames(&self, len: usize) -> usize {
        (len.max(self.cfg.window) - self.cfg.window).div_ceil(self.cfg.hop) + 1
    }

    fn encode_graph<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, y: Var) -> Result<(Var, usize, usize)> {
        let t = g.value(y).dim(1);
        if t < self.cfg.window {
            return Err(Error::Model(format!(
                "input of {t} samples is shorter than the encoder window {}",
                self.cfg.window
            )));
        }
        let frames = self.frames(t);
        let padded = (frames - 1) * self.cfg.hop + self.cfg.window;
        let x = if padded != t { g.window_time(y, 0, padded)? } else { y };
        let geom = ConvGeometry::new(self.cfg.hop, 1, 1, Padding::None);
        let mut enc = g.conv1d(x, p.get("encoder.weight")?, None, geom)?;
        if self.cfg.encoder == EncoderMode::Rectified {
            let r = g.relu(enc)?;
            drop_value(g, enc);
            enc = r;
        }
        Ok((enc, t, padded))
    }

    fn block<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, i: usize, input: Var) -> Result<Var> {
        let pre = format!("separator.block{i}");
        let w = |s: &str| p.get(&format!("{pre}.{s}"));
        let kind = self.cfg.norm.kind();
        let pw = ConvGeometry::default();
        let dil = 1 << (i % self.cfg.blocks);
        let dw = ConvGeometry::new(1, dil, self.cfg.hidden, self.cfg.padding());
        let h0 = g.conv1d(input, w("in.weight")?, Some(w("in.bias")?), pw)?;
        let h1 = g.prelu(h0, w("prelu1")?)?;
        drop_value(g, h0);
        let h2 = g.layer_norm(kind, h1, w("norm1.gain")?, w("norm1.bias")?)?;
        drop_value(g, h1);
        let h3 = g.conv1d(h2, w("depthwise.weight")?, Some(w("depthwise.bias")?), dw)?;
        drop_value(g, h2);
        let h4 = g.prelu(h3, w("prelu2")?)?;
        drop_value(g, h3);
        let h5 = g.layer_norm(kind, h4, w("norm2.gain")?, w("norm2.bias")?)?;
        drop_value(g, h4);
        let o = g.conv1d(h5, w("out.weight")?, Some(w("out.bias")?), pw)?;
        drop_value(g, h5);
        let out = g.add(input, o)?;
        drop_value(g, o);
        Ok(out)
    }

    /// Sigmoid masks, one `[N, frames]` var per source.
    fn masks<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, enc: Var) -> Result<Vec<Var>> {
        let kind = self.cfg.norm.kind();
        let normed = g.layer_norm(kind, enc, p.get("separator.norm.gain")?, p.get("separator.norm.bias")?)?;
        let mut h = g.conv1d(
            normed,
            p.get("separator.bottleneck.weight")?,
            Some(p.get("separator.bottleneck.bias")?),
            ConvGeometry::default(),
        )?;
        drop_value(g, normed);
        for i in 0..self.cfg.repeats * self.cfg.blocks {
            let next = self.block(g, p, i, h)?;
            drop_value(g, h);
            h = next;
        }
        let a = g.prelu(h, p.get("separator.mask.prelu")?)?;
        drop_value(g, h);
        let logits = g.conv1d(a, p.get("separator.mask.weight")?, Some(p.get("separator.mask.bias")?), ConvGeometry::default())?;
        drop_value(g, a);
        let m = g.sigmoid(logits)?;
        drop_value(g, logits);
        if self.cfg.speakers == 1 {
            return Ok(vec![m]);
        }
        let n = self.cfg.filters;
        let out = (0..self.cfg.speakers)
            .map(|s| g.narrow_channels(m, s * n, n))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        drop_value(g, m);
        Ok(out)
    }

    fn build<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, y: Var, opts: &ForwardOptions) -> Result<Vec<Var>> {
        let (enc, t, padded) = self.encode_graph(g, p, y)?;
        let masks = match opts.mask_override {
            Some(v) => {
                let shape = g.value(enc).shape().to_vec();
                (0..self.cfg.speakers)
                    .map(|_| g.constant(Tensor::full(&shape, F::from_f64(v as f64))))
                    .collect()
            }
            None => self.masks(g, p, enc)?,
        };
        let mut outs = Vec::with_capacity(masks.len());
        for m in masks {
            let h = g.mul(enc, m)?;
            drop_value(g, m);
            let o = g.conv_transpose1d(h, p.get("decoder.weight")?, None, self.cfg.hop)?;
            drop_value(g, h);
            outs.push(if padded != t { g.window_time(o, 0, t)? } else { o });
        }
        Ok(outs)
    }

    /// Text explaining the analytic receptive field.
    pub fn derivation(&self) -> String {
        let c = &self.cfg;
        let note = match self.reference_receptive_field() {
            Some(r) if r % 10 == 0 && (r / 10) == c.repeats * (c.kernel - 1) * ((1usize << c.blocks) - 1) + 1 => format!(
                " The reference value {r} equals {} frames times 10 samples, i.e. the separator span counted at 10 \
                 samples per frame instead of the hop of {}; it is not reproduced by the layer geometry.",
                r / 10,
                c.hop
            ),
            _ => String::new(),
        };
        let span = c.repeats * (c.kernel - 1) * ((1usize << c.blocks) - 1);
        let overlap = c.window.div_ceil(c.hop);
        format!(
            "the separator's dilated convolutions span R*(P-1)*(2^X-1) = {}*{}*{} = {span} frames beyond the centre frame; \
             an output sample overlaps ceil(L/K) = {overlap} frames and each frame reads L = {} samples at hop K = {}, \
             so the field is ({span} + {overlap} - 1)*{} + {} = {} samples. {}{note}",
            c.repeats,
            c.kernel - 1,
            (1usize << c.blocks) - 1,
            c.window,
            c.hop,
            c.hop,
            c.window,
            (span + overlap - 1) * c.hop + c.window,
            if c.causal {
                "Causal padding confines the separator to past frames; the only lookahead is the encoder window."
            } else {
                "Centred padding splits the separator span evenly between past and future frames."
            }
        )
    }

    pub fn rf_report(&self) -> RfReport {
        RfReport::new(self, self.derivation())
    }
}

impl SeparationModel for TasNet {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn config(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    fn num_outputs(&self) -> usize {
        self.cfg.speakers
    }

    fn min_input_len(&self) -> usize {
        self.cfg.window
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward_f32(&self, g: &mut Graph<f32>, p: &Bound, y: Var, opts: &ForwardOptions) -> Result<Vec<Var>> {
        self.build(g, p, y, opts)
    }

    fn forward_f64(&self, g: &mut Graph<f64>, p: &Bound, y: Var, opts: &ForwardOptions) -> Result<Vec<Var>> {
        self.build(g, p, y, opts)
    }

    fn topology(&self) -> Topology {
        let c = &self.cfg;
        let mut t = Topology::new();
        let enc = t.conv(Topology::INPUT, c.window, c.hop, 1, 0);
        let mut h = t.push(Node::Merge(vec![enc]));
        for i in 0..c.repeats * c.blocks {
            let d = 1 << (i % c.blocks);
            let span = d * (c.kernel - 1);
            let pad_left = if c.causal { span } else { span / 2 };
            let conv = t.conv(h, c.kernel, 1, d, pad_left);
            h = t.push(Node::Merge(vec![h, conv]));
        }
        let masked = t.push(Node::Merge(vec![enc, h]));
        t.push(Node::ConvTranspose {
            src: masked,
            kernel: c.window,
            stride: c.hop,
        });
        t
    }

    fn rf_derivation(&self) -> String {
        self.derivation()
    }

    fn reference_receptive_field(&self) -> Option<usize> {
        let d = TasNetConfig::default();
        let same = self.cfg.window == d.window
            && self.cfg.hop == d.hop
            && self.cfg.blocks == d.blocks
            && self.cfg.repeats == d.repeats
            && self.cfg.kernel == d.kernel;
        same.then_some(REFERENCE_RF)
    }

    fn encode(&self, y: &[f32]) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::inference();
        let p = Bound::new(&mut g, &self.params, false);
        let x = g.constant(Tensor::signal(y.to_vec()));
        let (enc, _, _) = self.encode_graph(&mut g, &p, x)?;
        Ok(g.value(enc).clone())
    }
}
