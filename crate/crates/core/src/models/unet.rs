//! Waveform encoder-decoder with concatenated skip connections.
//!
//! The encoder is the leading run of layers up to the last strided one.
//! Each following layer, as long as resolution remains to be restored, is
//! preceded by nearest-neighbour upsampling by two and concatenation with
//! the encoder output at the new resolution.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tasnet_autodiff::{ConvGeometry, Graph, Padding, Scalar, Var};

use super::receptive::{Node, RfReport, Topology};
use super::{Bound, ForwardOptions, ParamStore, SeparationModel};
use crate::error::{Error, Result};
use crate::rng::{item_seed, substream, DROPOUT, INIT};

/// Published layer list as (in_channels, out_channels, stride).
pub const DEFAULT_LAYERS: [(usize, usize, usize); 18] = [
    (1, 48, 1),
    (48, 48, 2),
    (48, 48, 2),
    (48, 96, 2),
    (96, 96, 2),
    (96, 96, 2),
    (96, 180, 2),
    (180, 180, 2),
    (180, 180, 2),
    (180, 180, 1),
    (180, 180, 1),
    (180, 96, 1),
    (96, 96, 1),
    (96, 96, 1),
    (96, 48, 1),
    (48, 48, 1),
    (48, 48, 1),
    (48, 1, 1),
];

/// Receptive field quoted for the published configuration.
pub const REFERENCE_RF: usize = 2_561;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub layers: Vec<(usize, usize, usize)>,
    pub kernel: usize,
    /// Dropout follows every `dropout_period`-th encoder layer.
    pub dropout_period: usize,
    pub dropout: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            layers: DEFAULT_LAYERS.to_vec(),
            kernel: 11,
            dropout_period: 3,
            dropout: 0.2,
        }
    }
}

/// Resolved wiring of one layer.
#[derive(Clone, Debug)]
struct Layer {
    conv_in: usize,
    out: usize,
    stride: usize,
    /// Encoder layer whose output is concatenated after upsampling.
    skip: Option<usize>,
    activation: bool,
    dropout: bool,
}

impl UNetConfig {
    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v.clone()).map_err(|e| Error::json("unet config", e))?;
        cfg.plan()?;
        Ok(cfg)
    }

    fn plan(&self) -> Result<(usize, Vec<Layer>)> {
        let bad = |m: String| Err(Error::Config(format!("unet: {m}")));
        if self.layers.is_empty() {
            return bad("empty layer list".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd and positive", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.layers[0].0 != 1 || self.layers.last().unwrap().1 != 1 {
            return bad("the first layer must take 1 channel and the last must emit 1".into());
        }
        for w in self.layers.windows(2) {
            if w[0].1 != w[1].0 {
                return bad(format!("layer emitting {} channels feeds a layer expecting {}", w[0].1, w[1].0));
            }
        }
        let enc_len = self.layers.iter().rposition(|l| l.2 > 1).map_or(1, |i| i + 1);
        let mut res = Vec::with_capacity(enc_len);
        let mut total = 1usize;
        for (i, &(_, _, s)) in self.layers[..enc_len].iter().enumerate() {
            if s != 1 && s != 2 {
                return bad(format!("encoder layer {i} has stride {s} (only 1 or 2 supported)"));
            }
            total *= s;
            res.push(total);
        }
        let ups = self.layers[..enc_len].iter().filter(|l| l.2 == 2).count();
        let dec = self.layers.len() - enc_len;
        if dec < ups {
            return bad(format!("{ups} strided encoder layers need at least {ups} decoder layers"));
        }
        let mut plan = Vec::with_capacity(self.layers.len());
        for (i, &(cin, out, stride)) in self.layers.iter().enumerate() {
            let last = i + 1 == self.layers.len();
            if i < enc_len {
                let dropout = self.dropout_period > 0 && (i + 1) % self.dropout_period == 0;
                plan.push(Layer {
                    conv_in: cin,
                    out,
                    stride,
                    skip: None,
                    activation: !last,
                    dropout,
                });
                continue;
            }
            if stride != 1 {
                return bad(format!("decoder layer {} has stride {stride}; decoder layers must have stride 1", i - enc_len));
            }
            let d = i - enc_len;
            let skip = if d < ups {
                let target = total >> (d + 1);
                Some(res.iter().rposition(|&r| r == target).expect("every resolution has an encoder layer"))
            } else {
                None
            };
            let extra = skip.map_or(0, |s| self.layers[s].1);
            plan.push(Layer {
                conv_in: cin + extra,
                out,
                stride: 1,
                skip,
                activation: !last,
                dropout: false,
            });
        }
        Ok((total, plan))
    }

    /// Product of encoder strides.
    pub fn total_stride(&self) -> Result<usize> {
        Ok(self.plan()?.0)
    }
}

pub struct UNet {
    cfg: UNetConfig,
    plan: Vec<Layer>,
    total_stride: usize,
    params: ParamStore,
}

impl UNet {
    pub const KIND: &'static str = "unet";

    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self> {
        let (total_stride, plan) = cfg.plan()?;
        let mut rng: ChaCha8Rng = substream(seed, INIT);
        let mut p = ParamStore::new();
        for (i, l) in plan.iter().enumerate() {
            let fan_in = l.conv_in * cfg.kernel;
            p.insert_uniform(format!("layer{i}.weight"), &[l.out, l.conv_in, cfg.kernel], fan_in, &mut rng)?;
            p.insert_uniform(format!("layer{i}.bias"), &[l.out], fan_in, &mut rng)?;
            if l.activation {
                p.insert_full(format!("layer{i}.prelu"), &[l.out], 0.25)?;
            }
        }
        Ok(Self {
            cfg,
            plan,
            total_stride,
            params: p,
        })
    }

    pub fn unet_config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn total_stride(&self) -> usize {
        self.total_stride
    }

    fn build<F: Scalar>(&self, g: &mut Graph<F>, p: &Bound, y: Var, opts: &ForwardOptions) -> Result<Vec<Var>> {
        let t = g.value(y).dim(1);
        if t == 0 {
            return Err(Error::Model("empty input".into()));
        }
        let padded = t.div_ceil(self.total_stride) * self.total_stride;
        let mut h = if padded != t { g.window_time(y, 0, padded)? } else { y };
        let mut outs: Vec<Var> = Vec::with_capacity(self.plan.len());
        for (i, l) in self.plan.iter().enumerate() {
            let x = match l.skip {
                Some(s) => {
                    let up = g.upsample_nearest(h, 2)?;
                    g.concat_channels(up, outs[s])?
                }
                None => h,
            };
            let geom = ConvGeometry::new(l.stride, 1, 1, Padding::SameCentered);
            let mut o = g.conv1d(x, p.get(&format!("layer{i}.weight"))?, Some(p.get(&format!("layer{i}.bias"))?), geom)?;
            if l.activation {
                o = g.prelu(o, p.get(&format!("layer{i}.prelu"))?)?;
            }
            if l.dropout {
                o = g.dropout(o, self.cfg.dropout, item_seed(opts.dropout_seed, DROPOUT, i as u64))?;
            }
            outs.push(o);
            h = o;
        }
        let out = if padded != t { g.window_time(h, 0, t)? } else { h };
        Ok(vec![out])
    }

    fn encoder_len(&self) -> usize {
        self.cfg.layers.iter().rposition(|l| l.2 > 1).map_or(1, |i| i + 1)
    }

    /// Receptive field of the deepest encoder layer alone.
    pub fn encoder_receptive_field(&self) -> usize {
        let k = self.cfg.kernel;
        let mut rf = 1;
        let mut spacing = 1;
        for l in &self.plan[..self.encoder_len()] {
            rf += (k - 1) * spacing;
            spacing *= l.stride;
        }
        rf
    }

    pub fn rf_report(&self) -> RfReport {
        RfReport::new(self, self.derivation())
    }

    pub fn derivation(&self) -> String {
        let width = self.topology().analyze().width;
        format!(
            "the encoder path alone spans {} samples (kernel {} at input spacings 1, 1, 2, 4, ..., {}); the decoder's \
             convolutions at the coarse resolutions (spacing up to {}) add to this, so the full network reaches {} samples. \
             A reference of {} samples matches the encoder path only.",
            self.encoder_receptive_field(),
            self.cfg.kernel,
            self.total_stride / 2,
            self.total_stride / 2,
            width,
            self.encoder_receptive_field()
        )
    }
}

impl SeparationModel for UNet {
    fn kind(&self) -> &'static str {
        Self::KIND
    }

    fn config(&self) -> serde_json::Value {
        serde_json::to_value(&self.cfg).expect("config serializes")
    }

    fn num_outputs(&self) -> usize {
        1
    }

    fn rf_derivation(&self) -> String {
        self.derivation()
    }

    fn min_input_len(&self) -> usize {
        1
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
        let k = self.cfg.kernel;
        let pad = (k - 1) / 2;
        let mut t = Topology::new();
        let mut ids = Vec::with_capacity(self.plan.len());
        let mut h = Topology::INPUT;
        for l in &self.plan {
            let mut x = h;
            if let Some(s) = l.skip {
                let up = t.push(Node::Upsample { src: h, factor: 2 });
                x = t.push(Node::Merge(vec![up, ids[s]]));
            }
            h = t.conv(x, k, l.stride, 1, pad);
            ids.push(h);
        }
        t
    }

    fn reference_receptive_field(&self) -> Option<usize> {
        (self.cfg == UNetConfig::default()).then_some(REFERENCE_RF)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::infer;

    #[test]
    fn default_layout() {
        let m = UNet::new(UNetConfig::default(), 0).unwrap();
        assert_eq!(m.total_stride(), 256);
        assert_eq!(m.param_count(), 3_511_561);
        assert_eq!(m.encoder_receptive_field(), 2561);
        let skips: Vec<Option<usize>> = m.plan.iter().map(|l| l.skip).collect();
        assert_eq!(&skips[9..], &[Some(7), Some(6), Some(5), Some(4), Some(3), Some(2), Some(1), Some(0), None]);
        let drops: Vec<usize> = (0..18).filter(|&i| m.plan[i].dropout).collect();
        assert_eq!(drops, vec![2, 5, 8]);
    }

    #[test]
    fn invalid_layouts() {
        let mut c = UNetConfig::default();
        c.layers[3].0 = 50;
        assert!(UNet::new(c, 0).is_err());
        let mut c = UNetConfig::default();
        c.layers[12].2 = 2;
        assert!(UNet::new(c, 0).is_err());
        assert!(UNetConfig::from_json(&serde_json::json!({"kernal": 11})).is_err());
    }

    fn tiny() -> UNetConfig {
        UNetConfig {
            layers: vec![(1, 4, 1), (4, 6, 2), (6, 6, 2), (6, 4, 1), (4, 4, 1), (4, 1, 1)],
            kernel: 5,
            dropout_period: 2,
            dropout: 0.2,
        }
    }

    #[test]
    fn output_length_and_zero_input() {
        let m = UNet::new(tiny(), 3).unwrap();
        for len in [1, 4, 37, 64] {
            let out = infer(&m, &vec![0.1; len], &ForwardOptions::default()).unwrap();
            assert_eq!(out[0].len(), len);
        }
        let z = infer(&m, &[0.0; 64], &ForwardOptions::default()).unwrap();
        assert!(z[0].iter().all(|v| v.is_finite()));
    }
}
