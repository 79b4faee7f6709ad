//! 3D U-Net noise predictor.
//!
//! Each resolution scale stacks residual blocks of 3×3×3 convolutions; scales
//! marked for attention follow every block with spatial attention (within each
//! frame) and then temporal attention (across frames at each position).
//! Downsampling halves height and width only, so every scale keeps all frames.
//!
//! A conditional network concatenates an external [`FeaturePyramid`] onto the
//! input of the first block of each encoder scale. The pyramid emitted by a
//! forward pass is the encoder output of each scale, before downsampling.

mod params;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use params::ParameterSet;
use params::{materialize, Init, ParamSpec};

use crate::autograd::{AttnAxis, Tape, Var};
use crate::data::VideoTensor;
use crate::error::{Error, Result};
use crate::schedule::Timestep;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNet3DConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub blocks_per_resolution: usize,
    pub attn_head_dim: usize,
    /// Scales (0 = finest) that carry attention; `None` means the two coarsest.
    #[serde(default)]
    pub attn_scales: Option<Vec<usize>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub time_embed_dim: usize,
    /// Consumes a feature pyramid from a conditioning network.
    #[serde(default)]
    pub conditional: bool,
}

impl UNet3DConfig {
    /// 64 base channels, multipliers 1-2-4-8, two blocks per scale, head dim 32,
    /// ten 64×64 RGB frames.
    pub fn full_scale() -> Self {
        Self {
            base_channels: 64,
            channel_mults: vec![1, 2, 4, 8],
            blocks_per_resolution: 2,
            attn_head_dim: 32,
            attn_scales: None,
            in_channels: 3,
            out_channels: 3,
            frames: 10,
            height: 64,
            width: 64,
            time_embed_dim: 256,
            conditional: false,
        }
    }

    pub fn scales(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn channels_at(&self, scale: usize) -> usize {
        self.base_channels * self.channel_mults[scale]
    }

    pub fn has_attention(&self, scale: usize) -> bool {
        match &self.attn_scales {
            Some(s) => s.contains(&scale),
            None => scale + 2 >= self.scales(),
        }
    }

    /// `[F, H/2^k, W/2^k, C_k]` for every scale `k`.
    pub fn pyramid_shapes(&self) -> Vec<[usize; 4]> {
        (0..self.scales()).map(|k| [self.frames, self.height >> k, self.width >> k, self.channels_at(k)]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.base_channels == 0 || self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad("base channels and multipliers must be positive".into());
        }
        if self.blocks_per_resolution == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("blocks per resolution and channel counts must be positive".into());
        }
        if self.frames == 0 || self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("frames must be positive and time embedding dim even, got {}", self.time_embed_dim));
        }
        let factor = 1usize << (self.scales() - 1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return bad(format!("{}x{} not divisible by {factor}", self.height, self.width));
        }
        if let Some(s) = &self.attn_scales {
            if let Some(k) = s.iter().find(|&&k| k >= self.scales()) {
                return bad(format!("attention scale {k} out of range"));
            }
        }
        for k in 0..self.scales() {
            if self.has_attention(k) && (self.attn_head_dim == 0 || !self.channels_at(k).is_multiple_of(self.attn_head_dim)) {
                return bad(format!("scale {k}: {} channels not divisible by head dim {}", self.channels_at(k), self.attn_head_dim));
            }
        }
        Ok(())
    }

    pub(crate) fn layout(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let e = self.time_embed_dim;
        linear_spec(&mut specs, "time.lin0", e, e);
        linear_spec(&mut specs, "time.lin1", e, e);
        conv_spec(&mut specs, "conv_in", 3, self.in_channels, self.channels_at(0), false);
        let mut cur = self.channels_at(0);
        let mut skips = Vec::new();
        for k in 0..self.scales() {
            let ck = self.channels_at(k);
            for j in 0..self.blocks_per_resolution {
                let cin = cur + if self.conditional && j == 0 { ck } else { 0 };
                res_spec(&mut specs, &format!("enc.{k}.{j}"), cin, ck, e);
                cur = ck;
                if self.has_attention(k) {
                    attn_spec(&mut specs, &format!("enc.{k}.{j}.attn"), ck);
                }
                skips.push(ck);
            }
            if k + 1 < self.scales() {
                conv_spec(&mut specs, &format!("enc.{k}.down"), 3, ck, ck, false);
            }
        }
        res_spec(&mut specs, "mid.res0", cur, cur, e);
        if self.has_attention(self.scales() - 1) {
            attn_spec(&mut specs, "mid.attn", cur);
        }
        res_spec(&mut specs, "mid.res1", cur, cur, e);
        for k in (0..self.scales()).rev() {
            let ck = self.channels_at(k);
            for j in 0..self.blocks_per_resolution {
                let skip = skips.pop().expect("one skip per encoder block");
                res_spec(&mut specs, &format!("dec.{k}.{j}"), cur + skip, ck, e);
                cur = ck;
                if self.has_attention(k) {
                    attn_spec(&mut specs, &format!("dec.{k}.{j}.attn"), ck);
                }
            }
            if k > 0 {
                conv_spec(&mut specs, &format!("dec.{k}.up"), 3, ck, ck, false);
            }
        }
        norm_spec(&mut specs, "out.norm", cur);
        conv_spec(&mut specs, "out.conv", 3, cur, self.out_channels, true);
        specs
    }

    /// Parameter count implied by the architecture, without allocating.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

fn conv_spec(specs: &mut Vec<ParamSpec>, name: &str, k: usize, cin: usize, cout: usize, zero: bool) {
    let init = if zero { Init::Zeros } else { Init::FanIn(k * k * k * cin) };
    specs.push(ParamSpec { name: format!("{name}.w"), shape: vec![k, k, k, cin, cout], init });
    specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![cout], init: Init::Zeros });
}

fn linear_spec(specs: &mut Vec<ParamSpec>, name: &str, din: usize, dout: usize) {
    specs.push(ParamSpec { name: format!("{name}.w"), shape: vec![din, dout], init: Init::FanIn(din) });
    specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![dout], init: Init::Zeros });
}

fn norm_spec(specs: &mut Vec<ParamSpec>, name: &str, c: usize) {
    specs.push(ParamSpec { name: format!("{name}.g"), shape: vec![c], init: Init::Ones });
    specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![c], init: Init::Zeros });
}

fn res_spec(specs: &mut Vec<ParamSpec>, prefix: &str, cin: usize, cout: usize, e: usize) {
    norm_spec(specs, &format!("{prefix}.res.norm1"), cin);
    conv_spec(specs, &format!("{prefix}.res.conv1"), 3, cin, cout, false);
    linear_spec(specs, &format!("{prefix}.res.temb"), e, cout);
    norm_spec(specs, &format!("{prefix}.res.norm2"), cout);
    conv_spec(specs, &format!("{prefix}.res.conv2"), 3, cout, cout, false);
    if cin != cout {
        conv_spec(specs, &format!("{prefix}.res.skip"), 1, cin, cout, false);
    }
}

fn attn_spec(specs: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    for axis in ["spatial", "temporal"] {
        norm_spec(specs, &format!("{prefix}.{axis}.norm"), c);
        linear_spec(specs, &format!("{prefix}.{axis}.qkv"), c, 3 * c);
        linear_spec(specs, &format!("{prefix}.{axis}.proj"), c, c);
    }
}

/// Group count for `c` channels: the largest divisor of `c` that is at most 8
/// and leaves at least 4 channels per group (a single group below 8 channels).
///
/// One channel per group would cancel the per-channel timestep bias.
pub fn norm_groups(c: usize) -> usize {
    let cap = (c / 4).clamp(1, 8);
    (1..=cap).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}

/// Deterministic initialization: fan-in scaled normals for weights, zero
/// biases, unit norm gains and an all-zero output convolution.
pub fn init_params(cfg: &UNet3DConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    Ok(materialize(&cfg.layout(), seed))
}

/// `[sin(t·ω_0..ω_{d/2}), cos(t·ω_0..ω_{d/2})]` with `ω_i = 10000^{-i/(d/2)}`.
pub fn timestep_embedding(t: usize, dim: usize, total: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("timestep embedding dim must be even and positive, got {dim}")));
    }
    if t > total {
        return Err(Error::invalid(format!("timestep {t} exceeds {total}")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp()).collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t as f64 * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    Ok(out)
}

/// Per-scale encoder features of one video, `[F, H/2^k, W/2^k, C_k]` at scale `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub scales: Vec<Tensor<f32>>,
}

/// Parameters bound as tape leaves.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    /// Bind every parameter as a trainable leaf (or a constant when `trainable` is false).
    pub fn new<T: Real>(tape: &mut Tape<T>, params: &ParameterSet<T>, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Incompatible(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub struct UNetOutput {
    /// Noise prediction `[N, F, H, W, out]`; absent in encoder-only mode.
    pub eps: Option<Var>,
    /// Encoder features, one `[N, F, H_k, W_k, C_k]` per scale.
    pub feats: Vec<Var>,
}

pub struct UNet3D {
    cfg: UNet3DConfig,
}

impl UNet3D {
    pub fn new(cfg: UNet3DConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &UNet3DConfig {
        &self.cfg
    }

    /// Batched forward pass on `x: [N, F, H, W, in]` with one timestep per sample.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        timesteps: &[usize],
        cond: Option<&[Var]>,
        encoder_only: bool,
    ) -> Result<UNetOutput> {
        let cfg = &self.cfg;
        let xs = tape.value(x).shape().to_vec();
        let expect = [timesteps.len(), cfg.frames, cfg.height, cfg.width, cfg.in_channels];
        if xs != expect {
            return Err(Error::Shape(format!("unet input {xs:?}, config expects {expect:?}")));
        }
        let n = timesteps.len();
        match (cfg.conditional, cond) {
            (true, None) => return Err(Error::invalid("conditional network needs a feature pyramid")),
            (false, Some(_)) => return Err(Error::invalid("unconditional network given a feature pyramid")),
            (true, Some(c)) => {
                if c.len() != cfg.scales() {
                    return Err(Error::Shape(format!("pyramid has {} scales, expected {}", c.len(), cfg.scales())));
                }
                for (k, (&v, s)) in c.iter().zip(cfg.pyramid_shapes()).enumerate() {
                    let want = [n, s[0], s[1], s[2], s[3]];
                    if tape.value(v).shape() != want {
                        return Err(Error::Shape(format!("pyramid scale {k}: got {:?}, expected {want:?}", tape.value(v).shape())));
                    }
                }
            }
            (false, None) => {}
        }

        let e = cfg.time_embed_dim;
        let mut sinus = Vec::with_capacity(n * e);
        for &t in timesteps {
            sinus.extend(timestep_embedding(t, e, usize::MAX)?.into_iter().map(T::from_f64c));
        }
        let sinus = tape.constant(Tensor::from_vec(&[n, e], sinus)?);
        let emb = tape.linear(sinus, p.get("time.lin0.w")?, Some(p.get("time.lin0.b")?))?;
        let emb = tape.silu(emb);
        let emb = tape.linear(emb, p.get("time.lin1.w")?, Some(p.get("time.lin1.b")?))?;
        let emb = tape.silu(emb);

        let mut h = conv(tape, p, "conv_in", x, 1)?;
        let mut skips = Vec::new();
        let mut feats = Vec::with_capacity(cfg.scales());
        for k in 0..cfg.scales() {
            for j in 0..cfg.blocks_per_resolution {
                if j == 0 {
                    if let Some(c) = cond {
                        h = tape.concat_channels(h, c[k]).map_err(|e| Error::Shape(format!("scale {k}: {e}")))?;
                    }
                }
                h = res_block(tape, p, &format!("enc.{k}.{j}"), h, emb)?;
                if cfg.has_attention(k) {
                    h = attn_block(tape, p, &format!("enc.{k}.{j}.attn"), h, cfg.attn_head_dim)?;
                }
                skips.push(h);
            }
            feats.push(h);
            if k + 1 < cfg.scales() {
                h = conv(tape, p, &format!("enc.{k}.down"), h, 2)?;
            }
        }
        if encoder_only {
            return Ok(UNetOutput { eps: None, feats });
        }

        h = res_block(tape, p, "mid.res0", h, emb)?;
        if cfg.has_attention(cfg.scales() - 1) {
            h = attn_block(tape, p, "mid.attn", h, cfg.attn_head_dim)?;
        }
        h = res_block(tape, p, "mid.res1", h, emb)?;
        for k in (0..cfg.scales()).rev() {
            for j in 0..cfg.blocks_per_resolution {
                let skip = skips.pop().expect("one skip per encoder block");
                h = tape.concat_channels(h, skip)?;
                h = res_block(tape, p, &format!("dec.{k}.{j}"), h, emb)?;
                if cfg.has_attention(k) {
                    h = attn_block(tape, p, &format!("dec.{k}.{j}.attn"), h, cfg.attn_head_dim)?;
                }
            }
            if k > 0 {
                h = tape.upsample2x(h)?;
                h = conv(tape, p, &format!("dec.{k}.up"), h, 1)?;
            }
        }
        h = norm(tape, p, "out.norm", h)?;
        h = tape.silu(h);
        let eps = conv(tape, p, "out.conv", h, 1)?;
        Ok(UNetOutput { eps: Some(eps), feats })
    }
}

fn conv<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    tape.conv3d(x, p.get(&format!("{name}.w"))?, p.get(&format!("{name}.b"))?, stride)
}

fn norm<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let c = tape.value(x).last_dim();
    tape.group_norm(x, p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?, norm_groups(c))
}

fn linear<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    tape.linear(x, p.get(&format!("{name}.w"))?, Some(p.get(&format!("{name}.b"))?))
}

/// norm → SiLU → conv, timestep bias, norm → SiLU → conv, plus (projected) identity.
fn res_block<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var, emb: Var) -> Result<Var> {
    let r = format!("{prefix}.res");
    let h = norm(tape, p, &format!("{r}.norm1"), x)?;
    let h = tape.silu(h);
    let h = conv(tape, p, &format!("{r}.conv1"), h, 1)?;
    let bias = linear(tape, p, &format!("{r}.temb"), emb)?;
    let h = tape.add_channel_bias(h, bias)?;
    let h = norm(tape, p, &format!("{r}.norm2"), h)?;
    let h = tape.silu(h);
    let h = conv(tape, p, &format!("{r}.conv2"), h, 1)?;
    let skip = if p.vars.contains_key(&format!("{r}.skip.w")) { conv(tape, p, &format!("{r}.skip"), x, 1)? } else { x };
    tape.add(h, skip)
}

fn attention_sublayer<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var, axis: AttnAxis, head_dim: usize) -> Result<Var> {
    let heads = tape.value(x).last_dim() / head_dim;
    let h = norm(tape, p, &format!("{prefix}.norm"), x)?;
    let qkv = linear(tape, p, &format!("{prefix}.qkv"), h)?;
    let a = tape.attention(qkv, axis, heads)?;
    let o = linear(tape, p, &format!("{prefix}.proj"), a)?;
    tape.add(x, o)
}

/// Spatial attention within each frame, then temporal attention across frames.
fn attn_block<T: Real>(tape: &mut Tape<T>, p: &Bound, prefix: &str, x: Var, head_dim: usize) -> Result<Var> {
    let h = attention_sublayer(tape, p, &format!("{prefix}.spatial"), x, AttnAxis::Spatial, head_dim)?;
    attention_sublayer(tape, p, &format!("{prefix}.temporal"), h, AttnAxis::Temporal, head_dim)
}

/// Single-video forward pass: returns the noise prediction and this pass's encoder pyramid.
pub fn unet_forward(
    cfg: &UNet3DConfig,
    params: &ParameterSet,
    x: &VideoTensor,
    t: Timestep,
    cond_feats: Option<&FeaturePyramid>,
) -> Result<(VideoTensor, FeaturePyramid)> {
    let net = UNet3D::new(cfg.clone())?;
    let mut tape = Tape::<f32>::inference();
    let bound = Bound::new(&mut tape, params, false);
    let [f, h, w, c] = x.dims();
    let xv = tape.constant(Tensor::from_vec(&[1, f, h, w, c], x.data().to_vec())?);
    let cond = match cond_feats {
        Some(pyr) => Some(
            pyr.scales
                .iter()
                .map(|s| {
                    let mut shape = vec![1];
                    shape.extend_from_slice(s.shape());
                    Ok(tape.constant(s.clone().reshape(&shape)?))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let out = net.forward(&mut tape, &bound, xv, &[t.get()], cond.as_deref(), false)?;
    let eps = tape.value(out.eps.expect("full forward")).clone();
    let eps = VideoTensor::from_tensor(eps.reshape(&[f, h, w, cfg.out_channels])?)?;
    let scales = out
        .feats
        .iter()
        .map(|&v| {
            let t = tape.value(v).clone();
            let shape = t.shape()[1..].to_vec();
            t.reshape(&shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((eps, FeaturePyramid { scales }))
}
