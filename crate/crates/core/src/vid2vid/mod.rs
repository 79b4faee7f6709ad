//! Depth-to-RGB conditional video diffusion with classifier-free guidance.
//!
//! Two U-Nets of identical layout: the depth branch runs encoder-only on the
//! conditioning depth video (same timestep as the video branch) and its
//! per-scale features are concatenated into the video branch's encoder.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::data::{Container, VideoTensor};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::schedule::{NoiseSchedule, ScheduleSpec, Timestep};
use crate::tensor::{Real, Tensor};
use crate::unet3d::{init_params, Bound, ParameterSet, UNet3D, UNet3DConfig};
use crate::vdm::{
    draw_indices, draw_slot, lift_channels, predict_on_tape, reverse_chain, run_updates, slot_rng, step_seed, Chain, Grads, TrainBatch,
    TrainConfig, TrainState,
};

const DEPTH_PREFIX: &str = "depth.";
const VIDEO_PREFIX: &str = "video.";

/// Conditioning input: a depth video or the null token, which is carried as
/// an all-zeros depth video.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditioningContext {
    Depth(VideoTensor),
    Null { frames: usize, height: usize, width: usize },
}

impl ConditioningContext {
    pub fn null_like(depth: &VideoTensor) -> Self {
        Self::Null { frames: depth.frames(), height: depth.height(), width: depth.width() }
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Self::Null { .. })
    }

    /// The video fed to the depth branch.
    pub fn video(&self) -> VideoTensor {
        match self {
            Self::Depth(v) => v.clone(),
            &Self::Null { frames, height, width } => VideoTensor::full(frames, height, width, 1, 0.0).expect("positive dims"),
        }
    }

    fn dims(&self) -> (usize, usize, usize) {
        match self {
            Self::Depth(v) => (v.frames(), v.height(), v.width()),
            &Self::Null { frames, height, width } => (frames, height, width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    /// Guidance weight ω.
    pub omega: f64,
    /// Probability of replacing the context by the null token during training.
    pub dropout_p: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { omega: 1.4, dropout_p: 0.2 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega >= 0.0 && self.omega.is_finite()) {
            return Err(Error::invalid(format!("guidance weight {} must be finite and non-negative", self.omega)));
        }
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::invalid(format!("dropout probability {} outside [0, 1]", self.dropout_p)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualConfig {
    pub depth: UNet3DConfig,
    pub video: UNet3DConfig,
}

impl DualConfig {
    /// Pairs an unconditional depth network with a video network of the same layout.
    pub fn from_depth(depth: &UNet3DConfig, rgb_channels: usize) -> Self {
        let video = UNet3DConfig { in_channels: rgb_channels, out_channels: rgb_channels, conditional: true, ..depth.clone() };
        Self { depth: UNet3DConfig { conditional: false, ..depth.clone() }, video }
    }

    pub fn validate(&self) -> Result<()> {
        self.depth.validate()?;
        self.video.validate()?;
        if self.depth.conditional || !self.video.conditional {
            return Err(Error::invalid("depth branch must be unconditional and video branch conditional"));
        }
        if self.depth.pyramid_shapes() != self.video.pyramid_shapes() {
            return Err(Error::Shape(format!(
                "depth pyramid {:?} does not match video concatenation sites {:?}",
                self.depth.pyramid_shapes(),
                self.video.pyramid_shapes()
            )));
        }
        Ok(())
    }
}

/// Parameters of both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct DualParams<T: Real = f32> {
    pub depth: ParameterSet<T>,
    pub video: ParameterSet<T>,
}

impl<T: Real> DualParams<T> {
    /// Single set with `depth.` / `video.` name prefixes.
    pub fn merge(&self) -> ParameterSet<T> {
        let mut out = ParameterSet::new();
        for (prefix, set) in [(DEPTH_PREFIX, &self.depth), (VIDEO_PREFIX, &self.video)] {
            for (name, t) in set.iter() {
                out.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        out
    }

    /// Inverse of [`DualParams::merge`].
    pub fn split(merged: &ParameterSet<T>) -> Result<Self> {
        let (mut depth, mut video) = (ParameterSet::new(), ParameterSet::new());
        for (name, t) in merged.iter() {
            if let Some(rest) = name.strip_prefix(DEPTH_PREFIX) {
                depth.insert(rest, t.clone());
            } else if let Some(rest) = name.strip_prefix(VIDEO_PREFIX) {
                video.insert(rest, t.clone());
            } else {
                return Err(Error::Incompatible(format!("parameter {name} belongs to neither branch")));
            }
        }
        Ok(Self { depth, video })
    }
}

/// Fresh parameters; pass stage-1 weights as `depth` to initialize the depth branch from them.
pub fn init_dual_params(cfg: &DualConfig, seed: u64, depth: Option<ParameterSet>) -> Result<DualParams> {
    cfg.validate()?;
    let fresh_depth = init_params(&cfg.depth, seed)?;
    let depth = match depth {
        Some(d) => {
            fresh_depth.check_compatible(&d).map_err(|e| Error::Incompatible(format!("depth branch vs stage-1 weights: {e}")))?;
            d
        }
        None => fresh_depth,
    };
    Ok(DualParams { depth, video: init_params(&cfg.video, crate::rng::mix(seed, 1))? })
}

pub struct DualUNet {
    cfg: DualConfig,
    depth: UNet3D,
    video: UNet3D,
}

impl DualUNet {
    pub fn new(cfg: DualConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { depth: UNet3D::new(cfg.depth.clone())?, video: UNet3D::new(cfg.video.clone())?, cfg })
    }

    pub fn config(&self) -> &DualConfig {
        &self.cfg
    }

    /// Bind both branches of a merged parameter set.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, merged: &ParameterSet<T>, trainable: bool) -> Result<DualBound> {
        let p = DualParams::split(merged)?;
        Ok(DualBound { depth: Bound::new(tape, &p.depth, trainable), video: Bound::new(tape, &p.video, trainable) })
    }

    /// Noise prediction for RGB batch `x_t` given the stacked single-channel context batch `ctx`.
    pub fn eps_on_tape<T: Real>(&self, tape: &mut Tape<T>, p: &DualBound, x_t: &Tensor<T>, ctx: &Tensor<T>, t: &[usize]) -> Result<Var> {
        let c = tape.constant(lift_channels(ctx, self.cfg.depth.in_channels)?);
        let feats = self.depth.forward(tape, &p.depth, c, t, None, true)?.feats;
        predict_on_tape(&self.video, tape, &p.video, x_t, t, Some(&feats), x_t.last_dim())
    }
}

pub struct DualBound {
    depth: Bound,
    video: Bound,
}

impl DualBound {
    /// Gradients of both branches under merged (prefixed) names.
    pub fn grads<T: Real>(&self, tape: &Tape<T>, loss: Var) -> BTreeMap<String, Tensor<T>> {
        let mut g = tape.backward(loss);
        let mut out = BTreeMap::new();
        for (prefix, bound) in [(DEPTH_PREFIX, &self.depth), (VIDEO_PREFIX, &self.video)] {
            for (name, &v) in bound.iter() {
                if let Some(t) = g.take(v) {
                    out.insert(format!("{prefix}{name}"), t);
                }
            }
        }
        out
    }
}

/// Conditional noise predictor over batches, one context per sample.
pub trait ConditionalModel {
    fn predict(&self, x_t: &Tensor<f32>, ctx: &[ConditioningContext], t: &[usize]) -> Result<Tensor<f32>>;
}

fn stack_contexts(ctx: &[ConditioningContext]) -> Result<Tensor<f32>> {
    VideoTensor::stack(&ctx.iter().map(ConditioningContext::video).collect::<Vec<_>>())
}

/// The dual network with fixed parameters.
pub struct DualDenoiser<'a> {
    net: &'a DualUNet,
    merged: ParameterSet,
}

impl<'a> DualDenoiser<'a> {
    pub fn new(net: &'a DualUNet, params: &DualParams) -> Self {
        Self { net, merged: params.merge() }
    }
}

impl ConditionalModel for DualDenoiser<'_> {
    fn predict(&self, x_t: &Tensor<f32>, ctx: &[ConditioningContext], t: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::inference();
        let bound = self.net.bind(&mut tape, &self.merged, false)?;
        let eps = self.net.eps_on_tape(&mut tape, &bound, x_t, &stack_contexts(ctx)?, t)?;
        Ok(tape.value(eps).clone())
    }
}

fn check_context(net: &DualUNet, x_t: &VideoTensor, ctx: &ConditioningContext) -> Result<()> {
    let v = &net.cfg.video;
    let want = (v.frames, v.height, v.width);
    if ctx.dims() != want || (x_t.frames(), x_t.height(), x_t.width()) != want {
        return Err(Error::Shape(format!("x_t {:?} and context {:?} must both match {want:?}", x_t.dims(), ctx.dims())));
    }
    if let ConditioningContext::Depth(d) = ctx {
        if d.channels() != 1 {
            return Err(Error::Shape(format!("depth context must have one channel, got {}", d.channels())));
        }
    }
    Ok(())
}

/// `ε_θ(x_t, c, t)` for a single video.
pub fn conditional_eps(
    net: &DualUNet,
    params: &DualParams,
    x_t: &VideoTensor,
    ctx: &ConditioningContext,
    t: Timestep,
) -> Result<VideoTensor> {
    check_context(net, x_t, ctx)?;
    let x = VideoTensor::stack(std::slice::from_ref(x_t))?;
    let eps = DualDenoiser::new(net, params).predict(&x, std::slice::from_ref(ctx), &[t.get()])?;
    Ok(VideoTensor::unstack(&eps)?.remove(0))
}

/// `(1+ω)·ε_c − ω·ε_∅`; `ε_c` itself when `ω = 0`.
pub fn combine_guidance(eps_c: &Tensor<f32>, eps_null: &Tensor<f32>, omega: f64) -> Result<Tensor<f32>> {
    if eps_c.shape() != eps_null.shape() {
        return Err(Error::Shape(format!("conditional {:?} vs null {:?}", eps_c.shape(), eps_null.shape())));
    }
    if omega == 0.0 {
        return Ok(eps_c.clone());
    }
    let (a, b) = ((1.0 + omega) as f32, omega as f32);
    let data = eps_c.data().iter().zip(eps_null.data()).map(|(&c, &n)| a * c - b * n).collect();
    Tensor::from_vec(eps_c.shape(), data)
}

/// Guided prediction for real contexts; the null pass is skipped at `ω = 0`.
pub fn guided_eps_batch(
    model: &impl ConditionalModel,
    x_t: &Tensor<f32>,
    ctx: &[ConditioningContext],
    t: &[usize],
    omega: f64,
) -> Result<Tensor<f32>> {
    if ctx.iter().any(ConditioningContext::is_null) {
        return Err(Error::invalid("guidance needs a real context, got the null token"));
    }
    let eps_c = model.predict(x_t, ctx, t)?;
    if omega == 0.0 {
        return Ok(eps_c);
    }
    let nulls: Vec<ConditioningContext> = ctx
        .iter()
        .map(|c| {
            let (frames, height, width) = c.dims();
            ConditioningContext::Null { frames, height, width }
        })
        .collect();
    let eps_null = model.predict(x_t, &nulls, t)?;
    combine_guidance(&eps_c, &eps_null, omega)
}

/// Single-video guided prediction.
pub fn guided_eps(
    net: &DualUNet,
    params: &DualParams,
    x_t: &VideoTensor,
    ctx: &ConditioningContext,
    t: Timestep,
    omega: f64,
) -> Result<VideoTensor> {
    check_context(net, x_t, ctx)?;
    let x = VideoTensor::stack(std::slice::from_ref(x_t))?;
    let eps = guided_eps_batch(&DualDenoiser::new(net, params), &x, std::slice::from_ref(ctx), &[t.get()], omega)?;
    Ok(VideoTensor::unstack(&eps)?.remove(0))
}

/// Noise triples for the RGB targets plus the (possibly dropped) contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub noise: TrainBatch,
    pub ctx: Vec<ConditioningContext>,
}

/// Batch of step `step`. Slot `j` draws its timestep, its noise and then its
/// dropout variate `u` (context nulled when `u < p`) from one stream.
pub fn draw_pair_batch(
    rgb: &[VideoTensor],
    depth: &[VideoTensor],
    sched: &NoiseSchedule,
    batch_size: usize,
    dropout_p: f64,
    seed: u64,
    step: u64,
) -> Result<PairBatch> {
    if rgb.is_empty() || rgb.len() != depth.len() {
        return Err(Error::invalid(format!("need matching non-empty rgb/depth lists, got {} and {}", rgb.len(), depth.len())));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let s = step_seed(seed, step);
    let (mut x0, mut ts, mut eps, mut ctx) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (j, i) in draw_indices(s, rgb.len(), batch_size).into_iter().enumerate() {
        let mut rng = slot_rng(s, j);
        let (t, e) = draw_slot(&mut rng, sched, rgb[i].dims())?;
        let u: f64 = rng.random();
        x0.push(rgb[i].clone());
        ts.push(t);
        eps.push(e);
        ctx.push(if u < dropout_p { ConditioningContext::null_like(&depth[i]) } else { ConditioningContext::Depth(depth[i].clone()) });
    }
    Ok(PairBatch { noise: TrainBatch::new(x0, ts, eps)?, ctx })
}

/// ε-prediction loss of a conditional model on a drawn batch.
pub fn pair_loss(model: &impl ConditionalModel, batch: &PairBatch, sched: &NoiseSchedule) -> Result<f64> {
    let b = &batch.noise;
    let pred = model.predict(&b.noised(sched)?, &batch.ctx, &b.timesteps())?;
    let target = VideoTensor::stack(&b.eps)?;
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs noise {:?}", pred.shape(), target.shape())));
    }
    if !pred.all_finite() {
        return Err(Error::NonFinite("noise prediction".into()));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

/// Loss and gradients for both branches on one batch.
pub fn train_step(net: &DualUNet, merged: &ParameterSet, batch: &PairBatch, sched: &NoiseSchedule) -> Result<(f32, Grads)> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, merged, true)?;
    let b = &batch.noise;
    let pred = net.eps_on_tape(&mut tape, &bound, &b.noised(sched)?, &stack_contexts(&batch.ctx)?, &b.timesteps())?;
    let target = tape.constant(VideoTensor::stack(&b.eps)?);
    let l = tape.mse(pred, target)?;
    Ok((tape.value(l).data()[0], bound.grads(&tape, l)))
}

/// `steps` updates on `(rgb, depth)` pairs; `state.params` is the merged set.
#[allow(clippy::too_many_arguments)]
pub fn train(
    net: &DualUNet,
    mut state: TrainState,
    rgb: &[VideoTensor],
    depth: &[VideoTensor],
    sched: &NoiseSchedule,
    steps: u64,
    cfg: &TrainConfig,
    guidance: &GuidanceConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    guidance.validate()?;
    state.optim.cfg = cfg.optimizer;
    run_updates(&mut state, steps, |params, step| {
        let batch = draw_pair_batch(rgb, depth, sched, cfg.batch_size, guidance.dropout_p, cfg.seed, step)?;
        train_step(net, params, &batch, sched)
    })?;
    Ok(state)
}

/// Guided ancestral sampling, one chain per `(depth, seed)` pair.
pub fn sample_conditional_batch(
    model: &impl ConditionalModel,
    rgb_channels: usize,
    depths: &[VideoTensor],
    seeds: &[u64],
    sched: &NoiseSchedule,
    omega: f64,
) -> Result<Vec<VideoTensor>> {
    if depths.len() != seeds.len() {
        return Err(Error::invalid(format!("{} depth videos but {} seeds", depths.len(), seeds.len())));
    }
    let ctx: Vec<ConditioningContext> = depths.iter().cloned().map(ConditioningContext::Depth).collect();
    let chains = depths
        .iter()
        .zip(seeds)
        .map(|(d, &s)| Chain::from_noise([d.frames(), d.height(), d.width(), rgb_channels], s))
        .collect::<Result<Vec<_>>>()?;
    let eps = |x: &Tensor<f32>, t: &[usize]| guided_eps_batch(model, x, &ctx, t, omega);
    reverse_chain(&eps, sched, chains, sched.timesteps())
}

/// RGB video for one depth video.
pub fn sample_conditional(
    net: &DualUNet,
    params: &DualParams,
    depth: &VideoTensor,
    sched: &NoiseSchedule,
    omega: f64,
    seed: u64,
) -> Result<VideoTensor> {
    let v = &net.cfg.video;
    if depth.dims() != [v.frames, v.height, v.width, 1] {
        return Err(Error::Shape(format!("depth {:?} vs model {:?}", depth.dims(), [v.frames, v.height, v.width, 1])));
    }
    let model = DualDenoiser::new(net, params);
    Ok(sample_conditional_batch(&model, v.out_channels, std::slice::from_ref(depth), &[seed], sched, omega)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    dual: DualConfig,
    schedule: ScheduleSpec,
    guidance: GuidanceConfig,
    step: u64,
    optimizer: AdamConfig,
    adam_t: u64,
    provenance: serde_json::Value,
}

const CHECKPOINT_KIND: &str = "vid2vid";

/// Conditional-model checkpoint; `state.params` holds both branches, prefixed.
#[derive(Debug, Clone, PartialEq)]
pub struct DualCheckpoint {
    pub dual: DualConfig,
    pub schedule: ScheduleSpec,
    pub guidance: GuidanceConfig,
    pub state: TrainState,
    pub provenance: serde_json::Value,
}

impl DualCheckpoint {
    pub fn params(&self) -> Result<DualParams> {
        DualParams::split(&self.state.params)
    }

    pub fn to_container(&self) -> Container {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            dual: self.dual.clone(),
            schedule: self.schedule,
            guidance: self.guidance,
            step: self.state.step,
            optimizer: self.state.optim.cfg,
            adam_t: self.state.optim.t,
            provenance: self.provenance.clone(),
        };
        let mut entries = Vec::new();
        self.state.to_entries(&mut entries);
        Container { entries, meta: serde_json::to_value(meta).expect("meta serializes") }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Incompatible(format!("dual checkpoint header: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Incompatible(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", meta.kind)));
        }
        meta.dual.validate()?;
        let state = TrainState::from_entries(c, meta.optimizer, meta.adam_t, meta.step)?;
        init_dual_params(&meta.dual, 0, None)?.merge().check_compatible(&state.params)?;
        Ok(Self { dual: meta.dual, schedule: meta.schedule, guidance: meta.guidance, state, provenance: meta.provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub fn id(&self) -> String {
        crate::data::hex_prefix(&Sha256::digest(self.to_container().to_bytes()))
    }
}

#[cfg(test)]
mod tests;
