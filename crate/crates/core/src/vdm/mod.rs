//! Unconditional video diffusion: ε-prediction training and ancestral sampling.
//!
//! The diffusion chain lives in data space (a single channel for depth). The
//! network sees its input replicated to its configured channel count and its
//! prediction is averaged back to the data channels inside the graph, so
//! training and sampling use the same predictor.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::data::{Container, VideoTensor};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{mix, normal_vec, stream_rng, StreamRng};
use crate::schedule::{NoiseSchedule, ScheduleSpec, Timestep};
use crate::tensor::{Real, Tensor};
use crate::unet3d::{Bound, ParameterSet, UNet3D, UNet3DConfig};

/// Samples pushed through the network together while sampling.
const SAMPLE_CHUNK: usize = 8;

/// Noise predictor over data-space batches `[N, F, H, W, C]`, one timestep per sample.
pub trait EpsModel {
    fn predict(&self, x_t: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>>;
}

impl<F> EpsModel for F
where
    F: Fn(&Tensor<f32>, &[usize]) -> Result<Tensor<f32>>,
{
    fn predict(&self, x_t: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        self(x_t, t)
    }
}

/// Replicate a single-channel batch to `channels`; identity when they agree.
pub fn lift_channels<T: Real>(x: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
    let c = x.last_dim();
    if c == channels {
        return Ok(x.clone());
    }
    if c != 1 {
        return Err(Error::Shape(format!("cannot map {c} data channels onto {channels} model channels")));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("non-scalar") = channels;
    let data = x.data().iter().flat_map(|&v| std::iter::repeat_n(v, channels)).collect();
    Tensor::from_vec(&shape, data)
}

/// Channel mean of the network output, recorded on the tape.
fn lower_on_tape<T: Real>(tape: &mut Tape<T>, eps: Var, channels: usize) -> Result<Var> {
    let c = tape.value(eps).last_dim();
    if c == channels {
        return Ok(eps);
    }
    if channels != 1 {
        return Err(Error::Shape(format!("cannot map {c} model channels onto {channels} data channels")));
    }
    let w = tape.constant(Tensor::full(&[c, 1], T::one() / T::from_f64c(c as f64)));
    tape.linear(eps, w, None)
}

/// Data-space noise prediction for the data-space batch `x`.
pub(crate) fn predict_on_tape<T: Real>(
    net: &UNet3D,
    tape: &mut Tape<T>,
    bound: &Bound,
    x: &Tensor<T>,
    t: &[usize],
    cond: Option<&[Var]>,
    data_channels: usize,
) -> Result<Var> {
    let x = tape.constant(lift_channels(x, net.config().in_channels)?);
    let out = net.forward(tape, bound, x, t, cond, false)?;
    lower_on_tape(tape, out.eps.expect("full forward"), data_channels)
}

/// A U-Net with fixed parameters as an [`EpsModel`].
pub struct Denoiser<'a> {
    net: &'a UNet3D,
    params: &'a ParameterSet,
    data_channels: usize,
}

impl<'a> Denoiser<'a> {
    pub fn new(net: &'a UNet3D, params: &'a ParameterSet, data_channels: usize) -> Self {
        Self { net, params, data_channels }
    }
}

impl EpsModel for Denoiser<'_> {
    fn predict(&self, x_t: &Tensor<f32>, t: &[usize]) -> Result<Tensor<f32>> {
        let mut tape = Tape::inference();
        let bound = Bound::new(&mut tape, self.params, false);
        let eps = predict_on_tape(self.net, &mut tape, &bound, x_t, t, None, self.data_channels)?;
        Ok(tape.value(eps).clone())
    }
}

/// The `(x0, t, ε)` triples of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x0: Vec<VideoTensor>,
    pub t: Vec<Timestep>,
    pub eps: Vec<VideoTensor>,
}

impl TrainBatch {
    pub fn new(x0: Vec<VideoTensor>, t: Vec<Timestep>, eps: Vec<VideoTensor>) -> Result<Self> {
        if x0.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        if t.len() != x0.len() || eps.len() != x0.len() {
            return Err(Error::Shape(format!("batch lengths x0 {}, t {}, eps {}", x0.len(), t.len(), eps.len())));
        }
        if let Some(i) = x0.iter().zip(&eps).position(|(a, b)| a.dims() != b.dims()) {
            return Err(Error::Shape(format!("item {i}: x0 {:?} vs eps {:?}", x0[i].dims(), eps[i].dims())));
        }
        Ok(Self { x0, t, eps })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.t.iter().map(|t| t.get()).collect()
    }

    /// Stacked `x_t` for every item.
    pub fn noised(&self, sched: &NoiseSchedule) -> Result<Tensor<f32>> {
        let mut x = VideoTensor::stack(&self.x0)?;
        let len = self.x0[0].data().len();
        for (i, (x0, eps)) in self.x0.iter().zip(&self.eps).enumerate() {
            sched.noise_into(x0.data(), eps.data(), self.t[i], &mut x.data_mut()[i * len..(i + 1) * len]);
        }
        Ok(x)
    }
}

/// Seed of training step `step`.
pub(crate) fn step_seed(seed: u64, step: u64) -> u64 {
    mix(seed, step)
}

/// Dataset indices of one step, drawn with replacement from stream 0.
pub(crate) fn draw_indices(step_seed: u64, n_data: usize, batch_size: usize) -> Vec<usize> {
    let mut rng = stream_rng(step_seed, 0);
    (0..batch_size).map(|_| rng.random_range(0..n_data)).collect()
}

/// Generator of batch slot `j`: its timestep first, then its noise.
pub(crate) fn slot_rng(step_seed: u64, j: usize) -> StreamRng {
    stream_rng(step_seed, 1 + j as u64)
}

pub(crate) fn draw_slot(rng: &mut StreamRng, sched: &NoiseSchedule, dims: [usize; 4]) -> Result<(Timestep, VideoTensor)> {
    let t = sched.timestep(rng.random_range(1..=sched.timesteps()))?;
    let [f, h, w, c] = dims;
    let eps = VideoTensor::from_data(f, h, w, c, normal_vec(rng, f * h * w * c))?;
    Ok((t, eps))
}

/// The batch of step `step`; depends only on `(data, seed, step, batch_size)`.
pub fn draw_batch(data: &[VideoTensor], sched: &NoiseSchedule, batch_size: usize, seed: u64, step: u64) -> Result<TrainBatch> {
    if data.is_empty() {
        return Err(Error::invalid("training data must not be empty"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let s = step_seed(seed, step);
    let idx = draw_indices(s, data.len(), batch_size);
    let mut x0 = Vec::with_capacity(batch_size);
    let mut ts = Vec::with_capacity(batch_size);
    let mut eps = Vec::with_capacity(batch_size);
    for (j, &i) in idx.iter().enumerate() {
        let (t, e) = draw_slot(&mut slot_rng(s, j), sched, data[i].dims())?;
        x0.push(data[i].clone());
        ts.push(t);
        eps.push(e);
    }
    TrainBatch::new(x0, ts, eps)
}

/// Mean squared error between the batch noise and the model's prediction.
pub fn loss(model: &impl EpsModel, batch: &TrainBatch, sched: &NoiseSchedule) -> Result<f64> {
    let pred = model.predict(&batch.noised(sched)?, &batch.timesteps())?;
    let target = VideoTensor::stack(&batch.eps)?;
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs noise {:?}", pred.shape(), target.shape())));
    }
    if !pred.all_finite() {
        return Err(Error::NonFinite("noise prediction".into()));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / pred.len() as f64)
}

pub type Grads = BTreeMap<String, Tensor<f32>>;

/// Gradients of every bound parameter that received one.
pub(crate) fn collect_grads(tape: &Tape<f32>, bound: &Bound, loss: Var) -> Grads {
    let mut g = tape.backward(loss);
    bound.iter().filter_map(|(name, &v)| g.take(v).map(|t| (name.clone(), t))).collect()
}

fn loss_and_grads(net: &UNet3D, params: &ParameterSet, batch: &TrainBatch, sched: &NoiseSchedule) -> Result<(f32, Grads)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params, true);
    let channels = batch.x0[0].channels();
    let pred = predict_on_tape(net, &mut tape, &bound, &batch.noised(sched)?, &batch.timesteps(), None, channels)?;
    let target = tape.constant(VideoTensor::stack(&batch.eps)?);
    let l = tape.mse(pred, target)?;
    Ok((tape.value(l).data()[0], collect_grads(&tape, &bound, l)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optimizer: AdamConfig::default(), batch_size: 8, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Parameters, optimizer moments, update count and per-step loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParameterSet,
    pub optim: Adam,
    pub step: u64,
    pub losses: Vec<f32>,
}

impl TrainState {
    pub fn new(params: ParameterSet, optimizer: AdamConfig) -> Self {
        let optim = Adam::new(optimizer, &params);
        Self { params, optim, step: 0, losses: Vec::new() }
    }

    /// Mean loss over the first `window` recorded steps.
    pub fn initial_running_loss(&self, window: usize) -> Option<f64> {
        window_mean(self.losses.iter().take(window))
    }

    /// Mean loss over the last `window` recorded steps.
    pub fn final_running_loss(&self, window: usize) -> Option<f64> {
        window_mean(self.losses.iter().rev().take(window))
    }

    pub(crate) fn to_entries(&self, out: &mut Vec<(String, Tensor<f32>)>) {
        out.extend(self.params.to_entries("param."));
        out.extend(self.optim.m.to_entries("adam.m."));
        out.extend(self.optim.v.to_entries("adam.v."));
        out.push(("losses".into(), Tensor::from_vec(&[self.losses.len()], self.losses.clone()).expect("rank 1")));
    }

    pub(crate) fn from_entries(c: &Container, optimizer: AdamConfig, adam_t: u64, step: u64) -> Result<Self> {
        let params = ParameterSet::from_container(c, "param.");
        let m = ParameterSet::from_container(c, "adam.m.");
        let v = ParameterSet::from_container(c, "adam.v.");
        params.check_compatible(&m)?;
        params.check_compatible(&v)?;
        let losses = c.get("losses").ok_or_else(|| Error::Incompatible("no loss history".into()))?.data().to_vec();
        Ok(Self { params, optim: Adam { cfg: optimizer, m, v, t: adam_t }, step, losses })
    }
}

fn window_mean<'a>(it: impl Iterator<Item = &'a f32>) -> Option<f64> {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), &v| (s + v as f64, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs `steps` updates, each from `step_fn(params, step) -> (loss, grads)`.
pub(crate) fn run_updates(
    state: &mut TrainState,
    steps: u64,
    mut step_fn: impl FnMut(&ParameterSet, u64) -> Result<(f32, Grads)>,
) -> Result<()> {
    for _ in 0..steps {
        let step = state.step;
        let (loss, grads) = step_fn(&state.params, step).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { step },
            e => e,
        })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        state.optim.step(&mut state.params, &grads).map_err(|e| match e {
            Error::Diverged { .. } => Error::Diverged { step },
            e => e,
        })?;
        if !state.params.all_finite() {
            return Err(Error::Diverged { step });
        }
        state.losses.push(loss);
        state.step += 1;
    }
    Ok(())
}

/// `steps` updates of the ε-prediction loss on `data`.
pub fn train(
    net: &UNet3D,
    mut state: TrainState,
    data: &[VideoTensor],
    sched: &NoiseSchedule,
    steps: u64,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data must not be empty"));
    }
    state.optim.cfg = cfg.optimizer;
    run_updates(&mut state, steps, |params, step| {
        let batch = draw_batch(data, sched, cfg.batch_size, cfg.seed, step)?;
        loss_and_grads(net, params, &batch, sched)
    })?;
    Ok(state)
}

/// One reverse-chain instance: its current state and its private noise stream.
pub struct Chain {
    pub x: VideoTensor,
    noise: StreamRng,
}

impl Chain {
    /// Fresh chain at `x_T ~ N(0, I)` for sample seed `seed`.
    pub fn from_noise(dims: [usize; 4], seed: u64) -> Result<Self> {
        let [f, h, w, c] = dims;
        let x = VideoTensor::from_data(f, h, w, c, normal_vec(&mut stream_rng(seed, 0), f * h * w * c))?;
        Ok(Self::resume(x, seed))
    }

    /// Chain continuing from an existing state.
    pub fn resume(x: VideoTensor, seed: u64) -> Self {
        Self { x, noise: stream_rng(seed, 1) }
    }
}

/// Ancestral steps `from, from-1, …, 1` for every chain, results clamped to `[-1, 1]`.
/// Each step uses the noise estimate implied by the predicted `x0` clamped to `[-1, 1]`.
pub fn reverse_chain(model: &impl EpsModel, sched: &NoiseSchedule, mut chains: Vec<Chain>, from: usize) -> Result<Vec<VideoTensor>> {
    if from > sched.timesteps() {
        return Err(Error::invalid(format!("chain start {from} beyond schedule of length {}", sched.timesteps())));
    }
    if chains.is_empty() {
        return Ok(Vec::new());
    }
    let xs: Vec<VideoTensor> = chains.iter().map(|c| c.x.clone()).collect();
    let mut x = VideoTensor::stack(&xs)?;
    let n = chains.len();
    let len = xs[0].data().len();
    let mut prev = vec![0.0f32; len];
    let mut z = vec![0.0f32; len];
    for t in (1..=from).rev() {
        let ts = sched.timestep(t)?;
        let mut eps = model.predict(&x, &vec![t; n])?;
        if eps.shape() != x.shape() {
            return Err(Error::Shape(format!("prediction {:?} vs state {:?}", eps.shape(), x.shape())));
        }
        sched.clip_eps_into(x.data(), eps.data_mut(), ts);
        for (i, chain) in chains.iter_mut().enumerate() {
            if t > 1 {
                z = normal_vec(&mut chain.noise, len);
            }
            let span = i * len..(i + 1) * len;
            prev.copy_from_slice(&x.data()[span.clone()]);
            sched.denoise_into(&prev, &eps.data()[span.clone()], &z, ts, &mut x.data_mut()[span]);
        }
    }
    Ok(VideoTensor::unstack(&x)?.into_iter().map(VideoTensor::clamp_unit).collect())
}

/// `n` samples of shape `dims`; sample `i` depends only on `(seed, i)`.
pub fn sample(model: &impl EpsModel, sched: &NoiseSchedule, dims: [usize; 4], n: usize, seed: u64) -> Result<Vec<VideoTensor>> {
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(SAMPLE_CHUNK) {
        let chains =
            (start..n.min(start + SAMPLE_CHUNK)).map(|i| Chain::from_noise(dims, mix(seed, i as u64))).collect::<Result<Vec<_>>>()?;
        out.extend(reverse_chain(model, sched, chains, sched.timesteps())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    unet: UNet3DConfig,
    schedule: ScheduleSpec,
    data_channels: usize,
    step: u64,
    optimizer: AdamConfig,
    adam_t: u64,
    provenance: serde_json::Value,
}

const CHECKPOINT_KIND: &str = "vdm";

/// Depth-model checkpoint: network config, schedule, training state and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct VdmCheckpoint {
    pub unet: UNet3DConfig,
    pub schedule: ScheduleSpec,
    pub data_channels: usize,
    pub state: TrainState,
    pub provenance: serde_json::Value,
}

impl VdmCheckpoint {
    pub fn to_container(&self) -> Container {
        let meta = CheckpointMeta {
            kind: CHECKPOINT_KIND.into(),
            unet: self.unet.clone(),
            schedule: self.schedule,
            data_channels: self.data_channels,
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
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Incompatible(format!("depth checkpoint header: {e}")))?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Incompatible(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", meta.kind)));
        }
        meta.unet.validate()?;
        let state = TrainState::from_entries(c, meta.optimizer, meta.adam_t, meta.step)?;
        crate::unet3d::init_params(&meta.unet, 0)?.check_compatible(&state.params)?;
        Ok(Self { unet: meta.unet, schedule: meta.schedule, data_channels: meta.data_channels, state, provenance: meta.provenance })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Content hash of the serialized checkpoint.
    pub fn id(&self) -> String {
        crate::data::hex_prefix(&Sha256::digest(self.to_container().to_bytes()))
    }
}
