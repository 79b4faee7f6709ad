//! Denoised-depth dataset construction, two-stage training and end-to-end generation.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DerivedFrom, PairedSample, SampleMeta, SampleSource, VideoTensor};
use crate::error::{Error, Result};
use crate::rng::{mix, normal_vec, stream_rng};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::unet3d::{init_params, UNet3D, UNet3DConfig};
use crate::vdm::{self, reverse_chain, Chain, Denoiser, TrainConfig, TrainState, VdmCheckpoint};
use crate::vid2vid::{self, init_dual_params, DualCheckpoint, DualConfig, DualDenoiser, DualUNet, GuidanceConfig};

/// Chains pushed through the network together by the builder and generator.
const CHUNK: usize = 8;
const MIX_TAG: u64 = 0x006d_6978;

pub const DEPTH_CHECKPOINT_FILE: &str = "depth.gdt";
pub const DUAL_CHECKPOINT_FILE: &str = "dual.gdt";
pub const DENOISED_DIR: &str = "denoised";
pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTraining {
    pub steps: u64,
    pub init_seed: u64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub schedule: ScheduleSpec,
    /// Depth network; the vid2vid branches share its layout.
    pub depth_model: UNet3DConfig,
    pub rgb_channels: usize,
    pub stage1: StageTraining,
    pub stage2: StageTraining,
    pub guidance: GuidanceConfig,
    /// Builder noise level; `None` means a quarter of the schedule.
    #[serde(default)]
    pub t_star: Option<usize>,
    pub builder_seed: u64,
    /// Stage 2 conditions on re-denoised depth when set, raw depth otherwise.
    pub denoised: bool,
    /// Fraction of stage-2 samples that use the re-denoised depth.
    pub mix_ratio: f64,
}

impl StageConfig {
    pub fn t_star(&self) -> usize {
        self.t_star.unwrap_or(self.schedule.timesteps / 4)
    }

    pub fn dual(&self) -> DualConfig {
        DualConfig::from_depth(&self.depth_model, self.rgb_channels)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.dual().validate()?;
        self.stage1.train.validate()?;
        self.stage2.train.validate()?;
        self.guidance.validate()?;
        if self.t_star() > self.schedule.timesteps {
            return Err(Error::invalid(format!("t_star {} beyond T = {}", self.t_star(), self.schedule.timesteps)));
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return Err(Error::invalid(format!("mix ratio {} outside [0, 1]", self.mix_ratio)));
        }
        Ok(())
    }
}

fn check_model_dims(cfg: &UNet3DConfig, (f, h, w): (usize, usize, usize)) -> Result<()> {
    if (cfg.frames, cfg.height, cfg.width) != (f, h, w) {
        return Err(Error::Shape(format!("model expects {}x{}x{} videos, dataset has {f}x{h}x{w}", cfg.frames, cfg.height, cfg.width)));
    }
    Ok(())
}

/// Re-denoised copy of a dataset: each depth video is noised to `t_star` and
/// run back down the ancestral chain; RGB is copied through.
pub fn build_denoised_depth(ds: &Dataset, depth: &VdmCheckpoint, depth_model_id: &str, t_star: usize, seed: u64) -> Result<Dataset> {
    let sched = depth.schedule.build()?;
    if t_star > sched.timesteps() {
        return Err(Error::invalid(format!("t_star {t_star} beyond T = {}", sched.timesteps())));
    }
    check_model_dims(&depth.unet, ds.dims())?;
    let net = UNet3D::new(depth.unet.clone())?;
    let model = Denoiser::new(&net, &depth.state.params, 1);
    let mut outputs = Vec::with_capacity(ds.len());
    for start in (0..ds.len()).step_by(CHUNK) {
        let chains = (start..ds.len().min(start + CHUNK))
            .map(|i| noised_start(&ds.samples[i].depth, &sched, t_star, mix(seed, i as u64)))
            .collect::<Result<Vec<_>>>()?;
        outputs.extend(reverse_chain(&model, &sched, chains, t_star)?);
    }
    let samples = ds
        .samples
        .iter()
        .zip(outputs)
        .enumerate()
        .map(|(i, (s, d))| {
            // the chain is empty at t_star = 0; keep the input bits rather than a clamped copy
            let depth = if t_star == 0 { s.depth.clone() } else { d };
            let meta = SampleMeta {
                seed,
                index: i as u64,
                source: SampleSource::Denoised { upstream_dataset: ds.id().to_string(), upstream_index: i, t_star, noise_seed: seed },
            };
            PairedSample::new(s.rgb.clone(), depth, meta)
        })
        .collect::<Result<Vec<_>>>()?;
    let link = DerivedFrom { dataset: ds.id().to_string(), model: depth_model_id.to_string(), t_star, seed };
    Dataset::new(samples, seed, ds.manifest.cfg.clone(), Some(link))
}

fn noised_start(x0: &VideoTensor, sched: &NoiseSchedule, t_star: usize, seed: u64) -> Result<Chain> {
    if t_star == 0 {
        return Ok(Chain::resume(x0.clone(), seed));
    }
    let [f, h, w, c] = x0.dims();
    let eps = VideoTensor::from_data(f, h, w, c, normal_vec(&mut stream_rng(seed, 0), f * h * w * c))?;
    Ok(Chain::resume(crate::schedule::forward_sample(x0, sched.timestep(t_star)?, &eps, sched)?, seed))
}

/// Links between the artifacts of one two-stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub run_id: String,
    pub config: StageConfig,
    pub source_dataset: String,
    pub stage2_dataset: String,
    pub depth_checkpoint: String,
    pub dual_checkpoint: String,
    pub t_star: usize,
}

pub struct TwoStageOutput {
    pub depth: VdmCheckpoint,
    pub dual: DualCheckpoint,
    /// The dataset stage 2 conditioned on (re-denoised, raw or mixed depth).
    pub stage2_data: Dataset,
    pub manifest: RunManifest,
    pub wall_seconds: f64,
}

/// Depth VDM on the dataset's depth videos, then the conditional model on
/// `(stage-2 depth, rgb)` pairs with its depth branch initialized from stage 1.
/// Artifacts are written under `out` when given.
pub fn two_stage_train(cfg: &StageConfig, ds: &Dataset, run_id: &str, out: Option<&Path>) -> Result<TwoStageOutput> {
    let started = Instant::now();
    cfg.validate()?;
    check_model_dims(&cfg.depth_model, ds.dims())?;
    let sched = cfg.schedule.build()?;

    let depth = train_depth(cfg, ds, &sched)?;
    let depth_id = depth.id();
    let stage2_data = stage2_dataset(cfg, ds, &depth, &depth_id)?;
    let dual = train_dual(cfg, &stage2_data, &depth, &depth_id, &sched)?;

    let manifest = RunManifest {
        run_id: run_id.to_string(),
        config: cfg.clone(),
        source_dataset: ds.id().to_string(),
        stage2_dataset: stage2_data.id().to_string(),
        depth_checkpoint: depth_id,
        dual_checkpoint: dual.id(),
        t_star: cfg.t_star(),
    };
    let wall_seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = out {
        depth.save(&dir.join(DEPTH_CHECKPOINT_FILE))?;
        dual.save(&dir.join(DUAL_CHECKPOINT_FILE))?;
        stage2_data.save(&dir.join(DENOISED_DIR))?;
        write_json(&dir.join(RUN_MANIFEST_FILE), &manifest)?;
        write_json(&dir.join(TIMING_FILE), &serde_json::json!({ "wall_seconds": wall_seconds }))?;
    }
    Ok(TwoStageOutput { depth, dual, stage2_data, manifest, wall_seconds })
}

/// Untrained stage-1 checkpoint.
pub fn depth_start(cfg: &StageConfig, ds: &Dataset) -> Result<VdmCheckpoint> {
    let s1 = &cfg.stage1;
    Ok(VdmCheckpoint {
        unet: cfg.depth_model.clone(),
        schedule: cfg.schedule,
        data_channels: 1,
        state: TrainState::new(init_params(&cfg.depth_model, s1.init_seed)?, s1.train.optimizer),
        provenance: serde_json::json!({ "dataset": ds.id(), "stage": s1 }),
    })
}

/// Runs stage 1 forward by `steps` updates from whatever step `ckpt` is at.
pub fn continue_depth(
    cfg: &StageConfig,
    mut ckpt: VdmCheckpoint,
    ds: &Dataset,
    sched: &NoiseSchedule,
    steps: u64,
) -> Result<VdmCheckpoint> {
    let net = UNet3D::new(cfg.depth_model.clone())?;
    let data: Vec<VideoTensor> = ds.samples.iter().map(|s| s.depth.clone()).collect();
    ckpt.state = vdm::train(&net, ckpt.state, &data, sched, steps, &cfg.stage1.train)?;
    Ok(ckpt)
}

/// Stage 1: the unconditional depth model.
pub fn train_depth(cfg: &StageConfig, ds: &Dataset, sched: &NoiseSchedule) -> Result<VdmCheckpoint> {
    continue_depth(cfg, depth_start(cfg, ds)?, ds, sched, cfg.stage1.steps)
}

/// The conditioning dataset for stage 2, honoring the raw/denoised switch and the mix ratio.
pub fn stage2_dataset(cfg: &StageConfig, ds: &Dataset, depth: &VdmCheckpoint, depth_id: &str) -> Result<Dataset> {
    if !cfg.denoised || cfg.mix_ratio == 0.0 {
        return Ok(ds.clone());
    }
    let built = build_denoised_depth(ds, depth, depth_id, cfg.t_star(), cfg.builder_seed)?;
    mix_stage2(cfg, ds, built)
}

/// Per-sample choice between raw and re-denoised depth: sample `i` takes the
/// re-denoised pair when a uniform draw falls below the mix ratio.
pub fn mix_stage2(cfg: &StageConfig, raw: &Dataset, built: Dataset) -> Result<Dataset> {
    if built.len() != raw.len() {
        return Err(Error::Shape(format!("{} re-denoised samples for {} raw", built.len(), raw.len())));
    }
    if cfg.mix_ratio >= 1.0 {
        return Ok(built);
    }
    let mix_seed = mix(cfg.builder_seed, MIX_TAG);
    let samples = raw
        .samples
        .iter()
        .zip(built.samples)
        .enumerate()
        .map(|(i, (raw, den))| if stream_rng(mix_seed, i as u64).random::<f64>() < cfg.mix_ratio { den } else { raw.clone() })
        .collect();
    Dataset::new(samples, cfg.builder_seed, raw.manifest.cfg.clone(), built.manifest.derived_from)
}

/// Untrained stage-2 checkpoint with its depth branch copied from stage 1.
pub fn dual_start(cfg: &StageConfig, data: &Dataset, depth: &VdmCheckpoint, depth_id: &str) -> Result<DualCheckpoint> {
    let dual_cfg = cfg.dual();
    let s2 = &cfg.stage2;
    let params = init_dual_params(&dual_cfg, s2.init_seed, Some(depth.state.params.clone()))?;
    Ok(DualCheckpoint {
        dual: dual_cfg,
        schedule: cfg.schedule,
        guidance: cfg.guidance,
        state: TrainState::new(params.merge(), s2.train.optimizer),
        provenance: serde_json::json!({ "dataset": data.id(), "depth_checkpoint": depth_id, "stage": s2 }),
    })
}

/// Runs stage 2 forward by `steps` updates from whatever step `ckpt` is at.
pub fn continue_dual(
    cfg: &StageConfig,
    mut ckpt: DualCheckpoint,
    data: &Dataset,
    sched: &NoiseSchedule,
    steps: u64,
) -> Result<DualCheckpoint> {
    let net = DualUNet::new(ckpt.dual.clone())?;
    let rgb: Vec<VideoTensor> = data.samples.iter().map(|s| s.rgb.clone()).collect();
    let depths: Vec<VideoTensor> = data.samples.iter().map(|s| s.depth.clone()).collect();
    ckpt.state = vid2vid::train(&net, ckpt.state, &rgb, &depths, sched, steps, &cfg.stage2.train, &cfg.guidance)?;
    Ok(ckpt)
}

/// Stage 2: the dual-U-Net conditional model, depth branch starting from stage 1.
pub fn train_dual(
    cfg: &StageConfig,
    data: &Dataset,
    depth: &VdmCheckpoint,
    depth_id: &str,
    sched: &NoiseSchedule,
) -> Result<DualCheckpoint> {
    continue_dual(cfg, dual_start(cfg, data, depth, depth_id)?, data, sched, cfg.stage2.steps)
}

/// `n` generated `(depth, rgb)` pairs: unconditional depth samples, each
/// translated to RGB with guidance weight `omega`.
pub fn generate(depth: &VdmCheckpoint, dual: &DualCheckpoint, n: usize, omega: f64, seed: u64) -> Result<Vec<(VideoTensor, VideoTensor)>> {
    if depth.schedule != dual.schedule {
        return Err(Error::Incompatible(format!("schedules differ: {:?} vs {:?}", depth.schedule, dual.schedule)));
    }
    let v = &dual.dual.video;
    check_model_dims(&depth.unet, (v.frames, v.height, v.width))?;
    if depth.data_channels != 1 {
        return Err(Error::Incompatible(format!("depth model produces {} channels, expected 1", depth.data_channels)));
    }
    let sched = depth.schedule.build()?;
    let net = UNet3D::new(depth.unet.clone())?;
    let depths = vdm::sample(&Denoiser::new(&net, &depth.state.params, 1), &sched, [v.frames, v.height, v.width, 1], n, mix(seed, 0))?;
    let dual_net = DualUNet::new(dual.dual.clone())?;
    let params = dual.params()?;
    let model = DualDenoiser::new(&dual_net, &params);
    let rgb_seed = mix(seed, 1);
    let mut rgb = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let end = n.min(start + CHUNK);
        let seeds: Vec<u64> = (start..end).map(|i| mix(rgb_seed, i as u64)).collect();
        rgb.extend(vid2vid::sample_conditional_batch(&model, v.out_channels, &depths[start..end], &seeds, &sched, omega)?);
    }
    Ok(depths.into_iter().zip(rgb).collect())
}

/// [`generate`] packaged as a dataset whose samples record the two checkpoints.
pub fn generate_dataset(depth: &VdmCheckpoint, dual: &DualCheckpoint, n: usize, omega: f64, seed: u64) -> Result<Dataset> {
    let (depth_model, dual_model) = (depth.id(), dual.id());
    let samples = generate(depth, dual, n, omega, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (d, rgb))| {
            let source = SampleSource::Generated { depth_model: depth_model.clone(), dual_model: dual_model.clone(), omega };
            PairedSample::new(rgb, d, SampleMeta { seed, index: i as u64, source })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, seed, None, None)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToyConfig};
    use crate::optim::AdamConfig;

    fn tiny_cfg() -> StageConfig {
        let depth_model = UNet3DConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            blocks_per_resolution: 1,
            attn_head_dim: 4,
            attn_scales: Some(vec![]),
            in_channels: 3,
            out_channels: 3,
            frames: 2,
            height: 8,
            width: 8,
            time_embed_dim: 8,
            conditional: false,
        };
        let train = TrainConfig { optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, batch_size: 2, seed: 1 };
        StageConfig {
            schedule: ScheduleSpec::cosine(20),
            depth_model,
            rgb_channels: 3,
            stage1: StageTraining { steps: 2, init_seed: 0, train },
            stage2: StageTraining { steps: 2, init_seed: 1, train },
            guidance: GuidanceConfig::default(),
            t_star: None,
            builder_seed: 3,
            denoised: true,
            mix_ratio: 1.0,
        }
    }

    fn tiny_ds() -> Dataset {
        let toy = ToyConfig { frames: 2, height: 8, width: 8, min_size: 1.5, max_size: 2.5, ..ToyConfig::default() };
        generate_toy_dataset(3, 5, &toy).unwrap()
    }

    fn tiny_depth(cfg: &StageConfig, ds: &Dataset) -> VdmCheckpoint {
        train_depth(cfg, ds, &cfg.schedule.build().unwrap()).unwrap()
    }

    #[test]
    fn zero_noise_level_is_the_identity_on_depth() {
        let (cfg, ds) = (tiny_cfg(), tiny_ds());
        let depth = tiny_depth(&cfg, &ds);
        let out = build_denoised_depth(&ds, &depth, "m", 0, 1).unwrap();
        for (a, b) in out.samples.iter().zip(&ds.samples) {
            assert_eq!(a.depth, b.depth);
            assert_eq!(a.rgb, b.rgb);
        }
        assert_eq!(out.manifest.derived_from.as_ref().unwrap().dataset, ds.id());
    }

    #[test]
    fn builder_is_deterministic_and_pure() {
        let (cfg, ds) = (tiny_cfg(), tiny_ds());
        let before = ds.clone();
        let depth = tiny_depth(&cfg, &ds);
        let a = build_denoised_depth(&ds, &depth, "m", 5, 9).unwrap();
        let b = build_denoised_depth(&ds, &depth, "m", 5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(ds, before);
        assert_ne!(a.samples[0].depth, ds.samples[0].depth);
        assert_eq!(a.samples[1].rgb, ds.samples[1].rgb);
        assert!(a.samples.iter().all(|s| s.depth.is_normalized()));
        assert!(matches!(&a.samples[2].meta.source, SampleSource::Denoised { upstream_index: 2, t_star: 5, noise_seed: 9, .. }));
    }

    #[test]
    fn builder_rejects_out_of_range_levels_and_shapes() {
        let (cfg, ds) = (tiny_cfg(), tiny_ds());
        let depth = tiny_depth(&cfg, &ds);
        assert!(build_denoised_depth(&ds, &depth, "m", 21, 0).is_err());
        let other = generate_toy_dataset(1, 0, &ToyConfig::default()).unwrap();
        assert!(matches!(build_denoised_depth(&other, &depth, "m", 3, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn stage_two_starts_from_stage_one_and_keeps_training_it() {
        let (mut cfg, ds) = (tiny_cfg(), tiny_ds());
        let sched = cfg.schedule.build().unwrap();
        let depth = tiny_depth(&cfg, &ds);
        cfg.stage2.steps = 0;
        let dual = train_dual(&cfg, &ds, &depth, "d", &sched).unwrap();
        assert_eq!(dual.params().unwrap().depth, depth.state.params);
        // the zero-initialized video head blocks all upstream gradient on the first step
        cfg.stage2.steps = 2;
        let dual = train_dual(&cfg, &ds, &depth, "d", &sched).unwrap();
        assert_ne!(dual.params().unwrap().depth, depth.state.params);
    }

    #[test]
    fn raw_switch_and_mix_ratio_choose_the_conditioning() {
        let (mut cfg, ds) = (tiny_cfg(), tiny_ds());
        let depth = tiny_depth(&cfg, &ds);
        cfg.denoised = false;
        assert_eq!(stage2_dataset(&cfg, &ds, &depth, "d").unwrap(), ds);
        cfg.denoised = true;
        let full = stage2_dataset(&cfg, &ds, &depth, "d").unwrap();
        assert!(full.samples.iter().zip(&ds.samples).all(|(a, b)| a.depth != b.depth));
        cfg.mix_ratio = 0.5;
        let mixed = stage2_dataset(&cfg, &ds, &depth, "d").unwrap();
        for (i, s) in mixed.samples.iter().enumerate() {
            assert!(s.depth == ds.samples[i].depth || s.depth == full.samples[i].depth);
        }
    }

    #[test]
    fn two_stage_run_writes_linked_artifacts() {
        let (cfg, ds) = (tiny_cfg(), tiny_ds());
        let dir = tempfile::tempdir().unwrap();
        let out = two_stage_train(&cfg, &ds, "r1", Some(dir.path())).unwrap();
        let depth = VdmCheckpoint::load(&dir.path().join(DEPTH_CHECKPOINT_FILE)).unwrap();
        let dual = DualCheckpoint::load(&dir.path().join(DUAL_CHECKPOINT_FILE)).unwrap();
        assert_eq!(depth.id(), out.manifest.depth_checkpoint);
        assert_eq!(dual.id(), out.manifest.dual_checkpoint);
        assert_eq!(dual.provenance["depth_checkpoint"], out.manifest.depth_checkpoint.as_str());
        let stage2 = Dataset::load(&dir.path().join(DENOISED_DIR)).unwrap();
        assert_eq!(stage2.id(), out.manifest.stage2_dataset);
        assert_eq!(stage2.manifest.derived_from.unwrap().model, out.manifest.depth_checkpoint);
        let text = std::fs::read_to_string(dir.path().join(RUN_MANIFEST_FILE)).unwrap();
        let manifest: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(manifest, out.manifest);
        assert_eq!(manifest.t_star, 5);
    }

    #[test]
    fn generation_is_deterministic_and_handles_empty_requests() {
        let (cfg, ds) = (tiny_cfg(), tiny_ds());
        let out = two_stage_train(&cfg, &ds, "r", None).unwrap();
        assert!(generate(&out.depth, &out.dual, 0, 1.4, 0).unwrap().is_empty());
        let a = generate(&out.depth, &out.dual, 2, 1.4, 7).unwrap();
        assert_eq!(a, generate(&out.depth, &out.dual, 2, 1.4, 7).unwrap());
        assert_eq!(a[0].0.dims(), [2, 8, 8, 1]);
        assert_eq!(a[0].1.dims(), [2, 8, 8, 3]);
    }

    #[test]
    fn mismatched_checkpoints_are_rejected() {
        let (cfg, ds) = (tiny_cfg(), tiny_ds());
        let out = two_stage_train(&cfg, &ds, "r", None).unwrap();
        let mut depth = out.depth.clone();
        depth.schedule = ScheduleSpec::cosine(30);
        assert!(matches!(generate(&depth, &out.dual, 1, 1.4, 0), Err(Error::Incompatible(_))));
        let wide = init_params(&UNet3DConfig { base_channels: 8, ..cfg.depth_model.clone() }, 0).unwrap();
        let err = init_dual_params(&cfg.dual(), 0, Some(wide)).unwrap_err().to_string();
        assert!(err.contains("enc.0.0.res.conv1.w"), "{err}");
    }
}
