//! Run configuration: one TOML file carrying every parameter of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{hex_prefix, ToyConfig};
use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::pipeline::{StageConfig, StageTraining};
use crate::schedule::ScheduleSpec;
use crate::unet3d::UNet3DConfig;
use crate::vdm::TrainConfig;
use crate::vid2vid::GuidanceConfig;

/// Folded into every run id so artifacts from different builds never share a directory.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
    #[serde(default)]
    pub toy: ToyConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    pub seed: u64,
    /// Defaults to the guidance weight of the pipeline.
    #[serde(default)]
    pub omega: Option<f64>,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n: 8, seed: 0, omega: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub feature_seed: u64,
    pub feature_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { feature_seed: 0, feature_dim: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    /// Training commands save a resumable checkpoint after this many updates.
    pub every: u64,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self { every: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub pipeline: StageConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    #[serde(default)]
    pub evaluate: EvalConfig,
    #[serde(default)]
    pub checkpoint: CheckpointConfig,
}

impl RunConfig {
    /// The desk-scale toy setup: eight 4×16×16 videos, a two-scale U-Net and
    /// 2000 updates per stage.
    pub fn toy() -> Self {
        let depth_model = UNet3DConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            blocks_per_resolution: 1,
            attn_head_dim: 8,
            attn_scales: Some(vec![1]),
            in_channels: 3,
            out_channels: 3,
            frames: 4,
            height: 16,
            width: 16,
            time_embed_dim: 16,
            conditional: false,
        };
        let train = |batch_size, seed| TrainConfig { optimizer: AdamConfig { lr: 2e-3, ..AdamConfig::default() }, batch_size, seed };
        Self {
            data: DataConfig { count: 8, seed: 0, toy: ToyConfig::default() },
            pipeline: StageConfig {
                schedule: ScheduleSpec::cosine(1000),
                depth_model,
                rgb_channels: 3,
                stage1: StageTraining { steps: 2000, init_seed: 0, train: train(8, 1) },
                stage2: StageTraining { steps: 2000, init_seed: 1, train: train(4, 2) },
                guidance: GuidanceConfig::default(),
                t_star: None,
                builder_seed: 3,
                denoised: true,
                mix_ratio: 1.0,
            },
            sample: SampleConfig::default(),
            evaluate: EvalConfig::default(),
            checkpoint: CheckpointConfig::default(),
        }
    }

    /// Parses and validates; schema errors name the offending key path.
    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Value = toml::from_str(text).map_err(|e| Error::Config { key: String::new(), reason: e.message().to_string() })?;
        let cfg: Self = serde_path_to_error::deserialize(value.clone())
            .map_err(|e| Error::Config { key: e.path().to_string(), reason: e.into_inner().message().to_string() })?;
        // flattened tables slip past `deny_unknown_fields`; compare against the canonical form
        let canonical = toml::Value::try_from(&cfg).expect("config serializes");
        if let Some(key) = first_unknown_key(&value, &canonical, "") {
            return Err(Error::Config { key, reason: "unknown key".into() });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.toy.validate().map_err(at("data.toy"))?;
        if self.data.count == 0 {
            return Err(Error::Config { key: "data.count".into(), reason: "must be positive".into() });
        }
        self.pipeline.validate().map_err(at("pipeline"))?;
        let (m, t) = (&self.pipeline.depth_model, &self.data.toy);
        if (m.frames, m.height, m.width) != (t.frames, t.height, t.width) {
            return Err(Error::Config {
                key: "pipeline.depth_model".into(),
                reason: format!("model is {}x{}x{}, toy videos are {}x{}x{}", m.frames, m.height, m.width, t.frames, t.height, t.width),
            });
        }
        if self.pipeline.rgb_channels != 3 {
            return Err(Error::Config { key: "pipeline.rgb_channels".into(), reason: "toy videos have 3 channels".into() });
        }
        if self.sample.n == 0 {
            return Err(Error::Config { key: "sample.n".into(), reason: "must be positive".into() });
        }
        GuidanceConfig { omega: self.omega(), ..self.pipeline.guidance }.validate().map_err(at("sample.omega"))?;
        if self.evaluate.feature_dim == 0 {
            return Err(Error::Config { key: "evaluate.feature_dim".into(), reason: "must be positive".into() });
        }
        if self.checkpoint.every == 0 {
            return Err(Error::Config { key: "checkpoint.every".into(), reason: "must be positive".into() });
        }
        Ok(())
    }

    pub fn omega(&self) -> f64 {
        self.sample.omega.unwrap_or(self.pipeline.guidance.omega)
    }

    /// Content hash of everything that shapes the trained artifacts, plus the code version.
    /// Sampling, evaluation and checkpoint cadence do not enter it.
    pub fn run_id(&self) -> String {
        let identity = serde_json::json!({ "code": CODE_VERSION, "data": self.data, "pipeline": self.pipeline });
        hex_prefix(&Sha256::digest(serde_json::to_vec(&identity).expect("config serializes")))
    }
}

fn at(key: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Config { key: key.to_string(), reason: e.to_string() }
}

fn first_unknown_key(given: &toml::Value, known: &toml::Value, prefix: &str) -> Option<String> {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match (given, known) {
        (toml::Value::Table(g), toml::Value::Table(k)) => g.iter().find_map(|(key, v)| match k.get(key) {
            None => Some(join(key)),
            Some(kv) => first_unknown_key(v, kv, &join(key)),
        }),
        (toml::Value::Array(g), toml::Value::Array(k)) => {
            g.iter().zip(k).enumerate().find_map(|(i, (gv, kv))| first_unknown_key(gv, kv, &format!("{prefix}[{i}]")))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_round_trips_through_toml() {
        let cfg = RunConfig::toy();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn shipped_toy_file_matches_the_builtin() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        assert_eq!(RunConfig::load(&path).unwrap(), RunConfig::toy());
    }

    #[test]
    fn unknown_keys_are_reported_with_their_path() {
        let text = RunConfig::toy().to_toml();
        for (section, key) in
            [("[pipeline.schedule]", "pipeline.schedule.bogus"), ("[data.toy]", "data.toy.bogus"), ("[sample]", "sample.bogus")]
        {
            let bad = text.replacen(section, &format!("{section}\nbogus = 1"), 1);
            assert_ne!(bad, text, "{section} missing from the serialized config");
            match RunConfig::parse(&bad) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn type_errors_carry_the_key_path() {
        let bad = RunConfig::toy().to_toml().replacen("count = 8", "count = \"eight\"", 1);
        match RunConfig::parse(&bad) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "data.count"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_violations_are_rejected_before_any_work() {
        let mut cfg = RunConfig::toy();
        cfg.data.toy.frames = 5;
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "pipeline.depth_model"));
        let mut cfg = RunConfig::toy();
        cfg.pipeline.mix_ratio = 2.0;
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "pipeline"));
        let mut cfg = RunConfig::toy();
        cfg.sample.omega = Some(-1.0);
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "sample.omega"));
    }

    #[test]
    fn run_id_tracks_artifact_inputs_only() {
        let base = RunConfig::toy();
        let mut sampled = base.clone();
        sampled.sample.seed = 9;
        sampled.checkpoint.every = 7;
        assert_eq!(base.run_id(), sampled.run_id());
        let mut trained = base.clone();
        trained.pipeline.stage1.steps = 10;
        assert_ne!(base.run_id(), trained.run_id());
        assert_eq!(base.run_id().len(), 16);
    }
}
