//! Videos, paired RGB/depth samples, the toy generator and on-disk formats.

mod container;
mod frames;
pub mod toy;
mod video;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use container::{load_tensor, save_tensor, Container, MAGIC};
pub use frames::load_frame_dir;
pub use toy::{ToyConfig, ToyObject};
pub use video::{byte_to_unit, unit_to_byte, VideoTensor};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SampleSource {
    Toy { objects: Vec<ToyObject> },
    Frames { rgb: PathBuf, depth: PathBuf },
    Denoised { upstream_dataset: String, upstream_index: usize, t_star: usize, noise_seed: u64 },
    Generated { depth_model: String, dual_model: String, omega: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub index: u64,
    #[serde(flatten)]
    pub source: SampleSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub rgb: VideoTensor,
    pub depth: VideoTensor,
    pub meta: SampleMeta,
}

impl PairedSample {
    pub fn new(rgb: VideoTensor, depth: VideoTensor, meta: SampleMeta) -> Result<Self> {
        let [f, h, w, _] = rgb.dims();
        let [df, dh, dw, _] = depth.dims();
        if (f, h, w) != (df, dh, dw) {
            return Err(Error::Shape(format!("rgb {:?} and depth {:?} disagree", rgb.dims(), depth.dims())));
        }
        Ok(Self { rgb, depth, meta })
    }

    /// Real-data pair from an RGB frame directory and a rendered depth frame directory.
    pub fn from_frame_dirs(rgb_dir: &Path, depth_dir: &Path, frames: usize, height: usize, width: usize) -> Result<Self> {
        let rgb = load_frame_dir(rgb_dir, frames, height, width)?;
        let depth = load_frame_dir(depth_dir, frames, height, width)?.mean_channels();
        let meta =
            SampleMeta { seed: 0, index: 0, source: SampleSource::Frames { rgb: rgb_dir.to_path_buf(), depth: depth_dir.to_path_buf() } };
        Self::new(rgb, depth, meta)
    }

    fn to_container(&self) -> Container {
        Container {
            entries: vec![("rgb".into(), self.rgb.to_tensor()), ("depth".into(), self.depth.to_tensor())],
            meta: serde_json::to_value(&self.meta).expect("meta serializes"),
        }
    }

    fn from_container(mut c: Container, path: &Path) -> Result<Self> {
        let missing = |name: &str| Error::Integrity { path: path.to_path_buf(), reason: format!("missing `{name}` entry") };
        let rgb = VideoTensor::from_tensor(c.take("rgb").ok_or_else(|| missing("rgb"))?)?;
        let depth = VideoTensor::from_tensor(c.take("depth").ok_or_else(|| missing("depth"))?)?;
        let meta = serde_json::from_value(c.meta)
            .map_err(|e| Error::Integrity { path: path.to_path_buf(), reason: format!("sample meta: {e}") })?;
        Self::new(rgb, depth, meta)
    }
}

/// Upstream link recorded on derived datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedFrom {
    pub dataset: String,
    pub model: String,
    pub t_star: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub id: String,
    pub seed: u64,
    pub generator_version: u32,
    pub format_version: u32,
    pub count: usize,
    pub cfg: Option<ToyConfig>,
    pub derived_from: Option<DerivedFrom>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Assemble a dataset, checking shared shapes and computing its content id.
    pub fn new(samples: Vec<PairedSample>, seed: u64, cfg: Option<ToyConfig>, derived_from: Option<DerivedFrom>) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::invalid("dataset must not be empty"))?;
        let dims = |s: &PairedSample| {
            let [f, h, w, _] = s.depth.dims();
            (f, h, w)
        };
        let reference = dims(first);
        if let Some(bad) = samples.iter().position(|s| dims(s) != reference) {
            return Err(Error::Shape(format!("sample {bad} has dims {:?}, expected {reference:?}", dims(&samples[bad]))));
        }
        let manifest = DatasetManifest {
            id: String::new(),
            seed,
            generator_version: toy::GENERATOR_VERSION,
            format_version: FORMAT_VERSION,
            count: samples.len(),
            cfg,
            derived_from,
        };
        let mut ds = Self { samples, manifest };
        ds.manifest.id = ds.content_id();
        Ok(ds)
    }

    fn content_id(&self) -> String {
        let mut h = Sha256::new();
        let m = DatasetManifest { id: String::new(), ..self.manifest.clone() };
        h.update(serde_json::to_vec(&m).expect("manifest serializes"));
        for s in &self.samples {
            h.update(s.to_container().to_bytes());
        }
        hex_prefix(&h.finalize())
    }

    pub fn id(&self) -> &str {
        &self.manifest.id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(frames, height, width)` shared by every sample.
    pub fn dims(&self) -> (usize, usize, usize) {
        let [f, h, w, _] = self.samples[0].depth.dims();
        (f, h, w)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            s.to_container().save(&dir.join(sample_file(i)))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Integrity { path: path.clone(), reason: e.to_string() })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version { path, reason: format!("dataset format {}", manifest.format_version) });
        }
        let samples = (0..manifest.count)
            .map(|i| {
                let p = dir.join(sample_file(i));
                PairedSample::from_container(Container::load(&p)?, &p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, manifest })
    }
}

fn sample_file(i: usize) -> String {
    format!("sample_{i:05}.gdt")
}

pub(crate) fn hex_prefix(digest: &[u8]) -> String {
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Sample `index` of [`generate_toy_dataset`], generated on its own.
pub fn generate_toy_sample(cfg: &ToyConfig, seed: u64, index: u64) -> PairedSample {
    let objects = toy::sample_objects(cfg, seed, index);
    let (rgb, depth) = toy::render(cfg, &objects);
    PairedSample { rgb, depth, meta: SampleMeta { seed, index, source: SampleSource::Toy { objects } } }
}

/// `n` moving-shapes samples. Sample `i` depends only on `(seed, i, cfg)`.
pub fn generate_toy_dataset(n: usize, seed: u64, cfg: &ToyConfig) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::invalid("dataset needs at least one sample"));
    }
    cfg.validate()?;
    let samples = (0..n as u64).map(|i| generate_toy_sample(cfg, seed, i)).collect();
    Dataset::new(samples, seed, Some(cfg.clone()), None)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ToyConfig {
        ToyConfig { frames: 4, height: 16, width: 16, ..ToyConfig::default() }
    }

    #[test]
    fn shapes_follow_config() {
        let ds = generate_toy_dataset(8, 7, &cfg()).unwrap();
        assert_eq!(ds.len(), 8);
        for s in &ds.samples {
            assert_eq!(s.rgb.dims(), [4, 16, 16, 3]);
            assert_eq!(s.depth.dims(), [4, 16, 16, 1]);
            assert!(s.rgb.is_normalized() && s.depth.is_normalized());
        }
    }

    #[test]
    fn generation_is_deterministic_and_order_free() {
        let a = generate_toy_dataset(6, 3, &cfg()).unwrap();
        let b = generate_toy_dataset(6, 3, &cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_toy_sample(&cfg(), 3, 4), a.samples[4]);
        assert_ne!(generate_toy_dataset(6, 4, &cfg()).unwrap().id(), a.id());
    }

    #[test]
    fn depth_threshold_recovers_object_pixels() {
        let ds = generate_toy_dataset(16, 11, &cfg()).unwrap();
        for s in &ds.samples {
            let [f_n, h_n, w_n, _] = s.depth.dims();
            let mut background_min = f32::INFINITY;
            let mut object_max = f32::NEG_INFINITY;
            for f in 0..f_n {
                for y in 0..h_n {
                    for x in 0..w_n {
                        let d = s.depth.get(f, y, x, 0);
                        let bg = toy::background_color(y, h_n);
                        let is_bg_color = s.rgb.pixel(f, y, x) == bg.as_slice();
                        assert_eq!(d >= toy::BACKGROUND_DEPTH, is_bg_color);
                        assert_eq!(d < toy::DEPTH_THRESHOLD, !is_bg_color);
                        if is_bg_color {
                            background_min = background_min.min(d);
                        } else {
                            object_max = object_max.max(d);
                            assert_eq!(s.rgb.pixel(f, y, x), toy::object_color(d).as_slice());
                        }
                    }
                }
            }
            assert!(object_max < background_min);
        }
    }

    #[test]
    fn every_sample_has_one_to_three_objects() {
        let ds = generate_toy_dataset(32, 1, &cfg()).unwrap();
        for s in &ds.samples {
            match &s.meta.source {
                SampleSource::Toy { objects } => assert!((1..=3).contains(&objects.len())),
                other => panic!("unexpected source {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_bad_requests() {
        assert!(generate_toy_dataset(0, 1, &cfg()).is_err());
        assert!(generate_toy_dataset(1, 1, &ToyConfig { height: 0, ..cfg() }).is_err());
        assert!(generate_toy_dataset(1, 1, &ToyConfig { max_objects: 4, ..cfg() }).is_err());
        assert!(generate_toy_dataset(1, 1, &ToyConfig { frames: 0, ..cfg() }).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_toy_dataset(3, 9, &cfg()).unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert!(matches!(Dataset::load(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn mixed_shapes_are_rejected() {
        let a = generate_toy_sample(&cfg(), 1, 0);
        let b = generate_toy_sample(&ToyConfig { frames: 5, ..cfg() }, 1, 0);
        assert!(Dataset::new(vec![a, b], 1, None, None).is_err());
    }
}
