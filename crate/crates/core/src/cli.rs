//! Command-line surface: each subcommand maps onto one pipeline or metrics
//! operation and writes under `<root>/<run id>/`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{generate_toy_dataset, unit_to_byte, Dataset, VideoTensor, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::metrics;
use crate::pipeline::{self, RunManifest, DENOISED_DIR, DEPTH_CHECKPOINT_FILE, DUAL_CHECKPOINT_FILE, RUN_MANIFEST_FILE};
use crate::schedule::NoiseSchedule;
use crate::vdm::{TrainState, VdmCheckpoint};
use crate::vid2vid::DualCheckpoint;

pub const RUN_ROOT_ENV: &str = "GDVDM_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";
pub const CONFIG_FILE: &str = "config.toml";
pub const DATA_DIR: &str = "data";
pub const SAMPLES_DIR: &str = "samples";
pub const FRAMES_DIR: &str = "frames";
pub const METRICS_DIR: &str = "metrics";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Depth frames use the color rule on the channel mean: −1 (nearest) is black, 1 is white.
pub const DEPTH_MAPPING: &str = "gray = round((mean_c(v) + 1) * 127.5), near is dark";
pub const COLOR_MAPPING: &str = "byte = round((v + 1) * 127.5) per channel";

#[derive(Debug, Parser)]
#[command(name = "gdvdm", version, about = "Depth-guided two-phase video diffusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the toy dataset.
    GenData,
    /// Train the unconditional depth model.
    TrainDepth,
    /// Noise and re-denoise the dataset's depth with the trained depth model.
    BuildDenoised,
    /// Train the depth-conditioned RGB model.
    TrainVid2vid,
    /// Generate (depth, rgb) pairs end to end.
    Sample,
    /// FVD and depth fidelity of generated against real videos.
    Evaluate,
    /// Write a dataset's videos as PNG frame grids.
    ExportFrames,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::TrainDepth => "train-depth",
            Self::BuildDenoised => "build-denoised",
            Self::TrainVid2vid => "train-vid2vid",
            Self::Sample => "sample",
            Self::Evaluate => "evaluate",
            Self::ExportFrames => "export-frames",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args)]
pub struct Flags {
    /// Run configuration (TOML); required.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output root; defaults to $GDVDM_RUN_ROOT, then ./runs.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Training steps for both stages (part of the run id).
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    /// Builder noise level (part of the run id).
    #[arg(long = "t-star", global = true)]
    pub t_star: Option<usize>,
    /// Sampling seed; the feature seed for `evaluate`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of generated pairs.
    #[arg(long, global = true)]
    pub n: Option<usize>,
    /// Guidance weight.
    #[arg(long, global = true)]
    pub omega: Option<f64>,
    /// Continue training from the saved checkpoint instead of reproducing from scratch.
    #[arg(long, global = true)]
    pub resume: bool,
    /// Real dataset directory for `evaluate`; defaults to the run's dataset.
    #[arg(long, global = true, value_name = "DIR")]
    pub real: Option<PathBuf>,
    /// Generated dataset, or a run directory holding samples, for `evaluate`.
    #[arg(long, global = true, value_name = "DIR")]
    pub gen: Option<PathBuf>,
    /// Dataset directory for `export-frames`; defaults to the configured samples.
    #[arg(long, global = true, value_name = "DIR")]
    pub input: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(cli.command, &cli.flags) {
        Ok(path) => {
            println!("{}", path.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) => EXIT_INVALID,
        _ => EXIT_RUNTIME,
    }
}

/// Resolved configuration and run directory for one invocation.
pub struct RunContext {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

impl RunContext {
    pub fn resolve(cmd: Command, flags: &Flags) -> Result<Self> {
        check_flags(cmd, flags)?;
        let path = flags.config.as_deref().ok_or_else(|| Error::Config { key: "--config".into(), reason: "required".into() })?;
        let mut cfg = RunConfig::load(path)?;
        if let Some(steps) = flags.steps {
            cfg.pipeline.stage1.steps = steps;
            cfg.pipeline.stage2.steps = steps;
        }
        if flags.t_star.is_some() {
            cfg.pipeline.t_star = flags.t_star;
        }
        // the stored config is the artifact identity; per-invocation sampling overrides stay out of it
        let stored = cfg.clone();
        match cmd {
            Command::Evaluate => cfg.evaluate.feature_seed = flags.seed.unwrap_or(cfg.evaluate.feature_seed),
            _ => {
                cfg.sample.seed = flags.seed.unwrap_or(cfg.sample.seed);
                cfg.sample.n = flags.n.unwrap_or(cfg.sample.n);
                cfg.sample.omega = flags.omega.or(cfg.sample.omega);
            }
        }
        cfg.validate()?;
        let root = match &flags.out {
            Some(dir) => dir.clone(),
            None => std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT), PathBuf::from),
        };
        let dir = root.join(cfg.run_id());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        if !cfg_path.exists() {
            std::fs::write(&cfg_path, stored.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        }
        Ok(Self { cfg, dir })
    }

    /// Directory name of the configured sampling settings.
    pub fn sample_tag(&self) -> String {
        let s = &self.cfg.sample;
        format!("n{}-omega{}-seed{}", s.n, self.cfg.omega(), s.seed)
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.dir.join(SAMPLES_DIR).join(self.sample_tag())
    }

    fn depth(&self) -> Result<VdmCheckpoint> {
        VdmCheckpoint::load(&require(self.dir.join(DEPTH_CHECKPOINT_FILE))?)
    }

    fn dual(&self) -> Result<DualCheckpoint> {
        DualCheckpoint::load(&require(self.dir.join(DUAL_CHECKPOINT_FILE))?)
    }

    fn data(&self) -> Result<Dataset> {
        Dataset::load(&self.dir.join(DATA_DIR))
    }
}

fn check_flags(cmd: Command, f: &Flags) -> Result<()> {
    use Command::*;
    let given = [
        ("--seed", f.seed.is_some(), matches!(cmd, Sample | Evaluate | ExportFrames)),
        ("--n", f.n.is_some(), matches!(cmd, Sample | ExportFrames)),
        ("--omega", f.omega.is_some(), matches!(cmd, Sample | ExportFrames)),
        ("--resume", f.resume, matches!(cmd, TrainDepth | TrainVid2vid)),
        ("--real", f.real.is_some(), cmd == Evaluate),
        ("--gen", f.gen.is_some(), cmd == Evaluate),
        ("--input", f.input.is_some(), cmd == ExportFrames),
    ];
    match given.iter().find(|(_, set, allowed)| *set && !allowed) {
        Some((flag, ..)) => Err(Error::invalid(format!("{flag} does not apply to {}", cmd.name()))),
        None => Ok(()),
    }
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

/// Runs one command and returns the path of its main output.
pub fn execute(cmd: Command, flags: &Flags) -> Result<PathBuf> {
    let ctx = RunContext::resolve(cmd, flags)?;
    match cmd {
        Command::GenData => gen_data(&ctx),
        Command::TrainDepth => train_depth(&ctx, flags.resume),
        Command::BuildDenoised => build_denoised(&ctx),
        Command::TrainVid2vid => train_vid2vid(&ctx, flags.resume),
        Command::Sample => sample(&ctx),
        Command::Evaluate => evaluate(&ctx, flags.real.as_deref(), flags.gen.as_deref()),
        Command::ExportFrames => export(&ctx, flags.input.as_deref()),
    }
}

fn gen_data(ctx: &RunContext) -> Result<PathBuf> {
    let d = &ctx.cfg.data;
    let ds = generate_toy_dataset(d.count, d.seed, &d.toy)?;
    let out = ctx.dir.join(DATA_DIR);
    ds.save(&out)?;
    Ok(out)
}

/// Trains `state` up to `target` updates, saving after every `every` of them.
fn train_in_chunks<C>(
    mut ckpt: C,
    target: u64,
    every: u64,
    state: impl Fn(&C) -> &TrainState,
    mut advance: impl FnMut(C, u64) -> Result<C>,
    save: impl Fn(&C) -> Result<()>,
    label: &str,
) -> Result<C> {
    let start = state(&ckpt).step;
    if start > target {
        return Err(Error::Incompatible(format!("{label} checkpoint is at step {start}, beyond the configured {target}")));
    }
    if start == target {
        save(&ckpt)?;
    }
    while state(&ckpt).step < target {
        let k = every.min(target - state(&ckpt).step);
        ckpt = advance(ckpt, k)?;
        save(&ckpt)?;
        let s = state(&ckpt);
        eprintln!("{label}: step {}/{target}, loss {:.4}", s.step, s.losses.last().copied().unwrap_or(f32::NAN));
    }
    Ok(ckpt)
}

fn schedule(ctx: &RunContext) -> Result<NoiseSchedule> {
    ctx.cfg.pipeline.schedule.build()
}

fn train_depth(ctx: &RunContext, resume: bool) -> Result<PathBuf> {
    let p = &ctx.cfg.pipeline;
    let ds = ctx.data()?;
    let sched = schedule(ctx)?;
    let path = ctx.dir.join(DEPTH_CHECKPOINT_FILE);
    let ckpt = if resume && path.exists() {
        let c = VdmCheckpoint::load(&path)?;
        if c.unet != p.depth_model || c.schedule != p.schedule {
            return Err(Error::Incompatible(format!("{} was trained under a different config", path.display())));
        }
        c
    } else {
        pipeline::depth_start(p, &ds)?
    };
    train_in_chunks(
        ckpt,
        p.stage1.steps,
        ctx.cfg.checkpoint.every,
        |c| &c.state,
        |c, k| pipeline::continue_depth(p, c, &ds, &sched, k),
        |c| c.save(&path),
        "train-depth",
    )?;
    Ok(path)
}

fn build_denoised(ctx: &RunContext) -> Result<PathBuf> {
    let p = &ctx.cfg.pipeline;
    let ds = ctx.data()?;
    let depth = ctx.depth()?;
    let built = pipeline::build_denoised_depth(&ds, &depth, &depth.id(), p.t_star(), p.builder_seed)?;
    let out = ctx.dir.join(DENOISED_DIR);
    built.save(&out)?;
    Ok(out)
}

/// Stage-2 conditioning data, checking that a stored re-denoised set matches this run.
fn stage2_data(ctx: &RunContext, raw: &Dataset, depth_id: &str) -> Result<Dataset> {
    let p = &ctx.cfg.pipeline;
    if !p.denoised || p.mix_ratio == 0.0 {
        return Ok(raw.clone());
    }
    let dir = ctx.dir.join(DENOISED_DIR);
    let built = Dataset::load(&dir)?;
    let fresh = built
        .manifest
        .derived_from
        .as_ref()
        .is_some_and(|d| d.dataset == raw.id() && d.model == depth_id && d.t_star == p.t_star() && d.seed == p.builder_seed);
    if !fresh {
        return Err(Error::Incompatible(format!("{} does not come from this run's depth model; rerun build-denoised", dir.display())));
    }
    pipeline::mix_stage2(p, raw, built)
}

fn train_vid2vid(ctx: &RunContext, resume: bool) -> Result<PathBuf> {
    let p = &ctx.cfg.pipeline;
    let raw = ctx.data()?;
    let depth = ctx.depth()?;
    let depth_id = depth.id();
    let data = stage2_data(ctx, &raw, &depth_id)?;
    let sched = schedule(ctx)?;
    let path = ctx.dir.join(DUAL_CHECKPOINT_FILE);
    let ckpt = if resume && path.exists() {
        let c = DualCheckpoint::load(&path)?;
        if c.dual != p.dual() || c.schedule != p.schedule || c.provenance["depth_checkpoint"] != depth_id.as_str() {
            return Err(Error::Incompatible(format!("{} was trained under a different config", path.display())));
        }
        c
    } else {
        pipeline::dual_start(p, &data, &depth, &depth_id)?
    };
    let dual = train_in_chunks(
        ckpt,
        p.stage2.steps,
        ctx.cfg.checkpoint.every,
        |c| &c.state,
        |c, k| pipeline::continue_dual(p, c, &data, &sched, k),
        |c| c.save(&path),
        "train-vid2vid",
    )?;
    let manifest = RunManifest {
        run_id: ctx.cfg.run_id(),
        config: p.clone(),
        source_dataset: raw.id().to_string(),
        stage2_dataset: data.id().to_string(),
        depth_checkpoint: depth_id,
        dual_checkpoint: dual.id(),
        t_star: p.t_star(),
    };
    pipeline::write_json(&ctx.dir.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok(path)
}

fn sample(ctx: &RunContext) -> Result<PathBuf> {
    let (depth, dual) = (ctx.depth()?, ctx.dual()?);
    let s = &ctx.cfg.sample;
    let ds = pipeline::generate_dataset(&depth, &dual, s.n, ctx.cfg.omega(), s.seed)?;
    let out = ctx.samples_dir();
    ds.save(&out)?;
    Ok(out)
}

/// A dataset directory, or a run directory whose configured samples are used.
fn generated_dir(ctx: &RunContext, given: &Path) -> PathBuf {
    if given.join(MANIFEST_FILE).exists() {
        given.to_path_buf()
    } else {
        given.join(SAMPLES_DIR).join(ctx.sample_tag())
    }
}

fn evaluate(ctx: &RunContext, real: Option<&Path>, gen: Option<&Path>) -> Result<PathBuf> {
    let real = Dataset::load(&real.map_or_else(|| ctx.dir.join(DATA_DIR), Path::to_path_buf))?;
    let gen = Dataset::load(&generated_dir(ctx, gen.unwrap_or(&ctx.dir)))?;
    let e = &ctx.cfg.evaluate;
    let report = metrics::evaluate(&real, &gen, e.feature_seed, e.feature_dim)?;
    let name = format!("{}-{}-seed{}-d{}.json", &real.id()[..8], &gen.id()[..8], e.feature_seed, e.feature_dim);
    let out = ctx.dir.join(METRICS_DIR).join(name);
    pipeline::write_json(&out, &report)?;
    for m in &report.metrics {
        eprintln!("{}: {:.6}", m.name, m.value);
    }
    Ok(out)
}

fn export(ctx: &RunContext, input: Option<&Path>) -> Result<PathBuf> {
    let ds = Dataset::load(&input.map_or_else(|| ctx.samples_dir(), Path::to_path_buf))?;
    let out = ctx.dir.join(FRAMES_DIR).join(ds.id());
    let rgb: Vec<VideoTensor> = ds.samples.iter().map(|s| s.rgb.clone()).collect();
    let depth: Vec<VideoTensor> = ds.samples.iter().map(|s| s.depth.clone()).collect();
    export_frames(&rgb, &out, "rgb", GridLayout::of(&rgb))?;
    export_frames(&depth, &out, "depth", GridLayout::of(&depth))?;
    Ok(out)
}

/// Frame-grid placement: video `r` occupies row `r`, its frame `c` column `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridLayout {
    pub rows: usize,
    pub cols: usize,
}

impl GridLayout {
    /// The tightest layout holding `videos`.
    pub fn of(videos: &[VideoTensor]) -> Self {
        Self { rows: videos.len(), cols: videos.iter().map(|v| v.dims()[0]).max().unwrap_or(0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameGrid {
    pub layout: GridLayout,
    pub height: usize,
    pub width: usize,
    /// How values in [-1, 1] became bytes.
    pub mapping: String,
    /// Row-major; `None` where a shorter video leaves a cell empty.
    pub cells: Vec<Vec<Option<String>>>,
}

/// Writes `<prefix>_r<row>_c<col>.png` per frame (RGB for 3 channels, grayscale
/// otherwise) and `<prefix>_grid.json` describing the layout.
pub fn export_frames(videos: &[VideoTensor], dir: &Path, prefix: &str, layout: GridLayout) -> Result<FrameGrid> {
    let first = videos.first().ok_or_else(|| Error::invalid("no videos to export"))?;
    let [_, height, width, _] = first.dims();
    if let Some(v) = videos.iter().find(|v| v.dims()[1..3] != [height, width]) {
        return Err(Error::Shape(format!("frame size {:?} differs from {height}x{width}", &v.dims()[1..3])));
    }
    let need = GridLayout::of(videos);
    if need.rows > layout.rows || need.cols > layout.cols {
        return Err(Error::invalid(format!("{}x{} frames do not fit a {}x{} grid", need.rows, need.cols, layout.rows, layout.cols)));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let color = first.dims()[3] == 3;
    let mut cells = vec![vec![None; layout.cols]; layout.rows];
    for (r, video) in videos.iter().enumerate() {
        let rgb = video.dims()[3] == 3;
        for (c, cell) in cells[r].iter_mut().enumerate().take(video.frames()) {
            let frame = if rgb { video.frame(c) } else { video.frame(c).mean_channels() };
            let bytes: Vec<u8> = frame.data().iter().map(|&v| unit_to_byte(v)).collect();
            let name = format!("{prefix}_r{r:03}_c{c:03}.png");
            let path = dir.join(&name);
            let kind = if rgb { image::ExtendedColorType::Rgb8 } else { image::ExtendedColorType::L8 };
            image::save_buffer(&path, &bytes, width as u32, height as u32, kind).map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            *cell = Some(name);
        }
    }
    let mapping = if color { COLOR_MAPPING } else { DEPTH_MAPPING };
    let grid = FrameGrid { layout, height, width, mapping: mapping.to_string(), cells };
    pipeline::write_json(&dir.join(format!("{prefix}_grid.json")), &grid)?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn video(frames: usize, c: usize, value: f32) -> VideoTensor {
        VideoTensor::from_data(frames, 2, 3, c, vec![value; frames * 6 * c]).unwrap()
    }

    fn parse(args: &[&str]) -> std::result::Result<Cli, clap::Error> {
        Cli::try_parse_from(std::iter::once("gdvdm").chain(args.iter().copied()))
    }

    #[test]
    fn one_video_of_five_frames_gives_five_images_and_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let v = [video(5, 3, 0.0)];
        let grid = export_frames(&v, dir.path(), "rgb", GridLayout::of(&v)).unwrap();
        assert_eq!(grid.layout, GridLayout { rows: 1, cols: 5 });
        let mut names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names.len(), 6);
        assert_eq!(names[0], "rgb_grid.json");
        assert!(names[1..].iter().all(|n| n.ends_with(".png")));
    }

    #[test]
    fn endpoints_map_to_black_and_white() {
        let dir = tempfile::tempdir().unwrap();
        let vids = [video(1, 3, -1.0), video(1, 3, 1.0)];
        export_frames(&vids, dir.path(), "rgb", GridLayout::of(&vids)).unwrap();
        let lo = image::open(dir.path().join("rgb_r000_c000.png")).unwrap().to_rgb8();
        let hi = image::open(dir.path().join("rgb_r001_c000.png")).unwrap().to_rgb8();
        assert!(lo.pixels().all(|p| p.0 == [0, 0, 0]));
        assert!(hi.pixels().all(|p| p.0 == [255, 255, 255]));
    }

    #[test]
    fn depth_exports_as_grayscale_with_the_documented_rule() {
        let dir = tempfile::tempdir().unwrap();
        let d = [video(2, 1, 0.0)];
        let grid = export_frames(&d, dir.path(), "depth", GridLayout::of(&d)).unwrap();
        assert_eq!(grid.mapping, DEPTH_MAPPING);
        let img = image::open(dir.path().join("depth_r000_c001.png")).unwrap();
        assert_eq!(img.color(), image::ColorType::L8);
        assert!(img.to_luma8().pixels().all(|p| p.0 == [128]));
    }

    #[test]
    fn empty_or_oversized_exports_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(export_frames(&[], dir.path(), "x", GridLayout { rows: 1, cols: 1 }).is_err());
        assert!(export_frames(&[video(3, 3, 0.0)], dir.path(), "x", GridLayout { rows: 1, cols: 2 }).is_err());
    }

    #[test]
    fn unwritable_destination_is_a_runtime_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, b"x").unwrap();
        let err = export_frames(&[video(1, 3, 0.0)], &file.join("sub"), "x", GridLayout { rows: 1, cols: 1 }).unwrap_err();
        assert_eq!(exit_code(&err), EXIT_RUNTIME);
    }

    #[test]
    fn flags_parse_after_the_subcommand() {
        let cli = parse(&["sample", "--config", "c.toml", "--n", "4", "--omega", "1.4", "--seed", "3"]).unwrap();
        assert_eq!(cli.command, Command::Sample);
        assert_eq!((cli.flags.n, cli.flags.omega, cli.flags.seed), (Some(4), Some(1.4), Some(3)));
        assert!(parse(&["train-everything", "--config", "c.toml"]).is_err());
    }

    #[test]
    fn misplaced_flags_and_missing_config_are_validation_errors() {
        let flags = Flags { config: Some("c.toml".into()), omega: Some(1.0), ..Flags::default() };
        assert_eq!(exit_code(&RunContext::resolve(Command::TrainDepth, &flags).err().unwrap()), EXIT_INVALID);
        let err = RunContext::resolve(Command::GenData, &Flags::default()).err().unwrap();
        assert_eq!(exit_code(&err), EXIT_INVALID);
    }

    #[test]
    fn unknown_command_exits_with_validation_code() {
        assert_eq!(run(["gdvdm", "fly"]), EXIT_INVALID);
        assert_eq!(run(["gdvdm", "--help"]), EXIT_OK);
    }
}
