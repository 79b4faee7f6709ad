//! End-to-end runs of the `gdvdm` binary on a tiny configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gdvdm::config::RunConfig;
use gdvdm::data::{Dataset, ToyConfig};
use gdvdm::metrics::MetricReport;
use gdvdm::pipeline;
use gdvdm::schedule::ScheduleSpec;
use gdvdm::unet3d::UNet3DConfig;
use gdvdm::vdm::VdmCheckpoint;

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.data.count = 3;
    cfg.data.toy = ToyConfig { frames: 2, height: 8, width: 8, min_size: 1.5, max_size: 2.5, ..ToyConfig::default() };
    cfg.pipeline.schedule = ScheduleSpec::cosine(20);
    cfg.pipeline.depth_model = UNet3DConfig {
        base_channels: 4,
        channel_mults: vec![1, 2],
        blocks_per_resolution: 1,
        attn_head_dim: 4,
        attn_scales: Some(vec![1]),
        in_channels: 3,
        out_channels: 3,
        frames: 2,
        height: 8,
        width: 8,
        time_embed_dim: 8,
        conditional: false,
    };
    for stage in [&mut cfg.pipeline.stage1, &mut cfg.pipeline.stage2] {
        stage.steps = 4;
        stage.train.batch_size = 2;
    }
    cfg.checkpoint.every = 2;
    cfg.sample.n = 2;
    cfg.sample.seed = 3;
    cfg.evaluate.feature_dim = 1;
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn gdvdm(root: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdvdm")).args(args).arg("--config").arg(config).env("GDVDM_RUN_ROOT", root).output().unwrap()
}

fn ok(out: Output) -> PathBuf {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

const CHAIN: [&[&str]; 7] = [
    &["gen-data"],
    &["train-depth"],
    &["build-denoised"],
    &["train-vid2vid"],
    &["sample", "--n", "2", "--omega", "1.4", "--seed", "3"],
    &["evaluate"],
    &["export-frames", "--n", "2", "--omega", "1.4", "--seed", "3"],
];

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn full_chain_is_byte_identical_across_two_runs() {
    let work = tempfile::tempdir().unwrap();
    let config = write_config(work.path(), &tiny());
    let roots = [work.path().join("a"), work.path().join("b")];
    let mut outputs = Vec::new();
    for root in &roots {
        let paths: Vec<PathBuf> = CHAIN.iter().map(|args| ok(gdvdm(root, &config, args))).collect();
        outputs.push(paths);
    }
    let run_id = tiny().run_id();
    let (a, b) = (roots[0].join(&run_id), roots[1].join(&run_id));
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        assert!(tb[k] == *v, "{} differs between runs", k.display());
    }

    let [data, depth, denoised, dual, samples, metrics, frames] = <[PathBuf; 7]>::try_from(outputs.remove(0)).unwrap();
    assert_eq!(data, a.join("data"));
    assert!(depth.ends_with("depth.gdt") && dual.ends_with("dual.gdt"));
    assert!(denoised.ends_with("denoised"));
    assert!(samples.ends_with("samples/n2-omega1.4-seed3"));
    let report: MetricReport = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(report.get("fvd").is_some() && report.get("depth_fidelity").is_some());
    let explicit = ok(Command::new(env!("CARGO_BIN_EXE_gdvdm"))
        .arg("evaluate")
        .arg("--real")
        .arg(&data)
        .arg("--gen")
        .arg(&a)
        .arg("--config")
        .arg(&config)
        .env("GDVDM_RUN_ROOT", &roots[0])
        .output()
        .unwrap());
    assert_eq!(explicit, metrics);
    // 2 videos × 2 frames, rgb and depth, plus one manifest each
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 10);
    assert!(a.join("run.json").exists());
    assert_eq!(RunConfig::load(&a.join("config.toml")).unwrap(), tiny());
}

#[test]
fn sample_twice_gives_identical_bytes_and_leaves_inputs_alone() {
    let work = tempfile::tempdir().unwrap();
    let config = write_config(work.path(), &tiny());
    let root = work.path().join("runs");
    for args in &CHAIN[..4] {
        ok(gdvdm(&root, &config, args));
    }
    let run = root.join(tiny().run_id());
    let inputs = tree(&run);
    let args = ["sample", "--n", "2", "--omega", "1.4", "--seed", "3"];
    let first = tree(&ok(gdvdm(&root, &config, &args)));
    let second = tree(&ok(gdvdm(&root, &config, &args)));
    assert_eq!(first, second);
    let after = tree(&run);
    for (k, v) in &inputs {
        assert!(after[k] == *v, "{} was modified", k.display());
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let work = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let config = write_config(work.path(), &cfg);
    let (full_root, resumed_root) = (work.path().join("full"), work.path().join("resumed"));
    for root in [&full_root, &resumed_root] {
        ok(gdvdm(root, &config, &["gen-data"]));
    }
    let full = std::fs::read(ok(gdvdm(&full_root, &config, &["train-depth"]))).unwrap();

    // an interrupted run leaves the step-2 checkpoint behind
    let run = resumed_root.join(cfg.run_id());
    let ds = Dataset::load(&run.join("data")).unwrap();
    let sched = cfg.pipeline.schedule.build().unwrap();
    let partial = pipeline::continue_depth(&cfg.pipeline, pipeline::depth_start(&cfg.pipeline, &ds).unwrap(), &ds, &sched, 2).unwrap();
    partial.save(&run.join("depth.gdt")).unwrap();
    let resumed = std::fs::read(ok(gdvdm(&resumed_root, &config, &["train-depth", "--resume"]))).unwrap();
    assert!(full == resumed, "resumed checkpoint differs");
    assert_eq!(VdmCheckpoint::load(&run.join("depth.gdt")).unwrap().state.step, 4);
}

#[test]
fn exit_codes_separate_validation_from_runtime_failures() {
    let work = tempfile::tempdir().unwrap();
    let root = work.path().join("runs");
    let config = write_config(work.path(), &tiny());

    let bad = work.path().join("bad.toml");
    std::fs::write(&bad, tiny().to_toml().replacen("[sample]", "[sample]\nbogus = 1", 1)).unwrap();
    let out = gdvdm(&root, &bad, &["gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sample.bogus"));

    assert_eq!(gdvdm(&root, &config, &["teleport"]).status.code(), Some(1));
    assert_eq!(gdvdm(&root, &config, &["gen-data", "--omega", "2"]).status.code(), Some(1));

    // no dataset yet
    let out = gdvdm(&root, &config, &["train-depth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing upstream artifact"));
}

#[test]
fn step_override_moves_the_run_and_out_beats_the_environment() {
    let work = tempfile::tempdir().unwrap();
    let config = write_config(work.path(), &tiny());
    let env_root = work.path().join("env");
    let out_root = work.path().join("flag");
    let path = ok(Command::new(env!("CARGO_BIN_EXE_gdvdm"))
        .args(["gen-data", "--steps", "1", "--out"])
        .arg(&out_root)
        .arg("--config")
        .arg(&config)
        .env("GDVDM_RUN_ROOT", &env_root)
        .output()
        .unwrap());
    let mut expected = tiny();
    expected.pipeline.stage1.steps = 1;
    expected.pipeline.stage2.steps = 1;
    assert_eq!(path, out_root.join(expected.run_id()).join("data"));
    assert!(!env_root.exists());
}
