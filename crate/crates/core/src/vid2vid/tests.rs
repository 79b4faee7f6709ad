use proptest::prelude::*;

use super::*;
use crate::gradcheck::{compare, numeric_gradients, probe_indices, VANISHING_NORM};
use crate::rng::{normal_vec, stream_rng};

fn micro_depth_cfg() -> UNet3DConfig {
    UNet3DConfig {
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
    }
}

fn micro() -> (DualUNet, DualParams) {
    let cfg = DualConfig::from_depth(&micro_depth_cfg(), 3);
    let mut params = init_dual_params(&cfg, 4, None).unwrap();
    // live output head: zero-initialized heads would make most checks vacuous
    let w = params.video.get_mut("out.conv.w").unwrap();
    let fresh = normal_vec::<f32>(&mut stream_rng(8, 0), w.len());
    w.data_mut().iter_mut().zip(fresh).for_each(|(v, r)| *v = 0.05 * r);
    (DualUNet::new(cfg).unwrap(), params)
}

fn video(seed: u64, c: usize) -> VideoTensor {
    let data = normal_vec::<f32>(&mut stream_rng(seed, 0), 2 * 8 * 8 * c).into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    VideoTensor::from_data(2, 8, 8, c, data).unwrap()
}

fn constant(value: f32) -> impl Fn(&Tensor<f32>, &[ConditioningContext], &[usize]) -> Result<Tensor<f32>> {
    move |x, _, _| Ok(Tensor::full(x.shape(), value))
}

trait Predict: Fn(&Tensor<f32>, &[ConditioningContext], &[usize]) -> Result<Tensor<f32>> {}
impl<F: Fn(&Tensor<f32>, &[ConditioningContext], &[usize]) -> Result<Tensor<f32>>> Predict for F {}

struct Stub<F>(F);

impl<F: Fn(&Tensor<f32>, &[ConditioningContext], &[usize]) -> Result<Tensor<f32>>> ConditionalModel for Stub<F> {
    fn predict(&self, x_t: &Tensor<f32>, ctx: &[ConditioningContext], t: &[usize]) -> Result<Tensor<f32>> {
        (self.0)(x_t, ctx, t)
    }
}

/// ε_c ≡ `c` for real contexts, ε_∅ ≡ `n` for the null token.
fn two_valued(c: f32, n: f32) -> Stub<impl Predict> {
    Stub(move |x: &Tensor<f32>, ctx: &[ConditioningContext], _: &[usize]| {
        let per = x.len() / ctx.len();
        let data = ctx.iter().flat_map(|k| std::iter::repeat_n(if k.is_null() { n } else { c }, per)).collect();
        Tensor::from_vec(x.shape(), data)
    })
}

#[test]
fn constant_stubs_combine_by_hand_arithmetic() {
    // 0.5 + 1.4·(0.5 − 0.3)
    let x = Tensor::zeros(&[2, 2, 8, 8, 3]);
    let ctx = vec![ConditioningContext::Depth(video(0, 1)), ConditioningContext::Depth(video(1, 1))];
    let out = guided_eps_batch(&two_valued(0.5, 0.3), &x, &ctx, &[1, 2], 1.4).unwrap();
    assert!(out.data().iter().all(|&v| (v - 0.78).abs() < 1e-6), "{:?}", &out.data()[..4]);
}

#[test]
fn guidance_rejects_the_null_token() {
    let x = Tensor::zeros(&[1, 2, 8, 8, 3]);
    let ctx = vec![ConditioningContext::null_like(&video(0, 1))];
    assert!(guided_eps_batch(&Stub(constant(0.0)), &x, &ctx, &[1], 1.4).is_err());
}

#[test]
fn zero_weight_guidance_is_the_conditional_prediction_bitwise() {
    let (net, params) = micro();
    let x = video(3, 3);
    let ctx = ConditioningContext::Depth(video(4, 1));
    let t = Timestep::new(17, 100).unwrap();
    let cond = conditional_eps(&net, &params, &x, &ctx, t).unwrap();
    assert_eq!(guided_eps(&net, &params, &x, &ctx, t, 0.0).unwrap(), cond);
    assert_ne!(guided_eps(&net, &params, &x, &ctx, t, 1.4).unwrap(), cond);
}

#[test]
fn null_token_is_the_all_zeros_video_through_the_same_path() {
    let (net, params) = micro();
    let x = video(5, 3);
    let t = Timestep::new(40, 100).unwrap();
    let null = ConditioningContext::Null { frames: 2, height: 8, width: 8 };
    let zeros = ConditioningContext::Depth(VideoTensor::full(2, 8, 8, 1, 0.0).unwrap());
    assert_eq!(conditional_eps(&net, &params, &x, &null, t).unwrap(), conditional_eps(&net, &params, &x, &zeros, t).unwrap());
}

#[test]
fn zero_initialized_head_predicts_zero_for_any_context() {
    let cfg = DualConfig::from_depth(&micro_depth_cfg(), 3);
    let params = init_dual_params(&cfg, 0, None).unwrap();
    let net = DualUNet::new(cfg).unwrap();
    let t = Timestep::new(5, 10).unwrap();
    for ctx in [ConditioningContext::Depth(video(1, 1)), ConditioningContext::null_like(&video(1, 1))] {
        let eps = conditional_eps(&net, &params, &video(2, 3), &ctx, t).unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn full_scale_shapes_flow_through() {
    // ten 64×64 frames, but narrow channels to keep the test fast
    let depth_cfg = UNet3DConfig { base_channels: 4, time_embed_dim: 8, attn_head_dim: 4, ..UNet3DConfig::full_scale() };
    let cfg = DualConfig::from_depth(&depth_cfg, 3);
    let mut params = init_dual_params(&cfg, 0, None).unwrap();
    *params.video.get_mut("out.conv.b").unwrap() = Tensor::full(&[3], 0.1);
    let net = DualUNet::new(cfg).unwrap();
    let x = VideoTensor::full(10, 64, 64, 3, 0.1).unwrap();
    let depth = VideoTensor::full(10, 64, 64, 1, 0.2).unwrap();
    let eps = conditional_eps(&net, &params, &x, &ConditioningContext::Depth(depth), Timestep::new(3, 10).unwrap()).unwrap();
    assert_eq!(eps.dims(), [10, 64, 64, 3]);
}

#[test]
fn mismatched_branches_are_rejected() {
    let mut cfg = DualConfig::from_depth(&micro_depth_cfg(), 3);
    cfg.depth.base_channels = 8;
    assert!(matches!(cfg.validate(), Err(Error::Shape(_))));
    let cfg = DualConfig::from_depth(&micro_depth_cfg(), 3);
    let wrong = init_params(&UNet3DConfig { base_channels: 8, ..micro_depth_cfg() }, 0).unwrap();
    assert!(matches!(init_dual_params(&cfg, 0, Some(wrong)), Err(Error::Incompatible(_))));
}

#[test]
fn depth_branch_starts_from_given_weights() {
    let cfg = DualConfig::from_depth(&micro_depth_cfg(), 3);
    let stage1 = init_params(&cfg.depth, 99).unwrap();
    let p = init_dual_params(&cfg, 0, Some(stage1.clone())).unwrap();
    assert_eq!(p.depth, stage1);
    assert_eq!(DualParams::split(&p.merge()).unwrap(), p);
}

#[test]
fn wrong_context_shape_is_reported() {
    let (net, params) = micro();
    let ctx = ConditioningContext::Depth(VideoTensor::full(2, 4, 4, 1, 0.0).unwrap());
    let t = Timestep::new(1, 10).unwrap();
    assert!(matches!(conditional_eps(&net, &params, &video(0, 3), &ctx, t), Err(Error::Shape(_))));
}

fn pairs(n: u64) -> (Vec<VideoTensor>, Vec<VideoTensor>) {
    ((0..n).map(|i| video(100 + i, 3)).collect(), (0..n).map(|i| video(200 + i, 1)).collect())
}

fn null_fraction(p: f64, draws: usize) -> f64 {
    let sched = ScheduleSpec::cosine(100).build().unwrap();
    let rgb = vec![VideoTensor::full(1, 1, 1, 3, 0.0).unwrap()];
    let depth = vec![VideoTensor::full(1, 1, 1, 1, 0.0).unwrap()];
    let per = 100;
    let nulls: usize = (0..(draws / per) as u64)
        .map(|step| draw_pair_batch(&rgb, &depth, &sched, per, p, 6, step).unwrap().ctx.iter().filter(|c| c.is_null()).count())
        .sum();
    nulls as f64 / draws as f64
}

#[test]
fn dropout_rate_matches_its_probability() {
    assert_eq!(null_fraction(0.0, 2000), 0.0);
    assert_eq!(null_fraction(1.0, 2000), 1.0);
    let f = null_fraction(0.2, 10_000);
    assert!((f - 0.2).abs() <= 0.02, "{f}");
}

#[test]
fn full_dropout_makes_the_loss_blind_to_depth() {
    let (net, params) = micro();
    let sched = ScheduleSpec::cosine(100).build().unwrap();
    let (rgb, depth) = pairs(4);
    let mut shuffled = depth.clone();
    shuffled.rotate_left(1);
    let merged = params.merge();
    let loss = |d: &[VideoTensor]| {
        let batch = draw_pair_batch(&rgb, d, &sched, 4, 1.0, 2, 0).unwrap();
        train_step(&net, &merged, &batch, &sched).unwrap().0
    };
    assert_eq!(loss(&depth), loss(&shuffled));
    let live = |d: &[VideoTensor]| {
        let batch = draw_pair_batch(&rgb, d, &sched, 4, 0.0, 2, 0).unwrap();
        train_step(&net, &merged, &batch, &sched).unwrap().0
    };
    assert_ne!(live(&depth), live(&shuffled));
}

#[test]
fn training_updates_both_branches_deterministically() {
    let (net, params) = micro();
    let sched = ScheduleSpec::cosine(50).build().unwrap();
    let (rgb, depth) = pairs(3);
    let hyper = TrainConfig { batch_size: 2, seed: 5, ..TrainConfig::default() };
    let run = || {
        let state = TrainState::new(params.merge(), hyper.optimizer);
        train(&net, state, &rgb, &depth, &sched, 2, &hyper, &GuidanceConfig::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let after = DualParams::split(&a.params).unwrap();
    assert_ne!(after.depth.get("enc.0.0.res.conv1.w"), params.depth.get("enc.0.0.res.conv1.w"));
    assert_ne!(after.video.get("enc.0.0.res.conv1.w"), params.video.get("enc.0.0.res.conv1.w"));
    // the depth decoder never runs, so it stays put
    assert_eq!(after.depth.get("out.conv.w"), params.depth.get("out.conv.w"));
}

#[test]
fn sampling_is_deterministic_and_zero_weight_is_the_plain_chain() {
    let (net, params) = micro();
    let sched = ScheduleSpec::cosine(12).build().unwrap();
    let depth = video(7, 1);
    let a = sample_conditional(&net, &params, &depth, &sched, 1.4, 9).unwrap();
    assert_eq!(a, sample_conditional(&net, &params, &depth, &sched, 1.4, 9).unwrap());
    assert_eq!(a.dims(), [2, 8, 8, 3]);
    assert!(a.is_normalized());

    let model = DualDenoiser::new(&net, &params);
    let ctx = [ConditioningContext::Depth(depth.clone())];
    let plain = |x: &Tensor<f32>, t: &[usize]| model.predict(x, &ctx, t);
    let chain = Chain::from_noise([2, 8, 8, 3], 9).unwrap();
    let reference = reverse_chain(&plain, &sched, vec![chain], 12).unwrap().remove(0);
    assert_eq!(sample_conditional(&net, &params, &depth, &sched, 0.0, 9).unwrap(), reference);
}

#[test]
fn dual_gradients_match_finite_differences() {
    let (net, params) = micro();
    let params = params.merge().cast::<f64>();
    let sched = ScheduleSpec::cosine(100).build().unwrap();
    let (rgb, depth) = pairs(2);
    let batch = draw_pair_batch(&rgb, &depth, &sched, 2, 0.0, 1, 0).unwrap();
    let x_t = batch.noise.noised(&sched).unwrap().cast::<f64>();
    let ctx = stack_contexts(&batch.ctx).unwrap().cast::<f64>();
    let target = VideoTensor::stack(&batch.noise.eps).unwrap().cast::<f64>();
    let t = batch.noise.timesteps();
    let run = |p: &ParameterSet<f64>, trainable: bool| {
        let mut tape = Tape::<f64>::new();
        let bound = net.bind(&mut tape, p, trainable).unwrap();
        let pred = net.eps_on_tape(&mut tape, &bound, &x_t, &ctx, &t).unwrap();
        let target = tape.constant(target.clone());
        let l = tape.mse(pred, target).unwrap();
        (tape, bound, l)
    };
    let (tape, bound, l) = run(&params, true);
    let analytic = bound.grads(&tape, l);
    let probes = probe_indices(&params, 8, 3);
    let numeric = numeric_gradients(&params, 1e-4, &probes, |p| {
        let (tape, _, l) = run(p, false);
        Ok(tape.value(l).data()[0])
    })
    .unwrap();
    let checks = compare(&analytic, &numeric, &probes);
    for c in &checks {
        assert!(c.rel_error < 1e-4, "{}: {:.3e}", c.name, c.rel_error);
    }
    // the depth encoder is reached through the pyramid
    let depth_live = checks.iter().filter(|c| c.name.starts_with("depth.enc") && c.analytic_norm > VANISHING_NORM).count();
    assert!(depth_live > 0);
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let (net, params) = micro();
    let ckpt = DualCheckpoint {
        dual: net.config().clone(),
        schedule: ScheduleSpec::cosine(20),
        guidance: GuidanceConfig::default(),
        state: TrainState::new(params.merge(), AdamConfig::default()),
        provenance: serde_json::json!({"depth_checkpoint": "x"}),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dual.gdt");
    ckpt.save(&path).unwrap();
    let back = DualCheckpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.params().unwrap(), params);
    assert_eq!(back.to_container().to_bytes(), std::fs::read(&path).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn guidance_is_the_exact_linear_combination(seed in any::<u64>(), omega in 0.0f64..4.0) {
        let c = Tensor::from_vec(&[1, 2, 2, 2, 3], normal_vec(&mut stream_rng(seed, 0), 24)).unwrap();
        let n = Tensor::from_vec(&[1, 2, 2, 2, 3], normal_vec(&mut stream_rng(seed, 1), 24)).unwrap();
        let (cc, nn) = (c.clone(), n.clone());
        let stub = Stub(move |_: &Tensor<f32>, ctx: &[ConditioningContext], _: &[usize]| {
            Ok(if ctx[0].is_null() { nn.clone() } else { cc.clone() })
        });
        let x = Tensor::zeros(&[1, 2, 2, 2, 3]);
        let ctx = [ConditioningContext::Depth(VideoTensor::full(2, 2, 2, 1, 0.5).unwrap())];
        let out = guided_eps_batch(&stub, &x, &ctx, &[3], omega).unwrap();
        for ((o, a), b) in out.data().iter().zip(c.data()).zip(n.data()) {
            prop_assert_eq!(*o, (1.0 + omega) as f32 * a - omega as f32 * b);
        }
    }
}
