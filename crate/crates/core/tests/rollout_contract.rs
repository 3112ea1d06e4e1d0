use flexipatch::pdegen::{generate_dataset, PDEParams, WindowSet};
use flexipatch::processor::{AttentionKind, ModelConfig, SurrogateModel};
use flexipatch::rollout::{make_schedule, rollout, rollout_windows, ScheduleKind, DEFAULT_CYCLE};
use flexipatch::tokenizer::TokenizerKind;
use flexipatch::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(trained_head: bool) -> SurrogateModel {
    let cfg = ModelConfig {
        embed_dim: 16,
        mlp_dim: 32,
        n_blocks: 1,
        attention: AttentionKind::Axial,
        tokenizer: TokenizerKind::Ckm,
        context: 3,
        ..ModelConfig::default()
    };
    let mut m = SurrogateModel::new(cfg, 4).unwrap();
    if trained_head {
        *m.params.get_mut("head.w").unwrap() = Tensor::randn(&[16, 16], 0.2, &mut ChaCha8Rng::seed_from_u64(5));
    }
    m
}

fn context() -> Tensor {
    Tensor::randn(&[2, 32, 32, 3, 1], 1.0, &mut ChaCha8Rng::seed_from_u64(6))
}

fn cyclic(steps: usize) -> flexipatch::rollout::PatchSchedule {
    make_schedule(&ScheduleKind::Cyclic { phase: 0 }, steps, &DEFAULT_CYCLE).unwrap()
}

#[test]
fn horizon_one_is_a_single_forward() {
    let m = model(true);
    let ctx = context();
    for s in [4, 8, 16] {
        let sched = make_schedule(&ScheduleKind::Fixed { size: s }, 1, &DEFAULT_CYCLE).unwrap();
        assert_eq!(rollout(&m, &ctx, &sched).unwrap(), m.forward(&ctx, s).unwrap());
    }
}

#[test]
fn persistence_model_repeats_the_last_frame() {
    let m = model(false);
    let ctx = context();
    let out = rollout(&m, &ctx, &cyclic(5)).unwrap();
    let last = ctx.narrow(3, 2, 1).unwrap();
    for t in 0..5 {
        assert_eq!(out.narrow(3, t, 1).unwrap(), last);
    }
}

#[test]
fn fixed_schedule_equals_repeated_forward() {
    let m = model(true);
    let mut window = context();
    let out = rollout(&m, &window, &make_schedule(&ScheduleKind::Fixed { size: 16 }, 4, &DEFAULT_CYCLE).unwrap())
        .unwrap();
    for t in 0..4 {
        let next = m.forward(&window, 16).unwrap();
        assert_eq!(out.narrow(3, t, 1).unwrap(), next);
        window = Tensor::concat(&[&window.narrow(3, 1, 2).unwrap(), &next], 3).unwrap();
    }
}

#[test]
fn replay_from_an_intermediate_context() {
    // the loop keeps no state beyond the sliding window
    let m = model(true);
    let ctx = context();
    let sched = cyclic(6);
    let full = rollout(&m, &ctx, &sched).unwrap();
    let mid = Tensor::concat(&[&ctx.narrow(3, 2, 1).unwrap(), &full.narrow(3, 0, 2).unwrap()], 3).unwrap();
    let tail = flexipatch::rollout::PatchSchedule {
        kind: sched.kind.clone(),
        sizes: sched.sizes[2..].to_vec(),
    };
    assert_eq!(rollout(&m, &mid, &tail).unwrap(), full.narrow(3, 2, 4).unwrap());
}

#[test]
fn unsupported_sizes_fail_before_any_step() {
    let mut cfg = model(false).config.clone();
    cfg.size_set = vec![8, 16];
    let m = SurrogateModel::new(cfg, 0).unwrap();
    assert!(rollout(&m, &context(), &cyclic(3)).is_err());
}

#[test]
fn window_rollouts_pair_predictions_with_truth() {
    let p = PDEParams {
        height: 32,
        width: 32,
        steps: 10,
        ..PDEParams::default()
    };
    let ds = generate_dataset(&p, 10, 2).unwrap();
    let set = WindowSet::new(&ds.test, &ds.stats, 3).unwrap();
    let m = model(false);
    let (pred, truth) = rollout_windows(&m, &set, &[(0, 0), (0, 4)], &cyclic(3), 1).unwrap();
    assert_eq!(pred.shape(), &[2, 32, 32, 3, 1]);
    assert_eq!(truth.shape(), pred.shape());
    assert_eq!(truth.narrow(0, 1, 1).unwrap().narrow(3, 0, 1).unwrap().data(), set.frames(0, 7, 1).unwrap().data());
    assert!(rollout_windows(&m, &set, &[(0, 5)], &cyclic(3), 1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn schedules_are_pure(steps in 1usize..40, phase in 0usize..3, seed in 0u64..100) {
        for kind in [ScheduleKind::Cyclic { phase }, ScheduleKind::Random { seed }] {
            let a = make_schedule(&kind, steps, &DEFAULT_CYCLE).unwrap();
            prop_assert_eq!(a.sizes.len(), steps);
            prop_assert_eq!(&a, &make_schedule(&kind, steps, &DEFAULT_CYCLE).unwrap());
        }
        let c = make_schedule(&ScheduleKind::Cyclic { phase }, steps, &DEFAULT_CYCLE).unwrap();
        for (t, s) in c.sizes.iter().enumerate() {
            prop_assert_eq!(*s, DEFAULT_CYCLE[(t + phase) % 3]);
        }
    }
}
