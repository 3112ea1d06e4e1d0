use flexipatch::pdegen::{generate_dataset, PDEParams, TrajectoryDataset, WindowSet};
use flexipatch::processor::{AttentionKind, ModelConfig, SurrogateModel};
use flexipatch::tokenizer::TokenizerKind;
use flexipatch::training::{
    evaluate_next_step, nmse_loss, sample_size, spaced_windows, train, SizeDistribution, TrainConfig,
};
use flexipatch::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data() -> TrajectoryDataset {
    let p = PDEParams {
        height: 16,
        width: 16,
        steps: 8,
        ic_k_max: 6.0,
        ..PDEParams::default()
    };
    generate_dataset(&p, 10, 3).unwrap()
}

fn sets(ds: &TrajectoryDataset) -> (WindowSet, WindowSet) {
    (
        WindowSet::new(&ds.train, &ds.stats, 2).unwrap(),
        WindowSet::new(&ds.valid, &ds.stats, 2).unwrap(),
    )
}

fn model(kind: TokenizerKind, seed: u64) -> SurrogateModel {
    let cfg = ModelConfig {
        embed_dim: 16,
        mlp_dim: 32,
        n_blocks: 1,
        attention: AttentionKind::Axial,
        tokenizer: kind,
        size_set: if kind == TokenizerKind::Fixed { vec![16] } else { vec![4, 8, 16] },
        context: 2,
        ..ModelConfig::default()
    };
    SurrogateModel::new(cfg, seed).unwrap()
}

fn cfg(dist: SizeDistribution) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 4,
        epochs: 2,
        epoch_size: 16,
        size_dist: dist,
        seed: 5,
        val_windows: Some(4),
        ..TrainConfig::default()
    }
}

#[test]
fn nmse_matches_loop_reference() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let (b, h, w, c) = (3, 5, 4, 2);
    let p = Tensor::randn(&[b, h, w, c], 1.0, &mut r);
    let t = Tensor::randn(&[b, h, w, c], 1.0, &mut r);
    let mut want = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            let (mut num, mut den) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let i = ((bi * h + y) * w + x) * c + ci;
                    num += (p.data()[i] - t.data()[i]).powi(2);
                    den += t.data()[i].powi(2);
                }
            }
            want += (num / (h * w) as f64) / (den / (h * w) as f64 + 1e-7);
        }
    }
    want /= (b * c) as f64;
    assert!((nmse_loss(&p, &t, 1e-7).unwrap() - want).abs() <= 1e-10);
    assert_eq!(nmse_loss(&t, &t, 1e-7).unwrap(), 0.0);
    let zero = Tensor::zeros(t.shape());
    assert!((nmse_loss(&zero, &t, 1e-7).unwrap() - 1.0).abs() <= 1e-6);
}

#[test]
fn uniform_sampling_is_within_three_sigma() {
    let dist = SizeDistribution::uniform(&[4, 8, 16]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 30_000usize;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let s = sample_size(&mut rng, &dist).unwrap();
        counts[[4, 8, 16].iter().position(|&x| x == s).unwrap()] += 1;
    }
    let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 / 3.0).abs() <= 3.0 * sigma, "{counts:?}");
    }
    let draw = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..50).map(|_| sample_size(&mut r, &dist).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(9), draw(9));
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let ds = data();
    let (tr, va) = sets(&ds);
    let mut m = model(TokenizerKind::Ckm, 1);
    let before = m.params.clone();
    let c = TrainConfig {
        lr: 0.0,
        epochs: 1,
        ..cfg(SizeDistribution::uniform(&[4, 8, 16]))
    };
    train(&mut m, &tr, &va, &c, None).unwrap();
    assert_eq!(m.params, before);
}

#[test]
fn single_size_ckm_training_equals_fixed_training() {
    let ds = data();
    let (tr, va) = sets(&ds);
    let mut flex = model(TokenizerKind::Ckm, 2);
    let mut fixed = model(TokenizerKind::Fixed, 2);
    assert_eq!(flex.params, fixed.params);
    let c = cfg(SizeDistribution::single(16));
    let a = train(&mut flex, &tr, &va, &c, None).unwrap();
    let b = train(&mut fixed, &tr, &va, &c, None).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.epochs.iter().map(|e| e.val_vrmse[&16]).collect::<Vec<_>>(),
               b.epochs.iter().map(|e| e.val_vrmse[&16]).collect::<Vec<_>>());
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let ds = data();
    let (tr, va) = sets(&ds);
    let run = || {
        let mut m = model(TokenizerKind::Csm, 3);
        train(&mut m, &tr, &va, &cfg(SizeDistribution::uniform(&[4, 8, 16])), None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.size_counts, b.size_counts);
}

#[test]
fn stats_record_every_size_and_the_sample_budget() {
    let ds = data();
    let (tr, va) = sets(&ds);
    let mut m = model(TokenizerKind::Ckm, 4);
    let c = cfg(SizeDistribution::uniform(&[4, 8, 16]));
    let stats = train(&mut m, &tr, &va, &c, None).unwrap();
    assert_eq!(stats.epochs.len(), c.epochs);
    for e in &stats.epochs {
        assert_eq!(e.val_vrmse.keys().copied().collect::<Vec<_>>(), vec![4, 8, 16]);
    }
    assert_eq!(stats.total_samples, c.total_samples());
    assert_eq!(stats.size_counts.values().sum::<usize>() * c.batch_size, stats.total_samples);

    // one flexible run at three times the budget of each fixed run
    let fixed = cfg(SizeDistribution::single(16));
    let flexible = cfg(SizeDistribution::uniform(&[4, 8, 16])).scaled_budget(3);
    assert_eq!(flexible.total_samples(), 3 * fixed.total_samples());
}

#[test]
fn best_checkpoint_is_written_and_restored() {
    let ds = data();
    let (tr, va) = sets(&ds);
    let mut m = model(TokenizerKind::Ckm, 5);
    let dir = std::env::temp_dir().join(format!("flxp-train-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("best.ckpt");
    let stats = train(&mut m, &tr, &va, &cfg(SizeDistribution::uniform(&[4, 8, 16])), Some(&path)).unwrap();
    let back = SurrogateModel::load(&path).unwrap();
    assert_eq!(back.params, m.params);
    let best = stats.epochs.iter().map(|e| e.mean_val()).fold(f64::INFINITY, f64::min);
    assert_eq!(best, stats.best_val);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn non_finite_loss_aborts_with_context() {
    let ds = data();
    let (tr, va) = sets(&ds);
    let mut m = model(TokenizerKind::Ckm, 6);
    m.params.get_mut("head.b").unwrap().data_mut()[0] = f64::NAN;
    let err = train(&mut m, &tr, &va, &cfg(SizeDistribution::uniform(&[4, 8, 16])), None).unwrap_err();
    match err {
        Error::NonFinite(msg) => {
            assert!(msg.contains("step 0") && msg.contains("seed 5"), "{msg}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn training_beats_persistence() {
    let ds = data();
    let (tr, va) = sets(&ds);
    let mut m = model(TokenizerKind::Ckm, 7);
    let windows = spaced_windows(&va, None);
    let persistence = evaluate_next_step(&m, &va, &windows, 8, 8).unwrap();
    let c = TrainConfig {
        lr: 3e-3,
        epochs: 4,
        epoch_size: 64,
        ..cfg(SizeDistribution::single(8))
    };
    train(&mut m, &tr, &va, &c, None).unwrap();
    let trained = evaluate_next_step(&m, &va, &windows, 8, 8).unwrap();
    assert!(trained < persistence, "trained {trained} vs persistence {persistence}");
}

#[test]
fn rejects_sizes_outside_the_model() {
    let ds = data();
    let (tr, va) = sets(&ds);
    let mut m = model(TokenizerKind::Fixed, 8);
    assert!(train(&mut m, &tr, &va, &cfg(SizeDistribution::uniform(&[4, 8, 16])), None).is_err());
}
