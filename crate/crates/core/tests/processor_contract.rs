use flexipatch::autodiff::{attention_score_count, fd_check, reset_attention_score_count, FdOptions, Graph, SeqLayout};
use flexipatch::processor::{AttentionKind, ModelConfig, SurrogateModel};
use flexipatch::tokenizer::TokenizerKind;
use flexipatch::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn config(kind: TokenizerKind, attention: AttentionKind, d: usize, context: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: d,
        mlp_dim: 2 * d,
        n_heads: 4,
        n_blocks: 2,
        attention,
        tokenizer: kind,
        size_set: if kind == TokenizerKind::Fixed { vec![16] } else { vec![4, 8, 16] },
        context,
        ..ModelConfig::default()
    }
}

/// A model whose output actually depends on every parameter.
fn live_model(cfg: ModelConfig, seed: u64) -> SurrogateModel {
    let mut m = SurrogateModel::new(cfg, seed).unwrap();
    let d = m.config.embed_dim;
    let mut r = rng(seed ^ 0x5eed);
    *m.params.get_mut("head.w").unwrap() = Tensor::randn(&[d, d], 0.3, &mut r);
    for (name, t) in m.params.iter_mut() {
        if name.ends_with(".b") || name.ends_with(".g") {
            let noise = Tensor::randn(t.shape(), 0.1, &mut r);
            t.axpy(1.0, &noise).unwrap();
        }
    }
    m
}

#[test]
fn output_shape_at_every_size() {
    for kind in [TokenizerKind::Ckm, TokenizerKind::Csm] {
        let m = live_model(config(kind, AttentionKind::Axial, 32, 2), 1);
        let ctx = Tensor::randn(&[2, 64, 64, 2, 1], 1.0, &mut rng(2));
        for s in [4, 8, 16] {
            assert_eq!(m.forward(&ctx, s).unwrap().shape(), &[2, 64, 64, 1, 1]);
        }
    }
}

#[test]
fn parameter_shapes_do_not_depend_on_size() {
    let m = SurrogateModel::new(config(TokenizerKind::Csm, AttentionKind::Full, 32, 2), 0).unwrap();
    let before: Vec<(String, Vec<usize>)> =
        m.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    let ctx = Tensor::zeros(&[1, 32, 32, 2, 1]);
    for s in [4, 8, 16] {
        m.forward(&ctx, s).unwrap();
    }
    let after: Vec<(String, Vec<usize>)> =
        m.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    assert_eq!(before, after);
}

#[test]
fn attention_counters_match_token_counts() {
    let (b, t, h) = (1usize, 2usize, 64usize);
    let ctx = Tensor::randn(&[b, h, h, t, 1], 1.0, &mut rng(3));
    for s in [4, 8, 16] {
        let (nh, nw) = (h / s, h / s);
        let n = nh * nw;
        let temporal = b * n * t * t;
        for (kind, spatial) in [
            (AttentionKind::Full, b * t * n * n),
            (AttentionKind::Axial, b * t * n * (nh + nw)),
        ] {
            let m = SurrogateModel::new(config(TokenizerKind::Ckm, kind, 32, t), 0).unwrap();
            reset_attention_score_count();
            m.forward(&ctx, s).unwrap();
            assert_eq!(attention_score_count(), (2 * (temporal + spatial)) as u64, "{kind:?} size {s}");
        }
    }
}

#[test]
fn full_and_axial_differ_and_are_pinned() {
    let ctx = Tensor::randn(&[1, 32, 32, 2, 1], 1.0, &mut rng(4));
    let full = live_model(config(TokenizerKind::Ckm, AttentionKind::Full, 32, 2), 7);
    let mut axial = live_model(config(TokenizerKind::Ckm, AttentionKind::Axial, 32, 2), 7);
    // share every weight the two variants have in common
    for (name, t) in full.params.iter() {
        *axial.params.get_mut(name).unwrap() = t.clone();
    }
    let a = full.forward(&ctx, 4).unwrap();
    let b = axial.forward(&ctx, 4).unwrap();
    let gap = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-6, "full and axial coincide: {gap}");
    let probe = |x: &Tensor| x.data().iter().enumerate().map(|(i, v)| v * ((i % 7) as f64 - 3.0)).sum::<f64>();
    let (pa, pb) = (probe(&a), probe(&b));
    assert!((pa - GOLDEN_FULL).abs() <= 1e-9 * GOLDEN_FULL.abs().max(1.0), "{pa}");
    assert!((pb - GOLDEN_AXIAL).abs() <= 1e-9 * GOLDEN_AXIAL.abs().max(1.0), "{pb}");
}

const GOLDEN_FULL: f64 = -234.86286855523568;
const GOLDEN_AXIAL: f64 = -211.41570949183253;

#[test]
fn forward_is_bit_deterministic() {
    let ctx = Tensor::randn(&[2, 32, 32, 3, 1], 1.0, &mut rng(5));
    let a = live_model(config(TokenizerKind::Csm, AttentionKind::Axial, 32, 3), 11);
    let b = live_model(config(TokenizerKind::Csm, AttentionKind::Axial, 32, 3), 11);
    assert_eq!(a.params, b.params);
    let ya = a.forward(&ctx, 8).unwrap();
    let yb = b.forward(&ctx, 8).unwrap();
    let yc = a.forward(&ctx, 8).unwrap();
    assert_eq!(ya.data(), yb.data());
    assert_eq!(ya.data(), yc.data());
}

#[test]
fn ckm_at_base_size_reproduces_fixed_model() {
    let ctx = Tensor::randn(&[2, 32, 32, 2, 1], 1.0, &mut rng(6));
    let fixed = live_model(config(TokenizerKind::Fixed, AttentionKind::Axial, 32, 2), 9);
    let mut flex = SurrogateModel::new(config(TokenizerKind::Ckm, AttentionKind::Axial, 32, 2), 9).unwrap();
    flex.params = fixed.params.clone();
    assert_eq!(flex.forward(&ctx, 16).unwrap().data(), fixed.forward(&ctx, 16).unwrap().data());
}

#[test]
fn one_by_one_grid_spatial_attention_is_value_path() {
    let mut r = rng(7);
    let mut g = Graph::new();
    let q = g.input(Tensor::randn(&[3, 8], 1.0, &mut r));
    let k = g.input(Tensor::randn(&[3, 8], 1.0, &mut r));
    let vt = Tensor::randn(&[3, 8], 1.0, &mut r);
    let v = g.input(vt.clone());
    for layout in [SeqLayout::spatial(3, 1, 1), SeqLayout::rows_of(3, 1, 1), SeqLayout::cols_of(3, 1, 1)] {
        let out = g.attention(q, k, v, layout, 2).unwrap();
        assert_eq!(g.value(out), &vt);
    }
}

#[test]
fn spatial_permutation_commutes_with_temporal_attention() {
    let (b, t, n, d) = (2, 3, 5, 8);
    let mut r = rng(8);
    let q = Tensor::randn(&[b * t * n, d], 1.0, &mut r);
    let k = Tensor::randn(&[b * t * n, d], 1.0, &mut r);
    let v = Tensor::randn(&[b * t * n, d], 1.0, &mut r);
    let perm = [3usize, 0, 4, 1, 2];
    let permute = |x: &Tensor| {
        Tensor::from_fn(&[b * t * n, d], |i| {
            let (row, col) = (i / d, i % d);
            let (frame, pos) = (row / n, row % n);
            x.data()[(frame * n + perm[pos]) * d + col]
        })
    };
    let run = |q: &Tensor, k: &Tensor, v: &Tensor| {
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let o = g.attention(qv, kv, vv, SeqLayout::temporal(b, t, n), 2).unwrap();
        g.value(o).clone()
    };
    let lhs = permute(&run(&q, &k, &v));
    let rhs = run(&permute(&q), &permute(&k), &permute(&v));
    for (x, y) in lhs.data().iter().zip(rhs.data()) {
        assert!((x - y).abs() <= 1e-14);
    }
}

fn model_fd(kind: TokenizerKind, attention: AttentionKind, size: usize) -> f64 {
    let m = live_model(config(kind, attention, 32, 2), 13);
    let ctx = Tensor::randn(&[1, 32, 32, 2, 1], 1.0, &mut rng(14));
    let proj = Tensor::randn(&[1, 32, 32, 1], 1.0, &mut rng(15));
    let opts = FdOptions {
        max_coords_per_param: Some(3),
        ..FdOptions::default()
    };
    let rep = fd_check(
        |g, p| {
            let y = m.forward_delta(g, p, &ctx, size)?;
            let c = g.input(proj.clone());
            let prod = g.mul(y, c)?;
            Ok(g.sum(prod))
        },
        &m.params,
        &opts,
    )
    .unwrap();
    rep.max_rel_error
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for kind in [TokenizerKind::Ckm, TokenizerKind::Csm] {
        for attention in [AttentionKind::Full, AttentionKind::Axial] {
            let err = model_fd(kind, attention, 8);
            assert!(err <= 1e-4, "{kind:?}/{attention:?}: {err}");
        }
    }
}

#[test]
fn config_round_trips_through_json() {
    let cfg = config(TokenizerKind::Csm, AttentionKind::Full, 32, 4);
    let text = serde_json::to_string(&cfg).unwrap();
    let back: ModelConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert!(serde_json::from_str::<ModelConfig>(&text.replace("\"n_heads\"", "\"heads\"")).is_err());
}
