use std::sync::Arc;

use flexipatch::autodiff::{
    attention_score_count, fd_check, reset_attention_score_count, Bound, FdOptions, Graph, PadFill,
    ParameterSet, RopeTable, SeqLayout, Var,
};
use flexipatch::{Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const TOL: f64 = 1e-5;

fn params(seed: u64, specs: &[(&str, &[usize])]) -> ParameterSet {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    for (name, shape) in specs {
        p.insert(*name, Tensor::randn(shape, 1.0, &mut r)).unwrap();
    }
    p
}

/// Contract the output with a fixed random tensor so every entry matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let c = g.input(Tensor::randn(g.shape(y), 1.0, &mut r));
    let m = g.mul(y, c)?;
    Ok(g.sum(m))
}

fn check<F>(label: &str, specs: &[(&str, &[usize])], f: F)
where
    F: Fn(&mut Graph, &Bound, u64) -> Result<Var>,
{
    for seed in SEEDS {
        let p = params(seed, specs);
        let rep = fd_check(
            |g, b| {
                let y = f(g, b, seed)?;
                project(g, y, seed)
            },
            &p,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error <= TOL, "{label} seed {seed}: {rep:?}");
    }
}

#[test]
fn elementwise_ops() {
    check("add/sub/mul/scale", &[("a", &[3, 4]), ("b", &[3, 4])], |g, p, _| {
        let (a, b) = (p.get("a")?, p.get("b")?);
        let s = g.add(a, b)?;
        let d = g.sub(s, b)?;
        let m = g.mul(d, b)?;
        Ok(g.scale(m, -1.7))
    });
}

#[test]
fn linear_and_bias() {
    check("linear", &[("x", &[2, 3, 5]), ("w", &[5, 4]), ("b", &[4])], |g, p, _| {
        let y = g.linear(p.get("x")?, p.get("w")?)?;
        g.add_bias(y, p.get("b")?)
    });
}

#[test]
fn gelu() {
    check("gelu", &[("x", &[4, 6])], |g, p, _| Ok(g.gelu(p.get("x")?)));
}

#[test]
fn layer_norm() {
    check("layer_norm", &[("x", &[5, 8]), ("g", &[8]), ("b", &[8])], |g, p, _| {
        g.layer_norm(p.get("x")?, p.get("g")?, p.get("b")?, 1e-5)
    });
}

#[test]
fn reshape_and_select() {
    check("select", &[("x", &[2, 3, 4])], |g, p, _| {
        let r = g.reshape(p.get("x")?, &[2, 3, 2, 2])?;
        g.select(r, 1)
    });
}

#[test]
fn conv2d_op() {
    check("conv2d", &[("x", &[2, 6, 6, 2]), ("w", &[3, 3, 2, 3])], |g, p, _| {
        g.conv2d(p.get("x")?, p.get("w")?, 2, 1)
    });
}

#[test]
fn conv_transpose2d_op() {
    check("conv_transpose2d", &[("y", &[2, 3, 3, 3]), ("w", &[4, 4, 2, 3])], |g, p, _| {
        g.conv_transpose2d(p.get("y")?, p.get("w")?, 2, 1)
    });
}

#[test]
fn const_matmul_op() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let m = Arc::new(Tensor::randn(&[9, 4], 1.0, &mut r));
    check("const_matmul", &[("w", &[2, 2, 3, 2])], move |g, p, _| {
        g.const_matmul(m.clone(), p.get("w")?, &[3, 3, 3, 2])
    });
}

#[test]
fn pad2d_all_fills() {
    check("pad zero", &[("x", &[2, 3, 4, 2])], |g, p, _| g.pad2d(p.get("x")?, 1, PadFill::Zero));
    check("pad periodic", &[("x", &[2, 3, 4, 2])], |g, p, _| g.pad2d(p.get("x")?, 2, PadFill::Periodic));
    check("pad learned", &[("x", &[2, 3, 4, 2]), ("t", &[2])], |g, p, _| {
        let t = p.get("t")?;
        g.pad2d(p.get("x")?, 1, PadFill::Learned(t))
    });
}

#[test]
fn periodic_fold_op() {
    check("fold", &[("x", &[2, 6, 7, 2])], |g, p, _| g.fold2d_periodic(p.get("x")?, 2));
}

#[test]
fn periodic_fold_is_adjoint_of_periodic_pad() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::randn(&[2, 4, 5, 3], 1.0, &mut r);
    let y = Tensor::randn(&[2, 8, 9, 3], 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let yv = g.input(y.clone());
    let px = g.pad2d(xv, 2, PadFill::Periodic).unwrap();
    let fy = g.fold2d_periodic(yv, 2).unwrap();
    let lhs = g.value(px).dot(&y).unwrap();
    let rhs = x.dot(g.value(fy)).unwrap();
    assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn rope_op() {
    let angles: Vec<f64> = (0..6 * 2).map(|i| 0.37 * i as f64).collect();
    let table = Arc::new(RopeTable::from_angles(6, 2, &angles).unwrap());
    check("rope", &[("x", &[6, 8])], move |g, p, _| g.rope(p.get("x")?, table.clone()));
}

#[test]
fn attention_layouts() {
    let layouts = [
        ("temporal", SeqLayout::temporal(2, 3, 4)),
        ("spatial", SeqLayout::spatial(6, 2, 2)),
        ("rows", SeqLayout::rows_of(6, 2, 2)),
        ("cols", SeqLayout::cols_of(6, 2, 2)),
    ];
    for (name, layout) in layouts {
        check(name, &[("q", &[24, 8]), ("k", &[24, 8]), ("v", &[24, 8])], move |g, p, _| {
            g.attention(p.get("q")?, p.get("k")?, p.get("v")?, layout, 2)
        });
    }
}

#[test]
fn nmse_op() {
    for seed in SEEDS {
        let p = params(seed, &[("x", &[2, 3, 3, 2])]);
        let mut r = ChaCha8Rng::seed_from_u64(seed + 50);
        let target = Tensor::randn(&[2, 3, 3, 2], 1.0, &mut r);
        let rep = fd_check(|g, b| g.nmse(b.get("x")?, &target, 1e-7), &p, &FdOptions::default()).unwrap();
        assert!(rep.max_rel_error <= TOL, "{rep:?}");
    }
}

#[test]
fn single_frame_attention_is_value_path() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let q = g.input(Tensor::randn(&[5, 8], 1.0, &mut r));
    let k = g.input(Tensor::randn(&[5, 8], 1.0, &mut r));
    let vt = Tensor::randn(&[5, 8], 1.0, &mut r);
    let v = g.input(vt.clone());
    let out = g.attention(q, k, v, SeqLayout::temporal(1, 1, 5), 2).unwrap();
    assert_eq!(g.value(out), &vt);
}

#[test]
fn attention_rows_are_convex_combinations() {
    // With v = one-hot columns per position, each output row is the softmax row.
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let len = 6;
    let mut g = Graph::new();
    let q = g.input(Tensor::randn(&[len, len], 3.0, &mut r));
    let k = g.input(Tensor::randn(&[len, len], 3.0, &mut r));
    let v = g.input(Tensor::from_fn(&[len, len], |i| if i / len == i % len { 1.0 } else { 0.0 }));
    let out = g.attention(q, k, v, SeqLayout::spatial(1, 1, len), 1).unwrap();
    for row in g.value(out).data().chunks(len) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        assert!(row.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn score_counter_counts_pairs() {
    let mut g = Graph::new();
    let x = g.input(Tensor::ones(&[2 * 3 * 4, 8]));
    reset_attention_score_count();
    g.attention(x, x, x, SeqLayout::spatial(2, 3, 4), 2).unwrap();
    assert_eq!(attention_score_count(), 2 * 144);
    reset_attention_score_count();
    g.attention(x, x, x, SeqLayout::rows_of(2, 3, 4), 2).unwrap();
    g.attention(x, x, x, SeqLayout::cols_of(2, 3, 4), 2).unwrap();
    assert_eq!(attention_score_count(), 2 * 12 * (3 + 4));
}
