use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::nn::{gradcheck_params, Builder, Ctx};
use crate::numcore::gradcheck::check;
use crate::numcore::{ParamStore, Tape, Tensor, Var};

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

struct Case {
    u: Tensor<f64>,
    delta: Tensor<f64>,
    a: Tensor<f64>,
    b: Tensor<f64>,
    c: Tensor<f64>,
    d: Tensor<f64>,
}

fn random_case(rng: &mut ChaCha8Rng, t: usize, d_inner: usize, n: usize) -> Case {
    Case {
        u: rand_t(rng, &[t, d_inner], -1.0, 1.0),
        delta: rand_t(rng, &[t, d_inner], 0.01, 1.0),
        a: rand_t(rng, &[d_inner, n], -2.0, -0.05),
        b: rand_t(rng, &[t, n], -1.0, 1.0),
        c: rand_t(rng, &[t, n], -1.0, 1.0),
        d: rand_t(rng, &[d_inner], -1.0, 1.0),
    }
}

/// Independent oracle: literal per-channel, per-state double loop.
fn naive_scan(case: &Case) -> Vec<f64> {
    let (t_len, d) = case.u.as_matrix_dims();
    let n = case.a.cols();
    let mut y = vec![0.0; t_len * d];
    for i in 0..d {
        for k in 0..n {
            let mut h = 0.0;
            for t in 0..t_len {
                let dt = case.delta.at(t, i);
                h = (dt * case.a.at(i, k)).exp() * h + dt * case.b.at(t, k) * case.u.at(t, i);
                y[t * d + i] += case.c.at(t, k) * h;
            }
        }
        for t in 0..t_len {
            y[t * d + i] += case.d.data()[i] * case.u.at(t, i);
        }
    }
    y
}

fn run(case: &Case) -> Tensor<f64> {
    selective_scan(&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d).unwrap()
}

#[test]
fn single_frame_has_no_history() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let case = random_case(&mut rng, 1, 3, 4);
    let y = run(&case);
    for i in 0..3 {
        let dt = case.delta.at(0, i);
        let u = case.u.at(0, i);
        let expected: f64 = (0..4).map(|k| case.c.at(0, k) * dt * case.b.at(0, k) * u).sum::<f64>()
            + case.d.data()[i] * u;
        assert!((y.at(0, i) - expected).abs() < 1e-14);
    }
}

#[test]
fn strongly_decaying_state_is_memoryless() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut case = random_case(&mut rng, 12, 3, 4);
    // A = -exp(A_log) with A_log large
    case.a = Tensor::full(&[3, 4], -(60.0f64.exp()));
    case.delta = rand_t(&mut rng, &[12, 3], 0.5, 1.0);
    let y = run(&case);
    for t in 0..12 {
        for i in 0..3 {
            let dt = case.delta.at(t, i);
            let u = case.u.at(t, i);
            let local: f64 = (0..4).map(|k| case.c.at(t, k) * dt * case.b.at(t, k) * u).sum::<f64>()
                + case.d.data()[i] * u;
            assert!((y.at(t, i) - local).abs() < 1e-12);
        }
    }
}

#[test]
fn matches_naive_recurrence_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let t = rng.gen_range(1..=32);
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=6);
        let case = random_case(&mut rng, t, d, n);
        let y = run(&case);
        let oracle = naive_scan(&case);
        let diff = y.data().iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "diff {diff}");
    }
}

#[test]
fn chunked_scan_agrees_for_all_chunk_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let case = random_case(&mut rng, 16, 4, 4);
    let reference = run(&case);
    for chunk in [1, 2, 3, 7, 8, 16, 40] {
        let y = selective_scan_chunked(&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d, chunk)
            .unwrap();
        assert!(y.max_abs_diff(&reference) <= 1e-8, "chunk {chunk}");
    }
    assert!(matches!(
        selective_scan_chunked(&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn nonpositive_step_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut case = random_case(&mut rng, 4, 2, 2);
    case.delta.data_mut()[3] = 0.0;
    assert!(matches!(
        selective_scan(&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d),
        Err(Error::Contract(_))
    ));
    case.delta.data_mut()[3] = -0.1;
    assert!(matches!(
        selective_scan_chunked(&case.u, &case.delta, &case.a, &case.b, &case.c, &case.d, 2),
        Err(Error::Contract(_))
    ));
}

#[test]
fn scan_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let case = random_case(&mut rng, 9, 3, 4);
    let w = rand_t(&mut rng, &[9, 3], -1.0, 1.0);
    let inputs = [case.u, case.delta, case.a, case.b, case.c, case.d, w];
    let r = check(&inputs, 1e-5, |tp, v| {
        let y = selective_scan_op(tp, v[0], v[1], v[2], v[3], v[4], v[5])?;
        let y = tp.mul(y, v[6])?;
        Ok(tp.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
}

fn input(ctx: &mut Ctx<f64>, x: &Tensor<f64>) -> Var {
    ctx.tape.constant(x.clone())
}

fn small_cfg() -> MambaConfig {
    MambaConfig {
        d_state: 4,
        ..MambaConfig::default()
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let block = MambaBlock::build(&mut Builder::new(&mut store, &mut rng), 8, &small_cfg()).unwrap();
    store.get_mut(block.core.conv_b).data_mut().fill(0.0);
    store.get_mut(block.core.dt_proj.b.unwrap()).data_mut().fill(0.0);
    let mut ctx = Ctx::new(&store);
    let x = input(&mut ctx, &Tensor::zeros(&[6, 8]));
    for dir in [Direction::Forward, Direction::Backward] {
        let y = block.forward(&mut ctx, x, dir).unwrap();
        assert!(ctx.tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn backward_direction_is_time_mirror_of_forward() {
    // backward(x) = reverse(forward(reverse(x))); a palindrome is its own reverse.
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let block = MambaBlock::build(&mut Builder::new(&mut store, &mut rng), 8, &small_cfg()).unwrap();
    let half = rand_t(&mut rng, &[4, 8], -1.0, 1.0);
    let mut rows: Vec<Vec<f64>> = (0..4).map(|r| half.row(r).to_vec()).collect();
    rows.extend((0..3).rev().map(|r| half.row(r).to_vec()));
    let pal = Tensor::from_rows(&rows).unwrap();
    let mut ctx = Ctx::new(&store);
    let x = input(&mut ctx, &pal);
    let f = block.forward(&mut ctx, x, Direction::Forward).unwrap();
    let b = block.forward(&mut ctx, x, Direction::Backward).unwrap();
    let (f, b) = (ctx.tape.value(f).clone(), ctx.tape.value(b).clone());
    for t in 0..7 {
        for c in 0..8 {
            assert!((b.at(t, c) - f.at(6 - t, c)).abs() < 1e-12);
        }
    }
    assert!(f.max_abs_diff(&b) > 1e-6, "causal block should not be time symmetric");
}

#[test]
fn mamba_width_mismatch() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let block = MambaBlock::build(&mut Builder::new(&mut store, &mut rng), 8, &small_cfg()).unwrap();
    let ext = ExtBiMamba::build(&mut Builder::new(&mut store, &mut rng).scope("ext"), 8, &small_cfg()).unwrap();
    let mut ctx = Ctx::new(&store);
    let x = input(&mut ctx, &Tensor::zeros(&[3, 7]));
    assert!(matches!(block.forward(&mut ctx, x, Direction::Forward), Err(Error::Shape { .. })));
    assert!(matches!(ext.forward(&mut ctx, x), Err(Error::Shape { .. })));
}

#[test]
fn mamba_gradients_all_params() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let block = MambaBlock::build(&mut Builder::new(&mut store, &mut rng), 8, &small_cfg()).unwrap();
    let x = rand_t(&mut rng, &[8, 8], -1.0, 1.0);
    let w = rand_t(&mut rng, &[8, 8], -1.0, 1.0);
    for dir in [Direction::Forward, Direction::Backward] {
        let r = gradcheck_params(&store, 1e-5, usize::MAX, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let wv = ctx.tape.constant(w.clone());
            let y = block.forward(ctx, xv, dir)?;
            let y = ctx.tape.mul(y, wv)?;
            Ok(ctx.tape.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{dir:?}: {r:?}");
    }
}

#[test]
fn zeroed_backward_core_reduces_to_unidirectional_path() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let ext = ExtBiMamba::build(&mut Builder::new(&mut store, &mut rng), 8, &small_cfg()).unwrap();
    for id in ext.bwd.ids() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let uni = MambaBlock::from_parts(ext.in_proj[0], ext.fwd.clone(), ext.out_proj[0], 8, 16);
    let x = rand_t(&mut rng, &[10, 8], -1.0, 1.0);
    let mut ctx = Ctx::new(&store);
    let xv = input(&mut ctx, &x);
    let bi = ext.forward(&mut ctx, xv).unwrap();
    let single = ext.forward_direction(&mut ctx, xv, Direction::Forward).unwrap();
    let standalone = uni.forward(&mut ctx, xv, Direction::Forward).unwrap();
    let bi = ctx.tape.value(bi);
    assert!(bi.max_abs_diff(ctx.tape.value(single)) < 1e-14);
    assert!(bi.max_abs_diff(ctx.tape.value(standalone)) < 1e-14);
}

#[test]
fn future_frames_influence_early_outputs() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let ext = ExtBiMamba::build(&mut Builder::new(&mut store, &mut rng), 8, &small_cfg()).unwrap();
    let x = rand_t(&mut rng, &[24, 8], -1.0, 1.0);
    let mut x2 = x.clone();
    for c in 0..8 {
        x2.data_mut()[23 * 8 + c] += 0.5;
    }
    let eval = |x: &Tensor<f64>| {
        let mut ctx = Ctx::new(&store);
        let xv = input(&mut ctx, x);
        let y = ext.forward(&mut ctx, xv).unwrap();
        ctx.tape.value(y).clone()
    };
    let (y1, y2) = (eval(&x), eval(&x2));
    let diff: f64 = (0..8).map(|c| (y1.at(0, c) - y2.at(0, c)).abs()).sum();
    assert!(diff > 1e-9, "frame 0 unaffected by frame 23: {diff}");

    // the forward-only path is causal
    let eval_f = |x: &Tensor<f64>| {
        let mut ctx = Ctx::new(&store);
        let xv = input(&mut ctx, x);
        let y = ext.forward_direction(&mut ctx, xv, Direction::Forward).unwrap();
        ctx.tape.value(y).clone()
    };
    let (f1, f2) = (eval_f(&x), eval_f(&x2));
    for t in 0..23 {
        for c in 0..8 {
            assert_eq!(f1.at(t, c), f2.at(t, c));
        }
    }
}

fn ext_variant(proj: Projections, fusion: Fusion, seed: u64) -> (ParamStore<f64>, ExtBiMamba) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = MambaConfig {
        projections: proj,
        fusion,
        ..small_cfg()
    };
    let ext = ExtBiMamba::build(&mut Builder::new(&mut store, &mut rng), 8, &cfg).unwrap();
    (store, ext)
}

#[test]
fn ext_bimamba_gradients_for_every_wiring() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = rand_t(&mut rng, &[6, 8], -1.0, 1.0);
    let w = rand_t(&mut rng, &[6, 8], -1.0, 1.0);
    for (i, (p, f)) in [
        (Projections::Shared, Fusion::Add),
        (Projections::Separate, Fusion::Add),
        (Projections::Shared, Fusion::Concat),
        (Projections::Separate, Fusion::Concat),
    ]
    .into_iter()
    .enumerate()
    {
        let (store, ext) = ext_variant(p, f, 30 + i as u64);
        let r = gradcheck_params(&store, 1e-5, usize::MAX, |ctx| {
            let xv = ctx.tape.constant(x.clone());
            let wv = ctx.tape.constant(w.clone());
            let y = ext.forward(ctx, xv)?;
            let y = ctx.tape.mul(y, wv)?;
            Ok(ctx.tape.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{p:?}/{f:?}: {r:?}");
    }
}

fn reversed(x: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let r = tape.reverse_rows(v);
    tape.value(r).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn time_reversal_equivariance_with_swapped_cores(seed in 0u64..1000, t in 2usize..12, wiring in 0usize..4) {
        let (p, f) = [
            (Projections::Shared, Fusion::Add),
            (Projections::Separate, Fusion::Add),
            (Projections::Shared, Fusion::Concat),
            (Projections::Separate, Fusion::Concat),
        ][wiring];
        let (store, ext) = ext_variant(p, f, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = rand_t(&mut rng, &[t, 8], -1.0, 1.0);
        let eval = |m: &ExtBiMamba, x: &Tensor<f64>| {
            let mut ctx = Ctx::new(&store);
            let xv = ctx.tape.constant(x.clone());
            let y = m.forward(&mut ctx, xv).unwrap();
            ctx.tape.value(y).clone()
        };
        let direct = eval(&ext, &x);
        let mirrored = reversed(&eval(&ext.swapped(), &reversed(&x)));
        if f == Fusion::Add {
            prop_assert!(direct.max_abs_diff(&mirrored) <= 1e-8);
        } else {
            // concat order also flips, so only additive fusion is equivariant
            prop_assert!(direct.shape() == mirrored.shape());
        }
    }
}
