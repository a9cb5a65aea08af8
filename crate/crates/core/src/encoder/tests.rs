use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{gradcheck_params, Builder, Ctx};
use crate::numcore::{ParamStore, Tensor};
use crate::ssm::MambaConfig;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn small_mamba() -> MambaConfig {
    MambaConfig {
        d_state: 4,
        ..MambaConfig::default()
    }
}

fn build_layer(store: &mut ParamStore<f64>, d: usize, kernels: &[usize], seed: u64) -> ConBiMambaLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = Builder::new(store, &mut rng);
    ConBiMambaLayer::build(&mut b.scope("layer"), d, 4, kernels, &small_mamba(), 0.5).unwrap()
}

fn plain_ln(x: &Tensor<f64>) -> Vec<f64> {
    let (t, d) = x.as_matrix_dims();
    let mut out = Vec::with_capacity(t * d);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + crate::nn::LN_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    out
}

fn tiny_model(layers: usize, seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        feature_dim: 6,
        d_model: 8,
        num_layers: layers,
        ffn_mult: 2,
        conv_kernels: vec![3, 5, 7],
        change_hidden: 4,
        lfa_mask: ModelConfig::last_layers_mask(layers, 3.min(layers)),
        mamba: small_mamba(),
        ..ModelConfig::default()
    };
    Model::new(cfg, seed).unwrap()
}

#[test]
fn zero_weights_leave_only_the_normalised_residual() {
    let mut store = ParamStore::new();
    let layer = build_layer(&mut store, 8, &[15, 31, 63], 1);
    for (name, t) in store.iter_mut() {
        let v = if name.ends_with(".gain") { 1.0 } else { 0.0 };
        t.data_mut().fill(v);
    }
    let x = rand_t(&mut ChaCha8Rng::seed_from_u64(2), &[9, 8], -2.0, 2.0);
    let mut ctx = Ctx::new(&store);
    let xv = ctx.tape.constant(x.clone());
    let y = layer.forward(&mut ctx, xv).unwrap();
    let got = ctx.tape.value(y).data();
    for (g, e) in got.iter().zip(plain_ln(&x)) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn identical_delta_branches_average_to_a_single_branch() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let conv = ConvModule::build(&mut Builder::new(&mut store, &mut rng), 6, &[3, 5, 7]).unwrap();
    let bias: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for br in &conv.branches {
        let k = store.get_mut(br.kernel);
        k.data_mut().fill(0.0);
        let centre = (br.width - 1) / 2;
        for c in 0..6 {
            k.data_mut()[centre * 6 + c] = 1.0;
        }
        store.get_mut(br.bias).data_mut().copy_from_slice(&bias);
    }
    let single = ConvModule {
        branches: vec![conv.branches[1]],
        ..conv.clone()
    };
    let x = rand_t(&mut rng, &[11, 6], -1.0, 1.0);
    let run = |m: &ConvModule| {
        let mut ctx = Ctx::new(&store);
        let xv = ctx.tape.constant(x.clone());
        let y = m.forward(&mut ctx, xv).unwrap();
        ctx.tape.value(y).clone()
    };
    assert!(run(&conv).max_abs_diff(&run(&single)) < 1e-12);
}

#[test]
fn even_kernel_width_is_a_config_error() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = ConvModule::build(&mut Builder::new(&mut store, &mut rng), 4, &[3, 4, 5]).unwrap_err();
    assert!(err.is_config());
    let cfg = ModelConfig {
        conv_kernels: vec![15, 31],
        ..ModelConfig::default()
    };
    assert!(cfg.validate().unwrap_err().is_config());
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let layer = build_layer(&mut store, 8, &[15, 31, 63], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Move every parameter off its structured init so no gradient is trivially zero.
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let x = rand_t(&mut rng, &[6, 8], -1.0, 1.0);
    let w = rand_t(&mut rng, &[6, 8], -1.0, 1.0);
    let r = gradcheck_params(&store, 1e-5, 24, |ctx| {
        let xv = ctx.tape.constant(x.clone());
        let wv = ctx.tape.constant(w.clone());
        let y = layer.forward(ctx, xv)?;
        let y = ctx.tape.mul(y, wv)?;
        Ok(ctx.tape.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
    assert!(r.checked > 500);
}

#[test]
fn layer_rejects_wrong_width() {
    let mut store = ParamStore::new();
    let layer = build_layer(&mut store, 8, &[3, 5, 7], 6);
    let mut ctx = Ctx::new(&store);
    let xv = ctx.tape.constant(Tensor::zeros(&[4, 7]));
    assert!(layer.forward(&mut ctx, xv).is_err());
}

#[test]
fn encoder_returns_one_output_per_layer_and_last_is_the_plain_stack() {
    let model = tiny_model(7, 7);
    let x = rand_t(&mut ChaCha8Rng::seed_from_u64(8), &[12, 6], -1.0, 1.0);
    let mut ctx = Ctx::new(&model.params);
    let xv = ctx.tape.constant(x);
    let outs = model.encode(&mut ctx, xv).unwrap();
    assert_eq!(outs.len(), 7);

    let mut h = model.input_proj.forward(&mut ctx, xv).unwrap();
    for layer in &model.layers {
        h = layer.forward(&mut ctx, h).unwrap();
    }
    assert_eq!(ctx.tape.value(h).data(), ctx.tape.value(outs[6]).data());
}

#[test]
fn perturbing_the_input_changes_every_layer() {
    let model = tiny_model(7, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_t(&mut rng, &[12, 6], -1.0, 1.0);
    let mut x2 = x.clone();
    x2.data_mut()[17] += 1e-3;
    let run = |x: &Tensor<f64>| {
        let mut ctx = Ctx::new(&model.params);
        let xv = ctx.tape.constant(x.clone());
        let outs = model.encode(&mut ctx, xv).unwrap();
        outs.iter().map(|&o| ctx.tape.value(o).clone()).collect::<Vec<_>>()
    };
    for (l, (a, b)) in run(&x).iter().zip(run(&x2)).enumerate() {
        assert!(a.max_abs_diff(&b) > 1e-9, "layer {l} ignored the perturbation");
    }
}

#[test]
fn encoder_rejects_wrong_feature_width() {
    let model = tiny_model(2, 0);
    let mut ctx = Ctx::new(&model.params);
    let xv = ctx.tape.constant(Tensor::zeros(&[5, 7]));
    assert!(model.encode(&mut ctx, xv).is_err());
}

#[test]
fn lfa_weight_examples() {
    let w = lfa_weights(&[0.0f64; 7], &ModelConfig::default().lfa_mask).unwrap();
    let third = 1.0 / 3.0;
    let expect = [0.0, 0.0, 0.0, 0.0, third, third, third];
    for (a, b) in w.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(w[..4].iter().all(|&v| v == 0.0));

    let mut alpha = [0.0; 7];
    alpha[6] = 2f64.ln();
    let w = lfa_weights(&alpha, &[true; 7]).unwrap();
    assert!((w[6] - 0.25).abs() < 1e-12);
    for v in &w[..6] {
        assert!((v - 0.125).abs() < 1e-12);
    }
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let err = lfa_weights(&[0.0; 3], &[false; 3]).unwrap_err();
    assert!(matches!(err, crate::Error::Degenerate(_)));
}

#[test]
fn one_hot_mask_on_last_layer_is_layer_norm_of_last_output() {
    let mut model = tiny_model(3, 11);
    model.lfa.mask = vec![false, false, true];
    let x = rand_t(&mut ChaCha8Rng::seed_from_u64(12), &[10, 6], -1.0, 1.0);
    let mut ctx = Ctx::new(&model.params);
    let xv = ctx.tape.constant(x);
    let out = model.forward(&mut ctx, xv).unwrap();
    let last = ctx.tape.value(out.layers[2]).clone();
    let agg = ctx.tape.value(out.aggregated).data();
    for (g, e) in agg.iter().zip(plain_ln(&last)) {
        assert!((g - e).abs() < 1e-12);
    }
}

#[test]
fn masked_alpha_never_changes_the_output() {
    let mut model = tiny_model(4, 13);
    let x = rand_t(&mut ChaCha8Rng::seed_from_u64(14), &[10, 6], -1.0, 1.0);
    let (p1, c1) = model.infer(&x).unwrap();
    let alpha = model.lfa.alpha;
    model.params.get_mut(alpha).data_mut()[0] = 37.5;
    let (p2, c2) = model.infer(&x).unwrap();
    assert_eq!(p1.data(), p2.data());
    assert_eq!(c1.data(), c2.data());
    model.params.get_mut(alpha).data_mut()[3] = 0.7;
    let (p3, _) = model.infer(&x).unwrap();
    assert_ne!(p1.data(), p3.data());
}

#[test]
fn outputs_are_finite_over_many_seeds() {
    let cfg = ModelConfig {
        feature_dim: 6,
        d_model: 16,
        num_layers: 7,
        ffn_mult: 2,
        mamba: small_mamba(),
        ..ModelConfig::default()
    };
    for seed in 0..100 {
        let model = Model::<f64>::new(cfg.clone(), seed).unwrap();
        let x = rand_t(&mut ChaCha8Rng::seed_from_u64(seed + 1000), &[16, 6], -10.0, 10.0);
        let mut ctx = Ctx::new(&model.params);
        let xv = ctx.tape.constant(x);
        let out = model.forward(&mut ctx, xv).unwrap();
        for v in out.layers.iter().chain([&out.probs, &out.change_logits]) {
            assert!(ctx.tape.value(*v).data().iter().all(|x| x.is_finite()), "seed {seed}");
        }
        let p = ctx.tape.value(out.probs).data();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn diar_head_with_zero_weights_is_one_half() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = DiarHead::build(&mut Builder::new(&mut store, &mut rng), 5, 4).unwrap();
    store.get_mut(head.proj.w).data_mut().fill(0.0);
    let mut ctx = Ctx::new(&store);
    let h = ctx.tape.constant(rand_t(&mut rng, &[3, 5], -4.0, 4.0));
    let p = head.forward(&mut ctx, h).unwrap();
    assert_eq!(ctx.tape.shape(p), &[3, 4]);
    assert!(ctx.tape.value(p).data().iter().all(|&v| v == 0.5));
}

#[test]
fn change_head_examples() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = ChangeHead::build(&mut Builder::new(&mut store, &mut rng), 2, 1).unwrap();
    store.get_mut(head.fc1.w).data_mut().copy_from_slice(&[1.0, 0.0]);
    store.get_mut(head.fc1.b.unwrap()).data_mut()[0] = 0.0;
    store.get_mut(head.fc2.w).data_mut()[0] = 2.0;
    store.get_mut(head.fc2.b.unwrap()).data_mut()[0] = 1.0;
    let mut ctx = Ctx::new(&store);
    let h = ctx.tape.constant(Tensor::from_rows(&[vec![3.0, 5.0], vec![-1.0, 2.0]]).unwrap());
    let o = head.forward(&mut ctx, h).unwrap();
    assert_eq!(ctx.tape.value(o).data(), &[7.0, 1.0]);

    store.get_mut(head.fc2.w).data_mut()[0] = 0.0;
    let mut ctx = Ctx::new(&store);
    let h = ctx.tape.constant(rand_t(&mut rng, &[4, 2], -3.0, 3.0));
    let o = head.forward(&mut ctx, h).unwrap();
    assert!(ctx.tape.value(o).data().iter().all(|&v| v == 1.0));
}

#[test]
fn parameter_paths_are_dotted_and_stable() {
    let model = tiny_model(2, 0);
    for name in [
        "input_proj.w",
        "layers.0.ffn1.fc1.w",
        "layers.1.conv.dw.2.w",
        "layers.1.bimamba.fwd.a_log",
        "lfa.alpha",
        "diar_head.w",
        "change_head.fc2.b",
    ] {
        assert!(model.params.id(name).is_some(), "missing {name}");
    }
}

#[test]
fn checkpoint_round_trip_restores_the_model() {
    let model = tiny_model(2, 15);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.to_checkpoint().unwrap().save(&path).unwrap();
    let back = Model::<f64>::from_checkpoint(&crate::numcore::Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.config, model.config);
    let x = rand_t(&mut ChaCha8Rng::seed_from_u64(16), &[7, 6], -1.0, 1.0);
    assert_eq!(model.infer(&x).unwrap().0.data(), back.infer(&x).unwrap().0.data());
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    assert!(ModelConfig::tiny().validate().is_ok());
    let bad = ModelConfig {
        lfa_mask: vec![false; 7],
        ..ModelConfig::default()
    };
    assert!(matches!(bad.validate(), Err(crate::Error::Degenerate(_))));
    let bad = ModelConfig {
        lfa_mask: vec![true; 6],
        ..ModelConfig::default()
    };
    assert!(bad.validate().unwrap_err().is_config());
    assert_eq!(ModelConfig::last_layers_mask(7, 1), vec![false, false, false, false, false, false, true]);
}
