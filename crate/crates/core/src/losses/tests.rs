use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::encoder::{Model, ModelConfig};
use crate::nn::{gradcheck_params, Ctx};
use crate::numcore::gradcheck::check;
use crate::numcore::{Tape, Tensor};
use crate::ssm::MambaConfig;

fn labels(rows: &[&[u8]]) -> DiarLabels {
    DiarLabels::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, t: usize, k: usize) -> DiarLabels {
    DiarLabels::new(t, k, (0..t * k).map(|_| rng.gen_bool(0.4) as u8).collect()).unwrap()
}

fn random_probs(rng: &mut ChaCha8Rng, t: usize, k: usize) -> Tensor<f64> {
    Tensor::new(&[t, k], (0..t * k).map(|_| rng.gen_range(0.02..0.98)).collect()).unwrap()
}

#[test]
fn change_label_examples() {
    let c = derive_change_labels(&labels(&[&[1, 0], &[1, 0], &[0, 1]])).unwrap();
    assert_eq!(c.values(), &[0, 1]);
    let c = derive_change_labels(&labels(&[&[1, 0], &[1, 1]])).unwrap();
    assert_eq!(c.values(), &[1]);
    let c = derive_change_labels(&labels(&[&[0u8, 1, 1][..]; 5])).unwrap();
    assert_eq!(c.values(), &[0; 4]);
    let err = derive_change_labels(&labels(&[&[1, 0]])).unwrap_err();
    assert!(matches!(err, crate::Error::Contract(_)));
}

#[test]
fn positive_ratio_examples() {
    assert_eq!(positive_ratio(&[ChangeLabels::new(vec![0; 9]).unwrap()]), 0.1);
    assert_eq!(positive_ratio(&[ChangeLabels::new(vec![0, 1, 1, 0]).unwrap()]), 0.5);
    assert_eq!(positive_ratio(&[ChangeLabels::new(vec![1]).unwrap()]), 1.0);
    // pooled over the batch, not averaged per item
    let batch = [
        ChangeLabels::new(vec![1, 0, 0]).unwrap(),
        ChangeLabels::new(vec![0]).unwrap(),
    ];
    assert_eq!(positive_ratio(&batch), 0.25);
}

#[test]
fn bet_closed_form_example() {
    let v = bet_loss_value(&[0.0f64], &[1], 0.1, 2.0).unwrap();
    let expect = -0.1 * 0.25 * 0.5f64.ln();
    assert!((v - expect).abs() < 1e-15);
    assert!((v - 0.0173287).abs() < 1e-7);
}

#[test]
fn bet_with_gamma_zero_is_mean_bce() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let o: Vec<f64> = (0..20).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let c: Vec<u8> = (0..20).map(|_| rng.gen_bool(0.5) as u8).collect();
    let got = bet_loss_value(&o, &c, 1.0, 0.0).unwrap();
    let bce: f64 = o
        .iter()
        .zip(&c)
        .map(|(&o, &c)| {
            let p = 1.0 / (1.0 + (-o).exp());
            if c == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / 20.0;
    assert!((got - bce).abs() < 1e-12);
}

#[test]
fn confident_correct_predictions_vanish() {
    let v = bet_loss_value(&[60.0f64, -60.0], &[1, 0], 0.3, 2.0).unwrap();
    assert!(v < 1e-30);
    let v = bet_loss_value(&[-1e6f64, 1e6], &[1, 0], 0.3, 0.0).unwrap();
    assert!(v.is_finite());
    assert!((v - 0.3 * -(1e-12f64).ln()).abs() < 1e-9);
}

#[test]
fn bet_is_monotone_in_the_correct_direction() {
    let mut prev_pos = f64::INFINITY;
    let mut prev_neg = f64::NEG_INFINITY;
    for i in -40..=40 {
        let o = i as f64 * 0.2;
        let pos = bet_loss_value(&[o], &[1], 0.2, 2.0).unwrap();
        let neg = bet_loss_value(&[o], &[0], 0.2, 2.0).unwrap();
        assert!(pos < prev_pos, "positive frame at o={o}");
        assert!(neg > prev_neg, "negative frame at o={o}");
        prev_pos = pos;
        prev_neg = neg;
    }
}

#[test]
fn bet_rejects_bad_hyperparameters_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let o = tape.leaf(Tensor::zeros(&[3]));
    let c = ChangeLabels::new(vec![1, 0]).unwrap();
    assert!(bet_loss(&mut tape, &[o], &[c.clone()], 0.0, 2.0).unwrap_err().is_config());
    assert!(bet_loss(&mut tape, &[o], &[c.clone()], 0.5, -1.0).unwrap_err().is_config());
    let short = ChangeLabels::new(vec![1]).unwrap();
    assert!(bet_loss(&mut tape, &[o], &[short], 0.5, 2.0).is_err());
    assert!(bet_loss_value(&[0.0f64], &[1, 0], 0.5, 2.0).is_err());
}

#[test]
fn bet_op_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c1 = ChangeLabels::new((0..6).map(|_| rng.gen_bool(0.4) as u8).collect()).unwrap();
    let c2 = ChangeLabels::new(vec![1, 0, 1]).unwrap();
    let o1 = Tensor::new(&[7], (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let o2 = Tensor::new(&[4], (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
    let r = check(&[o1, o2], 1e-5, |tape, v| {
        bet_loss(tape, v, &[c1.clone(), c2.clone()], 0.3, 2.0)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
}

#[test]
fn permutations_are_lexicographic() {
    let p = permutations(3);
    assert_eq!(
        p,
        vec![
            vec![0, 1, 2],
            vec![0, 2, 1],
            vec![1, 0, 2],
            vec![1, 2, 0],
            vec![2, 0, 1],
            vec![2, 1, 0]
        ]
    );
    assert_eq!(permutations(4).len(), 24);
    assert_eq!(permutations(1), vec![vec![0]]);
}

#[test]
fn pit_on_exact_labels_is_near_zero_with_identity() {
    let y = labels(&[&[1, 0, 0, 1], &[1, 1, 0, 0], &[0, 0, 1, 0]]);
    let p = y.to_tensor::<f64>().map(|v| v.clamp(1e-6, 1.0 - 1e-6));
    let (loss, perms) = pit_bce_values(&[p], &[y]).unwrap();
    assert!(loss < 2e-6);
    assert_eq!(perms[0], vec![0, 1, 2, 3]);
}

#[test]
fn pit_recovers_a_column_swap() {
    let y = labels(&[&[1, 0], &[1, 1], &[0, 1], &[0, 0]]);
    let swapped = y.permute_columns(&[1, 0]);
    let p = swapped.to_tensor::<f64>().map(|v| v.clamp(1e-6, 1.0 - 1e-6));
    let p_id = y.to_tensor::<f64>().map(|v| v.clamp(1e-6, 1.0 - 1e-6));
    let (l_swap, perm) = pit_bce_values(&[p], &[y.clone()]).unwrap();
    let (l_id, _) = pit_bce_values(&[p_id], &[y]).unwrap();
    assert_eq!(perm[0], vec![1, 0]);
    assert!((l_swap - l_id).abs() < 1e-15);
}

#[test]
fn pit_ties_pick_the_lexicographically_smallest_permutation() {
    // identical columns make every permutation equally good
    let y = labels(&[&[1, 1, 1], &[0, 0, 0]]);
    let p = Tensor::from_rows(&[vec![0.7; 3], vec![0.2; 3]]).unwrap();
    let (_, perms) = pit_bce_values(&[p], &[y]).unwrap();
    assert_eq!(perms[0], vec![0, 1, 2]);
}

#[test]
fn pit_matches_two_speaker_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let t = rng.gen_range(1..15);
        let y = random_labels(&mut rng, t, 2);
        let p = random_probs(&mut rng, t, 2);
        let bce = |pv: f64, yv: u8| if yv == 1 { -pv.ln() } else { -(1.0 - pv).ln() };
        let cost = |swap: bool| {
            let mut s = 0.0;
            for f in 0..t {
                for k in 0..2 {
                    let src = if swap { 1 - k } else { k };
                    s += bce(p.at(f, k), y.get(f, src));
                }
            }
            s / (2 * t) as f64
        };
        let (a, b) = (cost(false), cost(true));
        let (loss, perms) = pit_bce_values(&[p.clone()], &[y]).unwrap();
        assert!((loss - a.min(b)).abs() < 1e-12);
        assert_eq!(perms[0], if b < a { vec![1, 0] } else { vec![0, 1] });
    }
}

#[test]
fn pit_rejects_too_many_speakers_and_bad_shapes() {
    let y = DiarLabels::zeros(2, 7);
    let p = Tensor::full(&[2, 7], 0.5);
    assert!(pit_bce_values(&[p], &[y]).unwrap_err().is_config());
    let y = DiarLabels::zeros(2, 3);
    let p = Tensor::full(&[2, 4], 0.5);
    assert!(pit_bce_values(&[p], &[y]).is_err());
}

#[test]
fn pit_op_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ys = [random_labels(&mut rng, 5, 3), random_labels(&mut rng, 3, 3)];
    let ps = [random_probs(&mut rng, 5, 3), random_probs(&mut rng, 3, 3)];
    let r = check(&ps, 1e-6, |tape, v| Ok(pit_bce_loss(tape, v, &ys)?.0)).unwrap();
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
}

fn logits_case(seed: u64) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>, Vec<DiarLabels>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lens = [6, 9];
    let mut z = Vec::new();
    let mut o = Vec::new();
    let mut y = Vec::new();
    for &t in &lens {
        z.push(Tensor::new(&[t, 4], (0..t * 4).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap());
        o.push(Tensor::new(&[t], (0..t).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap());
        y.push(random_labels(&mut rng, t, 4));
    }
    (z, o, y)
}

#[test]
fn total_loss_composes_its_parts() {
    let (z, o, y) = logits_case(5);
    let mut tape = Tape::<f64>::new();
    let zs: Vec<_> = z.iter().map(|t| tape.leaf(t.clone())).collect();
    let probs: Vec<_> = zs.iter().map(|&v| tape.sigmoid(v)).collect();
    let os: Vec<_> = o.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = total_loss(&mut tape, &probs, &os, &y, LossWeights::default()).unwrap();

    let pvals: Vec<_> = probs.iter().map(|&p| tape.value(p).clone()).collect();
    let (pit, _) = pit_bce_values(&pvals, &y).unwrap();
    let changes: Vec<_> = y.iter().map(|l| derive_change_labels(l).unwrap()).collect();
    let alpha = positive_ratio(&changes);
    let flat_o: Vec<f64> = o.iter().flat_map(|t| t.data()[..t.len() - 1].to_vec()).collect();
    let flat_c: Vec<u8> = changes.iter().flat_map(|c| c.values().to_vec()).collect();
    let bet = bet_loss_value(&flat_o, &flat_c, alpha, 2.0).unwrap();

    assert_eq!(out.alpha, alpha);
    assert!((tape.value(out.pit).item() - pit).abs() < 1e-12);
    assert!((tape.value(out.bet).item() - bet).abs() < 1e-12);
    assert!((tape.value(out.total).item() - (pit + 0.5 * bet)).abs() < 1e-12);
    assert_eq!(LossWeights::default().lambda, 0.5);
}

#[test]
fn lambda_zero_reduces_to_pit() {
    let (z, o, y) = logits_case(6);
    let mut tape = Tape::<f64>::new();
    let probs: Vec<_> = z.iter().map(|t| {
        let v = tape.leaf(t.clone());
        tape.sigmoid(v)
    }).collect();
    let os: Vec<_> = o.iter().map(|t| tape.leaf(t.clone())).collect();
    let w = LossWeights {
        lambda: 0.0,
        ..LossWeights::default()
    };
    let out = total_loss(&mut tape, &probs, &os, &y, w).unwrap();
    assert_eq!(tape.value(out.total).item(), tape.value(out.pit).item());
}

#[test]
fn total_loss_gradient_wrt_logits_matches_finite_differences() {
    let (z, o, y) = logits_case(7);
    let mut inputs = z.clone();
    inputs.extend(o.iter().cloned());
    let r = check(&inputs, 1e-5, |tape, v| {
        let probs: Vec<_> = v[..2].iter().map(|&x| tape.sigmoid(x)).collect();
        Ok(total_loss(tape, &probs, &v[2..], &y, LossWeights::default())?.total)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
}

#[test]
fn end_to_end_gradient_on_tiny_model() {
    let cfg = ModelConfig {
        feature_dim: 5,
        d_model: 16,
        num_layers: 2,
        num_speakers: 3,
        ffn_mult: 2,
        conv_kernels: vec![3, 5, 7],
        change_hidden: 8,
        lfa_mask: vec![true, true],
        dropout: 0.0,
        mamba: MambaConfig {
            d_state: 4,
            ..MambaConfig::default()
        },
    };
    let mut model = Model::<f64>::new(cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let x = Tensor::new(&[8, 5], (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let y = labels(&[&[1, 0, 0], &[1, 0, 0], &[1, 1, 0], &[0, 1, 0], &[0, 1, 0], &[0, 0, 1], &[0, 0, 1], &[0, 0, 0]]);
    let r = gradcheck_params(&model.params, 1e-5, 12, |ctx: &mut Ctx<f64>| {
        let xv = ctx.tape.constant(x.clone());
        let out = model.forward(ctx, xv)?;
        Ok(total_loss(&mut ctx.tape, &[out.probs], &[out.change_logits], &[y.clone()], LossWeights::default())?.total)
    })
    .unwrap();
    assert!(r.max_rel_err <= 1e-3, "{r:?}");
}

fn perm_cost(p: &Tensor<f64>, y: &DiarLabels, perm: &[usize]) -> f64 {
    let (t, k) = (y.frames(), y.speakers());
    let mut s = 0.0;
    for f in 0..t {
        for (j, &src) in perm.iter().enumerate() {
            s += bce_value(p.at(f, j), y.get(f, src));
        }
    }
    s / (t * k) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pit_is_invariant_to_label_permutation(seed in any::<u64>(), t in 1usize..12, k in 1usize..5, pi in 0usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random_labels(&mut rng, t, k);
        let p = random_probs(&mut rng, t, k);
        let perms = permutations(k);
        let tau = &perms[pi % perms.len()];
        let y2 = y.permute_columns(tau);
        let (l1, p1) = pit_bce_values(&[p.clone()], &[y.clone()]).unwrap();
        let (l2, p2) = pit_bce_values(&[p.clone()], &[y2]).unwrap();
        prop_assert!((l1 - l2).abs() <= 1e-12);
        // the argmin for the relabelled targets, mapped back through tau, is an argmin for the originals
        let composed: Vec<usize> = p2[0].iter().map(|&j| tau[j]).collect();
        prop_assert!((perm_cost(&p, &y, &composed) - l1).abs() <= 1e-12);
        prop_assert!((perm_cost(&p, &y, &p1[0]) - l1).abs() <= 1e-12);
    }

    #[test]
    fn change_labels_ignore_speaker_order(seed in any::<u64>(), t in 2usize..20, k in 1usize..5, pi in 0usize..120) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random_labels(&mut rng, t, k);
        let perms = permutations(k);
        let y2 = y.permute_columns(&perms[pi % perms.len()]);
        prop_assert_eq!(derive_change_labels(&y).unwrap(), derive_change_labels(&y2).unwrap());
    }
}
