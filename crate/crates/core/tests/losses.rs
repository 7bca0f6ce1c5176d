//! Loss values against brute-force scalar oracles, closed forms and
//! properties over random instances.

mod common;

use candle_core::{DType, Device, Tensor};
use common::oracles::*;
use common::*;
use proptest::prelude::*;
use qsvlm::losses::instance::MatchHead;
use qsvlm::losses::{
    attention_context, fuse, global_alignment_loss, instance_matching_loss, local_alignment_loss, local_match,
    masked_cross_entropy, masked_mse, pairwise_z, sample_hard_negatives, MatchBatch, TemperatureParams,
};
use qsvlm::nn::{l2_normalize, scalar, Linear};

#[test]
fn global_loss_matches_brute_force() {
    let mut r = rng(10);
    for trial in 0..20 {
        let v = unit_rows(&random_rows(4, 16, &mut r));
        let t = unit_rows(&random_rows(4, 16, &mut r));
        for sym in [true, false] {
            let got = scalar(&global_alignment_loss(&t2(&v), &t2(&t), 0.07, sym).unwrap()).unwrap();
            let want = global_oracle(&v, &t, 0.07, sym);
            assert!((got - want).abs() < 1e-6, "trial {trial}: {got} vs {want}");
        }
    }
}

#[test]
fn attention_context_matches_weighted_sum() {
    let mut r = rng(11);
    for _ in 0..10 {
        let patches = random_rows(6, 8, &mut r);
        let s = normal_vec(8, &mut r);
        let (c, w) = attention_context(&t2(&patches), &Tensor::new(s.as_slice(), &Device::Cpu).unwrap(), 0.1).unwrap();
        let (c0, w0) = context_oracle(&patches, &s, 0.1);
        for (a, b) in c.to_vec1::<f64>().unwrap().iter().zip(&c0) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in w.to_vec1::<f64>().unwrap().iter().zip(&w0) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn z_matches_literal_formula() {
    let mut r = rng(12);
    let temps = TemperatureParams::default();
    for _ in 0..10 {
        let patches = random_rows(4, 8, &mut r);
        let sentences = random_rows(3, 8, &mut r);
        let m = local_match(&t2(&patches), &t2(&sentences), &temps).unwrap();
        let want = z_oracle(&patches, &sentences, &temps);
        assert!((scalar(&m.z).unwrap() - want).abs() < 1e-6);
    }
}

#[test]
fn z_approaches_max_as_tau2_vanishes() {
    let mut r = rng(13);
    let patches = random_rows(5, 8, &mut r);
    let sentences = random_rows(3, 8, &mut r);
    let temps = TemperatureParams {
        tau2: 1e-3,
        ..TemperatureParams::default()
    };
    let m = local_match(&t2(&patches), &t2(&sentences), &temps).unwrap();
    let cos: Vec<f64> = sentences
        .iter()
        .map(|s| dot(&context_oracle(&patches, s, temps.tau_att).0, &unit_rows(&[s.clone()])[0]))
        .collect();
    let max = cos.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!((scalar(&m.z).unwrap() - max).abs() < 1e-2);
}

#[test]
fn local_loss_matches_pairwise_oracle() {
    let mut r = rng(14);
    let temps = TemperatureParams::default();
    let mask = vec![vec![true, true, true], vec![true, true, false], vec![true, false, false]];
    let mask_t = t2(&mask.iter().map(|m| m.iter().map(|&x| x as u8 as f64).collect()).collect::<Vec<_>>());
    for _ in 0..5 {
        let patches: Vec<Vec<Vec<f64>>> = (0..3).map(|_| random_rows(4, 8, &mut r)).collect();
        let sentences: Vec<Vec<Vec<f64>>> = (0..3).map(|_| unit_rows(&random_rows(3, 8, &mut r))).collect();
        for sym in [true, false] {
            let got = scalar(&local_alignment_loss(&t3(&patches), &t3(&sentences), &mask_t, &temps, sym).unwrap()).unwrap();
            let want = local_loss_oracle(&patches, &sentences, &mask, &temps, sym);
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        let z = to_rows(&pairwise_z(&t3(&patches), &t3(&sentences), &mask_t, &temps).unwrap());
        for i in 0..3 {
            for k in 0..3 {
                let valid: Vec<Vec<f64>> =
                    sentences[k].iter().zip(&mask[k]).filter(|(_, m)| **m).map(|(s, _)| s.clone()).collect();
                assert!((z[i][k] - z_oracle(&patches[i], &valid, &temps)).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn uniform_local_scores_give_ln2() {
    // identical images and identical reports make every Z equal
    let mut r = rng(15);
    let p = random_rows(4, 8, &mut r);
    let s = unit_rows(&random_rows(2, 8, &mut r));
    let mask = t2(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
    let l = local_alignment_loss(&t3(&[p.clone(), p]), &t3(&[s.clone(), s]), &mask, &TemperatureParams::default(), true)
        .unwrap();
    assert!((scalar(&l).unwrap() - 2f64.ln()).abs() < 1e-6);
}

/// `Linear -> tanh GELU -> Linear` by hand.
fn head_oracle(x: &[f64], w1: &[Vec<f64>], b1: &[f64], w2: &[f64], b2: f64) -> f64 {
    let h: Vec<f64> = w1
        .iter()
        .zip(b1)
        .map(|(w, b)| {
            let z = dot(w, x) + b;
            0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh())
        })
        .collect();
    dot(w2, &h) + b2
}

#[test]
fn match_head_matches_matrix_arithmetic() {
    let mut r = rng(16);
    let d = 6;
    let w1 = random_rows(d, d, &mut r);
    let b1 = normal_vec(d, &mut r);
    let w2 = normal_vec(d, &mut r);
    let b2 = normal_vec(1, &mut r);
    let head = MatchHead::from_parts(
        Linear::from_parts(t2(&w1), Tensor::new(b1.as_slice(), &Device::Cpu).unwrap()),
        Linear::from_parts(t2(&[w2.clone()]), Tensor::new(b2.as_slice(), &Device::Cpu).unwrap()),
    );
    let x = random_rows(5, d, &mut r);
    let logits = head.forward(&t2(&x)).unwrap().to_vec1::<f64>().unwrap();
    for (xi, li) in x.iter().zip(&logits) {
        assert!((li - head_oracle(xi, &w1, &b1, &w2, b2[0])).abs() < 1e-6);
    }
}

#[test]
fn fuse_and_bce_match_elementwise_oracles() {
    let mut r = rng(17);
    let v = random_rows(3, 5, &mut r);
    let t = random_rows(3, 5, &mut r);
    let f = to_rows(&fuse(&t2(&v), &t2(&t)).unwrap());
    for i in 0..3 {
        for k in 0..5 {
            assert_eq!(f[i][k], v[i][k] + t[i][k]);
        }
    }
    let probs: Vec<f64> = (0..30).map(|i| 0.01 + 0.98 * ((i as f64 * 0.37).sin().abs())).collect();
    let labels: Vec<f64> = (0..30).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let got = scalar(
        &instance_matching_loss(
            &Tensor::new(probs.as_slice(), &Device::Cpu).unwrap(),
            &Tensor::new(labels.as_slice(), &Device::Cpu).unwrap(),
        )
        .unwrap(),
    )
    .unwrap();
    let want = probs
        .iter()
        .zip(&labels)
        .map(|(x, y)| -(y * x.ln() + (1.0 - y) * (1.0 - x).ln()))
        .sum::<f64>()
        / 30.0;
    assert!((got - want).abs() < 1e-7);
}

#[test]
fn mse_and_token_loss_match_elementwise_oracles() {
    let mut r = rng(18);
    let a = random_rows(7, 4, &mut r);
    let b = random_rows(7, 4, &mut r);
    let got = scalar(&masked_mse(&t2(&a), &t2(&b)).unwrap()).unwrap();
    let want = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 28.0;
    assert!((got - want).abs() < 1e-7);

    let logits = random_rows(5, 9, &mut r);
    let targets = [3u32, 0, 8, 4, 4];
    let got = scalar(&masked_cross_entropy(&t2(&logits), &Tensor::new(&targets, &Device::Cpu).unwrap()).unwrap()).unwrap();
    let want = logits
        .iter()
        .zip(&targets)
        .map(|(l, &y)| logsumexp(l) - l[y as usize])
        .sum::<f64>()
        / 5.0;
    assert!((got - want).abs() < 1e-6);
}

#[test]
fn instance_loss_descends_under_one_step() {
    let mut r = rng(19);
    let d = 8;
    let v = unit_rows(&random_rows(4, d, &mut r));
    let t = unit_rows(&random_rows(4, d, &mut r));
    let mut store = qsvlm::nn::ParamStore::new(DType::F64);
    let mut init = qsvlm::nn::init_rng(19);
    let head = MatchHead::new(&mut qsvlm::nn::ParamBuilder::new(&mut store, &mut init), d).unwrap();
    let loss = || {
        let mb = MatchBatch::build(&t2(&v), &t2(&t), &[1, 2, 3, 0], &[2, 3, 0, 1], &head).unwrap();
        instance_matching_loss(&mb.probs, &mb.labels).unwrap()
    };
    let before = loss();
    let grads = before.backward().unwrap();
    for (_, p) in store.iter() {
        let g = grads.get(p.as_tensor()).unwrap();
        p.set(&(p.as_tensor() - (g * 0.1).unwrap()).unwrap()).unwrap();
    }
    assert!(scalar(&loss()).unwrap() < scalar(&before).unwrap());
}

fn unit_tensor(rows: &[Vec<f64>]) -> Tensor {
    l2_normalize(&t2(rows)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn global_loss_invariants(seed in 0u64..10_000, b in 1usize..6, d in 2usize..9, tau in 0.05f64..1.0) {
        let mut r = rng(seed);
        let v = random_rows(b, d, &mut r);
        let t = random_rows(b, d, &mut r);
        let l = scalar(&global_alignment_loss(&unit_tensor(&v), &unit_tensor(&t), tau, true).unwrap()).unwrap();
        prop_assert!(l >= -1e-12);
        // joint row permutation
        let perm: Vec<usize> = (0..b).rev().collect();
        let vp: Vec<Vec<f64>> = perm.iter().map(|&i| v[i].clone()).collect();
        let tp: Vec<Vec<f64>> = perm.iter().map(|&i| t[i].clone()).collect();
        let lp = scalar(&global_alignment_loss(&unit_tensor(&vp), &unit_tensor(&tp), tau, true).unwrap()).unwrap();
        prop_assert!((l - lp).abs() < 1e-9);
        // the symmetric loss does not care which side is the image
        let ls = scalar(&global_alignment_loss(&unit_tensor(&t), &unit_tensor(&v), tau, true).unwrap()).unwrap();
        prop_assert!((l - ls).abs() < 1e-9);
    }

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..10_000, p in 1usize..10, s in 1usize..5, d in 2usize..9) {
        let mut r = rng(seed);
        let patches = random_rows(p, d, &mut r);
        let m = local_match(&t2(&patches), &t2(&random_rows(s, d, &mut r)), &TemperatureParams::default()).unwrap();
        let attn = to_rows(&m.attn);
        let ctx = to_rows(&m.contexts);
        for (w, c) in attn.iter().zip(&ctx) {
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            // the context is the normalized convex combination with these weights
            let raw: Vec<f64> = (0..d).map(|k| patches.iter().zip(w).map(|(pj, wj)| wj * pj[k]).sum()).collect();
            let want = &unit_rows(&[raw])[0];
            for (a, b) in c.iter().zip(want) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn z_is_monotone_in_each_similarity(seed in 0u64..10_000, s in 1usize..5, which in 0usize..5, eps in 0.01f64..0.5) {
        // one patch: every context is that patch, so moving a sentence towards
        // it raises exactly one similarity
        let mut r = rng(seed);
        let d = 6;
        let patch = random_rows(1, d, &mut r);
        let sentences = random_rows(s, d, &mut r);
        let temps = TemperatureParams::default();
        let z0 = scalar(&local_match(&t2(&patch), &t2(&sentences), &temps).unwrap().z).unwrap();
        let i = which % s;
        let pu = &unit_rows(&patch)[0];
        let su = &unit_rows(&[sentences[i].clone()])[0];
        let mut moved = sentences.clone();
        moved[i] = su.iter().zip(pu).map(|(a, b)| a + eps * b).collect();
        let z1 = scalar(&local_match(&t2(&patch), &t2(&moved), &temps).unwrap().z).unwrap();
        prop_assert!(z1 >= z0 - 1e-12);
    }

    #[test]
    fn hard_negatives_never_hit_the_diagonal(seed in 0u64..10_000, b in 2usize..8, scale in 0.1f64..20.0) {
        let mut r = rng(seed);
        let sim: Vec<Vec<f64>> = random_rows(b, b, &mut r).into_iter().map(|row| row.into_iter().map(|x| x * scale).collect()).collect();
        let (nt, ni) = sample_hard_negatives(&sim, seed).unwrap();
        prop_assert_eq!(nt.len(), b);
        prop_assert_eq!(ni.len(), b);
        for i in 0..b {
            prop_assert!(nt[i] != i && nt[i] < b);
            prop_assert!(ni[i] != i && ni[i] < b);
        }
        prop_assert_eq!(sample_hard_negatives(&sim, seed).unwrap(), (nt, ni));
    }

    #[test]
    fn losses_are_non_negative(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let probs: Vec<f64> = (0..6).map(|_| rand::Rng::random_range(&mut r, 1e-6..1.0 - 1e-6)).collect();
        let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
        let l = instance_matching_loss(&Tensor::new(probs.as_slice(), &Device::Cpu).unwrap(), &Tensor::new(labels.as_slice(), &Device::Cpu).unwrap()).unwrap();
        prop_assert!(scalar(&l).unwrap() >= 0.0);
        let logits = random_rows(3, 7, &mut r);
        let ce = masked_cross_entropy(&t2(&logits), &Tensor::new(&[0u32, 6, 2], &Device::Cpu).unwrap()).unwrap();
        prop_assert!(scalar(&ce).unwrap() >= 0.0);
    }
}
