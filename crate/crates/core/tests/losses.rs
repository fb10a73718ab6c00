mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use proptest::prelude::*;
use rand::Rng;
use refloc::losses::*;
use refloc::preprocess::Affine2;

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn stub_extractor_total_matches_hand_sum() {
    let mut r = rng(1);
    let n = 32;
    let a: Vec<f64> = (0..n * n).map(|_| f64::from(r.random_bool(0.3) as u8)).collect();
    let b: Vec<f64> = (0..n * n).map(|_| r.random_range(0.0..1.0)).collect();
    let ta = Tensor::from_vec(a.clone(), (1, 1, n, n), &Device::Cpu).unwrap();
    let tb = Tensor::from_vec(b.clone(), (1, 1, n, n), &Device::Cpu).unwrap();
    let out = autoencoder_loss(&ta, &tb, Some(&StubExtractor), 1.0).unwrap();

    let pixel: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / (n * n) as f64;
    let layer1: f64 = a.iter().zip(&b).map(|(x, y)| (2.0 * x - 2.0 * y).powi(2)).sum::<f64>() / (n * n) as f64;
    let pool = |v: &[f64], i: usize, j: usize| {
        (v[2 * i * n + 2 * j] + v[2 * i * n + 2 * j + 1] + v[(2 * i + 1) * n + 2 * j] + v[(2 * i + 1) * n + 2 * j + 1]) / 4.0
    };
    let mut layer2 = 0.0;
    for i in 0..n / 2 {
        for j in 0..n / 2 {
            layer2 += (pool(&a, i, j).powi(2) - pool(&b, i, j).powi(2)).powi(2);
        }
    }
    layer2 /= (n * n / 4) as f64;
    let expected = pixel + layer1 + layer2;
    assert!((out.breakdown.total - expected).abs() < 1e-12);
    assert!((scalar(&out.total) - expected).abs() < 1e-12);
    assert!((out.breakdown.pixel_l2 - pixel).abs() < 1e-12);
}

#[test]
fn vicreg_matches_loop_oracle() {
    let mut r = rng(2);
    for _ in 0..100 {
        let n = r.random_range(2..=16);
        let d = r.random_range(1..=32);
        let z = randn(&[n, d], &mut r, 2.0);
        let z2 = randn(&[n, d], &mut r, 2.0);
        let got = scalar(&vicreg_criterion(&z, &z2, &VicregCoeffs::default()).unwrap());
        let want = brute_vicreg(&to_rows(&z), &to_rows(&z2), 25.0, 25.0, 1.0);
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "{got} vs {want}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut r = rng(3);
    // reconstruction loss through the stub extractor
    let target = randn(&[2, 1, 4, 4], &mut r, 1.0).abs().unwrap();
    let recon = randn(&[2, 1, 4, 4], &mut r, 1.0).abs().unwrap();
    let gap = gradient_gap(&recon, 1e-6, |x| autoencoder_loss(&target, x, Some(&StubExtractor), 1.0).unwrap().total);
    assert!(gap < 1e-4, "autoencoder gap {gap}");

    let z2 = randn(&[6, 5], &mut r, 0.5);
    let z = randn(&[6, 5], &mut r, 0.5);
    let gap = gradient_gap(&z, 1e-6, |x| vicreg_criterion(x, &z2, &VicregCoeffs::default()).unwrap());
    assert!(gap < 1e-4, "vicreg gap {gap}");

    let mut tr = Vec::new();
    for _ in 0..2 {
        tr.push((plain_transform(random_affine(&mut r)), plain_transform(random_affine(&mut r))));
    }
    let la = randn(&[2, 4, 3, 3], &mut r, 0.5);
    let lb = randn(&[2, 4, 3, 3], &mut r, 0.5);
    let ga = randn(&[2, 6], &mut r, 0.5);
    let gb = randn(&[2, 6], &mut r, 0.5);
    let p = VicreglParams {
        gamma: 5,
        ..Default::default()
    };
    let total = |la: &Tensor, ga: &Tensor| {
        let a = BranchOutputs {
            local: la.clone(),
            global: ga.clone(),
        };
        let b = BranchOutputs {
            local: lb.clone(),
            global: gb.clone(),
        };
        vicregl_total(&a, &b, &tr, 24, &p).unwrap().total
    };
    let gap = gradient_gap(&la, 1e-6, |x| total(x, &ga));
    assert!(gap < 1e-4, "vicregl local gap {gap}");
    let gap = gradient_gap(&ga, 1e-6, |x| total(&la, x));
    assert!(gap < 1e-4, "vicregl global gap {gap}");
}

#[test]
fn swapping_views_leaves_total_unchanged() {
    let mut r = rng(4);
    let a = BranchOutputs {
        local: randn(&[3, 8, 4, 4], &mut r, 1.0),
        global: randn(&[3, 16], &mut r, 1.0),
    };
    let b = BranchOutputs {
        local: randn(&[3, 8, 4, 4], &mut r, 1.0),
        global: randn(&[3, 16], &mut r, 1.0),
    };
    let tr: Vec<_> = (0..3)
        .map(|_| (plain_transform(random_affine(&mut r)), plain_transform(random_affine(&mut r))))
        .collect();
    let swapped: Vec<_> = tr.iter().map(|(x, y)| (*y, *x)).collect();
    let p = VicreglParams::default();
    let x = vicregl_total(&a, &b, &tr, 32, &p).unwrap().breakdown;
    let y = vicregl_total(&b, &a, &swapped, 32, &p).unwrap().breakdown;
    assert_eq!(x.local_loc_ab, y.local_loc_ba);
    assert_eq!(x.local_feat_ab, y.local_feat_ba);
    assert!((x.total - y.total).abs() < 1e-9 * x.total.abs());
}

#[test]
fn identity_views_have_zero_local_invariance() {
    let mut r = rng(5);
    let local = randn(&[4, 8, 3, 3], &mut r, 3.0);
    let global = randn(&[4, 16], &mut r, 3.0);
    let a = BranchOutputs {
        local: local.clone(),
        global: global.clone(),
    };
    let ident = plain_transform(Affine2::IDENTITY);
    let out = vicregl_total(&a, &a, &vec![(ident, ident); 4], 24, &VicreglParams::default()).unwrap();
    let b = out.breakdown;
    // matched pairs are identical vectors: only regularization remains
    let reg_only = scalar(&vicreg_criterion(&global, &global, &VicregCoeffs::default()).unwrap());
    assert!((b.global_vicreg - reg_only).abs() < 1e-12);
    let terms = vicreg_terms(&global, &global).unwrap();
    assert_eq!(scalar(&terms.invariance), 0.0);
    assert_eq!(b.total, b.recompose());
    assert!((b.total - scalar(&out.total)).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn location_matches_agree_with_brute_force(seed in any::<u64>(), h in 1usize..=8, w in 1usize..=8, g in 1usize..=70) {
        let mut r = rng(seed);
        let ta = random_affine(&mut r);
        let tb = random_affine(&mut r);
        let got = location_matches(&plain_transform(ta), &plain_transform(tb), (h, w), 64, g).unwrap();
        let want = brute_location(&ta, &tb, h, w, 64, g);
        prop_assert_eq!(got.pairs.len(), g.min(h * w));
        prop_assert_eq!(same_pairs(&got.pairs, &want), true);
    }

    #[test]
    fn feature_matches_agree_with_brute_force(seed in any::<u64>(), n in 1usize..=64, d in 1usize..=16, g in 1usize..=70) {
        let mut r = rng(seed);
        let z: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let z2: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = feature_matches(&z, &z2, d, g).unwrap();
        prop_assert_eq!(same_pairs(&got.pairs, &brute_feature(&z, &z2, d, g)), true);
    }

    #[test]
    fn feature_matching_recovers_permutation(seed in any::<u64>(), n in 2usize..=30) {
        let mut r = rng(seed);
        let d = 4;
        let z: Vec<f64> = (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        // z2[perm[p]] = z[p]
        let mut z2 = vec![0.0; n * d];
        for p in 0..n {
            z2[perm[p] * d..(perm[p] + 1) * d].copy_from_slice(&z[p * d..(p + 1) * d]);
        }
        let m = feature_matches(&z, &z2, d, n).unwrap();
        for pair in m.pairs {
            prop_assert_eq!(pair.q, perm[pair.p]);
        }
    }

    #[test]
    fn location_distances_are_prefix_stable(seed in any::<u64>(), g in 1usize..=15) {
        let mut r = rng(seed);
        let ta = plain_transform(random_affine(&mut r));
        let tb = plain_transform(random_affine(&mut r));
        let small = location_matches(&ta, &tb, (4, 4), 32, g).unwrap();
        let large = location_matches(&ta, &tb, (4, 4), 32, g + 1).unwrap();
        prop_assert_eq!(&large.pairs[..small.pairs.len()], &small.pairs[..]);
        for w in large.pairs.windows(2) {
            prop_assert!(w[0].distance <= w[1].distance);
        }
        let mut seen = std::collections::HashSet::new();
        prop_assert!(large.pairs.iter().all(|p| seen.insert(p.p)));
    }

    #[test]
    fn breakdown_components_non_negative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = BranchOutputs { local: randn(&[2, 4, 3, 3], &mut r, 2.0), global: randn(&[2, 8], &mut r, 2.0) };
        let b = BranchOutputs { local: randn(&[2, 4, 3, 3], &mut r, 2.0), global: randn(&[2, 8], &mut r, 2.0) };
        let tr: Vec<_> = (0..2).map(|_| (plain_transform(random_affine(&mut r)), plain_transform(random_affine(&mut r)))).collect();
        let out = vicregl_total(&a, &b, &tr, 24, &VicreglParams::default()).unwrap();
        prop_assert!(out.breakdown.components().iter().all(|&c| c >= 0.0));
        let target = randn(&[1, 1, 8, 8], &mut r, 1.0).abs().unwrap();
        let recon = randn(&[1, 1, 8, 8], &mut r, 1.0).abs().unwrap();
        let ae = autoencoder_loss(&target, &recon, Some(&FilterBankExtractor::new(1).unwrap()), 1.0).unwrap();
        prop_assert!(ae.breakdown.components().iter().all(|&c| c >= 0.0));
        prop_assert_eq!(ae.breakdown.total, ae.breakdown.recompose());
    }
}
