mod common;

use genefl::genecraft::{GeneOrigin, LearnGene};
use genefl::nn::{LayeredParams, MlpSpec};
use genefl::server::{self, ClusterState, Signature};
use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn random_matrix(r: &mut impl Rng, m: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((m, n), |_| r.random_range(-1.0..1.0))
}

fn basis(sig: &Signature) -> DMatrix<f64> {
    DMatrix::from_fn(sig.m0, sig.d, |i, j| sig.column(j)[i])
}

#[test]
fn signature_columns_match_gram_eigenvectors() {
    let mut r = common::rng(8);
    let x = random_matrix(&mut r, 8, 6);
    let sig = server::svd_signature(&x, 3).unwrap();
    let u = basis(&sig);
    let gram = u.transpose() * &u;
    assert!((gram - DMatrix::identity(3, 3)).amax() <= 1e-8);
    assert!(common::max_principal_angle(&u, &common::gram_basis(&x, 3)) <= 1e-6);
}

#[test]
fn signature_sign_convention() {
    let mut r = common::rng(1);
    let x = random_matrix(&mut r, 6, 4);
    let a = server::svd_signature(&x, 2).unwrap();
    let b = server::svd_signature(&x.mapv(|v| -v), 2).unwrap();
    for j in 0..2 {
        let col = a.column(j);
        let peak = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        assert!(peak > 0.0);
        for (p, q) in col.iter().zip(b.column(j)) {
            assert!((p - q).abs() < 1e-10);
        }
    }
}

#[test]
fn two_blobs_are_recovered() {
    let mut r = common::rng(4);
    let mut sigs = Vec::new();
    for i in 0..10 {
        let centre = if i % 2 == 0 { 0.0 } else { 10.0 };
        let u = (0..6).map(|_| centre + r.random_range(-0.5..0.5)).collect();
        sigs.push(Signature { u, d: 1, m0: 6, rank_deficient: false });
    }
    let ids: Vec<usize> = (0..10).collect();
    let t = server::cluster_known(&ids, &sigs, 2, 9).unwrap();
    // oracle: clients closer than a threshold belong together
    for i in 0..10 {
        for j in 0..10 {
            let close = sigs[i].distance(&sigs[j].u).unwrap() < 5.0;
            assert_eq!(close, t.assignments[&i] == t.assignments[&j], "{i} {j}");
        }
    }
}

#[test]
fn kmeans_is_deterministic_per_seed() {
    let mut r = common::rng(5);
    let sigs: Vec<Signature> = (0..9)
        .map(|_| Signature { u: (0..4).map(|_| r.random_range(0.0..1.0)).collect(), d: 1, m0: 4, rank_deficient: false })
        .collect();
    let ids: Vec<usize> = (0..9).collect();
    assert_eq!(server::cluster_known(&ids, &sigs, 3, 1).unwrap(), server::cluster_known(&ids, &sigs, 3, 1).unwrap());
}

fn clusters_from(means: &[Vec<f64>]) -> Vec<ClusterState> {
    let model: LayeredParams = MlpSpec::new(2, vec![], 2).init(0);
    means.iter().enumerate().map(|(k, m)| common::cluster_with(k, model.clone(), m.clone(), 1)).collect()
}

#[test]
fn nearest_matches_brute_force_scan() {
    let mut r = common::rng(11);
    for _ in 0..50 {
        let means: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let u: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let cs = clusters_from(&means);
        let sig = Signature { u: u.clone(), d: 1, m0: 3, rank_deficient: false };
        let mut best = (usize::MAX, f64::INFINITY);
        for (k, m) in means.iter().enumerate() {
            let d = u.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if d < best.1 {
                best = (k, d);
            }
        }
        let got = server::nearest_cluster(&sig, &cs).unwrap();
        assert_eq!(got.0, best.0);
        assert!((got.1 - best.1).abs() < 1e-12);
    }
}

#[test]
fn equidistant_goes_to_lowest_id() {
    let cs = clusters_from(&[vec![-1.0], vec![1.0]]);
    let sig = Signature { u: vec![0.0], d: 1, m0: 1, rank_deficient: false };
    assert_eq!(server::nearest_cluster(&sig, &cs).unwrap().0, 0);
}

#[test]
fn sequential_admission_equals_batch_mean() {
    let mut r = common::rng(12);
    let initial: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let init_mean: Vec<f64> = (0..4).map(|j| initial.iter().map(|v| v[j]).sum::<f64>() / 3.0).collect();
    let mut cs = clusters_from(&[init_mean]);
    cs[0].members = 3;
    let mut all = initial.clone();
    for _ in 0..20 {
        let u: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        server::admit_agnostic(&Signature { u: u.clone(), d: 1, m0: 4, rank_deficient: false }, &mut cs).unwrap();
        all.push(u);
    }
    for j in 0..4 {
        let want = all.iter().map(|v| v[j]).sum::<f64>() / all.len() as f64;
        assert!((cs[0].mean[j] - want).abs() < 1e-9);
    }
    assert_eq!(cs[0].members, 23);
}

#[test]
fn admitting_the_mean_keeps_it() {
    let mut cs = clusters_from(&[vec![0.5, 0.5]]);
    server::admit_agnostic(&Signature { u: vec![0.5, 0.5], d: 1, m0: 2, rank_deficient: false }, &mut cs).unwrap();
    assert_eq!(cs[0].mean, vec![0.5, 0.5]);
    assert_eq!(cs[0].members, 2);
}

#[test]
fn aggregation_matches_brute_force_on_every_coverage_pattern() {
    let arch = MlpSpec::new(3, vec![2, 2], 2);
    let prev_model: LayeredParams = arch.init(100);
    let prev = common::cluster_with(0, prev_model.clone(), vec![0.0], 1);
    for clients in 1..=3usize {
        // every assignment of a nonempty 6-bit mask to each client would be 63^clients; sample
        // patterns exhaustively for one client and by seeded draws beyond
        let patterns: Vec<Vec<u8>> = if clients == 1 {
            (1..64u8).map(|p| vec![p]).collect()
        } else {
            let mut r = common::rng(clients as u64);
            (0..300).map(|_| (0..clients).map(|_| r.random_range(1..64u8)).collect()).collect()
        };
        for pat in patterns {
            let genes: Vec<LearnGene> = pat
                .iter()
                .enumerate()
                .map(|(i, &bits)| {
                    let m: LayeredParams = arch.init(i as u64 + 7);
                    let keep: Vec<bool> = (0..6).map(|b| bits >> b & 1 == 1).collect();
                    LearnGene::from_model(&m, &keep, GeneOrigin { owner: clients - i, round: 1 }).unwrap()
                })
                .collect();
            let got = server::aggregate_learngene(&genes, &prev, 1).unwrap();
            assert_eq!(got.model, common::brute_aggregate(&genes, &prev_model));
        }
    }
}

#[test]
fn init_agnostic_copies_gene_bits() {
    let arch = MlpSpec::new(5, vec![4], 3);
    let src: LayeredParams = arch.init(3);
    let gene = LearnGene::from_model(&src, &[true, false, false, true], GeneOrigin { owner: 0, round: 2 }).unwrap();
    let m = server::init_agnostic(&gene, &arch, 77).unwrap();
    for id in ["fc1.weight", "fc2.bias"] {
        let a = m.get(id).unwrap();
        let b = src.get(id).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_ne!(m.get("fc1.bias"), src.get("fc1.bias"));
    let other = MlpSpec::new(6, vec![4], 3);
    assert!(server::init_agnostic(&gene, &other, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn signatures_are_orthonormal(seed in any::<u64>(), m in 4usize..12, n in 3usize..8, d_off in 0usize..3) {
        let mut r = common::rng(seed);
        let d = 1 + d_off.min(m.min(n) - 1);
        let x = random_matrix(&mut r, m, n);
        let s = server::svd_signature(&x, d).unwrap();
        prop_assert_eq!(s.u.len(), m * d);
        let u = basis(&s);
        prop_assert!((u.transpose() * &u - DMatrix::identity(d, d)).amax() <= 1e-8);
    }

    #[test]
    fn nearest_is_permutation_invariant(seed in any::<u64>()) {
        let mut r = common::rng(seed);
        let means: Vec<Vec<f64>> = (0..4).map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let cs = clusters_from(&means);
        let sig = Signature { u: vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)], d: 1, m0: 2, rank_deficient: false };
        let a = server::nearest_cluster(&sig, &cs).unwrap();
        let mut rev = cs.clone();
        rev.reverse();
        rev.swap(0, 2);
        prop_assert_eq!(a, server::nearest_cluster(&sig, &rev).unwrap());
    }
}
