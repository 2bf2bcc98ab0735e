//! Retrieval metrics against brute-force enumeration, and channel correlation.

mod common;

use abd_core::evaluate::{
    average_precision, bin_lo, cmc_topk, correlation_report, mean_ap, rank_gallery, Cameras, HISTOGRAM_BINS,
};
use abd_core::Tensor;
use common::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn dist(a: &Tensor, i: usize, b: &Tensor, j: usize) -> f64 {
    a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// 1-based rank of gallery item `g` for query `q`: items strictly closer, or equally close with a lower index, precede it.
fn rank_of(q: usize, g: usize, qe: &Tensor, ge: &Tensor) -> usize {
    let dg = dist(qe, q, ge, g);
    1 + (0..ge.shape()[0]).filter(|&h| {
        let dh = dist(qe, q, ge, h);
        dh < dg || (dh == dg && h < g)
    })
    .count()
}

/// `(AP, first-match rank)` by enumerating, for each true match, how many true matches rank at or before it.
fn brute_force(q: usize, qe: &Tensor, ge: &Tensor, ql: &[usize], gl: &[usize]) -> Option<(f64, usize)> {
    let mut ranks: Vec<usize> = (0..gl.len()).filter(|&g| gl[g] == ql[q]).map(|g| rank_of(q, g, qe, ge)).collect();
    if ranks.is_empty() {
        return None;
    }
    ranks.sort_unstable();
    // exact rational sum of hits/rank, then one correctly rounded division
    let (mut num, mut den) = (0u128, 1u128);
    for &r in &ranks {
        let hits = ranks.iter().filter(|&&s| s <= r).count() as u128;
        num = num * r as u128 + hits * den;
        den *= r as u128;
        let g = gcd(num, den);
        (num, den) = (num / g, den / g);
    }
    den *= ranks.len() as u128;
    let g = gcd(num, den);
    Some(((num / g) as f64 / (den / g) as f64, ranks[0]))
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 { a } else { gcd(b, a % b) }
}

#[test]
fn map_and_cmc_match_brute_force() {
    let mut r = rng(1);
    for trial in 0..200 {
        let nq = r.random_range(1..=20);
        let ng = r.random_range(1..=50);
        let ids = r.random_range(2..=8);
        let d = r.random_range(1..=4);
        // coarse values produce distance ties
        let gen = |r: &mut rand_chacha::ChaCha8Rng, n: usize| Tensor::from_fn(&[n, d], |_| r.random_range(0..4) as f64);
        let qe = gen(&mut r, nq);
        let ge = gen(&mut r, ng);
        let ql: Vec<usize> = (0..nq).map(|_| r.random_range(0..ids)).collect();
        let gl: Vec<usize> = (0..ng).map(|_| r.random_range(0..ids)).collect();
        let ranking = rank_gallery(&qe, &ge, &ql, &gl, None).unwrap();
        let oracle: Vec<(f64, usize)> = (0..nq).filter_map(|q| brute_force(q, &qe, &ge, &ql, &gl)).collect();
        if oracle.is_empty() {
            assert!(mean_ap(&ranking).is_err());
            continue;
        }
        let map = mean_ap(&ranking).unwrap();
        assert_eq!(map.excluded, nq - oracle.len());
        assert_eq!(map.value, oracle.iter().map(|o| o.0).sum::<f64>() / oracle.len() as f64, "trial {trial}");
        for k in [1, 5, 10] {
            let hits = oracle.iter().filter(|o| o.1 <= k).count();
            assert_eq!(cmc_topk(&ranking, k).unwrap().value, hits as f64 / oracle.len() as f64, "trial {trial} k {k}");
        }
    }
}

#[test]
fn hand_computed_average_precision() {
    assert_eq!(average_precision(&[false, true]), 0.5);
    assert_eq!(average_precision(&[true, false, true]), 5.0 / 6.0);
    assert_eq!(average_precision(&[true, true, false]), 1.0);
    assert_eq!(average_precision(&[false, false]), 0.0);
}

#[test]
fn same_camera_matches_are_dropped() {
    let qe = Tensor::from_rows(&[vec![0.0]]).unwrap();
    let ge = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
    let cams = Cameras { query: &[0], gallery: &[0, 1, 1] };
    let r = rank_gallery(&qe, &ge, &[7], &[7, 3, 7], Some(cams)).unwrap();
    assert_eq!(r.order[0], vec![1, 2]);
    assert_eq!(mean_ap(&r).unwrap().value, 0.5);
    let r = rank_gallery(&qe, &ge, &[7], &[7, 3, 7], None).unwrap();
    assert_eq!(mean_ap(&r).unwrap().value, 5.0 / 6.0);
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let qe = Tensor::zeros(&[1, 3]);
    let ge = Tensor::zeros(&[2, 4]);
    assert!(rank_gallery(&qe, &ge, &[0], &[0, 1], None).is_err());
}

#[test]
fn independent_channels_are_nearly_uncorrelated() {
    let mut r = rng(2);
    let f = Tensor::from_fn(&[8, 10_000], |_| StandardNormal.sample(&mut r));
    let rep = correlation_report(&f).unwrap();
    assert!(rep.mean_offdiag < 0.05, "{}", rep.mean_offdiag);
    assert_eq!(rep.histogram.iter().sum::<usize>(), 28);
}

#[test]
fn perfectly_correlated_and_constant_channels() {
    let f = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-2.0, -4.0, -6.0], vec![5.0, 5.0, 5.0]]).unwrap();
    let rep = correlation_report(&f).unwrap();
    assert_eq!(rep.constant_channels, 1);
    assert!((rep.matrix.at2(0, 1) - 1.0).abs() < 1e-12);
    assert_eq!(rep.matrix.at2(0, 2), 0.0);
    assert!((rep.mean_offdiag - 2.0 / 6.0).abs() < 1e-12);
    assert_eq!(rep.histogram[HISTOGRAM_BINS - 1], 1);
    assert_eq!(rep.histogram[0], 2);
    assert_eq!(bin_lo(HISTOGRAM_BINS / 2), 0.5);
    assert!(correlation_report(&Tensor::zeros(&[2, 1])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correlation_is_invariant_to_per_channel_affine_maps(
        data in prop::collection::vec(-3.0f64..3.0, 4 * 9),
        scales in prop::collection::vec(prop_oneof![-4.0f64..-0.25, 0.25f64..4.0], 4),
        shifts in prop::collection::vec(-10.0f64..10.0, 4),
    ) {
        let f = Tensor::new(vec![4, 3, 3], data).unwrap();
        let g = Tensor::from_fn(&[4, 3, 3], |i| scales[i / 9] * f.data()[i] + shifts[i / 9]);
        let (a, b) = (correlation_report(&f).unwrap(), correlation_report(&g).unwrap());
        for (x, y) in a.matrix.data().iter().zip(b.matrix.data()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        prop_assert!(a.mean_offdiag <= a.mean_full + 1e-12 || a.constant_channels > 0);
    }

    #[test]
    fn distances_are_symmetric(
        q in prop::collection::vec(-1.0f64..1.0, 6),
        g in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let qe = Tensor::new(vec![3, 2], q).unwrap();
        let ge = Tensor::new(vec![4, 2], g).unwrap();
        let ab = rank_gallery(&qe, &ge, &[0; 3], &[0; 4], None).unwrap().distances;
        let ba = rank_gallery(&ge, &qe, &[0; 4], &[0; 3], None).unwrap().distances;
        prop_assert_eq!(ab.transpose().unwrap(), ba);
        prop_assert!(ab.data().iter().all(|&v| v >= 0.0));
    }
}
