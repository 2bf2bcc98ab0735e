//! Dense tensor invariants.

use abd_core::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a.at2(i, t) * b.at2(t, j);
            }
        }
    }
    Tensor::new(vec![n, m], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_matches_triple_loop(a in matrix(3, 5), b in matrix(5, 4)) {
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&triple_loop(&a, &b)).unwrap() <= 1e-12);
    }

    #[test]
    fn matmul_is_associative(a in matrix(2, 3), b in matrix(3, 4), c in matrix(4, 2)) {
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        prop_assert!(left.max_abs_diff(&right).unwrap() <= 1e-9);
    }

    #[test]
    fn transpose_reverses_products(a in matrix(3, 4), b in matrix(4, 2)) {
        let lhs = a.matmul(&b).unwrap().transpose().unwrap();
        let rhs = b.transpose().unwrap().matmul(&a.transpose().unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-12);
        prop_assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
    }

    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-700.0f64..700.0, 12)) {
        let s = Tensor::new(vec![3, 4], data).unwrap().softmax_rows().unwrap();
        for r in 0..3 {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn flatten_round_trip(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let t = Tensor::from_fn(&[c, h, w], |i| (i as f64 + seed as f64 % 97.0).sin());
        let flat = t.flatten_spatial().unwrap();
        prop_assert_eq!(flat.shape(), &[c, h * w]);
        prop_assert_eq!(flat.unflatten_spatial(h, w).unwrap(), t);
    }

    #[test]
    fn serialization_round_trip(rank in 0usize..4, seed in any::<u64>()) {
        let shape: Vec<usize> = (0..rank).map(|i| 1 + (seed as usize >> (4 * i)) % 4).collect();
        let t = Tensor::from_fn(&shape, |i| f64::from_bits(seed.rotate_left(i as u32) & 0x7fef_ffff_ffff_ffff));
        let bytes = t.to_bytes();
        prop_assert_eq!(bytes.len(), t.encoded_len());
        let back = Tensor::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn stack_then_index_recovers_parts(a in matrix(2, 3), b in matrix(2, 3)) {
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        prop_assert_eq!(s.index_axis0(0).unwrap(), a);
        prop_assert_eq!(s.index_axis0(1).unwrap(), b);
    }
}

#[test]
fn shape_errors() {
    let a = Tensor::zeros(&[2, 3]);
    assert!(a.matmul(&Tensor::zeros(&[2, 3])).is_err());
    assert!(a.reshape(&[4, 2]).is_err());
    assert!(a.add(&Tensor::zeros(&[3, 2])).is_err());
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::from_bytes(&a.to_bytes()[..10]).is_err());
    assert!(Tensor::zeros(&[2]).item().is_err());
}

#[test]
fn global_average_pool_and_concat() {
    let x = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
    let g = x.global_avg_pool().unwrap();
    assert_eq!(g.shape(), &[3]);
    assert_eq!(g.data()[2], (8.0 + 9.0 + 10.0 + 11.0) / 4.0);
    let a = Tensor::filled(&[2, 1, 2], 1.0);
    let b = Tensor::filled(&[1, 1, 2], 2.0);
    let c = Tensor::concat_channels(&[&a, &b]).unwrap();
    assert_eq!(c.shape(), &[3, 1, 2]);
    assert_eq!(c.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
    assert!(Tensor::concat_channels(&[&a, &Tensor::zeros(&[1, 2, 1])]).is_err());
}
