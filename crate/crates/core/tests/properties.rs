//! Property tests for the numeric invariants the library promises.

use proptest::prelude::*;

use mct_core::graph::Graph;
use mct_core::maps::{refine, LocalizationMaps, MapKind, PatchAffinity};
use mct_core::mct1;
use mct_core::tensor::{self, Tensor};

fn finite_vec(len: usize, mag: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-mag..mag, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_rows_sum_to_one(data in finite_vec(24, 50.0)) {
        let x = Tensor::new(vec![4, 6], data).unwrap();
        let s = tensor::softmax_rows(&x).unwrap();
        for r in 0..4 {
            let sum: f64 = s.data()[r * 6..(r + 1) * 6].iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(s.data()[r * 6..(r + 1) * 6].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gwrp_bounded_by_column_extremes_and_monotone_in_lambda(
        data in finite_vec(12, 10.0),
        lambdas in proptest::collection::vec(0.0f64..=1.0, 2),
    ) {
        let p = Tensor::new(vec![12, 1], data.clone()).unwrap();
        let mn = data.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let g = Graph::new();
        let v = g.leaf(p);
        let mut ls = lambdas.clone();
        ls.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = g.value(g.gwrp_cols(v, ls[0]).unwrap()).item();
        let hi = g.value(g.gwrp_cols(v, ls[1]).unwrap()).item();
        // bounds
        prop_assert!(lo >= mn - 1e-9 && lo <= mx + 1e-9);
        prop_assert!(hi >= mn - 1e-9 && hi <= mx + 1e-9);
        // monotone non-increasing in lambda
        prop_assert!(lo >= hi - 1e-9, "gwrp({}) = {lo} < gwrp({}) = {hi}", ls[0], ls[1]);
    }

    #[test]
    fn refine_with_row_stochastic_affinity_is_a_convex_combination(
        map in finite_vec(16, 1.0),
        aff_raw in proptest::collection::vec(0.0f64..1.0, 256),
        iterations in 1usize..3,
    ) {
        let map: Vec<f64> = map.into_iter().map(|v| v.abs()).collect();
        let mn = map.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        // row-normalize the random affinity
        let mut aff = aff_raw;
        for r in 0..16 {
            let s: f64 = aff[r * 16..(r + 1) * 16].iter().sum();
            if s == 0.0 {
                aff[r * 16 + r] = 1.0;
            } else {
                for v in &mut aff[r * 16..(r + 1) * 16] {
                    *v /= s;
                }
            }
        }
        let maps = LocalizationMaps {
            maps: Tensor::new(vec![1, 4, 4], map).unwrap(),
            kind: MapKind::MctAttention,
            class_filter: vec![true],
        };
        let refined = refine(
            &maps,
            &PatchAffinity { a: Tensor::new(vec![16, 16], aff).unwrap() },
            iterations,
        )
        .unwrap();
        for &v in refined.maps.data() {
            prop_assert!(v >= mn - 1e-9 && v <= mx + 1e-9, "{v} outside [{mn},{mx}]");
        }
    }

    #[test]
    fn mct1_roundtrip_preserves_f32_values(
        dims in proptest::collection::vec(1usize..5, 1..4),
        seedv in any::<u32>(),
    ) {
        let n: usize = dims.iter().product();
        let t = Tensor::from_fn(&dims, |i| (i as f64 + seedv as f64 % 97.0) * 0.5 - 3.0);
        let mut buf = Vec::new();
        mct1::write_to(&mut buf, &t).unwrap();
        let back = mct1::read_from(&mut &buf[..]).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert!((a - b).abs() <= (b.abs() * 1e-7).max(1e-7));
        }
        let _ = n;
    }

    #[test]
    fn matmul_identity_is_exact_for_integer_tensors(
        rows in 1usize..6,
        cols in 1usize..6,
        seedv in any::<u32>(),
    ) {
        let a = Tensor::from_fn(&[rows, cols], |i| ((i as u32).wrapping_mul(seedv) % 17) as f64 - 8.0);
        let eye = Tensor::from_fn(&[cols, cols], |i| if i / cols == i % cols { 1.0 } else { 0.0 });
        let c = tensor::matmul(&a, &eye).unwrap();
        prop_assert_eq!(c.data(), a.data());
    }
}
