use msattn::data::{oversample_weights, shift_image};
use msattn::fusion::{inv_sigmoid, sigmoid};
use msattn::metrics::confusion;
use msattn::proposals::{extract_proposals, region_count};
use msattn::tensor::{Graph, Tensor};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn proposal_count_matches_grid(n in 1usize..20, w in 1usize..20) {
        prop_assume!(w <= n);
        let image = Tensor::<f32>::from_fn(vec![2, n, n], |i| i as f32);
        let grid = extract_proposals(&image, w).unwrap();
        prop_assert_eq!(grid.len(), (n - w + 1).pow(2));
        prop_assert_eq!(region_count(n, w).unwrap(), grid.len());
    }

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::detached();
        let x = g.input(Tensor::new(vec![3, 4], values).unwrap());
        for axis in 0..2 {
            let s = g.softmax(x, axis).unwrap();
            let total = g.sum_axis(s, axis).unwrap();
            for v in g.value(total) {
                prop_assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inverse_sigmoid_round_trip(p in 0.001f64..0.999) {
        prop_assert!((sigmoid(inv_sigmoid(p, 1e-12)) - p).abs() < 1e-9);
    }

    #[test]
    fn oversampling_weights_are_a_distribution(counts in prop::collection::vec(1usize..500, 1..12)) {
        let w = oversample_weights(&counts).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mass: Vec<f64> = w.iter().zip(&counts).map(|(p, &c)| p * c as f64).collect();
        for m in &mass {
            prop_assert!((m - mass[0]).abs() < 1e-9 * mass[0].max(1.0));
        }
    }

    #[test]
    fn shift_there_and_back_keeps_the_interior(dy in -3i64..=3, dx in -3i64..=3) {
        let image = Tensor::<f32>::from_fn(vec![1, 10, 10], |i| 1.0 + i as f32);
        let back = shift_image(&shift_image(&image, dy, dx), -dy, -dx);
        for y in 3..7 {
            for x in 3..7 {
                prop_assert_eq!(back.data()[y * 10 + x], image.data()[y * 10 + x]);
            }
        }
    }

    #[test]
    fn kappa_and_accuracy_are_bounded(pairs in prop::collection::vec((0usize..4, 0usize..4), 8..60)) {
        let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let cm = confusion(&preds, &labels, 4).unwrap();
        if let Ok(acc) = cm.normalized_accuracy() {
            prop_assert!((0.0..=1.0).contains(&acc));
        }
        if let Ok(k) = cm.kappa() {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
        }
        let perfect = confusion(&labels, &labels, 4).unwrap();
        if let Ok(k) = perfect.kappa() {
            prop_assert!((k - 1.0).abs() < 1e-12);
        }
    }
}
