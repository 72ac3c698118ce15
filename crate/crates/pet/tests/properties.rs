//! Property tests for the structural invariants: window partition round
//! trips, quadtree leaf accounting, assignment optimality, metric symmetry,
//! and manifest round trips.

use proptest::prelude::*;

use pet::attention::WindowPartition;
use pet::config::QuadtreeConfig;
use pet::loss::{assign, assignment_cost, CostMatrix};
use pet::metrics;
use pet::numerics::{Graph, Tensor};
use pet::quadtree::{PointQueryTree, SplitMap};
use pet::selftest::{brute_force_max_matches, brute_force_min_cost};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_round_trip_is_bit_exact(
        h in 1usize..20,
        w in 1usize..20,
        wh in 1usize..8,
        ww in 1usize..8,
        salt in 0u64..1000,
    ) {
        let c = 3usize;
        let data: Vec<f64> = (0..h * w * c)
            .map(|i| ((i as f64 + salt as f64) * 0.7311).sin() * 1e6)
            .collect();
        let x = Tensor::new(vec![h * w, c], data).unwrap();
        let p = WindowPartition::build(h, w, wh, ww).unwrap();
        let back = p.restore(&p.apply(&x).unwrap()).unwrap();
        prop_assert_eq!(back.data(), x.data());

        // every real token in exactly one window
        let mut seen = vec![0usize; h * w];
        for win in 0..p.n_windows() {
            for slot in p.window_slots(win) {
                if let Some(t) = slot {
                    seen[*t] += 1;
                }
            }
        }
        prop_assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn leaf_count_formula_holds(pattern in proptest::collection::vec(any::<bool>(), 64)) {
        let cfg = QuadtreeConfig { stride: 8, max_splits: 1, split_threshold: 0.5 };
        let probs: Vec<f64> = pattern.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect();
        let d = pattern.iter().filter(|b| **b).count();
        let map = SplitMap::new(8, 8, probs).unwrap();
        let mut t = PointQueryTree::seed(64, 64, 8).unwrap();
        t.split(&map, &cfg).unwrap();
        prop_assert_eq!(t.leaf_count(), 64 + 3 * d);
    }

    #[test]
    fn splitting_is_monotone(
        pattern in proptest::collection::vec(any::<bool>(), 16),
        raise in 0usize..16,
    ) {
        // raising one cell never removes leaves from other cells
        let cfg = QuadtreeConfig { stride: 8, max_splits: 1, split_threshold: 0.5 };
        let probs: Vec<f64> = pattern.iter().map(|&b| if b { 0.8 } else { 0.2 }).collect();
        let mut raised = probs.clone();
        raised[raise] = 1.0;

        let mut base = PointQueryTree::seed(32, 32, 8).unwrap();
        base.split(&SplitMap::new(4, 4, probs).unwrap(), &cfg).unwrap();
        let mut more = PointQueryTree::seed(32, 32, 8).unwrap();
        more.split(&SplitMap::new(4, 4, raised).unwrap(), &cfg).unwrap();

        let base_leaves: std::collections::HashSet<_> = base
            .leaves()
            .iter()
            .map(|l| (l.x.to_bits(), l.y.to_bits()))
            .collect();
        let more_leaves: std::collections::HashSet<_> = more
            .leaves()
            .iter()
            .map(|l| (l.x.to_bits(), l.y.to_bits()))
            .collect();
        // every base leaf outside the raised cell survives
        for l in base.leaves() {
            let cell = ((l.y / 8.0) as usize).min(3) * 4 + ((l.x / 8.0) as usize).min(3);
            if cell != raise {
                prop_assert!(more_leaves.contains(&(l.x.to_bits(), l.y.to_bits())));
            }
        }
        prop_assert!(more_leaves.len() >= base_leaves.len());
    }

    #[test]
    fn assignment_matches_brute_force(
        rows in 1usize..7,
        extra in 0usize..3,
        salt in 0u64..10_000,
    ) {
        let cols = rows;
        let rows = rows + extra;
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| (((i as u64 + 1) * (salt + 7)) % 1000) as f64 / 100.0 - 5.0)
            .collect();
        let cost = CostMatrix::new(rows, cols, data).unwrap();
        let a = assign(&cost).unwrap();
        // quantized costs here produce genuinely tied optima whose sums may
        // differ in the last ulp depending on which assignment was found
        let got = assignment_cost(&cost, &a);
        let want = brute_force_min_cost(&cost);
        prop_assert!((got - want).abs() < 1e-9, "{} vs {}", got, want);
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..6,
        salt in 0u64..1000,
    ) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((i as f64 + salt as f64) * 1.37).sin() * 50.0)
            .collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        let y = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let row = &g.value(y).data()[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn layernorm_rows_are_centered(
        rows in 1usize..5,
        cols in 2usize..8,
        salt in 0u64..1000,
    ) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((i as f64 * 0.91 + salt as f64) * 1.7).cos() * 30.0)
            .collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        let gain = g.leaf(Tensor::full(&[cols], 1.0)).unwrap();
        let bias = g.leaf(Tensor::zeros(&[cols])).unwrap();
        let y = g.layernorm(x, gain, bias, 1e-5).unwrap();
        for r in 0..rows {
            let row = &g.value(y).data()[r * cols..(r + 1) * cols];
            let mean: f64 = row.iter().sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn localization_matches_brute_force_and_order_invariance(
        pn in 0usize..5,
        gn in 0usize..5,
        salt in 0u64..10_000,
    ) {
        let coord = |i: u64| (((i * 2654435761) % 640) as f64) / 10.0;
        let preds: Vec<(f64, f64)> =
            (0..pn as u64).map(|i| (coord(i * 2 + salt), coord(i * 2 + 1 + salt))).collect();
        let gts: Vec<(f64, f64)> =
            (0..gn as u64).map(|i| (coord(i * 3 + salt + 99), coord(i * 3 + 1 + salt + 99))).collect();
        let sigma = 6.0;
        let (tp, fp, fneg) = metrics::match_within(&preds, &gts, sigma);
        prop_assert_eq!(tp, brute_force_max_matches(&preds, &gts, sigma));
        prop_assert_eq!(fp, preds.len() - tp);
        prop_assert_eq!(fneg, gts.len() - tp);

        // reversing inputs must not change the counts
        let mut rp = preds.clone();
        rp.reverse();
        let mut rg = gts.clone();
        rg.reverse();
        let (tp2, ..) = metrics::match_within(&rp, &rg, sigma);
        prop_assert_eq!(tp, tp2);

        // swapping roles swaps fp and fn
        let (tp3, fp3, fn3) = metrics::match_within(&gts, &preds, sigma);
        prop_assert_eq!(tp, tp3);
        prop_assert_eq!(fp, fn3);
        prop_assert_eq!(fneg, fp3);
    }
}

#[test]
fn manifest_round_trip_many_scenes() {
    // 100 scenes, save -> load -> save byte-identical
    let dir = tempfile::tempdir().unwrap();
    let scenes: Vec<pet::data::Scene> = (0..100)
        .map(|i| {
            let mut image = image::RgbImage::new(24, 24);
            for (pi, p) in image.pixels_mut().enumerate() {
                p.0 = [((pi + i) % 251) as u8, (pi % 13) as u8, 99];
            }
            pet::data::Scene {
                id: format!("rt{i:03}"),
                image,
                points: vec![
                    ((i % 23) as f64 + 0.25, ((i * 3) % 21) as f64),
                    ((i % 7) as f64, (i % 11) as f64 + 0.5),
                ],
                region: None,
            }
        })
        .collect();
    let manifest = pet::data::save_dataset(dir.path(), &scenes).unwrap();
    let first = std::fs::read(&manifest).unwrap();
    let loaded = pet::data::load_dataset(&manifest).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let manifest2 = pet::data::save_dataset(dir2.path(), &loaded).unwrap();
    let second = std::fs::read(&manifest2).unwrap();
    assert_eq!(first, second);
}
