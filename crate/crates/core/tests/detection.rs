use proptest::prelude::*;
use spcnn_core::data::make_soft_labels;
use spcnn_core::detect::{
    detect, evaluate, f1_score, match_golden, pr_sweep, threshold_grid, Averaging, Detection, SweepOptions,
};
use spcnn_core::Image;

fn dets(points: &[(usize, usize)]) -> Vec<Detection> {
    points.iter().map(|&(row, col)| Detection { row, col, score: 1.0 }).collect()
}

struct Scenario {
    name: &'static str,
    dets: Vec<(usize, usize)>,
    gt: Vec<(usize, usize)>,
    counts: (usize, usize, usize),
    prf: (f64, f64, f64),
}

fn scenarios() -> Vec<Scenario> {
    vec![
        Scenario { name: "perfect", dets: vec![(10, 10), (40, 40)], gt: vec![(10, 10), (40, 40)], counts: (2, 0, 0), prf: (1.0, 1.0, 1.0) },
        Scenario { name: "nothing", dets: vec![], gt: vec![], counts: (0, 0, 0), prf: (0.0, 0.0, 0.0) },
        Scenario { name: "no detections", dets: vec![], gt: vec![(5, 5), (20, 20)], counts: (0, 0, 2), prf: (0.0, 0.0, 0.0) },
        Scenario { name: "no ground truth", dets: vec![(5, 5)], gt: vec![], counts: (0, 1, 0), prf: (0.0, 0.0, 0.0) },
        Scenario { name: "two near one", dets: vec![(10, 12), (10, 14)], gt: vec![(10, 10)], counts: (1, 1, 0), prf: (0.5, 1.0, 2.0 / 3.0) },
        Scenario { name: "on the radius", dets: vec![(16, 10)], gt: vec![(10, 10)], counts: (1, 0, 0), prf: (1.0, 1.0, 1.0) },
        Scenario { name: "just outside", dets: vec![(15, 15)], gt: vec![(10, 10)], counts: (0, 1, 1), prf: (0.0, 0.0, 0.0) },
        Scenario {
            name: "mixed",
            dets: vec![(10, 10), (30, 33), (60, 60), (80, 5)],
            gt: vec![(11, 11), (30, 30), (50, 50)],
            counts: (2, 2, 1),
            prf: (0.5, 2.0 / 3.0, 4.0 / 7.0),
        },
        Scenario {
            name: "contested",
            // greedy takes the closest pair first; the second detection then
            // finds its own centre
            dets: vec![(20, 21), (20, 26)],
            gt: vec![(20, 20), (20, 28)],
            counts: (2, 0, 0),
            prf: (1.0, 1.0, 1.0),
        },
        Scenario {
            name: "duplicates",
            dets: vec![(7, 7), (7, 7), (7, 7)],
            gt: vec![(7, 7), (40, 7)],
            counts: (1, 2, 1),
            prf: (1.0 / 3.0, 0.5, 0.4),
        },
    ]
}

#[test]
fn hand_computed_scenarios() {
    for s in scenarios() {
        let r = evaluate(&dets(&s.dets), &s.gt, 6.0, 0.3).unwrap();
        assert_eq!((r.tp, r.fp, r.false_negatives), s.counts, "{}", s.name);
        assert_eq!((r.precision, r.recall, r.f1), s.prf, "{}", s.name);
        assert_eq!(r.tp + r.false_negatives, s.gt.len());
        assert_eq!(r.tp + r.fp, s.dets.len());
    }
}

#[test]
fn f1_is_the_harmonic_mean_of_precision_and_recall() {
    assert!((f1_score(0.803, 0.843) - 0.823).abs() <= 0.0005);
}

/// Largest number of disjoint within-radius pairs, by exhaustive search.
fn optimal_matches(d: &[(usize, usize)], g: &[(usize, usize)], radius: f64, used: &mut Vec<bool>) -> usize {
    let Some((&first, rest)) = d.split_first() else {
        return 0;
    };
    let mut best = optimal_matches(rest, g, radius, used);
    for (k, &c) in g.iter().enumerate() {
        let dist = ((first.0 as f64 - c.0 as f64).powi(2) + (first.1 as f64 - c.1 as f64).powi(2)).sqrt();
        if !used[k] && dist <= radius {
            used[k] = true;
            best = best.max(1 + optimal_matches(rest, g, radius, used));
            used[k] = false;
        }
    }
    best
}

fn points(max: usize, coord: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
    prop::collection::vec((0..coord, 0..coord), 0..=max)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn greedy_is_within_half_of_optimal(d in points(6, 24), g in points(6, 24)) {
        let m = match_golden(&d, &g, 6.0).unwrap();
        let best = optimal_matches(&d, &g, 6.0, &mut vec![false; g.len()]);
        prop_assert!(m.tp <= best);
        prop_assert!(2 * m.tp >= best);
        prop_assert_eq!(m.tp + m.fp, d.len());
        prop_assert_eq!(m.tp + m.false_negatives, g.len());
    }

    #[test]
    fn greedy_is_optimal_for_separated_centres(d in points(6, 64), cells in prop::collection::btree_set((0usize..5, 0usize..5), 0..=6)) {
        // centres at least 13 px apart: no detection can reach two of them
        let g: Vec<_> = cells.into_iter().map(|(a, b)| (a * 13, b * 13)).collect();
        let m = match_golden(&d, &g, 6.0).unwrap();
        prop_assert_eq!(m.tp, optimal_matches(&d, &g, 6.0, &mut vec![false; g.len()]));
    }

    #[test]
    fn detections_are_thresholded_local_maxima(data in prop::collection::vec(0.0f64..1.0, 24 * 24), t in 0.0f64..1.0, r in 1usize..4) {
        let map = Image::from_vec(24, 24, data).unwrap();
        let found = detect(&map, t, r);
        for d in &found {
            prop_assert!(d.score >= t);
            prop_assert_eq!(d.score, map.get(d.row, d.col));
            for i in d.row.saturating_sub(r)..=(d.row + r).min(23) {
                for j in d.col.saturating_sub(r)..=(d.col + r).min(23) {
                    prop_assert!(map.get(i, j) <= d.score);
                }
            }
        }
        for pair in found.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            prop_assert!((a.row, a.col) < (b.row, b.col));
            prop_assert!(a.row.abs_diff(b.row) > r || a.col.abs_diff(b.col) > r);
        }
    }
}

#[test]
fn stamps_nine_pixels_apart_give_two_detections() {
    let map = make_soft_labels(&[(20, 20), (20, 29)], 48, 48).unwrap();
    let found = detect(&map, 0.3, 3);
    let at: Vec<_> = found.iter().map(|d| (d.row, d.col)).collect();
    assert_eq!(at, vec![(20, 20), (20, 29)]);
}

#[test]
fn single_stamp_single_detection() {
    let map = make_soft_labels(&[(12, 17)], 32, 32).unwrap();
    let found = detect(&map, 0.3, 3);
    assert_eq!(found.len(), 1);
    assert_eq!((found[0].row, found[0].col, found[0].score), (12, 17, 1.0));
}

#[test]
fn sweep_counts_are_monotone_and_consistent() {
    let centers = [(10, 10), (10, 30), (30, 12), (34, 40), (50, 50)];
    let mut maps = Vec::new();
    let mut gt = Vec::new();
    for k in 0..4 {
        let mut m = make_soft_labels(&centers[k..], 64, 64).unwrap();
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = (*v * (0.5 + 0.1 * k as f64) + 0.2 * ((i * 7919 % 97) as f64 / 97.0)).min(1.0);
        }
        maps.push(m);
        gt.push(centers[..4 - k / 2].to_vec());
    }
    let grid = threshold_grid(0.05, 0.95, 0.05);
    assert_eq!(grid.len(), 19);
    for averaging in [Averaging::Micro, Averaging::Macro] {
        let opts = SweepOptions { averaging, ..SweepOptions::default() };
        let curve = pr_sweep(&maps, &gt, &grid, &opts).unwrap();
        let total_gt: usize = gt.iter().map(Vec::len).sum();
        for row in &curve.rows {
            assert_eq!(row.tp + row.false_negatives, total_gt);
        }
        for w in curve.rows.windows(2) {
            assert!(w[1].tp + w[1].fp <= w[0].tp + w[0].fp);
        }
    }
    assert!(pr_sweep(&maps, &gt, &[0.5, 0.2], &SweepOptions::default()).is_err());
    assert!(pr_sweep(&maps[..1], &gt, &grid, &SweepOptions::default()).is_err());
}
