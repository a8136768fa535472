use proptest::prelude::*;
use strokesyn_core::evaluation::{compute_eer, det_points, dtw_distance, verify_score, ScoreSet};
use strokesyn_core::ink::InkSequence;

fn ink(points: &[(f64, f64)]) -> InkSequence {
    InkSequence::from_points(points, "")
}

fn offsets(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    points.windows(2).map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1)).collect()
}

/// Every monotone path from (0, 0) to the far corner; the cheapest one,
/// shortest among equals, normalized by its length.
fn brute_force_dtw(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    fn walk(a: &[(f64, f64)], b: &[(f64, f64)], i: usize, j: usize, cost: f64, cells: u32, best: &mut (f64, u32)) {
        let (dx, dy) = (a[i].0 - b[j].0, a[i].1 - b[j].1);
        let cost = cost + (dx * dx + dy * dy).sqrt();
        let cells = cells + 1;
        if i + 1 == a.len() && j + 1 == b.len() {
            if cost < best.0 || (cost == best.0 && cells < best.1) {
                *best = (cost, cells);
            }
            return;
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, cost, cells, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, cost, cells, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, cost, cells, best);
        }
    }
    let mut best = (f64::INFINITY, 0);
    walk(a, b, 0, 0, 0.0, 0, &mut best);
    best.0 / f64::from(best.1)
}

fn points(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 2..max)
}

proptest! {
    #[test]
    fn dtw_matches_path_enumeration(a in points(7), b in points(7)) {
        let got = dtw_distance(&ink(&a), &ink(&b)).unwrap();
        let want = brute_force_dtw(&offsets(&a), &offsets(&b));
        prop_assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }

    #[test]
    fn dtw_is_a_symmetric_dissimilarity(a in points(30), b in points(30)) {
        let (x, y) = (ink(&a), ink(&b));
        let d = dtw_distance(&x, &y).unwrap();
        prop_assert!(d >= 0.0);
        prop_assert!((d - dtw_distance(&y, &x).unwrap()).abs() <= 1e-12);
        prop_assert_eq!(dtw_distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn dtw_ignores_translation(a in points(20), dx in -100.0..100.0f64) {
        let moved: Vec<(f64, f64)> = a.iter().map(|p| (p.0 + dx, p.1 - dx)).collect();
        prop_assert!(dtw_distance(&ink(&a), &ink(&moved)).unwrap() < 1e-9);
    }

    #[test]
    fn adding_enrolment_never_raises_the_score(e in prop::collection::vec(points(10), 1..4), extra in points(10), probe in points(10)) {
        let mut set: Vec<InkSequence> = e.iter().map(|p| ink(p)).collect();
        let before = verify_score(&set, &ink(&probe)).unwrap();
        set.push(ink(&extra));
        prop_assert!(verify_score(&set, &ink(&probe)).unwrap() <= before);
    }

    #[test]
    fn eer_depends_only_on_order(g in prop::collection::vec(0.0..10.0f64, 1..30), i in prop::collection::vec(0.0..10.0f64, 1..30)) {
        let s = ScoreSet { genuine: g.clone(), impostor: i.clone() };
        let warped = ScoreSet { genuine: g.iter().map(|x| x.powi(3) + 2.0).collect(), impostor: i.iter().map(|x| x.powi(3) + 2.0).collect() };
        let (a, b) = (compute_eer(&s).unwrap().0, compute_eer(&warped).unwrap().0);
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn det_points_match_direct_counts(g in prop::collection::vec(0u8..20, 1..25), i in prop::collection::vec(0u8..20, 1..25)) {
        let s = ScoreSet { genuine: g.iter().map(|&x| f64::from(x)).collect(), impostor: i.iter().map(|&x| f64::from(x)).collect() };
        let pts = det_points(&s).unwrap();
        let mut thresholds: Vec<f64> = s.genuine.iter().chain(&s.impostor).copied().collect();
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        prop_assert_eq!(pts.len(), thresholds.len() + 1);
        prop_assert_eq!(pts[0], (0.0, 1.0));
        prop_assert_eq!(*pts.last().unwrap(), (1.0, 0.0));
        for (t, p) in thresholds.iter().zip(&pts[1..]) {
            let far = s.impostor.iter().filter(|&&x| x <= *t).count() as f64 / s.impostor.len() as f64;
            let frr = s.genuine.iter().filter(|&&x| x > *t).count() as f64 / s.genuine.len() as f64;
            prop_assert_eq!(*p, (far, frr));
        }
        for w in pts.windows(2) {
            prop_assert!(w[1].0 >= w[0].0 && w[1].1 <= w[0].1);
        }
    }
}

#[test]
fn eer_extremes() {
    let sep = ScoreSet { genuine: vec![0.1, 0.2, 0.3], impostor: vec![0.5, 0.9] };
    assert_eq!(compute_eer(&sep).unwrap().0, 0.0);
    let same = ScoreSet { genuine: vec![0.4, 0.1, 0.7, 0.3], impostor: vec![0.3, 0.7, 0.4, 0.1] };
    assert_eq!(compute_eer(&same).unwrap().0, 0.5);
    let flipped = ScoreSet { genuine: vec![5.0, 6.0], impostor: vec![1.0, 2.0] };
    assert_eq!(compute_eer(&flipped).unwrap().0, 1.0);
    assert!(compute_eer(&ScoreSet { genuine: vec![], impostor: vec![1.0] }).is_err());
}

#[test]
fn short_inputs_are_rejected() {
    assert!(dtw_distance(&ink(&[(0.0, 0.0)]), &ink(&[(0.0, 0.0), (1.0, 1.0)])).is_err());
    assert!(verify_score(&[], &ink(&[(0.0, 0.0), (1.0, 1.0)])).is_err());
}
