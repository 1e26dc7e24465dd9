mod common;

use common::to_matrix;
use proptest::prelude::*;
use scan_core::attention::{score_pair, Direction, Pooling, ScanConfig};
use scan_core::eval::{ensemble_grids, recall_at_k, EvalReport, RetrievalDirection, ScoreGrid};
use scan_core::Matrix;

fn rows(max_rows: usize, width: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, width), 1..=max_rows)
}

fn pair() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (4usize..=12).prop_flat_map(|h| (rows(6, h), rows(8, h)))
}

fn direction() -> impl Strategy<Value = Direction> {
    prop_oneof![Just(Direction::ImageText), Just(Direction::TextImage)]
}

fn pooling() -> impl Strategy<Value = Pooling> {
    prop_oneof![Just(Pooling::Lse), Just(Pooling::Avg), Just(Pooling::Sum), Just(Pooling::Max)]
}

fn score(v: &[Vec<f64>], e: &[Vec<f64>], cfg: &ScanConfig) -> f64 {
    score_pair(&to_matrix(v), &to_matrix(e), cfg).unwrap().score
}

fn grid() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..=8, 1usize..=3).prop_flat_map(|(m, per)| {
        let truth: Vec<usize> = (0..m * per).map(|j| j / per).collect();
        (prop::collection::vec(prop::collection::vec(-1.0f64..1.0, m * per), m), Just(truth))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn permuting_rows_keeps_the_score(
        (v, e) in pair(), d in direction(), p in pooling(), l1 in 1.0f64..15.0, l2 in 1.0f64..15.0,
        rot_v in 0usize..6, rot_e in 0usize..8,
    ) {
        let cfg = ScanConfig::new(d, p, l1, l2);
        let mut pv = v.clone();
        pv.rotate_left(rot_v % v.len());
        pv.reverse();
        let mut pe = e.clone();
        pe.rotate_left(rot_e % e.len());
        let a = score(&v, &e, &cfg);
        let b = score(&pv, &pe, &cfg);
        prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }

    #[test]
    fn anchor_scaling_is_absorbed(
        (v, e) in pair(), p in pooling(), l1 in 1.0f64..15.0, scales in prop::collection::vec(0.1f64..10.0, 8),
    ) {
        let it = ScanConfig::new(Direction::ImageText, p, l1, 5.0);
        let sv: Vec<Vec<f64>> = v.iter().zip(&scales).map(|(r, c)| r.iter().map(|x| x * c).collect()).collect();
        prop_assert!((score(&v, &e, &it) - score(&sv, &e, &it)).abs() <= 1e-9);

        let ti = ScanConfig::new(Direction::TextImage, p, l1, 5.0);
        let se: Vec<Vec<f64>> = e.iter().zip(&scales).map(|(r, c)| r.iter().map(|x| x * c).collect()).collect();
        prop_assert!((score(&v, &e, &ti) - score(&v, &se, &ti)).abs() <= 1e-9);
    }

    #[test]
    fn uniform_scaling_of_attended_side((v, e) in pair(), p in pooling(), c in 0.1f64..10.0) {
        let cfg = ScanConfig::new(Direction::ImageText, p, 4.0, 5.0);
        let se: Vec<Vec<f64>> = e.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        prop_assert!((score(&v, &e, &cfg) - score(&v, &se, &cfg)).abs() <= 1e-9);
    }

    #[test]
    fn trace_ranges((v, e) in pair(), d in direction(), l1 in 1.0f64..15.0, l2 in 1.0f64..15.0) {
        let (vm, em) = (to_matrix(&v), to_matrix(&e));
        for p in [Pooling::Avg, Pooling::Max, Pooling::Lse] {
            let t = score_pair(&vm, &em, &ScanConfig::new(d, p, l1, l2)).unwrap();
            prop_assert!(t.sim.data().iter().all(|s| (-1.0 - 1e-12..=1.0 + 1e-12).contains(s)));
            prop_assert!(t.relevance.iter().all(|r| (-1.0 - 1e-12..=1.0 + 1e-12).contains(r)));
            let upper = if p == Pooling::Lse { 1.0 + (t.relevance.len() as f64).ln() / l2 } else { 1.0 };
            prop_assert!(t.score >= -1.0 - 1e-12 && t.score <= upper + 1e-12);
            let w = &t.weights;
            let slices: Vec<f64> = match d {
                Direction::ImageText => (0..w.rows()).map(|i| w.row(i).iter().sum()).collect(),
                Direction::TextImage => (0..w.cols()).map(|j| w.col(j).iter().sum()).collect(),
            };
            prop_assert!(slices.iter().all(|s| (s - 1.0).abs() <= 1e-9));
        }
    }

    #[test]
    fn lse_of_equal_values(r in -1.0f64..1.0, m in 1usize..20, l2 in 0.5f64..50.0) {
        let got = scan_core::attention::pool(&vec![r; m], Pooling::Lse, l2).unwrap();
        prop_assert!((got - (r + (m as f64).ln() / l2)).abs() <= 1e-12);
    }

    #[test]
    fn recall_is_monotone_and_bounded((scores, truth) in grid()) {
        let g = ScoreGrid::new(to_matrix(&scores), truth).unwrap();
        let r = EvalReport::compute(&g).unwrap();
        for d in [&r.sentence_retrieval, &r.image_retrieval] {
            prop_assert!(0.0 <= d.r1 && d.r1 <= d.r5 && d.r5 <= d.r10 && d.r10 <= 100.0);
        }
    }

    #[test]
    fn increasing_transforms_keep_recall((scores, truth) in grid(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let g = ScoreGrid::new(to_matrix(&scores), truth).unwrap();
        let t = g.map_scores(|x| a * x.powi(3) + b).unwrap();
        for dir in [RetrievalDirection::SentenceRetrieval, RetrievalDirection::ImageRetrieval] {
            for k in [1, 2, 5] {
                prop_assert_eq!(recall_at_k(&g, k, dir).unwrap(), recall_at_k(&t, k, dir).unwrap());
            }
        }
    }

    #[test]
    fn self_ensemble_keeps_recall((scores, truth) in grid()) {
        let g = ScoreGrid::new(to_matrix(&scores), truth).unwrap();
        let e = ensemble_grids(&[g.clone(), g.clone()]).unwrap();
        prop_assert_eq!(EvalReport::compute(&g).unwrap(), EvalReport::compute(&e).unwrap());
    }

    #[test]
    fn permuting_images_permutes_rows((scores, truth) in grid(), shift in 0usize..8) {
        let m = scores.len();
        let perm: Vec<usize> = (0..m).map(|i| (i + shift) % m).collect();
        let g = ScoreGrid::new(to_matrix(&scores), truth.clone()).unwrap();
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| scores[i].clone()).collect();
        let mut inverse = vec![0; m];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let pt: Vec<usize> = truth.iter().map(|&t| inverse[t]).collect();
        let h = ScoreGrid::new(Matrix::from_rows(&permuted).unwrap(), pt).unwrap();
        // Ties are measure-zero for random scores, so ranks do not depend on row order.
        prop_assert_eq!(EvalReport::compute(&g).unwrap(), EvalReport::compute(&h).unwrap());
    }
}
