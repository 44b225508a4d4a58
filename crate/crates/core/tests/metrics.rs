mod common;

use common::*;
use hft::metrics::*;
use proptest::prelude::*;

const C: usize = 3;
const PLANE: usize = 64;

fn random_case(seed: u64) -> (Vec<f64>, Vec<bool>, Vec<bool>) {
    let scores: Vec<f64> = uniform_tensor(&[C * PLANE], 0.0, 1.0, seed)
        .data()
        .iter()
        .map(|v| (v * 20.0).round() / 20.0)
        .collect();
    let gt = random_bools(C * PLANE, 0.3, seed + 1000);
    let valid = random_bools(PLANE, 0.8, seed + 2000);
    (scores, gt, valid)
}

#[test]
fn iou_and_ap_match_scalar_oracles_exactly() {
    for seed in 0..50 {
        let (scores, gt, valid) = random_case(seed);
        let pred = binarize(&scores, 0.5);
        let iou = iou_per_class(&pred, &gt, &valid, C).unwrap();
        assert_eq!(iou, iou_oracle(&pred, &gt, &valid, C));
        let (ap, map) = average_precision(&scores, &gt, &valid, C).unwrap();
        let oracle = ap_oracle(&scores, &gt, &valid, C);
        assert_eq!(ap, oracle);
        assert_eq!(map, mean_defined_oracle(&oracle));
        let b = bamiou(&iou, &[0], &[1, 2], None).unwrap();
        let o = bamiou_oracle(&iou, &[0], &[1, 2]);
        assert_eq!((b.iou_st, b.iou_dy, b.bamiou), o);
    }
}

#[test]
fn constant_scores_give_prevalence_ap() {
    let valid = vec![true; 10];
    let mut gt = vec![false; 10];
    gt[2] = true;
    gt[7] = true;
    gt[9] = true;
    let (ap, _) = average_precision(&[0.7; 10], &gt, &valid, 1).unwrap();
    assert!((ap[0].unwrap() - 0.3).abs() < 1e-12);
}

#[test]
fn accumulator_matches_pooled_evaluation_and_is_order_independent() {
    let cases: Vec<_> = (0..4).map(|s| random_case(100 + s)).collect();
    let mut fwd = MetricAccumulator::new(C);
    for (s, g, v) in &cases {
        fwd.add(s, g, v).unwrap();
    }
    let mut rev = MetricAccumulator::new(C);
    for (s, g, v) in cases.iter().rev() {
        rev.add(s, g, v).unwrap();
    }
    let mut split_a = MetricAccumulator::new(C);
    let mut split_b = MetricAccumulator::new(C);
    for (i, (s, g, v)) in cases.iter().enumerate() {
        if i % 2 == 0 { &mut split_a } else { &mut split_b }.add(s, g, v).unwrap();
    }
    split_a.merge(split_b);
    let a = fwd.finish(&[0], &[1, 2]).unwrap();
    let b = rev.finish(&[0], &[1, 2]).unwrap();
    let c = split_a.finish(&[0], &[1, 2]).unwrap();
    assert_eq!(a.per_class_iou, b.per_class_iou);
    assert_eq!(a.per_class_iou, c.per_class_iou);
    assert_eq!(a.counts, c.counts);
    // AP pools cells; equal multisets give equal curves
    for ((x, y), z) in a.per_class_ap.iter().zip(&b.per_class_ap).zip(&c.per_class_ap) {
        assert!((x.unwrap() - y.unwrap()).abs() < 1e-12);
        assert!((x.unwrap() - z.unwrap()).abs() < 1e-12);
    }
}

#[test]
fn ground_truth_as_prediction_scores_one() {
    let (_, gt, valid) = random_case(7);
    let scores: Vec<f64> = gt.iter().map(|&g| if g { 1.0 } else { 0.0 }).collect();
    let mut acc = MetricAccumulator::new(C);
    acc.add(&scores, &gt, &valid).unwrap();
    let r = acc.finish(&[0], &[1, 2]).unwrap();
    assert_eq!(r.miou, Some(1.0));
    assert_eq!(r.map, Some(1.0));
    assert_eq!(r.bamiou, 2.0);
}

#[test]
fn zero_scores_give_zero_iou_for_nonempty_classes() {
    let (_, gt, valid) = random_case(8);
    let mut acc = MetricAccumulator::new(C);
    acc.add(&vec![0.0; C * PLANE], &gt, &valid).unwrap();
    let r = acc.finish(&[0], &[1, 2]).unwrap();
    assert!(r.per_class_iou.iter().all(|v| *v == Some(0.0)));
}

#[test]
fn report_json_field_names() {
    let (s, g, v) = random_case(3);
    let mut acc = MetricAccumulator::new(C);
    acc.add(&s, &g, &v).unwrap();
    let json: serde_json::Value = serde_json::from_str(&acc.finish(&[0], &[1, 2]).unwrap().to_json().unwrap()).unwrap();
    for key in ["per_class_iou", "miou", "per_class_ap", "map", "iou_st", "iou_dy", "bamiou", "counts"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert!(json["counts"][0].get("fn").is_some());
}

proptest! {
    #[test]
    fn class_permutation_permutes_outputs(seed in 0u64..10_000) {
        let (scores, gt, valid) = random_case(seed);
        let perm = [2usize, 0, 1];
        let permute = |x: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&c| x[c * PLANE..(c + 1) * PLANE].to_vec()).collect() };
        let permute_b = |x: &[bool]| -> Vec<bool> { perm.iter().flat_map(|&c| x[c * PLANE..(c + 1) * PLANE].to_vec()).collect() };
        let pred = binarize(&scores, 0.5);
        let iou = iou_per_class(&pred, &gt, &valid, C).unwrap();
        let iou_p = iou_per_class(&permute_b(&pred), &permute_b(&gt), &valid, C).unwrap();
        for (k, &c) in perm.iter().enumerate() {
            prop_assert_eq!(iou_p[k], iou[c]);
        }
        let (ap, _) = average_precision(&scores, &gt, &valid, C).unwrap();
        let (ap_p, _) = average_precision(&permute(&scores), &permute_b(&gt), &valid, C).unwrap();
        for (k, &c) in perm.iter().enumerate() {
            prop_assert_eq!(ap_p[k], ap[c]);
        }
        let m = mean_defined(&iou).unwrap_or(0.0);
        let mp = mean_defined(&iou_p).unwrap_or(0.0);
        prop_assert!((m - mp).abs() < 1e-12);
        // class 0 static stays static: it moved to position 1
        let b = bamiou(&iou, &[0], &[1, 2], None).unwrap();
        let bp = bamiou(&iou_p, &[1], &[0, 2], None).unwrap();
        prop_assert!((b.bamiou - bp.bamiou).abs() < 1e-12);
    }

    #[test]
    fn flips_outside_validity_change_nothing(seed in 0u64..10_000, flips in proptest::collection::vec(0usize..C * PLANE, 1..20)) {
        let (scores, gt, valid) = random_case(seed);
        let mut s2 = scores.clone();
        for &i in &flips {
            if !valid[i % PLANE] {
                s2[i] = 1.0 - s2[i];
            }
        }
        let iou = iou_per_class(&binarize(&scores, 0.5), &gt, &valid, C).unwrap();
        let iou2 = iou_per_class(&binarize(&s2, 0.5), &gt, &valid, C).unwrap();
        prop_assert_eq!(iou, iou2);
        prop_assert_eq!(
            average_precision(&scores, &gt, &valid, C).unwrap(),
            average_precision(&s2, &gt, &valid, C).unwrap()
        );
    }

    #[test]
    fn adding_a_correct_cell_never_lowers_iou(seed in 0u64..10_000, cell in 0usize..C * PLANE) {
        let (scores, gt, valid) = random_case(seed);
        let pred = binarize(&scores, 0.5);
        let before = iou_per_class(&pred, &gt, &valid, C).unwrap();
        let mut p2 = pred.clone();
        if gt[cell] {
            p2[cell] = true;
        }
        let after = iou_per_class(&p2, &gt, &valid, C).unwrap();
        let c = cell / PLANE;
        prop_assert!(after[c].unwrap_or(0.0) >= before[c].unwrap_or(0.0));
    }
}
