use gantruth_core::dataset::{write_dataset, Domains};
use gantruth_core::eval::*;
use gantruth_core::labels::LabelMapping;
use gantruth_core::scene::{generate_scene, SceneConfig, TargetStyle};
use proptest::prelude::*;

fn labels(k: u32, n: usize) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0..k, n)
}

#[test]
fn all_ignored_leaves_matrix_empty_and_miou_undefined() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[0, 1, 2], &[9, 9, 9], 9).unwrap();
    assert_eq!(cm.total(), 0);
    assert_eq!(miou(&cm), None);
}

#[test]
fn out_of_range_ids_are_rejected() {
    let mut cm = ConfusionMatrix::new(2);
    assert!(cm.accumulate(&[0, 2], &[0, 1], 255).is_err());
    assert!(cm.accumulate(&[0], &[0, 1], 255).is_err());
}

#[test]
fn absent_class_is_left_out_of_the_mean() {
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&[0, 1, 1], &[0, 1, 0], 255).unwrap();
    let iou = cm.class_iou();
    assert_eq!(iou[2], None);
    assert!((miou(&cm).unwrap() - (0.5 + 0.5) / 2.0).abs() < 1e-12);
}

#[test]
fn abs_rel_errors_and_zero_case() {
    let gt = [2.0, 4.0, 8.0];
    let ok = [true; 3];
    assert_eq!(scale_aligned_abs_rel(&gt, &gt, &ok, Alignment::Median).unwrap(), 0.0);
    assert!(scale_aligned_abs_rel(&gt, &gt, &[false; 3], Alignment::Median).is_err());
    assert!(scale_aligned_abs_rel(&[1.0, 0.0, 1.0], &gt, &ok, Alignment::Median).is_err());
    // A bad prediction outside the mask is fine.
    assert!(scale_aligned_abs_rel(&[1.0, 0.0, 1.0], &gt, &[true, false, true], Alignment::Median).is_ok());
}

#[test]
fn stored_maps_against_themselves_are_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let specs: Vec<_> = (0..6).map(|s| generate_scene(s, &SceneConfig::default()).unwrap()).collect();
    let ds = write_dataset(dir.path(), &specs, Domains::Target, &SceneConfig::default(), &TargetStyle::default()).unwrap();
    let seg = evaluate_label_maps(&ds, &ds, &LabelMapping::toy()).unwrap();
    assert_eq!(seg.miou, Some(1.0));
    let depth = evaluate_depth(&ds, &ds, Alignment::Median, 80.0).unwrap();
    assert_eq!(depth.abs_rel, 0.0);
    assert!(depth.evaluated_pixels > 0);
}

proptest! {
    #[test]
    fn concatenation_sums_matrices(a in labels(4, 30), b in labels(4, 30), c in labels(4, 30), d in labels(4, 30)) {
        let mut whole = ConfusionMatrix::new(4);
        let pred: Vec<u32> = a.iter().chain(&c).copied().collect();
        let truth: Vec<u32> = b.iter().chain(&d).copied().collect();
        whole.accumulate(&pred, &truth, 3).unwrap();
        let mut p1 = ConfusionMatrix::new(4);
        p1.accumulate(&a, &b, 3).unwrap();
        let mut p2 = ConfusionMatrix::new(4);
        p2.accumulate(&c, &d, 3).unwrap();
        p1.merge(&p2).unwrap();
        prop_assert_eq!(p1, whole);
    }

    #[test]
    fn miou_is_permutation_equivariant(p in labels(4, 40), t in labels(4, 40), perm in Just([0u32, 1, 2, 3]).prop_shuffle()) {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&p, &t, 255).unwrap();
        let mut pm = ConfusionMatrix::new(4);
        let pp: Vec<u32> = p.iter().map(|&x| perm[x as usize]).collect();
        let tp: Vec<u32> = t.iter().map(|&x| perm[x as usize]).collect();
        pm.accumulate(&pp, &tp, 255).unwrap();
        let a = cm.class_iou();
        let b = pm.class_iou();
        for c in 0..4 {
            prop_assert_eq!(a[c], b[perm[c] as usize]);
        }
    }

    #[test]
    fn least_squares_alignment_is_scale_invariant(
        pairs in prop::collection::vec((0.1f64..10.0, 0.1f64..10.0), 1..30),
        k in prop::sample::select(vec![0.25f64, 0.5, 2.0, 4.0, 8.0]),
    ) {
        let (pred, gt): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let valid = vec![true; gt.len()];
        let scaled: Vec<f64> = pred.iter().map(|p| p * k).collect();
        let a = scale_aligned_abs_rel(&pred, &gt, &valid, Alignment::LeastSquares).unwrap();
        let b = scale_aligned_abs_rel(&scaled, &gt, &valid, Alignment::LeastSquares).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }
}
