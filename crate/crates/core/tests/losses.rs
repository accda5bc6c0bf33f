use gantruth_core::labels::LabelMap;
use gantruth_core::losses::*;
use gantruth_tensor::{Graph, Tensor};
use proptest::prelude::*;

fn probs(g: &mut Graph<f64>, vals: &[f64]) -> Vec<gantruth_tensor::Var> {
    vals.iter().map(|&v| g.constant(Tensor::full(&[1, 1, 2, 2], v))).collect()
}

#[test]
fn saturated_discriminator_outputs_stay_finite() {
    let mut g = Graph::new();
    let real = probs(&mut g, &[0.0, 1.0, 0.0]);
    let fake = probs(&mut g, &[1.0, 0.0, 1.0]);
    let d = gan_loss_discriminator(&mut g, &real, &fake).unwrap();
    let gl = gan_loss_generator(&mut g, &fake).unwrap();
    assert!(g.value(d).item().is_finite());
    assert!(g.value(gl).item().is_finite());
}

#[test]
fn mismatched_scale_counts_are_rejected() {
    let mut g = Graph::<f64>::new();
    let real = probs(&mut g, &[0.5, 0.5]);
    let fake = probs(&mut g, &[0.5]);
    assert!(gan_loss_discriminator(&mut g, &real, &fake).is_err());
    assert!(gan_loss_generator(&mut g, &[]).is_err());
}

#[test]
fn fully_ignored_semseg_is_flagged_and_zero() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| i as f64 * 0.1));
    let labels = [LabelMap::filled(2, 2, 255)];
    let out = gt_semseg_loss(&mut g, logits, &labels, 255).unwrap();
    assert!(out.all_ignored);
    assert_eq!(g.value(out.loss).item(), 0.0);
}

#[test]
fn semseg_rejects_labels_outside_taxonomy() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[1, 3, 1, 1]));
    assert!(gt_semseg_loss(&mut g, logits, &[LabelMap::filled(1, 1, 3)], 255).is_err());
}

#[test]
fn dropped_instances_add_nothing() {
    let (h, w) = (4, 4);
    let mut mask = vec![false; 16];
    mask[5] = true;
    let t = InstanceTarget { class: 1, bbox: [1, 1, 3, 3], height: h, width: w, mask: mask.clone() };
    let mut g = Graph::<f64>::new();
    let mk = |g: &mut Graph<f64>, s: f64| InstanceHeadOutput {
        class_logits: g.constant(Tensor::from_fn(&[1, 3, 1, 1], |i| s * i as f64)),
        bbox: g.constant(Tensor::full(&[1, 4, 1, 1], s)),
        mask_logits: g.constant(Tensor::from_fn(&[1, 1, h, w], |i| s - i as f64 * 0.1)),
    };
    let a = mk(&mut g, 0.3);
    let b = mk(&mut g, -2.0);
    let alone = gt_instance_loss(&mut g, &[a], &[t.clone()], &[true]).unwrap();
    let with_dropped = gt_instance_loss(&mut g, &[a, b], &[t.clone(), t.clone()], &[true, false]).unwrap();
    assert_eq!(g.value(alone).item(), g.value(with_dropped).item());
    let none = gt_instance_loss(&mut g, &[b], &[t], &[false]).unwrap();
    assert_eq!(g.value(none).item(), 0.0);
}

#[test]
fn weights_must_be_non_negative() {
    assert!(LossWeights { kl: -1.0, ..Default::default() }.validate().is_err());
    assert!(LossWeights { gan: f64::NAN, ..Default::default() }.validate().is_err());
    assert!(LossWeights::default().validate().is_ok());
}

proptest! {
    #[test]
    fn gan_losses_are_non_negative(r in prop::collection::vec(0.0f64..=1.0, 3), f in prop::collection::vec(0.0f64..=1.0, 3)) {
        let mut g = Graph::new();
        let real = probs(&mut g, &r);
        let fake = probs(&mut g, &f);
        let d = gan_loss_discriminator(&mut g, &real, &fake).unwrap();
        let gl = gan_loss_generator(&mut g, &fake).unwrap();
        prop_assert!(g.value(d).item() >= 0.0);
        prop_assert!(g.value(gl).item() >= 0.0);
    }

    #[test]
    fn kl_is_half_the_mean_squared_norm(vals in prop::collection::vec(-3.0f64..3.0, 8)) {
        let mut g = Graph::new();
        let m = g.constant(Tensor::new(vec![2, 1, 2, 2], vals.clone()).unwrap());
        let kl = kl_to_standard_normal(&mut g, m).unwrap();
        let expect = 0.5 * vals.iter().map(|v| v * v).sum::<f64>() / 2.0;
        prop_assert!((g.value(kl).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn scaled_disparity_matching_gt_costs_nothing(vals in prop::collection::vec(0.1f32..50.0, 6), c in 0.1f64..4.0) {
        let mut g = Graph::<f64>::new();
        let pred = g.constant(Tensor::from_fn(&[1, 1, 2, 3], |i| vals[i] as f64 / c));
        let t = DisparityTarget { height: 2, width: 3, values: vals.clone(), valid: vec![true; 6] };
        let l = gt_disparity_loss(&mut g, pred, &[t], c).unwrap();
        prop_assert!(g.value(l).item().abs() < 1e-5);
    }
}
