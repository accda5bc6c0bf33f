use std::fs;

use gantruth_core::dataset::{
    decode_disparity, encode_disparity, read_disparity_png, write_dataset, write_disparity_png, Dataset, Domain,
    Domains, RleMask,
};
use gantruth_core::scene::{
    domain_gap, generate_scene, render_source, DisparityMap, SceneConfig, SceneSpec, TargetStyle, DOMAIN_GAP_FLOOR,
};
use proptest::prelude::*;

fn specs(seeds: std::ops::Range<u64>) -> Vec<SceneSpec> {
    seeds.map(|s| generate_scene(s, &SceneConfig::default()).unwrap()).collect()
}

fn count(dir: &std::path::Path, suffix: &str) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(suffix)).count()
}

#[test]
fn both_domains_write_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("d");
    let ds = write_dataset(&root, &specs(0..10), Domains::Both, &SceneConfig::default(), &TargetStyle::default()).unwrap();
    assert_eq!(ds.len(), 10);
    assert_eq!(count(&root.join("source"), ".png"), 10);
    assert_eq!(count(&root.join("target"), ".png"), 10);
    assert_eq!(count(&root.join("gt"), ".semantic.png"), 10);
    assert_eq!(count(&root.join("gt"), ".disparity.png"), 10);
    assert_eq!(count(&root.join("gt"), ".instances.json"), 10);
    let seeds: Vec<u64> = ds.manifest().samples.iter().map(|s| s.seed).collect();
    assert_eq!(seeds, (0..10).collect::<Vec<_>>());
}

#[test]
fn stored_ground_truth_matches_the_render() {
    let dir = tempfile::tempdir().unwrap();
    let sp = specs(20..24);
    let ds = write_dataset(dir.path(), &sp, Domains::Source, &SceneConfig::default(), &TargetStyle::default()).unwrap();
    for (spec, id) in sp.iter().zip(ds.ids()) {
        let (img, gt) = render_source(spec);
        assert_eq!(ds.read_image(Domain::Source, id).unwrap(), img);
        let back = ds.read_gt(id).unwrap();
        assert_eq!(back.semantic, gt.semantic);
        assert_eq!(back.instances, gt.instances);
        for (a, b) in back.disparity.data.iter().zip(&gt.disparity.data) {
            assert!((a - b).abs() <= 1.0 / 256.0);
        }
    }
    assert!(ds.read_image(Domain::Target, "000000").is_err());
}

#[test]
fn empty_dataset_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let ds = write_dataset(dir.path(), &[], Domains::Both, &SceneConfig::default(), &TargetStyle::default()).unwrap();
    assert!(ds.is_empty());
    assert_eq!(Dataset::open(dir.path()).unwrap().len(), 0);
}

#[test]
fn writes_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let sp = specs(5..9);
    let a = write_dataset(&dir.path().join("a"), &sp, Domains::Both, &SceneConfig::default(), &TargetStyle::default()).unwrap();
    let b = write_dataset(&dir.path().join("b"), &sp, Domains::Both, &SceneConfig::default(), &TargetStyle::default()).unwrap();
    assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
}

#[test]
fn interrupted_write_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &specs(0..2), Domains::Source, &SceneConfig::default(), &TargetStyle::default()).unwrap();
    fs::write(dir.path().join(".incomplete"), b"").unwrap();
    assert!(Dataset::open(dir.path()).is_err());
}

#[test]
fn refuses_non_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("junk"), b"x").unwrap();
    assert!(write_dataset(dir.path(), &specs(0..1), Domains::Source, &SceneConfig::default(), &TargetStyle::default()).is_err());
}

#[test]
fn domain_gap_clears_the_floor() {
    let sp = specs(300..400);
    let gap = domain_gap(&sp, &TargetStyle::default());
    assert!(gap > DOMAIN_GAP_FLOOR, "gap {gap}");
}

proptest! {
    #[test]
    fn disparity_codec_error_is_bounded(d in 0.0f32..255.0) {
        prop_assert!((decode_disparity(encode_disparity(d)) - d).abs() <= 1.0 / 256.0);
    }

    #[test]
    fn disparity_png_round_trips(values in prop::collection::vec(0.0f32..200.0, 12)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let map = DisparityMap { height: 3, width: 4, data: values.clone() };
        write_disparity_png(&path, &map).unwrap();
        let back = read_disparity_png(&path).unwrap();
        for (a, b) in back.data.iter().zip(&values) {
            prop_assert!((a - b).abs() <= 1.0 / 256.0);
        }
    }

    #[test]
    fn rle_round_trips(mask in prop::collection::vec(any::<bool>(), 1..200)) {
        let n = mask.len();
        let rle = RleMask::encode(&mask, 1, n);
        prop_assert_eq!(rle.decode().unwrap(), mask);
    }
}
