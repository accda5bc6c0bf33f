use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gantruth(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gantruth"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_data_is_reproducible_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let o = gantruth(&["generate-data", "--out", name, "--count", "10", "--seed", "0", "--domains", "both"], dir.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = tree(&dir.path().join("a"));
    assert_eq!(a, tree(&dir.path().join("b")));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"config.resolved.toml") && names.contains(&"VERSION"));
    assert_eq!(names.iter().filter(|n| n.starts_with("source/")).count(), 10);
    assert_eq!(names.iter().filter(|n| n.starts_with("target/")).count(), 10);
}

#[test]
fn zero_count_gives_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let o = gantruth(&["generate-data", "--out", "e", "--count", "0", "--seed", "0"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = fs::read_to_string(dir.path().join("e/manifest.json")).unwrap();
    assert!(manifest.contains("\"samples\": []"));
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = gantruth(&["pretrain-estimator", "--kind", "unknown", "--data", "d", "--out", "x"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    fs::write(dir.path().join("bad.toml"), "[trainer]\nlearning_rate = 1\n").unwrap();
    let o = gantruth(&["train", "--config", "bad.toml", "--out", "t"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = gantruth(&["generate-data", "--out", "d"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_estimator_is_caught_before_training() {
    let dir = tempfile::tempdir().unwrap();
    assert!(gantruth(&["generate-data", "--out", "d", "--count", "2"], dir.path()).status.success());
    let o = gantruth(&["train", "--out", "t", "--source", "d", "--target", "d", "--set", "trainer.tasks=[\"S\"]"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("semseg"), "{}", stderr(&o));
    assert!(!dir.path().join("t/metrics.jsonl").exists());
}

#[test]
fn short_training_and_translation_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert!(gantruth(&["generate-data", "--out", "d", "--count", "3"], p).status.success());
    let cfg = "[trainer]\nmodel = \"simple_gan\"\nsteps = 2\ncheckpoint_every = 0\n\n[arch]\nbase_channels = 4\ndisc_channels = 4\n";
    fs::write(p.join("c.toml"), cfg).unwrap();
    for run in ["r1", "r2"] {
        let o = gantruth(&["train", "--config", "c.toml", "--out", run, "--source", "d", "--target", "d"], p);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let c1 = fs::read(p.join("r1/final.ckpt")).unwrap();
    assert_eq!(c1, fs::read(p.join("r2/final.ckpt")).unwrap());
    let resolved = fs::read_to_string(p.join("r1/config.resolved.toml")).unwrap();
    assert!(resolved.contains("simple_gan"));

    let o = gantruth(&["translate", "--checkpoint", "r1/final.ckpt", "--data", "d", "--out", "tr"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = gantruth(&["grid", "--datasets", "d", "tr", "--rows", "2", "--out", "g1.png", "--seed", "3"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    gantruth(&["grid", "--datasets", "d", "tr", "--rows", "2", "--out", "g2.png", "--seed", "3"], p);
    assert_eq!(fs::read(p.join("g1.png")).unwrap(), fs::read(p.join("g2.png")).unwrap());
}

#[test]
fn grid_lists_missing_ids() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gantruth(&["generate-data", "--out", "a", "--count", "4"], p);
    gantruth(&["generate-data", "--out", "b", "--count", "2"], p);
    let o = gantruth(&["grid", "--datasets", "a", "b", "--rows", "2", "--out", "g.png"], p);
    assert_ne!(o.status.code(), Some(0));
    let e = stderr(&o);
    assert!(e.contains("000002") && e.contains("000003"), "{e}");
}

#[test]
fn grid_has_one_row_per_sample_and_one_column_per_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gantruth(&["generate-data", "--out", "a", "--count", "5"], p);
    let one = gantruth(&["grid", "--datasets", "a", "--rows", "4", "--out", "g1.png"], p);
    let two = gantruth(&["grid", "--datasets", "a", "a:target", "--rows", "4", "--out", "g2.png"], p);
    assert!(one.status.success() && two.status.success());
    let dims = |o: &Output| String::from_utf8_lossy(&o.stdout).split_whitespace().nth(1).unwrap().to_string();
    let (w1, h1) = dims(&one).split_once('x').map(|(a, b)| (a.parse::<u32>().unwrap(), b.parse::<u32>().unwrap())).unwrap();
    let (w2, h2) = dims(&two).split_once('x').map(|(a, b)| (a.parse::<u32>().unwrap(), b.parse::<u32>().unwrap())).unwrap();
    assert_eq!(h1, h2);
    assert!(w2 > w1);
    assert!(h1 >= 4 * 64);
}

#[test]
fn evaluations_of_ground_truth_against_itself_are_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    gantruth(&["generate-data", "--out", "d", "--count", "4"], p);
    let o = gantruth(&["evaluate-segmentation", "--pred", "d", "--truth", "d", "--out", "seg"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("mIOU 1.0000"));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(p.join("seg/report.json")).unwrap()).unwrap();
    assert_eq!(json["miou"], 1.0);
    assert!(p.join("seg/config.resolved.toml").exists());

    let o = gantruth(&["evaluate-depth", "--pred", "d", "--truth", "d"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("abs-rel 0.0000"));
}
