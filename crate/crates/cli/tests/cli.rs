//! End-to-end runs of the `cardioprop` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cardioprop_core::io::{load_bundle, mask_file, slice_file};
use cardioprop_core::metrics::MetricsReport;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cardioprop"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Exit code and the single stderr line of a failing run.
fn fails(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = run(args, cwd);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "not one line: {err:?}");
    (out.status.code().unwrap(), err.trim_end().to_string())
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn phantom_is_reproducible_and_adapt_gt_clears_above_base() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("ph.json"), r#"{"base_index": 2, "slices": 8}"#).unwrap();
    ok(&["phantom", "--out", "a", "--count", "2", "--seed", "7", "--config", "ph.json"], d);
    ok(&["phantom", "--out", "b", "--count", "2", "--seed", "7", "--config", "ph.json"], d);
    for case in ["case_000_ed", "case_001_es"] {
        assert_eq!(read_dir_bytes(&d.join("a").join(case)), read_dir_bytes(&d.join("b").join(case)));
    }

    let stdout = ok(&["adapt-gt", "--bundle", "a/case_000_ed", "--out", "adapted"], d);
    assert!(stdout.contains("base 2"), "{stdout}");
    let s = load_bundle(&d.join("adapted")).unwrap();
    let masks = s.masks().unwrap();
    assert_eq!(s.base_index(), Some(2));
    assert!(masks[0].is_background() && masks[1].is_background());
    assert!(!masks[2].is_background());
    assert!(!masks[2].contains(cardioprop_core::stacklab::Class::Rvc));
    let original = load_bundle(&d.join("a/case_000_ed")).unwrap();
    assert_eq!(&masks[3..], &original.masks().unwrap()[3..]);

    ok(&["adapt-gt", "--bundle", "a/case_000_ed", "--out", "none", "--base", "-1"], d);
    assert_eq!(load_bundle(&d.join("none")).unwrap().masks(), original.masks());
}

#[test]
fn train_segment_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["phantom", "--out", "data", "--count", "2", "--seed", "3"], d);
    let train = ["train", "--net", "lvrv", "--data", "data", "--epochs", "1", "--input-size", "16", "--seed", "4"];
    let stdout = ok(&[&train[..], &["--out", "m1"]].concat(), d);
    assert!(stdout.contains("epoch   1"), "{stdout}");
    ok(&[&train[..], &["--out", "m2"]].concat(), d);
    assert_eq!(fs::read(d.join("m1/final.ckpt")).unwrap(), fs::read(d.join("m2/final.ckpt")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("m1/training.json")).unwrap()).unwrap();
    assert_eq!(report["net"], "lvrv");
    assert_eq!(report["loss_curve"].as_array().unwrap().len(), 1);

    for (mode, out) in [("propagate", "p1"), ("mid-start", "p2")] {
        ok(&["segment", "--bundle", "data/case_001_ed", "--model", "m1/final.ckpt", "--mode", mode, "--gt-roi", "--out", out], d);
    }
    let masks: Vec<_> = (0..10).map(|i| d.join("p1").join(mask_file(i))).collect();
    assert!(masks.iter().all(|p| fs::metadata(p).unwrap().len() == 64 * 64));
    assert!(!d.join("p1").join(mask_file(10)).exists());
    let run_json: serde_json::Value = serde_json::from_slice(&fs::read(d.join("p1/run.json")).unwrap()).unwrap();
    assert_eq!(run_json["slices"], 10);
    assert_eq!(run_json["mode"], "top-down");
    assert_eq!(run_json["roi"]["side"].as_u64().unwrap() as usize, load_bundle(&d.join("data/case_001_ed")).map(|s| {
        cardioprop_core::roi::box_from_masks(s.masks().unwrap()).unwrap().side
    }).unwrap());

    let table = ok(&["evaluate", "--pred", "p1", "p2", "--truth", "data/case_001_ed", "data/case_001_ed", "--out", "rep.json"], d);
    assert!(table.contains("Hausdorff") && table.contains("LV-epi"), "{table}");
    let report: MetricsReport = serde_json::from_slice(&fs::read(d.join("rep.json")).unwrap()).unwrap();
    assert_eq!(report.cases.len(), 2);
    assert_eq!(report.summary.len(), 5);
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(d.join("rep.json")).unwrap()).unwrap();
    for key in ["dice", "hausdorff_mm", "apd_mm", "pgc", "presence_rate", "groups"] {
        assert!(raw["cases"][0]["structures"]["LVM"].get(key).is_some(), "missing {key}");
    }

    let (code, err) = fails(&["segment", "--bundle", "data/case_001_ed", "--model", "m1/final.ckpt", "--mode", "independent", "--out", "p3"], d);
    assert_eq!(code, 1);
    assert!(err.starts_with("E_ARG: "), "{err}");
}

#[test]
fn errors_are_single_coded_lines() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&["phantom", "--out", "data", "--count", "1"], d);
    fs::remove_file(d.join("data/case_000_ed").join(slice_file(4))).unwrap();
    let (code, err) = fails(&["adapt-gt", "--bundle", "data/case_000_ed", "--out", "x"], d);
    assert_eq!(code, 1);
    assert!(err.starts_with("E_MISSING_SLICE: ") && err.contains("index 4"), "{err}");

    let (_, err) = fails(&["train", "--net", "unet", "--data", "data", "--out", "m"], d);
    assert!(err.starts_with("E_KIND: "), "{err}");

    let (code, err) = fails(&["evaluate", "--pred", "x"], d);
    assert_eq!(code, 2);
    assert!(err.starts_with("E_USAGE: ") && err.contains("--truth"), "{err}");

    let (_, err) = fails(&["segment", "--bundle", "data/case_000_es", "--model", "missing.ckpt", "--out", "p"], d);
    assert!(err.starts_with("E_IO: "), "{err}");
}

#[test]
fn grad_check_reports_every_case() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&["grad-check", "--rounds", "1", "--seed", "3", "--out", "gc.json"], tmp.path());
    assert!(stdout.contains("checks passed"), "{stdout}");
    assert!(!stdout.contains("FAIL"));
    let rows: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("gc.json")).unwrap()).unwrap();
    assert!(rows.as_array().unwrap().len() >= 15);
}
