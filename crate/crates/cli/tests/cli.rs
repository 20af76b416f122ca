use std::path::Path;
use std::process::Command;

use aifopt_cli::format::{decode_volume, encode_volume};
use aifopt_core::TimeSeries;

const SMALL: &str = r#"{"n_time": 10, "dims": {"z": 1, "y": 2, "x": 4}, "lesion_radii": [0.5, 1.0, 1.0], "aif": {"t0": 0.5, "alpha": 3.0, "beta": 1.5, "amplitude": 10.0}}"#;

fn aifopt(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_aifopt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn aifopt");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let (code, stdout, stderr) = aifopt(dir, args);
    assert_eq!(code, 0, "{args:?} failed: {stderr}");
    stdout
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn phantom_volume_roundtrips_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.json"), SMALL).unwrap();
    ok(d, &["phantom", "--spec", "small.json", "--out-dir", "s", "--seed", "1"]);
    let bytes = std::fs::read(d.join("s/volume.p4d")).unwrap();
    let vol = decode_volume(&bytes, None).unwrap();
    assert_eq!(vol.n_time(), 10);
    assert_eq!(encode_volume(&vol), bytes);
}

#[test]
fn truncated_volume_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.json"), SMALL).unwrap();
    ok(d, &["phantom", "--spec", "small.json", "--out-dir", "s"]);
    let bytes = std::fs::read(d.join("s/volume.p4d")).unwrap();
    std::fs::write(d.join("cut.p4d"), &bytes[..bytes.len() - 5]).unwrap();
    let (code, _, stderr) = aifopt(d, &["deconvolve", "--vol", "cut.p4d", "--aif", "s/true_aif.csv", "--out", "r.p4d"]);
    assert_eq!(code, 3, "{stderr}");
    assert!(stderr.contains("cut.p4d"), "{stderr}");
    assert!(!d.join("r.p4d").exists());
}

#[test]
fn minimal_volume_has_eight_byte_payload() {
    let axis = aifopt_core::TimeAxis::new(2).unwrap();
    let dims = aifopt_core::Dims3::new(1, 1, 1).unwrap();
    let vol = aifopt_core::Volume4D::new(axis, dims, [1.0; 3], vec![1.0, 2.0], aifopt_core::BinaryMask3D::full(dims)).unwrap();
    let bytes = encode_volume(&vol);
    let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
    assert_eq!(bytes.len() - nl - 1, 8);
}

#[test]
fn zero_aif_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.json"), SMALL).unwrap();
    ok(d, &["phantom", "--spec", "small.json", "--out-dir", "s"]);
    let zero = TimeSeries::new(vec![0.0; 10]).unwrap();
    std::fs::write(d.join("zero.csv"), aifopt_cli::tables::encode_curve(&zero)).unwrap();
    let (code, _, stderr) = aifopt(d, &["deconvolve", "--vol", "s/volume.p4d", "--aif", "zero.csv", "--out", "r.p4d"]);
    assert_eq!(code, 4, "{stderr}");
}

#[test]
fn noiseless_pipeline_recovers_lesion() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("clean.json"), r#"{"noise_sigma": 0.0, "tissue_delay_max": 0}"#).unwrap();
    ok(d, &["phantom", "--spec", "clean.json", "--out-dir", "p"]);
    ok(d, &["deconvolve", "--vol", "p/volume.p4d", "--aif", "p/true_aif.csv", "--healthy-mask", "p/healthy.mask", "--out", "rcbf.p4d"]);
    ok(d, &["evaluate", "--rcbf", "rcbf.p4d", "--gt", "p/gt.mask", "--report", "eval.json"]);
    let report = json(&d.join("eval.json"));
    assert_eq!(report["dice"].as_f64(), Some(1.0), "{report}");
}

#[test]
fn gradcheck_passes_on_well_posed_phantom() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.json"), SMALL).unwrap();
    ok(d, &["phantom", "--spec", "small.json", "--out-dir", "s", "--seed", "5"]);
    ok(d, &["gradcheck", "--vol", "s/volume.p4d", "--gt", "s/gt.mask", "--aif", "s/true_aif.csv", "--report", "gc.json"]);
    assert!(json(&d.join("gc.json")).is_object());
}

#[test]
fn optimize_writes_one_trace_line_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.json"), SMALL).unwrap();
    std::fs::write(d.join("opt.json"), r#"{"optimizer": {"max_iters": 25, "tolerance": 1e-300}}"#).unwrap();
    ok(d, &["phantom", "--spec", "small.json", "--out-dir", "s"]);
    let stdout = ok(
        d,
        &["optimize-aif", "--vol", "s/volume.p4d", "--gt", "s/gt.mask", "--config", "opt.json", "--out", "aif.csv", "--trace", "t.jsonl"],
    );
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    let trace = std::fs::read_to_string(d.join("t.jsonl")).unwrap();
    assert_eq!(trace.lines().count() as u64, summary["iterations"].as_u64().unwrap());
    for line in trace.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec["loss"].as_f64().unwrap().is_finite());
    }
    let aif = aifopt_cli::tables::read_curve(&d.join("aif.csv")).unwrap();
    assert_eq!(aif.len(), 10);
}

#[test]
fn bad_usage_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(aifopt(dir.path(), &["deconvolve"]).0, 2);
    assert_eq!(aifopt(dir.path(), &["no-such-command"]).0, 2);
    assert_eq!(aifopt(dir.path(), &["deconvolve", "--vol", "v", "--aif", "a", "--out", "o", "--smooth", "1,2"]).0, 2);
}

#[test]
fn missing_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, stderr) = aifopt(dir.path(), &["evaluate", "--rcbf", "nope.p4d", "--gt", "nope.mask"]);
    assert_eq!(code, 3, "{stderr}");
}
