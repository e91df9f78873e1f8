use std::fs;
use std::path::Path;
use std::process::Command;

use capped_ot::grid::slice_mass;
use capped_ot::io::read_field;

fn cot(args: &[&str], out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_cot")).args(args).arg("--out").arg(out).output().expect("cot runs");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stdout).into_owned())
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn solve_writes_fields_that_read_back() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = cot(&["solve", "--instance", "translation-v1", "--grid", "64", "--nt", "16"], dir.path());
    assert_eq!(code, 0);
    let summary = json(&dir.path().join("summary.json"));
    let e = summary["solution"]["energy"].as_f64().unwrap();
    assert!((e - 0.25).abs() < 0.01, "{e}");
    let (rho, meta) = read_field(dir.path(), "density").unwrap();
    assert_eq!(meta.shape, vec![17, 64]);
    let g = capped_ot::grid::Grid::boxed(&[64], &[0.0], &[1.0], 16).unwrap();
    for t in 0..17 {
        let m = slice_mass(&rho[t * 64..(t + 1) * 64], &g);
        let tol = if t == 0 || t == 16 { 1e-12 } else { summary["solution"]["residual"].as_f64().unwrap() };
        assert!((m - 1.0).abs() <= tol, "slice {t}: {m}");
    }
    let manifest = json(&dir.path().join("manifest.json"));
    let files: Vec<&str> = manifest["files"].as_array().unwrap().iter().map(|f| f["file"].as_str().unwrap()).collect();
    for f in &files {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(files.contains(&"density.bin") && files.contains(&"momentum.json"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["solve", "--instance", "translation-v1", "--grid", "64", "--nt", "16"];
    let (code, _) = cot(&[&small[..], &["--max-iter", "5"]].concat(), dir.path());
    assert_eq!(code, 2);
    assert_eq!(cot(&["solve", "--instance", "nope"], dir.path()).0, 3);
    assert_eq!(cot(&["solve", "--grid", "x"], dir.path()).0, 3);
    assert_eq!(cot(&["cell", "--format", "png"], dir.path()).0, 3);
    assert_eq!(cot(&["bogus"], dir.path()).0, 3);
}

#[test]
fn reports_are_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["cell", "--grid", "8,8", "--cap", "hole:0.5", "--u", "1,0.5", "--m", "0.4", "--convexity-pairs", "3"];
    let (ca, cb) = (cot(&args, a.path()).0, cot(&args, b.path()).0);
    assert_eq!(ca, cb);
    assert!(ca == 0 || ca == 2, "{ca}");
    for f in ["summary.json", "manifest.json", "nu.bin", "nu.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let s = json(&a.path().join("summary.json"));
    let v = s["value"].as_f64().unwrap();
    assert!(s["lower_bound"].as_f64().unwrap() <= v && v <= s["upper_bound"].as_f64().unwrap());
}

#[test]
fn format_selects_artefacts() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = cot(&["ftable", "--cap", "1,2", "--samples", "20", "--format", "csv"], dir.path());
    assert_eq!(code, 0);
    let table = fs::read_to_string(dir.path().join("ftable.csv")).unwrap();
    assert_eq!(table.lines().count(), 21);
    let svg = tempfile::tempdir().unwrap();
    let (code, _) = cot(&["gflow", "--scheme", "heat", "--grid", "32", "--steps", "20", "--format", "svg"], svg.path());
    assert_eq!(code, 0);
    assert!(fs::read_to_string(svg.path().join("energy.svg")).unwrap().starts_with("<svg"));
    assert!(!svg.path().join("timeseries.csv").exists());
}
