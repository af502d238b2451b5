use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use duoflow::io::{read_flo, read_image};
use duoflow::metrics::{epe_mean, layer_error_ncc, warping_error};
use serde_json::Value;

fn duoflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duoflow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = duoflow(args);
    assert!(
        out.status.success(),
        "duoflow {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn subdirs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    v
}

fn synth(dir: &Path, extra: &[&str]) -> Vec<PathBuf> {
    let mut args = vec!["synthesize", "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
    subdirs(dir)
}

/// Instance whose name starts with `prefix` in a freshly synthesized suite.
fn instance(dir: &Path, prefix: &str, extra: &[&str]) -> PathBuf {
    synth(dir, extra)
        .into_iter()
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with(prefix))
        .unwrap()
}

fn estimate(bundle: &Path, out: &Path, extra: &[&str]) -> String {
    let (i0, i1) = (bundle.join("I.png"), bundle.join("Iprime.png"));
    let mut args = vec!["estimate", "--i0", s(&i0), "--i1", s(&i1), "--out", s(out)];
    args.extend_from_slice(extra);
    ok(&args)
}

fn totals(trace: &Path) -> Vec<f64> {
    let text = fs::read_to_string(trace).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect()
}

fn evaluate(result: &Path, gt: &Path) -> Value {
    serde_json::from_str(&ok(&["evaluate", "--result", s(result), "--gt", s(gt)])).unwrap()
}

#[test]
fn synthesize_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    let dirs = synth(&a, &["--seed", "7", "--size", "24x32"]);
    synth(&b, &["--seed", "7", "--size", "24x32"]);
    synth(&c, &["--seed", "8", "--size", "24x32"]);
    let mut differs = false;
    for d in &dirs {
        let name = d.file_name().unwrap();
        for f in duoflow::io::BUNDLE_FILES {
            let bytes = fs::read(d.join(f)).unwrap();
            assert_eq!(bytes, fs::read(b.join(name).join(f)).unwrap(), "{name:?}/{f}");
            differs |= bytes != fs::read(c.join(name).join(f)).unwrap();
        }
    }
    assert!(differs, "another seed gave the same suite");
}

#[test]
fn default_suite_has_at_least_ten_instances() {
    let tmp = tempfile::tempdir().unwrap();
    let dirs = synth(tmp.path(), &["--seed", "1"]);
    assert!(dirs.len() >= 10, "{} instances", dirs.len());
    for d in &dirs {
        for f in duoflow::io::BUNDLE_FILES {
            assert!(d.join(f).is_file(), "{}/{f}", d.display());
        }
    }
}

#[test]
fn mode_filter() {
    let tmp = tempfile::tempdir().unwrap();
    for mode in ["static", "dynamic"] {
        let out = tmp.path().join(mode);
        let dirs = synth(&out, &["--mode", mode, "--size", "16x16"]);
        assert!(!dirs.is_empty());
        for d in dirs {
            let meta: Value = serde_json::from_slice(&fs::read(d.join("meta.json")).unwrap()).unwrap();
            assert_eq!(meta["mode"], mode);
        }
    }
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = duoflow(&["synthesize", "--out", s(&blocker.join("sub")), "--size", "8x8"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    let out = duoflow(&["synthesize", "--out", s(tmp.path()), "--size", "8by8"]);
    assert!(!out.status.success());

    let missing = tmp.path().join("nope.png");
    let out = duoflow(&["estimate", "--i0", s(&missing), "--i1", s(&missing), "--mode", "static", "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.png"));
}

#[test]
fn identical_frames_give_zero_flow() {
    let tmp = tempfile::tempdir().unwrap();
    let b = instance(&tmp.path().join("s"), "00_", &["--mode", "static", "--size", "32x32"]);
    let out = tmp.path().join("est");
    let i0 = b.join("I.png");
    ok(&["estimate", "--i0", s(&i0), "--i1", s(&i0), "--mode", "static", "--outer", "3", "--out", s(&out)]);
    let u = read_flo(out.join("U.flo")).unwrap();
    let mean: f64 = u.u().iter().zip(u.v()).map(|(a, b)| a.hypot(*b)).sum::<f64>() / u.u().len() as f64;
    assert!(mean < 0.05, "mean |flow| {mean}");
    for f in ["L1.png", "L1p.png", "L2.png", "L2p.png", "U.flo", "V.flo", "U.png", "V.png", "trace.csv", "U_init.flo", "params.txt"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    assert!(!out.join("V_init.flo").exists());
}

#[test]
fn static_trace_is_non_increasing() {
    let tmp = tempfile::tempdir().unwrap();
    let b = instance(&tmp.path().join("s"), "00_", &["--mode", "static", "--size", "48x48"]);
    let out = tmp.path().join("est");
    estimate(&b, &out, &["--mode", "static", "--gt", s(&b)]);
    let t = totals(&out.join("trace.csv"));
    assert_eq!(t.len(), 26);
    for w in t.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} -> {}", w[0], w[1]);
    }
    // --gt fills the error columns
    let text = fs::read_to_string(out.join("trace.csv")).unwrap();
    let last = text.lines().last().unwrap();
    assert!(last.split(',').nth(5).unwrap().parse::<f64>().is_ok());
}

#[test]
fn tgv2_is_no_worse_than_tv_on_an_affine_flow() {
    let tmp = tempfile::tempdir().unwrap();
    // catalog entry 4 moves the background by an affine map
    let b = instance(&tmp.path().join("s"), "04_", &["--mode", "static", "--size", "48x48"]);
    let mut epe = Vec::new();
    for reg in ["tv", "tgv2"] {
        let out = tmp.path().join(reg);
        estimate(&b, &out, &["--mode", "static", "--reg", reg]);
        epe.push(evaluate(&out, &b)["epe_u"].as_f64().unwrap());
    }
    assert!(epe[1] <= epe[0], "tgv2 {} vs tv {}", epe[1], epe[0]);
}

#[test]
fn dynamic_mode_needs_an_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let b = instance(&tmp.path().join("s"), "10_", &["--mode", "dynamic", "--size", "24x24"]);
    let (i0, i1) = (b.join("I.png"), b.join("Iprime.png"));
    let out = duoflow(&["estimate", "--i0", s(&i0), "--i1", s(&i1), "--mode", "dynamic", "--out", s(tmp.path())]);
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("--init-layers"), "{msg}");

    let est = tmp.path().join("est");
    let layers: Vec<PathBuf> = ["L1.png", "L1p.png", "L2.png", "L2p.png"].iter().map(|f| b.join(f)).collect();
    let mut args = vec!["--mode", "dynamic", "--outer", "2", "--init-layers"];
    args.extend(layers.iter().map(|p| s(p)));
    estimate(&b, &est, &args);
    assert!(est.join("V_init.flo").is_file());
    let report = evaluate(&est, &b);
    assert!(report["epe_v"].as_f64().unwrap() < 1.0, "{report}");
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let b = instance(&tmp.path().join("s"), "01_", &["--mode", "static", "--size", "24x24"]);
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# short run\nouter = 4\nlambda_l = 0.5\nmode = static\n").unwrap();

    let out = tmp.path().join("a");
    estimate(&b, &out, &["--config", s(&cfg), "--outer", "2"]);
    assert_eq!(totals(&out.join("trace.csv")).len(), 3);
    let params = fs::read_to_string(out.join("params.txt")).unwrap();
    assert!(params.contains("lambda-l = 0.5\n"), "{params}");
    assert!(params.contains("outer = 2\n"));
    assert!(params.contains("theta = 0.25\n"));

    // the listing reproduces the run
    let again = tmp.path().join("b");
    estimate(&b, &again, &["--config", s(&out.join("params.txt"))]);
    assert_eq!(fs::read(out.join("U.flo")).unwrap(), fs::read(again.join("U.flo")).unwrap());

    fs::write(&cfg, "outr = 4\n").unwrap();
    let (i0, i1) = (b.join("I.png"), b.join("Iprime.png"));
    let res = duoflow(&["estimate", "--i0", s(&i0), "--i1", s(&i1), "--mode", "static", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("outr"));
}

#[test]
fn bundle_evaluated_against_itself_matches_the_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let b = instance(&tmp.path().join("s"), "10_", &["--mode", "dynamic", "--size", "32x32"]);
    let report = evaluate(&b, &b);
    assert_eq!(report["epe_u"], 0.0);
    assert_eq!(report["epe_v"], 0.0);
    assert_eq!(report["layer_err"], 0.0);
    assert!(report.get("naive_epe_u").is_none());

    let img = |f: &str| read_image(b.join(f)).unwrap();
    let (u, v) = (read_flo(b.join("U.flo")).unwrap(), read_flo(b.join("V.flo")).unwrap());
    let w1 = warping_error(&img("L1.png"), &img("L1p.png"), &u).unwrap();
    let w2 = warping_error(&img("L2.png"), &img("L2p.png"), &v).unwrap();
    assert_eq!(report["warp_err_l1"].as_f64().unwrap(), w1);
    assert_eq!(report["warp_err_l2"].as_f64().unwrap(), w2);
    // interpolation and the image border are all that is left
    assert!(w1 < 5.0 && w2 < 5.0, "{w1} {w2}");
    assert_eq!(layer_error_ncc(&img("L2.png"), &img("L2.png")).unwrap(), 0.0);
    assert_eq!(epe_mean(&u, &u, None).unwrap(), 0.0);

    let written: Value = serde_json::from_slice(&fs::read(b.join("eval.json")).unwrap()).unwrap();
    assert_eq!(written, report);
}

#[test]
fn missing_ground_truth_files_are_noted() {
    let tmp = tempfile::tempdir().unwrap();
    let b = instance(&tmp.path().join("s"), "00_", &["--mode", "static", "--size", "24x24"]);
    let gt = tmp.path().join("gt");
    fs::create_dir(&gt).unwrap();
    for f in ["U.flo", "L2.png"] {
        fs::copy(b.join(f), gt.join(f)).unwrap();
    }
    let out = tmp.path().join("est");
    estimate(&b, &out, &["--mode", "static", "--outer", "2"]);
    let report = evaluate(&out, &gt);
    assert!(report.get("epe_v").is_none());
    assert!(report["epe_u"].as_f64().is_some());
    let naive = report["naive_epe_u"].as_f64().unwrap();
    let delta = report["delta_epe_u"].as_f64().unwrap();
    assert!((naive - delta - report["epe_u"].as_f64().unwrap()).abs() < 1e-12);
    let notes = report["notes"].to_string();
    assert!(notes.contains("V.flo"), "{notes}");
}
