use std::path::Path;
use std::process::Command;

fn tfapprox(out: &Path, args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_tfapprox"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run binary");
    (o.status.code().unwrap_or(-1), String::from_utf8_lossy(&o.stdout).into_owned())
}

fn report(out: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(out.join(name)).unwrap()).unwrap()
}

#[test]
fn verify_small_grid_is_green() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout) = tfapprox(dir.path(), &["verify", "--delta", "0.3", "--delta-star", "0.15", "--seed", "1", "--samples", "50"]);
    assert_eq!(code, 0, "{stdout}");
    let r = report(dir.path(), "verify.json");
    assert_eq!(r["schema"], 1);
    assert_eq!(r["seed"], 1);
    assert_eq!(r["config"]["M"], serde_json::Value::Null);
    assert_eq!(r["result"]["build"]["M"], 2);
    for name in ["quantization-exact", "contextual-distinct", "value-mapping"] {
        assert!(stdout.contains(&format!("PASS {name}")), "{stdout}");
    }
}

#[test]
fn stochastic_command_without_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = tfapprox(dir.path(), &["approx-error", "--eps", "0.5"]);
    assert_eq!(code, 1);
    let (code, _) = tfapprox(dir.path(), &["build", "--eps", "0.5", "--delta", "0.1", "--delta-star", "0.1", "--seed", "1"]);
    assert_eq!(code, 1);
    let (code, _) = tfapprox(dir.path(), &["train"]);
    assert_eq!(code, 1);
}

#[test]
fn count_reports_parameter_total() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout) = tfapprox(dir.path(), &["count", "--d", "2", "--L", "2", "--M", "2"]);
    assert_eq!(code, 0, "{stdout}");
    let r = report(dir.path(), "count.json");
    assert_eq!(r["result"]["omega"], "156");
    assert_eq!(r["result"]["closed_form"]["omega"], 156);
}

#[test]
fn double_precision_verification_fails_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout) = tfapprox(
        dir.path(),
        &["verify", "--delta", "0.3", "--delta-star", "0.15", "--seed", "1", "--samples", "5", "--precision-bits", "53"],
    );
    assert_eq!(code, 2);
    assert!(stdout.contains("FAIL contextual-precision"), "{stdout}");
}

#[test]
fn curves_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(tfapprox(a.path(), &["vc-bound", "--M", "2"]).0, 0);
    assert_eq!(tfapprox(b.path(), &["vc-bound", "--M", "2"]).0, 0);
    for name in ["vc-bound-vc.csv", "vc-bound-blocks.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(name)).unwrap());
        let text = String::from_utf8(x).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("x,y,ci_lo,ci_hi\n"));
    }
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tfapprox"))
        .args(["count", "--M", "2"])
        .env("TFAPPROX_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("count.json").exists());
}
