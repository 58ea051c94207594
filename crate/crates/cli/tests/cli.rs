use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn slotnav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotnav")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn end_to_end_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("r.json");
    ok(&slotnav(&["generate-data", "--preset", "restaurants", "--out", p(&data), "--seed", "4"]));
    for split in ["train", "dev", "test"] {
        assert!(dir.path().join(format!("r.{split}.json")).exists());
    }
    let train = dir.path().join("r.train.json");
    let dev = dir.path().join("r.dev.json");
    let test = dir.path().join("r.test.json");

    let stats = ok(&slotnav(&["stats", "--train", p(&train), "--dev", p(&dev), "--test", p(&test)]));
    assert!(stats.contains("slots 3"), "{stats}");
    assert!(stats.contains("50/20/20"), "{stats}");
    let derived = ok(&slotnav(&["stats", "--train", p(&train), "--dev", p(&dev), "--test", p(&test), "--state-only"]));
    assert_eq!(derived.matches("unmatched (").count(), 3, "{derived}");

    let tcfg = dir.path().join("train.json");
    std::fs::write(
        &tcfg,
        r#"{"hidden": 8, "layers": 1, "heads": 2, "ffn": 16, "max_epochs": 2, "patience": 2, "batch_size": 8}"#,
    )
    .unwrap();
    let ckpt = dir.path().join("ckpt");
    let log = ok(&slotnav(&["train", "--data", p(&train), "--dev", p(&dev), "--config", p(&tcfg), "--out", p(&ckpt)]));
    assert!(log.contains("best epoch"), "{log}");
    assert_eq!(std::fs::read_to_string(ckpt.join("history.jsonl")).unwrap().lines().count(), 2);

    let report = dir.path().join("report.json");
    let eval = ok(&slotnav(&["eval", "--checkpoint", p(&ckpt), "--data", p(&test), "--json", p(&report)]));
    assert!(eval.contains("joint goal accuracy"), "{eval}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json.get("joint_goal_accuracy").is_some(), "{json}");

    let mut child = Command::new(env!("CARGO_BIN_EXE_slotnav"))
        .args(["track", "--checkpoint", p(&ckpt)])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"hello\ni want the north\n\n\n").unwrap();
    let out = child.wait_with_output().unwrap();
    let text = ok(&out);
    // one state map printed per tracked turn
    assert_eq!(text.matches('{').count(), 1, "{text}");
}

#[test]
fn gradcheck_reports_small_error() {
    let out = ok(&slotnav(&["gradcheck", "--variant", "no_slot_tagging"]));
    assert!(out.contains("relative error"), "{out}");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let cases: Vec<Vec<&str>> = vec![
        vec!["stats", "--train", p(&missing), "--dev", p(&missing), "--test", p(&missing)],
        vec!["gradcheck", "--variant", "no_such_variant"],
        vec!["generate-data", "--preset", "weather", "--out", "x.json"],
        vec!["eval", "--checkpoint", p(&missing), "--data", p(&missing)],
        vec!["ablate", "--data", p(&missing)],
        vec!["no-such-command"],
    ];
    for args in cases {
        let out = slotnav(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty(), "{args:?} printed no error");
    }
}
