use std::path::Path;
use std::process::{Command, Output};

fn gsb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsb")).args(args).output().expect("run gsb")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn top1_of(line: &str) -> &str {
    line.split_whitespace()
        .find_map(|f| f.strip_prefix("top1="))
        .expect("top1 field")
}

#[test]
fn grad_check_passes() {
    let o = gsb(&["grad-check", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().skip(1).all(|l| l.starts_with("ok")));
}

#[test]
fn train_then_eval_reproduces_logged_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = gsb(&["train", "--dataset", "synthetic", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(out.join("metrics.log")).unwrap();
    let last = log.lines().last().unwrap();
    assert!(last.contains("stage=2"));
    let logged: f64 = top1_of(last).parse().unwrap();
    assert!(logged > 0.9, "{last}");

    let o = gsb(&["eval", out.join("model.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(top1_of(&text), top1_of(last));

    // rerun with identical settings: byte-identical log
    let again = dir.path().join("again");
    let o = gsb(&["train", "--config", out.join("run.cfg").to_str().unwrap(), "--output", again.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(again.join("metrics.log")).unwrap(), log.as_bytes());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(gsb(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(gsb(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gsb(&["train", "--set", "no_such_key=1"]).status.code(), Some(1));
    assert_eq!(gsb(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "# run\ndim = 32\nheads = two\n").unwrap();
    let o = gsb(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn empty_synthetic_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = gsb(&["train", "--set", "per_class=0", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn ops_report_lists_all_modes() {
    let o = gsb(&["ops-report", "--n", "198", "--d", "384", "--r", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for mode in ["full_precision", "baseline_binary", "gsb_binary"] {
        assert!(text.contains(&format!("mode={mode}")));
    }
    assert!(text.contains("146.894") && text.contains("233.570"));
}

#[test]
fn init_check_and_attn_dump_on_fresh_model() {
    let o = gsb(&["init-check", "--set", "per_class=8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("attn.bin");
    let o = gsb(&["attn-dump", "--set", "per_class=8", "--out", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(Path::new(&path).exists());
    assert!(stdout(&o).contains("blocks.0.mask1"));
}
