use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unlearn-probe"))
}

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const REPORTS: [&str; 7] = [
    "transfer_matrix.csv",
    "transfer_matrix.json",
    "selection.json",
    "atlas.csv",
    "atlas.json",
    "ablation.csv",
    "ablation.json",
];

#[test]
fn run_then_resume_skips_everything() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = tiny();
    let cfg = cfg.to_str().unwrap();
    let first = run(&["run", "--config", cfg, "--out", out, "--resume"]);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(!stderr(&first).contains("skipped"));
    for f in REPORTS.iter().chain(&["atlas.svg", "ablation.svg", "config.json", "base.updm", "as.updm"]) {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let before: Vec<Vec<u8>> = REPORTS.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();

    let second = run(&["run", "--config", cfg, "--out", out, "--resume"]);
    assert!(second.status.success(), "{}", stderr(&second));
    assert!(!stderr(&second).contains("ran "), "{}", stderr(&second));
    let after: Vec<Vec<u8>> = REPORTS.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    assert_eq!(before, after);

    let csv = std::fs::read_to_string(dir.path().join("transfer_matrix.csv")).unwrap();
    assert!(csv.starts_with("attack,base,esd-c1,uce-c1,average,unlearned_average\n"));
    assert!(!csv.contains('\r'));

    let info = run(&["inspect", dir.path().join("base.updm").to_str().unwrap()]);
    assert!(info.status.success());
    let text = String::from_utf8(info.stdout).unwrap();
    assert!(text.contains("\"stage\": \"train-base\""), "{text}");
    assert!(text.contains("\"config_hash\""));
}

#[test]
fn individual_stages_need_their_parents() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = tiny();
    let o = run(&["attack-as", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("attack-as") && err.contains("base.updm"), "{err}");

    let o = run(&["train-base", "--config", cfg.to_str().unwrap(), "--out", out, "--seed", "9"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(&["attack-as", "--config", cfg.to_str().unwrap(), "--out", out, "--seed", "9", "--workers", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("as_candidates.csv").exists());
    let effective = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
    assert!(effective.contains("\"seed\": 9"));
}

#[test]
fn malformed_config_reports_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"seed\": 1,\n  \"target\": 2,\n  \"world\": {,\n}\n").unwrap();
    let o = run(&["run", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("bad.json:4:"), "{err}");
}

#[test]
fn missing_output_directory_is_an_error() {
    let o = run(&["erase"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--out"));
}

#[test]
fn inspect_rejects_non_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("x.updm");
    std::fs::write(&f, b"not a checkpoint").unwrap();
    let o = run(&["inspect", f.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
}
