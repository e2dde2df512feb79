//! Command-line protocol: stage ordering, resume and exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kdlab::harness::{ExperimentLedger, Stage, LEDGER_FILE};
use kdlab::metrics::EvalReport;

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn kdlab(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdlab"))
        .arg("--quiet")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn kdlab")
}

fn reports(dir: &Path) -> BTreeMap<String, EvalReport> {
    std::fs::read_dir(dir.join("reports"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.file_name().unwrap().to_string_lossy().starts_with("matched"))
        .map(|p| {
            let mut r = EvalReport::from_json(&std::fs::read_to_string(&p).unwrap()).unwrap();
            r.fps = 0.0;
            (p.file_name().unwrap().to_string_lossy().into_owned(), r)
        })
        .collect()
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));

    assert!(kdlab(&cfg, &full, &["run-all"]).status.success());

    // a student cannot be trained before the teacher
    let out = kdlab(&cfg, &part, &["gen-data"]);
    assert!(out.status.success());
    let out = kdlab(&cfg, &part, &["train-student", "--mode", "kd-a"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-teacher"));

    assert!(kdlab(&cfg, &part, &["train-teacher"]).status.success());
    let before = ExperimentLedger::load(&part.join(LEDGER_FILE)).unwrap();
    let teacher = before.stages[&Stage::TrainTeacher].clone();

    let out = kdlab(&cfg, &part, &["resume"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let after = ExperimentLedger::load(&part.join(LEDGER_FILE)).unwrap();
    // the teacher record, including its wall time, is untouched
    assert_eq!(after.stages[&Stage::TrainTeacher], teacher);
    assert_eq!(after.stages.len(), Stage::ALL.len());

    let full_ledger = ExperimentLedger::load(&full.join(LEDGER_FILE)).unwrap();
    assert_eq!(after.checkpoints, full_ledger.checkpoints);
    assert_eq!(reports(&part), reports(&full));

    // altered config: refused with the configuration exit code
    let altered = tmp.path().join("altered.toml");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("seed = 0", "seed = 5");
    std::fs::write(&altered, text).unwrap();
    let out = kdlab(&altered, &part, &["resume"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("refusing"));

    // a tampered artifact makes its stage and everything after it rerun
    let ckpt = part.join("models/kd-b.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&ckpt, bytes).unwrap();
    let out = kdlab(&cfg, &part, &["resume"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let healed = ExperimentLedger::load(&part.join(LEDGER_FILE)).unwrap();
    assert_eq!(healed.stages[&Stage::TrainTeacher], teacher);
    assert_eq!(healed.checkpoints, full_ledger.checkpoints);
    assert_eq!(reports(&part), reports(&full));
}

#[test]
fn configuration_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "seed = 1\n[training]\nepochz = 3\n").unwrap();
    let out = kdlab(&bad, tmp.path(), &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    std::fs::write(&bad, "[dataset]\ntrain = 100000\n").unwrap();
    assert_eq!(kdlab(&bad, tmp.path(), &["gen-data"]).status.code(), Some(2));

    let out = kdlab(&tmp.path().join("missing.toml"), tmp.path(), &["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluation_needs_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kdlab(&smoke_config(), tmp.path(), &["evaluate", "--precision", "int8"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("needs"));
}
