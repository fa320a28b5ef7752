use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn flowlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = flowlab(args);
    assert!(
        out.status.success(),
        "flowlab {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
seed = 3
teacher = "out/teacher.ckpt"
student = "out/cm_student.ckpt"

[train]
steps = 40
batch = 64

[cm]
steps = 10
batch = 64
teacher_pool = 128

[sample]
count = 50

[eval]
count = 200
replicates = 2
projections = 16
"#;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_sample_and_speedup_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let out = dir.path().join("out");
    let stdout = ok(&["train-teacher", "--config", s(&cfg), "--out", s(&out)]);
    assert!(stdout.contains("wrote"), "{stdout}");
    ok(&["distill-cm", "--config", s(&cfg), "--out", s(&out)]);

    let samples = dir.path().join("samples");
    ok(&["sample", "--config", s(&cfg), "--out", s(&samples), "--steps", "8"]);
    let csv = fs::read_to_string(samples.join("samples.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert!(header.contains("steps=8") && header.contains("nfe=8"), "{header}");
    assert_eq!(csv.lines().count(), 2 + 50);

    let eval = dir.path().join("eval");
    ok(&["eval", "--config", s(&cfg), "--out", s(&eval), "--speedup"]);
    let speed: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("speedup.json")).unwrap()).unwrap();
    assert_eq!(speed["nfe_ratio"].as_f64(), Some(12.5));
    assert_eq!(speed["euler_nfe"].as_u64(), Some(100));
    assert_eq!(speed["consistency_nfe"].as_u64(), Some(8));
    assert!(eval.join("report.json").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", SMALL);
    let out = dir.path().join("out");
    let names = ["teacher.ckpt", "teacher_loss.csv", "cm_student.ckpt", "cm_loss.csv"];
    let pipeline = || {
        ok(&["train-teacher", "--config", s(&cfg), "--out", s(&out)]);
        ok(&["distill-cm", "--config", s(&cfg), "--out", s(&out)]);
        names.map(|n| fs::read(out.join(n)).unwrap())
    };
    let before = pipeline();
    let ckpt = before[0].clone();
    let first = dir.path().join("first");
    ok(&["sample", "--config", s(&cfg), "--out", s(&first)]);

    // identical config and seed again, into the same directory
    let after = pipeline();
    for ((name, a), b) in names.iter().zip(&before).zip(&after) {
        assert!(a == b, "{name} differs between runs");
    }
    let second = dir.path().join("second");
    ok(&["sample", "--config", s(&cfg), "--out", s(&second)]);
    assert_eq!(
        fs::read(first.join("samples.csv")).unwrap(),
        fs::read(second.join("samples.csv")).unwrap()
    );

    // a different seed changes the result
    let other = dir.path().join("other");
    ok(&["train-teacher", "--config", s(&cfg), "--out", s(&other), "--seed", "4"]);
    assert_ne!(fs::read(other.join("teacher.ckpt")).unwrap(), ckpt);
}

#[test]
fn unknown_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "seed = 1\n[train]\nstepz = 5\n");
    let out = flowlab(&["train-teacher", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stepz"), "{err}");
}

#[test]
fn missing_seed_and_task_mismatch_fail() {
    let dir = tempfile::tempdir().unwrap();
    let no_seed = write_config(dir.path(), "a.toml", "[train]\nsteps = 5\n");
    let out = flowlab(&["train-teacher", "--config", s(&no_seed)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));

    let mismatch = write_config(dir.path(), "b.toml", "task = \"distill-cm\"\nseed = 1\n");
    let out = flowlab(&["train-teacher", "--config", s(&mismatch), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("distill-cm"));
}

#[test]
fn missing_teacher_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "seed = 1\nteacher = \"nowhere.ckpt\"\n");
    let out = flowlab(&["distill-cm", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.ckpt"));
}

#[test]
fn pack_demo_writes_verified_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "p.toml", "seed = 9\n");
    let out = dir.path().join("pack");
    ok(&["pack-demo", "--config", s(&cfg), "--out", s(&out)]);
    let bytes = fs::read(out.join("demo.ups")).unwrap();
    assert_eq!(&bytes[..4], b"UPS1");
    assert!(out.join("demo.json").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            flowlab::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 2);
}
