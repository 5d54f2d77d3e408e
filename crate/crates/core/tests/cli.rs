use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn m2fusion(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2fusion"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn run_dir(output: &Output) -> PathBuf {
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    PathBuf::from(String::from_utf8_lossy(&output.stdout).trim())
}

const CHEAP: &[&str] = &[
    "experiment",
    "--preset",
    "desk",
    "--seed",
    "3",
    "--k",
    "3",
    "--strategies",
    "patho_uni,radio_uni,decision",
];

#[test]
fn saved_cohort_reproduces_generated_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cohort = tmp.path().join("cohort");
    fs::create_dir(&cohort).unwrap();
    let generated = Command::new(env!("CARGO_BIN_EXE_m2fusion"))
        .args(["generate", "--preset", "desk", "--seed", "3", "--out"])
        .arg(&cohort)
        .output()
        .unwrap();
    assert!(
        generated.status.success(),
        "{}",
        String::from_utf8_lossy(&generated.stderr)
    );

    let direct = run_dir(&m2fusion(CHEAP, &tmp.path().join("a")));
    let mut args = CHEAP.to_vec();
    let cohort_arg = cohort.to_str().unwrap();
    args.extend(["--cohort", cohort_arg]);
    let loaded = run_dir(&m2fusion(&args, &tmp.path().join("b")));
    assert_eq!(direct.file_name(), loaded.file_name());
    for f in ["results.tsv", "scores.csv"] {
        assert_eq!(
            fs::read(direct.join(f)).unwrap(),
            fs::read(loaded.join(f)).unwrap(),
            "{f}"
        );
    }

    let report = run_dir(
        &Command::new(env!("CARGO_BIN_EXE_m2fusion"))
            .arg("report")
            .arg(&direct)
            .output()
            .unwrap(),
    );
    let summary = fs::read_to_string(report.join("summary.md")).unwrap();
    for name in ["patho_uni", "radio_uni", "decision"] {
        assert!(summary.contains(name));
        assert!(report.join(format!("roc-{}.svg", name.replace('_', "-"))).is_file());
    }
    assert!(fs::read_to_string(report.join("auc-bars.svg"))
        .unwrap()
        .starts_with("<svg"));
}

#[test]
fn error_categories_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let code = |args: &[&str]| m2fusion(args, tmp.path()).status.code();

    assert_eq!(code(&["experiment", "--cohort", missing.to_str().unwrap()]), Some(3));
    assert_eq!(code(&["experiment", "--k", "1"]), Some(2));
    assert_eq!(code(&["experiment", "--strategies", "late"]), Some(2));
    assert_eq!(code(&["bayes", "--threshold", "1.5"]), Some(2));
    assert_eq!(code(&["bayes", "--scores", missing.to_str().unwrap()]), Some(3));

    let config = tmp.path().join("config.json");
    fs::write(&config, r#"{"generatr": {}}"#).unwrap();
    assert_eq!(code(&["experiment", "--config", config.to_str().unwrap()]), Some(2));

    let report = Command::new(env!("CARGO_BIN_EXE_m2fusion"))
        .arg("report")
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(report.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&report.stderr).contains("nowhere"));
}

#[test]
fn bayes_search_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_dir(&m2fusion(&["bayes", "--draws", "50", "--seed", "4"], tmp.path()));
    let text = fs::read_to_string(dir.join("bayes.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(value.is_object());
}

#[test]
fn generate_is_deterministic_and_needs_its_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let generate = |dir: &Path| {
        Command::new(env!("CARGO_BIN_EXE_m2fusion"))
            .args(["generate", "--seed", "7", "--out"])
            .arg(dir)
            .output()
            .unwrap()
    };
    let missing = tmp.path().join("absent");
    let out = generate(&missing);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent"));

    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir(&a).unwrap();
    fs::create_dir(&b).unwrap();
    assert!(generate(&a).status.success());
    assert!(generate(&b).status.success());
    let files = walk(&a);
    assert_eq!(files.len(), 121);
    for n in files {
        assert_eq!(
            fs::read(a.join(&n)).unwrap(),
            fs::read(b.join(&n)).unwrap(),
            "{}",
            n.display()
        );
    }
}

fn walk(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}
