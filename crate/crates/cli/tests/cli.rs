use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn wtfpad(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wtfpad")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) {
    let out = wtfpad(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn corpus(dir: &Path) {
    ok(&["synth", "--pages", "6", "--instances", "10", "--seed", "3", "--out", "corpus"], dir);
}

#[test]
fn disabled_padding_has_no_overhead() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(&["simulate", "--corpus", "corpus", "--disable-padding", "--out", "none"], dir.path());
    let rows = csv_rows(&dir.path().join("none/overheads.csv"));
    assert_eq!(rows.len(), 60);
    for row in rows {
        assert_eq!(&row[2..], ["0.000000", "0.000000", "0", "0"]);
    }
    let raw = fs::read_to_string(dir.path().join("corpus/page000-0.trace")).unwrap();
    let padded = fs::read_to_string(dir.path().join("none/traces/page000-0.trace")).unwrap();
    assert_eq!(raw, padded);
}

#[test]
fn sweep_emits_one_row_per_percentile() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(&["sweep", "--corpus", "corpus", "--folds", "5", "--family", "lognormal", "--out", "sweep"], dir.path());
    let text = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert!(text.starts_with("# seed=1 "));
    let rows = csv_rows(&dir.path().join("sweep/sweep.csv"));
    let ps: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(ps, ["0.5", "0.4", "0.3", "0.2", "0.1", "0.05", "0.01"]);
}

#[test]
fn flags_override_config_which_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    fs::write(dir.path().join("run.cfg"), "percentile=0.2\nfamily=lognormal\nseed=9\n").unwrap();
    ok(&["fit", "--corpus", "corpus", "--config", "run.cfg", "--out", "a"], dir.path());
    ok(&["fit", "--corpus", "corpus", "--config", "run.cfg", "--percentile", "0.3", "--out", "b"], dir.path());
    ok(&["fit", "--corpus", "corpus", "--out", "c"], dir.path());
    let header = |d: &str| {
        fs::read_to_string(dir.path().join(d).join("fit_report.txt")).unwrap().lines().next().unwrap().to_string()
    };
    assert_eq!(header("a"), "# seed=9 family=lognormal percentile=0.2");
    assert_eq!(header("b"), "# seed=9 family=lognormal percentile=0.3");
    assert_eq!(header("c"), "# seed=1 family=normal percentile=0.4");
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    for args in [
        vec!["fit", "--corpus", "missing"],
        vec!["fit", "--corpus", "corpus", "--family", "cauchy"],
        vec!["fit", "--corpus", "corpus", "--percentile", "0.9"],
        vec!["evaluate", "--corpus", "corpus", "--world-sizes", "5"],
    ] {
        let out = wtfpad(&args, dir.path());
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
        assert!(err.starts_with("error: "));
    }
}

#[test]
fn padded_traces_reload_for_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    ok(&["simulate", "--corpus", "corpus", "--annotate", "--out", "padded"], dir.path());
    ok(&["evaluate", "--corpus", "padded/traces", "--folds", "5", "--out", "eval"], dir.path());
    let rows = csv_rows(&dir.path().join("eval/eval.csv"));
    assert_eq!(rows.len(), 1);
    let roc = fs::read_to_string(dir.path().join("eval/roc.csv")).unwrap();
    assert!(roc.starts_with("x,y\n0.000000,0.000000\n"));
}
