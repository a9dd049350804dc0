use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn default_config() -> PathBuf {
    root().join("configs/default.toml")
}

fn mcvar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcvar")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes the shipped config with one substitution and an absolute data path.
fn variant(dir: &Path, from: &str, to: &str) -> PathBuf {
    let text = std::fs::read_to_string(default_config()).unwrap();
    assert!(text.contains(from), "{from}");
    let data = root().join("data/synthetic_weekly.csv");
    let text = text
        .replace(from, to)
        .replace("\"../data/synthetic_weekly.csv\"", &format!("{:?}", data.display().to_string()));
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn validate_accepts_shipped_config() {
    let cfg = default_config();
    let o = mcvar(&["validate", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("ok (8 assets, 119 periods, 17 windows"));
}

#[test]
fn validate_names_the_bad_field() {
    let cases = [
        ("cardinality = 4", "cardinality = 9", "model.cardinality"),
        ("levels = [0.05, 0.03, 0.01]", "levels = [0.01, 0.03, 0.05]", "model.levels"),
        ("synthetic_weekly.csv\"", "missing.csv\"", "data.path"),
    ];
    for (from, to, field) in cases {
        let dir = tempfile::tempdir().unwrap();
        let cfg = if field == "data.path" {
            let text = std::fs::read_to_string(default_config()).unwrap().replace(from, to);
            let p = dir.path().join("config.toml");
            std::fs::write(&p, text).unwrap();
            p
        } else {
            variant(dir.path(), from, to)
        };
        let o = mcvar(&["validate", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{field}");
        assert!(stderr(&o).contains(field), "{field}: {}", stderr(&o));
    }
}

#[test]
fn backtest_restricted_to_one_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), "seed = 42", "seed = 42");
    let out = dir.path().join("out");
    let o = mcvar(&[
        "backtest",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--strategy",
        "equal_weight",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["metrics.csv", "metrics_table.txt", "returns.csv", "cumulative.csv", "manifest.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let returns = std::fs::read_to_string(out.join("returns.csv")).unwrap();
    assert_eq!(returns.lines().next(), Some("t,date,equal_weight"));
    assert_eq!(returns.lines().count(), 1 + 17 * 4);
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("strategies = equal_weight\n"));
}

#[test]
fn solve_window_prints_portfolio() {
    let cfg = default_config();
    let cfg = cfg.to_str().unwrap();
    let o = mcvar(&["solve-window", "--config", cfg, "--window", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("status"));
    assert!(!text.contains("s_bar"));

    let o = mcvar(&["solve-window", "--config", cfg, "--window", "0", "--strategy", "rom_rkhs"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("alpha") && text.contains("s_bar"));

    let o = mcvar(&["solve-window", "--config", cfg, "--window", "40"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("out of range"));
}

#[test]
fn unknown_strategy_is_a_usage_error() {
    let cfg = default_config();
    let o = mcvar(&["solve-window", "--config", cfg.to_str().unwrap(), "--window", "0", "--strategy", "nope"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("rom_rkhs"));
}

#[test]
fn synth_reproduces_shipped_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("prices.csv");
    let o = mcvar(&["synth", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let fresh = std::fs::read(&out).unwrap();
    let shipped = std::fs::read(root().join("data/synthetic_weekly.csv")).unwrap();
    assert_eq!(fresh, shipped);
}
