use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dqid");

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dqid-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn dqid(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn rl_config(extra_era: &str) -> String {
    format!(
        r#"
[plant]
model = "rl_reference"

[plant.rl_reference]
R = 0.23
L = 0.000318
omega0 = 377.0

[era]
{extra_era}
g = 0.01

[sem]
n_poles = 2

[sfra]
f_min = 1.0
f_max = 100.0
points = 8
n_poles = 2
"#
    )
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn era_only_run_writes_one_bode_file() {
    let dir = scratch("era-only");
    let cfg = write(&dir, "rl.toml", &rl_config("order = 2"));
    let out = dir.join("out");
    let o = dqid(&[
        "run",
        "--config",
        path(&cfg),
        "--methods",
        "era",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("bode_era.csv").exists());
    assert!(!out.join("bode_sem.csv").exists());
    assert!(!out.join("bode_sfra.csv").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["counters"]["sweep_simulations"], 0);
    assert_eq!(manifest["counters"]["step_experiments"], 2);
}

#[test]
fn effective_config_reproduces_the_run() {
    let dir = scratch("reload");
    let cfg = write(&dir, "rl.toml", &rl_config("order = 2"));
    let first = dir.join("first");
    let o = dqid(&[
        "run",
        "--config",
        path(&cfg),
        "--methods",
        "era,sem",
        "--out",
        path(&first),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second = dir.join("second");
    let o = dqid(&[
        "run",
        "--config",
        path(&first.join("effective_config.toml")),
        "--methods",
        "era,sem",
        "--out",
        path(&second),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["bode_era.csv", "bode_sem.csv"] {
        assert_eq!(
            std::fs::read(first.join(name)).unwrap(),
            std::fs::read(second.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn invalid_parameter_is_an_input_error() {
    let dir = scratch("bad-lf");
    let cfg = write(&dir, "bad.toml", "[plant.gfm]\nL_f = 0.0\n");
    let out = dir.join("out");
    let o = dqid(&["run", "--config", path(&cfg), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("L_f"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn unknown_key_is_an_input_error() {
    let dir = scratch("unknown");
    let cfg = write(&dir, "bad.toml", "[sampling]\nfs = 2500.0\nbogus = 1\n");
    let o = dqid(&[
        "run",
        "--config",
        path(&cfg),
        "--out",
        path(&dir.join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
}

#[test]
fn runtime_failure_leaves_no_artifacts() {
    let dir = scratch("runtime");
    let cfg = write(&dir, "rl.toml", &rl_config("order = 50"));
    let out = dir.join("out");
    let o = dqid(&[
        "run",
        "--config",
        path(&cfg),
        "--methods",
        "era",
        "--out",
        path(&out),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let left = std::fs::read_dir(&out).map(|d| d.count()).unwrap_or(0);
    assert_eq!(left, 0);
}

#[test]
fn compare_of_a_file_with_itself_passes() {
    let dir = scratch("compare");
    let cfg = write(&dir, "rl.toml", &rl_config("order = 2"));
    let out = dir.join("out");
    let o = dqid(&[
        "run",
        "--config",
        path(&cfg),
        "--methods",
        "era",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bode = out.join("bode_era.csv");
    let report = dir.join("self.csv");
    let o = dqid(&["compare", path(&bode), path(&bode), "--out", path(&report)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(report.exists());
    assert!(dir.join("self.txt").exists());
}

#[test]
fn malformed_bode_csv_names_the_line() {
    let dir = scratch("malformed");
    let text = "f_hz,channel,method,mag_db,phase_deg\n1,Ydd,era,0,0\n2,Ydd,era,oops,0\n";
    let bad = write(&dir, "bad.csv", text);
    let o = dqid(&[
        "compare",
        path(&bad),
        path(&bad),
        "--out",
        path(&dir.join("r.csv")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn oracle_passes_and_catches_a_sign_flip() {
    let dir = scratch("oracle");
    let o = dqid(&["oracle", "--out", path(&dir.join("ok"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("ok/oracle.csv").exists());

    let o = dqid(&[
        "oracle",
        "--out",
        path(&dir.join("flip")),
        "--inject-sign-flip",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Ydq"), "{}", stderr(&o));

    let o = dqid(&[
        "oracle",
        "--out",
        path(&dir.join("tight")),
        "--thresholds",
        "1e-9:1e-9",
    ]);
    assert_eq!(o.status.code(), Some(1));
}
