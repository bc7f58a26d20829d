use std::fs;
use std::path::Path;
use std::process::Command;

fn rdiss(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rdiss")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn hashes(manifest: &Path) -> serde_json::Value {
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(manifest).unwrap()).unwrap();
    m["outputs"].clone()
}

const BM_VEPS: &str = r#"
experiment = "veps"
epsilons = [0.1, 0.05, 0.025]
[kernel]
type = "bm"
[times]
t_max = 1.0
steps = 100
"#;

#[test]
fn missing_kernel_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "experiment = \"veps\"\n");
    let (code, _, err) = rdiss(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("kernel"), "{err}");
}

#[test]
fn unknown_keys_name_their_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", &format!("{BM_VEPS}\n[problem]\nkapa = 0.1\n"));
    let (code, _, err) = rdiss(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("problem.kapa"), "{err}");
}

#[test]
fn brownian_plateau_and_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", BM_VEPS);
    let a = dir.path().join("a");
    let (code, stdout, _) = rdiss(&["--config", &cfg, "--out", a.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}");
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    let plateau = summary["checks"].as_array().unwrap().iter().find(|c| c["name"] == "bm_plateau_error").unwrap();
    assert!(plateau["value"].as_f64().unwrap() < 1e-10);

    let b = dir.path().join("b");
    let manifest = a.join("manifest.json");
    let (code, _, _) = rdiss(&["--config", manifest.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert_eq!(hashes(&manifest), hashes(&b.join("manifest.json")));
    assert_eq!(fs::read(&manifest).unwrap(), fs::read(b.join("manifest.json")).unwrap());
}

#[test]
fn ensemble_is_identical_across_runs_and_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        r#"
experiment = "ensemble"
replicas = 100
seed = 5
epsilons = [0.05]
[kernel]
type = "fbm"
hurst = 0.75
[problem]
xi_max = 2.0
dxi = 0.25
[times]
points = [0.5]
"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(rdiss(&["--config", &cfg, "--out", a.to_str().unwrap(), "--workers", "1", "--emit-paths"]).0, 0);
    assert_eq!(rdiss(&["--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "3", "--emit-paths"]).0, 0);
    assert_eq!(hashes(&a.join("manifest.json")), hashes(&b.join("manifest.json")));
    let paths = fs::read_to_string(a.join("paths.ndjson")).unwrap();
    assert_eq!(paths.lines().count(), 200);
    let c = dir.path().join("c");
    rdiss(&["--config", &cfg, "--out", c.to_str().unwrap(), "--seed", "6"]);
    assert_ne!(fs::read(a.join("ensemble_mean.csv")).unwrap(), fs::read(c.join("ensemble_mean.csv")).unwrap());
}

#[test]
fn failing_check_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "experiment = \"veps\"\nepsilons = [0.1]\n[kernel]\ntype = \"bm\"\n[times]\nsteps = 50\n");
    let (code, stdout, _) = rdiss(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 1, "{stdout}");
    assert!(stdout.contains("FAIL sup_deviation_smallest_epsilon"));
}

#[test]
fn rough_kernel_in_ode_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "experiment = \"covariance\"\n[kernel]\ntype = \"fbm\"\nhurst = 0.3\n[problem]\nxi_max = 2.0\ndxi = 0.25\n");
    let (code, _, err) = rdiss(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn sweep_combines_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "experiment = \"asymptotics\"\n[kernel]\ntype = \"fbm\"\nhurst = 0.5\n[problem]\nkappa = 0.0\nsigmas = [[0.1, 0.0], [0.0, 0.1]]\nxi_max = 4.0\ndxi = 0.125\n",
    );
    let out = dir.path().join("s");
    let (code, stdout, err) = rdiss(&["--config", &cfg, "--out", out.to_str().unwrap(), "--sweep", "kernel.hurst=0.5,0.75,0.9"]);
    assert_eq!(code, 0, "{stdout}{err}");
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "kernel.hurst,slope_mean,slope_sd,expected_mean,expected_sd");
    assert_eq!(lines.len(), 4);
    assert!(out.join("kernel.hurst=0.9").join("manifest.json").exists());
}

#[test]
fn small_twoscale_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        r#"
experiment = "twoscale"
replicas = 16
epsilons = [0.02]
[kernel]
type = "fbm"
hurst = 0.75
[problem]
kappa = 0.01
sigmas = [[0.5, 0.0], [0.0, 0.5]]
[twoscale]
scales = [2, 4]
dt = 2e-3
t_final = 0.02
"#,
    );
    let out = dir.path().join("o");
    let (code, stdout, err) = rdiss(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0, "{stdout}{err}");
    let table = fs::read_to_string(out.join("bounds.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert_eq!(fs::read_to_string(out.join("pairings_N4.ndjson")).unwrap().lines().count(), 16);
}

#[test]
fn shipped_configs_validate() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = rdiss_cli::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert_eq!(seen, 6);
}
