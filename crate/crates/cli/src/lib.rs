//! Reproducible experiment runs: load a config, execute one experiment,
//! write data files plus `summary.json` and `manifest.json`.
//!
//! Exit codes: 0 all checks pass, 1 a check failed, 2 invalid configuration
//! or unusable output directory, 3 numerical failure.

pub mod config;
mod experiments;

pub use config::{Experiment, RunConfig};

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] rdiss::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One pass/fail entry of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `"<="` or `">="`.
    pub relation: &'static str,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            relation: "<=",
            threshold,
            pass: value <= threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            relation: ">=",
            threshold,
            pass: value >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: &'static str,
    pub seed: u64,
    pub pass: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, Serialize)]
struct OutputRecord {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    experiment: &'static str,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
    outputs: Vec<OutputRecord>,
}

/// Run-time options that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    pub emit_paths: bool,
}

/// Files written by an experiment, in creation order.
pub(crate) struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub(crate) fn create(&mut self, name: &str) -> Result<BufWriter<fs::File>, CliError> {
        let path = self.dir.join(name);
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        self.files.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    /// Create `name`, fill it with `fill`, and flush.
    pub(crate) fn write<F>(&mut self, name: &str, fill: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<fs::File>) -> Result<(), CliError>,
    {
        let mut w = self.create(name)?;
        fill(&mut w)?;
        let path = self.dir.join(name);
        w.flush().map_err(io_err(&path))
    }

    pub(crate) fn io(&self, name: &str) -> impl FnOnce(std::io::Error) -> CliError {
        let path = self.dir.join(name);
        move |source| CliError::Io { path, source }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parse a TOML config or a previously emitted `manifest.json` into a
/// generic value.
pub fn load_value(path: &Path) -> Result<toml::Value, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg = v
            .get("config")
            .cloned()
            .ok_or_else(|| CliError::Config(format!("{}: manifest has no config field", path.display())))?;
        toml::Value::try_from(cfg).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

/// Typed config from a generic value; errors name the offending field.
pub fn parse_config(value: toml::Value) -> Result<RunConfig, CliError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let at = if path == "." { "top level".to_string() } else { format!("`{path}`") };
        CliError::Config(format!("at {at}: {}", e.into_inner()))
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    parse_config(load_value(path)?)
}

/// Execute `cfg` into `opts.out`.
pub fn run(mut cfg: RunConfig, opts: &RunOptions) -> Result<Summary, CliError> {
    cfg.output = None;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(&opts.out).map_err(io_err(&opts.out))?;
    let mut outputs = Outputs {
        dir: opts.out.clone(),
        files: vec![],
    };
    let checks = experiments::dispatch(&cfg, opts, &mut outputs)?;
    let summary = Summary {
        experiment: cfg.experiment.name(),
        seed: cfg.seed,
        pass: checks.iter().all(|c| c.pass),
        checks,
    };
    outputs.write("summary.json", |w| {
        serde_json::to_writer_pretty(&mut *w, &summary).map_err(|e| CliError::Config(e.to_string()))?;
        writeln!(w).map_err(io_err(&opts.out))
    })?;

    let mut records = Vec::new();
    for f in &outputs.files {
        let path = opts.out.join(f);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        records.push(OutputRecord {
            file: f.clone(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    records.sort_by(|a, b| a.file.cmp(&b.file));
    let canonical = serde_json::to_vec(&cfg).expect("config serializes");
    let manifest = Manifest {
        tool: "rdiss",
        version: env!("CARGO_PKG_VERSION"),
        experiment: cfg.experiment.name(),
        seed: cfg.seed,
        config_sha256: sha256_hex(&canonical),
        config: &cfg,
        outputs: records,
    };
    let path = opts.out.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(summary)
}

/// Set a dotted key such as `kernel.hurst` inside a TOML table.
pub fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("sweep key `{key}`: `{part}` is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(CliError::Config(format!("empty sweep key `{key}`")))
}

/// Parse one sweep value as a TOML literal, falling back to a string.
pub fn sweep_literal(text: &str) -> toml::Value {
    #[derive(serde::Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {text}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(text.to_string()))
}

/// Parse `key=v1,v2,...`.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<String>), CliError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("sweep must look like key=v1,v2, got `{spec}`")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(CliError::Config(format!("sweep must look like key=v1,v2, got `{spec}`")));
    }
    Ok((key.trim().to_string(), values))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRun {
    pub value: String,
    pub directory: String,
    pub summary: Summary,
}

/// Run `base` once per value of `key`, each into its own subdirectory, and
/// combine the primary tables into `sweep.csv`.
pub fn sweep(
    base: &toml::Value,
    key: &str,
    values: &[String],
    seed: Option<u64>,
    opts: &RunOptions,
) -> Result<Vec<SweepRun>, CliError> {
    fs::create_dir_all(&opts.out).map_err(io_err(&opts.out))?;
    let mut runs = Vec::new();
    let mut combined: Option<String> = None;
    for v in values {
        let mut value = base.clone();
        set_dotted(&mut value, key, sweep_literal(v))?;
        let mut cfg = parse_config(value)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let dir = format!("{key}={v}");
        let sub = RunOptions {
            out: opts.out.join(&dir),
            emit_paths: opts.emit_paths,
        };
        let summary = run(cfg.clone(), &sub)?;
        let primary = sub.out.join(experiments::primary_table(cfg.experiment));
        let text = fs::read_to_string(&primary).map_err(io_err(&primary))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let acc = combined.get_or_insert_with(|| format!("{key},{header}\n"));
        for line in lines {
            acc.push_str(&format!("{v},{line}\n"));
        }
        runs.push(SweepRun {
            value: v.clone(),
            directory: dir,
            summary,
        });
    }
    let path = opts.out.join("sweep.csv");
    fs::write(&path, combined.unwrap_or_default()).map_err(io_err(&path))?;
    let path = opts.out.join("sweep.json");
    let mut text = serde_json::to_string_pretty(&runs).expect("sweep serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sweep_spec_parsing() {
        let (k, v) = parse_sweep("kernel.hurst=0.5, 0.75").unwrap();
        assert_eq!(k, "kernel.hurst");
        assert_eq!(v, vec!["0.5", "0.75"]);
        assert!(parse_sweep("kernel.hurst").is_err());
        assert!(parse_sweep("=1,2").is_err());
        assert_eq!(sweep_literal("4"), toml::Value::Integer(4));
        assert_eq!(sweep_literal("bm"), toml::Value::String("bm".into()));
    }

    #[test]
    fn dotted_keys_create_tables() {
        let mut v: toml::Value = toml::from_str("experiment = \"veps\"\n[kernel]\ntype = \"fbm\"\nhurst = 0.5\n").unwrap();
        set_dotted(&mut v, "kernel.hurst", toml::Value::Float(0.9)).unwrap();
        set_dotted(&mut v, "twoscale.scales", sweep_literal("[2, 4]")).unwrap();
        let cfg = parse_config(v.clone()).unwrap();
        assert_eq!(cfg.kernel, rdiss::kernel::KernelSpec::fbm(0.9).unwrap());
        assert_eq!(cfg.twoscale.scales, vec![2, 4]);
        assert!(set_dotted(&mut v, "experiment.x", toml::Value::Integer(1)).is_err());
    }

    #[test]
    fn defaults_are_explicit_in_serialized_config() {
        let cfg = parse_config(toml::from_str("experiment = \"mean\"\n[kernel]\ntype = \"bm\"\n").unwrap()).unwrap();
        let json = serde_json::to_value(&cfg).unwrap();
        for key in ["seed", "problem", "epsilons", "times", "replicas", "modes", "pairs", "twoscale"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert_eq!(json["problem"]["dxi"], 0.0625);
    }

    proptest! {
        #[test]
        fn serialized_config_parses_back_to_itself(
            hurst in 0.05f64..0.95, kappa in 0.0f64..1.0, seed in 0u64..(i64::MAX as u64), eps in 1e-3f64..0.5,
        ) {
            let text = format!(
                "experiment = \"ensemble\"\nseed = {seed}\nepsilons = [{eps:?}]\n[kernel]\ntype = \"fbm\"\nhurst = {hurst:?}\n[problem]\nkappa = {kappa:?}\n"
            );
            let cfg = parse_config(toml::from_str(&text).unwrap()).unwrap();
            let back = parse_config(toml::Value::try_from(serde_json::to_value(&cfg).unwrap()).unwrap()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub struct BookCli;
