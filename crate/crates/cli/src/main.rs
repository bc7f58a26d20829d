use clap::Parser;
use rdiss_cli::{load_config, load_value, parse_sweep, run, sweep, CliError, RunOptions};
use std::path::PathBuf;
use std::process::ExitCode;

/// Run one reproducible rdiss experiment from a TOML config or an emitted
/// manifest.json.
#[derive(Debug, Parser)]
#[command(name = "rdiss", version)]
struct Args {
    /// Config file (.toml) or a manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    workers: Option<usize>,
    /// Run once per value: `key=v1,v2`, e.g. `kernel.hurst=0.5,0.75`.
    #[arg(long)]
    sweep: Option<String>,
    /// Also write every sampled driving path as NDJSON.
    #[arg(long)]
    emit_paths: bool,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("rdiss: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(args: &Args) -> Result<bool, CliError> {
    if let Some(n) = args.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start {n} workers: {e}")))?;
    }
    let out_of = |cfg_out: Option<PathBuf>| {
        args.out
            .clone()
            .or(cfg_out)
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set `output`".into()))
    };
    if let Some(spec) = &args.sweep {
        let (key, values) = parse_sweep(spec)?;
        let base = load_value(&args.config)?;
        let cfg_out = base.get("output").and_then(|v| v.as_str()).map(PathBuf::from);
        let opts = RunOptions {
            out: out_of(cfg_out)?,
            emit_paths: args.emit_paths,
        };
        let runs = sweep(&base, &key, &values, args.seed, &opts)?;
        for r in &runs {
            report(&format!("{key}={}", r.value), &r.summary);
        }
        return Ok(runs.iter().all(|r| r.summary.pass));
    }
    let mut cfg = load_config(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let opts = RunOptions {
        out: out_of(cfg.output.clone())?,
        emit_paths: args.emit_paths,
    };
    let summary = run(cfg, &opts)?;
    report(summary.experiment, &summary);
    Ok(summary.pass)
}

fn report(label: &str, s: &rdiss_cli::Summary) {
    for c in &s.checks {
        println!(
            "{label}: {} {} = {:.6e} {} {:.6e}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.relation,
            c.threshold
        );
    }
}
