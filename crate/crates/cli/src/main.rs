//! `tesla`: train teachers, distill, evaluate, benchmark and inspect files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use tesla_core::config::{apply_override, preset, RunConfig, PRESET_NAMES};
use tesla_core::distill::{distill, SyntheticDataset};
use tesla_core::eval::{bench_memory_runtime, cross_arch_eval, desk_arch_list, evaluate_real, evaluate_synthetic, records_to_csv};
use tesla_core::trajectory::{TeacherConfig, Trajectory, TrajectoryStore, MANIFEST_NAME};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] tesla_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use tesla_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(E::TooManyDegenerate { .. } | E::DegenerateSegment(_)) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "tesla", version, about = "Constant-memory trajectory-matching dataset distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train teacher trajectories and save them as a store.
    TrainTeachers(RunArgs),
    /// Distill a synthetic set; writes synthetic.tsyn, run_log.jsonl and config.json.
    Distill(RunArgs),
    /// Evaluate a synthetic set, or the full training set with --real.
    Eval(EvalArgs),
    /// Peak graph size and runtime against the number of matching steps; writes bench.csv.
    Bench(RunArgs),
    /// Print metadata of a synthetic file, trajectory file, store or config.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run config, or a run log whose first line echoes one.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset; see `--preset list`.
    #[arg(long)]
    preset: Option<String>,
    /// Override one field, e.g. `matching_steps=100` or `eval.seeds=0,1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for distillation.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Teacher store directory; defaults to `<out>/store`.
    #[arg(long)]
    store: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Synthetic file; defaults to `<out>/synthetic.tsyn`.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Evaluate on the full training set instead.
    #[arg(long, conflicts_with = "synthetic")]
    real: bool,
    /// Also evaluate the desk architecture list.
    #[arg(long)]
    cross_arch: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `tesla --help` for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainTeachers(args) => {
            let cfg = resolve(&args)?;
            let store = load_or_build_store(&cfg, &args, true)?;
            for (i, t) in store.trajectories.iter().enumerate() {
                println!("teacher {i}: {} epochs, test accuracy {:?}", t.epochs(), t.test_accuracy);
            }
            Ok(())
        }
        Command::Distill(args) => run_distill(&args),
        Command::Eval(args) => run_eval(&args),
        Command::Bench(args) => {
            let cfg = resolve(&args)?;
            let b = &cfg.bench;
            let summary = bench_memory_runtime(&b.fixture, &b.t_sweep, &b.modes)?;
            let csv = records_to_csv(&summary.records);
            let path = args.out.join("bench.csv");
            create_dir(&args.out)?;
            write(&path, csv.as_bytes())?;
            write(&args.out.join("config.json"), &pretty(&cfg)?)?;
            print!("{csv}");
            if let Some(fit) = summary.full_unroll_fit {
                println!("full unroll peak nodes ~ {:.1}·T + {:.1} (R² {:.4})", fit.slope, fit.intercept, fit.r2);
            }
            if !summary.truncated.is_empty() {
                println!("full unroll skipped for T = {:?} (byte budget)", summary.truncated);
            }
            Ok(())
        }
        Command::Inspect { path } => inspect(&path),
    }
}

/// Preset or config file, then `--set` overrides in order, then `--seed`.
fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut value = match (&args.config, &args.preset) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--config and --preset are mutually exclusive".into())),
        (None, None) => return Err(CliError::Usage("one of --config or --preset is required".into())),
        (None, Some(name)) if name == "list" => {
            return Err(CliError::Usage(format!("available presets: {}", PRESET_NAMES.join(", "))))
        }
        (None, Some(name)) => {
            let cfg = preset(name).ok_or_else(|| {
                CliError::Usage(format!("unknown preset {name}; available: {}", PRESET_NAMES.join(", ")))
            })?;
            serde_json::to_value(cfg).map_err(tesla_core::Error::from)?
        }
        (Some(path), None) => read_config_value(path)?,
    };
    for set in &args.sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {set:?}")))?;
        apply_override(&mut value, key.trim(), raw.trim()).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        value["distill"]["seed"] = json!(seed);
    }
    let cfg = RunConfig::from_value(value).map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(note) = &cfg.note {
        eprintln!("note: {note}");
    }
    Ok(cfg)
}

fn read_config_value(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    if let Ok(v) = serde_json::from_str::<Value>(&text) {
        return Ok(v);
    }
    let first = text.lines().next().unwrap_or_default();
    match serde_json::from_str::<Value>(first) {
        Ok(Value::Object(mut header)) if header.contains_key("config") => Ok(header.remove("config").unwrap()),
        _ => Err(CliError::Usage(format!("{} is neither a JSON config nor a run log", path.display()))),
    }
}

fn store_dir(args: &RunArgs) -> PathBuf {
    args.store.clone().unwrap_or_else(|| args.out.join("store"))
}

/// Opens the store when one exists for the same data, otherwise trains it.
fn load_or_build_store(cfg: &RunConfig, args: &RunArgs, rebuild: bool) -> Result<TrajectoryStore> {
    let (train, test, _) = cfg.datasets()?;
    let dir = store_dir(args);
    if !rebuild && dir.join(MANIFEST_NAME).exists() {
        match TrajectoryStore::open(&dir, Some(&train.fingerprint())) {
            Ok(store)
                if store.arch() == &cfg.arch
                    && store.len() == cfg.trajectories
                    && store.trajectories.iter().enumerate().all(|(i, t)| {
                        t.config == TeacherConfig { seed: cfg.teacher.seed.wrapping_add(i as u64), ..cfg.teacher.clone() }
                    }) =>
            {
                return Ok(store)
            }
            Ok(_) | Err(tesla_core::Error::FingerprintMismatch { .. }) => {}
            Err(e) => return Err(e.into()),
        }
        eprintln!("store at {} was built with different settings; retraining", dir.display());
    }
    let store = TrajectoryStore::build(&train, Some(&test), &cfg.arch, &cfg.teacher, cfg.trajectories)?;
    create_dir(&dir)?;
    store.save(&dir)?;
    Ok(store)
}

fn run_distill(args: &RunArgs) -> Result<()> {
    let cfg = resolve(args)?;
    let (train, _, zca) = cfg.datasets()?;
    let store = load_or_build_store(&cfg, args, false)?;
    let outcome = distill(&cfg.distill, &store, &train, None)?;
    let mut syn = outcome.synthetic;
    create_dir(&args.out)?;
    if let Some(z) = &zca {
        syn.zca = Some(format!("zca.json (epsilon {})", z.epsilon));
        write(&args.out.join("zca.json"), &pretty(z)?)?;
    }
    write(&args.out.join("synthetic.tsyn"), &syn.encode()?)?;
    write(&args.out.join("config.json"), &pretty(&cfg)?)?;

    let mut log = serde_json::to_string(&json!({ "config": cfg })).map_err(tesla_core::Error::from)?;
    log.push('\n');
    for rec in &outcome.log {
        log.push_str(&serde_json::to_string(rec).map_err(tesla_core::Error::from)?);
        log.push('\n');
    }
    write(&args.out.join("run_log.jsonl"), log.as_bytes())?;

    let last = outcome.log.iter().rev().find(|r| !r.skipped);
    println!(
        "distilled {} images ({} per class) in {} iterations; final loss {:.4}, student lr {:.5}, {} degenerate segments",
        syn.len(),
        syn.ipc,
        outcome.log.len(),
        last.map_or(f64::NAN, |r| r.loss),
        syn.beta,
        outcome.degenerate
    );
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let cfg = resolve(&args.run)?;
    let (train, test, _) = cfg.datasets()?;
    let reports = if args.real {
        vec![evaluate_real(&train, &test, &cfg.arch, &cfg.eval)?]
    } else {
        let path = args.synthetic.clone().unwrap_or_else(|| args.run.out.join("synthetic.tsyn"));
        let syn = SyntheticDataset::load(&path)?;
        let mut reports = vec![evaluate_synthetic(&syn, &test, &cfg.arch, &cfg.eval)?];
        if args.cross_arch {
            let archs: Vec<_> = desk_arch_list(cfg.arch.classes, cfg.arch.input, cfg.arch.width)
                .into_iter()
                .filter(|a| a.validate().is_ok())
                .collect();
            reports.extend(cross_arch_eval(&syn, &test, &archs, &cfg.eval)?);
        }
        reports
    };
    for r in &reports {
        println!("{}: {:.4} ± {:.4} over {} seeds", r.arch.name(), r.mean, r.std, r.accuracies.len());
    }
    create_dir(&args.run.out)?;
    write(&args.run.out.join("eval.json"), &pretty(&reports)?)?;
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let info = if path.is_dir() {
        let manifest = path.join(MANIFEST_NAME);
        serde_json::from_slice::<Value>(&read(&manifest)?).map_err(tesla_core::Error::from)?
    } else {
        let bytes = read(path)?;
        match bytes.get(..8) {
            Some(b"TESLASYN") => serde_json::to_value(SyntheticDataset::decode(&bytes)?.meta()).map_err(tesla_core::Error::from)?,
            Some(b"TESLATRJ") => {
                let t = Trajectory::decode(&bytes, None)?;
                json!({
                    "arch": t.arch,
                    "teacher": t.config,
                    "epochs": t.epochs(),
                    "param_count": t.arch.param_count(),
                    "test_accuracy": t.test_accuracy,
                })
            }
            _ => serde_json::from_slice::<Value>(&bytes)
                .map_err(|_| CliError::Usage(format!("{}: unrecognized file", path.display())))?,
        }
    };
    println!("{}", serde_json::to_string_pretty(&info).map_err(tesla_core::Error::from)?);
    Ok(())
}

fn pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value).map_err(tesla_core::Error::from)?;
    out.push(b'\n');
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.into(), source })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| CliError::Io { path: path.into(), source })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|source| CliError::Io { path: path.into(), source })?;
    f.write_all(bytes).map_err(|source| CliError::Io { path: path.into(), source })
}
