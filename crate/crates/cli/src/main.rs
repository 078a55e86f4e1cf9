//! `ltfe` command-line driver. Every subcommand prints one JSON document on
//! stdout that starts with the fully resolved configuration.
//!
//! Exit status: 0 on success, 2 for usage, configuration, format, shape and
//! domain errors, 3 for numerical failures.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use ltfe::diffcore::io;
use ltfe::liquid::{evolve_kernel_states, horizon, KernelState};
use ltfe::perturb::{evolve_sequence, trajectory_stats, InjectionStrategy};
use ltfe::pipeline::check::{end_to_end_by_group, gradcheck_suite};
use ltfe::pipeline::*;
use ltfe::temporal::encode;
use ltfe::{LtfeError, Result};

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "ltfe", version, about = "Liquid temporal feature evolution at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the (t, alpha_t, sigma_t) table.
    Schedule {
        #[command(flatten)]
        common: Common,
    },
    /// Perturb an LTF1 feature map; write every step and its statistics.
    Evolve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Horizon and kernel norm per step for an LTF1 feature map.
    Kernels {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        input: PathBuf,
        /// Model to take the encoder and vector field from; a fresh one when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write each kernel as LTF1.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Central-difference gradient checks per module and per parameter group.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on source scenes; write a checkpoint and a metrics CSV.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify freshly generated scenes with a checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: u64,
        /// Checkpoint path.
        #[arg(long)]
        input: PathBuf,
        /// Test-time shift applied to the scenes.
        #[arg(long, default_value_t = 0.0)]
        knob: f64,
    },
    /// Train LTFE and the no-evolution baseline per seed, then compare under shift.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        seed: Vec<u64>,
        /// Comma-separated shift knobs; an empty string gives an empty table.
        #[arg(long, default_value = "0,0.5")]
        knobs: String,
        /// Directory for benchmark.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override with dotted keys, e.g. `schedule.T=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<InjectionStrategy>,
    #[arg(long = "literal-eq1")]
    literal_eq1: bool,
    #[arg(long = "include-positive")]
    include_positive: bool,
    #[arg(long = "infer-T")]
    infer_t: Option<usize>,
}

fn parse_strategy(s: &str) -> std::result::Result<InjectionStrategy, String> {
    s.parse().map_err(|e: LtfeError| e.to_string())
}

impl Common {
    /// Config file (or `base`, or defaults), then `--set`, then dedicated flags.
    fn resolve(&self, base: Option<TrainConfig>, seed: Option<u64>) -> Result<TrainConfig> {
        let start = match (&self.config, base) {
            (Some(path), _) => TrainConfig::load(path)?,
            (None, Some(cfg)) => cfg,
            (None, None) => TrainConfig::default(),
        };
        let mut cfg = start.with_overrides(&self.set)?;
        if let Some(s) = self.strategy {
            cfg.strategy = s;
        }
        cfg.literal_eq1 |= self.literal_eq1;
        cfg.include_positive |= self.include_positive;
        if let Some(t) = self.infer_t {
            cfg.infer_steps = t;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> LtfeError {
    LtfeError::Io { path: path.display().to_string(), source }
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json values serialize")
}

fn schedule(common: &Common) -> Result<Value> {
    let cfg = common.resolve(None, None)?;
    let s = cfg.schedule;
    let rows: Vec<Value> = (1..=s.steps).map(|t| json!({ "t": t, "alpha": s.alpha(t), "sigma": s.sigma(t) })).collect();
    Ok(json!({ "config": cfg.to_json(), "schedule": rows }))
}

fn evolve(common: &Common, seed: Option<u64>, input: &Path, out: &Path) -> Result<Value> {
    let cfg = common.resolve(None, seed)?;
    let f0 = io::read_file(input)?;
    let seq = evolve_sequence(&f0, &cfg.schedule, cfg.evolve_options(), &mut stream(cfg.seed, Stream::Perturbation))?;
    make_dir(out)?;
    let mut files = Vec::with_capacity(seq.len());
    for (i, f) in seq.iter().enumerate() {
        let path = out.join(format!("step_{}.ltf", i + 1));
        io::write_file(&path, f)?;
        files.push(path.display().to_string());
    }
    let stats = serde_json::to_value(trajectory_stats(&f0, &seq, &cfg.schedule)).expect("stats serialize");
    let doc = json!({ "config": cfg.to_json(), "trajectory": stats, "snapshots": files });
    write_text(&out.join("trajectory.json"), &pretty(&doc))?;
    Ok(doc)
}

fn kernels(common: &Common, seed: Option<u64>, input: &Path, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<Value> {
    let (state, base) = match checkpoint {
        Some(p) => {
            let (s, c) = load_checkpoint(p)?;
            (Some(s), Some(c))
        }
        None => (None, None),
    };
    let cfg = common.resolve(base, seed)?;
    let state = state.unwrap_or_else(|| init_model(&cfg));
    let p = &state.params;
    let f0 = io::read_file(input)?;
    let seq = evolve_sequence(&f0, &cfg.schedule, cfg.evolve_options(), &mut stream(cfg.seed, Stream::Perturbation))?;
    let enc = encode(&seq, &p.lstm, &p.fusion)?;
    let w0 = KernelState::new(p.w0.clone())?;
    let ws = evolve_kernel_states(&enc, &p.field, &w0, &cfg.ode)?;
    if let Some(dir) = out {
        make_dir(dir)?;
    }
    let mut rows = Vec::with_capacity(ws.len());
    for (i, w) in ws.iter().enumerate() {
        let t = i + 1;
        if let Some(dir) = out {
            io::write_file(&dir.join(format!("kernel_{t}.ltf")), w.tensor())?;
        }
        rows.push(json!({
            "t": t,
            "tau_hat": horizon(&enc, t, &cfg.ode)?,
            "encoding_norm": enc.steps[i].l2_norm(),
            "kernel_norm": w.tensor().l2_norm(),
        }));
    }
    Ok(json!({ "config": cfg.to_json(), "w0_norm": w0.tensor().l2_norm(), "kernels": rows }))
}

fn gradcheck(common: &Common, seed: Option<u64>) -> Result<(Value, bool)> {
    let cfg = common.resolve(None, seed)?;
    let modules = gradcheck_suite(&cfg, cfg.seed)?;
    let groups = end_to_end_by_group(&cfg, cfg.seed)?;
    let passed = modules.iter().all(|m| m.max_rel_error < GRADCHECK_TOL) && groups.iter().all(|g| g.1 < GRADCHECK_TOL);
    let groups: Vec<Value> = groups.iter().map(|(g, e)| json!({ "group": g.name(), "max_rel_error": e })).collect();
    let doc = json!({
        "config": cfg.to_json(),
        "tolerance": GRADCHECK_TOL,
        "modules": serde_json::to_value(&modules).expect("reports serialize"),
        "groups": groups,
        "passed": passed,
    });
    Ok((doc, passed))
}

fn train_cmd(common: &Common, seed: u64, out: &Path) -> Result<Value> {
    let cfg = common.resolve(None, Some(seed))?;
    let run = train(&cfg)?;
    make_dir(out)?;
    let ckpt = out.join("checkpoint.ltf");
    let metrics = out.join("metrics.csv");
    save_checkpoint(&run.state, &cfg, &ckpt)?;
    write_text(&metrics, &metrics_csv(&run.metrics))?;
    Ok(json!({
        "config": cfg.to_json(),
        "accepted_steps": run.metrics.len(),
        "rejected_steps": serde_json::to_value(&run.rejected).expect("rows serialize"),
        "final_losses": run.metrics.last().map(|m| serde_json::to_value(m.losses).expect("losses serialize")),
        "checkpoint": ckpt.display().to_string(),
        "manifest": manifest_path(&ckpt).display().to_string(),
        "metrics": metrics.display().to_string(),
    }))
}

fn infer_cmd(common: &Common, seed: u64, input: &Path, knob: f64) -> Result<Value> {
    let (state, base) = load_checkpoint(input)?;
    let cfg = common.resolve(Some(base), Some(seed))?;
    let mut scene_rng = stream(seed, Stream::EvalScenes);
    let scenes = generate_scenes(cfg.eval_scenes, cfg.scene_size, cfg.proposals, cfg.classes, &mut scene_rng)?;
    let mut shift = stream(seed, Stream::Shift);
    let mut noise = stream(seed, Stream::Inference);
    let (mut hit, mut total) = (0usize, 0usize);
    let mut rows = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let pred = infer(&state, &s.shifted(knob, &mut shift)?, &cfg, &mut noise)?;
        let classes = pred.classes();
        hit += classes.iter().zip(&s.labels).filter(|(a, b)| a == b).count();
        total += s.labels.len();
        let scores: Vec<&[f64]> = pred.scores.data().chunks(cfg.classes).collect();
        rows.push(json!({ "labels": s.labels, "predicted": classes, "scores": scores }));
    }
    Ok(json!({
        "config": cfg.to_json(),
        "knob": knob,
        "accuracy": hit as f64 / total as f64,
        "scenes": rows,
    }))
}

fn parse_knobs(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .map(|k| k.parse().map_err(|_| LtfeError::Config(format!("knob {k:?} is not a number"))))
        .collect()
}

fn benchmark_cmd(common: &Common, seeds: &[u64], knobs: &str, out: Option<&Path>) -> Result<Value> {
    let cfg = common.resolve(None, None)?;
    let knobs = parse_knobs(knobs)?;
    let mut trained = Vec::with_capacity(seeds.len());
    if !knobs.is_empty() {
        for &s in seeds {
            let c = TrainConfig { seed: s, ..cfg.clone() };
            trained.push((s, train(&c)?.state, train(&baseline_config(&c))?.state));
        }
    }
    let models: Vec<BenchModels> = trained.iter().map(|(s, l, b)| BenchModels { seed: *s, ltfe: l, baseline: b }).collect();
    let rows = benchmark(&models, &cfg, &knobs)?;
    let csv = benchmark_csv(&rows);
    if let Some(dir) = out {
        make_dir(dir)?;
        write_text(&dir.join("benchmark.csv"), &csv)?;
    }
    let summary: Vec<Value> = knobs
        .iter()
        .map(|&k| {
            let cell: Vec<&BenchRow> = rows.iter().filter(|r| r.knob == k).collect();
            let (lm, ls) = mean_std(&cell.iter().map(|r| r.ltfe_accuracy).collect::<Vec<_>>());
            let (bm, bs) = mean_std(&cell.iter().map(|r| r.baseline_accuracy).collect::<Vec<_>>());
            json!({ "knob": k, "ltfe_mean": lm, "ltfe_std": ls, "baseline_mean": bm, "baseline_std": bs })
        })
        .collect();
    Ok(json!({
        "config": cfg.to_json(),
        "seeds": seeds,
        "knobs": knobs,
        "rows": serde_json::to_value(&rows).expect("rows serialize"),
        "summary": summary,
    }))
}

fn run(cli: Cli) -> Result<(Value, bool)> {
    let ok = |v: Value| (v, true);
    match &cli.command {
        Command::Schedule { common } => schedule(common).map(ok),
        Command::Evolve { common, seed, input, out } => evolve(common, *seed, input, out).map(ok),
        Command::Kernels { common, seed, input, checkpoint, out } => {
            kernels(common, *seed, input, checkpoint.as_deref(), out.as_deref()).map(ok)
        }
        Command::Gradcheck { common, seed } => gradcheck(common, *seed),
        Command::Train { common, seed, out } => train_cmd(common, *seed, out).map(ok),
        Command::Infer { common, seed, input, knob } => infer_cmd(common, *seed, input, *knob).map(ok),
        Command::Benchmark { common, seed, knobs, out } => benchmark_cmd(common, seed, knobs, out.as_deref()).map(ok),
    }
}

fn exit_code(e: &LtfeError) -> u8 {
    match e {
        LtfeError::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((doc, passed)) => {
            // A closed pipe downstream is not an error of ours.
            let _ = writeln!(std::io::stdout().lock(), "{}", pretty(&doc));
            if passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("ltfe: gradient check exceeded tolerance {GRADCHECK_TOL}");
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("ltfe: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
