//! `carrnn` — train and run continuous-time autoregressive recurrent models
//! on sporadic multivariate time series.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use carrnn_cli::checkpoint::Checkpoint;
use carrnn_cli::config::{parse_tau, RunConfig};
use carrnn_cli::pipeline;
use carrnn_core::bptt::run_gradcheck;
use carrnn_core::cells::CellKind;
use carrnn_core::dataset::{self, FillMode, ProcessSpec};

#[derive(Parser, Debug)]
#[command(name = "carrnn", about = "Sequence modeling for sporadic time series", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic sporadic dataset from a linear continuous process.
    Synth(SynthArgs),
    /// Train a model: bin, standardize, impute/mask, fit, and report.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on a dataset.
    Eval(EvalArgs),
    /// Closed-loop prediction from a few context steps per subject.
    Predict(PredictArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Process spec file (flat `key = value`).
    #[arg(long)]
    config: PathBuf,
    /// Output CSV path; a `<out>.truth.txt` sidecar records the generator.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the spec file's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Long-format data CSV (subject_id,time,feature,value).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run configuration file (flat `key = value`); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint, history, report, and splits.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cell type: car_rnn, car_lstm, car_gru, rnn, lstm, gru.
    #[arg(long)]
    cell: Option<String>,
    /// Input completion: none, mean, forward, nearest_concat.
    #[arg(long)]
    fill: Option<String>,
    /// Nominal step: `auto` or a comma-separated grid in raw time units.
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Saved checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Data CSV to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Optional directory for report.txt / report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Number of binned context steps consuming true inputs.
    #[arg(long, default_value_t = 1)]
    n_context: usize,
    /// Output CSV path for per-cell predictions.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Cell to check: all, car_rnn, car_lstm, car_gru.
    #[arg(long, default_value = "all")]
    cell: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    if let Err(err) = result {
        // One line, machine-parsable: "error: <stage>: <cause>".
        let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
        eprintln!("error: {}", chain.join(": "));
        std::process::exit(1);
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading process spec {}", args.config.display()))?;
    let mut spec = ProcessSpec::parse_key_values(&text).context("synth")?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let subjects = dataset::generate_synthetic(&spec).context("synth")?;
    let csv = dataset::write_csv(&subjects);
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&args.out, csv).with_context(|| format!("writing {}", args.out.display()))?;

    let mut truth = String::new();
    truth.push_str("# generating process\n");
    let n = spec.n_features();
    for r in 0..n {
        let row: Vec<String> = (0..n).map(|c| format!("{:.16e}", spec.drift.get(r, c))).collect();
        truth.push_str(&format!("phi_row_{r} = {}\n", row.join(", ")));
    }
    let bias: Vec<String> = spec.bias.data().iter().map(|x| format!("{x:.16e}")).collect();
    truth.push_str(&format!("varsigma = {}\n", bias.join(", ")));
    truth.push_str(&format!("seed = {}\n", spec.seed));
    let sidecar = args.out.with_extension("truth.txt");
    fs::write(&sidecar, truth)?;

    println!(
        "synth: wrote {} subjects to {} (truth sidecar {})",
        subjects.len(),
        args.out.display(),
        sidecar.display()
    );
    Ok(())
}

fn build_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_file(&text).context("config")?;
    }
    if let Some(data) = &args.data {
        cfg.data = Some(data.clone());
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    if let Some(cell) = &args.cell {
        cfg.cell = CellKind::parse(cell).ok_or_else(|| anyhow!("unknown cell '{cell}'"))?;
    }
    if let Some(fill) = &args.fill {
        cfg.fill = match fill.as_str() {
            "none" => None,
            other => Some(FillMode::parse(other).ok_or_else(|| anyhow!("unknown fill '{other}'"))?),
        };
    }
    if let Some(tau) = &args.tau {
        cfg.tau = parse_tau(tau)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read_series(path: &Path) -> Result<Vec<dataset::SporadicSeries>> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading data {}", path.display()))?;
    let series = dataset::read_csv(&text).context("parsing data")?;
    if series.is_empty() {
        bail!("no usable subjects in {}", path.display());
    }
    Ok(series)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = build_config(&args).context("train")?;
    let data_path = cfg.data.clone().ok_or_else(|| anyhow!("train: --data (or config key data) required"))?;
    let out_dir = cfg.out.clone().ok_or_else(|| anyhow!("train: --out (or config key out) required"))?;
    let series = read_series(&data_path).context("train")?;
    let artifacts = pipeline::run_train(&cfg, series).context("train")?;

    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("checkpoint.txt"), artifacts.checkpoint.save()?)?;
    fs::write(out_dir.join("history.csv"), pipeline::history_csv(&artifacts.history))?;
    fs::write(out_dir.join("report.txt"), artifacts.report.text())?;
    fs::write(out_dir.join("report.csv"), artifacts.report.csv())?;
    if artifacts.curve.len() > 1 {
        fs::write(out_dir.join("tau_curve.csv"), pipeline::curve_csv(&artifacts.curve))?;
    }
    fs::write(out_dir.join("train.csv"), dataset::write_csv(&artifacts.splits.train))?;
    fs::write(out_dir.join("val.csv"), dataset::write_csv(&artifacts.splits.val))?;
    fs::write(out_dir.join("test.csv"), dataset::write_csv(&artifacts.splits.test))?;

    print!("{}", artifacts.report.text());
    println!("artifacts written to {}", out_dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let text = fs::read_to_string(&args.model)
        .with_context(|| format!("reading checkpoint {}", args.model.display()))?;
    let ck = Checkpoint::load(&text).context("eval")?;
    let series = read_series(&args.data).context("eval")?;
    let metrics = pipeline::evaluate_checkpoint(&ck, &series).context("eval")?;

    let text_report = format!(
        "cell: {}\nsubjects: {}\neval: mae={:.6} mse={:.6} cells={}\n",
        ck.model.kind.name(),
        series.len(),
        metrics.mae,
        metrics.mse,
        metrics.n_cells
    );
    let csv_report = format!(
        "split,mae,mse,n_cells,tau\neval,{},{},{},{}\n",
        metrics.mae, metrics.mse, metrics.n_cells, ck.tau
    );
    if let Some(out) = &args.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("report.txt"), &text_report)?;
        fs::write(out.join("report.csv"), &csv_report)?;
    }
    print!("{text_report}");
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let text = fs::read_to_string(&args.model)
        .with_context(|| format!("reading checkpoint {}", args.model.display()))?;
    let ck = Checkpoint::load(&text).context("predict")?;
    let series = read_series(&args.data).context("predict")?;
    let (rows, summary) = pipeline::predict_checkpoint(&ck, &series, args.n_context).context("predict")?;

    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(out, pipeline::predictions_csv(&rows))?;
    }
    println!("step,mae,n_cells");
    for s in &summary {
        println!("{},{:.6},{}", s.step, s.mae, s.n_cells);
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let kinds: Vec<CellKind> = match args.cell.as_str() {
        "all" => vec![CellKind::CarRnn, CellKind::CarLstm, CellKind::CarGru],
        other => vec![CellKind::parse(other).ok_or_else(|| anyhow!("unknown cell '{other}'"))?],
    };
    let tol = 1e-6;
    let mut failures = 0usize;
    for kind in kinds {
        let runs = run_gradcheck(kind, args.seed, 5);
        for run in &runs {
            let status = if run.passed(tol) { "PASS" } else { "FAIL" };
            println!(
                "{status} {} [{}] max_rel_err={:.3e}",
                kind.name(),
                run.label,
                run.max_rel_err()
            );
            for group in &run.groups {
                if group.max_rel_err > tol {
                    failures += 1;
                    println!(
                        "  FAIL {}[{}]: analytic={:.9e} fd={:.9e} rel_err={:.3e}",
                        group.name, group.worst_offset, group.analytic, group.numeric, group.max_rel_err
                    );
                }
            }
        }
    }
    if failures > 0 {
        bail!("gradcheck: {failures} parameter group(s) exceeded tolerance {tol:.0e}");
    }
    println!("gradcheck: all gradients match finite differences within {tol:.0e}");
    Ok(())
}
