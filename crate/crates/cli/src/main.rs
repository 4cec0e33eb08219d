use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mfflab::analysis::{
    feature_bias_probe, fixed_batches, hessian_spectrum, layer_frequency_report, track_weights, HessianOptions,
    HessianScope, WeightTrajectory,
};
use mfflab::config::ExperimentConfig;
use mfflab::data::{generate_synthetic, stratified_split, stratified_subset, Dataset};
use mfflab::evalkit::{finetune, probe_encoder, EvalRecord, FinetuneConfig, ProbeConfig};
use mfflab::model::TargetMode;
use mfflab::report::{Provenance, Table, BUILD_VERSION};
use mfflab::trainer::{load_checkpoint, log_table, save_checkpoint, train_loop, TrainLogRecord, TrainState};

#[derive(Parser)]
#[command(
    name = "mfflab",
    version,
    about = "Masked image modelling with multi-level feature fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic grating dataset.
    GenData(GenData),
    /// Pre-train a model; writes checkpoint, training log and weight trajectory.
    Pretrain(Pretrain),
    /// Linear probe on frozen encoder features.
    Probe(Probe),
    /// End-to-end fine-tuning on a class-stratified fraction of the train split.
    Finetune(Finetune),
    /// Analysis instruments.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Fusion-weight trajectories under pixel and feature targets.
    ProbeBias(ProbeBias),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long, required_unless_present = "resume")]
    config: Option<PathBuf>,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides `dataset` from the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Continue from a checkpoint instead of a fresh initialisation.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Stop once this many updates have been applied in total.
    #[arg(long)]
    stop_at: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fraction of the train split used for training, per class.
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Held-out share of every class.
    #[arg(long, default_value_t = 0.25)]
    eval_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Result JSON path; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Probe {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
}

#[derive(Args)]
struct Finetune {
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Subcommand)]
enum Analyze {
    /// Fusion-weight trajectory from a training log.
    Weights {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Relative log amplitude of every encoder layer.
    Freq {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        bins: usize,
        /// Number of leading dataset images analysed.
        #[arg(long, default_value_t = 64)]
        images: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dominant Hessian eigenvalue per mini-batch.
    Hessian {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        batches: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, value_enum, default_value_t = Scope::All)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    All,
    Encoder,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BiasTarget {
    Pixels,
    Features,
    Both,
}

#[derive(Args)]
struct ProbeBias {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    target: BiasTarget,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            println!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn progress(quiet: bool) -> impl FnMut(&TrainState, &TrainLogRecord) -> mfflab::Result<()> {
    move |_, r| {
        if !quiet {
            eprintln!("step {} loss {:.6} lr {:.3e}", r.step, r.loss, r.lr);
        }
        Ok(())
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let data = generate_synthetic(a.seed, a.n, a.classes, a.size)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    data.write(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn pretrain(a: Pretrain) -> Result<()> {
    let mut state = match (&a.resume, &a.config) {
        (Some(ckpt), _) => load_checkpoint(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?,
        (None, Some(cfg)) => TrainState::new(ExperimentConfig::load(cfg)?)?,
        (None, None) => bail!("either --config or --resume is required"),
    };
    let data_path = a
        .data
        .or_else(|| state.config.dataset.clone())
        .context("no dataset: pass --data or set `dataset` in the config")?;
    let out_dir = a
        .out_dir
        .or_else(|| state.config.out_dir.clone())
        .context("no output directory: pass --out-dir or set `out_dir` in the config")?;
    let data = load_data(&data_path)?;
    fs::create_dir_all(&out_dir)?;

    let mut cb = progress(a.quiet);
    let out = train_loop(&mut state, &data, &mut [&mut cb], a.stop_at)?;
    let prov = state.provenance();
    let ckpt = out_dir.join("checkpoint.ckpt");
    save_checkpoint(&ckpt, &state)?;
    fs::write(out_dir.join("config.toml"), state.config.canonical_text())?;
    log_table(&out.records, Some(prov.clone())).write(out_dir.join("train_log.csv"))?;
    if state.config.model.mff.is_some() {
        WeightTrajectory::from_records(&out.records)?
            .to_table(Some(prov))
            .write(out_dir.join("weights.csv"))?;
    }
    println!(
        "wrote {} (step {}, final loss {})",
        ckpt.display(),
        state.step(),
        out.losses.last().map_or("n/a".into(), |l| l.to_string())
    );
    Ok(())
}

struct Split {
    train: Vec<usize>,
    eval: Vec<usize>,
}

fn split(data: &Dataset, a: &EvalArgs) -> Result<Split> {
    let (train, eval) = stratified_split(&data.labels, data.classes, a.eval_fraction, a.seed)?;
    let train = if a.fraction < 1.0 {
        stratified_subset(&data.labels, &train, data.classes, a.fraction, a.seed)?
    } else if a.fraction == 1.0 {
        train
    } else {
        bail!(mfflab::Error::Config {
            key: "fraction".into(),
            msg: format!("{} outside (0, 1]", a.fraction),
        });
    };
    Ok(Split { train, eval })
}

fn record(protocol: &str, a: &EvalArgs, epochs: usize, top1: f64, state: &TrainState) -> EvalRecord {
    EvalRecord {
        protocol: protocol.into(),
        fraction: a.fraction,
        epochs,
        top1,
        seed: a.seed,
        checkpoint: a.checkpoint.display().to_string(),
        config_hash: state.config.hash(),
        version: BUILD_VERSION.into(),
    }
}

fn probe(p: Probe) -> Result<()> {
    let state = load_checkpoint(&p.eval.checkpoint)?;
    let data = load_data(&p.eval.data)?;
    let s = split(&data, &p.eval)?;
    let cfg = ProbeConfig {
        epochs: p.epochs,
        lr: p.lr,
        seed: p.eval.seed,
        ..ProbeConfig::default()
    };
    let r = probe_encoder(&state.model, &data, &s.train, &s.eval, &cfg)?;
    let rec = record("linear_probe", &p.eval, p.epochs, r.top1, &state);
    write_or_print(p.eval.out.as_deref(), &(rec.to_json() + "\n"))
}

fn finetune_cmd(f: Finetune) -> Result<()> {
    let state = load_checkpoint(&f.eval.checkpoint)?;
    let data = load_data(&f.eval.data)?;
    let s = split(&data, &f.eval)?;
    let cfg = FinetuneConfig {
        epochs: f.epochs,
        batch_size: f.batch_size,
        lr: f.lr,
        seed: f.eval.seed,
        ..FinetuneConfig::default()
    };
    let r = finetune(&state.model, &data, &s.train, &s.eval, &cfg)?;
    let rec = record("finetune", &f.eval, f.epochs, r.top1, &state);
    write_or_print(f.eval.out.as_deref(), &(rec.to_json() + "\n"))
}

fn analyze(a: Analyze) -> Result<()> {
    match a {
        Analyze::Weights { log, out } => {
            let table = Table::read(&log).with_context(|| format!("reading {}", log.display()))?;
            let t = track_weights(&table)?;
            write_or_print(out.as_deref(), &t.to_table(table.provenance.clone()).to_csv())
        }
        Analyze::Freq {
            checkpoint,
            data,
            bins,
            images,
            out,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let data = load_data(&data)?;
            let n = images.min(data.len());
            let batch = data.batch(&(0..n).collect::<Vec<_>>());
            let report = layer_frequency_report(&state.model, &batch, bins)?;
            write_or_print(out.as_deref(), &report.to_table(Some(state.provenance())).to_csv())
        }
        Analyze::Hessian {
            checkpoint,
            data,
            batches,
            batch_size,
            iters,
            tol,
            scope,
            seed,
            out,
        } => {
            let state = load_checkpoint(&checkpoint)?;
            let data = load_data(&data)?;
            let fixed = fixed_batches(&state.model, state.teacher.as_ref(), &data, batches, batch_size, seed)?;
            let opts = HessianOptions {
                max_iters: iters,
                tol,
                scope: match scope {
                    Scope::All => HessianScope::All,
                    Scope::Encoder => HessianScope::Encoder,
                },
                seed,
            };
            let report = hessian_spectrum(&state.model, &fixed, &opts);
            for r in &report.records {
                if let Some(e) = &r.error {
                    eprintln!("batch {} failed: {e}", r.batch);
                }
            }
            write_or_print(out.as_deref(), &report.to_table(Some(state.provenance())).to_csv())
        }
    }
}

fn probe_bias(p: ProbeBias) -> Result<()> {
    let config = ExperimentConfig::load(&p.config)?;
    let data_path = p
        .data
        .or_else(|| config.dataset.clone())
        .context("no dataset: pass --data or set `dataset` in the config")?;
    let out_dir = p
        .out_dir
        .or_else(|| config.out_dir.clone())
        .context("no output directory: pass --out-dir or set `out_dir` in the config")?;
    let data = load_data(&data_path)?;
    fs::create_dir_all(&out_dir)?;
    let targets: &[(TargetMode, &str, f64)] = match p.target {
        BiasTarget::Pixels => &[(TargetMode::RawPixelsNormalized, "pixels", 0.0)],
        BiasTarget::Features => &[(TargetMode::FeatureRegression, "features", 1.0)],
        BiasTarget::Both => &[
            (TargetMode::RawPixelsNormalized, "pixels", 0.0),
            (TargetMode::FeatureRegression, "features", 1.0),
        ],
    };
    let mut finals: Option<Table> = None;
    for &(mode, name, code) in targets {
        let mut cb = progress(p.quiet);
        let run = feature_bias_probe(mode, &config, &data, &mut [&mut cb])?;
        let prov: Provenance = run.state.provenance();
        let path = out_dir.join(format!("alpha_{name}.csv"));
        run.trajectory.to_table(Some(prov.clone())).write(&path)?;
        println!("wrote {}", path.display());
        let t = finals.get_or_insert_with(|| {
            let mut header = vec!["target".to_string()];
            header.extend((0..run.final_alpha.len()).map(|i| format!("alpha_{i}")));
            Table::new(Some(prov), header)
        });
        let mut row = vec![code];
        row.extend_from_slice(&run.final_alpha);
        t.push(row);
    }
    let path = out_dir.join("final_alpha.csv");
    finals.expect("at least one target").write(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Analyze(a) => analyze(a),
        Command::ProbeBias(a) => probe_bias(a),
    }
}

/// `error kind=<kind> [key=<config key>] msg="<message>"` on one line.
fn error_line(err: &anyhow::Error) -> String {
    let (kind, key) = match err.chain().find_map(|e| e.downcast_ref::<mfflab::Error>()) {
        Some(mfflab::Error::Config { key, .. }) => ("config", Some(key.clone())),
        Some(e) => (e.kind(), None),
        None if err.chain().any(|e| e.is::<std::io::Error>()) => ("io", None),
        None => ("error", None),
    };
    let msg = format!("{err:#}").replace('\n', " ");
    match key {
        Some(k) => format!("error kind={kind} key={k} msg={msg:?}"),
        None => format!("error kind={kind} msg={msg:?}"),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MFF_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| mfflab::Error::Config {
            key: "MFF_THREADS".into(),
            msg: format!("expected a positive integer, got {v:?}"),
        })?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error kind=usage msg={first:?}");
            return ExitCode::from(2);
        }
    };
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
