use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use multitraj::data::{builtin_splits, generate_synthetic, load_jsonl, save_jsonl, DataError, Dataset, DomainProfile, KNOWN_DOMAINS};
use multitraj::eval::{
    ablation_suite, create_file, embeddings, evaluate, merge_normalized, write_ablation, write_embeddings, write_reports, AblationGrid, Method,
    Mode, ProtocolReport, ProtocolSpec,
};
use multitraj::metrics::{gt_stats, write_gt_stats};
use multitraj::train::{fit, Checkpoint, FitOptions, TrainConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "multitraj", version, about = "Train and evaluate role- and domain-aware trajectory models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as JSON lines.
    GenData(GenData),
    /// Ground-truth motion statistics per domain and role.
    Stats(Stats),
    /// Train a model; several --data files are merged into one unified set.
    Train(Train),
    /// Score a checkpoint or a baseline (mean, median, linear) on test data.
    Eval(Eval),
    /// Train and score every cell of an ablation grid.
    Ablate(Ablate),
    /// Write role- and domain-space embeddings of every agent.
    ExportEmbeddings(Export),
}

#[derive(Args)]
struct GenData {
    #[arg(long, default_value = "basketball")]
    profile: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 5)]
    agents: usize,
    #[arg(long, default_value_t = 24)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Stats {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Directory for checkpoint.json and log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    S2s,
    U2s,
}

#[derive(Args)]
struct Eval {
    /// A checkpoint file, or one of the baselines mean, median, linear.
    #[arg(long)]
    ckpt: String,
    /// Test sets, one domain each.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "u2s")]
    protocol: Protocol,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clamp completions into the field before scoring.
    #[arg(long)]
    clip: bool,
}

#[derive(Args)]
struct Ablate {
    /// A JSON grid file, or `tables` for the adapter and contrastive tables.
    #[arg(long)]
    grid: String,
    #[arg(long)]
    out: PathBuf,
    /// Seeds for `--grid tables`.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Base training config shared by every cell.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training sets; without them the builtin synthetic task is used.
    #[arg(long)]
    train: Vec<PathBuf>,
    #[arg(long)]
    test: Vec<PathBuf>,
    #[arg(long, default_value_t = 20)]
    k: usize,
    /// Seed of the builtin synthetic task.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct Export {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", &e.kind().to_string(), e.render().to_string().trim()),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| match (c.downcast_ref::<multitraj::Error>(), c.is::<DataError>()) {
                    (Some(m), _) => Some(m.kind()),
                    (None, true) => Some("data"),
                    (None, false) => None,
                })
                .unwrap_or("io");
            fail(kind, &format!("{e:#}"), "")
        }
    }
}

fn fail(kind: &str, message: &str, detail: &str) -> ExitCode {
    let mut line = json!({ "error": kind, "message": message });
    if !detail.is_empty() {
        line["detail"] = json!(detail);
    }
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Stats(a) => stats(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportEmbeddings(a) => export(a),
    }
}

fn announce(block: serde_json::Value) -> Result<()> {
    println!("resolved config:\n{}", serde_json::to_string_pretty(&block)?);
    Ok(())
}

fn load(path: &Path) -> Result<Dataset> {
    load_jsonl(path).with_context(|| format!("reading {}", path.display()))
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    paths.iter().map(|p| load(p)).collect()
}

fn finish(mut w: BufWriter<fs::File>, path: &Path) -> Result<()> {
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn gen_data(a: GenData) -> Result<()> {
    let profile = match DomainProfile::builtin(&a.profile) {
        Some(p) => p,
        None => {
            let text = fs::read_to_string(&a.profile).with_context(|| format!("`{}` is neither a builtin profile nor a readable file", a.profile))?;
            serde_json::from_str(&text).with_context(|| format!("parsing profile {}", a.profile))?
        }
    };
    announce(json!({ "command": "gen-data", "profile": profile.domain, "n": a.n, "agents": a.agents, "steps": a.steps, "seed": a.seed }))?;
    let data = generate_synthetic(&profile, a.n, a.agents, a.steps, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_jsonl(&data, &a.out)?;
    println!("wrote {} ({} sequences)", a.out.display(), data.len());
    for ((domain, role), s) in gt_stats(&data)? {
        println!("  {domain:<10} {role:<6} step {:.3}  path_l {:.3}  path_d {:.3}", s.step, s.path_l, s.path_d_discrepancy);
    }
    Ok(())
}

fn stats(a: Stats) -> Result<()> {
    announce(json!({ "command": "stats", "data": a.data, "out": a.out }))?;
    let data = load(&a.data)?;
    let mut w = BufWriter::new(create_file(&a.out)?);
    write_gt_stats(&gt_stats(&data)?, &mut w)?;
    finish(w, &a.out)
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn train(a: Train) -> Result<()> {
    let mut cfg = train_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let sets = load_all(&a.data)?;
    let data = if sets.len() == 1 { sets.into_iter().next().unwrap() } else { merge_normalized(&sets)? };
    let resolved = cfg.resolve(&multitraj::train::normalized(&data)?)?;
    announce(json!({ "command": "train", "data": a.data, "out": a.out, "seed": resolved.seed, "config": resolved }))?;
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let result = fit(&data, &cfg, FitOptions { out_dir: Some(a.out.clone()), resume })?;
    if let (Some(first), Some(last)) = (result.log.first(), result.log.last()) {
        println!("epoch {}: total {:.4}; epoch {}: total {:.4}", first.epoch, first.total, last.epoch, last.total);
    }
    println!("wrote {} and {}", a.out.join("checkpoint.json").display(), a.out.join("log.csv").display());
    Ok(())
}

fn single_domain(d: &Dataset, path: &Path) -> Result<String> {
    match d.domains().as_slice() {
        [one] => Ok(one.clone()),
        other => bail!("{} holds {} domains {other:?}; test sets must hold one", path.display(), other.len()),
    }
}

fn eval(a: Eval) -> Result<()> {
    let checkpoint = match Method::baseline(&a.ckpt) {
        Some(_) => None,
        None => Some(Checkpoint::load(Path::new(&a.ckpt))?),
    };
    let mode = match a.protocol {
        Protocol::S2s => Mode::S2S,
        Protocol::U2s => Mode::U2S,
    };
    announce(json!({ "command": "eval", "ckpt": a.ckpt, "data": a.data, "protocol": format!("{mode:?}"), "k": a.k, "seed": a.seed, "clip": a.clip }))?;
    let mut reports = Vec::new();
    for (path, test) in a.data.iter().zip(load_all(&a.data)?) {
        let domain = single_domain(&test, path)?;
        let (method, trained_on) = match &checkpoint {
            Some(ck) => (Method::Model(&ck.model), ck.model.trained_on.clone()),
            None => (Method::baseline(&a.ckpt).unwrap(), Vec::new()),
        };
        let train_domains = match (mode, trained_on.is_empty()) {
            (_, false) => trained_on,
            (Mode::S2S, true) => vec![domain.clone()],
            (Mode::U2S, true) => KNOWN_DOMAINS.iter().map(|d| d.to_string()).collect(),
        };
        let protocol = ProtocolSpec { k: a.k, clip: a.clip, ..ProtocolSpec::new(mode, train_domains, domain.clone(), a.seed) };
        let report = evaluate(method, &test, &protocol)?;
        if let Some(all) = report.get(&domain, "all") {
            println!("{domain}: minADE {:.4}  OOB {:.4}", all.min_ade, all.oob_rate);
        }
        reports.push(ProtocolReport { mode, method: method.name().into(), domain, report });
    }
    let mut w = BufWriter::new(create_file(&a.out)?);
    write_reports(&reports, &mut w)?;
    finish(w, &a.out)
}

fn ablate(a: Ablate) -> Result<()> {
    let grid = if a.grid == "tables" {
        AblationGrid::tables(a.seeds.clone())
    } else {
        let text = fs::read_to_string(&a.grid).with_context(|| format!("reading grid {}", a.grid))?;
        serde_json::from_str(&text).with_context(|| format!("parsing grid {}", a.grid))?
    };
    let base = train_config(a.config.as_deref())?;
    let (trains, tests) = if a.train.is_empty() && a.test.is_empty() {
        builtin_splits(200, 50, 5, 24, a.seed)?
    } else if a.train.is_empty() || a.test.is_empty() {
        bail!("--train and --test must be given together");
    } else {
        (load_all(&a.train)?, load_all(&a.test)?)
    };
    announce(json!({ "command": "ablate", "grid": grid, "base": base, "k": a.k, "jobs": a.jobs, "seed": a.seed, "train": a.train, "test": a.test }))?;
    let rows = ablation_suite(&grid, &trains, &tests, &base, a.k, a.jobs)?;
    let mut w = BufWriter::new(create_file(&a.out)?);
    write_ablation(&rows, &mut w)?;
    finish(w, &a.out)
}

fn export(a: Export) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    announce(json!({ "command": "export-embeddings", "ckpt": a.ckpt, "data": a.data, "out": a.out }))?;
    let sets = load_all(&a.data)?;
    let data = merge_normalized(&sets)?;
    let rows = embeddings(&ck.model, &data)?;
    let mut w = BufWriter::new(create_file(&a.out)?);
    write_embeddings(&rows, &mut w)?;
    finish(w, &a.out)
}
