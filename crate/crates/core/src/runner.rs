//! Command-line verbs: `gen-data`, `pretrain`, `run`, `gradcheck`, `report`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::backbone::{pretrain_backbone, Backbone};
use crate::checkpoint::{load_backbone, load_checkpoint, save_backbone, save_checkpoint};
use crate::config::Config;
use crate::data::{apply_task_order, read_clds, write_clds, Dataset, TaskSplit};
use crate::error::{Error, Result};
use crate::gradcheck_suite::{run_suite, SUITE_TOLERANCE};
use crate::metrics::{export_report, read_accmatrix, write_accmatrix, AccuracyMatrix, ModeSummary, Report, SeedResult};
use crate::trainer::{end_accuracies, run_sequence, ContinualState, Scheme};

pub const BASE_FILE: &str = "base.clds";
pub const CONTINUAL_FILE: &str = "continual.clds";

#[derive(Debug, Parser)]
#[command(name = "linklearn", version, about = "Continual learning with linked adapters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic base and continual datasets.
    GenData(CommonArgs),
    /// Pretrain and freeze the backbone on the base classes.
    Pretrain(PretrainArgs),
    /// Run the continual sequence for every seed, order and λ.
    Run(RunArgs),
    /// Finite-difference check of every gradient path.
    Gradcheck(GradcheckArgs),
    /// Aggregate `accmatrix.csv` files from finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "LINKLEARN_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Override any config key, e.g. `--set epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory holding `base.clds`; generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Task order such as `41230`; repeatable.
    #[arg(long = "order")]
    pub orders: Vec<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated λ sweep.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Also run with every lateral weight fixed to K.
    #[arg(long)]
    pub constant_k: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Directory from `gen-data`; the data is generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Backbone checkpoint from `pretrain`; pretrained when absent.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Skip writing and verifying per-run checkpoints.
    #[arg(long)]
    pub no_checkpoints: bool,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = SUITE_TOLERANCE)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run or seed directories containing `accmatrix.csv`.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    #[arg(long, env = "LINKLEARN_OUT", default_value = "out")]
    pub out: PathBuf,
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) {
    table.insert(key.to_string(), value);
}

fn parse_set(entry: &str) -> Result<(String, toml::Value)> {
    let (k, v) = entry
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {entry:?}")))?;
    let doc: toml::Table = toml::from_str(&format!("x = {v}"))
        .or_else(|_| toml::from_str(&format!("x = {:?}", v)))
        .map_err(|e: toml::de::Error| Error::Config(format!("{k}: {}", e.message())))?;
    Ok((k.trim().to_string(), doc["x"].clone()))
}

/// Merges defaults, the config file and flags, in increasing precedence.
pub fn resolve_config(common: &CommonArgs, flags: &[(&str, toml::Value)]) -> Result<Config> {
    let mut table = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
        }
        None => toml::Table::new(),
    };
    for entry in &common.set {
        let (k, v) = parse_set(entry)?;
        set_key(&mut table, &k, v);
    }
    if let Some(s) = common.data_seed {
        set_key(&mut table, "data_seed", toml::Value::Integer(s as i64));
    }
    for (k, v) in flags {
        set_key(&mut table, k, v.clone());
    }
    Config::from_table(table)
}

/// The effective configuration of a `run` invocation.
pub fn run_config(args: &RunArgs) -> Result<Config> {
    resolve_config(&args.common, &run_flags(args))
}

fn run_flags(a: &RunArgs) -> Vec<(&'static str, toml::Value)> {
    use toml::Value;
    let mut out = Vec::new();
    if let Some(s) = &a.seeds {
        out.push(("seeds", Value::Array(s.iter().map(|v| Value::Integer(*v as i64)).collect())));
    }
    if !a.orders.is_empty() {
        out.push(("orders", Value::Array(a.orders.iter().cloned().map(Value::String).collect())));
    }
    if let Some(l) = a.lambda {
        out.push(("lambda", Value::Float(l)));
    }
    if let Some(ls) = &a.lambdas {
        out.push(("lambdas", Value::Array(ls.iter().map(|v| Value::Float(*v)).collect())));
    }
    if let Some(k) = a.constant_k {
        out.push(("constant_k", Value::Float(k)));
    }
    if let Some(e) = a.epochs {
        out.push(("epochs", Value::Integer(e as i64)));
    }
    if let Some(lr) = a.lr {
        out.push(("lr", Value::Float(lr)));
    }
    if let Some(g) = a.gamma {
        out.push(("gamma", Value::Float(g)));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::storage(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::storage(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("json") + "\n"))
}

/// Base and continual datasets from `dir`, or freshly generated.
pub fn load_or_generate(cfg: &Config, dir: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match dir {
        Some(d) => Ok((read_clds(d.join(BASE_FILE))?, read_clds(d.join(CONTINUAL_FILE))?)),
        None => cfg.benchmark().generate(),
    }
}

pub fn gen_data(cfg: &Config, out: &Path) -> Result<()> {
    let (base, continual) = cfg.benchmark().generate()?;
    fs::create_dir_all(out).map_err(|e| Error::storage(out, e))?;
    write_clds(&base, out.join(BASE_FILE))?;
    write_clds(&continual, out.join(CONTINUAL_FILE))?;
    write_json(&out.join("data.json"), &cfg.benchmark())?;
    write_text(&out.join("config.toml"), &cfg.to_toml())
}

pub fn pretrain(cfg: &Config, base: &Dataset, out: &Path) -> Result<Backbone> {
    let (bb, report) = pretrain_backbone(cfg.backbone(), base, &cfg.pretrain())?;
    save_backbone(&bb, out)?;
    let mut lines = String::from("epoch,loss\n");
    for (e, l) in report.losses.iter().enumerate() {
        lines.push_str(&format!("{e},{l}\n"));
    }
    write_text(&out.join("pretrain_loss.csv"), &lines)?;
    Ok(bb)
}

#[derive(Serialize)]
struct TaskManifest<'a> {
    position: usize,
    origin: usize,
    classes: &'a [usize],
    train: usize,
    val: usize,
    test: usize,
}

fn data_manifest(cfg: &Config, split: &TaskSplit, source: &str) -> serde_json::Value {
    let tasks: Vec<TaskManifest> = split
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| TaskManifest {
            position: i,
            origin: t.origin,
            classes: &t.classes,
            train: t.train.len(),
            val: t.val.len(),
            test: t.test.len(),
        })
        .collect();
    serde_json::json!({
        "source": source,
        "benchmark": cfg.benchmark(),
        "order": split.order(),
        "tasks": tasks,
    })
}

pub fn schemes(cfg: &Config) -> Vec<Scheme> {
    let mut out = vec![Scheme::Standalone, Scheme::Linked];
    if let Some(k) = cfg.constant_k {
        out.push(Scheme::Constant { k });
    }
    out
}

/// Trains every scheme for one seed and writes its run directory.
pub fn run_seed(
    cfg: &Config,
    backbone: &Backbone,
    split: &TaskSplit,
    seed: u64,
    lambda: f64,
    dir: &Path,
    checkpoints: bool,
) -> Result<SeedResult> {
    let train = cfg.train(seed, lambda);
    let mut matrices: Vec<AccuracyMatrix> = Vec::new();
    for scheme in schemes(cfg) {
        let mut state = ContinualState::new(cfg.model(), scheme, backbone.clone(), seed)?;
        let matrix = run_sequence(&mut state, split, &train)?;
        if checkpoints {
            let ck = dir.join("checkpoints").join(scheme.name());
            save_checkpoint(&state, &ck)?;
            let reloaded = load_checkpoint(&ck)?;
            if end_accuracies(&reloaded, split)? != matrix.end {
                return Err(Error::State(format!(
                    "checkpoint {} does not reproduce the run's accuracies",
                    ck.display()
                )));
            }
        }
        matrices.push(matrix);
    }
    let result = SeedResult { seed, matrices };
    let mut echo = cfg.clone();
    echo.seeds = vec![seed];
    echo.lambda = lambda;
    echo.lambdas = Vec::new();
    echo.orders = vec![split.order().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")];
    write_text(&dir.join("config.toml"), &echo.to_toml())?;
    write_accmatrix(std::slice::from_ref(&result), &dir.join("accmatrix.csv"))?;
    Ok(result)
}

fn run_seeds(
    cfg: &Config,
    backbone: &Backbone,
    split: &TaskSplit,
    lambda: f64,
    dir: &Path,
    args: &RunArgs,
) -> Result<Vec<SeedResult>> {
    let jobs = args.jobs.max(1);
    let mut results = Vec::with_capacity(cfg.seeds.len());
    for chunk in cfg.seeds.chunks(jobs) {
        let batch: Vec<Result<SeedResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| {
                    let seed_dir = dir.join(format!("seed-{seed}"));
                    s.spawn(move || {
                        eprintln!("seed {seed}: training into {}", seed_dir.display());
                        run_seed(cfg, backbone, split, seed, lambda, &seed_dir, !args.no_checkpoints)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect()
        });
        for r in batch {
            results.push(r?);
        }
    }
    Ok(results)
}

fn order_tag(order: &[usize]) -> String {
    if order.iter().all(|&o| o < 10) {
        order.iter().map(|o| o.to_string()).collect()
    } else {
        order.iter().map(|o| o.to_string()).collect::<Vec<_>>().join("-")
    }
}

/// Summary of one `(order, λ)` cell of a run.
#[derive(Clone, Debug, Serialize)]
pub struct CellSummary {
    pub order: String,
    pub lambda: f64,
    pub dir: PathBuf,
    pub modes: Vec<ModeSummary>,
}

pub fn run(cfg: &Config, args: &RunArgs) -> Result<Vec<CellSummary>> {
    let out = &args.common.out;
    fs::create_dir_all(out).map_err(|e| Error::storage(out, e))?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    let (base, continual) = load_or_generate(cfg, args.data.as_deref())?;
    let backbone = match &args.backbone {
        Some(dir) => {
            let bb = load_backbone(dir)?;
            if bb.config != cfg.backbone() {
                return Err(Error::Config(format!("backbone in {} does not match the config", dir.display())));
            }
            bb
        }
        None => {
            eprintln!("pretraining backbone");
            pretrain(cfg, &base, &out.join("backbone"))?
        }
    };
    let base_split = cfg.benchmark().split(&continual)?;
    let source = match &args.data {
        Some(d) => d.display().to_string(),
        None => "synthetic".to_string(),
    };
    let orders = cfg.task_orders()?;
    let lambdas = cfg.lambda_values();
    let mut cells = Vec::new();
    for order in &orders {
        let split = apply_task_order(&base_split, order)?;
        for &lambda in &lambdas {
            let mut dir = out.clone();
            if orders.len() > 1 {
                dir = dir.join(format!("order-{}", order_tag(order)));
            }
            if lambdas.len() > 1 {
                dir = dir.join(format!("lambda-{lambda}"));
            }
            write_json(&dir.join("data.json"), &data_manifest(cfg, &split, &source))?;
            let seeds = run_seeds(cfg, &backbone, &split, lambda, &dir, args)?;
            let mut echo = serde_json::to_value(cfg).expect("config json");
            echo["lambda"] = lambda.into();
            echo["order"] = order_tag(order).into();
            let report = Report { config: echo, seeds };
            let modes = export_report(&report, &dir)?;
            cells.push(CellSummary {
                order: order_tag(order),
                lambda,
                dir,
                modes,
            });
        }
    }
    if cells.len() > 1 {
        write_cells(&cells, &out.join("sweep.csv"))?;
    }
    Ok(cells)
}

fn write_cells(cells: &[CellSummary], path: &Path) -> Result<()> {
    let mut text = String::from("order,lambda,mode,acc_mean,kt_mean,bt_mean\n");
    for c in cells {
        for m in &c.modes {
            let kt = m.kt_mean.map(|k| format!("{:.2}", 100.0 * k)).unwrap_or_default();
            text.push_str(&format!(
                "{},{},{},{:.2},{kt},{:.2}\n",
                c.order,
                c.lambda,
                m.mode,
                100.0 * m.acc_mean,
                100.0 * m.bt_mean
            ));
        }
    }
    write_text(path, &text)
}

fn print_modes(header: &str, modes: &[ModeSummary]) {
    println!("{header}");
    println!("  {:<16} {:>8} {:>8} {:>8}", "mode", "acc%", "KT%", "BT%");
    for m in modes {
        let kt = m.kt_mean.map(|k| format!("{:.2}", 100.0 * k)).unwrap_or_else(|| "-".into());
        println!(
            "  {:<16} {:>8.2} {:>8} {:>8.2}",
            m.mode,
            100.0 * m.acc_mean,
            kt,
            100.0 * m.bt_mean
        );
    }
}

/// Collects seed results from run or seed directories.
pub fn collect_report(dirs: &[PathBuf]) -> Result<Report> {
    let mut by_seed: BTreeMap<u64, SeedResult> = BTreeMap::new();
    for d in dirs {
        let path = d.join("accmatrix.csv");
        for s in read_accmatrix(&path)? {
            if by_seed.contains_key(&s.seed) {
                return Err(Error::Data(format!("seed {} appears in more than one input", s.seed)));
            }
            by_seed.insert(s.seed, s);
        }
    }
    Ok(Report {
        config: serde_json::json!({
            "sources": dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>(),
        }),
        seeds: by_seed.into_values().collect(),
    })
}

/// Executes one parsed command; returns the process exit code.
pub fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = resolve_config(&common, &[])?;
            gen_data(&cfg, &common.out)?;
            println!("wrote {} and {} to {}", BASE_FILE, CONTINUAL_FILE, common.out.display());
        }
        Command::Pretrain(args) => {
            let mut flags = Vec::new();
            if let Some(e) = args.pretrain_epochs {
                flags.push(("pretrain_epochs", toml::Value::Integer(e as i64)));
            }
            let cfg = resolve_config(&args.common, &flags)?;
            let (base, _) = load_or_generate(&cfg, args.data.as_deref())?;
            pretrain(&cfg, &base, &args.common.out)?;
            println!("wrote frozen backbone to {}", args.common.out.display());
        }
        Command::Run(args) => {
            let cfg = run_config(&args)?;
            for c in run(&cfg, &args)? {
                print_modes(&format!("order {} lambda {} -> {}", c.order, c.lambda, c.dir.display()), &c.modes);
            }
        }
        Command::Gradcheck(args) => {
            let report = run_suite(args.seed)?;
            for c in &report.checks {
                println!(
                    "{:<32} checked {:>5}  max rel err {:.3e}",
                    c.name, c.report.checked, c.report.max_rel_error
                );
            }
            let max = report.max_rel_error();
            let ok = report.passed(args.tolerance);
            println!("max relative error {max:.3e} (tolerance {:.1e}): {}", args.tolerance, if ok { "ok" } else { "FAILED" });
            return Ok(if ok { 0 } else { 1 });
        }
        Command::Report(args) => {
            let report = collect_report(&args.dirs)?;
            let modes = export_report(&report, &args.out)?;
            print_modes(&format!("{} seeds -> {}", report.seeds.len(), args.out.display()), &modes);
        }
    }
    Ok(0)
}

/// Parses `args` and runs; errors become a single diagnostic line and exit code 1.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
