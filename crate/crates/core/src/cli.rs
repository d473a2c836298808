//! The `otnn` command-line tool.
//!
//! Exit codes: 0 ok, 2 usage, 3 I/O, 4 validation, 5 numerical failure.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{LabelCost, Method, TrainConfig};
use crate::data::{normalize_embeddings, synth_generate, Dataset, Role, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{aggregate_runs, f1_hate, format_score, mcnemar, representation_knn_analysis};
use crate::io::{load_dataset, load_model, save_dataset, save_model, DataFormat};
use crate::neighbors::{build_index, compute_neighbors, NeighborSet};
use crate::trainer::{gamma_step_detailed, predict, train_with_neighbors, BatchPair, BatchSampler, TrainData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_NUMERICAL: i32 = 5;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.csv";

pub fn history_file(seed_index: usize) -> String {
    format!("history_seed{seed_index}.csv")
}

pub fn model_file(seed_index: usize) -> String {
    format!("model_seed{seed_index}.bin")
}

pub fn predictions_file(seed_index: usize) -> String {
    format!("predictions_seed{seed_index}.csv")
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_IO,
        Error::Numerical { .. } => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "otnn",
    version,
    about = "Neighborhood-aware optimal transport for low-resource transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert between JSONL and binary embedding files, normalizing embeddings.
    Ingest(IngestArgs),
    /// Dump every target's top-k source neighbors as JSONL.
    Neighbors(NeighborsArgs),
    /// Train one method for several seeds.
    Train(TrainArgs),
    /// F1 and McNemar's test of a run against a baseline run.
    Eval(EvalArgs),
    /// Dump the transport plan of one mini-batch as CSV.
    Transport(TransportArgs),
    /// Compare kNN voting in the sentence-embedding and learned spaces.
    Analyze(AnalyzeArgs),
    /// Write synthetic source/target splits.
    Synth(SynthArgs),
    /// Aggregate several runs into one summary table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the extension of `--in`.
    #[arg(long)]
    in_format: Option<DataFormat>,
    /// Defaults to the extension of `--out`.
    #[arg(long)]
    out_format: Option<DataFormat>,
}

#[derive(Debug, Args)]
struct NeighborsArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Hyperparameters shared by `train` and `transport`.
#[derive(Debug, Clone, Args)]
struct Hyper {
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.2)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Defaults to the method's own setting.
    #[arg(long)]
    theta_s: Option<f64>,
    #[arg(long, default_value_t = 10.0)]
    theta_t: f64,
    /// Neighbors per target; tuned over 10, 30, 50, 70, 100, 200, 300, 400, 500.
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Source-phase epochs of seq_ft.
    #[arg(long, default_value_t = 10)]
    source_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
    /// Drop the embedding-distance term.
    #[arg(long)]
    no_ed: bool,
    /// Drop the label-consistency term.
    #[arg(long)]
    no_lc: bool,
    /// Use smoothed cross-entropy instead of the 0/1 label cost.
    #[arg(long)]
    label_smoothing: Option<f64>,
}

impl Hyper {
    fn config(&self, method: Method) -> TrainConfig {
        let base = TrainConfig::for_method(method);
        TrainConfig {
            alpha: self.alpha,
            beta: self.beta,
            epsilon: self.epsilon,
            lambda: self.lambda,
            theta_s: self.theta_s.unwrap_or(base.theta_s),
            theta_t: self.theta_t,
            k: self.k,
            batch_size: self.batch_size,
            epochs: self.epochs,
            source_epochs: self.source_epochs,
            seed: self.seed,
            learning_rate: self.lr,
            hidden_dim: self.hidden_dim,
            use_ed: !self.no_ed,
            use_lc: !self.no_lc,
            label_cost: match self.label_smoothing {
                Some(smoothing) => LabelCost::SmoothedCe { smoothing },
                None => LabelCost::Indicator,
            },
            ..base
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Replay a recorded run; every other input flag is ignored.
    #[arg(long, conflicts_with_all = ["variant", "source", "target_train", "target_val", "target_test"])]
    manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    variant: Option<Method>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    target_train: Option<PathBuf>,
    #[arg(long, required_unless_present = "manifest")]
    target_val: Option<PathBuf>,
    #[arg(long)]
    target_test: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// A run directory, or the name of a sibling of `--run`.
    #[arg(long)]
    against: String,
}

#[derive(Debug, Args)]
struct TransportArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Position of the batch within the first epoch.
    #[arg(long, default_value_t = 0)]
    batch_index: usize,
    #[arg(long)]
    no_mask: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target_test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "10,30,50,70,100,200,300,400,500")]
    k: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8000)]
    n_source: usize,
    #[arg(long, default_value_t = 400)]
    n_target_train: usize,
    #[arg(long, default_value_t = 100)]
    n_target_val: usize,
    #[arg(long, default_value_t = 1000)]
    n_target_test: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "binary")]
    format: DataFormat,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Neighbors(a) => neighbors(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Transport(a) => transport(a),
        Command::Analyze(a) => analyze(a),
        Command::Synth(a) => synth(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a split and re-normalizes it in double precision (binary files
/// store single-precision values).
fn load_normalized(path: &Path, role: Role) -> Result<Dataset> {
    normalize_embeddings(&load_dataset(path, DataFormat::from_path(path), role)?)
}

fn ingest(a: IngestArgs) -> Result<()> {
    let in_format = a.in_format.unwrap_or_else(|| DataFormat::from_path(&a.input));
    let out_format = a.out_format.unwrap_or_else(|| DataFormat::from_path(&a.out));
    let d = normalize_embeddings(&load_dataset(&a.input, in_format, Role::Source)?)?;
    save_dataset(&d, &a.out, out_format)?;
    println!("{} instances, dim {}", d.len(), d.dim());
    Ok(())
}

fn neighbors(a: NeighborsArgs) -> Result<()> {
    let source = load_normalized(&a.source, Role::Source)?;
    let target = load_normalized(&a.target, Role::TargetTrain)?;
    let set = compute_neighbors(&build_index(&source)?, &target, a.k)?;
    let mut w = create(&a.out)?;
    for rec in set.to_records() {
        let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(&a.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))
}

/// Everything needed to replay a `train` invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub variant: Method,
    pub config: TrainConfig,
    pub seeds: usize,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<SeedOutputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutputs {
    pub seed_index: usize,
    pub seed: u64,
    pub model: String,
    pub history: String,
    pub predictions: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn input(&self, role: Role) -> Option<&Path> {
        self.inputs
            .iter()
            .find(|f| f.role == role.as_str())
            .map(|f| f.path.as_path())
    }

    /// Fails if any recorded input no longer matches its checksum.
    pub fn verify_inputs(&self) -> Result<()> {
        for f in &self.inputs {
            let actual = sha256_file(&f.path)?;
            if actual != f.sha256 {
                return Err(Error::Config(format!(
                    "checksum mismatch for {}: recorded {}, found {actual}",
                    f.path.display(),
                    f.sha256
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistoryRow {
    epoch: usize,
    phase: String,
    source_ce: f64,
    target_ce: f64,
    ot_transport: f64,
    ot_entropy: f64,
    ot_kl: f64,
    total: f64,
    val_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionRow {
    id: u64,
    gold: u8,
    pred: u8,
}

/// One line of a run's `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReportRow {
    pub method: String,
    pub seed_index: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_f1: f64,
    pub test_f1: Option<f64>,
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let (method, cfg, seeds, inputs) = match &a.manifest {
        Some(path) => {
            let m = RunManifest::load(path)?;
            m.verify_inputs()?;
            let input = |role| m.input(role).map(Path::to_path_buf);
            let inputs = [
                (Role::Source, input(Role::Source)),
                (Role::TargetTrain, input(Role::TargetTrain)),
                (Role::TargetVal, input(Role::TargetVal)),
                (Role::TargetTest, input(Role::TargetTest)),
            ];
            (m.variant, m.config, m.seeds, inputs)
        }
        None => {
            let method = a.variant.expect("required by clap");
            let inputs = [
                (Role::Source, a.source.clone()),
                (Role::TargetTrain, a.target_train.clone()),
                (Role::TargetVal, a.target_val.clone()),
                (Role::TargetTest, a.target_test.clone()),
            ];
            (method, a.hyper.config(method), a.seeds, inputs)
        }
    };
    if seeds == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    cfg.validate()?;
    let path_of = |role: Role| inputs.iter().find(|(r, _)| *r == role).and_then(|(_, p)| p.clone());
    let (Some(train_path), Some(val_path)) = (path_of(Role::TargetTrain), path_of(Role::TargetVal)) else {
        return Err(Error::Config("target train and validation splits are required".into()));
    };
    let source = match (path_of(Role::Source), method.needs_source()) {
        (Some(p), true) => Some(load_normalized(&p, Role::Source)?),
        (None, true) => return Err(Error::Config(format!("{method} needs --source"))),
        (_, false) => None,
    };
    let data = TrainData {
        source,
        target_train: load_normalized(&train_path, Role::TargetTrain)?,
        target_val: load_normalized(&val_path, Role::TargetVal)?,
    };
    let test = path_of(Role::TargetTest)
        .map(|p| load_normalized(&p, Role::TargetTest))
        .transpose()?;

    let neighbors: Option<NeighborSet> = match &data.source {
        Some(s) if method.is_ot() || method.uses_preselect() => {
            Some(compute_neighbors(&build_index(s)?, &data.target_train, cfg.k)?)
        }
        _ => None,
    };

    let mut manifest_inputs = Vec::new();
    for (role, path) in &inputs {
        if let Some(path) = path {
            if *role == Role::Source && !method.needs_source() {
                continue;
            }
            let path = fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
            manifest_inputs.push(InputFile {
                role: role.as_str().to_string(),
                sha256: sha256_file(&path)?,
                path,
            });
        }
    }

    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let outcomes: Vec<Result<(SeedOutputs, RunReportRow)>> = (0..seeds)
        .into_par_iter()
        .map(|i| {
            let seed_cfg = TrainConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            let out = train_with_neighbors(&data, &seed_cfg, neighbors.as_ref())?;
            save_model(&out.params, &a.out.join(model_file(i)))?;
            let history: Vec<HistoryRow> = out
                .history
                .iter()
                .map(|r| HistoryRow {
                    epoch: r.epoch,
                    phase: format!("{:?}", r.phase).to_lowercase(),
                    source_ce: r.loss.source_ce,
                    target_ce: r.loss.target_ce,
                    ot_transport: r.loss.ot_transport,
                    ot_entropy: r.loss.ot_entropy,
                    ot_kl: r.loss.ot_kl,
                    total: r.loss.total,
                    val_f1: r.val_f1,
                })
                .collect();
            write_csv(&a.out.join(history_file(i)), &history)?;
            let mut test_f1 = None;
            let mut predictions = None;
            if let Some(test) = &test {
                let preds = predict(&out.params, test)?;
                let golds = test.labels();
                test_f1 = Some(f1_hate(&preds, &golds)?.f1);
                let rows: Vec<PredictionRow> = test
                    .ids()
                    .into_iter()
                    .zip(golds)
                    .zip(preds)
                    .map(|((id, gold), pred)| PredictionRow { id, gold, pred })
                    .collect();
                write_csv(&a.out.join(predictions_file(i)), &rows)?;
                predictions = Some(predictions_file(i));
            }
            Ok((
                SeedOutputs {
                    seed_index: i,
                    seed: seed_cfg.seed,
                    model: model_file(i),
                    history: history_file(i),
                    predictions,
                },
                RunReportRow {
                    method: method.to_string(),
                    seed_index: i,
                    seed: seed_cfg.seed,
                    best_epoch: out.best_epoch,
                    val_f1: out.best_val_f1,
                    test_f1,
                },
            ))
        })
        .collect();
    let (outputs, rows): (Vec<SeedOutputs>, Vec<RunReportRow>) =
        outcomes.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();

    write_csv(&a.out.join(REPORT_FILE), &rows)?;
    let manifest = RunManifest {
        toolkit_version: format!("otnn {}", env!("CARGO_PKG_VERSION")),
        variant: method,
        config: cfg,
        seeds,
        inputs: manifest_inputs,
        outputs,
    };
    let path = a.out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;

    let scores: Vec<f64> = rows.iter().map(|r| r.test_f1.unwrap_or(r.val_f1)).collect();
    let (mean, std) = aggregate_runs(&scores)?;
    let which = if test.is_some() { "test" } else { "val" };
    println!("{method}: {which} hate-F1 {}", format_score(mean, std));
    Ok(())
}

fn read_predictions(dir: &Path) -> Result<BTreeMap<usize, Vec<PredictionRow>>> {
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let mut out = BTreeMap::new();
    for o in &manifest.outputs {
        let Some(file) = &o.predictions else {
            return Err(Error::Config(format!("{} has no test predictions", dir.display())));
        };
        out.insert(o.seed_index, read_csv(&dir.join(file))?);
    }
    Ok(out)
}

fn resolve_run(run: &Path, against: &str) -> PathBuf {
    let direct = PathBuf::from(against);
    if direct.join(MANIFEST_FILE).is_file() {
        return direct;
    }
    run.parent().unwrap_or(Path::new(".")).join(against)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub seed_index: usize,
    pub f1_run: f64,
    pub f1_baseline: f64,
    pub b: usize,
    pub c: usize,
    pub statistic: f64,
    pub p_value: f64,
    pub significant: bool,
}

/// Writes `eval_<baseline>.csv` into the run directory. The run is starred
/// when it wins on mean F1 and a majority of matched seeds differ significantly.
fn eval_cmd(a: EvalArgs) -> Result<()> {
    let baseline_dir = resolve_run(&a.run, &a.against);
    let run = read_predictions(&a.run)?;
    let base = read_predictions(&baseline_dir)?;
    let mut rows = Vec::new();
    for (seed_index, preds) in &run {
        let Some(other) = base.get(seed_index) else {
            return Err(Error::Config(format!("baseline has no seed {seed_index}")));
        };
        if preds.len() != other.len() || preds.iter().zip(other).any(|(x, y)| x.id != y.id || x.gold != y.gold) {
            return Err(Error::Config(format!(
                "seed {seed_index}: runs were not evaluated on the same test split"
            )));
        }
        let golds: Vec<u8> = preds.iter().map(|r| r.gold).collect();
        let pa: Vec<u8> = preds.iter().map(|r| r.pred).collect();
        let pb: Vec<u8> = other.iter().map(|r| r.pred).collect();
        let m = mcnemar(&pa, &pb, &golds)?;
        rows.push(EvalRow {
            seed_index: *seed_index,
            f1_run: f1_hate(&pa, &golds)?.f1,
            f1_baseline: f1_hate(&pb, &golds)?.f1,
            b: m.b,
            c: m.c,
            statistic: m.statistic,
            p_value: m.p_value,
            significant: m.significant,
        });
    }
    let name = baseline_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| a.against.clone());
    write_csv(&a.run.join(format!("eval_{name}.csv")), &rows)?;
    let (mean_run, std_run) = aggregate_runs(&rows.iter().map(|r| r.f1_run).collect::<Vec<_>>())?;
    let (mean_base, std_base) = aggregate_runs(&rows.iter().map(|r| r.f1_baseline).collect::<Vec<_>>())?;
    let significant = rows.iter().filter(|r| r.significant).count();
    let star = mean_run > mean_base && 2 * significant > rows.len();
    let min_p = rows.iter().map(|r| r.p_value).fold(f64::INFINITY, f64::min);
    println!(
        "run {}{}  baseline {}  significant seeds {significant}/{}  min p {min_p:.4}",
        format_score(mean_run, std_run),
        if star { "*" } else { "" },
        format_score(mean_base, std_base),
        rows.len()
    );
    Ok(())
}

fn transport(a: TransportArgs) -> Result<()> {
    let cfg = a.hyper.config(Method::Otnn);
    cfg.validate()?;
    let source = load_normalized(&a.source, Role::Source)?;
    let target = load_normalized(&a.target, Role::TargetTrain)?;
    let mut sampler = BatchSampler::new((0..source.len()).collect(), target.len(), cfg.batch_size, cfg.seed);
    let epoch = sampler.epoch();
    let Some((src_rows, tgt_rows)) = epoch.get(a.batch_index) else {
        return Err(Error::Config(format!(
            "batch index {} out of range (epoch has {})",
            a.batch_index,
            epoch.len()
        )));
    };
    let batch = BatchPair::from_rows(&source, src_rows, &target, tgt_rows)?;
    let neighbors = if a.no_mask {
        None
    } else {
        Some(compute_neighbors(&build_index(&source)?, &target, cfg.k)?)
    };
    let step = gamma_step_detailed(&batch, neighbors.as_ref(), &cfg)?;
    let mut w = csv_writer(&a.out)?;
    let header: Vec<String> = std::iter::once("source_id".to_string())
        .chain(batch.tgt_ids.iter().map(|id| id.to_string()))
        .collect();
    w.write_record(&header).map_err(|e| csv_err(&a.out, e))?;
    for (i, id) in batch.src_ids.iter().enumerate() {
        let record: Vec<String> = std::iter::once(id.to_string())
            .chain(step.plan.plan.row(i).iter().map(|x| x.to_string()))
            .collect();
        w.write_record(&record).map_err(|e| csv_err(&a.out, e))?;
    }
    w.flush().map_err(|e| Error::io(&a.out, e))?;
    println!(
        "{}x{} plan, mass {:.6}, converged {} after {} iterations",
        batch.len(),
        batch.len(),
        step.plan.total_mass(),
        step.plan.converged,
        step.plan.iterations
    );
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnalyzeRow {
    k: usize,
    f1_sbert: f64,
    f1_otnn: f64,
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let source = load_normalized(&a.source, Role::Source)?;
    let test = load_normalized(&a.target_test, Role::TargetTest)?;
    let points = representation_knn_analysis(&model, &source, &test, &a.k)?;
    let rows: Vec<AnalyzeRow> = points
        .iter()
        .map(|p| AnalyzeRow {
            k: p.k,
            f1_sbert: p.f1_raw,
            f1_otnn: p.f1_learned,
        })
        .collect();
    write_csv(&a.out, &rows)
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_source: a.n_source,
        n_target_train: a.n_target_train,
        n_target_val: a.n_target_val,
        n_target_test: a.n_target_test,
        dim: a.dim,
        shift: a.shift,
        seed: a.seed,
    };
    let splits = synth_generate(&spec)?;
    let ext = match a.format {
        DataFormat::Binary => "bin",
        DataFormat::Jsonl => "jsonl",
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (name, d) in [
        ("source", &splits.source),
        ("target_train", &splits.target_train),
        ("target_val", &splits.target_val),
        ("target_test", &splits.target_test),
    ] {
        save_dataset(
            &normalize_embeddings(d)?,
            &a.out.join(format!("{name}.{ext}")),
            a.format,
        )?;
    }
    Ok(())
}

/// One method's line of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub method: String,
    pub seeds: usize,
    pub mean_f1: f64,
    pub std_f1: f64,
    pub score: String,
    /// `best` or `second` by mean F1.
    pub marker: String,
}

fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for dir in &a.runs {
        let runs: Vec<RunReportRow> = read_csv(&dir.join(REPORT_FILE))?;
        let scores: Vec<f64> = runs.iter().map(|r| r.test_f1.unwrap_or(r.val_f1)).collect();
        let (mean, std) = aggregate_runs(&scores)?;
        rows.push(SummaryRow {
            run: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            method: runs[0].method.clone(),
            seeds: runs.len(),
            mean_f1: mean,
            std_f1: std,
            score: format_score(mean, std),
            marker: String::new(),
        });
    }
    let mut means: Vec<f64> = rows.iter().map(|r| r.mean_f1).collect();
    means.sort_by(|x, y| y.total_cmp(x));
    means.dedup();
    for r in &mut rows {
        if Some(&r.mean_f1) == means.first() {
            r.marker = "best".into();
        } else if Some(&r.mean_f1) == means.get(1) {
            r.marker = "second".into();
        }
    }
    write_csv(&a.out.join(REPORT_FILE), &rows)?;
    for r in &rows {
        println!("{:<24} {:>12} {}", r.method, r.score, r.marker);
    }
    Ok(())
}
