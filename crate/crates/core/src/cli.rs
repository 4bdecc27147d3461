//! Command-line front end: argument parsing, command implementations and
//! run manifests. The `chair` binary is a thin wrapper over [`run`].

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{self, Dataset, Protocol, Splits, SynthConfig};
use crate::error::{Error, Result};
use crate::intervention::{item_rng, intervene_random};
use crate::model::{load_checkpoint, save_checkpoint, AnyModel, Checkpoint, CheckpointMeta, ModelKind};
use crate::retrieval::{self, EncodedSplit, QUERY_STREAM};
use crate::training::{self, Mode, TrainConfig, TrainReport};
use crate::util::{sha256_file, sha256_hex, write_atomic};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "chair", version, about = "Concept-intervenable retrieval: data, training, evaluation and serving")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic concept dataset as JSON lines.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a per-epoch report.
    Train(TrainArgs),
    /// Classification accuracy or retrieval Recall@k under interventions.
    Eval(EvalArgs),
    /// RecallAccuracy@k over gallery × query intervention fractions.
    Grid(GridArgs),
    /// Write gallery embeddings as CSV.
    Export(ExportArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Retrieval,
    Classification,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "chair")]
    pub kind: ModelKind,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Comma-separated subset of `1,2` (CHAIR only).
    #[arg(long, default_value = "1,2")]
    pub stages: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stage-1 checkpoint to continue from when running stage 2 alone.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "retrieval")]
    pub protocol: ProtocolArg,
    /// Seed of the stratified split under the classification protocol.
    #[arg(long, default_value_t = 1)]
    pub split_seed: u64,
    #[arg(long)]
    pub alg1_verbatim: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Classification,
    Retrieval,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "retrieval")]
    pub task: Task,
    /// Comma-separated intervention fractions.
    #[arg(long, default_value = "0")]
    pub fraction: String,
    /// Comma-separated k values.
    #[arg(long, default_value = "1,5,10")]
    pub k: String,
    /// Comma-separated evaluation seeds.
    #[arg(long, default_value = "1")]
    pub seed: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "0,0.25,0.5,0.75,1")]
    pub grid_fractions: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value = "1,2,3")]
    pub seed: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Gallery intervention fraction, fixed for the life of the process.
    #[arg(long, default_value_t = 0.0)]
    pub fraction: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

/// Written next to every primary output as `<out>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub git_describe: String,
    pub outputs: Vec<String>,
    pub wall_time_seconds: f64,
}

impl RunManifest {
    /// Hash of the reproducibility-relevant fields: command, config, seed
    /// and input hashes. Stamped into output CSV headers.
    pub fn identity_hash(&self) -> String {
        let identity = json!({
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs.values().collect::<Vec<_>>(),
        });
        sha256_hex(identity.to_string().as_bytes())
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn report_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".report.csv");
    PathBuf::from(s)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

struct Run {
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn new(command: &str, config: Value, seed: Option<u64>, inputs: &[&Path]) -> Result<Self> {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            hashes.insert(p.display().to_string(), sha256_file(p)?);
        }
        Ok(Run {
            manifest: RunManifest {
                command: command.into(),
                config,
                seed,
                inputs: hashes,
                git_describe: git_describe(),
                outputs: Vec::new(),
                wall_time_seconds: 0.0,
            },
            started: Instant::now(),
        })
    }

    fn csv_header(&self) -> String {
        format!("# manifest_sha256={}\n", self.manifest.identity_hash())
    }

    fn finish(mut self, primary: &Path, outputs: &[&Path]) -> Result<()> {
        self.manifest.outputs = outputs.iter().map(|p| p.display().to_string()).collect();
        self.manifest.wall_time_seconds = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&manifest_path(primary), text.as_bytes())
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let v = s
        .split(',')
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().map_err(|e| Error::Config(format!("--{flag}: cannot parse `{t}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if v.is_empty() {
        return Err(Error::Config(format!("--{flag} must not be empty")));
    }
    Ok(v)
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let run = Run::new("synth", to_value(&cfg), Some(cfg.seed), &[])?;
    let ds = data::generate(&cfg)?;
    data::write_jsonl(&ds, &args.out)?;
    run.finish(&args.out, &[&args.out])
}

fn parse_stages(s: &str) -> Result<training::Stages> {
    let list: Vec<u8> = parse_list("stages", s)?;
    if list.iter().any(|&v| v != 1 && v != 2) {
        return Err(Error::Config(format!("--stages accepts 1 and 2, got `{s}`")));
    }
    Ok(training::Stages {
        stage1: list.contains(&1),
        stage2: list.contains(&2),
    })
}

fn protocol_of(args: &TrainArgs) -> Protocol {
    match args.protocol {
        ProtocolArg::Retrieval => Protocol::Retrieval,
        ProtocolArg::Classification => Protocol::Classification { seed: args.split_seed },
    }
}

/// Training set and validation set for a protocol.
pub fn training_sets(ds: &Dataset, protocol: Protocol) -> Result<(Dataset, Option<Dataset>)> {
    Ok(match data::split(ds, protocol)? {
        Splits::Retrieval(s) => (s.train, None),
        Splits::Classification(s) => (s.train, Some(s.val)),
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = read_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if args.alg1_verbatim {
        cfg.alg1_verbatim = true;
    }
    cfg.validate()?;
    let stages = parse_stages(&args.stages)?;
    let protocol = protocol_of(args);
    let mut inputs: Vec<&Path> = vec![&args.data];
    if let Some(c) = &args.checkpoint {
        inputs.push(c);
    }
    let config = json!({
        "train": to_value(&cfg),
        "kind": args.kind.to_string(),
        "stages": stages.as_list(),
        "protocol": to_value(&protocol),
    });
    let run = Run::new("train", config, Some(cfg.seed), &inputs)?;
    let ds = data::read_jsonl(&args.data)?;
    let (train, val) = training_sets(&ds, protocol)?;

    let (ck, report) = if args.kind == ModelKind::Chair {
        train_chair_stages(&train, val.as_ref(), &cfg, stages, args.checkpoint.as_deref(), protocol)?
    } else {
        if stages != training::Stages::BOTH {
            return Err(Error::Config("--stages applies to chair only".into()));
        }
        let (model, report) = training::train_baseline(args.kind, &train, val.as_ref(), &cfg)?;
        let values = if model.has_concepts() {
            Some(crate::intervention::intervention_values(&model, &train, cfg.percentile_basis)?)
        } else {
            None
        };
        let meta = CheckpointMeta {
            protocol,
            mode: Some(cfg.mode),
            stages: Vec::new(),
            seed: cfg.seed,
        };
        (
            Checkpoint {
                model,
                meta,
                intervention_values: values,
            },
            report,
        )
    };
    save_checkpoint(&ck, &args.out)?;
    let report_file = report_path(&args.out);
    write_atomic(&report_file, format!("{}{}", run.csv_header(), report.to_csv()).as_bytes())?;
    run.finish(&args.out, &[&args.out, &report_file])
}

fn train_chair_stages(
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    stages: training::Stages,
    prior: Option<&Path>,
    protocol: Protocol,
) -> Result<(Checkpoint, TrainReport)> {
    let meta = |stages: Vec<u8>| CheckpointMeta {
        protocol,
        mode: Some(cfg.mode),
        stages,
        seed: cfg.seed,
    };
    if stages.stage1 {
        let run = training::train_chair(train, val, cfg, stages.stage2)?;
        let ck = Checkpoint {
            model: AnyModel::Chair(run.model),
            meta: meta(stages.as_list()),
            intervention_values: Some(run.values),
        };
        return Ok((ck, run.report));
    }
    let Some(prior) = prior else {
        return Err(Error::State("stage 2 requires a stage-1 checkpoint (--checkpoint)".into()));
    };
    let ck = load_checkpoint(prior)?;
    if !ck.meta.stages.contains(&1) {
        return Err(Error::State(format!("{} has not completed stage 1", prior.display())));
    }
    if ck.meta.stages.contains(&2) {
        return Err(Error::State(format!("{} has already completed stage 2", prior.display())));
    }
    let AnyModel::Chair(mut model) = ck.model else {
        return Err(Error::State(format!("{} is not a chair checkpoint", prior.display())));
    };
    let report = training::train_stage2(&mut model, train, ck.intervention_values.as_ref(), val, cfg)?;
    let ck = Checkpoint {
        model: AnyModel::Chair(model),
        meta: meta(vec![1, 2]),
        intervention_values: ck.intervention_values,
    };
    Ok((ck, report))
}

fn check_fraction(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("intervention fraction {p} outside [0, 1]")));
    }
    Ok(())
}

fn check_compatible(model: &AnyModel, ds: &Dataset) -> Result<()> {
    let dims = model.dims();
    if ds.input_dim() != dims.input_dim || ds.num_concepts() != dims.num_concepts {
        return Err(Error::Validation(format!(
            "checkpoint expects input_dim {} and {} concepts; dataset has input_dim {} and {} concepts",
            dims.input_dim,
            dims.num_concepts,
            ds.input_dim(),
            ds.num_concepts()
        )));
    }
    Ok(())
}

/// Retrieval evaluation split: unseen classes.
pub fn retrieval_eval_set(ds: &Dataset) -> Result<Dataset> {
    Ok(data::retrieval_split(ds)?.eval)
}

/// Classification test split for a checkpoint trained under the
/// classification protocol.
pub fn classification_test_set(ck: &Checkpoint, ds: &Dataset) -> Result<Dataset> {
    match ck.meta.protocol {
        Protocol::Classification { seed } => Ok(data::classification_split(ds, seed)?.test),
        Protocol::Retrieval => Err(Error::Validation(
            "classification evaluation needs a checkpoint trained with --protocol classification".into(),
        )),
    }
}

/// Accuracy where each item's concepts are corrected at `fraction` with the
/// query-side RNG stream of `seed`.
pub fn classification_accuracy(ck: &Checkpoint, test: &Dataset, fraction: f64, seed: u64) -> Result<f64> {
    check_fraction(fraction)?;
    let overrides = if ck.model.has_concepts() && fraction > 0.0 {
        let values = ck
            .intervention_values
            .as_ref()
            .ok_or_else(|| Error::State("checkpoint has no intervention values".into()))?;
        let mut rows = Vec::with_capacity(test.len());
        for e in test.iter() {
            let base = ck.model.base(&e.x)?;
            let acts = &base.concepts.as_ref().expect("concept model").activations;
            let mut rng = item_rng(seed, QUERY_STREAM, e.id);
            rows.push(intervene_random(acts, &e.c, fraction, &mut rng, values)?);
        }
        Some(rows)
    } else {
        None
    };
    training::accuracy(&ck.model, test, overrides.as_deref())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let fractions: Vec<f64> = parse_list("fraction", &args.fraction)?;
    fractions.iter().try_for_each(|&p| check_fraction(p))?;
    let ks: Vec<usize> = parse_list("k", &args.k)?;
    if ks.contains(&0) {
        return Err(Error::Config("--k values must be >= 1".into()));
    }
    let seeds: Vec<u64> = parse_list("seed", &args.seed)?;
    let task = match args.task {
        Task::Classification => "classification",
        Task::Retrieval => "retrieval",
    };
    let config = json!({ "task": task, "fractions": fractions, "k": ks, "seeds": seeds });
    let run = Run::new("eval", config, seeds.first().copied(), &[&args.checkpoint, &args.data])?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = data::read_jsonl(&args.data)?;
    check_compatible(&ck.model, &ds)?;
    let mut csv = run.csv_header();
    match args.task {
        Task::Retrieval => {
            let eval = retrieval_eval_set(&ds)?;
            let enc = EncodedSplit::new(&ck.model, &eval)?;
            csv.push_str("seed,fraction,k,recall_at_k,recall_accuracy_at_k\n");
            for &seed in &seeds {
                for &p in &fractions {
                    let scores = retrieval::evaluate_retrieval(&ck.model, &enc, ck.intervention_values.as_ref(), p, p, seed, &ks)?;
                    for s in scores {
                        let _ = writeln!(csv, "{seed},{p},{},{},{}", s.k, s.recall, s.recall_accuracy);
                    }
                }
            }
        }
        Task::Classification => {
            let test = classification_test_set(&ck, &ds)?;
            csv.push_str("seed,fraction,accuracy\n");
            for &seed in &seeds {
                for &p in &fractions {
                    let acc = classification_accuracy(&ck, &test, p, seed)?;
                    let _ = writeln!(csv, "{seed},{p},{acc}");
                }
            }
        }
    }
    write_atomic(&args.out, csv.as_bytes())?;
    run.finish(&args.out, &[&args.out])
}

pub fn cmd_grid(args: &GridArgs) -> Result<()> {
    let fractions: Vec<f64> = parse_list("grid-fractions", &args.grid_fractions)?;
    fractions.iter().try_for_each(|&p| check_fraction(p))?;
    let seeds: Vec<u64> = parse_list("seed", &args.seed)?;
    if args.k == 0 {
        return Err(Error::Config("--k must be >= 1".into()));
    }
    let config = json!({ "fractions": fractions, "k": args.k, "seeds": seeds });
    let run = Run::new("grid", config, seeds.first().copied(), &[&args.checkpoint, &args.data])?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = data::read_jsonl(&args.data)?;
    check_compatible(&ck.model, &ds)?;
    let eval = retrieval_eval_set(&ds)?;
    let enc = EncodedSplit::new(&ck.model, &eval)?;
    let grid = retrieval::intervention_grid(
        &ck.model,
        &enc,
        ck.intervention_values.as_ref(),
        &fractions,
        &fractions,
        args.k,
        &seeds,
    )?;
    write_atomic(&args.out, format!("{}{}", run.csv_header(), grid.to_long_csv()).as_bytes())?;
    run.finish(&args.out, &[&args.out])
}

pub fn cmd_export(args: &ExportArgs) -> Result<()> {
    check_fraction(args.fraction)?;
    let config = json!({ "fraction": args.fraction });
    let run = Run::new("export", config, Some(args.seed), &[&args.checkpoint, &args.data])?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = data::read_jsonl(&args.data)?;
    check_compatible(&ck.model, &ds)?;
    let eval = retrieval_eval_set(&ds)?;
    let gallery = retrieval::build_gallery(&ck.model, &eval, ck.intervention_values.as_ref(), args.fraction, args.seed)?;
    let body = format!("{}{}", run.csv_header(), retrieval::embeddings_csv(&gallery));
    write_atomic(&args.out, body.as_bytes())?;
    run.finish(&args.out, &[&args.out])
}

pub fn cmd_serve(args: &ServeArgs) -> Result<()> {
    check_fraction(args.fraction)?;
    let ck_hash = sha256_file(&args.checkpoint)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let ds = data::read_jsonl(&args.data)?;
    let state = crate::service::SessionState::new(ck, ck_hash, &ds, args.fraction, args.seed)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::State(format!("cannot start runtime: {e}")))?;
    rt.block_on(crate::service::serve(state, &args.bind))
}

/// Maps an error to its exit code: configuration problems are usage
/// errors, everything else is a runtime failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Export(a) => cmd_export(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

/// Parses `args` (including the program name), runs the command, prints
/// errors to stderr and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
