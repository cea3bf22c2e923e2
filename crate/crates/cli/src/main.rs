//! `lecb`: pool building, sampling, training, evaluation and analysis.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use lecb::biasing::{LecbModel, Variant};
use lecb::harness::{
    embedding_dump, evaluate, retention_sweep, run_matrix, train_cb, MatrixRow, Split, Subset, SweepRow, TaskConfig,
    TrainConfig, Trained, WerReport, Workbench,
};
use lecb::numerics::{load_checkpoint, save_checkpoint};
use lecb::plot::{LineChart, Series};
use lecb::pools::{Corpus, DetectorConfig, FrequencyDetector, Pools};
use lecb::sampling::{KRule, Method, Sampler, SamplerConfig};
use lecb::svcca::{epoch_correlation_curve, EmbeddingDump};

const MANIFEST: &str = "manifest.json";
const D_A: usize = 32;

#[derive(Parser, Debug)]
#[command(name = "lecb", version, about = "Locality-enhanced contextual biasing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the random n-gram pool and the entity n-gram map from a corpus.
    Pools(PoolsArgs),
    /// Draw context batches for every utterance of a corpus.
    Sample(SampleArgs),
    /// Train a biasing module on the synthetic task.
    Train(TrainArgs),
    /// Evaluate a trained run, or an untrained variant, with SMd batches.
    Eval(EvalArgs),
    /// Train and evaluate the full variant × sampler grid.
    Matrix(MatrixArgs),
    /// Epoch-to-epoch SVCCA correlation of embedding dumps.
    Svcca(SvccaArgs),
    /// Rare-word WER as a function of positive retention.
    Sweep(SweepArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Clone)]
struct OutArg {
    /// Output directory.
    #[arg(long, env = "LECB_OUT_DIR", default_value = "lecb-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PoolsArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 3)]
    nmax: usize,
    /// Words seen at most this often are entities.
    #[arg(long, default_value_t = 2)]
    rare_threshold: usize,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding the pool files.
    #[arg(long)]
    pools: PathBuf,
    #[arg(long)]
    method: Method,
    #[arg(long = "B", default_value_t = 10)]
    batch_size: usize,
    /// Fixed number of positives for SMa/SMc; uniform when absent.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    retention: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    epoch: usize,
    /// JSON-lines file receiving one batch per utterance.
    #[arg(long, default_value = "batches.jsonl")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct TaskArgs {
    /// `default` or a JSON task configuration file.
    #[arg(long, default_value = "default")]
    task: String,
    #[arg(long)]
    task_seed: Option<u64>,
    /// Hold rare evaluation words out of training entirely.
    #[arg(long)]
    zero_shot: bool,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long = "B", default_value_t = 10)]
    batch_size: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 99)]
    eval_seed: u64,
    #[arg(long)]
    lr: Option<f64>,
    /// Neighbourhood window (odd).
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "lecb_v2")]
    variant: Variant,
    #[arg(long, default_value = "smb")]
    sampler: Method,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    retention: f64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Output directory of a `train` run.
    #[arg(long, conflicts_with = "variant")]
    run: Option<PathBuf>,
    /// Untrained variant to evaluate when no run is given.
    #[arg(long)]
    variant: Option<Variant>,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Dev,
    Test,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SvccaArgs {
    #[arg(long, num_args = 1.., required = true)]
    dumps: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.99)]
    keep: f64,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.9,0.8,0.7,0.5,0.3")]
    probs: Vec<f64>,
    #[arg(long, default_value = "lecb_v2")]
    variant: Variant,
    #[arg(long, default_value = "smb")]
    sampler: Method,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Where to write the replayed outputs.
    #[arg(long)]
    out: PathBuf,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

type CliResult<T> = std::result::Result<T, Failure>;

trait Classify<T> {
    fn config(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn config(self) -> CliResult<T> {
        self.map_err(|e| Failure::Config(e.into()))
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RunManifest {
    tool: String,
    version: String,
    subcommand: String,
    args: Vec<String>,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

struct Outputs {
    dir: PathBuf,
    manifest: PathBuf,
    files: BTreeMap<String, String>,
}

impl Outputs {
    fn new(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .runtime()?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            manifest: dir.join(MANIFEST),
            files: BTreeMap::new(),
        })
    }

    /// Single-file output; the manifest goes next to it as `<name>.manifest.json`.
    fn file(path: &Path) -> CliResult<(Self, String)> {
        let name = path
            .file_name()
            .ok_or_else(|| Failure::Config(anyhow!("{} is not a file path", path.display())))?
            .to_string_lossy()
            .into_owned();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let mut out = Self::new(&dir)?;
        out.manifest = dir.join(format!("{name}.manifest.json"));
        Ok((out, name))
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)
            .with_context(|| format!("writing {}", path.display()))
            .runtime()?;
        self.files.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    fn record(&mut self, path: &Path) -> CliResult<()> {
        let name = path
            .strip_prefix(&self.dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        self.files.insert(name, sha256_file(path).runtime()?);
        Ok(())
    }

    fn finish(
        self,
        subcommand: &str,
        args: &[String],
        config: serde_json::Value,
        seeds: BTreeMap<String, u64>,
        inputs: BTreeMap<String, String>,
    ) -> CliResult<()> {
        let manifest = RunManifest {
            tool: "lecb".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            args: args.to_vec(),
            config,
            seeds,
            inputs,
            outputs: self.files,
        };
        let path = self.manifest;
        let text = serde_json::to_string_pretty(&manifest).runtime()?;
        std::fs::write(&path, text + "\n")
            .with_context(|| format!("writing {}", path.display()))
            .runtime()
    }
}

fn load_task(args: &TaskArgs) -> CliResult<TaskConfig> {
    let mut cfg = if args.task == "default" {
        TaskConfig::default()
    } else {
        let path = Path::new(&args.task);
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("task file {} not readable", path.display()))
            .config()?;
        serde_json::from_str(&text)
            .with_context(|| format!("task file {} is not a valid task configuration", path.display()))
            .config()?
    };
    if let Some(s) = args.task_seed {
        cfg.seed = s;
    }
    cfg.zero_shot |= args.zero_shot;
    cfg.validate().config()?;
    Ok(cfg)
}

fn train_config(m: &ModelArgs, variant: Variant, method: Method, lambda: f64, retention: f64) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        variant,
        method,
        lambda,
        retention,
        batch_size: m.batch_size,
        epochs: m.epochs,
        seed: m.seed,
        eval_seed: m.eval_seed,
        lr: m.lr.unwrap_or(d.lr),
        window: m.window.unwrap_or(d.window),
        d: m.d.unwrap_or(d.d),
        heads: m.heads.unwrap_or(d.heads),
        ..d
    };
    cfg.model_config(D_A).validate().config()?;
    cfg.sampler_config().validate().config()?;
    if cfg.epochs == 0 && variant != Variant::None {
        log::warn!("zero epochs: the biasing module stays at its initialization");
    }
    Ok(cfg)
}

fn seeds(task: &TaskConfig, cfg: &TrainConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("task".to_string(), task.seed),
        ("train".to_string(), cfg.seed),
        ("eval".to_string(), cfg.eval_seed),
    ])
}

fn report_lines(cfg: &TrainConfig, split: &str, report: &WerReport) -> String {
    let mut s = String::from("variant,sampler,lambda,split,wer\n");
    let sampler = if cfg.variant == Variant::None { "-".to_string() } else { cfg.method.to_string() };
    for sub in Subset::ALL {
        if let Some(w) = report.subset(sub) {
            s += &format!("{},{},{},{}/{},{:.6}\n", cfg.variant, sampler, cfg.lambda, split, sub.as_str(), w);
        }
    }
    s += &format!("{},{},{},{},{:.6}\n", cfg.variant, sampler, cfg.lambda, split, report.overall);
    s
}

fn cmd_pools(a: &PoolsArgs, argv: &[String]) -> CliResult<()> {
    if !a.corpus.is_file() {
        return Err(Failure::Config(anyhow!("corpus file {} does not exist", a.corpus.display())));
    }
    let corpus = Corpus::load(&a.corpus).config()?;
    let detector = DetectorConfig {
        rare_threshold: Some(a.rare_threshold),
        min_len: a.min_len,
    };
    let pools = Pools::build(&corpus, detector, a.nmax).config()?;
    let mut out = Outputs::new(&a.out.out)?;
    for p in pools.save(&out.dir).runtime()? {
        out.record(&p)?;
    }
    log::info!("{} n-grams, {} entities", pools.ngrams.len(), pools.entities.len());
    let inputs = BTreeMap::from([(a.corpus.display().to_string(), corpus.content_hash())]);
    let config = serde_json::json!({"n_max": a.nmax, "detector": detector});
    out.finish("pools", argv, config, BTreeMap::new(), inputs)
}

fn cmd_sample(a: &SampleArgs, argv: &[String]) -> CliResult<()> {
    if !a.corpus.is_file() {
        return Err(Failure::Config(anyhow!("corpus file {} does not exist", a.corpus.display())));
    }
    let corpus = Corpus::load(&a.corpus).config()?;
    let pools = Pools::load(&a.pools).config()?;
    if pools.corpus_hash != corpus.content_hash() {
        return Err(Failure::Config(anyhow!(
            "pool files in {} were built from a different corpus (hash {}), not {}; rebuild them with `lecb pools`",
            a.pools.display(),
            pools.corpus_hash,
            a.corpus.display()
        )));
    }
    let detector = FrequencyDetector::from_corpus(&corpus, pools.detector);
    let cfg = SamplerConfig {
        batch_size: a.batch_size,
        n_max: pools.ngrams.n_max(),
        k_rule: a.k.map_or(KRule::UniformUpToHalf, KRule::Fixed),
        retention: a.retention,
        seed: a.seed,
    };
    let sampler = Sampler::new(&pools.ngrams, &pools.entities, &detector, cfg).config()?;
    let mut lines = String::new();
    for u in &corpus.utterances {
        let batch = sampler
            .sample(a.method, u, cfg.batch_seed(&u.id, a.epoch))
            .with_context(|| format!("sampling utterance {}", u.id))
            .runtime()?;
        lines += &serde_json::to_string(&batch).runtime()?;
        lines.push('\n');
    }
    let (mut out, name) = Outputs::file(&a.out)?;
    out.write(&name, lines.as_bytes())?;
    let mut inputs = BTreeMap::from([(a.corpus.display().to_string(), corpus.content_hash())]);
    for f in [lecb::pools::NGRAM_POOL_FILE, lecb::pools::ENTITY_MAP_FILE] {
        let p = a.pools.join(f);
        inputs.insert(p.display().to_string(), sha256_file(&p).runtime()?);
    }
    let config = serde_json::json!({"method": a.method, "sampler": cfg, "epoch": a.epoch});
    out.finish("sample", argv, config, BTreeMap::from([("sampler".into(), a.seed)]), inputs)
}

fn workbench(task: &TaskConfig) -> CliResult<Workbench> {
    Workbench::new(task, D_A).runtime()
}

fn cmd_train(a: &TrainArgs, argv: &[String]) -> CliResult<()> {
    let task = load_task(&a.task)?;
    let cfg = train_config(&a.model, a.variant, a.sampler, a.lambda, a.retention)?;
    let bench = workbench(&task)?;
    let run = train_cb(&bench, &cfg).runtime()?;
    let mut out = Outputs::new(&a.out.out)?;
    let mut metrics = String::from("epoch,train_loss,dev_wer\n");
    for m in &run.metrics {
        let loss = m.train_loss.map_or(String::new(), |l| format!("{l:.6}"));
        metrics += &format!("{},{},{:.6}\n", m.epoch, loss, m.dev_wer);
    }
    out.write("metrics.csv", metrics.as_bytes())?;
    for d in &run.dumps {
        out.write(&format!("epoch{:03}.dump", d.tag.epoch), &d.to_bytes().runtime()?)?;
    }
    let ckpt = out.dir.join("params.ckpt");
    save_checkpoint(&run.params, &ckpt).runtime()?;
    out.record(&ckpt)?;
    let trained = Trained {
        model: &run.model,
        params: &run.params,
    };
    let report = evaluate(&bench, &trained, Split::Test, &cfg).runtime()?;
    out.write("results.csv", report_lines(&cfg, "test", &report).as_bytes())?;
    let inputs = BTreeMap::from([("task".to_string(), bench.task.fingerprint())]);
    let config = serde_json::json!({"task": task, "train": cfg, "backbone": run.backbone_checksum});
    out.finish("train", argv, config, seeds(&task, &cfg), inputs)
}

fn cmd_eval(a: &EvalArgs, argv: &[String]) -> CliResult<()> {
    let split = match a.split {
        SplitArg::Dev => Split::Dev,
        SplitArg::Test => Split::Test,
    };
    let (task, cfg, params_path) = match &a.run {
        Some(dir) => {
            let path = dir.join(MANIFEST);
            let text = std::fs::read_to_string(&path)
                .with_context(|| format!("run manifest {} not readable", path.display()))
                .config()?;
            let m: RunManifest = serde_json::from_str(&text).config()?;
            if m.subcommand != "train" {
                return Err(Failure::Config(anyhow!("{} is not a train run", dir.display())));
            }
            let task: TaskConfig = serde_json::from_value(m.config["task"].clone()).config()?;
            let cfg: TrainConfig = serde_json::from_value(m.config["train"].clone()).config()?;
            let ckpt = dir.join("params.ckpt");
            let recorded = m.outputs.get("params.ckpt").cloned().unwrap_or_default();
            if sha256_file(&ckpt).config()? != recorded {
                return Err(Failure::Config(anyhow!(
                    "{} does not match the hash recorded in its manifest",
                    ckpt.display()
                )));
            }
            (task, cfg, Some((ckpt, m.inputs.get("task").cloned())))
        }
        None => {
            let variant = a.variant.unwrap_or(Variant::None);
            let task = load_task(&a.task)?;
            (task, train_config(&a.model, variant, Method::Smb, 1.0, 1.0)?, None)
        }
    };
    let bench = workbench(&task)?;
    let model = LecbModel::new(cfg.model_config(bench.d_a), bench.task.vocab.len()).config()?;
    let params = match &params_path {
        Some((ckpt, fingerprint)) => {
            if fingerprint.as_deref() != Some(bench.task.fingerprint().as_str()) {
                return Err(Failure::Config(anyhow!(
                    "the regenerated task differs from the one the run was trained on; refusing stale results"
                )));
            }
            let mut p = model.init(0).runtime()?;
            let loaded = load_checkpoint(ckpt, 0).config()?;
            lecb::numerics::restore_into(&mut p, &loaded).config()?;
            p
        }
        None => model.init(lecb::numerics::derive_seed(cfg.seed, "cb")).runtime()?,
    };
    let trained = Trained {
        model: &model,
        params: &params,
    };
    let report = evaluate(&bench, &trained, split, &cfg).runtime()?;
    let mut out = Outputs::new(&a.out.out)?;
    out.write("results.csv", report_lines(&cfg, split.as_str(), &report).as_bytes())?;
    if cfg.variant != Variant::None {
        let dump = embedding_dump(&bench, &trained, &cfg, cfg.epochs).runtime()?;
        out.write("eval.dump", &dump.to_bytes().runtime()?)?;
    }
    let mut inputs = BTreeMap::from([("task".to_string(), bench.task.fingerprint())]);
    if let Some((ckpt, _)) = &params_path {
        inputs.insert(ckpt.display().to_string(), sha256_file(ckpt).runtime()?);
    }
    let config = serde_json::json!({"task": task, "train": cfg, "split": split.as_str()});
    out.finish("eval", argv, config, seeds(&task, &cfg), inputs)
}

fn cmd_matrix(a: &MatrixArgs, argv: &[String]) -> CliResult<()> {
    let task = load_task(&a.task)?;
    let cfg = train_config(&a.model, Variant::LecbV2, Method::Smb, 1.0, 1.0)?;
    let bench = workbench(&task)?;
    let rows = run_matrix(&bench, &cfg).runtime()?;
    let mut csv = format!("{}\n", MatrixRow::CSV_HEADER);
    for r in &rows {
        csv += &r.csv_line();
        csv.push('\n');
    }
    let mut summary = String::from("variant,lambda,mean_rwerr\n");
    let mut groups: BTreeMap<(Variant, String), Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.sampler.is_some()) {
        if let Some(v) = r.rwerr {
            groups.entry((r.variant, r.lambda.to_string())).or_default().push(v);
        }
    }
    for ((v, l), vals) in groups {
        summary += &format!("{v},{l},{:.6}\n", vals.iter().sum::<f64>() / vals.len() as f64);
    }
    let mut out = Outputs::new(&a.out.out)?;
    out.write("matrix.csv", csv.as_bytes())?;
    out.write("rwerr.csv", summary.as_bytes())?;
    let inputs = BTreeMap::from([("task".to_string(), bench.task.fingerprint())]);
    let config = serde_json::json!({"task": task, "train": cfg});
    out.finish("matrix", argv, config, seeds(&task, &cfg), inputs)
}

fn cmd_svcca(a: &SvccaArgs, argv: &[String]) -> CliResult<()> {
    let mut series: BTreeMap<(String, String), Vec<EmbeddingDump>> = BTreeMap::new();
    let mut inputs = BTreeMap::new();
    for p in &a.dumps {
        let d = EmbeddingDump::load(p).config()?;
        inputs.insert(p.display().to_string(), sha256_file(p).config()?);
        series.entry((d.tag.model.clone(), d.tag.sampler.clone())).or_default().push(d);
    }
    let mut out = Outputs::new(&a.out.out)?;
    let mut chart = LineChart {
        title: "Epoch-to-epoch SVCCA of bias embeddings".into(),
        x_label: "epoch".into(),
        y_label: "mean canonical correlation".into(),
        series: Vec::new(),
        y_range: Some((0.0, 1.0)),
    };
    let single = series.len() == 1;
    for ((model, sampler), mut dumps) in series {
        dumps.sort_by_key(|d| d.tag.epoch);
        let curve = epoch_correlation_curve(&dumps, a.keep).config()?;
        let mut csv = String::from("epoch,rho\n");
        for p in &curve {
            csv += &format!("{},{:.8}\n", p.to.epoch, p.rho);
        }
        let name = if single { "rho.csv".to_string() } else { format!("rho_{model}_{sampler}.csv") };
        out.write(&name, csv.as_bytes())?;
        chart.series.push(Series {
            name: format!("{model}/{sampler}"),
            points: curve.iter().map(|p| (p.to.epoch as f64, p.rho)).collect(),
        });
    }
    out.write("rho_curve.svg", chart.to_svg().as_bytes())?;
    out.finish("svcca", argv, serde_json::json!({"variance_keep": a.keep}), BTreeMap::new(), inputs)
}

fn cmd_sweep(a: &SweepArgs, argv: &[String]) -> CliResult<()> {
    let task = load_task(&a.task)?;
    let cfg = train_config(&a.model, a.variant, a.sampler, 1.0, 1.0)?;
    if let Some(p) = a.probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Failure::Config(anyhow!("retention {p} outside [0, 1]")));
    }
    let bench = workbench(&task)?;
    let rows = retention_sweep(&bench, &cfg, &a.probs).runtime()?;
    let mut csv = format!("{}\n", SweepRow::CSV_HEADER);
    for r in &rows {
        csv += &r.csv_line();
        csv.push('\n');
    }
    let mut out = Outputs::new(&a.out.out)?;
    out.write("sweep.csv", csv.as_bytes())?;
    let inputs = BTreeMap::from([("task".to_string(), bench.task.fingerprint())]);
    let config = serde_json::json!({"task": task, "train": cfg, "probs": a.probs});
    out.finish("sweep", argv, config, seeds(&task, &cfg), inputs)
}

fn replace_out(args: &[String], out: &Path) -> Vec<String> {
    let mut v: Vec<String> = Vec::with_capacity(args.len() + 2);
    let mut skip = false;
    for a in args {
        if skip {
            skip = false;
            continue;
        }
        if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            v.push(a.clone());
        }
    }
    v.push("--out".into());
    v.push(out.display().to_string());
    v
}

fn cmd_replay(a: &ReplayArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.manifest)
        .with_context(|| format!("manifest {} not readable", a.manifest.display()))
        .config()?;
    let m: RunManifest = serde_json::from_str(&text).config()?;
    if m.args.is_empty() {
        return Err(Failure::Config(anyhow!("manifest records no command line")));
    }
    let args = replace_out(&m.args, &a.out);
    let cli = Cli::try_parse_from(&args).config()?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(Failure::Config(anyhow!("manifest records a replay")));
    }
    dispatch(&cli.command, &args)
}

fn dispatch(command: &Command, argv: &[String]) -> CliResult<()> {
    match command {
        Command::Pools(a) => cmd_pools(a, argv),
        Command::Sample(a) => cmd_sample(a, argv),
        Command::Train(a) => cmd_train(a, argv),
        Command::Eval(a) => cmd_eval(a, argv),
        Command::Matrix(a) => cmd_matrix(a, argv),
        Command::Svcca(a) => cmd_svcca(a, argv),
        Command::Sweep(a) => cmd_sweep(a, argv),
        Command::Replay(a) => cmd_replay(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut argv: Vec<String> = std::env::args().collect();
    if let Some(first) = argv.first_mut() {
        *first = "lecb".into();
    }
    let cli = Cli::parse();
    match dispatch(&cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_replaces_output_directory() {
        let args: Vec<String> = ["lecb", "pools", "--corpus", "c.txt", "--out", "a", "--nmax", "2"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let r = replace_out(&args, Path::new("b"));
        assert_eq!(r, ["lecb", "pools", "--corpus", "c.txt", "--nmax", "2", "--out", "b"]);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn bail_is_runtime() {
        let r: anyhow::Result<()> = Err(anyhow!("x"));
        assert!(matches!(r.runtime(), Err(Failure::Runtime(_))));
    }
}
