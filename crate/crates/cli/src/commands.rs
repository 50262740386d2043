use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use log::info;

use densefew::config::Config;
use densefew::data::{generate_glyphs, holdout_split, Dataset, GlyphConfig, Split, SplitManifest};
use densefew::episodes::{
    evaluate, evaluate_both, evaluate_implanted, sample_both_tasks, sample_task, sample_tasks, task_accuracy,
    EvalConfig, FewShotTask, QueryMode,
};
use densefew::fewshot::cam::{cam, to_csv, to_pgm};
use densefew::implant::{loo_subtasks, train_implants, widen, ImplantConfig, ImplantSpec};
use densefew::models::{ArchKind, ArchitectureConfig, FeatureMap, Model, Pooling};
use densefew::optim::OptimKind;
use densefew::rng::{stream, Purpose};
use densefew::train::{
    classifier_accuracy, episodic_stage1_train, relabel, stage1_train, EpisodicConfig, LossMode, TrainConfig,
};
use densefew::{Error, Result, Tensor};

pub const SEED_ENV: &str = "DENSEFEW_SEED";
const DEFAULT_SEED: u64 = 17;
const BASE_HOLDOUT: f64 = 0.2;

#[derive(Debug, Parser)]
#[command(
    name = "densefew",
    version,
    about = "Few-shot classification with dense classification and implants"
)]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `key = value` file with defaults for the command's flags. Flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset.
    GenData(GenDataArgs),
    /// Train an embedding network and base classifier.
    TrainStage1(TrainArgs),
    /// Grow implants on a trained model and fit them on one support set.
    Implant(ImplantArgs),
    /// Evaluate few-shot accuracy over many sampled tasks.
    Eval(EvalArgs),
    /// Export a class activation map for one image.
    Cam(CamArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    #[arg(long)]
    distractors: Option<usize>,
    /// Also write the default base/val/novel split manifest here.
    #[arg(long)]
    splits: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// dense | gap | episodic
    #[arg(long)]
    loss: Option<String>,
    /// resnet12 | c128f
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    width_div: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau_init: Option<f64>,
    /// sgd | adam | adamw
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    flip: Option<bool>,
    /// Episodic mode: classes per episode.
    #[arg(long)]
    way: Option<usize>,
    /// Episodic mode: supports per class.
    #[arg(long)]
    shot: Option<usize>,
    /// Episodic mode: queries per class.
    #[arg(long)]
    queries: Option<usize>,
    /// Write the per-iteration loss, one value per line.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ImplantArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Support set as a dataset file; labels are mapped to task classes in
    /// increasing order.
    #[arg(long)]
    support: Option<PathBuf>,
    /// Dataset to sample a novel task from when no support file is given.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    /// Which sampled task to use.
    #[arg(long)]
    task: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// pooled | dense
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    splits: Option<PathBuf>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// nearest | dense (default: dense queries against GAP prototypes)
    #[arg(long)]
    inference: Option<String>,
    /// gap | gmp
    #[arg(long)]
    support_pool: Option<String>,
    /// gap | gmp | dense
    #[arg(long)]
    query_pool: Option<String>,
    /// novel | base | both
    #[arg(long)]
    protocol: Option<String>,
    /// Scale for dense inference (default: the model's learned scale).
    #[arg(long)]
    tau: Option<f64>,
    /// Base-class queries added to each task in the `both` protocol.
    #[arg(long)]
    base_queries: Option<usize>,
    /// Fit fresh implants on every task's supports before classifying.
    #[arg(long)]
    implant: Option<bool>,
    #[arg(long)]
    implant_channels: Option<usize>,
    #[arg(long)]
    implant_epochs: Option<usize>,
    /// pooled | dense
    #[arg(long)]
    implant_loss: Option<String>,
    /// Also write the machine-readable report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CamArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Index of the image in the dataset.
    #[arg(long)]
    image: Option<usize>,
    #[arg(long = "class")]
    class: Option<usize>,
    /// pgm | csv
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Merges flags over config-file values over defaults, and remembers the
/// result so the run can print it.
struct Resolver {
    config: Config,
    resolved: Vec<(&'static str, String)>,
}

impl Resolver {
    fn new(path: Option<&Path>, known: &[&str]) -> Result<Self> {
        let config = match path {
            Some(p) => Config::load(p, known)?,
            None => Config::default(),
        };
        Ok(Resolver {
            config,
            resolved: Vec::new(),
        })
    }

    fn opt<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>) -> Result<Option<T>> {
        let v = match flag {
            Some(v) => Some(v),
            None => self.config.get(key)?,
        };
        if let Some(v) = &v {
            self.resolved.push((key, v.to_string()));
        }
        Ok(v)
    }

    fn get<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>, default: T) -> Result<T> {
        match self.opt(key, flag)? {
            Some(v) => Ok(v),
            None => {
                self.resolved.push((key, default.to_string()));
                Ok(default)
            }
        }
    }

    fn require<T: FromStr + Display>(&mut self, key: &'static str, flag: Option<T>) -> Result<T> {
        self.opt(key, flag)?
            .ok_or_else(|| Error::Argument(format!("missing required --{key}")))
    }

    /// Flag, then config file, then `DENSEFEW_SEED`, then the default.
    fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        if let Some(v) = self.opt("seed", flag)? {
            return Ok(v);
        }
        let v = match std::env::var(SEED_ENV) {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Argument(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
            Err(_) => DEFAULT_SEED,
        };
        self.resolved.push(("seed", v.to_string()));
        Ok(v)
    }

    fn print(&self, command: &str) {
        let items: Vec<String> = self.resolved.iter().map(|(k, v)| format!("{k}={v}")).collect();
        eprintln!("{command}: {}", items.join(" "));
    }
}

fn path_arg(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Argument("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::State(e.to_string()))?;
    }
    let config = cli.config.as_deref();
    match cli.command {
        Command::GenData(a) => gen_data(a, config),
        Command::TrainStage1(a) => train_stage1(a, config),
        Command::Implant(a) => implant(a, config),
        Command::Eval(a) => eval(a, config),
        Command::Cam(a) => export_cam(a, config),
    }
}

fn gen_data(a: GenDataArgs, config: Option<&Path>) -> Result<()> {
    let mut r = Resolver::new(
        config,
        &[
            "classes",
            "per-class",
            "seed",
            "out",
            "height",
            "width",
            "channels",
            "noise",
            "jitter",
            "distractors",
            "splits",
        ],
    )?;
    let d = GlyphConfig::default();
    let cfg = GlyphConfig {
        classes: r.get("classes", a.classes, d.classes)?,
        per_class: r.get("per-class", a.per_class, d.per_class)?,
        height: r.get("height", a.height, d.height)?,
        width: r.get("width", a.width, d.width)?,
        channels: r.get("channels", a.channels, d.channels)?,
        noise: r.get("noise", a.noise, d.noise)?,
        jitter: r.get("jitter", a.jitter, d.jitter)?,
        distractors: r.get("distractors", a.distractors, d.distractors)?,
        seed: r.seed(a.seed)?,
    };
    let out: String = r.require("out", path_arg(a.out))?;
    let splits: Option<String> = r.opt("splits", path_arg(a.splits))?;
    r.print("gen-data");
    let ds = generate_glyphs(&cfg)?;
    ds.save(&out)?;
    info!("wrote {} images of {} classes to {out}", ds.len(), ds.classes);
    if let Some(p) = splits {
        std::fs::write(&p, SplitManifest::standard(ds.classes).to_string())?;
        info!("wrote split manifest to {p}");
    }
    Ok(())
}

fn load_manifest(path: Option<String>, classes: usize) -> Result<SplitManifest> {
    let m = match path {
        Some(p) => SplitManifest::load(p)?,
        None => SplitManifest::standard(classes),
    };
    if m.len() != classes {
        return Err(Error::format(
            0,
            format!("split manifest covers {} classes, dataset has {classes}", m.len()),
        ));
    }
    Ok(m)
}

fn parse<T: FromStr<Err = Error>>(s: &str) -> Result<T> {
    s.parse()
}

fn train_stage1(a: TrainArgs, config: Option<&Path>) -> Result<()> {
    let mut r = Resolver::new(
        config,
        &[
            "data",
            "splits",
            "out",
            "loss",
            "arch",
            "width-div",
            "iters",
            "batch",
            "seed",
            "tau-init",
            "optimizer",
            "lr",
            "flip",
            "way",
            "shot",
            "queries",
            "loss-log",
        ],
    )?;
    let data: String = r.require("data", path_arg(a.data))?;
    let splits = r.opt("splits", path_arg(a.splits))?;
    let out: String = r.require("out", path_arg(a.out))?;
    let loss: String = r.get("loss", a.loss, "dense".into())?;
    let arch: ArchKind = parse(&r.get("arch", a.arch, "resnet12".into())?)?;
    let width_div = r.get("width-div", a.width_div, 8)?;
    let seed = r.seed(a.seed)?;
    let iters = r.get("iters", a.iters, 500)?;
    let loss_log = r.opt("loss-log", path_arg(a.loss_log))?;

    let ds = Dataset::load(&data)?;
    let manifest = load_manifest(splits, ds.classes)?;
    let base = manifest.classes(Split::Base);
    let (train_idx, _) = holdout_split(&ds.class_indices(), &base, BASE_HOLDOUT);
    let images = ds.normalized_images().select(&train_idx)?;
    let labels = relabel(&train_idx.iter().map(|&i| ds.labels[i]).collect::<Vec<_>>(), &base)?;
    let arch_cfg = ArchitectureConfig::width_div(arch, width_div, ds.image_shape())?;
    let mut model = Model::new(arch_cfg, seed)?;

    let losses = if loss == "episodic" {
        let d = EpisodicConfig::default();
        let cfg = EpisodicConfig {
            way: r.get("way", a.way, d.way)?,
            shot: r.get("shot", a.shot, d.shot)?,
            queries: r.get("queries", a.queries, d.queries)?,
            episodes: iters,
            seed,
            lr: r.get("lr", a.lr, d.lr)?,
            tau: r.get("tau-init", a.tau_init, d.tau)?,
        };
        r.print("train-stage1");
        episodic_stage1_train(&mut model, &images, &labels, base.len(), &cfg)?
    } else {
        let mode: LossMode = parse(&loss)?;
        let optimizer: OptimKind = parse(&r.get("optimizer", a.optimizer, "sgd".into())?)?;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            iterations: iters,
            batch: r.get("batch", a.batch, d.batch)?,
            seed,
            tau_init: r.get("tau-init", a.tau_init, d.tau_init)?,
            loss: mode,
            optimizer,
            lr: r.get("lr", a.lr, TrainConfig::default_lr(optimizer))?,
            flip: r.get("flip", a.flip, d.flip)?,
            ..d
        };
        r.print("train-stage1");
        let losses = stage1_train(&mut model, &images, &labels, base.len(), &cfg)?;
        let acc = classifier_accuracy(&model, &images, &labels, mode == LossMode::Dense)?;
        info!("base training accuracy {:.2}%", 100.0 * acc);
        losses
    };
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        info!("loss {first:.4} -> {last:.4} over {} iterations", losses.len());
    }
    if let Some(p) = loss_log {
        let text: String = losses.iter().map(|l| format!("{l:?}\n")).collect();
        std::fs::write(p, text)?;
    }
    model.save(&out)?;
    info!("wrote model to {out} (base checksum {})", &model.base_checksum()[..16]);
    Ok(())
}

/// Example indices of every class in `classes`, as a task pool.
fn class_pool(ds: &Dataset, classes: &[usize], keep: impl Fn(&[usize]) -> Vec<usize>) -> Vec<Vec<usize>> {
    let per = ds.class_indices();
    classes.iter().map(|&c| keep(&per[c])).collect()
}

/// Compact a pool into `0..n` positions, returning the dataset indices in
/// that order.
fn compact(pool: &[Vec<usize>]) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut order = Vec::new();
    let mut local = Vec::new();
    for idx in pool {
        let start = order.len();
        order.extend_from_slice(idx);
        local.push((start..order.len()).collect());
    }
    (order, local)
}

/// Images with their task labels.
type Labelled = (Tensor, Vec<usize>);

fn implant(a: ImplantArgs, config: Option<&Path>) -> Result<()> {
    let mut r = Resolver::new(
        config,
        &[
            "model", "support", "data", "splits", "way", "shot", "queries", "task", "seed", "channels", "epochs",
            "loss", "lr", "out",
        ],
    )?;
    let model_path: String = r.require("model", path_arg(a.model))?;
    let support_path = r.opt("support", path_arg(a.support))?;
    let shot = r.opt("shot", a.shot)?;
    if shot.is_some_and(|k| k < 2) {
        return Err(Error::Unsupported(
            "implant training uses leave-one-out subtasks and does not apply to 1-shot tasks (need --shot >= 2)".into(),
        ));
    }
    let d = ImplantConfig::default();
    let cfg = ImplantConfig {
        channels: r.get("channels", a.channels, d.channels)?,
        epochs: r.get("epochs", a.epochs, d.epochs)?,
        loss: parse(&r.get("loss", a.loss, "pooled".into())?)?,
        lr: r.get("lr", a.lr, d.lr)?,
        ..d
    };
    let out: String = r.require("out", path_arg(a.out))?;
    let mut model = Model::load(&model_path)?;

    let (support, labels, way, queries): (Tensor, Vec<usize>, usize, Option<Labelled>) = match support_path {
        Some(p) => {
            r.print("implant");
            let s = Dataset::load(&p)?;
            if s.image_shape() != model.config().input {
                return Err(Error::format(0, "support images do not match the model input"));
            }
            let mut present: Vec<usize> = s.labels.clone();
            present.sort_unstable();
            present.dedup();
            let labels = relabel(&s.labels, &present)?;
            (s.normalized_images(), labels, present.len(), None)
        }
        None => {
            let data: String = r.require("data", path_arg(a.data))?;
            let splits = r.opt("splits", path_arg(a.splits))?;
            let way = r.get("way", a.way, 5)?;
            let shot = r.get("shot", shot, 5)?;
            let nq = r.get("queries", a.queries, 15)?;
            let task_index = r.get("task", a.task, 0)?;
            let seed = r.seed(a.seed)?;
            r.print("implant");
            let ds = Dataset::load(&data)?;
            let manifest = load_manifest(splits, ds.classes)?;
            let pool = class_pool(&ds, &manifest.classes(Split::Novel), |v| v.to_vec());
            let task = sample_task(&pool, way, shot, nq, &mut stream(seed, Purpose::Tasks, task_index))?;
            let x = ds.normalized_images();
            (
                x.select(&task.support)?,
                task.support_labels.clone(),
                way,
                Some((x.select(&task.query)?, task.query_labels.clone())),
            )
        }
    };
    loo_subtasks(&labels, way)?;
    let base_sum = model.base_checksum();
    let before = queries
        .as_ref()
        .map(|q| query_accuracy(&model, &support, &labels, way, q))
        .transpose()?;
    let spec = ImplantSpec::last_block(model.config(), cfg.channels);
    widen(&mut model, spec)?;
    let curve = train_implants(&mut model, &support, &labels, way, &cfg)?;
    if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
        info!("implant loss {first:.4} -> {last:.4} over {} epochs", curve.len());
    }
    if model.base_checksum() != base_sum {
        return Err(Error::State("base parameters changed during implant training".into()));
    }
    if let (Some(b), Some(q)) = (before, &queries) {
        let after = query_accuracy(&model, &support, &labels, way, q)?;
        info!("task query accuracy {:.2}% -> {:.2}%", 100.0 * b, 100.0 * after);
    }
    model.save(&out)?;
    info!("wrote widened model to {out}");
    Ok(())
}

fn query_accuracy(model: &Model, support: &Tensor, labels: &[usize], way: usize, q: &Labelled) -> Result<f64> {
    let mut maps = model.embed_maps(support)?;
    maps.extend(model.embed_maps(&q.0)?);
    let n = labels.len();
    let task = FewShotTask {
        way,
        shot: n / way.max(1),
        classes: (0..way).collect(),
        support: (0..n).collect(),
        support_labels: labels.to_vec(),
        query: (n..maps.len()).collect(),
        query_labels: q.1.clone(),
    };
    let cfg = EvalConfig {
        tau: model.tau().unwrap_or(10.0),
        ..EvalConfig::default()
    };
    task_accuracy(&maps, &task, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Protocol {
    Novel,
    Base,
    Both,
}

fn eval(a: EvalArgs, config: Option<&Path>) -> Result<()> {
    let mut r = Resolver::new(
        config,
        &[
            "model",
            "data",
            "splits",
            "way",
            "shot",
            "queries",
            "tasks",
            "seed",
            "inference",
            "support-pool",
            "query-pool",
            "protocol",
            "tau",
            "base-queries",
            "implant",
            "implant-channels",
            "implant-epochs",
            "implant-loss",
            "report",
        ],
    )?;
    let model_path: String = r.require("model", path_arg(a.model))?;
    let data: String = r.require("data", path_arg(a.data))?;
    let splits = r.opt("splits", path_arg(a.splits))?;
    let way = r.get("way", a.way, 5)?;
    let shot = r.get("shot", a.shot, 5)?;
    let queries = r.get("queries", a.queries, 30)?;
    let count = r.get("tasks", a.tasks, 600)?;
    let seed = r.seed(a.seed)?;
    let inference: String = r.get("inference", a.inference, "dense".into())?;
    let support_pool: Pooling = parse(&r.get("support-pool", a.support_pool, "gap".into())?)?;
    let query_pool: Option<String> = r.opt("query-pool", a.query_pool)?;
    let query = match (inference.as_str(), query_pool.as_deref()) {
        ("dense", None | Some("dense")) | ("nearest", Some("dense")) => QueryMode::Dense,
        ("nearest", None) => QueryMode::Pooled(Pooling::Gap),
        ("nearest", Some(p)) => QueryMode::Pooled(parse(p)?),
        ("dense", Some(p)) => {
            return Err(Error::Argument(format!(
                "--inference dense cannot use --query-pool {p}"
            )));
        }
        (other, _) => return Err(Error::Argument(format!("unknown inference {other:?}"))),
    };
    let protocol = match r.get("protocol", a.protocol, "novel".to_string())?.as_str() {
        "novel" => Protocol::Novel,
        "base" => Protocol::Base,
        "both" => Protocol::Both,
        other => return Err(Error::Argument(format!("unknown protocol {other:?}"))),
    };
    let use_implants = r.get("implant", a.implant, false)?;
    let d = ImplantConfig::default();
    let implant_cfg = ImplantConfig {
        channels: r.get("implant-channels", a.implant_channels, d.channels)?,
        epochs: r.get("implant-epochs", a.implant_epochs, d.epochs)?,
        loss: parse(&r.get("implant-loss", a.implant_loss, "pooled".into())?)?,
        ..d
    };
    let report_path = r.opt("report", path_arg(a.report))?;

    let model = Model::load(&model_path)?;
    let tau = r.get("tau", a.tau, model.tau().unwrap_or(10.0))?;
    let base_queries = r.get("base-queries", a.base_queries, queries * way)?;
    r.print("eval");
    let cfg = EvalConfig {
        support_pool,
        query,
        tau,
    };
    let ds = Dataset::load(&data)?;
    if ds.image_shape() != model.config().input {
        return Err(Error::format(0, "dataset images do not match the model input"));
    }
    let manifest = load_manifest(splits, ds.classes)?;
    let x = ds.normalized_images();
    let holdout_tail =
        |v: &[usize]| v[v.len() - ((v.len() as f64 * BASE_HOLDOUT).round() as usize).min(v.len())..].to_vec();

    let report = match protocol {
        Protocol::Novel | Protocol::Base => {
            let pool = if protocol == Protocol::Novel {
                class_pool(&ds, &manifest.classes(Split::Novel), |v| v.to_vec())
            } else {
                class_pool(&ds, &manifest.classes(Split::Base), holdout_tail)
            };
            let (order, local) = compact(&pool);
            let images = x.select(&order)?;
            let tasks = sample_tasks(&local, way, shot, queries, count, seed)?;
            if use_implants {
                if shot < 2 {
                    return Err(Error::Unsupported("implants do not apply to 1-shot tasks".into()));
                }
                evaluate_implanted(&model, &images, &tasks, &implant_cfg, &cfg)?
            } else {
                let maps = model.embed_maps(&images)?;
                evaluate(&maps, &tasks, &cfg)?
            }
        }
        Protocol::Both => {
            let head = model
                .head
                .as_ref()
                .ok_or_else(|| Error::State("the both protocol needs a model with a base classifier".into()))?;
            if model.implant.is_some() || use_implants {
                return Err(Error::Unsupported("the both protocol runs on un-widened models".into()));
            }
            let weights = head.weights(&model.store);
            let base = manifest.classes(Split::Base);
            if weights.classes() != base.len() {
                return Err(Error::format(
                    0,
                    "base classifier does not match the split's base classes",
                ));
            }
            let (n_order, n_local) = compact(&class_pool(&ds, &manifest.classes(Split::Novel), |v| v.to_vec()));
            let (b_order, b_local) = compact(&class_pool(&ds, &base, holdout_tail));
            let novel_maps: Vec<FeatureMap> = model.embed_maps(&x.select(&n_order)?)?;
            let base_maps: Vec<FeatureMap> = model.embed_maps(&x.select(&b_order)?)?;
            let tasks = sample_both_tasks(
                sample_tasks(&n_local, way, shot, queries, count, seed)?,
                &b_local,
                base_queries,
                seed,
            )?;
            evaluate_both(&weights, &novel_maps, &base_maps, &tasks, &cfg)?
        }
    };
    eprintln!("{report}");
    let machine = report.to_machine();
    print!("{machine}");
    if let Some(p) = report_path {
        std::fs::write(p, &machine)?;
    }
    Ok(())
}

fn export_cam(a: CamArgs, config: Option<&Path>) -> Result<()> {
    let mut r = Resolver::new(config, &["model", "data", "image", "class", "format", "tau", "out"])?;
    let model_path: String = r.require("model", path_arg(a.model))?;
    let data: String = r.require("data", path_arg(a.data))?;
    let image = r.get("image", a.image, 0)?;
    let class: usize = r.require("class", a.class)?;
    let format: String = r.get("format", a.format, "pgm".into())?;
    let out = r.opt("out", path_arg(a.out))?;
    let model = Model::load(&model_path)?;
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::State("model has no base classifier".into()))?;
    let tau = r.get("tau", a.tau, head.tau(&model.store))?;
    r.print("cam");
    if model.implant.is_some() {
        return Err(Error::Unsupported(
            "class maps use the base classifier of an un-widened model".into(),
        ));
    }
    let ds = Dataset::load(&data)?;
    let x = ds.normalized_images().select(&[image])?;
    let maps = model.embed_maps(&x)?;
    let map = cam(&maps[0], &head.weights(&model.store), tau, class)?;
    let text = match format.as_str() {
        "pgm" => to_pgm(&map)?,
        "csv" => to_csv(&map)?,
        other => return Err(Error::Argument(format!("unknown format {other:?}"))),
    };
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}
