//! The `drdl` executable: dataset synthesis, re-conduction, training,
//! evaluation, gradient checking and loss-weight sweeps.
//!
//! Every subcommand also reads an optional flat `key = value` config file
//! (`--config`); flags override file values, unknown keys are rejected,
//! and everything is validated before any work starts. All outputs are
//! written atomically, and every subcommand is deterministic given its
//! seed and inputs.

use crate::data::{load_dataset, save_dataset, AugmentConfig, Dataset, Domain};
use crate::eval::{evaluate, split_query_gallery, subset, EvalOptions, EvalReport, FeatureSource};
use crate::gradcheck::{check_all, CheckBatch, GradCheckConfig};
use crate::model::DrdlModel;
use crate::reconduct::{reconduct, stats_csv, stats_text, summarize, CameraGraph, ReconductConfig};
use crate::svg::{line_plot, PlotConfig, Series};
use crate::synth::{generate, Membership, SynthConfig};
use crate::train::{train, TrainConfig, TrainSession};
use crate::util::atomic_write;
use crate::{checkpoint, data::LabelSpaces, Error, Result};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Parser, Debug)]
#[command(
    name = "drdl",
    about = "Dual-stream disentanglement for cross-domain image retrieval",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Generate the synthetic two-domain benchmark.
    Synth(SynthArgs),
    /// Resample a dataset over a camera graph so identities concentrate
    /// in fewer cameras.
    Reconduct(ReconductArgs),
    /// Train the dual-stream model.
    Train(TrainArgs),
    /// Score a checkpoint on a retrieval split.
    Eval(EvalArgs),
    /// Train and evaluate across a grid of one loss weight.
    Sweep(SweepArgs),
    /// Compare analytic gradients of all six losses against finite
    /// differences.
    Gradcheck(GradcheckArgs),
}

/// Parses CLI-style arguments and runs them; usage errors surface as
/// [`Error::InvalidInput`]. The binary's `main` uses clap's own exit
/// handling instead, so `--help` behaves conventionally there.
pub fn run_from<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidInput(e.to_string()))?;
    dispatch(cli)
}

pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Reconduct(a) => cmd_reconduct(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Flat `key = value` config file: one pair per line, `#` comments,
/// blank lines ignored. Every key must be consumed by the subcommand.
struct KvFile {
    map: BTreeMap<String, String>,
    path: PathBuf,
}

impl KvFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(KvFile {
                map: BTreeMap::new(),
                path: PathBuf::new(),
            });
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Format {
                    path: path.into(),
                    reason: format!("line {}: expected key = value, got {raw:?}", lineno + 1),
                });
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if map.insert(key.clone(), value).is_some() {
                return Err(Error::Format {
                    path: path.into(),
                    reason: format!("line {}: duplicate key {key:?}", lineno + 1),
                });
            }
        }
        Ok(KvFile {
            map,
            path: path.into(),
        })
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| Error::Format {
                path: self.path.clone(),
                reason: format!("key {key}: cannot parse {raw:?}: {e}"),
            }),
        }
    }

    /// Rejects whatever was not consumed: unknown keys are configuration
    /// mistakes, not extension points.
    fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.map.keys().map(String::as_str).collect();
        Err(Error::Format {
            path: self.path,
            reason: format!("unknown keys: {}", keys.join(", ")),
        })
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

// ---------------------------------------------------------------- synth

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Identities per domain.
    #[arg(long)]
    ids: Option<usize>,
    /// Cameras per domain.
    #[arg(long)]
    cams: Option<usize>,
    /// Training images per (identity, camera) pair.
    #[arg(long)]
    per: Option<usize>,
    /// Held-out target images per (identity, camera); 0 skips the split.
    #[arg(long)]
    eval_per: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Identity/camera membership: "all" or "one-camera".
    #[arg(long)]
    membership: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; receives source/, target/ and target_eval/.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value file; keys: ids, cams, per, eval-per, height,
    /// width, membership, seed.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_membership(s: &str) -> Result<Membership> {
    match s {
        "all" => Ok(Membership::AllCameras),
        "one-camera" => Ok(Membership::OneCameraPerId),
        other => Err(Error::Config(format!(
            "membership must be \"all\" or \"one-camera\", got {other:?}"
        ))),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let mut kv = KvFile::load(a.config.as_deref())?;
    let mut cfg = SynthConfig::default();
    if let Some(v) = pick(a.ids, kv.take("ids")?) {
        cfg.ids_per_domain = v;
    }
    if let Some(v) = pick(a.cams, kv.take("cams")?) {
        cfg.cams_per_domain = v;
    }
    if let Some(v) = pick(a.per, kv.take("per")?) {
        cfg.images_per_id_cam = v;
    }
    if let Some(v) = pick(a.eval_per, kv.take("eval-per")?) {
        cfg.eval_images_per_id_cam = v;
    }
    if let Some(v) = pick(a.height, kv.take("height")?) {
        cfg.height = v;
    }
    if let Some(v) = pick(a.width, kv.take("width")?) {
        cfg.width = v;
    }
    if let Some(v) = pick(a.membership, kv.take("membership")?) {
        cfg.membership = parse_membership(&v)?;
    }
    if let Some(v) = pick(a.seed, kv.take("seed")?) {
        cfg.seed = v;
    }
    kv.finish()?;

    let bench = generate(&cfg, &a.out)?;
    println!(
        "source: {} images ({} ids, {} cams)",
        bench.source.len(),
        bench.source.id_classes.len(),
        bench.source.meta.num_cams
    );
    println!(
        "target: {} images ({} ids, {} cams)",
        bench.target.len(),
        bench.target.id_classes.len(),
        bench.target.meta.num_cams
    );
    if let Some(e) = &bench.target_eval {
        println!("target_eval: {} images", e.len());
    }
    Ok(())
}

// ------------------------------------------------------------ reconduct

#[derive(Args, Debug)]
pub struct ReconductArgs {
    /// Training split directory to resample.
    #[arg(long)]
    data: PathBuf,
    /// Companion evaluation split, copied through unchanged.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Swap the roles of --data and --eval-data before anything else, so
    /// the former evaluation split becomes the training material.
    #[arg(long, requires = "eval_data")]
    swap_splits: bool,
    /// "line", "complete", or an explicit edge list like "0-1,1-2".
    #[arg(long)]
    graph: Option<String>,
    /// Chance of keeping a neighbor camera's images, in [0, 1].
    #[arg(long)]
    move_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; receives train/, optional eval/, stats.csv and
    /// stats.txt.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value file; keys: graph, move-prob, seed, swap-splits.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_graph(spec: &str, num_cameras: usize) -> Result<CameraGraph> {
    match spec {
        "line" => CameraGraph::line(num_cameras),
        "complete" => CameraGraph::complete(num_cameras),
        edges => {
            let mut pairs = Vec::new();
            for part in edges.split(',') {
                let Some((a, b)) = part.split_once('-') else {
                    return Err(Error::Config(format!(
                        "graph edge {part:?} must look like \"0-1\""
                    )));
                };
                let parse = |s: &str| {
                    s.trim().parse::<usize>().map_err(|e| {
                        Error::Config(format!("graph edge {part:?}: {e}"))
                    })
                };
                pairs.push((parse(a)?, parse(b)?));
            }
            CameraGraph::new(num_cameras, &pairs)
        }
    }
}

fn cmd_reconduct(a: ReconductArgs) -> Result<()> {
    let mut kv = KvFile::load(a.config.as_deref())?;
    let graph_spec = pick(a.graph, kv.take("graph")?).unwrap_or_else(|| "line".into());
    let move_prob = pick(a.move_prob, kv.take("move-prob")?).unwrap_or(0.25);
    let seed = pick(a.seed, kv.take("seed")?).unwrap_or(0);
    let swap = a.swap_splits || kv.take("swap-splits")?.unwrap_or(false);
    kv.finish()?;
    if swap && a.eval_data.is_none() {
        return Err(Error::Config("--swap-splits needs --eval-data".into()));
    }

    let (train_dir, eval_dir) = if swap {
        (a.eval_data.clone().expect("checked above"), Some(a.data.clone()))
    } else {
        (a.data.clone(), a.eval_data.clone())
    };
    let input = load_dataset(&train_dir, Domain::Source, 0)?;
    let cfg = ReconductConfig {
        graph: parse_graph(&graph_spec, input.meta.num_cams)?,
        move_probability: move_prob,
        seed,
    };
    let (out_ds, stats) = reconduct(&input, &cfg)?;
    save_dataset(&out_ds, &a.out.join("train"))?;

    let mut rows = vec![
        ("input".to_string(), summarize(&input)),
        ("train".to_string(), summarize(&out_ds)),
    ];
    if let Some(dir) = &eval_dir {
        let eval_ds = load_dataset(dir, Domain::Source, 0)?;
        save_dataset(&eval_ds, &a.out.join("eval"))?;
        rows.push(("eval".to_string(), summarize(&eval_ds)));
    }
    atomic_write(&a.out.join("stats.csv"), stats_csv(&rows).as_bytes())?;
    let text = stats_text(&rows);
    atomic_write(&a.out.join("stats.txt"), text.as_bytes())?;
    print!("{text}");
    println!(
        "kept {}/{} identities, {}/{} images; single-camera fraction {:.4}",
        stats.identities_kept,
        stats.identities_in,
        stats.images_kept,
        stats.images_in,
        stats.single_camera_fraction
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Labeled source-domain split directory.
    #[arg(long)]
    source: PathBuf,
    /// Unlabeled (or label-ignored) target-domain split directory.
    #[arg(long)]
    target: PathBuf,
    /// Held-out labeled target split, scored after every epoch.
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Output directory; receives metrics.csv and checkpoint.bin.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Start from the short desk-scale schedule instead of the full one.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    total_epochs: Option<usize>,
    #[arg(long)]
    iter_pre: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_e1: Option<f64>,
    #[arg(long)]
    lr_e2: Option<f64>,
    #[arg(long)]
    lr_w1: Option<f64>,
    #[arg(long)]
    lr_w2: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Weight of the encoder camera-confusion objective.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the camera-classifier recovery objective.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the style-encoder objective.
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the identity-classifier recovery objective.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Backbone channel widths, e.g. "16,32,64".
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    reduce_dim: Option<usize>,
    /// Enable train-time crop/flip/erase/color-jitter augmentation
    /// (on by default under --desk).
    #[arg(long, overrides_with = "no_augment")]
    augment: bool,
    /// Disable train-time augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Flat key=value file; keys: desk, total-epochs, iter-pre,
    /// batch-size, lr-e1, lr-e2, lr-w1, lr-w2, weight-decay,
    /// warmup-epochs, checkpoint-every, alpha, beta, lambda, tau, seed,
    /// blocks, reduce-dim, augment.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_blocks(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("blocks entry {p:?}: {e}")))
        })
        .collect()
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut kv = KvFile::load(a.config.as_deref())?;
    let desk = a.desk || kv.take("desk")?.unwrap_or(false);
    let mut cfg = if desk {
        TrainConfig::desk()
    } else {
        TrainConfig::default()
    };
    if let Some(v) = pick(a.total_epochs, kv.take("total-epochs")?) {
        cfg.total_epochs = v;
    }
    if let Some(v) = pick(a.iter_pre, kv.take("iter-pre")?) {
        cfg.iter_pre = v;
    }
    if let Some(v) = pick(a.batch_size, kv.take("batch-size")?) {
        cfg.batch_size = v;
    }
    if let Some(v) = pick(a.lr_e1, kv.take("lr-e1")?) {
        cfg.lr_e1 = v;
    }
    if let Some(v) = pick(a.lr_e2, kv.take("lr-e2")?) {
        cfg.lr_e2 = v;
    }
    if let Some(v) = pick(a.lr_w1, kv.take("lr-w1")?) {
        cfg.lr_w1 = v;
    }
    if let Some(v) = pick(a.lr_w2, kv.take("lr-w2")?) {
        cfg.lr_w2 = v;
    }
    if let Some(v) = pick(a.weight_decay, kv.take("weight-decay")?) {
        cfg.weight_decay_e1 = v;
    }
    if let Some(v) = pick(a.warmup_epochs, kv.take("warmup-epochs")?) {
        cfg.warmup_epochs = v;
    }
    if let Some(v) = pick(a.checkpoint_every, kv.take("checkpoint-every")?) {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = pick(a.alpha, kv.take("alpha")?) {
        cfg.weights.alpha = v;
    }
    if let Some(v) = pick(a.beta, kv.take("beta")?) {
        cfg.weights.beta = v;
    }
    if let Some(v) = pick(a.lambda, kv.take("lambda")?) {
        cfg.weights.lambda = v;
    }
    if let Some(v) = pick(a.tau, kv.take("tau")?) {
        cfg.weights.tau = v;
    }
    if let Some(v) = pick(a.seed, kv.take("seed")?) {
        cfg.seed = v;
    }
    if let Some(s) = pick(a.blocks.clone(), kv.take("blocks")?) {
        cfg.model.block_channels = parse_blocks(&s)?;
    }
    if let Some(v) = pick(a.reduce_dim, kv.take("reduce-dim")?) {
        cfg.model.reduce_dim = v;
    }
    let file_augment: Option<bool> = kv.take("augment")?;
    if a.augment {
        cfg.augment = Some(AugmentConfig::default());
    } else if a.no_augment {
        cfg.augment = None;
    } else if let Some(on) = file_augment {
        cfg.augment = if on { Some(AugmentConfig::default()) } else { None };
    }
    kv.finish()?;
    Ok(cfg)
}

struct LoadedData {
    source: Dataset,
    target: Dataset,
    eval: Option<Dataset>,
}

fn load_train_data(source: &Path, target: &Path, eval: Option<&Path>) -> Result<LoadedData> {
    let source = load_dataset(source, Domain::Source, 0)?;
    let offset = source.meta.num_cams;
    let target = load_dataset(target, Domain::Target, offset)?;
    let eval = eval
        .map(|p| load_dataset(p, Domain::Target, offset))
        .transpose()?;
    Ok(LoadedData {
        source,
        target,
        eval,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let data = load_train_data(&a.source, &a.target, a.eval.as_deref())?;
    let sess = TrainSession {
        source: &data.source,
        target: &data.target,
        eval: data.eval.as_ref(),
        out_dir: &a.out,
        resume: a.resume.as_deref(),
    };
    let outcome = train(&cfg, &sess)?;
    println!(
        "trained through epoch {} -> {}",
        cfg.total_epochs,
        outcome.checkpoint_path.display()
    );
    println!("metrics: {}", outcome.metrics_path.display());
    if let Some(r) = &outcome.final_eval {
        println!(
            "content retrieval: rank1 {:.4} rank5 {:.4} mAP {:.4} (chance {:.4})",
            r.rank(1),
            r.rank(5),
            r.map,
            r.chance
        );
    }
    Ok(())
}

// ----------------------------------------------------------------- eval

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled split directory to split into query/gallery by the
    /// lowest-sequence rule. Mutually exclusive with --query/--gallery.
    #[arg(long, conflicts_with_all = ["query", "gallery"])]
    data: Option<PathBuf>,
    #[arg(long, requires = "gallery")]
    query: Option<PathBuf>,
    #[arg(long, requires = "query")]
    gallery: Option<PathBuf>,
    /// Feature to retrieve with: "content" or "style".
    #[arg(long)]
    feature: Option<String>,
    /// Keep gallery items sharing both person and camera with the query.
    #[arg(long)]
    no_junk_rule: bool,
    /// Output directory; receives report.csv and cmc.csv.
    #[arg(long)]
    out: PathBuf,
    /// Also write the CMC curve as cmc.svg.
    #[arg(long)]
    svg: bool,
    /// Flat key=value file; keys: feature, junk-rule, svg.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_feature(s: &str) -> Result<FeatureSource> {
    match s {
        "content" | "content-fused" => Ok(FeatureSource::ContentFused),
        "style" => Ok(FeatureSource::Style),
        other => Err(Error::Config(format!(
            "feature must be \"content\" or \"style\", got {other:?}"
        ))),
    }
}

fn write_eval_artifacts(out: &Path, report: &EvalReport, svg: bool) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    atomic_write(&out.join("report.csv"), report.csv().as_bytes())?;
    let mut cmc = String::from("k,cmc\n");
    for (i, v) in report.cmc.iter().enumerate() {
        cmc.push_str(&format!("{},{v:.6}\n", i + 1));
    }
    atomic_write(&out.join("cmc.csv"), cmc.as_bytes())?;
    if svg {
        let points: Vec<(f64, f64)> = report
            .cmc
            .iter()
            .enumerate()
            .map(|(i, v)| ((i + 1) as f64, *v))
            .collect();
        let plot = line_plot(
            &PlotConfig {
                title: "cumulative match curve".into(),
                x_label: "rank".into(),
                y_label: "match rate".into(),
                ..PlotConfig::default()
            },
            &[Series::new(report.feature.label(), points)],
        );
        atomic_write(&out.join("cmc.svg"), plot.as_bytes())?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut kv = KvFile::load(a.config.as_deref())?;
    let feature = parse_feature(
        &pick(a.feature, kv.take("feature")?).unwrap_or_else(|| "content".into()),
    )?;
    let junk_rule = !a.no_junk_rule && kv.take("junk-rule")?.unwrap_or(true);
    let svg = a.svg || kv.take("svg")?.unwrap_or(false);
    kv.finish()?;

    let (mut model, _, _) = checkpoint::load::<f32>(&a.checkpoint)?;
    let (query, gallery) = match (&a.data, &a.query, &a.gallery) {
        (Some(dir), None, None) => {
            let ds = load_dataset(dir, Domain::Target, 0)?;
            let (q, g) = split_query_gallery(&ds);
            (subset(&ds, &q), subset(&ds, &g))
        }
        (None, Some(q), Some(g)) => (
            load_dataset(q, Domain::Target, 0)?,
            load_dataset(g, Domain::Target, 0)?,
        ),
        _ => {
            return Err(Error::Config(
                "give either --data or both --query and --gallery".into(),
            ))
        }
    };
    let opts = EvalOptions {
        feature,
        junk_rule,
        exclude_self: false,
    };
    let report = evaluate(&mut model, &query, &gallery, &opts)?;
    write_eval_artifacts(&a.out, &report, svg)?;
    println!(
        "{} retrieval: rank1 {:.4} rank5 {:.4} rank10 {:.4} mAP {:.4} (chance {:.4}, {} queries, {} gallery)",
        report.feature.label(),
        report.rank(1),
        report.rank(5),
        report.rank(10),
        report.map,
        report.chance,
        report.queries_scored,
        report.gallery_size
    );
    Ok(())
}

// ---------------------------------------------------------------- sweep

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Which loss weight to sweep: alpha, beta, lambda or tau.
    #[arg(long)]
    weight: String,
    /// Comma-separated grid, e.g. "0,0.005,0.01,0.1"; rows keep this
    /// order.
    #[arg(long)]
    values: String,
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let base = resolve_train_config(&a.train)?;
    if a.train.eval.is_none() {
        return Err(Error::Config("sweep needs --eval to score each cell".into()));
    }
    if a.train.resume.is_some() {
        return Err(Error::Config("sweep always trains from scratch; drop --resume".into()));
    }
    let values: Vec<f64> = a
        .values
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("sweep value {p:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let data = load_train_data(&a.train.source, &a.train.target, a.train.eval.as_deref())?;

    let mut csv = String::from("weight,value,rank1,rank5,rank10,map,style_rank1\n");
    let mut rank1_points = Vec::new();
    let mut map_points = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        let mut cfg = base.clone();
        match a.weight.as_str() {
            "alpha" => cfg.weights.alpha = v,
            "beta" => cfg.weights.beta = v,
            "lambda" => cfg.weights.lambda = v,
            "tau" => cfg.weights.tau = v,
            other => {
                return Err(Error::Config(format!(
                    "weight must be alpha, beta, lambda or tau, got {other:?}"
                )))
            }
        }
        let cell_dir = a.train.out.join(format!("cell{i}"));
        let sess = TrainSession {
            source: &data.source,
            target: &data.target,
            eval: data.eval.as_ref(),
            out_dir: &cell_dir,
            resume: None,
        };
        let mut outcome = train(&cfg, &sess)?;
        let content = outcome
            .final_eval
            .as_ref()
            .expect("eval split was given")
            .clone();
        let eval_ds = data.eval.as_ref().expect("checked above");
        let (q, g) = split_query_gallery(eval_ds);
        let style = evaluate(
            &mut outcome.model,
            &subset(eval_ds, &q),
            &subset(eval_ds, &g),
            &EvalOptions {
                feature: FeatureSource::Style,
                ..EvalOptions::default()
            },
        )?;
        csv.push_str(&format!(
            "{},{v},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            a.weight,
            content.rank(1),
            content.rank(5),
            content.rank(10),
            content.map,
            style.rank(1)
        ));
        rank1_points.push((v, content.rank(1)));
        map_points.push((v, content.map));
        println!(
            "{} = {v}: rank1 {:.4} mAP {:.4} style-rank1 {:.4}",
            a.weight,
            content.rank(1),
            content.map,
            style.rank(1)
        );
    }
    atomic_write(&a.train.out.join("sweep.csv"), csv.as_bytes())?;
    let plot = line_plot(
        &PlotConfig {
            title: format!("sweep over {}", a.weight),
            x_label: a.weight.clone(),
            y_label: "score".into(),
            ..PlotConfig::default()
        },
        &[
            Series::new("rank1", rank1_points),
            Series::new("mAP", map_points),
        ],
    );
    atomic_write(&a.train.out.join("sweep.svg"), plot.as_bytes())?;
    Ok(())
}

// ------------------------------------------------------------ gradcheck

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Check in double precision at tolerance 1e-6 (default: single
    /// precision at 1e-4).
    #[arg(long)]
    double: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional directory for gradcheck.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key=value file; keys: double, seed.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn gradcheck_tolerance(double: bool) -> f64 {
    if double {
        1e-6
    } else {
        1e-4
    }
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut kv = KvFile::load(a.config.as_deref())?;
    let double = a.double || kv.take("double")?.unwrap_or(false);
    let seed = pick(a.seed, kv.take("seed")?).unwrap_or(0);
    kv.finish()?;

    let model_cfg = crate::model::ModelConfig {
        in_channels: 3,
        block_channels: vec![4, 8],
        reduce_dim: 4,
    };
    let labels = LabelSpaces {
        num_source_ids: 5,
        num_source_cams: 2,
        num_target_cams: 3,
    };
    let batch = CheckBatch::random(3, 3, 3, 16, 8, &labels, seed ^ 0xabc);
    let check_cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let tolerance = gradcheck_tolerance(double);

    let checks = if double {
        let mut model = DrdlModel::<f64>::new(model_cfg, labels, seed)?;
        check_all(&mut model, &batch, &check_cfg)?
    } else {
        let mut model = DrdlModel::<f32>::new(model_cfg, labels, seed)?;
        check_all(&mut model, &batch, &check_cfg)?
    };

    let mut csv = String::from("loss,precision,rel_error,coords,seconds,pass\n");
    let mut failures = Vec::new();
    for c in &checks {
        let rel = if c.precision == "f64" {
            c.max_tensor_rel_error
        } else {
            c.group_rel_error
        };
        let pass = c.passes(tolerance);
        println!(
            "loss_{}: {} rel error {rel:.3e} over {} coords in {:.2}s .. {}",
            c.loss.label(),
            c.precision,
            c.total_checked,
            c.elapsed_secs,
            if pass { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!(
            "{},{},{rel:.6e},{},{:.3},{}\n",
            c.loss.label(),
            c.precision,
            c.total_checked,
            c.elapsed_secs,
            pass
        ));
        if !pass {
            let worst = c
                .params
                .iter()
                .max_by(|x, y| x.rel_error.total_cmp(&y.rel_error))
                .expect("a failing check holds at least one parameter");
            let detail = match worst.worst {
                Some((coord, analytic, numeric)) => format!(
                    "{} coordinate {coord}: analytic {analytic:.6e}, numeric {numeric:.6e}",
                    worst.name
                ),
                None => worst.name.clone(),
            };
            println!("  worst: {detail}");
            failures.push(format!("loss_{} ({detail})", c.loss.label()));
        }
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        atomic_write(&out.join("gradcheck.csv"), csv.as_bytes())?;
    }
    if failures.is_empty() {
        println!("all {} losses within {tolerance:.0e}", checks.len());
        Ok(())
    } else {
        Err(Error::Config(format!(
            "gradient check failed: {}",
            failures.join("; ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn run(args: &[&str]) -> Result<()> {
        run_from(std::iter::once("drdl").chain(args.iter().copied()))
    }

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("run.conf");
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn missing_required_flags_are_usage_errors() {
        assert!(matches!(run(&["synth"]), Err(Error::InvalidInput(_))));
        assert!(matches!(run(&["train"]), Err(Error::InvalidInput(_))));
        assert!(matches!(run(&["nonsense"]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn synth_writes_the_documented_image_counts() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("d");
        run(&[
            "synth", "--ids", "4", "--cams", "2", "--per", "2", "--eval-per", "0", "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        let count = |sub: &str| {
            std::fs::read_dir(out.join(sub))
                .unwrap()
                .filter(|e| {
                    e.as_ref()
                        .unwrap()
                        .file_name()
                        .to_string_lossy()
                        .ends_with(".png")
                })
                .count()
        };
        assert_eq!(count("source"), 4 * 2 * 2);
        assert_eq!(count("target"), 4 * 2 * 2);
        assert!(!out.join("target_eval").exists());
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let dir = tempdir().unwrap();
        let (a, b) = (dir.path().join("a"), dir.path().join("b"));
        for out in [&a, &b] {
            run(&[
                "synth", "--ids", "3", "--cams", "2", "--per", "1", "--eval-per", "0", "--seed",
                "7", "--out", out.to_str().unwrap(),
            ])
            .unwrap();
        }
        let name = "0000_c1_0000.png";
        assert_eq!(
            std::fs::read(a.join("source").join(name)).unwrap(),
            std::fs::read(b.join("source").join(name)).unwrap()
        );
        assert_eq!(
            std::fs::read(a.join("source/meta.txt")).unwrap(),
            std::fs::read(b.join("source/meta.txt")).unwrap()
        );
    }

    #[test]
    fn config_file_fills_values_and_flags_override_it() {
        let dir = tempdir().unwrap();
        let conf = write_config(
            dir.path(),
            "# benchmark size\nids = 3\ncams = 2\nper = 1\neval-per = 0\n",
        );
        let out = dir.path().join("d");
        run(&[
            "synth", "--ids", "5", "--config", conf.to_str().unwrap(), "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        let meta = std::fs::read_to_string(out.join("source/meta.txt")).unwrap();
        assert!(meta.contains("num_ids=5"), "flag should win: {meta}");
        assert!(meta.contains("num_cams=2"), "file should fill the rest: {meta}");
    }

    #[test]
    fn unknown_and_malformed_config_keys_are_rejected() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("d");
        let unknown = write_config(dir.path(), "ids = 3\nlr = 0.1\n");
        let err = run(&[
            "synth", "--config", unknown.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("unknown keys: lr"), "{err}");

        let twisted = write_config(dir.path(), "ids 3\n");
        assert!(run(&[
            "synth", "--config", twisted.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ])
        .is_err());

        let duplicated = write_config(dir.path(), "ids = 3\nids = 4\n");
        assert!(run(&[
            "synth", "--config", duplicated.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ])
        .is_err());

        let bad_value = write_config(dir.path(), "ids = many\n");
        assert!(run(&[
            "synth", "--config", bad_value.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ])
        .is_err());
    }

    #[test]
    fn graph_specs_parse_names_and_edge_lists() {
        assert_eq!(parse_graph("line", 3).unwrap(), CameraGraph::line(3).unwrap());
        assert_eq!(
            parse_graph("complete", 4).unwrap(),
            CameraGraph::complete(4).unwrap()
        );
        let custom = parse_graph("0-1, 1-2", 3).unwrap();
        assert_eq!(custom, CameraGraph::line(3).unwrap());
        assert!(parse_graph("0:1", 3).is_err());
        assert!(parse_graph("0-9", 3).is_err());
    }

    /// One shared fixture for the pipeline tests: synth once, train once
    /// (two epochs, tiny model), then drive eval/sweep/reconduct off it.
    #[test]
    fn pipeline_subcommands_compose_end_to_end() {
        let dir = tempdir().unwrap();
        let data = dir.path().join("data");
        run(&[
            "synth", "--ids", "4", "--cams", "2", "--per", "2", "--eval-per", "2", "--out",
            data.to_str().unwrap(),
        ])
        .unwrap();

        // train: desk base overridden down to a two-epoch smoke run.
        let run_dir = dir.path().join("run");
        let train_args = [
            "train",
            "--source", "SRC",
            "--target", "TGT",
            "--eval", "EVAL",
            "--out", "OUT",
            "--total-epochs", "2",
            "--iter-pre", "1",
            "--batch-size", "8",
            "--blocks", "4,8",
            "--reduce-dim", "4",
        ];
        let fill = |args: &[&str], out: &Path| -> Vec<String> {
            args.iter()
                .map(|s| match *s {
                    "SRC" => data.join("source").to_string_lossy().into_owned(),
                    "TGT" => data.join("target").to_string_lossy().into_owned(),
                    "EVAL" => data.join("target_eval").to_string_lossy().into_owned(),
                    "OUT" => out.to_string_lossy().into_owned(),
                    other => other.to_string(),
                })
                .collect()
        };
        let argv = fill(&train_args, &run_dir);
        run(&argv.iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
        assert!(run_dir.join("metrics.csv").exists());
        let ckpt = run_dir.join("checkpoint.bin");
        assert!(ckpt.exists());

        // --iter-pre 0 must die in validation, before any training.
        let bad = fill(
            &[
                "train", "--source", "SRC", "--target", "TGT", "--out", "OUT", "--iter-pre", "0",
            ],
            &dir.path().join("bad"),
        );
        let err = run(&bad.iter().map(String::as_str).collect::<Vec<_>>()).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");

        // eval on the checkpoint, both features, with CSV and SVG outputs.
        let eval_dir = dir.path().join("eval");
        run(&[
            "eval",
            "--checkpoint", ckpt.to_str().unwrap(),
            "--data", data.join("target_eval").to_str().unwrap(),
            "--feature", "style",
            "--svg",
            "--out", eval_dir.to_str().unwrap(),
        ])
        .unwrap();
        let report = std::fs::read_to_string(eval_dir.join("report.csv")).unwrap();
        assert!(report.starts_with("feature,rank1,rank5,rank10,map,chance,"));
        assert!(report.lines().nth(1).unwrap().starts_with("style,"));
        assert!(eval_dir.join("cmc.csv").exists());
        assert!(eval_dir.join("cmc.svg").exists());

        // a garbage checkpoint is an error, not a crash.
        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        assert!(run(&[
            "eval",
            "--checkpoint", junk.to_str().unwrap(),
            "--data", data.join("target_eval").to_str().unwrap(),
            "--out", eval_dir.to_str().unwrap(),
        ])
        .is_err());

        // sweep over two alpha values -> two ordered rows plus artifacts.
        let sweep_dir = dir.path().join("sweep");
        let sweep_args = fill(
            &[
                "sweep",
                "--source", "SRC",
                "--target", "TGT",
                "--eval", "EVAL",
                "--out", "OUT",
                "--total-epochs", "2",
                "--iter-pre", "1",
                "--batch-size", "8",
                "--blocks", "4,8",
                "--reduce-dim", "4",
                "--weight", "alpha",
                "--values", "0,0.01",
            ],
            &sweep_dir,
        );
        run(&sweep_args.iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
        let sweep_csv = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
        let lines: Vec<&str> = sweep_csv.trim_end().lines().collect();
        assert_eq!(lines[0], "weight,value,rank1,rank5,rank10,map,style_rank1");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("alpha,0,"));
        assert!(lines[2].starts_with("alpha,0.01,"));
        assert!(sweep_dir.join("sweep.svg").exists());
        assert!(sweep_dir.join("cell0/checkpoint.bin").exists());
        assert!(sweep_dir.join("cell1/checkpoint.bin").exists());

        // reconduct the target split with p=0 on a line graph.
        let rec_dir = dir.path().join("rec");
        run(&[
            "reconduct",
            "--data", data.join("target").to_str().unwrap(),
            "--eval-data", data.join("target_eval").to_str().unwrap(),
            "--move-prob", "0",
            "--out", rec_dir.to_str().unwrap(),
        ])
        .unwrap();
        let stats = std::fs::read_to_string(rec_dir.join("stats.csv")).unwrap();
        let train_row = stats
            .lines()
            .find(|l| l.starts_with("train,"))
            .expect("train row");
        assert!(train_row.ends_with("1.000000"), "{train_row}");
        assert!(rec_dir.join("train/meta.txt").exists());
        assert!(rec_dir.join("eval/meta.txt").exists());

        // swapped splits: the old eval split becomes the training input.
        let swap_dir = dir.path().join("swap");
        run(&[
            "reconduct",
            "--data", data.join("target").to_str().unwrap(),
            "--eval-data", data.join("target_eval").to_str().unwrap(),
            "--swap-splits",
            "--move-prob", "0",
            "--out", swap_dir.to_str().unwrap(),
        ])
        .unwrap();
        let swapped_meta = std::fs::read_to_string(swap_dir.join("eval/meta.txt")).unwrap();
        assert!(swapped_meta.contains("name=synth-target\n"), "{swapped_meta}");
    }

    #[test]
    fn gradcheck_command_passes_in_single_precision() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("g");
        run(&["gradcheck", "--out", out.to_str().unwrap()]).unwrap();
        let csv = std::fs::read_to_string(out.join("gradcheck.csv")).unwrap();
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "loss,precision,rel_error,coords,seconds,pass");
        assert_eq!(lines.len(), 7, "six losses: {csv}");
        assert!(lines[1..].iter().all(|l| l.ends_with(",true")), "{csv}");
    }
}
