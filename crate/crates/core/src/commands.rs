//! Command-line front end: `gen`, `train`, `eval` and `ablate`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::{export_heatmap, load_scene_dir, save_predictions, save_scene, PointCloud};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::UplModel;
use crate::nn::ParamStore;
use crate::rng::{fnv1a, substream, substream_seed};
use crate::training::{
    eval_episodes, evaluate, generate_dataset, generate_scenes, log_csv, threads_from_env, train,
    Dataset, TrainSettings,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.upl";
pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "samples,episodes,miou,mean_episode_miou,ece";

#[derive(Debug, Parser)]
#[command(name = "upl", version, about = "Uncertainty-aware prototype learning for few-shot point-cloud segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/test scenes as CSV files.
    Gen(GenArgs),
    /// Train a model and write checkpoint, log and run manifest.
    Train(TrainArgs),
    /// Evaluate a trained run on held-out episodes.
    Eval(EvalArgs),
    /// Train and evaluate every DPR/VPIR on/off combination.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Number of training scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Number of test scenes.
    #[arg(long)]
    pub test_scenes: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Scene directory written by `gen`; generated in memory when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Classes per episode (training and evaluation).
    #[arg(long)]
    pub n_way: Option<usize>,
    /// Support scenes per class.
    #[arg(long)]
    pub k_shot: Option<usize>,
    /// Disable dual-stream prototype refinement.
    #[arg(long)]
    pub no_dpr: bool,
    /// Disable variational prototype inference (single deterministic pass).
    #[arg(long)]
    pub no_vpir: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Training epochs, overriding the configuration.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Training output directory (checkpoint and config).
    #[arg(long)]
    pub run: PathBuf,
    /// Scene directory written by `gen`; generated in memory when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Classes per evaluation episode.
    #[arg(long)]
    pub n_way: Option<usize>,
    /// Support scenes per class.
    #[arg(long)]
    pub k_shot: Option<usize>,
    /// Comma-separated sample counts T.
    #[arg(long, value_delimiter = ',')]
    pub samples: Option<Vec<usize>>,
    /// Number of evaluation episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Write per-point prediction and heatmap CSVs.
    #[arg(long)]
    pub export_uncertainty: bool,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Scene directory written by `gen`; generated in memory when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated sample counts T.
    #[arg(long, value_delimiter = ',')]
    pub samples: Option<Vec<usize>>,
    /// Training epochs for every variant.
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Identity of a run: configuration path, seed, output and a content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: String,
    pub seed: u64,
    pub out: String,
    pub run_id: String,
}

pub fn run_id(cfg: &Config) -> Result<String> {
    let mut bytes = cfg.to_toml()?.into_bytes();
    bytes.extend_from_slice(&cfg.seed.to_le_bytes());
    Ok(format!("{:016x}", fnv1a(&bytes)))
}

fn load_config(common: &CommonArgs) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_model_args(cfg: &mut Config, m: &ModelArgs) {
    if let Some(n) = m.n_way {
        cfg.train.n_way = n;
        cfg.eval.n_way = n;
    }
    if let Some(k) = m.k_shot {
        cfg.train.k_shot = k;
        cfg.eval.k_shot = k;
    }
    if m.no_dpr {
        cfg.dpr.enabled = false;
    }
    if m.no_vpir {
        cfg.vpir.enabled = false;
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })
}

fn load_dataset(cfg: &Config, data: Option<&Path>) -> Result<Dataset> {
    match data {
        Some(dir) => Ok(Dataset {
            train: load_scene_dir(&dir.join("train"))?,
            test: load_scene_dir(&dir.join("test"))?,
        }),
        None => generate_dataset(cfg),
    }
}

pub fn build_model(cfg: &Config) -> Result<UplModel> {
    UplModel::new(
        cfg.model.clone(),
        cfg.input_dim(),
        &cfg.dpr,
        &cfg.vpir,
        cfg.base_classes(),
    )
}

pub fn init_store(cfg: &Config, model: &UplModel) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    model.init_params(&mut store, &mut substream(cfg.seed, "init", 0))?;
    Ok(store)
}

fn summarize(scenes: &[PointCloud]) -> String {
    let points: usize = scenes.iter().map(PointCloud::len).sum();
    let mut per_class = std::collections::BTreeMap::<i64, usize>::new();
    for s in scenes {
        for c in s.classes() {
            *per_class.entry(c).or_default() += 1;
        }
    }
    let classes: Vec<String> = per_class.iter().map(|(c, n)| format!("{c}:{n}")).collect();
    format!(
        "{} scenes, {points} points, scenes per class [{}]",
        scenes.len(),
        classes.join(" ")
    )
}

pub fn cmd_gen(args: &GenArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    if let Some(c) = args.classes {
        cfg.data.num_classes = c;
        cfg.data.classes_per_scene = cfg.data.classes_per_scene.min(c.max(1));
    }
    if let Some(s) = args.scenes {
        cfg.data.train_scenes = s;
    }
    if let Some(s) = args.test_scenes {
        cfg.data.test_scenes = s;
    }
    if cfg.data.num_classes == 0 || cfg.data.train_scenes == 0 {
        return Err(Error::InvalidArgument("--classes and --scenes must be >= 1".into()));
    }
    let out = &args.common.out;
    for (split, count) in [("train", cfg.data.train_scenes), ("test", cfg.data.test_scenes)] {
        let dir = out.join(split);
        create_dir(&dir)?;
        let scenes = generate_scenes(&cfg, split, count)?;
        for s in &scenes {
            save_scene(&dir.join(format!("{}.csv", s.scene_id())), s)?;
        }
        if !scenes.is_empty() {
            println!("{split}: {}", summarize(&scenes));
        }
    }
    write(&out.join(CONFIG_FILE), &cfg.to_toml()?)
}

/// Trains with `cfg` and writes checkpoint, log, config and manifest into `out`.
pub fn run_training(cfg: &Config, data: Option<&Path>, out: &Path, config_name: &str) -> Result<ParamStore> {
    cfg.validate()?;
    create_dir(out)?;
    let dataset = load_dataset(cfg, data)?;
    let model = build_model(cfg)?;
    let mut store = init_store(cfg, &model)?;
    let settings = TrainSettings {
        skip_kl: false,
        threads: threads_from_env(),
    };
    let rows = train(&model, &mut store, cfg, &dataset.train, settings, |_| {})?;
    store.save(&out.join(CHECKPOINT_FILE))?;
    write(&out.join(LOG_FILE), &log_csv(&rows))?;
    write(&out.join(CONFIG_FILE), &cfg.to_toml()?)?;
    let manifest = RunManifest {
        config: config_name.to_string(),
        seed: cfg.seed,
        out: out.display().to_string(),
        run_id: run_id(cfg)?,
    };
    write(
        &out.join(RUN_FILE),
        &toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    if let Some(last) = rows.last() {
        println!(
            "trained {} episodes, run {}, final seg {:.4} total {:.4}",
            rows.len(),
            manifest.run_id,
            last.loss.seg,
            last.loss.total
        );
    }
    Ok(store)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    apply_model_args(&mut cfg, &args.model);
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
        cfg.train.warmup_epochs = cfg.train.warmup_epochs.map(|w| w.min(e));
    }
    let name = args
        .common
        .config
        .as_ref()
        .map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
    run_training(&cfg, args.model.data.as_deref(), &args.common.out, &name).map(|_| ())
}

fn metrics_row(samples: usize, r: &MetricsReport) -> String {
    format!(
        "{samples},{},{},{},{}",
        r.episodes, r.miou, r.mean_episode_miou, r.ece
    )
}

/// Evaluates `store` for every T in `cfg.eval.samples`, writing the
/// metrics table and reliability CSVs into `out`.
pub fn run_evaluation(
    cfg: &Config,
    store: &ParamStore,
    data: Option<&Path>,
    out: &Path,
    export: bool,
) -> Result<Vec<(usize, MetricsReport)>> {
    cfg.validate()?;
    create_dir(out)?;
    let dataset = load_dataset(cfg, data)?;
    let model = build_model(cfg)?;
    let expected = init_store(cfg, &model)?;
    expected.check_compatible(store)?;
    let eval_seed = substream_seed(cfg.seed, "eval", 0);
    let episodes = eval_episodes(cfg, &dataset.test, eval_seed)?;
    let threads = threads_from_env();
    let mut table = format!("{METRICS_HEADER}\n");
    let mut reports = Vec::new();
    for &t in &cfg.eval.samples {
        let ev = evaluate(&model, store, &episodes, t, eval_seed, cfg.eval.ece_bins, threads)?;
        let _ = writeln!(table, "{}", metrics_row(t, &ev.report));
        write(&out.join(format!("reliability_T{t}.csv")), &ev.report.calibration.to_csv())?;
        if export {
            let dir = out.join("predictions");
            create_dir(&dir)?;
            for (i, (ep, o)) in episodes.iter().zip(&ev.outputs).enumerate() {
                let truth = ep.query_labels();
                save_predictions(&dir.join(format!("episode{i:03}_T{t}.csv")), o, &truth)?;
                export_heatmap(&dir.join(format!("heatmap{i:03}_T{t}.csv")), &ep.query, o, &truth)?;
            }
        }
        println!(
            "T={t}: mIoU {:.4} (per-episode {:.4}), ECE {:.4} over {} episodes",
            ev.report.miou, ev.report.mean_episode_miou, ev.report.ece, ev.report.episodes
        );
        reports.push((t, ev.report));
    }
    write(&out.join(METRICS_FILE), &table)?;
    Ok(reports)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let mut cfg = match &args.common.config {
        Some(p) => Config::load(p)?,
        None => Config::load(&args.run.join(CONFIG_FILE))?,
    };
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.n_way {
        cfg.eval.n_way = n;
    }
    if let Some(k) = args.k_shot {
        cfg.eval.k_shot = k;
    }
    if let Some(s) = &args.samples {
        cfg.eval.samples = s.clone();
    }
    if let Some(e) = args.episodes {
        cfg.eval.episodes = e;
    }
    let store = ParamStore::load(&args.run.join(CHECKPOINT_FILE))?;
    run_evaluation(&cfg, &store, args.data.as_deref(), &args.common.out, args.export_uncertainty)
        .map(|_| ())
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut base = load_config(&args.common)?;
    if let Some(e) = args.epochs {
        base.train.epochs = e;
        base.train.warmup_epochs = base.train.warmup_epochs.map(|w| w.min(e));
    }
    if let Some(s) = &args.samples {
        base.eval.samples = s.clone();
    }
    let out = &args.common.out;
    create_dir(out)?;
    let mut table = String::from("dpr,vpir,samples,miou,ece\n");
    for (dpr, vpir) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut cfg = base.clone();
        cfg.dpr.enabled = dpr;
        cfg.vpir.enabled = vpir;
        let dir = out.join(format!("dpr{}_vpir{}", u8::from(dpr), u8::from(vpir)));
        let store = run_training(&cfg, args.data.as_deref(), &dir, "ablation")?;
        for (t, r) in run_evaluation(&cfg, &store, args.data.as_deref(), &dir, false)? {
            let _ = writeln!(table, "{dpr},{vpir},{t},{},{}", r.miou, r.ece);
        }
    }
    write(&out.join("ablation.csv"), &table)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}
