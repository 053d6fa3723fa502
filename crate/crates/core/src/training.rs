//! Dataset construction, episodic training and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::Config;
use crate::data::{generate_synthetic_scene, sample_episode, Episode, EpisodeSpec, PointCloud};
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{LossBreakdown, TrainOptions, UplModel};
use crate::nn::{Gradients, Graph, Optimizer, ParamStore};
use crate::predictor::PredictionOutput;
use crate::rng::{substream, substream_seed};

/// `β_max · min(1, e / warmup)`; a zero warm-up gives `β_max` at once.
pub fn beta_schedule(epoch: usize, beta_max: f64, warmup_epochs: usize) -> f64 {
    if warmup_epochs == 0 {
        return beta_max;
    }
    beta_max * (epoch as f64 / warmup_epochs as f64).min(1.0)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

/// Scenes holding `classes_per_scene` distinct random classes each.
pub fn generate_scenes(cfg: &Config, split: &str, count: usize) -> Result<Vec<PointCloud>> {
    let d = &cfg.data;
    let all: Vec<i64> = (0..d.num_classes as i64).collect();
    (0..count)
        .map(|i| {
            let mut rng = substream(cfg.seed, &format!("data-{split}"), i as u64);
            let mut classes: Vec<i64> = all
                .choose_multiple(&mut rng, d.classes_per_scene)
                .copied()
                .collect();
            classes.sort_unstable();
            let scene_cfg = crate::data::SyntheticSceneConfig {
                seed: substream_seed(cfg.seed, &format!("scene-{split}"), i as u64),
                ..d.scene.clone()
            };
            let cloud = generate_synthetic_scene(&scene_cfg, &classes)?;
            let points = cloud.points().to_vec();
            PointCloud::new(points, cloud.dim(), cloud.labels().to_vec(), format!("{split}-{i:04}"))
        })
        .collect()
}

pub fn generate_dataset(cfg: &Config) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_scenes(cfg, "train", cfg.data.train_scenes)?,
        test: generate_scenes(cfg, "test", cfg.data.test_scenes)?,
    })
}

/// Fixed list of evaluation episodes; episode `i` targets the novel
/// classes starting at rotation `i`.
pub fn eval_episodes(cfg: &Config, scenes: &[PointCloud], seed: u64) -> Result<Vec<Episode>> {
    let novel = &cfg.data.novel_classes;
    let e = &cfg.eval;
    (0..e.episodes)
        .map(|i| {
            let classes = (0..e.n_way).map(|w| novel[(i + w) % novel.len()]).collect();
            let spec = EpisodeSpec::new(e.k_shot, classes, substream_seed(seed, "eval-episode", i as u64))?;
            sample_episode(scenes, &spec)
        })
        .collect()
}

/// Training episode for global step `step`.
pub fn train_episode_spec(cfg: &Config, step: usize) -> Result<EpisodeSpec> {
    let mut rng = substream(cfg.seed, "train-episode", step as u64);
    let pool = cfg.train_classes();
    let classes = pool
        .choose_multiple(&mut rng, cfg.train.n_way)
        .copied()
        .collect();
    EpisodeSpec::new(cfg.train.k_shot, classes, rng.gen())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
}

pub const LOG_HEADER: &str = "epoch,step,seg,base,kl,beta,total";

pub fn log_line(r: &LogRow) -> String {
    let l = &r.loss;
    format!(
        "{},{},{},{},{},{},{}",
        r.epoch, r.step, l.seg, l.base, l.kl, l.beta, l.total
    )
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{}", log_line(r));
    }
    s
}

/// Loss and gradients of one episode without touching the parameters.
pub fn episode_gradients(
    model: &UplModel,
    store: &ParamStore,
    ep: &Episode,
    opts: &TrainOptions,
) -> Result<(Gradients, LossBreakdown)> {
    let mut g = Graph::new();
    let vars = model.episode_loss(&mut g, store, ep, opts)?;
    let breakdown = LossBreakdown::from_graph(&g, &vars, opts.beta);
    Ok((g.backward(vars.total)?, breakdown))
}

fn for_each_parallel<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

#[derive(Debug, Clone, Copy)]
pub struct TrainSettings {
    /// Drop the KL term from the graph (not only weight it by zero).
    pub skip_kl: bool,
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            skip_kl: false,
            threads: 1,
        }
    }
}

/// Runs `epochs × episodes_per_epoch` episodes. Every `parallel_episodes`
/// consecutive episodes share one optimizer step, their gradients summed
/// in episode order.
pub fn train(
    model: &UplModel,
    store: &mut ParamStore,
    cfg: &Config,
    scenes: &[PointCloud],
    settings: TrainSettings,
    mut on_row: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    let t = &cfg.train;
    let mut opt = Optimizer::new(t.optimizer, t.learning_rate)?;
    let warmup = t.warmup();
    let mut rows = Vec::with_capacity(t.epochs * t.episodes_per_epoch);
    let mut step = 0;
    for epoch in 0..t.epochs {
        let beta = beta_schedule(epoch, t.beta_max, warmup);
        let mut local = 0;
        while local < t.episodes_per_epoch {
            let batch = t.parallel_episodes.min(t.episodes_per_epoch - local);
            let jobs: Vec<(usize, Episode)> = (step..step + batch)
                .map(|s| Ok((s, sample_episode(scenes, &train_episode_spec(cfg, s)?)?)))
                .collect::<Result<_>>()?;
            let results = for_each_parallel(&jobs, settings.threads, |(s, ep)| {
                let opts = TrainOptions {
                    beta,
                    skip_kl: settings.skip_kl,
                    eps_seed: substream_seed(cfg.seed, "train-sample", *s as u64),
                };
                episode_gradients(model, store, ep, &opts)
            });
            for ((s, _), r) in jobs.iter().zip(results) {
                let (grads, loss) = r.map_err(|e| Error::Diverged {
                    epoch,
                    step: *s,
                    source: Box::new(e),
                })?;
                store.accumulate(&grads)?;
                let row = LogRow { epoch, step: *s, loss };
                on_row(&row);
                rows.push(row);
            }
            opt.step(store).map_err(|e| Error::Diverged {
                epoch,
                step: step + batch - 1,
                source: Box::new(e),
            })?;
            if !store.names().all(|n| store.value(n).is_some_and(|v| v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    step: step + batch - 1,
                    source: Box::new(Error::NonFinite { op: "optimizer step" }),
                });
            }
            step += batch;
            local += batch;
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub outputs: Vec<PredictionOutput>,
}

/// Prediction seed of evaluation episode `index`.
pub fn prediction_seed(seed: u64, index: usize) -> u64 {
    substream_seed(seed, "eval-mc", index as u64)
}

/// Evaluates with `samples` prior draws per episode; parameters are only read.
pub fn evaluate(
    model: &UplModel,
    store: &ParamStore,
    episodes: &[Episode],
    samples: usize,
    seed: u64,
    ece_bins: usize,
    threads: usize,
) -> Result<Evaluation> {
    let indexed: Vec<(usize, &Episode)> = episodes.iter().enumerate().collect();
    let outputs = for_each_parallel(&indexed, threads, |(i, ep)| {
        model.predict(store, ep, samples, prediction_seed(seed, *i))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut acc = MetricsAccumulator::new(ece_bins)?;
    for (ep, out) in episodes.iter().zip(&outputs) {
        acc.add_episode(
            &ep.spec.novel_classes,
            &out.confidences(),
            &out.predicted_labels,
            &ep.query_labels(),
        )?;
    }
    Ok(Evaluation {
        report: acc.finish()?,
        outputs,
    })
}

/// Threads from `UPL_THREADS`, default 1.
pub fn threads_from_env() -> usize {
    std::env::var("UPL_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
