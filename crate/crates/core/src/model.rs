//! The full episode pipeline: encoder, raw prototypes, DPR, VPIR and the
//! cosine predictor, plus the auxiliary base-class head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Episode, PointCloud};
use crate::dpr::{Dpr, DprConfig};
use crate::encoder::{build_tokens, dense, Encoder, EncoderConfig, FeatureMap, TokenSet};
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Graph, ParamStore, RowMixing, Tensor, Var};
use crate::predictor::{deterministic_predict, mc_predict, similarity_logits, PredictionOutput};
use crate::prototypes::{
    build_raw_prototypes, masks_from_labels, merge_support_prototypes, support_masks,
    PrototypeSet, Stage,
};
use crate::rng::substream;
use crate::vpir::{
    kl_divergence, reparameterize, sample_epsilon, GaussianPrototype, Source, Vpir, VpirConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub k_neighbors: usize,
    pub n_tok: usize,
    pub m_sub: usize,
    pub temperature: f64,
    /// Softmax confidence needed for a query point to enter an
    /// inference-time pseudo-mask.
    pub pseudo_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dim: 64,
            feature_dim: 64,
            k_neighbors: 8,
            n_tok: 128,
            m_sub: 1,
            temperature: crate::predictor::DEFAULT_TEMPERATURE,
            pseudo_threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn encoder_config(&self, input_dim: usize) -> EncoderConfig {
        EncoderConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            feature_dim: self.feature_dim,
            k_neighbors: self.k_neighbors,
        }
    }
}

/// Graph handles of the loss terms for one episode.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub seg: Var,
    pub base: Var,
    pub kl: Option<Var>,
    pub total: Var,
}

/// Scalar values of the loss terms; `total = seg + base + beta * kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub seg: f64,
    pub base: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_graph(g: &Graph, vars: &LossVars, beta: f64) -> Self {
        LossBreakdown {
            seg: g.value(vars.seg).item(),
            base: g.value(vars.base).item(),
            kl: vars.kl.map_or(0.0, |k| g.value(k).item()),
            beta,
            total: g.value(vars.total).item(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub beta: f64,
    /// Drops the KL term from the graph entirely.
    pub skip_kl: bool,
    /// Seed of the substream that supplies ε for the training samples.
    pub eps_seed: u64,
}

struct Support {
    raw: PrototypeSet,
    tokens: Vec<TokenSet>,
    fmaps: Vec<(FeatureMap, usize)>,
}

#[derive(Debug, Clone)]
pub struct UplModel {
    cfg: ModelConfig,
    encoder: Encoder,
    dpr: Option<Dpr>,
    vpir: Option<Vpir>,
    base_classes: Vec<i64>,
}

impl UplModel {
    pub fn new(
        cfg: ModelConfig,
        input_dim: usize,
        dpr: &DprConfig,
        vpir: &VpirConfig,
        base_classes: Vec<i64>,
    ) -> Result<Self> {
        if cfg.n_tok == 0 || cfg.m_sub == 0 {
            return Err(Error::Config("model.n_tok and model.m_sub must be >= 1".into()));
        }
        if !(cfg.temperature > 0.0) {
            return Err(Error::Config("model.temperature must be positive".into()));
        }
        let encoder = Encoder::new(cfg.encoder_config(input_dim))?;
        let d = cfg.feature_dim;
        Ok(UplModel {
            dpr: if dpr.enabled { Some(Dpr::new(dpr.clone(), d)?) } else { None },
            vpir: if vpir.enabled { Some(Vpir::new(vpir.clone(), d)?) } else { None },
            cfg,
            encoder,
            base_classes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn dpr(&self) -> Option<&Dpr> {
        self.dpr.as_ref()
    }

    pub fn vpir(&self) -> Option<&Vpir> {
        self.vpir.as_ref()
    }

    pub fn base_classes(&self) -> &[i64] {
        &self.base_classes
    }

    /// Initializes every parameter of the enabled modules in a fixed order.
    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.encoder.init_params(store, rng)?;
        if let Some(d) = &self.dpr {
            d.init_params(store, rng)?;
        }
        if let Some(v) = &self.vpir {
            v.init_params(store, rng)?;
        }
        if !self.base_classes.is_empty() {
            store.init_weight("base.w", self.cfg.feature_dim, self.base_classes.len(), rng)?;
            store.init_zeros("base.b", self.base_classes.len())?;
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, cloud: &PointCloud) -> Result<FeatureMap> {
        self.encoder.encode(g, store, cloud)
    }

    fn support(&self, g: &mut Graph, store: &ParamStore, ep: &Episode) -> Result<Support> {
        let c = ep.num_classes();
        let mut per_shot = Vec::with_capacity(ep.support.len());
        let mut tokens = Vec::with_capacity(ep.support.len());
        let mut fmaps = Vec::with_capacity(ep.support.len());
        for (i, shot) in ep.support.iter().enumerate() {
            let coords = shot.cloud.coords();
            let f = self.encode(g, store, &shot.cloud)?;
            let masks = support_masks(&shot.mask, shot.way, c);
            per_shot.push(build_raw_prototypes(g, &f, &coords, &masks, self.cfg.m_sub)?);
            if self.dpr.is_some() {
                tokens.push(build_tokens(g, &f, &coords, self.cfg.n_tok)?);
            }
            fmaps.push((f, i));
        }
        Ok(Support {
            raw: merge_support_prototypes(g, &per_shot)?,
            tokens,
            fmaps,
        })
    }

    /// Deterministic prototypes `p̂¹`: DPR plus α-fusion when enabled,
    /// the raw support prototypes otherwise.
    fn fused1(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        support: &Support,
        query_tokens: Option<&TokenSet>,
        query_raw: Option<&PrototypeSet>,
    ) -> Result<PrototypeSet> {
        match (&self.dpr, query_tokens, query_raw) {
            (Some(dpr), Some(qt), Some(qr)) => {
                let (s_ref, _q_ref) = dpr.refine(g, store, &support.tokens, qt, &support.raw, qr)?;
                dpr.fuse_alpha(g, store, &support.raw, &s_ref)
            }
            (Some(_), _, _) => Err(Error::InvalidArgument(
                "DPR needs query tokens and query prototypes".into(),
            )),
            (None, _, _) => support.raw.advanced(support.raw.protos, Stage::Fused1),
        }
    }

    /// Query prototypes from pseudo-masks: softmax over cosine logits
    /// against the raw support prototypes, points above the threshold.
    pub fn pseudo_masks(&self, g: &mut Graph, query: &FeatureMap, support_raw: &PrototypeSet) -> Result<Vec<Vec<bool>>> {
        let logits = similarity_logits(g, query.features, support_raw, self.cfg.temperature)?;
        let probs = softmax_rows(g.value(logits));
        let c = support_raw.num_classes();
        Ok((0..c)
            .map(|k| {
                (0..probs.rows())
                    .map(|j| support_raw.valid[k] && probs.get(j, k) > self.cfg.pseudo_threshold)
                    .collect()
            })
            .collect())
    }

    /// Training forward pass: `L = L_seg + L_base + β·L_KL`.
    pub fn episode_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ep: &Episode,
        opts: &TrainOptions,
    ) -> Result<LossVars> {
        let c = ep.num_classes();
        let support = self.support(g, store, ep)?;
        let qcoords = ep.query.coords();
        let qf = self.encode(g, store, &ep.query)?;
        let labels = ep.query_labels();
        let query_raw = build_raw_prototypes(g, &qf, &qcoords, &masks_from_labels(&labels, c), self.cfg.m_sub)?;
        let qtok = match self.dpr {
            Some(_) => Some(build_tokens(g, &qf, &qcoords, self.cfg.n_tok)?),
            None => None,
        };
        let p1 = self.fused1(g, store, &support, qtok.as_ref(), Some(&query_raw))?;

        let (seg, kl) = match &self.vpir {
            Some(vpir) => {
                let prior = vpir.gaussian_head(g, store, &p1, Source::Prior)?;
                let samples = vpir.config().train_samples;
                let mut probs_sum: Option<Var> = None;
                let mut single = None;
                for t in 0..samples {
                    let mut rng = substream(opts.eps_seed, "train-eps", t as u64);
                    let eps = sample_epsilon(&mut rng, &prior.valid, vpir.dim());
                    let z = reparameterize(g, &prior, eps, t)?;
                    let p2 = vpir.fuse_beta(g, store, &p1, &z)?;
                    let logits = similarity_logits(g, qf.features, &p2, self.cfg.temperature)?;
                    if samples == 1 {
                        single = Some(logits);
                    } else {
                        let p = g.softmax(logits)?;
                        probs_sum = Some(match probs_sum {
                            Some(acc) => g.add(acc, p)?,
                            None => p,
                        });
                    }
                }
                let seg = match single {
                    Some(l) => g.cross_entropy(l, &labels)?,
                    None => {
                        let mean = g.scale(probs_sum.expect("samples >= 2"), 1.0 / samples as f64)?;
                        g.nll(mean, &labels)?
                    }
                };
                let kl = if opts.skip_kl {
                    None
                } else {
                    let post = vpir.gaussian_head(g, store, &query_raw, Source::Posterior)?;
                    Some(kl_divergence(g, &post, &prior)?)
                };
                (seg, kl)
            }
            None => {
                let logits = similarity_logits(g, qf.features, &p1, self.cfg.temperature)?;
                (g.cross_entropy(logits, &labels)?, None)
            }
        };

        let mut scenes: Vec<(&FeatureMap, &[i64])> = support
            .fmaps
            .iter()
            .map(|(f, i)| (f, ep.support[*i].cloud.labels()))
            .collect();
        scenes.push((&qf, &ep.query_source_labels));
        let base = self.base_loss(g, store, &scenes)?;

        let sb = g.add(seg, base)?;
        let total = match kl {
            Some(k) => {
                let weighted = g.scale(k, opts.beta)?;
                g.add(sb, weighted)?
            }
            None => sb,
        };
        Ok(LossVars { seg, base, kl, total })
    }

    /// Point-weighted cross-entropy of the linear base head over every
    /// base-labelled point of the given scenes; 0 when there are none.
    pub fn base_loss(&self, g: &mut Graph, store: &ParamStore, scenes: &[(&FeatureMap, &[i64])]) -> Result<Var> {
        let per_scene: Vec<(Vec<Option<usize>>, Vec<usize>)> = scenes
            .iter()
            .map(|(_, labels)| {
                let mut rows = Vec::new();
                let mut targets = Vec::new();
                for (j, l) in labels.iter().enumerate() {
                    if let Some(b) = self.base_classes.iter().position(|c| c == l) {
                        rows.push(Some(j));
                        targets.push(b);
                    }
                }
                (rows, targets)
            })
            .collect();
        let total: usize = per_scene.iter().map(|(_, t)| t.len()).sum();
        if total == 0 || self.base_classes.is_empty() {
            return g.constant(Tensor::scalar(0.0));
        }
        let mut acc: Option<Var> = None;
        for ((fmap, _), (rows, targets)) in scenes.iter().zip(per_scene) {
            if targets.is_empty() {
                continue;
            }
            let picked = g.row_mix(fmap.features, Arc::new(RowMixing::gather(fmap.n, &rows)))?;
            let logits = dense(g, store, picked, "base")?;
            let ce = g.cross_entropy(logits, &targets)?;
            let w = g.scale(ce, targets.len() as f64 / total as f64)?;
            acc = Some(match acc {
                Some(a) => g.add(a, w)?,
                None => w,
            });
        }
        Ok(acc.expect("at least one scene has base points"))
    }

    /// Inference path: pseudo-mask query prototypes, then a `samples`-way
    /// prior ensemble (a single deterministic pass without VPIR).
    pub fn predict(
        &self,
        store: &ParamStore,
        ep: &Episode,
        samples: usize,
        seed: u64,
    ) -> Result<PredictionOutput> {
        if samples == 0 {
            return Err(Error::InvalidArgument("number of samples T must be >= 1".into()));
        }
        let mut g = Graph::new();
        let support = self.support(&mut g, store, ep)?;
        let qf = self.encode(&mut g, store, &ep.query)?;
        let (qtok, query_raw) = match self.dpr {
            Some(_) => {
                let coords = ep.query.coords();
                let masks = self.pseudo_masks(&mut g, &qf, &support.raw)?;
                let raw = if masks.iter().any(|m| m.iter().any(|&b| b)) {
                    build_raw_prototypes(&mut g, &qf, &coords, &masks, self.cfg.m_sub)?
                } else {
                    // No confident point at all: fall back to zero prototypes.
                    let zeros = g.constant(Tensor::zeros(&[support.raw.num_classes(), self.cfg.feature_dim]))?;
                    PrototypeSet {
                        protos: zeros,
                        stage: Stage::Raw,
                        class_ids: support.raw.class_ids.clone(),
                        valid: vec![false; support.raw.num_classes()],
                    }
                };
                (Some(build_tokens(&mut g, &qf, &coords, self.cfg.n_tok)?), Some(raw))
            }
            None => (None, None),
        };
        let p1 = self.fused1(&mut g, store, &support, qtok.as_ref(), query_raw.as_ref())?;
        match &self.vpir {
            Some(vpir) => {
                let prior: GaussianPrototype = vpir.gaussian_head(&mut g, store, &p1, Source::Prior)?;
                mc_predict(&mut g, store, vpir, qf.features, &prior, &p1, self.cfg.temperature, samples, seed)
            }
            None => deterministic_predict(&mut g, qf.features, &p1, self.cfg.temperature),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_scene, sample_episode, EpisodeSpec, SyntheticSceneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 8,
            feature_dim: 6,
            n_tok: 8,
            ..Default::default()
        }
    }

    fn episode() -> Episode {
        let scenes: Vec<PointCloud> = (0..4)
            .map(|s| {
                let cfg = SyntheticSceneConfig {
                    points_per_object: 6,
                    seed: s,
                    ..Default::default()
                };
                generate_synthetic_scene(&cfg, &[0, 3, 4]).unwrap()
            })
            .collect();
        sample_episode(&scenes, &EpisodeSpec::new(1, vec![0], 2).unwrap()).unwrap()
    }

    fn model(dpr: bool, vpir: bool) -> (UplModel, ParamStore) {
        let m = UplModel::new(
            small_cfg(),
            6,
            &DprConfig { enabled: dpr, ..Default::default() },
            &VpirConfig { enabled: vpir, ..Default::default() },
            vec![3, 4],
        )
        .unwrap();
        let mut store = ParamStore::new();
        m.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (m, store)
    }

    #[test]
    fn toggles_control_parameter_sets() {
        let (_, full) = model(true, true);
        let (_, bare) = model(false, false);
        assert!(full.names().any(|n| n.starts_with("dpr.")));
        assert!(full.names().any(|n| n.starts_with("vpir.")));
        assert!(bare.names().all(|n| n.starts_with("enc.") || n.starts_with("base.")));
    }

    #[test]
    fn loss_terms_add_up() {
        let (m, store) = model(true, true);
        let ep = episode();
        let mut g = Graph::new();
        let opts = TrainOptions { beta: 0.05, skip_kl: false, eps_seed: 1 };
        let v = m.episode_loss(&mut g, &store, &ep, &opts).unwrap();
        let b = LossBreakdown::from_graph(&g, &v, 0.05);
        assert_eq!(b.total, b.seg + b.base + 0.05 * b.kl);
        assert!(b.seg > 0.0 && b.base > 0.0 && b.kl >= 0.0);
    }

    #[test]
    fn bare_model_has_no_kl() {
        let (m, store) = model(false, false);
        let mut g = Graph::new();
        let opts = TrainOptions { beta: 0.1, skip_kl: false, eps_seed: 1 };
        let v = m.episode_loss(&mut g, &store, &episode(), &opts).unwrap();
        assert!(v.kl.is_none());
        let b = LossBreakdown::from_graph(&g, &v, 0.1);
        assert_eq!(b.total, b.seg + b.base);
    }

    #[test]
    fn no_base_points_gives_zero_base_loss() {
        let (m, store) = model(false, false);
        let ep = episode();
        let mut g = Graph::new();
        let f = m.encode(&mut g, &store, &ep.query).unwrap();
        let labels = vec![0i64; ep.query.len()];
        let v = m.base_loss(&mut g, &store, &[(&f, &labels)]).unwrap();
        assert_eq!(g.value(v).item(), 0.0);
    }

    #[test]
    fn uniform_base_head_gives_ln_b() {
        let (m, mut store) = model(false, false);
        store.value_mut("base.w").unwrap().data_mut().fill(0.0);
        let ep = episode();
        let mut g = Graph::new();
        let f = m.encode(&mut g, &store, &ep.query).unwrap();
        let v = m.base_loss(&mut g, &store, &[(&f, &ep.query_source_labels)]).unwrap();
        assert!((g.value(v).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prediction_is_deterministic_and_valid() {
        let (m, store) = model(true, true);
        let ep = episode();
        let a = m.predict(&store, &ep, 3, 9).unwrap();
        let b = m.predict(&store, &ep, 3, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_samples(), 3);
        for j in 0..a.probs.rows() {
            assert!((a.probs.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(m.predict(&store, &ep, 0, 9).is_err());
    }
}
