//! Per-point feature encoder and token sets.
//!
//! The encoder is a three-layer pointwise network. Before the last layer
//! each point's hidden vector is concatenated with the mean hidden vector
//! of its `k` nearest neighbours (self included), which gives every point
//! a little spatial context while keeping the map permutation-equivariant.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, RowMixing, Tensor, Var};
use crate::prototypes::farthest_point_sampling;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub k_neighbors: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 6,
            hidden_dim: 64,
            feature_dim: 64,
            k_neighbors: 8,
        }
    }
}

/// Encoder output for one scene: an `n × d_f` matrix on a graph.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub features: Var,
    pub n: usize,
    pub dim: usize,
    pub scene_id: String,
}

/// `n_tok × d` token rows gathered from FPS-selected points, zero rows
/// when the scene has fewer than `n_tok` points.
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub tokens: Var,
    pub n_tok: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        if cfg.input_dim < 3 || cfg.hidden_dim == 0 || cfg.feature_dim == 0 || cfg.k_neighbors == 0
        {
            return Err(Error::Config(format!("invalid encoder configuration {cfg:?}")));
        }
        Ok(Encoder { cfg })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let EncoderConfig {
            input_dim: i,
            hidden_dim: h,
            feature_dim: f,
            ..
        } = self.cfg;
        store.init_weight("enc.l1.w", i, h, rng)?;
        store.init_zeros("enc.l1.b", h)?;
        store.init_weight("enc.l2.w", h, h, rng)?;
        store.init_zeros("enc.l2.b", h)?;
        store.init_weight("enc.l3.w", 2 * h, f, rng)?;
        store.init_zeros("enc.l3.b", f)?;
        Ok(())
    }

    /// Input rows: coordinates centred on the scene centroid, remaining
    /// columns passed through.
    fn input_matrix(&self, cloud: &PointCloud) -> Result<Tensor> {
        if cloud.dim() != self.cfg.input_dim {
            return Err(Error::shape(
                "encode_points",
                format!(
                    "scene {} has {} columns, encoder expects {}",
                    cloud.scene_id(),
                    cloud.dim(),
                    self.cfg.input_dim
                ),
            ));
        }
        let n = cloud.len();
        let d = cloud.dim();
        let mut centroid = [0.0; 3];
        for i in 0..n {
            for (c, v) in centroid.iter_mut().zip(cloud.point(i)) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= n as f64);
        let mut data = cloud.points().to_vec();
        let mut sq = 0.0;
        for row in data.chunks_mut(d) {
            for (v, c) in row.iter_mut().zip(&centroid) {
                *v -= c;
                sq += *v * *v;
            }
        }
        // Unit RMS radius keeps coordinates on the same scale as colour.
        let rms = (sq / n as f64).sqrt();
        if rms > 0.0 {
            for row in data.chunks_mut(d) {
                row[..3].iter_mut().for_each(|v| *v /= rms);
            }
        }
        Tensor::matrix(n, d, data)
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, cloud: &PointCloud) -> Result<FeatureMap> {
        let x = g.constant(self.input_matrix(cloud)?)?;
        let h1 = dense(g, store, x, "enc.l1")?;
        let h1 = g.tanh(h1)?;
        let h2 = dense(g, store, h1, "enc.l2")?;
        let h2 = g.tanh(h2)?;
        let nbr = knn_mean_mixing(&cloud.coords(), self.cfg.k_neighbors);
        let ctx = g.row_mix(h2, Arc::new(nbr))?;
        let cat = g.concat_cols(h2, ctx)?;
        let features = dense(g, store, cat, "enc.l3")?;
        Ok(FeatureMap {
            features,
            n: cloud.len(),
            dim: self.cfg.feature_dim,
            scene_id: cloud.scene_id().to_string(),
        })
    }
}

/// `x · W + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub fn dense(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.w"))?;
    let b = g.param(store, &format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_row(xw, b)
}

/// Mean over the `k` nearest points (self included, ties by index).
pub fn knn_mean_mixing(coords: &[[f64; 3]], k: usize) -> RowMixing {
    let n = coords.len();
    let k = k.min(n).max(1);
    let w = 1.0 / k as f64;
    let entries = coords
        .iter()
        .map(|a| {
            let mut d: Vec<(f64, usize)> = coords
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    let d2 = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
                    (d2, j)
                })
                .collect();
            d.select_nth_unstable_by(k - 1, |x, y| x.partial_cmp(y).unwrap());
            let mut nearest: Vec<(usize, f64)> = d[..k].iter().map(|&(_, j)| (j, w)).collect();
            nearest.sort_by_key(|&(j, _)| j);
            nearest
        })
        .collect();
    RowMixing {
        input_rows: n,
        entries,
    }
}

/// Gathers the features of `n_tok` FPS-selected points into a token set.
pub fn build_tokens(
    g: &mut Graph,
    fmap: &FeatureMap,
    coords: &[[f64; 3]],
    n_tok: usize,
) -> Result<TokenSet> {
    if n_tok == 0 {
        return Err(Error::InvalidArgument("n_tok must be >= 1".into()));
    }
    if coords.len() != fmap.n {
        return Err(Error::shape(
            "build_tokens",
            format!("{} coordinates for {} feature rows", coords.len(), fmap.n),
        ));
    }
    let picked = farthest_point_sampling(coords, n_tok)?;
    let rows: Vec<Option<usize>> = (0..n_tok).map(|t| picked.get(t).copied()).collect();
    let tokens = g.row_mix(fmap.features, Arc::new(RowMixing::gather(fmap.n, &rows)))?;
    Ok(TokenSet {
        tokens,
        n_tok,
        dim: fmap.dim,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: EncoderConfig) -> (Encoder, ParamStore) {
        let enc = Encoder::new(cfg).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (enc, store)
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n * 6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        PointCloud::new(pts, 6, vec![0; n], "c").unwrap()
    }

    #[test]
    fn output_shape() {
        let (enc, store) = setup(EncoderConfig::default());
        for n in [1, 5, 30] {
            let mut g = Graph::new();
            let f = enc.encode(&mut g, &store, &cloud(n, n as u64)).unwrap();
            assert_eq!(g.value(f.features).shape(), &[n, 64]);
        }
    }

    #[test]
    fn identical_points_get_identical_features() {
        let (enc, store) = setup(EncoderConfig::default());
        let base = cloud(10, 3);
        let mut pts = base.points().to_vec();
        let dup: Vec<f64> = base.point(4).to_vec();
        pts.extend_from_slice(&dup);
        let c = PointCloud::new(pts, 6, vec![0; 11], "d").unwrap();
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &c).unwrap();
        assert_eq!(g.value(f.features).row(4), g.value(f.features).row(10));
    }

    #[test]
    fn permutation_equivariance() {
        let (enc, store) = setup(EncoderConfig::default());
        let c = cloud(25, 9);
        let mut perm: Vec<usize> = (0..25).collect();
        perm.reverse();
        perm.swap(3, 17);
        let mut pts = Vec::new();
        for &p in &perm {
            pts.extend_from_slice(c.point(p));
        }
        let pc = PointCloud::new(pts, 6, vec![0; 25], "p").unwrap();
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &c).unwrap();
        let fp = enc.encode(&mut g, &store, &pc).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in g.value(fp.features).row(i).iter().zip(g.value(f.features).row(p)) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn tokens_follow_fps_and_pad() {
        let (enc, store) = setup(EncoderConfig::default());
        let c = cloud(6, 4);
        let coords = c.coords();
        let mut g = Graph::new();
        let f = enc.encode(&mut g, &store, &c).unwrap();

        let all = build_tokens(&mut g, &f, &coords, 6).unwrap();
        let mut rows: Vec<Vec<u64>> = (0..6)
            .map(|r| g.value(all.tokens).row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut want: Vec<Vec<u64>> = (0..6)
            .map(|r| g.value(f.features).row(r).iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        want.sort();
        assert_eq!(rows, want);

        let padded = build_tokens(&mut g, &f, &coords, 9).unwrap();
        let zero_rows = (0..9)
            .filter(|&r| g.value(padded.tokens).row(r).iter().all(|&v| v == 0.0))
            .count();
        assert_eq!(zero_rows, 3);

        let one = build_tokens(&mut g, &f, &coords, 1).unwrap();
        let seed = farthest_point_sampling(&coords, 1).unwrap()[0];
        assert_eq!(g.value(one.tokens).row(0), g.value(f.features).row(seed));
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let (enc, store) = setup(EncoderConfig {
            input_dim: 3,
            ..Default::default()
        });
        let mut g = Graph::new();
        assert!(enc.encode(&mut g, &store, &cloud(4, 1)).is_err());
    }
}
