//! Variational prototype inference.
//!
//! A prior head maps fused support prototypes and a posterior head maps
//! raw query prototypes to diagonal Gaussians. Latents are drawn from the
//! prior with the reparameterization trick and blended back into the
//! deterministic prototypes by a second sigmoid gate.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dpr::{mask_rows, FusionGate, GateGranularity};
use crate::encoder::dense;
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, RowMixing, Tensor, Var};
use crate::prototypes::{PrototypeSet, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VpirConfig {
    pub enabled: bool,
    /// Bounds applied to the head's log-sigma output.
    pub sigma_clamp: (f64, f64),
    pub train_samples: usize,
    pub gate_granularity: GateGranularity,
    /// Initial bias of the log-sigma outputs.
    pub init_log_sigma: f64,
}

impl Default for VpirConfig {
    fn default() -> Self {
        VpirConfig {
            enabled: true,
            sigma_clamp: (-5.0, 2.0),
            train_samples: 4,
            gate_granularity: GateGranularity::Vector,
            init_log_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Prior,
    Posterior,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::Prior => "prior",
            Source::Posterior => "posterior",
        }
    }
}

/// Per-class diagonal Gaussian (`C × d` mean and standard deviation).
#[derive(Debug, Clone)]
pub struct GaussianPrototype {
    pub mu: Var,
    pub log_sigma: Var,
    pub sigma: Var,
    pub source: Source,
    pub class_ids: Vec<usize>,
    pub valid: Vec<bool>,
}

impl GaussianPrototype {
    /// Wraps fixed parameter matrices, e.g. for oracle comparisons.
    pub fn from_tensors(
        g: &mut Graph,
        mu: Tensor,
        sigma: Tensor,
        source: Source,
    ) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::shape(
                "gaussian_prototype",
                format!("mu {:?} vs sigma {:?}", mu.shape(), sigma.shape()),
            ));
        }
        if sigma.data().iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        let rows = mu.as_matrix().rows();
        let log_sigma = g.constant(sigma.map(f64::ln).as_matrix())?;
        Ok(GaussianPrototype {
            mu: g.constant(mu.as_matrix())?,
            sigma: g.constant(sigma.as_matrix())?,
            log_sigma,
            source,
            class_ids: (0..rows).collect(),
            valid: vec![true; rows],
        })
    }
}

/// `z = mu + sigma ⊙ epsilon` on valid rows, zero on padded rows.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z: Var,
    pub epsilon: Tensor,
    pub sample_index: usize,
}

#[derive(Debug, Clone)]
pub struct Vpir {
    cfg: VpirConfig,
    dim: usize,
    gate: FusionGate,
}

impl Vpir {
    pub fn new(cfg: VpirConfig, dim: usize) -> Result<Self> {
        let (lo, hi) = cfg.sigma_clamp;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("vpir.sigma_clamp must satisfy lo < hi, got {lo}, {hi}")));
        }
        if cfg.train_samples == 0 {
            return Err(Error::Config("vpir.train_samples must be >= 1".into()));
        }
        let gate = FusionGate::new("vpir.gate", dim, cfg.gate_granularity);
        Ok(Vpir { cfg, dim, gate })
    }

    pub fn config(&self) -> &VpirConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gate(&self) -> &FusionGate {
        &self.gate
    }

    pub fn init_params<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d = self.dim;
        for head in ["vpir.prior", "vpir.post"] {
            store.init_weight(&format!("{head}.l1.w"), d, d, rng)?;
            store.init_zeros(&format!("{head}.l1.b"), d)?;
            store.init_weight(&format!("{head}.l2.w"), d, 2 * d, rng)?;
            let mut bias = vec![0.0; 2 * d];
            bias[d..].fill(self.cfg.init_log_sigma);
            store.insert(&format!("{head}.l2.b"), Tensor::vector(bias))?;
        }
        self.gate.init_params(store, rng)
    }

    /// Two-layer head `d → d → 2d` split into `(mu, log_sigma)`.
    pub fn gaussian_head(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: &PrototypeSet,
        source: Source,
    ) -> Result<GaussianPrototype> {
        let prefix = match source {
            Source::Prior => {
                p.expect_stage(Stage::Fused1)?;
                "vpir.prior"
            }
            Source::Posterior => {
                p.expect_stage(Stage::Raw)?;
                "vpir.post"
            }
        };
        let h = dense(g, store, p.protos, &format!("{prefix}.l1"))?;
        let h = g.tanh(h)?;
        let out = dense(g, store, h, &format!("{prefix}.l2"))?;
        let mu = g.slice_cols(out, 0, self.dim)?;
        let raw_ls = g.slice_cols(out, self.dim, 2 * self.dim)?;
        let (lo, hi) = self.cfg.sigma_clamp;
        let log_sigma = g.clamp(raw_ls, lo, hi)?;
        let sigma = g.exp(log_sigma)?;
        Ok(GaussianPrototype {
            mu,
            log_sigma,
            sigma,
            source,
            class_ids: p.class_ids.clone(),
            valid: p.valid.clone(),
        })
    }

    pub fn fuse_beta(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p1: &PrototypeSet,
        z: &LatentSample,
    ) -> Result<PrototypeSet> {
        fuse_beta(g, store, &self.gate, p1, z)
    }
}

/// Standard-normal draw shaped like the Gaussian's parameters, zero on
/// padded rows.
pub fn sample_epsilon<R: Rng>(rng: &mut R, valid: &[bool], dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(valid.len() * dim);
    for &v in valid {
        for _ in 0..dim {
            let e: f64 = rng.sample(StandardNormal);
            data.push(if v { e } else { 0.0 });
        }
    }
    Tensor::matrix(valid.len(), dim, data).expect("shape matches data")
}

pub fn reparameterize(
    g: &mut Graph,
    gp: &GaussianPrototype,
    epsilon: Tensor,
    sample_index: usize,
) -> Result<LatentSample> {
    if g.value(gp.mu).shape() != epsilon.shape() {
        return Err(Error::shape(
            "reparameterize",
            format!("epsilon {:?} vs mu {:?}", epsilon.shape(), g.value(gp.mu).shape()),
        ));
    }
    let eps = g.constant(epsilon.clone())?;
    let noise = g.mul(gp.sigma, eps)?;
    let z = g.add(gp.mu, noise)?;
    let z = if gp.valid.iter().all(|&v| v) {
        z
    } else {
        let w: Vec<f64> = gp.valid.iter().map(|&v| f64::from(u8::from(v))).collect();
        g.row_mix(z, Arc::new(RowMixing::diagonal(&w)))?
    };
    Ok(LatentSample {
        z,
        epsilon,
        sample_index,
    })
}

/// `Σ log(σ_p/σ_q) + (σ_q² + (μ_q − μ_p)²) / (2σ_p²) − ½` over rows valid
/// in both distributions.
pub fn kl_divergence(g: &mut Graph, q: &GaussianPrototype, p: &GaussianPrototype) -> Result<Var> {
    if q.source != Source::Posterior || p.source != Source::Prior {
        return Err(Error::InvalidArgument(format!(
            "kl_divergence expects (posterior, prior), got ({}, {})",
            q.source.name(),
            p.source.name()
        )));
    }
    if g.value(q.mu).shape() != g.value(p.mu).shape() || q.class_ids != p.class_ids {
        return Err(Error::shape(
            "kl_divergence",
            format!("{:?} vs {:?}", g.value(q.mu).shape(), g.value(p.mu).shape()),
        ));
    }
    let log_ratio = g.sub(p.log_sigma, q.log_sigma)?;
    let var_q = g.mul(q.sigma, q.sigma)?;
    let diff = g.sub(q.mu, p.mu)?;
    let diff2 = g.mul(diff, diff)?;
    let num = g.add(var_q, diff2)?;
    let neg2 = g.scale(p.log_sigma, -2.0)?;
    let inv_var_p = g.exp(neg2)?;
    let ratio = g.mul(num, inv_var_p)?;
    let half = g.scale(ratio, 0.5)?;
    let terms = g.add(log_ratio, half)?;
    let terms = g.add_scalar(terms, -0.5)?;
    let both: Vec<f64> = q
        .valid
        .iter()
        .zip(&p.valid)
        .map(|(&a, &b)| f64::from(u8::from(a && b)))
        .collect();
    let terms = if both.iter().all(|&w| w == 1.0) {
        terms
    } else {
        g.row_mix(terms, Arc::new(RowMixing::diagonal(&both)))?
    };
    g.sum(terms)
}

/// `(1 − β) ⊙ p̂¹ + β ⊙ z` with `β = σ(gate([p̂¹ ∥ z]))`.
pub fn fuse_beta(
    g: &mut Graph,
    store: &ParamStore,
    gate: &FusionGate,
    p1: &PrototypeSet,
    z: &LatentSample,
) -> Result<PrototypeSet> {
    p1.expect_stage(Stage::Fused1)?;
    if g.value(p1.protos).shape() != g.value(z.z).shape() {
        return Err(Error::shape(
            "fuse_beta",
            format!("{:?} vs {:?}", g.value(p1.protos).shape(), g.value(z.z).shape()),
        ));
    }
    let (blend, _) = gate.blend(g, store, p1.protos, z.z)?;
    let blend = mask_rows(g, blend, p1)?;
    p1.advanced(blend, Stage::Fused2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize) -> (Vpir, ParamStore) {
        let v = Vpir::new(VpirConfig::default(), d).unwrap();
        let mut store = ParamStore::new();
        v.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        (v, store)
    }

    fn protos(g: &mut Graph, rows: Vec<Vec<f64>>, stage: Stage, valid: Vec<bool>) -> PrototypeSet {
        let t = Tensor::from_rows(&rows).unwrap();
        PrototypeSet {
            class_ids: (0..t.rows()).collect(),
            protos: g.constant(t).unwrap(),
            stage,
            valid,
        }
    }

    fn gauss(g: &mut Graph, mu: &[f64], sigma: &[f64], source: Source) -> GaussianPrototype {
        GaussianPrototype::from_tensors(
            g,
            Tensor::matrix(1, mu.len(), mu.to_vec()).unwrap(),
            Tensor::matrix(1, sigma.len(), sigma.to_vec()).unwrap(),
            source,
        )
        .unwrap()
    }

    #[test]
    fn zero_head_gives_standard_normal() {
        let (v, mut store) = setup(3);
        for name in ["vpir.prior.l1.w", "vpir.prior.l2.w"] {
            store.value_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let p = protos(&mut g, vec![vec![1.0, 2.0, 3.0]; 2], Stage::Fused1, vec![true; 2]);
        let gp = v.gaussian_head(&mut g, &store, &p, Source::Prior).unwrap();
        assert!(g.value(gp.mu).data().iter().all(|&m| m == 0.0));
        assert!(g.value(gp.sigma).data().iter().all(|&s| s == 1.0));
    }

    #[test]
    fn sigma_saturates_at_clamp_bounds() {
        let (v, mut store) = setup(2);
        let b = store.value_mut("vpir.post.l2.b").unwrap();
        b.data_mut()[2] = 50.0;
        b.data_mut()[3] = -50.0;
        let mut g = Graph::new();
        let p = protos(&mut g, vec![vec![0.1, -0.2]], Stage::Raw, vec![true]);
        let gp = v.gaussian_head(&mut g, &store, &p, Source::Posterior).unwrap();
        assert_eq!(g.value(gp.sigma).data(), &[2f64.exp(), (-5f64).exp()]);
    }

    #[test]
    fn heads_check_input_stage() {
        let (v, store) = setup(2);
        let mut g = Graph::new();
        let raw = protos(&mut g, vec![vec![0.1, -0.2]], Stage::Raw, vec![true]);
        let fused = protos(&mut g, vec![vec![0.1, -0.2]], Stage::Fused1, vec![true]);
        assert!(v.gaussian_head(&mut g, &store, &raw, Source::Prior).is_err());
        assert!(v.gaussian_head(&mut g, &store, &fused, Source::Posterior).is_err());
    }

    #[test]
    fn reparameterize_identity_and_zero_epsilon() {
        let mut g = Graph::new();
        let gp = gauss(&mut g, &[0.5, -1.0], &[2.0, 0.25], Source::Prior);
        let s = reparameterize(&mut g, &gp, Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(g.value(s.z).data(), &[0.5, -1.0]);
        let eps = Tensor::matrix(1, 2, vec![1.5, -0.3]).unwrap();
        let s = reparameterize(&mut g, &gp, eps, 1).unwrap();
        assert_eq!(g.value(s.z).data(), &[0.5 + 2.0 * 1.5, -1.0 + 0.25 * -0.3]);
        assert!(reparameterize(&mut g, &gp, Tensor::matrix(2, 2, vec![0.0; 4]).unwrap(), 0).is_err());
    }

    #[test]
    fn sample_mean_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mu, sigma, n) = (0.7, 1.3, 100_000);
        let mut g = Graph::new();
        let gp = gauss(&mut g, &[mu], &[sigma], Source::Prior);
        let mut sum = 0.0;
        for i in 0..n {
            let eps = sample_epsilon(&mut rng, &[true], 1);
            sum += mu + sigma * eps.data()[0];
            if i < 3 {
                let s = reparameterize(&mut g, &gp, eps.clone(), i).unwrap();
                assert_eq!(g.value(s.z).data()[0], mu + sigma * eps.data()[0]);
            }
        }
        assert!((sum / n as f64 - mu).abs() < 4.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn kl_closed_form_cases() {
        let mut g = Graph::new();
        let q = gauss(&mut g, &[1.0], &[1.0], Source::Posterior);
        let p = gauss(&mut g, &[0.0], &[1.0], Source::Prior);
        let kl = kl_divergence(&mut g, &q, &p).unwrap();
        assert!((g.value(kl).item() - 0.5).abs() < 1e-12);

        let q = gauss(&mut g, &[0.3], &[2.0], Source::Posterior);
        let p = gauss(&mut g, &[0.3], &[1.0], Source::Prior);
        let kl = kl_divergence(&mut g, &q, &p).unwrap();
        assert!((g.value(kl).item() - (0.5f64.ln() + 2.0 - 0.5)).abs() < 1e-12);

        let q = gauss(&mut g, &[0.3, -2.0], &[0.4, 1.7], Source::Posterior);
        let p = gauss(&mut g, &[0.3, -2.0], &[0.4, 1.7], Source::Prior);
        let kl = kl_divergence(&mut g, &q, &p).unwrap();
        assert!(g.value(kl).item().abs() < 1e-12);
        assert!(kl_divergence(&mut g, &p, &q).is_err());
    }

    #[test]
    fn kl_skips_padded_rows() {
        let (v, store) = setup(2);
        let mut g = Graph::new();
        let fused = protos(&mut g, vec![vec![0.3, 0.1], vec![0.0, 0.0]], Stage::Fused1, vec![true, false]);
        let raw = protos(&mut g, vec![vec![0.9, -0.4], vec![0.0, 0.0]], Stage::Raw, vec![true, false]);
        let p = v.gaussian_head(&mut g, &store, &fused, Source::Prior).unwrap();
        let q = v.gaussian_head(&mut g, &store, &raw, Source::Posterior).unwrap();
        let kl = kl_divergence(&mut g, &q, &p).unwrap();
        let kl = g.value(kl).item();

        let fused1 = protos(&mut g, vec![vec![0.3, 0.1]], Stage::Fused1, vec![true]);
        let raw1 = protos(&mut g, vec![vec![0.9, -0.4]], Stage::Raw, vec![true]);
        let p1 = v.gaussian_head(&mut g, &store, &fused1, Source::Prior).unwrap();
        let q1 = v.gaussian_head(&mut g, &store, &raw1, Source::Posterior).unwrap();
        let kl1 = kl_divergence(&mut g, &q1, &p1).unwrap();
        let kl1 = g.value(kl1).item();
        assert!((kl - kl1).abs() < 1e-12);
    }

    #[test]
    fn fuse_beta_midpoint_passthrough_and_bounds() {
        let (v, mut store) = setup(2);
        let mut g = Graph::new();
        let p1 = protos(&mut g, vec![vec![1.0, -1.0]], Stage::Fused1, vec![true]);
        let gp = gauss(&mut g, &[3.0, 1.0], &[1.0, 1.0], Source::Prior);
        let z = reparameterize(&mut g, &gp, Tensor::matrix(1, 2, vec![0.0; 2]).unwrap(), 0).unwrap();

        let f = v.fuse_beta(&mut g, &store, &p1, &z).unwrap();
        assert_eq!(f.stage, Stage::Fused2);
        for (j, x) in g.value(f.protos).row(0).iter().enumerate() {
            let (a, b): (f64, f64) = ([1.0, -1.0][j], [3.0, 1.0][j]);
            assert!(*x > a.min(b) && *x < a.max(b));
        }

        // Parameters are cached per graph, so rebuild after editing them.
        store.value_mut("vpir.gate.w").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let p1 = protos(&mut g, vec![vec![1.0, -1.0]], Stage::Fused1, vec![true]);
        let gp = gauss(&mut g, &[3.0, 1.0], &[1.0, 1.0], Source::Prior);
        let z = reparameterize(&mut g, &gp, Tensor::matrix(1, 2, vec![0.0; 2]).unwrap(), 0).unwrap();
        let f = v.fuse_beta(&mut g, &store, &p1, &z).unwrap();
        assert_eq!(g.value(f.protos).row(0), &[2.0, 0.0]);

        let same = gauss(&mut g, &[1.0, -1.0], &[1.0, 1.0], Source::Prior);
        let z = reparameterize(&mut g, &same, Tensor::matrix(1, 2, vec![0.0; 2]).unwrap(), 0).unwrap();
        let f = v.fuse_beta(&mut g, &store, &p1, &z).unwrap();
        assert_eq!(g.value(f.protos).row(0), &[1.0, -1.0]);
    }

    #[test]
    fn padded_rows_get_no_sample() {
        let (v, store) = setup(2);
        let mut g = Graph::new();
        let p1 = protos(&mut g, vec![vec![0.2, 0.4], vec![0.0, 0.0]], Stage::Fused1, vec![true, false]);
        let gp = v.gaussian_head(&mut g, &store, &p1, Source::Prior).unwrap();
        let eps = sample_epsilon(&mut ChaCha8Rng::seed_from_u64(0), &p1.valid, 2);
        assert_eq!(eps.row(1), &[0.0, 0.0]);
        let z = reparameterize(&mut g, &gp, eps, 0).unwrap();
        assert_eq!(g.value(z.z).row(1), &[0.0, 0.0]);
        let f = v.fuse_beta(&mut g, &store, &p1, &z).unwrap();
        assert_eq!(g.value(f.protos).row(1), &[0.0, 0.0]);
    }
}
