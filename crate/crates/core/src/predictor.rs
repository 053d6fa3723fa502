//! Cosine-similarity logits, Monte Carlo probability averaging and
//! per-point uncertainty maps.

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Graph, ParamStore, Tensor, Var};
use crate::prototypes::PrototypeSet;
use crate::rng::substream;
use crate::vpir::{reparameterize, sample_epsilon, GaussianPrototype, Vpir};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    /// `n × C` mean of the per-sample softmax outputs.
    pub probs: Tensor,
    pub per_sample_logits: Vec<Tensor>,
    pub variance_map: Vec<f64>,
    pub entropy_map: Vec<f64>,
    pub fused_uncertainty: Vec<f64>,
    pub predicted_labels: Vec<usize>,
}

impl PredictionOutput {
    /// Averages the softmax of each sample's logits (in sample order) and
    /// fills the uncertainty maps.
    pub fn from_sample_logits(per_sample_logits: Vec<Tensor>) -> Result<Self> {
        let first = per_sample_logits
            .first()
            .ok_or_else(|| Error::InvalidArgument("at least one sample is required".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 || shape[1] == 0 {
            return Err(Error::shape("mc_predict", format!("logits shape {shape:?}")));
        }
        if per_sample_logits.iter().any(|l| l.shape() != shape.as_slice()) {
            return Err(Error::shape("mc_predict", "per-sample logits differ in shape"));
        }
        let sample_probs: Vec<Tensor> = per_sample_logits.iter().map(softmax_rows).collect();
        let t = sample_probs.len() as f64;
        let mut sum = Tensor::zeros(&shape);
        for p in &sample_probs {
            sum.add_assign(p);
        }
        let probs = sum.map(|v| v / t);
        let predicted_labels = (0..probs.rows()).map(|j| argmax(probs.row(j))).collect();
        let (variance_map, entropy_map, fused_uncertainty) = uncertainty_maps(&sample_probs, &probs);
        Ok(PredictionOutput {
            probs,
            per_sample_logits,
            variance_map,
            entropy_map,
            fused_uncertainty,
            predicted_labels,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.per_sample_logits.len()
    }

    /// Maximum class probability per point.
    pub fn confidences(&self) -> Vec<f64> {
        (0..self.probs.rows())
            .map(|j| self.probs.row(j).iter().cloned().fold(f64::MIN, f64::max))
            .collect()
    }
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `cos(F_j, P_c) / τ`; zero rows have cosine 0.
pub fn similarity_logits(
    g: &mut Graph,
    features: Var,
    protos: &PrototypeSet,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let f = g.normalize_rows(features)?;
    let p = g.normalize_rows(protos.protos)?;
    let pt = g.transpose(p)?;
    let cos = g.matmul(f, pt)?;
    g.scale(cos, 1.0 / temperature)
}

/// Per-point variance (mean over classes of the population variance across
/// samples), entropy of the mean distribution, and their min-max fusion.
pub fn uncertainty_maps(sample_probs: &[Tensor], probs: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = probs.rows();
    let c = probs.cols();
    let t = sample_probs.len() as f64;
    let variance: Vec<f64> = (0..n)
        .map(|j| {
            let mean = probs.row(j);
            let mut acc = 0.0;
            for k in 0..c {
                let mut v = 0.0;
                for s in sample_probs {
                    let d = s.get(j, k) - mean[k];
                    v += d * d;
                }
                acc += v / t;
            }
            acc / c as f64
        })
        .collect();
    let entropy: Vec<f64> = (0..n)
        .map(|j| {
            -probs
                .row(j)
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>()
        })
        .map(|h: f64| h.max(0.0))
        .collect();
    let ln_c = (c as f64).ln();
    let scaled: Vec<f64> = entropy
        .iter()
        .map(|&h| if ln_c > 0.0 { h / ln_c } else { 0.0 })
        .collect();
    let (nv, ne) = (min_max(&variance), min_max(&scaled));
    let fused = nv.iter().zip(&ne).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
    (variance, entropy, fused)
}

/// Rescales to [0, 1]; a constant map becomes all zeros.
pub fn min_max(x: &[f64]) -> Vec<f64> {
    let lo = x.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; x.len()];
    }
    x.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// T-sample ensemble: draws `z⁽ᵗ⁾` from the prior with the substream
/// `(seed, "mc", t)`, fuses it with `p1`, and averages the softmax outputs.
#[allow(clippy::too_many_arguments)]
pub fn mc_predict(
    g: &mut Graph,
    store: &ParamStore,
    vpir: &Vpir,
    features: Var,
    prior: &GaussianPrototype,
    p1: &PrototypeSet,
    temperature: f64,
    samples: usize,
    seed: u64,
) -> Result<PredictionOutput> {
    if samples == 0 {
        return Err(Error::InvalidArgument("number of samples T must be >= 1".into()));
    }
    let dim = g.value(prior.mu).cols();
    let mut logits = Vec::with_capacity(samples);
    for t in 0..samples {
        let mut rng = substream(seed, "mc", t as u64);
        let eps = sample_epsilon(&mut rng, &prior.valid, dim);
        let z = reparameterize(g, prior, eps, t)?;
        let p2 = vpir.fuse_beta(g, store, p1, &z)?;
        let l = similarity_logits(g, features, &p2, temperature)?;
        logits.push(g.value(l).clone());
    }
    PredictionOutput::from_sample_logits(logits)
}

/// Single deterministic pass (no sampling), e.g. with VPIR disabled.
pub fn deterministic_predict(
    g: &mut Graph,
    features: Var,
    protos: &PrototypeSet,
    temperature: f64,
) -> Result<PredictionOutput> {
    let l = similarity_logits(g, features, protos, temperature)?;
    PredictionOutput::from_sample_logits(vec![g.value(l).clone()])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::Stage;

    fn set(g: &mut Graph, rows: Vec<Vec<f64>>) -> PrototypeSet {
        let t = Tensor::from_rows(&rows).unwrap();
        PrototypeSet {
            class_ids: (0..t.rows()).collect(),
            valid: vec![true; t.rows()],
            protos: g.constant(t).unwrap(),
            stage: Stage::Fused2,
        }
    }

    #[test]
    fn cosine_logits() {
        let mut g = Graph::new();
        let p = set(&mut g, vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
        let f = g
            .constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![5.0, 0.0], vec![0.0, 0.0]]).unwrap())
            .unwrap();
        let l = similarity_logits(&mut g, f, &p, 0.1).unwrap();
        let v = g.value(l);
        assert!((v.get(0, 0) - 10.0).abs() < 1e-12);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(0, 2), 0.0);
        assert_eq!(v.row(0), v.row(1));
        assert!(v.row(2).iter().all(|&x| x == 0.0));
        assert!(similarity_logits(&mut g, f, &p, 0.0).is_err());
    }

    #[test]
    fn opposite_samples_average_to_half() {
        let a = Tensor::from_rows(&[vec![0.0, -1000.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![-1000.0, 0.0]]).unwrap();
        let out = PredictionOutput::from_sample_logits(vec![a, b]).unwrap();
        assert_eq!(out.probs.row(0), &[0.5, 0.5]);
        assert!((out.entropy_map[0] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(out.variance_map[0], 0.25);
    }

    #[test]
    fn single_sample_is_plain_softmax() {
        let l = Tensor::from_rows(&[vec![0.3, 1.2, -0.5], vec![2.0, 2.0, 2.0]]).unwrap();
        let out = PredictionOutput::from_sample_logits(vec![l.clone()]).unwrap();
        assert_eq!(out.probs, softmax_rows(&l));
        assert!(out.variance_map.iter().all(|&v| v == 0.0));
        assert_eq!(out.predicted_labels, vec![1, 0]);
    }

    #[test]
    fn three_point_hand_oracle() {
        // Sample probabilities chosen directly via log-probabilities.
        let s1 = [[0.8, 0.2], [0.5, 0.5], [0.1, 0.9]];
        let s2 = [[0.6, 0.4], [0.3, 0.7], [0.1, 0.9]];
        let to_logits = |s: &[[f64; 2]; 3]| {
            Tensor::from_rows(&s.iter().map(|r| vec![r[0].ln(), r[1].ln()]).collect::<Vec<_>>()).unwrap()
        };
        let out = PredictionOutput::from_sample_logits(vec![to_logits(&s1), to_logits(&s2)]).unwrap();
        let mean = [[0.7, 0.3], [0.4, 0.6], [0.1, 0.9]];
        let var = [0.01, 0.01, 0.0];
        for j in 0..3 {
            for k in 0..2 {
                assert!((out.probs.get(j, k) - mean[j][k]).abs() < 1e-12);
            }
            assert!((out.variance_map[j] - var[j]).abs() < 1e-12);
            let h = -(mean[j][0] * mean[j][0].ln() + mean[j][1] * mean[j][1].ln());
            assert!((out.entropy_map[j] - h).abs() < 1e-12);
        }
        assert_eq!(out.predicted_labels, vec![0, 1, 1]);
        let hs: Vec<f64> = (0..3)
            .map(|j| -(mean[j][0] * mean[j][0].ln() + mean[j][1] * mean[j][1].ln()) / 2f64.ln())
            .collect();
        let (hlo, hhi) = (hs[2], hs[0].max(hs[1]));
        for j in 0..3 {
            let want = 0.5 * (var[j] / 0.01) + 0.5 * (hs[j] - hlo) / (hhi - hlo);
            assert!((out.fused_uncertainty[j] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_maps_normalise_to_zero() {
        assert_eq!(min_max(&[0.3, 0.3]), vec![0.0, 0.0]);
        assert_eq!(min_max(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.6, 0.6]), 1);
    }

    #[test]
    fn rejects_empty_ensemble() {
        assert!(PredictionOutput::from_sample_logits(vec![]).is_err());
    }
}
