use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

/// Shape of an N-way K-shot task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    /// Original class ids; the i-th entry becomes episode label `i + 1`.
    pub novel_classes: Vec<i64>,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(k_shot: usize, novel_classes: Vec<i64>, seed: u64) -> Result<Self> {
        let spec = EpisodeSpec {
            n_way: novel_classes.len(),
            k_shot,
            novel_classes,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 {
            return Err(Error::InvalidArgument("n_way and k_shot must be >= 1".into()));
        }
        if self.novel_classes.len() != self.n_way {
            return Err(Error::InvalidArgument(format!(
                "{} novel classes for a {}-way episode",
                self.novel_classes.len(),
                self.n_way
            )));
        }
        let mut sorted = self.novel_classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.novel_classes.len() {
            return Err(Error::InvalidArgument("novel classes must be distinct".into()));
        }
        Ok(())
    }

    /// Episode label of an original class id: `i + 1` for the i-th novel
    /// class, `0` (background) for everything else including unlabelled.
    pub fn remap(&self, label: i64) -> usize {
        self.novel_classes
            .iter()
            .position(|&c| c == label)
            .map_or(0, |i| i + 1)
    }
}

/// One support example: the scene (original labels kept) and the
/// foreground mask of its episode class.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportShot {
    pub cloud: PointCloud,
    pub mask: Vec<bool>,
    /// Zero-based way index; the episode label of this shot's class is `way + 1`.
    pub way: usize,
}

/// A sampled N-way K-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub spec: EpisodeSpec,
    /// `N·K` shots, way-major.
    pub support: Vec<SupportShot>,
    /// Query scene with labels remapped into `[0, N]`.
    pub query: PointCloud,
    /// Query labels before remapping.
    pub query_source_labels: Vec<i64>,
}

impl Episode {
    /// Assembles an episode from explicit scenes, `support[i]` holding the
    /// K scenes for `spec.novel_classes[i]`.
    pub fn from_parts(
        spec: EpisodeSpec,
        support: Vec<Vec<PointCloud>>,
        query: PointCloud,
    ) -> Result<Self> {
        spec.validate()?;
        if support.len() != spec.n_way {
            return Err(Error::InvalidArgument(format!(
                "support lists for {} classes, expected {}",
                support.len(),
                spec.n_way
            )));
        }
        let mut shots = Vec::with_capacity(spec.n_way * spec.k_shot);
        for (way, scenes) in support.into_iter().enumerate() {
            let class = spec.novel_classes[way];
            if scenes.len() != spec.k_shot {
                return Err(Error::InsufficientSupport {
                    class,
                    needed: spec.k_shot,
                    found: scenes.len(),
                });
            }
            for cloud in scenes {
                let mask: Vec<bool> = cloud.labels().iter().map(|&l| l == class).collect();
                if !mask.iter().any(|&m| m) {
                    return Err(Error::InvalidArgument(format!(
                        "support scene {} has no points of class {class}",
                        cloud.scene_id()
                    )));
                }
                shots.push(SupportShot { cloud, mask, way });
            }
        }
        let source = query.labels().to_vec();
        let remapped = source.iter().map(|&l| spec.remap(l) as i64).collect();
        let query = query.with_labels(remapped)?;
        Ok(Episode {
            spec,
            support: shots,
            query,
            query_source_labels: source,
        })
    }

    /// Remapped query labels as class indices.
    pub fn query_labels(&self) -> Vec<usize> {
        self.query.labels().iter().map(|&l| l as usize).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.n_way + 1
    }
}

/// Samples an episode from `scenes`: picks a query scene containing at
/// least one novel class, then K distinct other scenes per novel class.
/// A scene may serve as support for several classes, never as both
/// support and query.
pub fn sample_episode(scenes: &[PointCloud], spec: &EpisodeSpec) -> Result<Episode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let holders: Vec<Vec<usize>> = spec
        .novel_classes
        .iter()
        .map(|&c| {
            (0..scenes.len())
                .filter(|&i| scenes[i].contains_class(c))
                .collect()
        })
        .collect();
    for (class, h) in spec.novel_classes.iter().zip(&holders) {
        if h.len() < spec.k_shot {
            return Err(Error::InsufficientSupport {
                class: *class,
                needed: spec.k_shot,
                found: h.len(),
            });
        }
    }

    let feasible: Vec<usize> = (0..scenes.len())
        .filter(|&q| {
            let holds_any = holders.iter().any(|h| h.contains(&q));
            let leaves_enough = holders
                .iter()
                .all(|h| h.iter().filter(|&&i| i != q).count() >= spec.k_shot);
            holds_any && leaves_enough
        })
        .collect();
    let &query_idx = feasible.choose(&mut rng).ok_or(Error::NoQuery)?;

    let mut support = Vec::with_capacity(spec.n_way);
    for h in &holders {
        let mut pool: Vec<usize> = h.iter().copied().filter(|&i| i != query_idx).collect();
        pool.shuffle(&mut rng);
        pool.truncate(spec.k_shot);
        support.push(pool.into_iter().map(|i| scenes[i].clone()).collect());
    }
    Episode::from_parts(spec.clone(), support, scenes[query_idx].clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(id: &str, labels: Vec<i64>) -> PointCloud {
        let n = labels.len();
        let points = (0..n * 3).map(|i| i as f64 * 0.1).collect();
        PointCloud::new(points, 3, labels, id).unwrap()
    }

    #[test]
    fn minimal_one_way_one_shot() {
        let scenes = vec![scene("a", vec![5, 2, 5]), scene("b", vec![1, 5])];
        let spec = EpisodeSpec::new(1, vec![5], 3).unwrap();
        let ep = sample_episode(&scenes, &spec).unwrap();
        assert_eq!(ep.support.len(), 1);
        assert_ne!(ep.support[0].cloud.scene_id(), ep.query.scene_id());
        assert!(ep.query.labels().iter().all(|&l| l == 0 || l == 1));
        assert!(ep.support[0].mask.iter().any(|&m| m));
    }

    #[test]
    fn missing_class_is_insufficient_support() {
        let scenes = vec![scene("a", vec![5, 2]), scene("b", vec![5, 2])];
        let spec = EpisodeSpec::new(1, vec![5, 9], 0).unwrap();
        assert!(matches!(
            sample_episode(&scenes, &spec),
            Err(Error::InsufficientSupport { class: 9, .. })
        ));
    }

    #[test]
    fn single_scene_leaves_no_query() {
        let scenes = vec![scene("a", vec![5, 2]), scene("b", vec![2, 2])];
        let spec = EpisodeSpec::new(1, vec![5], 0).unwrap();
        assert!(matches!(sample_episode(&scenes, &spec), Err(Error::NoQuery)));
    }

    #[test]
    fn sampling_is_deterministic() {
        let scenes: Vec<PointCloud> = (0..8)
            .map(|i| scene(&format!("s{i}"), vec![i % 3, 3, (i + 1) % 3]))
            .collect();
        let spec = EpisodeSpec::new(2, vec![0, 1], 11).unwrap();
        let first = sample_episode(&scenes, &spec).unwrap();
        for _ in 0..10 {
            assert_eq!(sample_episode(&scenes, &spec).unwrap(), first);
        }
    }

    #[test]
    fn remapping_is_a_bijection_onto_episode_labels() {
        let spec = EpisodeSpec::new(1, vec![7, 3, 11], 0).unwrap();
        let mapped: Vec<usize> = [7, 3, 11].iter().map(|&c| spec.remap(c)).collect();
        assert_eq!(mapped, vec![1, 2, 3]);
        assert_eq!(spec.remap(4), 0);
        assert_eq!(spec.remap(-1), 0);
    }

    #[test]
    fn spec_validation() {
        assert!(EpisodeSpec::new(0, vec![1], 0).is_err());
        assert!(EpisodeSpec::new(1, vec![], 0).is_err());
        assert!(EpisodeSpec::new(1, vec![2, 2], 0).is_err());
    }
}
