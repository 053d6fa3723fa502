//! Point clouds, few-shot episodes, synthetic scenes and file formats.

mod episode;
mod io;
mod synth;

pub use episode::{sample_episode, Episode, EpisodeSpec, SupportShot};
pub use io::{
    export_heatmap, load_predictions, load_scene, load_scene_dir, parse_scene,
    save_predictions, save_scene, scene_to_csv, EpisodeManifest, ManifestSupport, PredictionRecord,
};
pub use synth::{class_color, generate_synthetic_scene, SyntheticSceneConfig};

use crate::error::{Error, Result};

/// A labelled point cloud: `n × d_pt` rows (xyz first, then optional
/// features such as colour) and one label per point (`-1` = unlabelled).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<f64>,
    dim: usize,
    labels: Vec<i64>,
    scene_id: String,
}

impl PointCloud {
    pub fn new(
        points: Vec<f64>,
        dim: usize,
        labels: Vec<i64>,
        scene_id: impl Into<String>,
    ) -> Result<Self> {
        let scene_id = scene_id.into();
        if dim < 3 {
            return Err(Error::InvalidArgument(format!(
                "point dimension must be at least 3, got {dim}"
            )));
        }
        if points.is_empty() {
            return Err(Error::EmptyScene(scene_id));
        }
        if points.len() % dim != 0 || points.len() / dim != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values with dimension {dim} do not match {} labels",
                points.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l < -1) {
            return Err(Error::InvalidArgument(format!("label {bad} below -1")));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coordinate".into()));
        }
        Ok(PointCloud {
            points,
            dim,
            labels,
            scene_id,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> Vec<[f64; 3]> {
        (0..self.len())
            .map(|i| {
                let p = self.point(i);
                [p[0], p[1], p[2]]
            })
            .collect()
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn contains_class(&self, class: i64) -> bool {
        self.labels.contains(&class)
    }

    /// Sorted distinct labels, excluding `-1`.
    pub fn classes(&self) -> Vec<i64> {
        let mut c: Vec<i64> = self.labels.iter().copied().filter(|&l| l >= 0).collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Checks every label is `-1` or in `[0, num_classes)`.
    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_classes as i64) {
            Some(bad) => Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {num_classes} classes in {}",
                self.scene_id
            ))),
            None => Ok(()),
        }
    }

    pub fn with_labels(&self, labels: Vec<i64>) -> Result<Self> {
        PointCloud::new(self.points.clone(), self.dim, labels, self.scene_id.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_invariants() {
        assert!(PointCloud::new(vec![0.0; 6], 3, vec![0, 1], "a").is_ok());
        assert!(matches!(
            PointCloud::new(vec![], 3, vec![], "e"),
            Err(Error::EmptyScene(_))
        ));
        assert!(PointCloud::new(vec![0.0; 4], 2, vec![0, 0], "d").is_err());
        assert!(PointCloud::new(vec![0.0; 6], 3, vec![0], "n").is_err());
        assert!(PointCloud::new(vec![0.0; 3], 3, vec![-2], "l").is_err());
        let c = PointCloud::new(vec![0.0; 9], 3, vec![2, -1, 0], "c").unwrap();
        assert_eq!(c.classes(), vec![0, 2]);
        assert!(c.validate_classes(3).is_ok());
        assert!(c.validate_classes(2).is_err());
    }
}
