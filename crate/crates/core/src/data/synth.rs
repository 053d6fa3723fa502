use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

/// Parameters of the Gaussian-blob scene generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneConfig {
    pub points_per_object: usize,
    pub objects_per_scene: usize,
    /// Standard deviation of point positions around a blob centre.
    pub intra_class_jitter: f64,
    /// Minimum distance between any two blob centres.
    pub inter_class_gap: f64,
    /// Appends an RGB colour per point, drawn around a per-class palette
    /// colour with standard deviation `color_noise * intra_class_jitter`.
    pub with_color: bool,
    pub color_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            points_per_object: 48,
            objects_per_scene: 1,
            intra_class_jitter: 0.3,
            inter_class_gap: 5.0,
            with_color: true,
            color_noise: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticSceneConfig {
    fn validate(&self) -> Result<()> {
        if self.points_per_object == 0 || self.objects_per_scene == 0 {
            return Err(Error::InvalidArgument(
                "points_per_object and objects_per_scene must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("intra_class_jitter", self.intra_class_jitter),
            ("inter_class_gap", self.inter_class_gap),
            ("color_noise", self.color_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Deterministic palette colour for a class id (golden-ratio hue walk).
pub fn class_color(class_id: i64) -> [f64; 3] {
    let hue = (class_id as f64 * 0.618_033_988_75 + 0.1).rem_euclid(1.0);
    let value = if class_id % 2 == 0 { 0.95 } else { 0.65 };
    hsv_to_rgb(hue, 0.8, value)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h * 6.0;
    let sector = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn place_centres(rng: &mut ChaCha8Rng, count: usize, gap: f64) -> Vec<[f64; 3]> {
    let per_axis = (count as f64).cbrt().ceil().max(1.0);
    let mut side = (gap * per_axis * 1.5).max(1.0);
    let mut centres: Vec<[f64; 3]> = Vec::with_capacity(count);
    let mut failures = 0usize;
    while centres.len() < count {
        let c = [
            rng.gen_range(0.0..side),
            rng.gen_range(0.0..side),
            rng.gen_range(0.0..side),
        ];
        let ok = centres.iter().all(|o| {
            let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= gap
        });
        if ok {
            centres.push(c);
        } else {
            failures += 1;
            if failures % 1000 == 0 {
                side *= 1.25;
            }
        }
    }
    centres
}

/// One Gaussian blob per class per object, blob centres at least
/// `inter_class_gap` apart. Deterministic in `cfg.seed`.
pub fn generate_synthetic_scene(
    cfg: &SyntheticSceneConfig,
    class_ids: &[i64],
) -> Result<PointCloud> {
    cfg.validate()?;
    if class_ids.is_empty() {
        return Err(Error::InvalidArgument("at least one class id is required".into()));
    }
    if let Some(bad) = class_ids.iter().find(|&&c| c < 0) {
        return Err(Error::InvalidArgument(format!("negative class id {bad}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let blobs = class_ids.len() * cfg.objects_per_scene;
    let centres = place_centres(&mut rng, blobs, cfg.inter_class_gap);

    let dim = if cfg.with_color { 6 } else { 3 };
    let n = blobs * cfg.points_per_object;
    let mut points = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    let colour_sd = cfg.color_noise * cfg.intra_class_jitter;
    for (b, centre) in centres.iter().enumerate() {
        let class = class_ids[b / cfg.objects_per_scene];
        let colour = class_color(class);
        for _ in 0..cfg.points_per_object {
            for c in centre {
                let e: f64 = rng.sample(StandardNormal);
                points.push(c + cfg.intra_class_jitter * e);
            }
            if cfg.with_color {
                for c in colour {
                    let e: f64 = rng.sample(StandardNormal);
                    points.push(c + colour_sd * e);
                }
            }
            labels.push(class);
        }
    }
    PointCloud::new(points, dim, labels, format!("synth-{}", cfg.seed))
}
