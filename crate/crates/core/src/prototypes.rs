//! Farthest point sampling and raw class prototypes.
//!
//! A class prototype is built by choosing `m_sub` anchor points with FPS
//! over the class's coordinates, assigning every class point to its
//! nearest anchor, averaging features per anchor group (sub-prototypes)
//! and averaging the sub-prototypes. The whole construction is a fixed
//! row mixing of the feature matrix, so it is differentiable in the
//! features and exact masked average pooling when `m_sub == 1`.

use std::sync::Arc;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{Graph, RowMixing, Var};

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy max-min selection of `k` indices. The first pick is the point
/// farthest from the centroid; ties always go to the lowest index. When
/// `k >= n` every index is returned once.
pub fn farthest_point_sampling(coords: &[[f64; 3]], k: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::InvalidArgument("farthest point sampling on an empty cloud".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("farthest point sampling needs k >= 1".into()));
    }
    let mut centroid = [0.0; 3];
    for c in coords {
        for (s, v) in centroid.iter_mut().zip(c) {
            *s += v / n as f64;
        }
    }
    let mut first = 0;
    let mut best = f64::NEG_INFINITY;
    for (i, c) in coords.iter().enumerate() {
        let d = dist2(c, &centroid);
        if d > best {
            best = d;
            first = i;
        }
    }

    let k = k.min(n);
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d: Vec<f64> = coords.iter().map(|c| dist2(c, &coords[first])).collect();
    chosen.push(first);
    taken[first] = true;
    while chosen.len() < k {
        let mut next = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            if !taken[i] && min_d[i] > best {
                best = min_d[i];
                next = i;
            }
        }
        chosen.push(next);
        taken[next] = true;
        for i in 0..n {
            min_d[i] = min_d[i].min(dist2(&coords[i], &coords[next]));
        }
    }
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Raw,
    Refined,
    Fused1,
    Fused2,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Raw => "raw",
            Stage::Refined => "refined",
            Stage::Fused1 => "fused1",
            Stage::Fused2 => "fused2",
        }
    }
}

/// Per-class prototype rows on a graph (`C × d`).
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    pub protos: Var,
    pub stage: Stage,
    /// Episode labels of the rows (background is 0).
    pub class_ids: Vec<usize>,
    /// False where the class had no points; such rows are exactly zero.
    pub valid: Vec<bool>,
}

impl PrototypeSet {
    pub fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::Stage {
                expected: expected.name(),
                found: self.stage.name(),
            });
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    /// Same rows and classes at a later stage.
    pub fn advanced(&self, protos: Var, stage: Stage) -> Result<PrototypeSet> {
        if stage <= self.stage {
            return Err(Error::Stage {
                expected: "a later stage",
                found: self.stage.name(),
            });
        }
        Ok(PrototypeSet {
            protos,
            stage,
            class_ids: self.class_ids.clone(),
            valid: self.valid.clone(),
        })
    }

    /// 1.0 for valid rows, 0.0 for padded ones.
    pub fn valid_weights(&self) -> Vec<f64> {
        self.valid.iter().map(|&v| f64::from(u8::from(v))).collect()
    }
}

/// One mask per class, `masks[c][j]` true when point `j` belongs to `c`.
pub fn masks_from_labels(labels: &[usize], num_classes: usize) -> Vec<Vec<bool>> {
    (0..num_classes)
        .map(|c| labels.iter().map(|&l| l == c).collect())
        .collect()
}

/// Class masks of one support shot: its foreground under label `way + 1`,
/// the complement as background, every other class empty.
pub fn support_masks(foreground: &[bool], way: usize, num_classes: usize) -> Vec<Vec<bool>> {
    (0..num_classes)
        .map(|c| {
            if c == 0 {
                foreground.iter().map(|&m| !m).collect()
            } else if c == way + 1 {
                foreground.to_vec()
            } else {
                vec![false; foreground.len()]
            }
        })
        .collect()
}

/// The fixed row mixing that turns an `n × d` feature matrix into `C × d`
/// raw prototypes, plus the validity flag of each class.
pub fn pooling_plan(
    coords: &[[f64; 3]],
    masks: &[Vec<bool>],
    m_sub: usize,
) -> Result<(RowMixing, Vec<bool>)> {
    if m_sub == 0 {
        return Err(Error::InvalidArgument("m_sub must be >= 1".into()));
    }
    let n = coords.len();
    if let Some(bad) = masks.iter().find(|m| m.len() != n) {
        return Err(Error::shape(
            "pooling_plan",
            format!("mask of {} entries for {n} points", bad.len()),
        ));
    }
    let mut entries = Vec::with_capacity(masks.len());
    let mut valid = Vec::with_capacity(masks.len());
    for mask in masks {
        let members: Vec<usize> = (0..n).filter(|&j| mask[j]).collect();
        if members.is_empty() {
            entries.push(Vec::new());
            valid.push(false);
            continue;
        }
        let member_coords: Vec<[f64; 3]> = members.iter().map(|&j| coords[j]).collect();
        let anchors = farthest_point_sampling(&member_coords, m_sub)?;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); anchors.len()];
        for (local, &j) in members.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (a, &anchor) in anchors.iter().enumerate() {
                let d = dist2(&member_coords[local], &member_coords[anchor]);
                if d < best_d {
                    best_d = d;
                    best = a;
                }
            }
            groups[best].push(j);
        }
        groups.retain(|g| !g.is_empty());
        let n_groups = groups.len() as f64;
        let mut row: Vec<(usize, f64)> = groups
            .iter()
            .flat_map(|grp| {
                let w = 1.0 / (n_groups * grp.len() as f64);
                grp.iter().map(move |&j| (j, w))
            })
            .collect();
        row.sort_by_key(|&(j, _)| j);
        entries.push(row);
        valid.push(true);
    }
    if !valid.iter().any(|&v| v) {
        return Err(Error::InvalidArgument("every class mask is empty".into()));
    }
    Ok((
        RowMixing {
            input_rows: n,
            entries,
        },
        valid,
    ))
}

/// Raw prototypes for classes `0..masks.len()`.
pub fn build_raw_prototypes(
    g: &mut Graph,
    fmap: &FeatureMap,
    coords: &[[f64; 3]],
    masks: &[Vec<bool>],
    m_sub: usize,
) -> Result<PrototypeSet> {
    if coords.len() != fmap.n {
        return Err(Error::shape(
            "build_raw_prototypes",
            format!("{} coordinates for {} feature rows", coords.len(), fmap.n),
        ));
    }
    let (plan, valid) = pooling_plan(coords, masks, m_sub)?;
    let protos = g.row_mix(fmap.features, Arc::new(plan))?;
    Ok(PrototypeSet {
        protos,
        stage: Stage::Raw,
        class_ids: (0..masks.len()).collect(),
        valid,
    })
}

/// Per-class mean over the shots in which the class is valid.
pub fn merge_support_prototypes(g: &mut Graph, per_shot: &[PrototypeSet]) -> Result<PrototypeSet> {
    let first = per_shot
        .first()
        .ok_or_else(|| Error::InvalidArgument("no support prototypes to merge".into()))?;
    for s in per_shot {
        s.expect_stage(Stage::Raw)?;
        if s.class_ids != first.class_ids {
            return Err(Error::InvalidArgument(
                "support prototype sets have different class lists".into(),
            ));
        }
    }
    if per_shot.len() == 1 {
        return Ok(first.clone());
    }
    let c = first.num_classes();
    let counts: Vec<usize> = (0..c)
        .map(|k| per_shot.iter().filter(|s| s.valid[k]).count())
        .collect();
    let mut acc: Option<Var> = None;
    for s in per_shot {
        let w: Vec<f64> = (0..c)
            .map(|k| {
                if s.valid[k] {
                    1.0 / counts[k] as f64
                } else {
                    0.0
                }
            })
            .collect();
        let scaled = g.row_mix(s.protos, Arc::new(RowMixing::diagonal(&w)))?;
        acc = Some(match acc {
            Some(a) => g.add(a, scaled)?,
            None => scaled,
        });
    }
    Ok(PrototypeSet {
        protos: acc.expect("at least two shots"),
        stage: Stage::Raw,
        class_ids: first.class_ids.clone(),
        valid: counts.iter().map(|&n| n > 0).collect(),
    })
}
