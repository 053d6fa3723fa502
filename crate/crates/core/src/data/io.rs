//! CSV scene files, prediction exports and episode manifests.
//!
//! Scene rows are `x,y,z[,extra...],label`; an optional first line
//! starting with `#` is a header. Every row must have the same number of
//! columns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Episode, EpisodeSpec, PointCloud};
use crate::error::{Error, Result};
use crate::predictor::PredictionOutput;

fn parse_err(source: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Parses scene CSV text. `source_name` is used in error messages and as
/// the scene id.
pub fn parse_scene(text: &str, source_name: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut columns: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            if lineno == 1 {
                continue;
            }
            return Err(parse_err(source_name, lineno, "header allowed only on the first line"));
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match columns {
            None => {
                if fields.len() < 4 {
                    return Err(parse_err(
                        source_name,
                        lineno,
                        format!("expected at least 4 columns (x,y,z,label), got {}", fields.len()),
                    ));
                }
                columns = Some(fields.len());
            }
            Some(c) if c != fields.len() => {
                return Err(parse_err(
                    source_name,
                    lineno,
                    format!("expected {c} columns, got {}", fields.len()),
                ));
            }
            _ => {}
        }
        let (coords, label) = fields.split_at(fields.len() - 1);
        for f in coords {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(source_name, lineno, format!("non-numeric field `{f}`")))?;
            if !v.is_finite() {
                return Err(parse_err(source_name, lineno, format!("non-finite field `{f}`")));
            }
            points.push(v);
        }
        let label: i64 = label[0].parse().map_err(|_| {
            parse_err(source_name, lineno, format!("label `{}` is not an integer", label[0]))
        })?;
        if label < -1 {
            return Err(parse_err(
                source_name,
                lineno,
                format!("label {label} out of range (must be -1 or a class id)"),
            ));
        }
        labels.push(label);
    }
    let Some(columns) = columns else {
        return Err(Error::EmptyScene(source_name.to_string()));
    };
    PointCloud::new(points, columns - 1, labels, source_name)
}

pub fn load_scene(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_scene(&text, &id).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            source_name: path.display().to_string(),
            line,
            msg,
        },
        other => other,
    })
}

/// Loads every `*.csv` file in `dir`, sorted by file name.
pub fn load_scene_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyScene(format!("no scene files in {}", dir.display())));
    }
    paths.iter().map(|p| load_scene(p)).collect()
}

pub fn scene_to_csv(cloud: &PointCloud) -> String {
    let mut out = String::new();
    let header: Vec<String> = match cloud.dim() {
        3 => ["x", "y", "z"].iter().map(|s| s.to_string()).collect(),
        6 => ["x", "y", "z", "r", "g", "b"].iter().map(|s| s.to_string()).collect(),
        d => ["x", "y", "z"]
            .iter()
            .map(|s| s.to_string())
            .chain((3..d).map(|i| format!("f{i}")))
            .collect(),
    };
    let _ = writeln!(out, "# {},label", header.join(","));
    for i in 0..cloud.len() {
        for v in cloud.point(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{}", cloud.labels()[i]);
    }
    out
}

pub fn save_scene(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, scene_to_csv(cloud))?;
    Ok(())
}

/// Writes `point_index,pred_label,true_label,prob_0..prob_N,variance,entropy,fused_uncertainty`.
pub fn save_predictions(path: &Path, out: &PredictionOutput, truth: &[usize]) -> Result<()> {
    let n = out.predicted_labels.len();
    if truth.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} true labels for {n} predictions",
            truth.len()
        )));
    }
    let c = out.probs.cols();
    let mut s = String::from("point_index,pred_label,true_label");
    for k in 0..c {
        let _ = write!(s, ",prob_{k}");
    }
    s.push_str(",variance,entropy,fused_uncertainty\n");
    for j in 0..n {
        let _ = write!(s, "{j},{},{}", out.predicted_labels[j], truth[j]);
        for p in out.probs.row(j) {
            let _ = write!(s, ",{p}");
        }
        let _ = writeln!(
            s,
            ",{},{},{}",
            out.variance_map[j], out.entropy_map[j], out.fused_uncertainty[j]
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// One row of a prediction export.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub point_index: usize,
    pub pred_label: usize,
    pub true_label: usize,
    pub probs: Vec<f64>,
    pub variance: f64,
    pub entropy: f64,
    pub fused_uncertainty: f64,
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path)?;
    let src = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::EmptyScene(src.clone()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let n_probs = cols.iter().filter(|c| c.starts_with("prob_")).count();
    if cols.len() != n_probs + 6 || cols[..3] != ["point_index", "pred_label", "true_label"] {
        return Err(parse_err(&src, 1, "unexpected prediction header"));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(parse_err(
                &src,
                lineno,
                format!("expected {} columns, got {}", cols.len(), f.len()),
            ));
        }
        let int = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| parse_err(&src, lineno, format!("bad integer `{s}`")))
        };
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| parse_err(&src, lineno, format!("non-numeric field `{s}`")))
        };
        let probs = f[3..3 + n_probs].iter().map(|s| num(s)).collect::<Result<_>>()?;
        out.push(PredictionRecord {
            point_index: int(f[0])?,
            pred_label: int(f[1])?,
            true_label: int(f[2])?,
            probs,
            variance: num(f[3 + n_probs])?,
            entropy: num(f[4 + n_probs])?,
            fused_uncertainty: num(f[5 + n_probs])?,
        });
    }
    Ok(out)
}

/// Plot-ready per-point table: `x,y,z,pred_label,true_label,correct,fused_uncertainty`.
pub fn export_heatmap(
    path: &Path,
    cloud: &PointCloud,
    out: &PredictionOutput,
    truth: &[usize],
) -> Result<()> {
    if cloud.len() != out.predicted_labels.len() || truth.len() != cloud.len() {
        return Err(Error::InvalidArgument("heatmap inputs differ in length".into()));
    }
    let mut s = String::from("x,y,z,pred_label,true_label,correct,fused_uncertainty\n");
    for (j, c) in cloud.coords().iter().enumerate() {
        let pred = out.predicted_labels[j];
        let _ = writeln!(
            s,
            "{},{},{},{pred},{},{},{}",
            c[0],
            c[1],
            c[2],
            truth[j],
            u8::from(pred == truth[j]),
            out.fused_uncertainty[j]
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Explicit episode description (TOML): support scene paths per class and
/// a query path, relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub k_shot: usize,
    #[serde(default)]
    pub seed: u64,
    pub query: PathBuf,
    pub support: Vec<ManifestSupport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSupport {
    pub class: i64,
    pub scenes: Vec<PathBuf>,
}

impl EpisodeManifest {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("episode manifest: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("episode manifest: {e}")))
    }

    /// Loads the referenced scenes and builds the episode.
    pub fn load_episode(path: &Path) -> Result<Episode> {
        let manifest = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.resolve(base)
    }

    pub fn resolve(&self, base: &Path) -> Result<Episode> {
        let spec = EpisodeSpec::new(
            self.k_shot,
            self.support.iter().map(|s| s.class).collect(),
            self.seed,
        )?;
        let support = self
            .support
            .iter()
            .map(|s| {
                s.scenes
                    .iter()
                    .map(|p| load_scene(&base.join(p)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let query = load_scene(&base.join(&self.query))?;
        Episode::from_parts(spec, support, query)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_scene() {
        let cloud = parse_scene("0,0,0,0\n1,0,0,1\n0,1,0,-1\n", "t").unwrap();
        assert_eq!(cloud.len(), 3);
        assert_eq!(cloud.dim(), 3);
        assert_eq!(cloud.labels(), &[0, 1, -1]);
    }

    #[test]
    fn header_only_is_empty_scene() {
        assert!(matches!(parse_scene("# x,y,z,label\n", "h"), Err(Error::EmptyScene(_))));
        assert!(matches!(parse_scene("", "h"), Err(Error::EmptyScene(_))));
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("# h\n0,0,0,1\n0,0,1\n", 3),
            ("0,0,0,1\n0,x,0,1\n", 2),
            ("0,0,0,1\n0,0,0,-4\n", 2),
            ("0,0,0,1.5\n", 1),
            ("0,0,0,1\n# late header\n", 2),
        ];
        for (text, want) in cases {
            match parse_scene(text, "bad") {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text:?}"),
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn colour_columns_are_features() {
        let cloud = parse_scene("# x,y,z,r,g,b,label\n1,2,3,0.1,0.2,0.3,4\n", "c").unwrap();
        assert_eq!(cloud.dim(), 6);
        assert_eq!(cloud.point(0), &[1.0, 2.0, 3.0, 0.1, 0.2, 0.3]);
        assert_eq!(cloud.classes(), vec![4]);
    }

    #[test]
    fn manifest_parses() {
        let m = EpisodeManifest::parse(
            "k_shot = 1\nquery = \"q.csv\"\n[[support]]\nclass = 5\nscenes = [\"a.csv\"]\n",
        )
        .unwrap();
        assert_eq!(m.support[0].class, 5);
        assert_eq!(EpisodeManifest::parse(&m.to_toml().unwrap()).unwrap(), m);
    }
}
