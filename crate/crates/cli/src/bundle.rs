//! Dataset bundle: a directory holding a cleaned series and its metadata.
//!
//! | file            | contents                                          |
//! |-----------------|---------------------------------------------------|
//! | `series.csv`    | interpolated values on the original scale, `L × N` |
//! | `mask.csv`      | `1` observed, `0` originally missing               |
//! | `edges.csv`     | road graph edge list                               |
//! | `manifest.toml` | shapes, resolution, split ranges, Z-score stats    |

use std::fs;
use std::path::Path;

use adgcrnn_core::dataset::{interpolate_missing, prepare, PreparedData, RawSeries, ResolutionConfig, Split};
use adgcrnn_core::graph::StaticGraph;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::{read_edges, read_values_csv, write_edges, write_matrix_csv, write_text};

pub const SERIES_FILE: &str = "series.csv";
pub const MASK_FILE: &str = "mask.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Inclusive anchor range of one split; absent when the split is empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
pub struct AnchorRange {
    pub first: usize,
    pub last: usize,
    pub count: usize,
}

impl AnchorRange {
    fn of(anchors: &[usize]) -> Option<Self> {
        Some(AnchorRange {
            first: *anchors.first()?,
            last: *anchors.last()?,
            count: anchors.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub source: String,
    pub n_nodes: usize,
    pub n_steps: usize,
    pub step_minutes: u32,
    pub steps_per_day: usize,
    pub history: usize,
    pub horizon: usize,
    pub missing: usize,
    pub windows: usize,
    pub first_anchor: usize,
    /// Set for synthetic data whose coupling graph changes over time.
    pub dynamic_structure: bool,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub train: Option<AnchorRange>,
    pub val: Option<AnchorRange>,
    pub test: Option<AnchorRange>,
}

impl Manifest {
    pub fn resolution(&self) -> ResolutionConfig {
        ResolutionConfig {
            steps_per_day: self.steps_per_day,
            history: self.history,
            horizon: self.horizon,
        }
    }
}

/// Cleans `raw`, computes the split and statistics and writes the bundle.
/// Series too short for a split still produce a bundle, with a warning and
/// an empty window manifest.
pub fn write_bundle(
    dir: &Path,
    raw: &RawSeries,
    graph: &StaticGraph,
    resolution: &ResolutionConfig,
    source: &str,
    dynamic_structure: bool,
) -> Result<Manifest> {
    resolution.validate()?;
    if graph.n_nodes() != raw.n_nodes() {
        return Err(CliError::Invalid(format!(
            "graph has {} nodes but the series has {} columns",
            graph.n_nodes(),
            raw.n_nodes()
        )));
    }
    let clean = interpolate_missing(raw)?;
    let anchors: Vec<usize> = resolution.anchors(clean.n_steps()).collect();
    let windows = anchors.len();
    let (split, stats) = if windows >= 5 {
        let prepared = prepare(&clean, *resolution)?;
        (Some(prepared.anchors), Some(prepared.stats))
    } else {
        log::warn!(
            "{} steps give {windows} windows; at least {} steps are needed for a 6:2:2 split",
            clean.n_steps(),
            resolution.min_steps() + 4
        );
        (None, None)
    };
    let range = |f: fn(&Split<usize>) -> &Vec<usize>| split.as_ref().and_then(|s| AnchorRange::of(f(s)));
    let manifest = Manifest {
        source: source.into(),
        n_nodes: clean.n_nodes(),
        n_steps: clean.n_steps(),
        step_minutes: clean.step_minutes,
        steps_per_day: resolution.steps_per_day,
        history: resolution.history,
        horizon: resolution.horizon,
        missing: clean.missing_count(),
        windows,
        first_anchor: resolution.first_anchor(),
        dynamic_structure,
        mean: stats.map(|s| s.mean),
        std: stats.map(|s| s.std),
        train: range(|s| &s.train),
        val: range(|s| &s.val),
        test: range(|s| &s.test),
    };
    fs::create_dir_all(dir).map_err(CliError::write(dir))?;
    write_matrix_csv(&dir.join(SERIES_FILE), None, &clean.values)?;
    write_matrix_csv(&dir.join(MASK_FILE), None, &clean.mask)?;
    write_edges(&dir.join(EDGES_FILE), graph.edges())?;
    let text = toml::to_string(&manifest).map_err(|e| CliError::Invalid(e.to_string()))?;
    write_text(&dir.join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

/// A loaded bundle ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub manifest: Manifest,
    pub graph: StaticGraph,
    /// Cleaned series on the original scale.
    pub raw: RawSeries,
}

impl Bundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(CliError::read(&manifest_path))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| CliError::Format {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
        let values = read_values_csv(&dir.join(SERIES_FILE))?;
        let mask = read_values_csv(&dir.join(MASK_FILE))?;
        if values.shape() != [manifest.n_steps, manifest.n_nodes] || mask.shape() != values.shape() {
            return Err(CliError::Format {
                path: dir.into(),
                message: format!(
                    "series is {:?}, manifest says {} steps x {} nodes",
                    values.shape(),
                    manifest.n_steps,
                    manifest.n_nodes
                ),
            });
        }
        let graph = StaticGraph::from_edges(manifest.n_nodes, &read_edges(&dir.join(EDGES_FILE))?)?;
        let raw = RawSeries {
            values,
            mask,
            step_minutes: manifest.step_minutes,
        };
        Ok(Bundle { manifest, graph, raw })
    }

    /// Normalizes with training statistics and splits the windows. The
    /// statistics must agree with the ones recorded at ingest time.
    pub fn prepare(&self) -> Result<PreparedData> {
        if self.manifest.windows < 5 {
            return Err(CliError::Invalid(format!(
                "bundle has {} windows; a 6:2:2 split needs at least 5",
                self.manifest.windows
            )));
        }
        let data = prepare(&self.raw, self.manifest.resolution())?;
        if Some(data.stats.mean) != self.manifest.mean || Some(data.stats.std) != self.manifest.std {
            return Err(CliError::Invalid(
                "bundle statistics do not match its series; re-run ingest".into(),
            ));
        }
        Ok(data)
    }
}

/// Anchors of the named split (`train`, `val` or `test`).
pub fn split_anchors(data: &PreparedData, split: &str) -> Result<Vec<usize>> {
    match split {
        "train" => Ok(data.anchors.train.clone()),
        "val" => Ok(data.anchors.val.clone()),
        "test" => Ok(data.anchors.test.clone()),
        other => Err(CliError::Invalid(format!(
            "unknown split {other:?}; expected train, val or test"
        ))),
    }
}
