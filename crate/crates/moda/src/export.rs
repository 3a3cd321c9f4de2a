//! Artifact formats: trace JSON and its CSV companion, checkpoints, metric
//! history and ablation tables.
//!
//! Floats are written with Rust's shortest round-trip formatting, and no file
//! carries a timestamp, so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use moda_core::diagnostics::{summarize, AttentionTrace, FocusSummary, LayerSummary};
use moda_core::modality::ModalityId;
use moda_core::toymodel::{AblationRow, MetricRecord, ModelState};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TRACE_SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

const DISPARITY_NOTE: &str = "100*|self_mean-cross_mean|/max(self_mean,cross_mean); null when both means are 0";
const RESIDUAL_NOTE: &str =
    "per-layer alignment error is measured as the multiplicative residual of an exponential fit";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceDocument {
    pub schema_version: u32,
    pub disparity_definition: String,
    pub residual_definition: String,
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub layer: usize,
    pub foci: Vec<FocusRecord>,
    /// Full `N × N` attention map, row per query.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<Vec<Vec<f64>>>,
    /// Per-row mass held by pseudo entries and sink columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink_mass: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocusRecord {
    pub modality: u32,
    pub name: String,
    pub self_mean: f64,
    pub cross_mean: f64,
    pub disparity: Option<f64>,
}

impl TraceDocument {
    pub fn from_summaries(summaries: &[LayerSummary]) -> Self {
        TraceDocument {
            schema_version: TRACE_SCHEMA_VERSION,
            disparity_definition: DISPARITY_NOTE.into(),
            residual_definition: RESIDUAL_NOTE.into(),
            layers: summaries
                .iter()
                .map(|l| LayerRecord {
                    layer: l.layer_index,
                    foci: l
                        .foci
                        .iter()
                        .map(|f| FocusRecord {
                            modality: f.focus.0,
                            name: f.focus.to_string(),
                            self_mean: f.self_mean,
                            cross_mean: f.cross_mean,
                            disparity: f.disparity,
                        })
                        .collect(),
                    heatmap: None,
                    sink_mass: None,
                })
                .collect(),
        }
    }

    /// Summaries of `trace`, with full maps when `heatmaps` is set.
    pub fn from_trace(trace: &AttentionTrace, heatmaps: bool) -> Result<Self> {
        let mut doc = Self::from_summaries(&summarize(trace)?);
        if heatmaps {
            doc.attach_heatmaps(trace);
        }
        Ok(doc)
    }

    /// Attaches the maps of `trace` to layers with matching indices.
    pub fn attach_heatmaps(&mut self, trace: &AttentionTrace) {
        for layer in trace.layers() {
            if let Some(rec) = self.layers.iter_mut().find(|r| r.layer == layer.layer_index) {
                let w = &layer.weights;
                rec.heatmap = Some((0..w.rows()).map(|i| w.row(i).to_vec()).collect());
                rec.sink_mass = Some(layer.sink_mass.clone());
            }
        }
    }

    /// Stored disparities are kept as written, not recomputed.
    pub fn summaries(&self) -> Vec<LayerSummary> {
        self.layers
            .iter()
            .map(|l| LayerSummary {
                layer_index: l.layer,
                foci: l
                    .foci
                    .iter()
                    .map(|f| FocusSummary {
                        focus: ModalityId(f.modality),
                        self_mean: f.self_mean,
                        cross_mean: f.cross_mean,
                        disparity: f.disparity,
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace document is finite")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,focus,metric,value\n");
        for l in &self.layers {
            for f in &l.foci {
                let d = f.disparity.map(|v| v.to_string()).unwrap_or_default();
                for (metric, value) in [
                    ("self_mean", f.self_mean.to_string()),
                    ("cross_mean", f.cross_mean.to_string()),
                    ("disparity", d),
                ] {
                    let _ = writeln!(out, "{},{},{metric},{value}", l.layer, f.name);
                }
            }
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let doc: TraceDocument = serde_json::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        if doc.schema_version != TRACE_SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported schema_version {}", doc.schema_version),
            });
        }
        Ok(doc)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read(path)?, path)
    }
}

/// Writes `trace.json` at `path` and the CSV companion next to it with a
/// `.csv` extension.
pub fn export_trace(doc: &TraceDocument, path: &Path) -> Result<()> {
    write(path, &doc.to_json())?;
    write(&path.with_extension("csv"), &doc.to_csv())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub model: ModelState,
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model: model.clone(),
    };
    let text = serde_json::to_string(&ck).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    write(path, &text)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let ck: Checkpoint = serde_json::from_str(&read(path)?).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported schema_version {}", ck.schema_version),
        });
    }
    Ok(ck.model)
}

/// One row per evaluation checkpoint; `layers` fixes the number of
/// per-layer disparity columns.
pub fn metrics_csv(history: &[MetricRecord], layers: usize) -> String {
    let mut out = String::from("step,lr,train_loss,eval_loss,eval_accuracy,mean_disparity");
    for l in 0..layers {
        let _ = write!(out, ",disparity_layer{l}");
    }
    out.push('\n');
    for r in history {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.lr, r.train_loss, r.eval_loss, r.eval_accuracy, r.mean_disparity
        );
        for l in 0..layers {
            match r.layer_disparity.get(l) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("label,accuracy,eval_loss,mean_disparity,gamma\n");
    for r in rows {
        let gamma = r.gamma.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{gamma}",
            csv_field(&r.label),
            r.accuracy,
            r.eval_loss,
            r.mean_disparity
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `text`, creating parent directories.
pub fn write(path: &Path, text: &str) -> Result<()> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, text).map_err(io)
}
