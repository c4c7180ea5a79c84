use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::metrics::{confusion_accumulate, harmonic_mean, iou_per_class, miou, ConfusionMatrix};
use crate::class_semantics::ClassRegistry;
use crate::engine::{images_to_act, SegModel};
use crate::error::{Error, Result};
use crate::protocol::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub config_hash: String,
    /// IoU of every class seen in the prediction or the truth.
    pub per_class_iou: BTreeMap<String, f64>,
    /// Mean over the base foreground classes.
    pub miou_base: f64,
    /// Mean over classes added by increments; absent at the base step.
    pub miou_new: Option<f64>,
    /// Mean over every channel, background included.
    pub miou_all: f64,
    pub harmonic_mean: Option<f64>,
}

impl MetricsReport {
    /// Aggregates a confusion matrix whose rows and columns follow `classes`.
    pub fn from_confusion(
        counts: &ConfusionMatrix,
        classes: &[String],
        base: &[String],
        step: usize,
        config_hash: &str,
    ) -> Result<Self> {
        if counts.nrows() != classes.len() {
            return Err(Error::Shape(format!(
                "{} class names for a {}-class matrix",
                classes.len(),
                counts.nrows()
            )));
        }
        let per_class_iou = classes
            .iter()
            .zip(iou_per_class(counts))
            .filter_map(|(n, v)| v.map(|v| (n.clone(), v)))
            .collect();
        let base_idx: Vec<usize> = (1..classes.len())
            .filter(|&k| base.contains(&classes[k]))
            .collect();
        let new_idx: Vec<usize> = (1..classes.len())
            .filter(|&k| !base.contains(&classes[k]))
            .collect();
        let all: Vec<usize> = (0..classes.len()).collect();
        let miou_base = miou(counts, &base_idx)?;
        let miou_new = if new_idx.is_empty() {
            None
        } else {
            Some(miou(counts, &new_idx)?)
        };
        let harmonic = match miou_new {
            Some(n) if miou_base + n > 0.0 => Some(harmonic_mean(miou_base, n)?),
            Some(_) => Some(0.0),
            None => None,
        };
        Ok(Self {
            step,
            config_hash: config_hash.to_string(),
            per_class_iou,
            miou_base,
            miou_new,
            miou_all: miou(counts, &all)?,
            harmonic_mean: harmonic,
        })
    }

    /// CSV rows: one per class, then base/new/all/hm aggregates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,class,iou\n");
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.10}")).unwrap_or_default();
        for (name, v) in &self.per_class_iou {
            out.push_str(&format!("{},{},{}\n", self.step, name, fmt(Some(*v))));
        }
        for (name, v) in [
            ("miou_base", Some(self.miou_base)),
            ("miou_new", self.miou_new),
            ("miou_all", Some(self.miou_all)),
            ("harmonic_mean", self.harmonic_mean),
        ] {
            out.push_str(&format!("{},{},{}\n", self.step, name, fmt(v)));
        }
        out
    }
}

/// Nearest-neighbour resize of a label grid.
pub fn upsample_nearest(labels: &Array2<usize>, out: (usize, usize)) -> Array2<usize> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn(out, |(r, c)| labels[[r * h / out.0, c * w / out.1]])
}

/// Scores the main head of `model` on `data`. Truth classes the model has
/// no channel for count as background.
pub fn evaluate(
    model: &SegModel,
    data: &[Sample],
    registry: &ClassRegistry,
    base: &[String],
    step: usize,
    config_hash: &str,
) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let classes = model.classes();
    let mut lookup = vec![0usize; registry.len()];
    for (ch, name) in classes.iter().enumerate() {
        lookup[registry.index_of(name)?] = ch;
    }
    let mut counts = Array2::zeros((classes.len(), classes.len()));
    for chunk in data.chunks(32) {
        let x = images_to_act(chunk.iter().map(|s| &s.image))?;
        for (pred, s) in model.predict(&x).into_iter().zip(chunk) {
            let truth = s.dense_mask.mapv(|k| lookup.get(k).copied().ok_or(k));
            if let Some(Err(k)) = truth.iter().find(|v| v.is_err()) {
                return Err(Error::UnknownClass(format!("mask index {k}")));
            }
            let truth = truth.mapv(|v| v.unwrap_or(0));
            confusion_accumulate(&upsample_nearest(&pred, truth.dim()), &truth, &mut counts)?;
        }
    }
    MetricsReport::from_confusion(&counts, classes, base, step, config_hash)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportPaths {
    pub csv: PathBuf,
    pub json: PathBuf,
}

impl ReportPaths {
    /// `<dir>/<stem>.csv` and `<dir>/<stem>.json`.
    pub fn in_dir(dir: &Path, stem: &str) -> Self {
        Self {
            csv: dir.join(format!("{stem}.csv")),
            json: dir.join(format!("{stem}.json")),
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn write_report(report: &MetricsReport, paths: &ReportPaths) -> Result<()> {
    write_file(&paths.csv, &report.to_csv())?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write_file(&paths.json, &json)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// Reports of successive steps, stored as a JSON array.
pub fn read_trace(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}
