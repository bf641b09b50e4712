//! Confusion matrices and grouped mean IoU.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::taxonomy::ClassId;

/// `C x C` pixel counts, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    ignore: ClassId,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore: ClassId) -> Self {
        Self {
            num_classes,
            ignore,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. Pixels whose ground truth is the ignore id are skipped.
    pub fn accumulate(&mut self, pred: &[ClassId], gt: &[ClassId]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let bad = |v: ClassId| v as usize >= self.num_classes;
        if let Some((&p, &g)) = pred
            .iter()
            .zip(gt)
            .find(|(&p, &g)| g != self.ignore && (bad(g) || bad(p)))
        {
            return Err(Error::Data(format!(
                "class id out of range (gt {g}, pred {p}, {} classes)",
                self.num_classes
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != self.ignore {
                self.counts[g as usize * self.num_classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn accumulate_masks(&mut self, pred: &Mask, gt: &Mask) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        self.accumulate(pred.data(), gt.data())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape(format!(
                "cannot merge {}-class and {}-class matrices",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)`, `None` when the class never occurs in either.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.get(c, c);
        let gt: u64 = (0..self.num_classes).map(|p| self.get(c, p)).sum();
        let pred: u64 = (0..self.num_classes).map(|g| self.get(g, c)).sum();
        let union = gt + pred - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn gt_pixels(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    /// Per-class IoU over `old ∪ new` with unweighted group means.
    pub fn miou(&self, old: &[ClassId], new: &[ClassId]) -> Result<MetricReport> {
        if self.total() == 0 {
            return Err(Error::UndefinedMetric("confusion matrix is empty".into()));
        }
        let mut per_class = BTreeMap::new();
        let mut pixels = BTreeMap::new();
        for &c in old.iter().chain(new) {
            if c as usize >= self.num_classes {
                return Err(Error::Data(format!("class {c} outside the {}-class matrix", self.num_classes)));
            }
            per_class.insert(c, self.iou(c as usize));
            pixels.insert(c, self.gt_pixels(c as usize));
        }
        let mean = |ids: &[ClassId]| {
            let vals: Vec<f64> = ids.iter().filter_map(|c| per_class[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let all: Vec<ClassId> = old.iter().chain(new).copied().collect();
        Ok(MetricReport {
            old: mean(old),
            new: mean(new),
            all: mean(&all),
            old_classes: old.to_vec(),
            new_classes: new.to_vec(),
            per_class,
            pixels,
        })
    }
}

/// Per-class IoU with old / new / all means. Undefined values are absent.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_class: BTreeMap<ClassId, Option<f64>>,
    pub pixels: BTreeMap<ClassId, u64>,
    pub old_classes: Vec<ClassId>,
    pub new_classes: Vec<ClassId>,
    pub old: Option<f64>,
    pub new: Option<f64>,
    pub all: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    old: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    new: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    all: Option<f64>,
    old_classes: Vec<ClassId>,
    new_classes: Vec<ClassId>,
    iou: BTreeMap<String, f64>,
    pixels: BTreeMap<String, u64>,
}

impl MetricReport {
    pub fn to_toml(&self) -> String {
        let doc = ReportDoc {
            old: self.old,
            new: self.new,
            all: self.all,
            old_classes: self.old_classes.clone(),
            new_classes: self.new_classes.clone(),
            iou: self
                .per_class
                .iter()
                .filter_map(|(c, v)| v.map(|v| (c.to_string(), v)))
                .collect(),
            pixels: self.pixels.iter().map(|(c, n)| (c.to_string(), *n)).collect(),
        };
        toml::to_string(&doc).expect("metric report serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: ReportDoc = toml::from_str(text).map_err(|e| Error::format("metric report", e.to_string()))?;
        let parse_id = |k: &String| -> Result<ClassId> {
            k.parse().map_err(|_| Error::format("metric report", format!("bad class id `{k}`")))
        };
        let mut per_class = BTreeMap::new();
        for &c in doc.old_classes.iter().chain(&doc.new_classes) {
            per_class.insert(c, None);
        }
        for (k, v) in &doc.iou {
            let c = parse_id(k)?;
            if !per_class.contains_key(&c) {
                return Err(Error::format("metric report", format!("class {c} is in no group")));
            }
            if !(0.0..=1.0).contains(v) {
                return Err(Error::format("metric report", format!("IoU {v} for class {c} outside [0, 1]")));
            }
            per_class.insert(c, Some(*v));
        }
        let pixels = doc
            .pixels
            .iter()
            .map(|(k, n)| Ok((parse_id(k)?, *n)))
            .collect::<Result<_>>()?;
        Ok(Self {
            per_class,
            pixels,
            old_classes: doc.old_classes,
            new_classes: doc.new_classes,
            old: doc.old,
            new: doc.new,
            all: doc.all,
        })
    }

    /// Fixed-width table, one row per class, then the group means.
    pub fn to_table(&self, names: &BTreeMap<ClassId, String>) -> String {
        let fmt = |v: Option<f64>| v.map_or("undef".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = String::new();
        let _ = writeln!(out, "{:<4} {:<16} {:>5} {:>8} {:>10}", "id", "class", "group", "IoU", "pixels");
        for (c, v) in &self.per_class {
            let group = if self.new_classes.contains(c) { "new" } else { "old" };
            let name = names.get(c).map_or("?", String::as_str);
            let px = self.pixels.get(c).copied().unwrap_or(0);
            let _ = writeln!(out, "{c:<4} {name:<16} {group:>5} {:>8} {px:>10}", fmt(*v));
        }
        let _ = writeln!(out, "mIoU old {}  new {}  all {}", fmt(self.old), fmt(self.new), fmt(self.all));
        out
    }
}
