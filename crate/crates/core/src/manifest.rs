//! Dataset manifests: one record per line, tab-separated
//! `image<TAB>mask<TAB>labels`, with `-` for an absent mask or label list.
//! Labels are comma-separated class ids. `#` starts a comment line. Relative
//! paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::taxonomy::{ClassId, SampleRecord};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub labels: Option<BTreeSet<ClassId>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn parse_labels(field: &str, line: usize) -> Result<BTreeSet<ClassId>> {
    if field.is_empty() {
        return Ok(BTreeSet::new());
    }
    field
        .split(',')
        .map(|s| {
            s.trim().parse::<ClassId>().map_err(|_| Error::Parse {
                line,
                msg: format!("bad class id `{s}`"),
            })
        })
        .collect()
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            if fields[0].is_empty() || fields[0] == "-" {
                return Err(Error::Parse {
                    line,
                    msg: "missing image path".into(),
                });
            }
            let mask = (fields[1] != "-").then(|| PathBuf::from(fields[1]));
            if fields[1].is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: "empty mask field; use `-` for none".into(),
                });
            }
            let labels = match fields[2] {
                "-" => None,
                other => Some(parse_labels(other, line)?),
            };
            entries.push(ManifestEntry {
                image: PathBuf::from(fields[0]),
                mask,
                labels,
            });
        }
        Ok(Self { entries })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# image\tmask\tlabels\n");
        for e in &self.entries {
            let mask = e.mask.as_ref().map_or("-".to_string(), |p| p.display().to_string());
            let labels = e.labels.as_ref().map_or("-".to_string(), |l| {
                l.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            });
            let _ = writeln!(out, "{}\t{mask}\t{labels}", e.image.display());
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Reads every image and mask, resolving relative paths against `root`.
    /// Masks become both training and evaluation ground truth.
    pub fn load_records(&self, root: &Path) -> Result<Vec<SampleRecord>> {
        self.entries
            .iter()
            .map(|e| {
                let image = RgbImage::load(&root.join(&e.image))?;
                let mask = e.mask.as_ref().map(|m| Mask::load(&root.join(m))).transpose()?;
                if let Some(m) = &mask {
                    if (m.height(), m.width()) != (image.height(), image.width()) {
                        return Err(Error::Data(format!("{}: mask and image sizes differ", e.image.display())));
                    }
                }
                Ok(SampleRecord {
                    image,
                    dense_mask: mask.clone(),
                    weak_labels: e.labels.clone(),
                    eval_mask: mask,
                })
            })
            .collect()
    }
}

/// Loads a manifest file and its records.
pub fn load_dataset(path: &Path) -> Result<Vec<SampleRecord>> {
    let root = path.parent().unwrap_or_else(|| Path::new("."));
    Manifest::load(path)?.load_records(root)
}
