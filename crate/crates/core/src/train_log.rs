//! Per-iteration training log in comma-separated text.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: &str = "step,epoch,iter,cls,loc,enc,sss,seg,total,lr";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub iter: usize,
    pub cls: f64,
    pub loc: f64,
    pub enc: f64,
    pub sss: f64,
    pub seg: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.rows {
            // `{:?}` keeps the shortest exact decimal form of each float.
            let _ = writeln!(
                out,
                "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.step, r.epoch, r.iter, r.cls, r.loc, r.enc, r.sss, r.seg, r.total, r.lr
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        match lines.next() {
            Some((_, h)) if h.trim() == HEADER => {}
            Some((i, _)) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected header `{HEADER}`"),
                })
            }
            None => return Ok(Self::default()),
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 10 {
                return Err(err(format!("expected 10 fields, found {}", fields.len())));
            }
            let int = |k: usize| fields[k].parse::<usize>().map_err(|_| err(format!("bad integer `{}`", fields[k])));
            let float = |k: usize| fields[k].parse::<f64>().map_err(|_| err(format!("bad number `{}`", fields[k])));
            rows.push(LogRow {
                step: int(0)?,
                epoch: int(1)?,
                iter: int(2)?,
                cls: float(3)?,
                loc: float(4)?,
                enc: float(5)?,
                sss: float(6)?,
                seg: float(7)?,
                total: float(8)?,
                lr: float(9)?,
            });
        }
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}
