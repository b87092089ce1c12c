//! Newline-delimited JSON metrics log.

use std::fs;
use std::io::Write;
use std::path::Path;

use mmssl_core::ranking::{Metrics, RankingReport};
use mmssl_core::trainer::EpochRecord;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLine {
    pub epoch: usize,
    pub l_bpr: f64,
    pub l_cl: f64,
    pub l_g: f64,
    pub l_d: f64,
    pub l_total: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub precision: f64,
}

impl From<&EpochRecord> for EpochLine {
    fn from(r: &EpochRecord) -> Self {
        Self {
            epoch: r.epoch,
            l_bpr: r.l_bpr,
            l_cl: r.l_cl,
            l_g: r.l_g,
            l_d: r.l_d,
            l_total: r.l_total,
            recall: r.recall,
            ndcg: r.ndcg,
            precision: r.precision,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketLine {
    pub label: String,
    pub users: usize,
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

/// Ranking metrics of one held-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalLine {
    pub split: String,
    pub k: usize,
    pub users: usize,
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
    pub buckets: Vec<BucketLine>,
}

impl EvalLine {
    pub fn from_report(split: &str, r: &RankingReport) -> Self {
        let Metrics {
            recall,
            precision,
            ndcg,
        } = r.mean;
        Self {
            split: split.into(),
            k: r.k,
            users: r.per_user.len(),
            recall,
            precision,
            ndcg,
            buckets: r
                .buckets
                .iter()
                .map(|b| BucketLine {
                    label: b.label.clone(),
                    users: b.users,
                    recall: b.metrics.recall,
                    precision: b.metrics.precision,
                    ndcg: b.metrics.ndcg,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogLine {
    Epoch(EpochLine),
    Eval(EvalLine),
}

pub fn to_line(entry: &LogLine) -> String {
    serde_json::to_string(entry).expect("log line serializes")
}

pub fn append(path: &Path, entry: &LogLine) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    writeln!(f, "{}", to_line(entry)).map_err(Error::io(path))
}

pub fn parse(text: &str, path: &Path) -> Result<Vec<LogLine>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn read(path: &Path) -> Result<Vec<LogLine>> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse(&text, path)
}
