//! Text and JSON rendering of metric logs.

use std::fmt::Write as _;

use serde_json::json;

use crate::error::{Error, Result};
use crate::log::{EpochLine, EvalLine, LogLine};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Text,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Format::Text),
            "json" => Ok(Format::Json),
            _ => Err(Error::Invalid(format!("unknown format {s:?}; expected text or json"))),
        }
    }
}

pub fn epoch_table(lines: &[EpochLine], k: usize) -> String {
    let mut s = String::new();
    let r = format!("R@{k}");
    let n = format!("N@{k}");
    let p = format!("P@{k}");
    writeln!(
        s,
        "{:>5}  {:>9} {:>9} {:>9} {:>9} {:>9}  {:>7} {:>7} {:>7}",
        "epoch", "l_bpr", "l_cl", "l_g", "l_d", "l_total", r, n, p
    )
    .unwrap();
    for e in lines {
        writeln!(
            s,
            "{:>5}  {:>9.5} {:>9.5} {:>9.5} {:>9.5} {:>9.5}  {:>7.4} {:>7.4} {:>7.4}",
            e.epoch, e.l_bpr, e.l_cl, e.l_g, e.l_d, e.l_total, e.recall, e.ndcg, e.precision
        )
        .unwrap();
    }
    s
}

pub fn bucket_table(e: &EvalLine) -> String {
    let mut s = String::new();
    writeln!(s, "{} split, K={}, {} users", e.split, e.k, e.users).unwrap();
    let width = e
        .buckets
        .iter()
        .map(|b| b.label.len())
        .chain([6])
        .max()
        .unwrap_or(6);
    writeln!(
        s,
        "{:<width$}  {:>6}  {:>8}  {:>9}  {:>8}",
        "degree", "users", "recall", "precision", "ndcg"
    )
    .unwrap();
    for b in &e.buckets {
        writeln!(
            s,
            "{:<width$}  {:>6}  {:>8.4}  {:>9.4}  {:>8.4}",
            b.label, b.users, b.recall, b.precision, b.ndcg
        )
        .unwrap();
    }
    writeln!(
        s,
        "{:<width$}  {:>6}  {:>8.4}  {:>9.4}  {:>8.4}",
        "all", e.users, e.recall, e.precision, e.ndcg
    )
    .unwrap();
    s
}

pub fn render(lines: &[LogLine], format: Format) -> String {
    let epochs: Vec<EpochLine> = lines
        .iter()
        .filter_map(|l| match l {
            LogLine::Epoch(e) => Some(*e),
            _ => None,
        })
        .collect();
    let evals: Vec<&EvalLine> = lines
        .iter()
        .filter_map(|l| match l {
            LogLine::Eval(e) => Some(e),
            _ => None,
        })
        .collect();
    match format {
        Format::Json => {
            let v = json!({ "epochs": epochs, "evaluations": evals });
            serde_json::to_string_pretty(&v).expect("report serializes") + "\n"
        }
        Format::Text => {
            let k = evals.first().map_or(20, |e| e.k);
            let mut out = String::new();
            if !epochs.is_empty() {
                out.push_str(&epoch_table(&epochs, k));
            }
            for e in evals {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&bucket_table(e));
            }
            out
        }
    }
}
