//! Full-catalog ranking metrics with pessimistic ties.

use std::fmt;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::data::EvalCase;
use crate::embedding::PAD;
use crate::{Error, Result};

/// Anything that scores the whole catalog after a history.
pub trait Scorer: Sync {
    /// Item count including PAD.
    fn num_items(&self) -> usize;

    /// Flat `[cases × num_items]` scores; column 0 is ignored.
    fn score_cases(&self, cases: &[&EvalCase]) -> Result<Vec<f64>>;
}

/// 1-based rank of `target` in `scores` (indexed by item id, PAD at 0 is
/// skipped). Every other item scoring at least as high ranks ahead.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    if target == PAD || target >= scores.len() {
        return Err(Error::Data(format!(
            "target {target} is not among the {} real items",
            scores.len().saturating_sub(1)
        )));
    }
    let s = scores[target];
    let ahead = scores
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(i, &v)| i != target && v >= s)
        .count();
    Ok(1 + ahead)
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    1.0 / rank as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub mrr: f64,
    pub users: usize,
}

impl MetricsReport {
    /// Averages over `ranks` in the given order.
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
        Self {
            ks: ks.to_vec(),
            hr: ks.iter().map(|&k| mean(&|r| hr_at_k(r, k))).collect(),
            ndcg: ks.iter().map(|&k| mean(&|r| ndcg_at_k(r, k))).collect(),
            mrr: mean(&mrr),
            users: ranks.len(),
        }
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }

    pub fn to_json(&self) -> Value {
        let mut map = serde_json::Map::new();
        for (i, &k) in self.ks.iter().enumerate() {
            map.insert(format!("hr@{k}"), json!(self.hr[i]));
            map.insert(format!("ndcg@{k}"), json!(self.ndcg[i]));
        }
        map.insert("mrr".into(), json!(self.mrr));
        map.insert("users".into(), json!(self.users));
        Value::Object(map)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10}", "metric", "value")?;
        for (i, &k) in self.ks.iter().enumerate() {
            writeln!(f, "{:<10} {:>10.6}", format!("hr@{k}"), self.hr[i])?;
            writeln!(f, "{:<10} {:>10.6}", format!("ndcg@{k}"), self.ndcg[i])?;
        }
        writeln!(f, "{:<10} {:>10.6}", "mrr", self.mrr)?;
        write!(f, "{:<10} {:>10}", "users", self.users)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub filter_seen: bool,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![10, 50],
            filter_seen: false,
            batch_size: 256,
        }
    }
}

/// Ranks every case's target against the full catalog. Chunks are scored
/// in parallel and reduced in case order.
pub fn ranks(scorer: &dyn Scorer, cases: &[EvalCase], opts: &EvalOptions) -> Result<Vec<usize>> {
    if cases.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let items = scorer.num_items();
    let refs: Vec<&EvalCase> = cases.iter().collect();
    let chunks: Vec<Result<Vec<usize>>> = refs
        .par_chunks(opts.batch_size.max(1))
        .map(|chunk| {
            let mut scores = scorer.score_cases(chunk)?;
            chunk
                .iter()
                .zip(scores.chunks_mut(items))
                .map(|(case, row)| {
                    if opts.filter_seen {
                        for &i in &case.items {
                            if i != case.target && i < items {
                                row[i] = f64::NEG_INFINITY;
                            }
                        }
                    }
                    rank_of_target(row, case.target)
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(cases.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

pub fn evaluate(scorer: &dyn Scorer, cases: &[EvalCase], opts: &EvalOptions) -> Result<MetricsReport> {
    Ok(MetricsReport::from_ranks(&ranks(scorer, cases, opts)?, &opts.ks))
}
