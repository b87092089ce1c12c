//! All-rank top-K evaluation.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{sparsity_buckets, InteractionGraph};
use crate::tensor::{dot, Tensor};

/// Items ordered by descending score, lower id first on ties, with
/// `exclude` (sorted or not) removed.
pub fn rank_all(scores: &[f64], exclude: &[usize]) -> Vec<usize> {
    let mut skip = alloc::vec![false; scores.len()];
    for &i in exclude {
        if i < skip.len() {
            skip[i] = true;
        }
    }
    let mut items: Vec<usize> = (0..scores.len()).filter(|&i| !skip[i]).collect();
    items.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    items
}

/// Like [`rank_all`] but keeps only the first `k`.
pub fn rank_top_k(scores: &[f64], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut skip = alloc::vec![false; scores.len()];
    for &i in exclude {
        if i < skip.len() {
            skip[i] = true;
        }
    }
    let mut items: Vec<usize> = (0..scores.len()).filter(|&i| !skip[i]).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if items.len() > k && k > 0 {
        items.select_nth_unstable_by(k - 1, cmp);
        items.truncate(k);
    }
    items.sort_by(cmp);
    items.truncate(k);
    items
}

fn hits(ranked: &[usize], relevant: &[usize], k: usize) -> usize {
    ranked.iter().take(k).filter(|i| relevant.contains(i)).count()
}

/// `|top-k hits| / |relevant|`; `None` when nothing is relevant.
pub fn recall_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    Some(hits(ranked, relevant, k) as f64 / relevant.len() as f64)
}

/// `|top-k hits| / k`.
pub fn precision_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    Some(hits(ranked, relevant, k) as f64 / k as f64)
}

/// Binary-relevance NDCG with `log2(rank + 1)` discounts.
pub fn ndcg_at_k(ranked: &[usize], relevant: &[usize], k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| 1.0 / libm::log2(r as f64 + 2.0))
        .sum();
    let idcg: f64 = (0..relevant.len().min(k))
        .map(|r| 1.0 / libm::log2(r as f64 + 2.0))
        .sum();
    Some(dcg / idcg)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

impl Metrics {
    fn mean(values: &[Metrics]) -> Metrics {
        if values.is_empty() {
            return Metrics::default();
        }
        let n = values.len() as f64;
        Metrics {
            recall: values.iter().map(|m| m.recall).sum::<f64>() / n,
            precision: values.iter().map(|m| m.precision).sum::<f64>() / n,
            ndcg: values.iter().map(|m| m.ndcg).sum::<f64>() / n,
        }
    }
}

/// Metrics of one user against `relevant`, or `None` when that set is empty.
pub fn user_metrics(
    h_u: &[f64],
    h_items: &Tensor,
    exclude: &[usize],
    relevant: &[usize],
    k: usize,
) -> Option<Metrics> {
    if relevant.is_empty() {
        return None;
    }
    let scores: Vec<f64> = (0..h_items.rows()).map(|i| dot(h_u, h_items.row(i))).collect();
    let top = rank_top_k(&scores, exclude, k);
    Some(Metrics {
        recall: recall_at_k(&top, relevant, k)?,
        precision: precision_at_k(&top, relevant, k)?,
        ndcg: ndcg_at_k(&top, relevant, k)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketMetrics {
    pub label: String,
    pub users: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingReport {
    pub k: usize,
    /// `(user, metrics)` for every evaluated user, by user id.
    pub per_user: Vec<(usize, Metrics)>,
    pub mean: Metrics,
    pub buckets: Vec<BucketMetrics>,
}

impl RankingReport {
    /// Assemble from per-user results; buckets group evaluated users by
    /// `degrees[u]`.
    pub fn assemble(
        k: usize,
        mut per_user: Vec<(usize, Metrics)>,
        degrees: &[usize],
        boundaries: &[usize],
    ) -> Result<Self> {
        per_user.sort_by_key(|&(u, _)| u);
        let values: Vec<Metrics> = per_user.iter().map(|&(_, m)| m).collect();
        let mean = Metrics::mean(&values);
        let mut buckets = Vec::new();
        if !boundaries.is_empty() {
            let evaluated: Vec<usize> = per_user.iter().map(|&(u, _)| degrees[u]).collect();
            for b in sparsity_buckets(&evaluated, boundaries)? {
                let ms: Vec<Metrics> = b.users.iter().map(|&pos| per_user[pos].1).collect();
                buckets.push(BucketMetrics {
                    label: b.label,
                    users: ms.len(),
                    metrics: Metrics::mean(&ms),
                });
            }
        }
        Ok(Self {
            k,
            per_user,
            mean,
            buckets,
        })
    }
}

/// Relevant sets per user from an edge list.
pub fn relevant_sets(num_users: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut out = alloc::vec![Vec::new(); num_users];
    for &(u, i) in edges {
        out[u].push(i);
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    out
}

/// Score every item for every user with a held-out relevant item, masking
/// each user's `train` items.
pub fn evaluate(
    h_u: &Tensor,
    h_i: &Tensor,
    train: &InteractionGraph,
    held_out: &[(usize, usize)],
    k: usize,
    boundaries: &[usize],
) -> Result<RankingReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if held_out.is_empty() {
        return Err(Error::InvalidArgument("no held-out interactions to evaluate".into()));
    }
    let relevant = relevant_sets(h_u.rows(), held_out);
    let per_user = (0..h_u.rows())
        .filter_map(|u| {
            user_metrics(h_u.row(u), h_i, train.user_items(u), &relevant[u], k).map(|m| (u, m))
        })
        .collect();
    RankingReport::assemble(k, per_user, &train.user_degrees(), boundaries)
}
