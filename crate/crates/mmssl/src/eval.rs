//! Multi-threaded all-rank evaluation.

use std::num::NonZeroUsize;
use std::thread;

use mmssl_core::graph::InteractionGraph;
use mmssl_core::ranking::{relevant_sets, user_metrics, Metrics, RankingReport};
use mmssl_core::Tensor;

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "MMSSL_THREADS";

/// Worker count: the available parallelism, capped by `cap` when it parses
/// as a positive integer.
pub fn thread_count(cap: Option<&str>) -> Result<usize> {
    let avail = thread::available_parallelism().map_or(1, NonZeroUsize::get);
    match cap {
        None => Ok(avail),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n.min(avail)),
            _ => Err(Error::Invalid(format!("{THREADS_ENV}={s:?} must be a positive integer"))),
        },
    }
}

/// Same result as the sequential evaluator, with users split into
/// contiguous chunks across `threads` workers.
pub fn evaluate_parallel(
    h_u: &Tensor,
    h_i: &Tensor,
    train: &InteractionGraph,
    held_out: &[(usize, usize)],
    k: usize,
    boundaries: &[usize],
    threads: usize,
) -> Result<RankingReport> {
    if k == 0 {
        return Err(Error::Invalid("k must be >= 1".into()));
    }
    if held_out.is_empty() {
        return Err(Error::Invalid("no held-out interactions to evaluate".into()));
    }
    let n = h_u.rows();
    let relevant = relevant_sets(n, held_out);
    let chunk = n.div_ceil(threads.max(1)).max(1);
    let per_user: Vec<(usize, Metrics)> = thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| {
                let relevant = &relevant;
                s.spawn(move || {
                    (start..(start + chunk).min(n))
                        .filter_map(|u| {
                            user_metrics(h_u.row(u), h_i, train.user_items(u), &relevant[u], k)
                                .map(|m| (u, m))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    Ok(RankingReport::assemble(k, per_user, &train.user_degrees(), boundaries)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmssl_core::ranking::evaluate;
    use rand::Rng as _;

    #[test]
    fn matches_sequential() {
        let mut rng = mmssl_core::seeded_rng(4);
        let (nu, ni, d) = (23, 17, 5);
        let rand = |r, c, rng: &mut mmssl_core::Rng| {
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>() - 0.5).collect()).unwrap()
        };
        let h_u = rand(nu, d, &mut rng);
        let h_i = rand(ni, d, &mut rng);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                let x: f64 = rng.random();
                if x < 0.2 {
                    train.push((u, i));
                } else if x < 0.3 {
                    test.push((u, i));
                }
            }
        }
        let g = InteractionGraph::from_edges(nu, ni, &train).unwrap();
        let want = evaluate(&h_u, &h_i, &g, &test, 5, &[0, 2, 4]).unwrap();
        for threads in [1, 2, 3, 8, 64] {
            let got = evaluate_parallel(&h_u, &h_i, &g, &test, 5, &[0, 2, 4], threads).unwrap();
            assert_eq!(got, want, "threads = {threads}");
        }
    }

    #[test]
    fn thread_cap() {
        assert_eq!(thread_count(Some("1")).unwrap(), 1);
        assert!(thread_count(Some("0")).is_err());
        assert!(thread_count(Some("many")).is_err());
        assert!(thread_count(None).unwrap() >= 1);
    }
}
