//! Modality-aware views, cross-modal attention and high-order propagation.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::adversarial::generate_relations_block;
use crate::error::{Error, Result};
use crate::graph::NormAdjacency;
use crate::sparse::Csr;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub heads: usize,
    pub layers: usize,
    /// Weight of the normalized multi-modal embedding in the zero-order layer.
    pub eta: f64,
    /// Semantic neighbors per node.
    pub topk: usize,
    /// Epochs between semantic-neighbor refreshes.
    pub refresh_every: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            layers: 2,
            eta: 0.5,
            topk: 10,
            refresh_every: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "enc.heads {} must divide dimension {dim}",
                self.heads
            )));
        }
        if self.layers == 0 || self.topk == 0 || self.refresh_every == 0 {
            return Err(Error::InvalidArgument(
                "enc.layers, enc.topk and enc.refresh_every must be >= 1".into(),
            ));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidArgument(format!("enc.eta {} must be >= 0", self.eta)));
        }
        Ok(())
    }
}

/// Top-k counterpart ids per node, best first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticNeighborhood {
    /// Items per user.
    pub user: Vec<Vec<usize>>,
    /// Users per item.
    pub item: Vec<Vec<usize>>,
}

fn better(a: (f64, usize), b: (f64, usize)) -> core::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn merge_top(list: &mut Vec<(f64, usize)>, k: usize) {
    list.sort_by(|&a, &b| better(a, b));
    list.truncate(k);
}

impl SemanticNeighborhood {
    /// Row-wise and column-wise top-k of a dense relation matrix; ties go to
    /// the lower id.
    pub fn from_relations(rel: &Tensor, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("semantic neighbor count must be >= 1".into()));
        }
        let mut cols: Vec<Vec<(f64, usize)>> = alloc::vec![Vec::new(); rel.cols()];
        let user = Self::scan_block(rel, 0, k, &mut cols);
        let item = cols.into_iter().map(|c| c.into_iter().map(|(_, u)| u).collect()).collect();
        Ok(Self { user, item })
    }

    /// Same result as [`Self::from_relations`] on the cosine relation matrix
    /// of `f_u` and `f_i`, scanned in user blocks of `block_rows`.
    pub fn from_embeddings(f_u: &Tensor, f_i: &Tensor, k: usize, block_rows: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("semantic neighbor count must be >= 1".into()));
        }
        let block_rows = block_rows.max(1);
        let mut cols: Vec<Vec<(f64, usize)>> = alloc::vec![Vec::new(); f_i.rows()];
        let mut user = Vec::with_capacity(f_u.rows());
        let mut start = 0;
        while start < f_u.rows() {
            let end = (start + block_rows).min(f_u.rows());
            let block = generate_relations_block(f_u, f_i, start..end)?;
            user.extend(Self::scan_block(&block, start, k, &mut cols));
            start = end;
        }
        let item = cols.into_iter().map(|c| c.into_iter().map(|(_, u)| u).collect()).collect();
        Ok(Self { user, item })
    }

    fn scan_block(
        block: &Tensor,
        first_user: usize,
        k: usize,
        cols: &mut [Vec<(f64, usize)>],
    ) -> Vec<Vec<usize>> {
        let mut rows = Vec::with_capacity(block.rows());
        for r in 0..block.rows() {
            let mut scored: Vec<(f64, usize)> =
                block.row(r).iter().enumerate().map(|(i, &s)| (s, i)).collect();
            merge_top(&mut scored, k);
            rows.push(scored.into_iter().map(|(_, i)| i).collect());
            for (i, &s) in block.row(r).iter().enumerate() {
                cols[i].push((s, first_user + r));
            }
        }
        for c in cols.iter_mut() {
            merge_top(c, k);
        }
        rows
    }

    /// Aggregation matrices with entries `1/sqrt(|N|)`.
    pub fn adjacency(&self) -> Result<NormAdjacency> {
        let (nu, ni) = (self.user.len(), self.item.len());
        Ok(NormAdjacency {
            user: Arc::new(Csr::sym_row_normalized(nu, ni, &self.user)?),
            item: Arc::new(Csr::sym_row_normalized(ni, nu, &self.item)?),
        })
    }
}

/// `(e_u^m, e_i^m)`: id embeddings summed over semantic neighbors, scaled by `1/sqrt(|N|)`.
pub fn modality_view(
    tape: &mut Tape,
    neighbors: &NormAdjacency,
    user_emb: Var,
    item_emb: Var,
) -> Result<(Var, Var)> {
    let eu = tape.sparse_matmul(&neighbors.user, item_emb)?;
    let ei = tape.sparse_matmul(&neighbors.item, user_emb)?;
    Ok((eu, ei))
}

/// Multi-head attention across modality views of the same nodes.
///
/// `heads[h] = (W_q, W_k)`, each `d x d/H`. For target modality `m` and head
/// `h` the weights are a softmax over `m'` of the scaled query/key products;
/// the head output mixes the `h`-th coordinate slices of the views, and the
/// heads are concatenated back to `d` columns.
pub fn cross_modal_attention(tape: &mut Tape, views: &[Var], heads: &[(Var, Var)]) -> Result<Vec<Var>> {
    let Some(&first) = views.first() else {
        return Err(Error::InvalidArgument("attention needs at least one view".into()));
    };
    let d = tape.value(first).cols();
    let h_count = heads.len();
    if h_count == 0 || !d.is_multiple_of(h_count) {
        return Err(Error::InvalidArgument(format!(
            "{h_count} heads do not divide dimension {d}"
        )));
    }
    let dh = d / h_count;
    let scale = 1.0 / libm::sqrt(dh as f64);

    let mut queries = Vec::with_capacity(h_count);
    let mut keys = Vec::with_capacity(h_count);
    let mut slices = Vec::with_capacity(h_count);
    for (h, &(wq, wk)) in heads.iter().enumerate() {
        let mut q = Vec::with_capacity(views.len());
        let mut k = Vec::with_capacity(views.len());
        let mut s = Vec::with_capacity(views.len());
        for &v in views {
            q.push(tape.matmul(v, wq)?);
            k.push(tape.matmul(v, wk)?);
            s.push(tape.slice_cols(v, h * dh, (h + 1) * dh)?);
        }
        queries.push(q);
        keys.push(k);
        slices.push(s);
    }

    let mut out = Vec::with_capacity(views.len());
    for m in 0..views.len() {
        let mut head_out = Vec::with_capacity(h_count);
        for h in 0..h_count {
            let mut scores = Vec::with_capacity(views.len());
            for mp in 0..views.len() {
                let s = tape.row_dot(queries[h][m], keys[h][mp])?;
                scores.push(tape.scale(s, scale)?);
            }
            let scores = tape.concat_cols(&scores)?;
            let alpha = tape.row_softmax(scores)?;
            let mut acc: Option<Var> = None;
            for mp in 0..views.len() {
                let a = tape.slice_cols(alpha, mp, mp + 1)?;
                let term = tape.mul_col(slices[h][mp], a)?;
                acc = Some(match acc {
                    Some(x) => tape.add(x, term)?,
                    None => term,
                });
            }
            head_out.push(acc.expect("at least one view"));
        }
        out.push(if head_out.len() == 1 {
            head_out[0]
        } else {
            tape.concat_cols(&head_out)?
        });
    }
    Ok(out)
}

/// Mean over modalities.
pub fn fuse_modalities(tape: &mut Tape, parts: &[Var]) -> Result<Var> {
    tape.mean_pool(parts)
}

/// Layer-averaged bipartite propagation.
///
/// The zero-order layer is `E + eta * M / ||M||^2` per row. Layer `l+1` sets
/// users from items and items from users of layer `l`; the output is the
/// mean of layers `0..=L`.
#[allow(clippy::too_many_arguments)]
pub fn propagate_high_order(
    tape: &mut Tape,
    adj: &NormAdjacency,
    user_emb: Var,
    item_emb: Var,
    user_mm: Var,
    item_mm: Var,
    eta: f64,
    layers: usize,
) -> Result<(Var, Var)> {
    if layers == 0 {
        return Err(Error::InvalidArgument("at least one propagation layer".into()));
    }
    let zero = |tape: &mut Tape, e: Var, mm: Var| -> Result<Var> {
        if eta == 0.0 {
            return Ok(e);
        }
        let n = tape.inv_sq_norm_rows(mm)?;
        let n = tape.scale(n, eta)?;
        tape.add(e, n)
    };
    let mut u = zero(tape, user_emb, user_mm)?;
    let mut i = zero(tape, item_emb, item_mm)?;
    let (mut su, mut si) = (u, i);
    for _ in 0..layers {
        let nu = tape.sparse_matmul(&adj.user, i)?;
        let ni = tape.sparse_matmul(&adj.item, u)?;
        u = nu;
        i = ni;
        su = tape.add(su, u)?;
        si = tape.add(si, i)?;
    }
    let w = 1.0 / (layers + 1) as f64;
    Ok((tape.scale(su, w)?, tape.scale(si, w)?))
}
