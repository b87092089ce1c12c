//! User-item interaction graphs and everything derived from them: splits,
//! BPR triplets, normalized adjacency, sparsity buckets and synthetic data
//! with planted preferences.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sparse::Csr;
use crate::tensor::Tensor;
use crate::Rng;

/// Sparse bipartite user-item graph. Adjacency lists are sorted, so edge
/// membership is a binary search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    user_adj: Vec<Vec<usize>>,
    item_adj: Vec<Vec<usize>>,
    num_edges: usize,
}

impl InteractionGraph {
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut user_adj = vec![Vec::new(); num_users];
        let mut item_adj = vec![Vec::new(); num_items];
        for &(u, i) in edges {
            if u >= num_users {
                return Err(Error::OutOfRange {
                    kind: "user",
                    id: u,
                    count: num_users,
                });
            }
            if i >= num_items {
                return Err(Error::OutOfRange {
                    kind: "item",
                    id: i,
                    count: num_items,
                });
            }
            user_adj[u].push(i);
            item_adj[i].push(u);
        }
        for (u, items) in user_adj.iter_mut().enumerate() {
            items.sort_unstable();
            if let Some(w) = items.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::DuplicateEdge { user: u, item: w[0] });
            }
        }
        for users in &mut item_adj {
            users.sort_unstable();
        }
        Ok(Self {
            num_users,
            num_items,
            user_adj,
            item_adj,
            num_edges: edges.len(),
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// Items of user `u` (N_u), sorted.
    pub fn user_items(&self, u: usize) -> &[usize] {
        &self.user_adj[u]
    }

    /// Users of item `i` (N_i), sorted.
    pub fn item_users(&self, i: usize) -> &[usize] {
        &self.item_adj[i]
    }

    pub fn user_degrees(&self) -> Vec<usize> {
        self.user_adj.iter().map(Vec::len).collect()
    }

    pub fn contains(&self, u: usize, i: usize) -> bool {
        u < self.num_users && self.user_adj[u].binary_search(&i).is_ok()
    }

    /// All edges ordered by `(user, item)`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.user_adj
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u, i)))
    }

    /// Fraction of the user-item matrix that is unobserved.
    pub fn sparsity(&self) -> f64 {
        sparsity(self.num_users, self.num_items, self.num_edges)
    }

    /// Same node sets restricted to `edges`.
    pub fn subgraph(&self, edges: &[(usize, usize)]) -> Result<Self> {
        Self::from_edges(self.num_users, self.num_items, edges)
    }

    /// Dense 0/1 row of the interaction matrix for user `u`.
    pub fn dense_row(&self, u: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.num_items];
        for &i in &self.user_adj[u] {
            row[i] = 1.0;
        }
        row
    }
}

/// Unobserved fraction of a `users x items` matrix with `edges` entries.
pub fn sparsity(users: usize, items: usize, edges: usize) -> f64 {
    let cells = users as f64 * items as f64;
    if cells == 0.0 {
        return 1.0;
    }
    1.0 - edges as f64 / cells
}

/// Content channel of an item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visual,
    Acoustic,
    Textual,
    Other,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Acoustic => "acoustic",
            Modality::Textual => "textual",
            Modality::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "visual" | "v" => Ok(Modality::Visual),
            "acoustic" | "a" => Ok(Modality::Acoustic),
            "textual" | "t" => Ok(Modality::Textual),
            "other" => Ok(Modality::Other),
            _ => Err(Error::InvalidArgument(format!("unknown modality {s:?}"))),
        }
    }

    /// Tag for the `k`-th synthetic modality.
    pub fn nth(k: usize) -> Self {
        [Modality::Visual, Modality::Textual, Modality::Acoustic]
            .get(k)
            .copied()
            .unwrap_or(Modality::Other)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Raw per-item features of one modality (`|I| x d_m`).
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatureTable {
    pub modality: Modality,
    pub features: Tensor,
}

impl ModalityFeatureTable {
    pub fn new(modality: Modality, features: Tensor) -> Result<Self> {
        if !features.is_finite() {
            return Err(Error::NonFinite { op: "modality features" });
        }
        Ok(Self { modality, features })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_rows(&self) -> usize {
        self.features.rows()
    }
}

/// Disjoint train/validation/test edge lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<(usize, usize)>,
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    /// Users without any edge.
    pub cold_users: Vec<usize>,
    pub seed: u64,
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Hamilton (largest remainder) apportionment of `n` into three parts.
fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let ideal = ratios.map(|r| r * n as f64);
    let mut counts = ideal.map(|x| libm::floor(x) as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    // stable: ties keep train, val, test order
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - libm::floor(ideal[a]);
        let fb = ideal[b] - libm::floor(ideal[b]);
        fb.partial_cmp(&fa).unwrap_or(core::cmp::Ordering::Equal)
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Per-user stratified split. Each user's edges are shuffled with a stream
/// derived from `seed` and apportioned by largest remainder; a user whose
/// share of train edges would be zero keeps one edge in train.
pub fn split_edges(graph: &InteractionGraph, ratios: [f64; 3], seed: u64) -> Result<DataSplit> {
    if ratios.iter().any(|&r| !(r > 0.0)) || libm::fabs(ratios.iter().sum::<f64>() - 1.0) > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be positive and sum to 1"
        )));
    }
    let mut rng = crate::seeded_rng(seed);
    let mut split = DataSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        cold_users: Vec::new(),
        seed,
    };
    for u in 0..graph.num_users() {
        let mut items = graph.user_items(u).to_vec();
        if items.is_empty() {
            split.cold_users.push(u);
            continue;
        }
        items.shuffle(&mut rng);
        let mut counts = apportion(items.len(), ratios);
        if counts[0] == 0 {
            let donor = if counts[1] >= counts[2] { 1 } else { 2 };
            counts[donor] -= 1;
            counts[0] += 1;
        }
        let (tr, rest) = items.split_at(counts[0]);
        let (va, te) = rest.split_at(counts[1]);
        split.train.extend(tr.iter().map(|&i| (u, i)));
        split.val.extend(va.iter().map(|&i| (u, i)));
        split.test.extend(te.iter().map(|&i| (u, i)));
    }
    Ok(split)
}

/// `(user, positive, negative)` triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletBatch {
    pub triples: Vec<(usize, usize, usize)>,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn users(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.0).collect()
    }

    pub fn positives(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.1).collect()
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.triples.iter().map(|t| t.2).collect()
    }
}

/// Draw `batch` triples: a uniformly chosen train edge and a uniformly drawn
/// item that the user never interacted with (rejection sampling against the
/// full graph).
pub fn sample_bpr_triplets(
    split: &DataSplit,
    graph: &InteractionGraph,
    batch: usize,
    rng: &mut Rng,
) -> Result<TripletBatch> {
    if split.train.is_empty() {
        return Err(Error::NoTrainEdges);
    }
    let n_items = graph.num_items();
    let mut triples = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (u, pos) = split.train[rng.random_range(0..split.train.len())];
        if graph.user_items(u).len() >= n_items {
            return Err(Error::UnsatisfiableNegative { user: u });
        }
        let neg = loop {
            let cand = rng.random_range(0..n_items);
            if !graph.contains(u, cand) {
                break cand;
            }
        };
        triples.push((u, pos, neg));
    }
    Ok(TripletBatch { triples })
}

/// Degree-normalized adjacency in both propagation directions.
#[derive(Clone, Debug, PartialEq)]
pub struct NormAdjacency {
    /// `|U| x |I|`, entries `1/sqrt(|N_u|)`.
    pub user: Arc<Csr>,
    /// `|I| x |U|`, entries `1/sqrt(|N_i|)`.
    pub item: Arc<Csr>,
}

pub fn build_norm_adjacency(graph: &InteractionGraph) -> Result<NormAdjacency> {
    let user = Csr::sym_row_normalized(graph.num_users(), graph.num_items(), &graph.user_adj)?;
    let item = Csr::sym_row_normalized(graph.num_items(), graph.num_users(), &graph.item_adj)?;
    Ok(NormAdjacency {
        user: Arc::new(user),
        item: Arc::new(item),
    })
}

/// Users grouped by degree range.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub label: String,
    pub lower: usize,
    /// Exclusive; `None` for the open-ended overflow bucket.
    pub upper: Option<usize>,
    pub users: Vec<usize>,
}

/// Partition users by degree into `[b_k, b_{k+1})` ranges. Degrees below the
/// first boundary or at/above the last land in extra edge buckets, which are
/// only emitted when non-empty, so the result always partitions all users.
pub fn sparsity_buckets(degrees: &[usize], boundaries: &[usize]) -> Result<Vec<Bucket>> {
    if boundaries.is_empty() {
        return Err(Error::InvalidArgument("empty bucket boundaries".into()));
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "bucket boundaries {boundaries:?} must be strictly ascending"
        )));
    }
    let first = boundaries[0];
    let last = *boundaries.last().unwrap();
    let mut under = Bucket {
        label: format!("[0,{first})"),
        lower: 0,
        upper: Some(first),
        users: Vec::new(),
    };
    let mut buckets: Vec<Bucket> = boundaries
        .windows(2)
        .map(|w| Bucket {
            label: format!("[{},{})", w[0], w[1]),
            lower: w[0],
            upper: Some(w[1]),
            users: Vec::new(),
        })
        .collect();
    let mut over = Bucket {
        label: format!("[{last},inf)"),
        lower: last,
        upper: None,
        users: Vec::new(),
    };
    for (u, &deg) in degrees.iter().enumerate() {
        if deg < first {
            under.users.push(u);
        } else if deg >= last {
            over.users.push(u);
        } else {
            let k = boundaries.partition_point(|&b| b <= deg) - 1;
            buckets[k].users.push(u);
        }
    }
    let mut out = Vec::with_capacity(buckets.len() + 2);
    if !under.users.is_empty() {
        out.push(under);
    }
    out.extend(buckets);
    if !over.users.is_empty() {
        out.push(over);
    }
    Ok(out)
}

/// Default degree boundaries for sparsity reports.
pub const DEFAULT_BUCKETS: [usize; 6] = [0, 4, 6, 9, 13, 100];

/// How item features are derived from latent item vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    /// Gaussian map with entries of variance `1/latent_dim`.
    Random,
    /// Identity map; requires `d_m == latent_dim`.
    Identity,
}

/// Parameters of the planted-preference generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub modality_dims: Vec<usize>,
    pub latent_dim: usize,
    pub interactions_per_user: usize,
    pub noise: f64,
    pub seed: u64,
    pub projection: Projection,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_users: 50,
            num_items: 40,
            modality_dims: vec![32, 16],
            latent_dim: 8,
            interactions_per_user: 8,
            noise: 0.1,
            seed: 7,
            projection: Projection::Random,
        }
    }
}

impl SyntheticSpec {
    pub fn num_modalities(&self) -> usize {
        self.modality_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_users == 0 || self.num_items == 0 || self.latent_dim == 0 {
            return bad("counts must be positive".into());
        }
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return bad("need at least one modality with positive dimension".into());
        }
        if self.interactions_per_user == 0 || self.interactions_per_user > self.num_items {
            return bad(format!(
                "interactions per user {} must be in 1..={}",
                self.interactions_per_user, self.num_items
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0,1]", self.noise));
        }
        if self.projection == Projection::Identity
            && self.modality_dims.iter().any(|&d| d != self.latent_dim)
        {
            return bad("identity projection needs d_m == latent_dim".into());
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub graph: InteractionGraph,
    pub features: Vec<ModalityFeatureTable>,
    pub user_latent: Tensor,
    pub item_latent: Tensor,
    /// `z_u . z_i` for every pair.
    pub planted: Tensor,
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("gaussian shape")
}

/// Planted-preference data. Users and items get latent Gaussian vectors;
/// modality features are a linear map of the item vector plus `noise`
/// Gaussian noise; each user draws `interactions_per_user` distinct items
/// with probability proportional to `softmax(z_u . z_i)` (Gumbel top-k).
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<SyntheticData> {
    spec.validate()?;
    let (nu, ni, k) = (spec.num_users, spec.num_items, spec.latent_dim);
    let user_latent = gaussian(nu, k, 1.0, rng);
    let item_latent = gaussian(ni, k, 1.0, rng);
    let planted = user_latent.matmul_t(&item_latent)?;

    let mut features = Vec::with_capacity(spec.num_modalities());
    for (m, &dm) in spec.modality_dims.iter().enumerate() {
        let map = match spec.projection {
            Projection::Identity => {
                let mut t = Tensor::zeros(k, dm);
                for j in 0..k {
                    t.set(j, j, 1.0);
                }
                t
            }
            Projection::Random => gaussian(k, dm, 1.0 / libm::sqrt(k as f64), rng),
        };
        let mut feats = item_latent.matmul(&map)?;
        if spec.noise > 0.0 {
            feats.add_assign(&gaussian(ni, dm, spec.noise, rng));
        }
        features.push(ModalityFeatureTable::new(Modality::nth(m), feats)?);
    }

    let mut edges = Vec::with_capacity(nu * spec.interactions_per_user);
    for u in 0..nu {
        let mut keyed: Vec<(f64, usize)> = (0..ni)
            .map(|i| {
                let g = gumbel(uniform_open(rng));
                (planted.get(u, i) + g, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        edges.extend(keyed[..spec.interactions_per_user].iter().map(|&(_, i)| (u, i)));
    }
    let graph = InteractionGraph::from_edges(nu, ni, &edges)?;
    Ok(SyntheticData {
        graph,
        features,
        user_latent,
        item_latent,
        planted,
    })
}

/// Uniform draw from the open interval (0, 1).
pub fn uniform_open(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard Gumbel transform of a uniform draw: `-log(-log(u))`.
#[inline]
pub fn gumbel(u: f64) -> f64 {
    -libm::log(-libm::log(u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn toy() -> InteractionGraph {
        InteractionGraph::from_edges(2, 3, &[(0, 0), (0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn counts_and_views() {
        let g = toy();
        assert_eq!((g.num_users(), g.num_items(), g.num_edges()), (2, 3, 3));
        assert_eq!(g.item_users(2), &[1]);
        assert!(g.contains(0, 1) && !g.contains(1, 1));
        let su: usize = (0..2).map(|u| g.user_items(u).len()).sum();
        let si: usize = (0..3).map(|i| g.item_users(i).len()).sum();
        assert_eq!((su, si), (3, 3));
    }

    #[test]
    fn rejects_duplicates_and_range() {
        assert_eq!(
            InteractionGraph::from_edges(2, 2, &[(0, 1), (0, 1)]),
            Err(Error::DuplicateEdge { user: 0, item: 1 })
        );
        assert!(matches!(
            InteractionGraph::from_edges(2, 2, &[(0, 2)]),
            Err(Error::OutOfRange { kind: "item", .. })
        ));
    }

    #[test]
    fn tiktok_sparsity() {
        let s = sparsity(9319, 6710, 59541);
        assert!((s * 100.0 - 99.904).abs() < 1e-3);
        let g = InteractionGraph::from_edges(2, 2, &[(0, 1)]).unwrap();
        assert_eq!(g.sparsity(), 0.75);
    }

    #[test]
    fn split_single_user_ten_edges() {
        let edges: Vec<_> = (0..10).map(|i| (0, i)).collect();
        let g = InteractionGraph::from_edges(1, 10, &edges).unwrap();
        let s = split_edges(&g, DEFAULT_SPLIT, 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let all: HashSet<_> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        assert_eq!(all.len(), 10);
        assert_eq!(s, split_edges(&g, DEFAULT_SPLIT, 7).unwrap());
    }

    #[test]
    fn split_keeps_single_edge_in_train_and_flags_cold() {
        let g = InteractionGraph::from_edges(3, 4, &[(0, 2), (1, 0), (1, 1), (1, 3)]).unwrap();
        let s = split_edges(&g, DEFAULT_SPLIT, 1).unwrap();
        assert!(s.train.contains(&(0, 2)));
        assert!(s.train.iter().any(|e| e.0 == 1));
        assert_eq!(s.cold_users, vec![2]);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let g = toy();
        assert!(split_edges(&g, [0.8, 0.1, 0.2], 0).is_err());
        assert!(split_edges(&g, [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn triplets_respect_contract() {
        let g = InteractionGraph::from_edges(2, 3, &[(0, 0), (1, 1)]).unwrap();
        let s = split_edges(&g, DEFAULT_SPLIT, 0).unwrap();
        let mut rng = crate::seeded_rng(3);
        let b = sample_bpr_triplets(&s, &g, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 4);
        for &(u, p, n) in &b.triples {
            assert!(g.contains(u, p));
            assert!(!g.contains(u, n));
        }
        let mut rng2 = crate::seeded_rng(3);
        assert_eq!(b, sample_bpr_triplets(&s, &g, 4, &mut rng2).unwrap());
    }

    #[test]
    fn triplets_unsatisfiable() {
        let g = InteractionGraph::from_edges(1, 2, &[(0, 0), (0, 1)]).unwrap();
        let s = DataSplit {
            train: vec![(0, 0), (0, 1)],
            val: vec![],
            test: vec![],
            cold_users: vec![],
            seed: 0,
        };
        let mut rng = crate::seeded_rng(0);
        assert_eq!(
            sample_bpr_triplets(&s, &g, 1, &mut rng),
            Err(Error::UnsatisfiableNegative { user: 0 })
        );
    }

    #[test]
    fn norm_adjacency_entries() {
        let g = InteractionGraph::from_edges(2, 5, &[(0, 0), (0, 1), (0, 2), (0, 4)]).unwrap();
        let a = build_norm_adjacency(&g).unwrap().user.to_dense();
        assert_eq!(a.row(0), &[0.5, 0.5, 0.5, 0.0, 0.5]);
        assert_eq!(a.row(1), &[0.0; 5]);
    }

    #[test]
    fn norm_adjacency_matches_dense_construction() {
        let edges = [(0, 0), (0, 2), (1, 1), (2, 0), (2, 1), (2, 2)];
        let g = InteractionGraph::from_edges(3, 3, &edges).unwrap();
        let adj = build_norm_adjacency(&g).unwrap();
        let mut a = [[0.0f64; 3]; 3];
        for &(u, i) in &edges {
            a[u][i] = 1.0;
        }
        for u in 0..3 {
            let du: f64 = a[u].iter().sum();
            for i in 0..3 {
                let di: f64 = (0..3).map(|v| a[v][i]).sum();
                assert_eq!(adj.user.to_dense().get(u, i), a[u][i] / du.sqrt());
                assert_eq!(adj.item.to_dense().get(i, u), a[u][i] / di.sqrt());
            }
        }
    }

    #[test]
    fn bucket_examples() {
        let b = sparsity_buckets(&[2, 5, 7], &DEFAULT_BUCKETS).unwrap();
        let labels: Vec<_> = b.iter().map(|b| b.label.as_str()).collect();
        assert_eq!(labels, ["[0,4)", "[4,6)", "[6,9)", "[9,13)", "[13,100)"]);
        let sizes: Vec<_> = b.iter().map(|b| b.users.len()).collect();
        assert_eq!(sizes, [1, 1, 1, 0, 0]);
        let z = sparsity_buckets(&[0, 0, 0], &DEFAULT_BUCKETS).unwrap();
        assert_eq!(z[0].users, vec![0, 1, 2]);
        assert!(sparsity_buckets(&[1], &[]).is_err());
        assert!(sparsity_buckets(&[1], &[3, 3]).is_err());
        let over = sparsity_buckets(&[150, 1], &DEFAULT_BUCKETS).unwrap();
        assert_eq!(over.last().unwrap().label, "[100,inf)");
    }

    #[test]
    fn synthetic_identity_and_counts() {
        let spec = SyntheticSpec {
            num_users: 5,
            num_items: 6,
            modality_dims: vec![3],
            latent_dim: 3,
            interactions_per_user: 2,
            noise: 0.0,
            seed: 1,
            projection: Projection::Identity,
        };
        let mut rng = crate::seeded_rng(spec.seed);
        let d = generate_synthetic(&spec, &mut rng).unwrap();
        assert_eq!(d.features[0].features, d.item_latent);

        let spec = SyntheticSpec::default();
        let mut a = crate::seeded_rng(9);
        let mut b = crate::seeded_rng(9);
        let x = generate_synthetic(&spec, &mut a).unwrap();
        assert_eq!(x.graph.num_edges(), 400);
        assert_eq!(x, generate_synthetic(&spec, &mut b).unwrap());
    }

    #[test]
    fn gumbel_of_inverse_e_is_zero() {
        assert_eq!(gumbel(libm::exp(-1.0)), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn graph_strategy() -> impl Strategy<Value = InteractionGraph> {
            (1usize..8, 2usize..8).prop_flat_map(|(nu, ni)| {
                proptest::collection::btree_set((0..nu, 0..ni), 0..(nu * ni))
                    .prop_map(move |set| {
                        let edges: Vec<_> = set.into_iter().collect();
                        InteractionGraph::from_edges(nu, ni, &edges).unwrap()
                    })
            })
        }

        proptest! {
            #[test]
            fn degree_sums_agree(g in graph_strategy()) {
                let su: usize = (0..g.num_users()).map(|u| g.user_items(u).len()).sum();
                let si: usize = (0..g.num_items()).map(|i| g.item_users(i).len()).sum();
                prop_assert_eq!(su, g.num_edges());
                prop_assert_eq!(si, g.num_edges());
            }

            #[test]
            fn norm_rows_have_unit_square_sum(g in graph_strategy()) {
                let a = build_norm_adjacency(&g).unwrap().user.to_dense();
                for u in 0..g.num_users() {
                    let s: f64 = a.row(u).iter().map(|v| v * v).sum();
                    if g.user_items(u).is_empty() {
                        prop_assert_eq!(s, 0.0);
                    } else {
                        prop_assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }

            #[test]
            fn buckets_partition_users(degs in proptest::collection::vec(0usize..200, 0..40)) {
                let b = sparsity_buckets(&degs, &DEFAULT_BUCKETS).unwrap();
                let mut seen: Vec<usize> = b.iter().flat_map(|b| b.users.clone()).collect();
                seen.sort_unstable();
                prop_assert_eq!(seen, (0..degs.len()).collect::<Vec<_>>());
            }

            #[test]
            fn split_is_partition(g in graph_strategy(), seed in 0u64..1000) {
                let s = split_edges(&g, DEFAULT_SPLIT, seed).unwrap();
                let mut all: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, g.edges().collect::<Vec<_>>());
                for u in 0..g.num_users() {
                    if !g.user_items(u).is_empty() {
                        prop_assert!(s.train.iter().any(|e| e.0 == u));
                    }
                }
            }

            #[test]
            fn negatives_never_observed(g in graph_strategy(), seed in 0u64..100) {
                let s = split_edges(&g, DEFAULT_SPLIT, seed).unwrap();
                let mut rng = crate::seeded_rng(seed);
                match sample_bpr_triplets(&s, &g, 16, &mut rng) {
                    Ok(b) => for &(u, p, n) in &b.triples {
                        prop_assert!(g.contains(u, p));
                        prop_assert!(!g.contains(u, n));
                    },
                    Err(Error::NoTrainEdges) => prop_assert!(s.train.is_empty()),
                    Err(Error::UnsatisfiableNegative { user }) => {
                        prop_assert_eq!(g.user_items(user).len(), g.num_items())
                    }
                    Err(e) => prop_assert!(false, "unexpected {e}"),
                }
            }
        }
    }
}
