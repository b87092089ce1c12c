//! Alternating critic / generator optimization.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng;

use crate::adversarial::{
    add_augmented_signal, generate_relations_block, gradient_penalty, gumbel_real_proxy,
    interpolate_batch, loss_d, loss_g, modality_collab_embeddings, relation_rows, AdvConfig, Critic,
};
use crate::encoder::{
    cross_modal_attention, fuse_modalities, modality_view, propagate_high_order, EncoderConfig,
    SemanticNeighborhood,
};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_difference_check, GradCheckReport};
use crate::graph::{
    build_norm_adjacency, generate_synthetic, sample_bpr_triplets, split_edges, DataSplit,
    InteractionGraph, ModalityFeatureTable, NormAdjacency, SyntheticSpec, TripletBatch,
    DEFAULT_SPLIT,
};
use crate::model::{Dims, Model, ParamStore};
use crate::objectives::{
    bpr_loss, fuse_final, infonce_loss, pair_scores, squared_norm, total_loss, LossWeights,
};
use crate::optim::Adam;
use crate::ranking::{evaluate, RankingReport};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None`: one pass over the train edges per epoch.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    /// Decoupled weight decay of the generator-side optimizer.
    pub weight_decay: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub seed: u64,
    pub dim: usize,
    /// Epochs without a validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub disable_asl: bool,
    pub disable_cl: bool,
    /// Feed raw interaction rows instead of the Gumbel-softmax transform.
    pub disable_gumbel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: None,
            batch_size: 64,
            lr_gen: 5e-4,
            lr_disc: 3e-4,
            weight_decay: 1.4e-2,
            lr_decay: 0.98,
            seed: 2023,
            dim: 64,
            patience: 10,
            disable_asl: false,
            disable_cl: false,
            disable_gumbel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub buckets: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 20,
            buckets: crate::graph::DEFAULT_BUCKETS.to_vec(),
        }
    }
}

/// Every tunable of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub adv: AdvConfig,
    pub enc: EncoderConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.adv.gumbel.validate()?;
        if !(self.adv.lambda1 >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "adv.lambda1 = {} must be >= 0",
                self.adv.lambda1
            )));
        }
        if self.adv.d_steps == 0 || self.adv.block_rows == 0 {
            return Err(Error::InvalidArgument("adv.d_steps and adv.block_rows must be >= 1".into()));
        }
        for (name, r) in [("adv.gen_dropout", self.adv.gen_dropout), ("adv.disc_dropout", self.adv.critic.dropout)] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("{name} = {r} must be in [0, 1)")));
            }
        }
        self.enc.validate(self.train.dim)?;
        self.loss.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.dim == 0 || t.steps_per_epoch == Some(0) {
            return Err(Error::InvalidArgument(
                "train.batch_size, train.dim and train.steps_per_epoch must be >= 1".into(),
            ));
        }
        for (name, v) in [("train.lr_gen", t.lr_gen), ("train.lr_disc", t.lr_disc), ("train.lr_decay", t.lr_decay)] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} = {v} must be > 0")));
            }
        }
        if !(t.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("train.weight_decay must be >= 0".into()));
        }
        if self.eval.k == 0 {
            return Err(Error::InvalidArgument("eval.k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Graph, features and split, with the train-graph adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graph: InteractionGraph,
    pub features: Vec<ModalityFeatureTable>,
    pub split: DataSplit,
    pub train: InteractionGraph,
    pub adj: NormAdjacency,
}

impl Dataset {
    pub fn new(graph: InteractionGraph, features: Vec<ModalityFeatureTable>, split_seed: u64) -> Result<Self> {
        let split = split_edges(&graph, DEFAULT_SPLIT, split_seed)?;
        Self::with_split(graph, features, split)
    }

    pub fn with_split(
        graph: InteractionGraph,
        features: Vec<ModalityFeatureTable>,
        split: DataSplit,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("at least one modality is required".into()));
        }
        for f in &features {
            if f.num_rows() != graph.num_items() {
                return Err(Error::Shape {
                    op: "Dataset",
                    detail: format!(
                        "{} feature rows for {} items",
                        f.num_rows(),
                        graph.num_items()
                    ),
                });
            }
        }
        if split.train.is_empty() {
            return Err(Error::NoTrainEdges);
        }
        let train = graph.subgraph(&split.train)?;
        let adj = build_norm_adjacency(&train)?;
        Ok(Self {
            graph,
            features,
            split,
            train,
            adj,
        })
    }

    pub fn dims(&self, cfg: &Config) -> Dims {
        Dims {
            num_users: self.graph.num_users(),
            num_items: self.graph.num_items(),
            modality_dims: self.features.iter().map(|f| f.dim()).collect(),
            dim: cfg.train.dim,
            heads: cfg.enc.heads,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
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

/// Parameters retained at the best validation epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub recall: f64,
    pub gen: ParamStore,
    pub critic: Critic,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub rng: Rng,
    /// Next epoch to run.
    pub epoch: usize,
    pub neighbors: Vec<SemanticNeighborhood>,
    pub best: Option<Snapshot>,
    /// Epochs since the last validation improvement.
    pub stale_epochs: usize,
    pub stopped: bool,
    pub log: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(cfg: &Config, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::seeded_rng(cfg.train.seed);
        let model = Model::new(data.dims(cfg), &cfg.adv.critic, &mut rng)?;
        let gen_opt = Adam::adamw(&model.gen, cfg.train.lr_gen, cfg.train.weight_decay);
        let disc_opt = Adam::new(&model.critic.params, cfg.train.lr_disc);
        Ok(Self {
            model,
            gen_opt,
            disc_opt,
            rng,
            epoch: 0,
            neighbors: Vec::new(),
            best: None,
            stale_epochs: 0,
            stopped: false,
            log: Vec::new(),
        })
    }

    /// The model at the best validation epoch, or the current one.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.gen = b.gen.clone();
            m.critic = b.critic.clone();
        }
        m
    }
}

/// Seed, stream and position of a ChaCha generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut r = Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

/// Nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub f_u: Vec<Var>,
    pub f_i: Vec<Var>,
    pub views_u: Vec<Var>,
    pub views_i: Vec<Var>,
    pub h_u: Var,
    pub h_i: Var,
}

/// Generator and encoder forward pass. `bound` is `model.gen` on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    bound: &[Var],
    data: &Dataset,
    neighbors: &[NormAdjacency],
    cfg: &Config,
    rng: &mut Rng,
    train: bool,
) -> Result<Forward> {
    let layout = &model.layout;
    if neighbors.len() != layout.transforms.len() {
        return Err(Error::InvalidArgument(format!(
            "{} neighbor sets for {} modalities",
            neighbors.len(),
            layout.transforms.len()
        )));
    }
    let emb_u = bound[layout.user_emb.0];
    let emb_i = bound[layout.item_emb.0];
    let mut f_u = Vec::new();
    let mut f_i = Vec::new();
    for (feat, &(w, b)) in data.features.iter().zip(&layout.transforms) {
        let x = tape.constant(feat.features.clone())?;
        let (fu, fi) = modality_collab_embeddings(
            tape,
            &data.adj,
            x,
            bound[w.0],
            bound[b.0],
            cfg.adv.gen_dropout,
            rng,
            train,
        )?;
        f_u.push(fu);
        f_i.push(fi);
    }
    let mut views_u = Vec::new();
    let mut views_i = Vec::new();
    for n in neighbors {
        let (vu, vi) = modality_view(tape, n, emb_u, emb_i)?;
        views_u.push(vu);
        views_i.push(vi);
    }
    let heads: Vec<(Var, Var)> = layout
        .attention
        .iter()
        .map(|&(q, k)| (bound[q.0], bound[k.0]))
        .collect();
    let att_u = cross_modal_attention(tape, &views_u, &heads)?;
    let att_i = cross_modal_attention(tape, &views_i, &heads)?;
    let mm_u = fuse_modalities(tape, &att_u)?;
    let mm_i = fuse_modalities(tape, &att_i)?;
    let (e_u, e_i) = propagate_high_order(
        tape,
        &data.adj,
        emb_u,
        emb_i,
        mm_u,
        mm_i,
        cfg.enc.eta,
        cfg.enc.layers,
    )?;
    let h_u = fuse_final(tape, e_u, &f_u, cfg.loss.omega)?;
    let h_i = fuse_final(tape, e_i, &f_i, cfg.loss.omega)?;
    Ok(Forward {
        f_u,
        f_i,
        views_u,
        views_i,
        h_u,
        h_i,
    })
}

/// Eval-mode final embeddings `(h_u, h_i)`.
pub fn final_embeddings(
    model: &Model,
    data: &Dataset,
    neighbors: &[SemanticNeighborhood],
    cfg: &Config,
) -> Result<(Tensor, Tensor)> {
    let adj = neighbor_adjacency(neighbors)?;
    let mut tape = Tape::new();
    let bound = model.gen.bind_frozen(&mut tape)?;
    let mut rng = crate::seeded_rng(0);
    let fw = forward(&mut tape, model, &bound, data, &adj, cfg, &mut rng, false)?;
    Ok((tape.value(fw.h_u).clone(), tape.value(fw.h_i).clone()))
}

/// Eval-mode modality embeddings `(f_u^m, f_i^m)` per modality.
pub fn modality_embeddings(model: &Model, data: &Dataset) -> Result<Vec<(Tensor, Tensor)>> {
    data.features
        .iter()
        .zip(&model.layout.transforms)
        .map(|(feat, &(w, b))| {
            let mut t = feat.features.matmul(model.gen.get(w))?;
            let bias = model.gen.get(b);
            for r in 0..t.rows() {
                t.row_mut(r)
                    .iter_mut()
                    .zip(bias.row(0))
                    .for_each(|(x, b)| *x += b);
            }
            let fu = data.adj.user.matmul(&t)?;
            let fi = data.adj.item.matmul(&fu)?;
            Ok((fu, fi))
        })
        .collect()
}

/// Top-k semantic neighbors from the current generator.
pub fn semantic_neighbors(model: &Model, data: &Dataset, cfg: &Config) -> Result<Vec<SemanticNeighborhood>> {
    modality_embeddings(model, data)?
        .iter()
        .map(|(fu, fi)| SemanticNeighborhood::from_embeddings(fu, fi, cfg.enc.topk, cfg.adv.block_rows))
        .collect()
}

pub fn neighbor_adjacency(neighbors: &[SemanticNeighborhood]) -> Result<Vec<NormAdjacency>> {
    neighbors.iter().map(SemanticNeighborhood::adjacency).collect()
}

/// Loss nodes of the generator-side objective.
#[derive(Clone, Copy, Debug)]
pub struct GenLosses {
    pub bpr: Var,
    pub cl: Option<Var>,
    pub g: Option<Var>,
    pub reg: Var,
    pub total: Var,
}

fn unique_sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Forward pass plus every generator-side loss. The critic enters as
/// constants in eval mode.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective(
    tape: &mut Tape,
    model: &Model,
    bound: &[Var],
    data: &Dataset,
    neighbors: &[NormAdjacency],
    cfg: &Config,
    batch: &TripletBatch,
    rng: &mut Rng,
    train: bool,
) -> Result<GenLosses> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("generator_objective"));
    }
    let fw = forward(tape, model, bound, data, neighbors, cfg, rng, train)?;
    let users = batch.users();
    let pos = pair_scores(tape, fw.h_u, fw.h_i, &users, &batch.positives())?;
    let neg = pair_scores(tape, fw.h_u, fw.h_i, &users, &batch.negatives())?;
    let bpr = bpr_loss(tape, pos, neg)?;
    let distinct = unique_sorted(users);

    let cl = if cfg.train.disable_cl {
        None
    } else {
        let h = tape.gather_rows(fw.h_u, &distinct)?;
        let views = fw
            .views_u
            .iter()
            .map(|&v| tape.gather_rows(v, &distinct))
            .collect::<Result<Vec<_>>>()?;
        Some(infonce_loss(tape, h, &views, cfg.loss.tau_prime, cfg.loss.literal_log_ratio)?)
    };

    let g = if cfg.train.disable_asl {
        None
    } else {
        let mut critic = model.critic.clone();
        let cb = critic.params.bind_frozen(tape)?;
        let mut scores = Vec::with_capacity(fw.f_u.len());
        for (&fu, &fi) in fw.f_u.iter().zip(&fw.f_i) {
            let rows = relation_rows(tape, fu, fi, &distinct)?;
            let (s, _) = critic.forward(tape, &cb, rows, rng, false)?;
            scores.push(s);
        }
        Some(loss_g(tape, &scores)?)
    };

    let reg = squared_norm(tape, bound)?;
    let total = total_loss(tape, bpr, cl, g, reg, &cfg.loss)?;
    Ok(GenLosses {
        bpr,
        cl,
        g,
        reg,
        total,
    })
}

/// Values of one generator step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GStepLosses {
    pub bpr: f64,
    pub cl: f64,
    pub g: f64,
    pub total: f64,
}

/// Critic inputs for a batch of users.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticBatch {
    pub real: Tensor,
    pub fake: Tensor,
    pub interpolated: Tensor,
}

/// Real-proxy, generated and interpolated rows for `users`. Generated rows
/// come from a uniformly drawn modality per row.
pub fn critic_batch(
    model: &Model,
    data: &Dataset,
    neighbors: &[SemanticNeighborhood],
    cfg: &Config,
    users: &[usize],
    rng: &mut Rng,
) -> Result<CriticBatch> {
    let modal = modality_embeddings(model, data)?;
    let (h_u, h_i) = final_embeddings(model, data, neighbors, cfg)?;
    let n_items = data.graph.num_items();
    let mut fake = Tensor::zeros(users.len(), n_items);
    let mut real = Tensor::zeros(users.len(), n_items);
    for (r, &u) in users.iter().enumerate() {
        let m = rng.random_range(0..modal.len());
        let (fu, fi) = &modal[m];
        let row = generate_relations_block(fu, fi, u..u + 1)?;
        fake.row_mut(r).copy_from_slice(row.row(0));
        let observed = data.train.user_items(u);
        let proxy = if cfg.train.disable_gumbel {
            let mut row = data.train.dense_row(u);
            add_augmented_signal(&mut row, cfg.adv.gumbel.zeta, h_u.row(u), &h_i);
            row
        } else {
            gumbel_real_proxy(observed, rng, &cfg.adv.gumbel, h_u.row(u), &h_i)?
        };
        real.row_mut(r).copy_from_slice(&proxy);
    }
    let interpolated = interpolate_batch(&real, &fake, rng)?;
    Ok(CriticBatch {
        real,
        fake,
        interpolated,
    })
}

/// `L_D` with gradient penalty on a prepared batch. `bound` is
/// `critic.params` on `tape`.
pub fn critic_objective(
    tape: &mut Tape,
    critic: &mut Critic,
    bound: &[Var],
    batch: &CriticBatch,
    cfg: &AdvConfig,
    rng: &mut Rng,
    train: bool,
) -> Result<Var> {
    let xr = tape.constant(batch.real.clone())?;
    let xf = tape.constant(batch.fake.clone())?;
    let xi = tape.constant(batch.interpolated.clone())?;
    let (sr, _) = critic.forward(tape, bound, xr, rng, train)?;
    let (sf, _) = critic.forward(tape, bound, xf, rng, train)?;
    let penalty = if cfg.lambda1 != 0.0 {
        let norms = critic.input_gradient_norm(tape, bound, xi, rng, train)?;
        Some(gradient_penalty(tape, norms)?)
    } else {
        None
    };
    loss_d(tape, sr, sf, penalty, cfg.lambda1, cfg.negate_critic)
}

/// One critic update on `batch_size` uniformly drawn users. Generator
/// parameters are untouched.
pub fn d_step(state: &mut TrainState, data: &Dataset, cfg: &Config) -> Result<f64> {
    if state.neighbors.is_empty() {
        state.neighbors = semantic_neighbors(&state.model, data, cfg)?;
    }
    let n_users = data.graph.num_users();
    let users: Vec<usize> = (0..cfg.train.batch_size)
        .map(|_| state.rng.random_range(0..n_users))
        .collect();
    let batch = critic_batch(&state.model, data, &state.neighbors, cfg, &users, &mut state.rng)?;
    let mut tape = Tape::new();
    let critic = &mut state.model.critic;
    let bound = critic.params.bind(&mut tape)?;
    let loss = critic_objective(&mut tape, critic, &bound, &batch, &cfg.adv, &mut state.rng, true)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?.param_map();
    state.disc_opt.step(&mut critic.params, &grads)?;
    Ok(value)
}

/// One generator update on a fresh triplet batch. Critic parameters are
/// untouched.
pub fn g_step(state: &mut TrainState, data: &Dataset, cfg: &Config) -> Result<GStepLosses> {
    if state.neighbors.is_empty() {
        state.neighbors = semantic_neighbors(&state.model, data, cfg)?;
    }
    let batch = sample_bpr_triplets(&data.split, &data.graph, cfg.train.batch_size, &mut state.rng)?;
    let adj = neighbor_adjacency(&state.neighbors)?;
    let mut tape = Tape::new();
    let bound = state.model.gen.bind(&mut tape)?;
    let l = generator_objective(
        &mut tape,
        &state.model,
        &bound,
        data,
        &adj,
        cfg,
        &batch,
        &mut state.rng,
        true,
    )?;
    let out = GStepLosses {
        bpr: tape.value(l.bpr).item(),
        cl: l.cl.map_or(0.0, |v| tape.value(v).item()),
        g: l.g.map_or(0.0, |v| tape.value(v).item()),
        total: tape.value(l.total).item(),
    };
    let grads = tape.backward(l.total)?.param_map();
    state.gen_opt.step(&mut state.model.gen, &grads)?;
    Ok(out)
}

/// Validation metrics of the current parameters.
pub fn validate(state: &TrainState, data: &Dataset, cfg: &Config) -> Result<RankingReport> {
    let neighbors = if state.neighbors.is_empty() {
        semantic_neighbors(&state.model, data, cfg)?
    } else {
        state.neighbors.clone()
    };
    let (h_u, h_i) = final_embeddings(&state.model, data, &neighbors, cfg)?;
    evaluate(&h_u, &h_i, &data.train, &data.split.val, cfg.eval.k, &[])
}

pub fn steps_per_epoch(cfg: &Config, data: &Dataset) -> usize {
    cfg.train
        .steps_per_epoch
        .unwrap_or_else(|| data.split.train.len().div_ceil(cfg.train.batch_size))
        .max(1)
}

/// Run one epoch: learning-rate update, neighbor refresh, then `steps`
/// rounds of `d_steps` critic updates followed by one generator update.
pub fn run_epoch(state: &mut TrainState, data: &Dataset, cfg: &Config) -> Result<EpochRecord> {
    let epoch = state.epoch;
    state.gen_opt.schedule(epoch, cfg.train.lr_decay);
    state.disc_opt.schedule(epoch, cfg.train.lr_decay);
    if state.neighbors.is_empty() || epoch.is_multiple_of(cfg.enc.refresh_every) {
        state.neighbors = semantic_neighbors(&state.model, data, cfg)?;
    }
    let steps = steps_per_epoch(cfg, data);
    let mut sum = GStepLosses::default();
    let mut l_d = 0.0;
    for _ in 0..steps {
        if !cfg.train.disable_asl {
            for _ in 0..cfg.adv.d_steps {
                l_d += d_step(state, data, cfg)? / cfg.adv.d_steps as f64;
            }
        }
        let g = g_step(state, data, cfg)?;
        sum.bpr += g.bpr;
        sum.cl += g.cl;
        sum.g += g.g;
        sum.total += g.total;
    }
    let n = steps as f64;
    let report = validate(state, data, cfg)?;
    let rec = EpochRecord {
        epoch,
        l_bpr: sum.bpr / n,
        l_cl: sum.cl / n,
        l_g: sum.g / n,
        l_d: l_d / n,
        l_total: sum.total / n,
        recall: report.mean.recall,
        ndcg: report.mean.ndcg,
        precision: report.mean.precision,
    };
    for v in [rec.l_bpr, rec.l_cl, rec.l_g, rec.l_d, rec.l_total] {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "epoch loss" });
        }
    }
    state.log.push(rec);
    state.epoch += 1;
    let improved = state.best.as_ref().is_none_or(|b| rec.recall > b.recall);
    if improved {
        state.best = Some(Snapshot {
            epoch,
            recall: rec.recall,
            gen: state.model.gen.clone(),
            critic: state.model.critic.clone(),
        });
        state.stale_epochs = 0;
    } else {
        state.stale_epochs += 1;
        if cfg.train.patience > 0 && state.stale_epochs >= cfg.train.patience {
            state.stopped = true;
        }
    }
    Ok(rec)
}

/// Train until `cfg.train.epochs` or early stop, continuing `state` when
/// given. `on_epoch` runs after every completed epoch; an error from a step
/// leaves the state of the last completed epoch with the caller's hook.
pub fn fit<F>(cfg: &Config, data: &Dataset, state: Option<TrainState>, mut on_epoch: F) -> Result<TrainState>
where
    F: FnMut(&TrainState, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    let mut state = match state {
        Some(s) => s,
        None => TrainState::new(cfg, data)?,
    };
    while state.epoch < cfg.train.epochs && !state.stopped {
        let rec = run_epoch(&mut state, data, cfg)?;
        on_epoch(&state, &rec)?;
    }
    Ok(state)
}

/// Desk instance used by the finite-difference suite.
pub fn gradcheck_instance() -> Result<(Config, Dataset, TrainState)> {
    let spec = SyntheticSpec {
        num_users: 12,
        num_items: 10,
        modality_dims: alloc::vec![6, 4],
        latent_dim: 4,
        interactions_per_user: 3,
        noise: 0.1,
        seed: 5,
        ..SyntheticSpec::default()
    };
    let mut rng = crate::seeded_rng(spec.seed);
    let synth = generate_synthetic(&spec, &mut rng)?;
    let data = Dataset::new(synth.graph, synth.features, 5)?;
    let mut cfg = Config::default();
    cfg.train.dim = 8;
    cfg.train.batch_size = 12;
    cfg.train.seed = 5;
    cfg.enc.heads = 2;
    cfg.enc.layers = 2;
    cfg.enc.topk = 3;
    cfg.loss.lambda2 = 0.3;
    cfg.loss.lambda3 = 0.5;
    cfg.loss.lambda4 = 1e-3;
    cfg.loss.tau_prime = 0.5;
    let mut state = TrainState::new(&cfg, &data)?;
    // move away from the initialization so every layer carries signal
    for _ in 0..2 {
        d_step(&mut state, &data, &cfg)?;
        g_step(&mut state, &data, &cfg)?;
    }
    Ok((cfg, data, state))
}

/// Loss names understood by [`gradcheck_suite`].
pub const GRADCHECK_LOSSES: [&str; 5] = ["bpr", "cl", "g", "d", "total"];

/// Central-difference check (step `eps`) of every loss on the desk instance.
/// `only` restricts the run to one loss name.
pub fn gradcheck_suite(only: Option<&str>, eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    if let Some(name) = only {
        if !GRADCHECK_LOSSES.contains(&name) {
            return Err(Error::InvalidArgument(format!(
                "unknown loss {name}; expected one of {GRADCHECK_LOSSES:?}"
            )));
        }
    }
    let (cfg, data, mut state) = gradcheck_instance()?;
    let adj = neighbor_adjacency(&state.neighbors)?;
    let mut all = alloc::vec![];
    for (u, i) in data.split.train.iter().copied() {
        let neg = (0..data.graph.num_items())
            .find(|&j| !data.graph.contains(u, j))
            .ok_or(Error::UnsatisfiableNegative { user: u })?;
        all.push((u, i, neg));
    }
    let batch = TripletBatch { triples: all };
    let users: Vec<usize> = (0..data.graph.num_users()).collect();
    let cb = critic_batch(&state.model, &data, &state.neighbors, &cfg, &users, &mut state.rng)?;

    let mut out = Vec::new();
    for name in GRADCHECK_LOSSES {
        if only.is_some_and(|o| o != name) {
            continue;
        }
        let report = if name == "d" {
            let critic = state.model.critic.clone();
            finite_difference_check(&critic.params, eps, |p, tape| {
                let mut c = critic.clone();
                let bound = p.bind(tape)?;
                let mut rng = crate::seeded_rng(17);
                critic_objective(tape, &mut c, &bound, &cb, &cfg.adv, &mut rng, false)
            })?
        } else {
            let model = &state.model;
            finite_difference_check(&model.gen, eps, |p, tape| {
                let bound = p.bind(tape)?;
                let mut rng = crate::seeded_rng(17);
                let l = generator_objective(tape, model, &bound, &data, &adj, &cfg, &batch, &mut rng, true)?;
                Ok(match name {
                    "bpr" => l.bpr,
                    "cl" => l.cl.expect("contrastive term enabled"),
                    "g" => l.g.expect("adversarial term enabled"),
                    _ => l.total,
                })
            })?
        };
        out.push((name, report));
    }
    Ok(out)
}


#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Config, Dataset) {
        let spec = SyntheticSpec {
            num_users: 20,
            num_items: 15,
            modality_dims: alloc::vec![8, 5],
            interactions_per_user: 4,
            ..SyntheticSpec::default()
        };
        let mut rng = crate::seeded_rng(1);
        let s = generate_synthetic(&spec, &mut rng).unwrap();
        let data = Dataset::new(s.graph, s.features, 1).unwrap();
        let mut cfg = Config::default();
        cfg.train.dim = 8;
        cfg.train.batch_size = 16;
        cfg.enc.topk = 4;
        (cfg, data)
    }

    #[test]
    fn d_step_freezes_generator_and_g_step_freezes_critic() {
        let (cfg, data) = small();
        let mut st = TrainState::new(&cfg, &data).unwrap();
        let (g0, c0) = (st.model.gen.fingerprint(), st.model.critic.params.fingerprint());
        d_step(&mut st, &data, &cfg).unwrap();
        assert_eq!(st.model.gen.fingerprint(), g0);
        let c1 = st.model.critic.params.fingerprint();
        assert_ne!(c1, c0);
        g_step(&mut st, &data, &cfg).unwrap();
        assert_eq!(st.model.critic.params.fingerprint(), c1);
        assert_ne!(st.model.gen.fingerprint(), g0);
    }

    #[test]
    fn identical_rows_give_zero_critic_loss() {
        let (cfg, data) = small();
        let mut st = TrainState::new(&cfg, &data).unwrap();
        let mut rng = crate::seeded_rng(0);
        let users = [0, 1, 2, 3];
        let mut cb = critic_batch(&st.model, &data, &[], &cfg, &users, &mut rng)
            .or_else(|_| {
                st.neighbors = semantic_neighbors(&st.model, &data, &cfg)?;
                critic_batch(&st.model, &data, &st.neighbors, &cfg, &users, &mut rng)
            })
            .unwrap();
        cb.real = cb.fake.clone();
        let adv = AdvConfig {
            lambda1: 0.0,
            ..cfg.adv
        };
        let mut tape = Tape::new();
        let mut critic = st.model.critic.clone();
        let bound = critic.params.bind(&mut tape).unwrap();
        let l = critic_objective(&mut tape, &mut critic, &bound, &cb, &adv, &mut rng, false).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let grads = tape.backward(l).unwrap().param_map();
        assert!(grads.values().all(|g| g.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn no_auxiliary_tasks_leave_bpr_plus_regularizer() {
        let (mut cfg, data) = small();
        cfg.train.disable_asl = true;
        cfg.train.disable_cl = true;
        let st = TrainState::new(&cfg, &data).unwrap();
        let neigh = semantic_neighbors(&st.model, &data, &cfg).unwrap();
        let adj = neighbor_adjacency(&neigh).unwrap();
        let mut rng = crate::seeded_rng(3);
        let batch = sample_bpr_triplets(&data.split, &data.graph, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bound = st.model.gen.bind(&mut tape).unwrap();
        let l = generator_objective(&mut tape, &st.model, &bound, &data, &adj, &cfg, &batch, &mut rng, true)
            .unwrap();
        assert!(l.cl.is_none() && l.g.is_none());
        let want = tape.value(l.bpr).item() + cfg.loss.lambda4 * tape.value(l.reg).item();
        assert_eq!(tape.value(l.total).item(), want);
        assert!((tape.value(l.reg).item() - st.model.gen.sq_norm()).abs() < 1e-9);
    }

    #[test]
    fn zero_epochs_return_initial_state() {
        let (mut cfg, data) = small();
        cfg.train.epochs = 0;
        let st = fit(&cfg, &data, None, |_, _| Ok(())).unwrap();
        assert!(st.log.is_empty());
        assert_eq!(st, TrainState::new(&cfg, &data).unwrap());
    }

    #[test]
    fn rng_state_round_trip() {
        let mut r = crate::seeded_rng(9);
        let _: u64 = r.random();
        let _: u32 = r.random();
        let s = RngState::capture(&r);
        let mut back = s.restore();
        assert_eq!(r.random::<u64>(), back.random::<u64>());
    }

    #[test]
    fn seeds_reproduce_and_resume_matches() {
        let (mut cfg, data) = small();
        cfg.train.epochs = 2;
        cfg.train.steps_per_epoch = Some(2);
        let a = fit(&cfg, &data, None, |_, _| Ok(())).unwrap();
        let b = fit(&cfg, &data, None, |_, _| Ok(())).unwrap();
        assert_eq!(a.log, b.log);
        cfg.train.epochs = 1;
        let half = fit(&cfg, &data, None, |_, _| Ok(())).unwrap();
        cfg.train.epochs = 2;
        let resumed = fit(&cfg, &data, Some(half), |_, _| Ok(())).unwrap();
        assert_eq!(resumed.log, a.log);
        assert_eq!(resumed, a);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = Config::default();
        cfg.enc.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.adv.gumbel.tau = 0.0;
        assert!(cfg.validate().is_err());
        assert!(Config::default().validate().is_ok());
    }
}
