//! Adversarial modality-aware relation learning.
//!
//! The generator maps raw modality features through a per-modality affine
//! transform, smooths them over the interaction graph and scores every
//! user-item pair by cosine similarity. The critic is a two-block MLP over
//! whole relation rows. Real rows come from a Gumbel-softmax transform of the
//! observed interactions plus a cosine signal from the final embeddings.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng as _;

use crate::error::{shape_err, Error, Result};
use crate::graph::{gumbel, uniform_open, NormAdjacency};
use crate::model::{xavier_uniform, ParamStore};
use crate::tape::{BatchNormState, ParamId, Tape, Var};
use crate::tensor::{cosine, Tensor};
use crate::Rng;

/// Gumbel transform temperature and augmented-signal weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelConfig {
    pub tau: f64,
    pub zeta: f64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            zeta: 100.0,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("gumbel tau {} must be > 0", self.tau)));
        }
        if !(self.zeta >= 0.0) {
            return Err(Error::InvalidArgument(format!("zeta {} must be >= 0", self.zeta)));
        }
        Ok(())
    }
}

/// Shape of the critic network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticConfig {
    /// Hidden width; `None` scales 512 by `|I| / 7050`, clamped to `[16, 512]`.
    pub hidden: Option<usize>,
    pub leaky_slope: f64,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            leaky_slope: 0.2,
            dropout: 0.1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl CriticConfig {
    pub fn hidden_for(&self, num_items: usize) -> usize {
        self.hidden.unwrap_or_else(|| {
            let scaled = libm::round(512.0 * num_items as f64 / 7050.0) as usize;
            scaled.clamp(16, 512)
        })
    }
}

/// Adversarial task settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvConfig {
    pub gumbel: GumbelConfig,
    /// Gradient-penalty weight.
    pub lambda1: f64,
    pub d_steps: usize,
    /// Users per block when materializing relation matrices.
    pub block_rows: usize,
    /// Descend `E[D(fake)] - E[D(real)]` instead of the printed sign.
    pub negate_critic: bool,
    pub gen_dropout: f64,
    pub critic: CriticConfig,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            gumbel: GumbelConfig::default(),
            lambda1: 1.0,
            d_steps: 1,
            block_rows: 256,
            negate_critic: false,
            gen_dropout: 0.1,
            critic: CriticConfig::default(),
        }
    }
}

/// Modality-aware collaborative embeddings `(f_u, f_i)`.
///
/// Raw features pass through the modality transform (with dropout in train
/// mode), then `f_u = A_u T` and `f_i = A_i f_u` with degree-normalized
/// adjacencies, in that order.
#[allow(clippy::too_many_arguments)]
pub fn modality_collab_embeddings(
    tape: &mut Tape,
    adj: &NormAdjacency,
    features: Var,
    weight: Var,
    bias: Var,
    dropout: f64,
    rng: &mut Rng,
    train: bool,
) -> Result<(Var, Var)> {
    if tape.value(features).rows() != adj.user.cols() {
        return Err(shape_err(
            "modality_collab_embeddings",
            format!(
                "{} feature rows for {} items",
                tape.value(features).rows(),
                adj.user.cols()
            ),
        ));
    }
    let t = tape.matmul(features, weight)?;
    let t = tape.add_row(t, bias)?;
    let t = tape.dropout(t, dropout, rng, train)?;
    let f_u = tape.sparse_matmul(&adj.user, t)?;
    let f_i = tape.sparse_matmul(&adj.item, f_u)?;
    Ok((f_u, f_i))
}

fn unit_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = crate::tensor::norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Cosine relation scores for users in `rows` against all items.
pub fn generate_relations_block(f_u: &Tensor, f_i: &Tensor, rows: Range<usize>) -> Result<Tensor> {
    if rows.end > f_u.rows() || f_u.cols() != f_i.cols() {
        return Err(shape_err(
            "generate_relations_block",
            format!("rows {rows:?} of {:?} against {:?}", f_u.shape(), f_i.shape()),
        ));
    }
    let idx: Vec<usize> = rows.collect();
    unit_rows(&f_u.gather_rows(&idx)).matmul_t(&unit_rows(f_i))
}

/// The full relation matrix, assembled block by block.
pub fn generate_relations(f_u: &Tensor, f_i: &Tensor, block_rows: usize) -> Result<Tensor> {
    let block_rows = block_rows.max(1);
    let mut out = Tensor::zeros(f_u.rows(), f_i.rows());
    let mut start = 0;
    while start < f_u.rows() {
        let end = (start + block_rows).min(f_u.rows());
        let block = generate_relations_block(f_u, f_i, start..end)?;
        for r in 0..block.rows() {
            out.row_mut(start + r).copy_from_slice(block.row(r));
        }
        start = end;
    }
    Ok(out)
}

/// Differentiable relation rows for the given users, `B x |I|`.
pub fn relation_rows(tape: &mut Tape, f_u: Var, f_i: Var, users: &[usize]) -> Result<Var> {
    let fu = tape.gather_rows(f_u, users)?;
    let fu = tape.l2_normalize_rows(fu)?;
    let fi = tape.l2_normalize_rows(f_i)?;
    tape.matmul_t(fu, fi)
}

/// `softmax((a + g) / tau)` with `g = -log(-log(u))` for the given uniforms.
pub fn gumbel_softmax_row(a_row: &[f64], uniforms: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("gumbel tau {tau} must be > 0")));
    }
    if a_row.len() != uniforms.len() {
        return Err(shape_err(
            "gumbel_softmax_row",
            format!("{} entries, {} uniforms", a_row.len(), uniforms.len()),
        ));
    }
    let logits: Vec<f64> = a_row
        .iter()
        .zip(uniforms)
        .map(|(&a, &u)| (a + gumbel(u)) / tau)
        .collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Dense real-proxy row for a user with observed items `observed`:
/// Gumbel-softmax of the 0/1 row plus `zeta * cos(h_u, h_i)`. The cosine
/// term is computed from plain values and carries no gradient.
pub fn gumbel_real_proxy_with_uniforms(
    observed: &[usize],
    uniforms: &[f64],
    cfg: &GumbelConfig,
    h_u: &[f64],
    h_items: &Tensor,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = h_items.rows();
    let mut a_row = alloc::vec![0.0; n];
    for &i in observed {
        if i >= n {
            return Err(Error::OutOfRange {
                kind: "item",
                id: i,
                count: n,
            });
        }
        a_row[i] = 1.0;
    }
    let mut row = gumbel_softmax_row(&a_row, uniforms, cfg.tau)?;
    add_augmented_signal(&mut row, cfg.zeta, h_u, h_items);
    Ok(row)
}

/// [`gumbel_real_proxy_with_uniforms`] with fresh uniforms from `rng`.
pub fn gumbel_real_proxy(
    observed: &[usize],
    rng: &mut Rng,
    cfg: &GumbelConfig,
    h_u: &[f64],
    h_items: &Tensor,
) -> Result<Vec<f64>> {
    let uniforms: Vec<f64> = (0..h_items.rows()).map(|_| uniform_open(rng)).collect();
    gumbel_real_proxy_with_uniforms(observed, &uniforms, cfg, h_u, h_items)
}

pub(crate) fn add_augmented_signal(row: &mut [f64], zeta: f64, h_u: &[f64], h_items: &Tensor) {
    if zeta == 0.0 {
        return;
    }
    for (i, v) in row.iter_mut().enumerate() {
        *v += zeta * cosine(h_u, h_items.row(i));
    }
}

/// `eps * real + (1 - eps) * fake`.
pub fn interpolate_rows(real: &[f64], fake: &[f64], eps: f64) -> Result<Vec<f64>> {
    if real.len() != fake.len() {
        return Err(shape_err(
            "interpolate_rows",
            format!("{} vs {}", real.len(), fake.len()),
        ));
    }
    Ok(real
        .iter()
        .zip(fake)
        .map(|(r, f)| eps * r + (1.0 - eps) * f)
        .collect())
}

/// Row-wise interpolation with a fresh uniform `eps` per row.
pub fn interpolate_batch(real: &Tensor, fake: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    if real.shape() != fake.shape() {
        return Err(shape_err(
            "interpolate_batch",
            format!("{:?} vs {:?}", real.shape(), fake.shape()),
        ));
    }
    let mut out = Tensor::zeros(real.rows(), real.cols());
    for r in 0..real.rows() {
        let eps: f64 = rng.random();
        let row = interpolate_rows(real.row(r), fake.row(r), eps)?;
        out.row_mut(r).copy_from_slice(&row);
    }
    Ok(out)
}

/// One layer of a critic network.
#[derive(Clone, Debug, PartialEq)]
pub enum CriticLayer {
    Affine { weight: ParamId, bias: ParamId },
    LeakyRelu { slope: f64 },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        state: BatchNormState,
    },
    Dropout { rate: f64 },
    Sigmoid,
}

/// Feed-forward critic over relation rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic {
    pub params: ParamStore,
    pub layers: Vec<CriticLayer>,
}

#[derive(Debug)]
enum TraceStep {
    Affine(Var),
    LeakyRelu(Tensor),
    BatchNorm { gamma: Var, inv_std: Tensor },
    Dropout(Option<Tensor>),
    Sigmoid(Var),
}

/// What a forward pass recorded for rebuilding the input gradient.
#[derive(Debug)]
pub struct CriticTrace {
    steps: Vec<TraceStep>,
    batch: usize,
}

impl Critic {
    /// `sigmoid(Linear(G(G(a))))` with `G = Drop . BN . LeakyReLU . Linear`.
    pub fn discriminator(input: usize, cfg: &CriticConfig, rng: &mut Rng) -> Self {
        let hidden = cfg.hidden_for(input);
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut width = input;
        for block in 1..=2 {
            let weight = params.insert(
                &format!("disc.l{block}.weight"),
                xavier_uniform(width, hidden, rng),
            );
            let bias = params.insert(&format!("disc.l{block}.bias"), Tensor::zeros(1, hidden));
            let gamma = params.insert(&format!("disc.bn{block}.gamma"), Tensor::filled(1, hidden, 1.0));
            let beta = params.insert(&format!("disc.bn{block}.beta"), Tensor::zeros(1, hidden));
            let mut state = BatchNormState::new(hidden);
            state.momentum = cfg.bn_momentum;
            state.eps = cfg.bn_eps;
            layers.push(CriticLayer::Affine { weight, bias });
            layers.push(CriticLayer::LeakyRelu {
                slope: cfg.leaky_slope,
            });
            layers.push(CriticLayer::BatchNorm { gamma, beta, state });
            layers.push(CriticLayer::Dropout { rate: cfg.dropout });
            width = hidden;
        }
        let weight = params.insert("disc.out.weight", xavier_uniform(hidden, 1, rng));
        let bias = params.insert("disc.out.bias", Tensor::zeros(1, 1));
        layers.push(CriticLayer::Affine { weight, bias });
        layers.push(CriticLayer::Sigmoid);
        Self { params, layers }
    }

    /// `D(x) = w . x + b`, optionally followed by a sigmoid.
    pub fn linear(weight: &[f64], bias: f64, sigmoid: bool) -> Self {
        let mut params = ParamStore::new();
        let w = Tensor::from_vec(weight.len(), 1, weight.to_vec()).expect("column");
        let weight = params.insert("linear.weight", w);
        let bias = params.insert("linear.bias", Tensor::scalar(bias));
        let mut layers = alloc::vec![CriticLayer::Affine { weight, bias }];
        if sigmoid {
            layers.push(CriticLayer::Sigmoid);
        }
        Self { params, layers }
    }

    pub fn input_width(&self) -> usize {
        match self.layers.first() {
            Some(CriticLayer::Affine { weight, .. }) => self.params.get(*weight).rows(),
            _ => 0,
        }
    }

    /// Running statistics of every batch-norm layer, in order.
    pub fn batch_norm_states(&self) -> impl Iterator<Item = &BatchNormState> {
        self.layers.iter().filter_map(|l| match l {
            CriticLayer::BatchNorm { state, .. } => Some(state),
            _ => None,
        })
    }

    pub fn batch_norm_states_mut(&mut self) -> impl Iterator<Item = &mut BatchNormState> {
        self.layers.iter_mut().filter_map(|l| match l {
            CriticLayer::BatchNorm { state, .. } => Some(state),
            _ => None,
        })
    }

    /// Scores `B x 1` for the rows of `x`. `bound` comes from
    /// [`ParamStore::bind`] or [`ParamStore::bind_frozen`] on `self.params`.
    /// In train mode batch-norm uses batch statistics and updates its
    /// running statistics, and dropout is active.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &[Var],
        x: Var,
        rng: &mut Rng,
        train: bool,
    ) -> Result<(Var, CriticTrace)> {
        let width = tape.value(x).cols();
        if width != self.input_width() {
            return Err(shape_err(
                "critic",
                format!("row length {width}, expected {}", self.input_width()),
            ));
        }
        let batch = tape.value(x).rows();
        let mut h = x;
        let mut steps = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            match layer {
                CriticLayer::Affine { weight, bias } => {
                    let w = bound[weight.0];
                    let z = tape.matmul(h, w)?;
                    h = tape.add_row(z, bound[bias.0])?;
                    steps.push(TraceStep::Affine(w));
                }
                CriticLayer::LeakyRelu { slope } => {
                    let s = *slope;
                    let mask = tape.value(h).map(|v| if v > 0.0 { 1.0 } else { s });
                    h = tape.leaky_relu(h, s)?;
                    steps.push(TraceStep::LeakyRelu(mask));
                }
                CriticLayer::BatchNorm { gamma, beta, state } => {
                    let g = bound[gamma.0];
                    let (y, inv_std) = tape.batch_norm(h, g, bound[beta.0], state, train)?;
                    h = y;
                    steps.push(TraceStep::BatchNorm { gamma: g, inv_std });
                }
                CriticLayer::Dropout { rate } => {
                    let y = tape.dropout(h, *rate, rng, train)?;
                    let mask = tape.dropout_mask(y).filter(|_| y != h).cloned();
                    h = y;
                    steps.push(TraceStep::Dropout(mask));
                }
                CriticLayer::Sigmoid => {
                    h = tape.sigmoid(h)?;
                    steps.push(TraceStep::Sigmoid(h));
                }
            }
        }
        if tape.value(h).cols() != 1 {
            return Err(shape_err("critic", "output is not one score per row".into()));
        }
        Ok((h, CriticTrace { steps, batch }))
    }

    /// `grad_x D(x)` per row (`B x n`) as an explicit expression on the tape,
    /// differentiable with respect to the critic parameters.
    ///
    /// The expression chains the layer Jacobians backwards: sigmoid slopes
    /// `s(1-s)`, dropout masks, batch-norm scales `gamma / sqrt(var + eps)`,
    /// leaky-ReLU slopes and transposed affine weights. Batch statistics,
    /// masks and activation slopes enter as constants.
    pub fn input_gradient(&self, tape: &mut Tape, trace: &CriticTrace) -> Result<Var> {
        let mut g = tape.constant(Tensor::filled(trace.batch, 1, 1.0))?;
        for step in trace.steps.iter().rev() {
            g = match step {
                TraceStep::Sigmoid(s) => {
                    let neg = tape.scale(*s, -1.0)?;
                    let one_minus = tape.add_scalar(neg, 1.0)?;
                    let slope = tape.mul(*s, one_minus)?;
                    tape.mul(g, slope)?
                }
                TraceStep::Dropout(Some(mask)) => {
                    let m = tape.constant(mask.clone())?;
                    tape.mul(g, m)?
                }
                TraceStep::Dropout(None) => g,
                TraceStep::BatchNorm { gamma, inv_std } => {
                    let s = tape.constant(inv_std.clone())?;
                    let scale = tape.mul(*gamma, s)?;
                    tape.mul_row(g, scale)?
                }
                TraceStep::LeakyRelu(mask) => {
                    let m = tape.constant(mask.clone())?;
                    tape.mul(g, m)?
                }
                TraceStep::Affine(w) => tape.matmul_t(g, *w)?,
            };
        }
        Ok(g)
    }

    /// `||grad_x D(x)||_2` per row of `x` as a `B x 1` node.
    pub fn input_gradient_norm(
        &mut self,
        tape: &mut Tape,
        bound: &[Var],
        x: Var,
        rng: &mut Rng,
        train: bool,
    ) -> Result<Var> {
        let (_, trace) = self.forward(tape, bound, x, rng, train)?;
        let g = self.input_gradient(tape, &trace)?;
        let sq = tape.square(g)?;
        let s = tape.row_sum(sq)?;
        tape.sqrt(s)
    }
}

/// `mean((norm - 1)^2)`.
pub fn gradient_penalty(tape: &mut Tape, norms: Var) -> Result<Var> {
    let d = tape.add_scalar(norms, -1.0)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

/// Generator loss: `-mean(D(fake))`, summed over the given per-modality batches.
pub fn loss_g(tape: &mut Tape, fake_scores: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &s in fake_scores {
        if tape.value(s).is_empty() {
            return Err(Error::EmptyBatch("loss_g"));
        }
        let m = tape.mean(s)?;
        let neg = tape.scale(m, -1.0)?;
        total = Some(match total {
            Some(t) => tape.add(t, neg)?,
            None => neg,
        });
    }
    total.ok_or(Error::EmptyBatch("loss_g"))
}

/// Critic loss `mean(D(real)) - mean(D(fake)) + lambda1 * penalty`.
/// With `negate_critic` the first two terms swap sign.
pub fn loss_d(
    tape: &mut Tape,
    real_scores: Var,
    fake_scores: Var,
    penalty: Option<Var>,
    lambda1: f64,
    negate_critic: bool,
) -> Result<Var> {
    if tape.value(real_scores).is_empty() || tape.value(fake_scores).is_empty() {
        return Err(Error::EmptyBatch("loss_d"));
    }
    let r = tape.mean(real_scores)?;
    let f = tape.mean(fake_scores)?;
    let mut l = if negate_critic {
        tape.sub(f, r)?
    } else {
        tape.sub(r, f)?
    };
    if let Some(p) = penalty {
        if lambda1 != 0.0 {
            let w = tape.scale(p, lambda1)?;
            l = tape.add(l, w)?;
        }
    }
    Ok(l)
}
