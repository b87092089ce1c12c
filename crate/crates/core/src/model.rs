//! Parameter storage and the full model state.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng as _;

use crate::adversarial::{Critic, CriticConfig};
use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::Tensor;
use crate::Rng;

/// Named tensors addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> ParamId {
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(k, (n, v))| (ParamId(k), n.as_str(), v))
    }

    /// Replace the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::assign",
                detail: format!(
                    "{name}: {:?} vs {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                ),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Register every parameter on the tape; index `k` of the result is `ParamId(k)`.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.ids()
            .map(|id| tape.param(id, self.get(id).clone()))
            .collect()
    }

    /// Register every parameter as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.values.iter().map(|v| tape.constant(v.clone())).collect()
    }

    /// Sum of squares of all entries.
    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(Tensor::sum_sq).sum()
    }

    /// FNV-1a over names and value bits; used to assert parameter partitions.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for (n, v) in self.names.iter().zip(&self.values) {
            h.write(n.as_bytes());
            for x in v.data() {
                h.write(&x.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

/// 64-bit FNV-1a.
#[derive(Debug, Clone, Copy)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

/// Uniform Xavier initialization with bound `sqrt(6 / (rows + cols))`.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let bound = libm::sqrt(6.0 / (rows + cols) as f64);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("xavier shape")
}

/// Sizes the model is built for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dims {
    pub num_users: usize,
    pub num_items: usize,
    pub modality_dims: Vec<usize>,
    pub dim: usize,
    pub heads: usize,
}

/// Where each generator-side parameter lives in [`Model::gen`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub user_emb: ParamId,
    pub item_emb: ParamId,
    /// `(weight d_m x d, bias 1 x d)` per modality.
    pub transforms: Vec<(ParamId, ParamId)>,
    /// `(query d x d/H, key d x d/H)` per head.
    pub attention: Vec<(ParamId, ParamId)>,
}

/// All trainable state: generator/encoder parameters and the critic.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: Dims,
    pub gen: ParamStore,
    pub layout: Layout,
    pub critic: Critic,
}

impl Model {
    pub fn new(dims: Dims, critic: &CriticConfig, rng: &mut Rng) -> Result<Self> {
        let d = dims.dim;
        if dims.heads == 0 || !d.is_multiple_of(dims.heads) {
            return Err(Error::InvalidArgument(format!(
                "{} heads do not divide dimension {d}",
                dims.heads
            )));
        }
        if dims.modality_dims.is_empty() {
            return Err(Error::InvalidArgument("no modalities".into()));
        }
        let mut gen = ParamStore::new();
        let user_emb = gen.insert("emb.user", xavier_uniform(dims.num_users, d, rng));
        let item_emb = gen.insert("emb.item", xavier_uniform(dims.num_items, d, rng));
        let transforms = dims
            .modality_dims
            .iter()
            .enumerate()
            .map(|(m, &dm)| {
                let w = gen.insert(&format!("gen.{m}.weight"), xavier_uniform(dm, d, rng));
                let b = gen.insert(&format!("gen.{m}.bias"), Tensor::zeros(1, d));
                (w, b)
            })
            .collect();
        let dh = d / dims.heads;
        let attention = (0..dims.heads)
            .map(|h| {
                let q = gen.insert(&format!("attn.{h}.query"), xavier_uniform(d, dh, rng));
                let k = gen.insert(&format!("attn.{h}.key"), xavier_uniform(d, dh, rng));
                (q, k)
            })
            .collect();
        let critic = Critic::discriminator(dims.num_items, critic, rng);
        Ok(Self {
            dims,
            gen,
            layout: Layout {
                user_emb,
                item_emb,
                transforms,
                attention,
            },
            critic,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.layout.transforms.len()
    }
}
