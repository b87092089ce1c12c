//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MMCK"  version:u32  config_hash:[u8;32]  config_json:str
//! users:u64 items:u64 edges:u64
//! model (dims, generator table, layout ids, critic table + layers)
//! generator optimizer, critic optimizer, rng state
//! epoch:u64 stale:u64 stopped:u8 neighbors best-snapshot log
//! sha256 of everything above:[u8;32]
//! ```
//!
//! A parameter table is `count:u64` then per entry `name:str rows:u64
//! cols:u64 values:[f64]`; `str` is `len:u32` then UTF-8 bytes.

use std::fs;
use std::path::Path;

use mmssl_core::adversarial::{Critic, CriticLayer};
use mmssl_core::encoder::SemanticNeighborhood;
use mmssl_core::model::{Dims, Layout, Model, ParamStore};
use mmssl_core::optim::Adam;
use mmssl_core::tape::{BatchNormState, ParamId};
use mmssl_core::trainer::{Config, EpochRecord, RngState, Snapshot, TrainState};
use mmssl_core::Tensor;
use sha2::{Digest, Sha256};

use crate::config;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;

/// Counts of the dataset a checkpoint was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataShape {
    pub users: usize,
    pub items: usize,
    pub edges: usize,
}

impl DataShape {
    pub fn of(graph: &mmssl_core::graph::InteractionGraph) -> Self {
        Self {
            users: graph.num_users(),
            items: graph.num_items(),
            edges: graph.num_edges(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub data: DataShape,
    pub state: TrainState,
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.usize(t.rows());
        self.usize(t.cols());
        for &v in t.data() {
            self.f64(v);
        }
    }
    fn ids(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.usize(x));
    }
    fn params(&mut self, p: &ParamStore) {
        self.usize(p.len());
        for (_, name, t) in p.iter() {
            self.str(name);
            self.tensor(t);
        }
    }
    fn critic(&mut self, c: &Critic) {
        self.params(&c.params);
        self.usize(c.layers.len());
        for layer in &c.layers {
            match layer {
                CriticLayer::Affine { weight, bias } => {
                    self.u8(0);
                    self.usize(weight.0);
                    self.usize(bias.0);
                }
                CriticLayer::LeakyRelu { slope } => {
                    self.u8(1);
                    self.f64(*slope);
                }
                CriticLayer::BatchNorm { gamma, beta, state } => {
                    self.u8(2);
                    self.usize(gamma.0);
                    self.usize(beta.0);
                    self.tensor(&state.running_mean);
                    self.tensor(&state.running_var);
                    self.f64(state.momentum);
                    self.f64(state.eps);
                }
                CriticLayer::Dropout { rate } => {
                    self.u8(3);
                    self.f64(*rate);
                }
                CriticLayer::Sigmoid => self.u8(4),
            }
        }
    }
    fn adam(&mut self, a: &Adam) {
        for v in [a.base_lr, a.lr, a.beta1, a.beta2, a.eps, a.weight_decay] {
            self.f64(v);
        }
        self.bool(a.decoupled);
        self.u64(a.step);
        for buf in [&a.m, &a.v] {
            self.usize(buf.len());
            buf.iter().for_each(|t| self.tensor(t));
        }
    }
    fn model(&mut self, m: &Model) {
        let d = &m.dims;
        self.usize(d.num_users);
        self.usize(d.num_items);
        self.ids(&d.modality_dims);
        self.usize(d.dim);
        self.usize(d.heads);
        self.params(&m.gen);
        let l = &m.layout;
        self.usize(l.user_emb.0);
        self.usize(l.item_emb.0);
        for pairs in [&l.transforms, &l.attention] {
            self.usize(pairs.len());
            for (a, b) in pairs.iter() {
                self.usize(a.0);
                self.usize(b.0);
            }
        }
        self.critic(&m.critic);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("{} at byte {}", msg.into(), self.pos),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err("count overflows usize"))
    }
    /// A count that must fit in the remaining bytes at `unit` bytes each.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(self.err(format!("length {n} exceeds payload")));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(self.err(format!("bad flag byte {b}"))),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.err("invalid UTF-8"))
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let n = rows
            .checked_mul(cols)
            .filter(|n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| self.err(format!("tensor {rows}x{cols} exceeds payload")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::from_vec(rows, cols, data)?)
    }
    fn ids(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn id(&mut self, store: &ParamStore) -> Result<ParamId> {
        let k = self.usize()?;
        if k >= store.len() {
            return Err(self.err(format!("parameter index {k} out of range")));
        }
        Ok(ParamId(k))
    }
    fn params(&mut self) -> Result<ParamStore> {
        let n = self.len(20)?;
        let mut p = ParamStore::new();
        for _ in 0..n {
            let name = self.str()?;
            let t = self.tensor()?;
            p.insert(&name, t);
        }
        Ok(p)
    }
    fn critic(&mut self) -> Result<Critic> {
        let params = self.params()?;
        let n = self.len(1)?;
        let mut layers = Vec::with_capacity(n);
        for _ in 0..n {
            layers.push(match self.u8()? {
                0 => CriticLayer::Affine {
                    weight: self.id(&params)?,
                    bias: self.id(&params)?,
                },
                1 => CriticLayer::LeakyRelu { slope: self.f64()? },
                2 => CriticLayer::BatchNorm {
                    gamma: self.id(&params)?,
                    beta: self.id(&params)?,
                    state: BatchNormState {
                        running_mean: self.tensor()?,
                        running_var: self.tensor()?,
                        momentum: self.f64()?,
                        eps: self.f64()?,
                    },
                },
                3 => CriticLayer::Dropout { rate: self.f64()? },
                4 => CriticLayer::Sigmoid,
                t => return Err(self.err(format!("unknown critic layer tag {t}"))),
            });
        }
        Ok(Critic { params, layers })
    }
    fn adam(&mut self, params: &ParamStore) -> Result<Adam> {
        let mut f = [0.0; 6];
        for v in &mut f {
            *v = self.f64()?;
        }
        let decoupled = self.bool()?;
        let step = self.u64()?;
        let mut bufs = [Vec::new(), Vec::new()];
        for buf in &mut bufs {
            let n = self.len(16)?;
            *buf = (0..n).map(|_| self.tensor()).collect::<Result<_>>()?;
            let shapes_match = buf.len() == params.len()
                && buf.iter().zip(params.iter()).all(|(t, (_, _, p))| t.shape() == p.shape());
            if !shapes_match {
                return Err(self.err("optimizer moments do not match parameters"));
            }
        }
        let [m, v] = bufs;
        Ok(Adam {
            base_lr: f[0],
            lr: f[1],
            beta1: f[2],
            beta2: f[3],
            eps: f[4],
            weight_decay: f[5],
            decoupled,
            step,
            m,
            v,
        })
    }
    fn pairs(&mut self, store: &ParamStore) -> Result<Vec<(ParamId, ParamId)>> {
        let n = self.len(16)?;
        (0..n).map(|_| Ok((self.id(store)?, self.id(store)?))).collect()
    }
    fn model(&mut self) -> Result<Model> {
        let dims = Dims {
            num_users: self.usize()?,
            num_items: self.usize()?,
            modality_dims: self.ids()?,
            dim: self.usize()?,
            heads: self.usize()?,
        };
        let gen = self.params()?;
        let layout = Layout {
            user_emb: self.id(&gen)?,
            item_emb: self.id(&gen)?,
            transforms: self.pairs(&gen)?,
            attention: self.pairs(&gen)?,
        };
        let critic = self.critic()?;
        Ok(Model {
            dims,
            gen,
            layout,
            critic,
        })
    }
}

fn write_record(w: &mut Writer, r: &EpochRecord) {
    w.usize(r.epoch);
    for v in [r.l_bpr, r.l_cl, r.l_g, r.l_d, r.l_total, r.recall, r.ndcg, r.precision] {
        w.f64(v);
    }
}

fn read_record(r: &mut Reader) -> Result<EpochRecord> {
    Ok(EpochRecord {
        epoch: r.usize()?,
        l_bpr: r.f64()?,
        l_cl: r.f64()?,
        l_g: r.f64()?,
        l_d: r.f64()?,
        l_total: r.f64()?,
        recall: r.f64()?,
        ndcg: r.f64()?,
        precision: r.f64()?,
    })
}

pub fn encode(cfg: &Config, data: DataShape, state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.0.extend_from_slice(&config::hash(cfg));
    w.str(&config::canonical(cfg));
    w.usize(data.users);
    w.usize(data.items);
    w.usize(data.edges);
    w.model(&state.model);
    w.adam(&state.gen_opt);
    w.adam(&state.disc_opt);
    let rng = RngState::capture(&state.rng);
    w.0.extend_from_slice(&rng.seed);
    w.u64(rng.stream);
    w.0.extend_from_slice(&rng.word_pos.to_le_bytes());
    w.usize(state.epoch);
    w.usize(state.stale_epochs);
    w.bool(state.stopped);
    w.usize(state.neighbors.len());
    for nb in &state.neighbors {
        for lists in [&nb.user, &nb.item] {
            w.usize(lists.len());
            lists.iter().for_each(|l| w.ids(l));
        }
    }
    match &state.best {
        None => w.u8(0),
        Some(s) => {
            w.u8(1);
            w.usize(s.epoch);
            w.f64(s.recall);
            w.params(&s.gen);
            w.critic(&s.critic);
        }
    }
    w.usize(state.log.len());
    state.log.iter().for_each(|r| write_record(&mut w, r));
    let digest: [u8; 32] = Sha256::digest(&w.0).into();
    w.0.extend_from_slice(&digest);
    w.0
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: format!("magic {found:?}"),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: format!("version {version}, expected {VERSION}"),
        });
    }
    if bytes.len() < 8 + 32 + 32 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "truncated checkpoint".into(),
        });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "checksum mismatch (corrupt payload)".into(),
        });
    }
    let mut r = Reader { buf: body, pos: 8, path };
    let stored_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let config = config::parse(&r.str()?)?;
    if config::hash(&config) != stored_hash {
        return Err(r.err("config hash mismatch"));
    }
    let data = DataShape {
        users: r.usize()?,
        items: r.usize()?,
        edges: r.usize()?,
    };
    let model = r.model()?;
    let gen_opt = r.adam(&model.gen)?;
    let disc_opt = r.adam(&model.critic.params)?;
    let rng = RngState {
        seed: r.take(32)?.try_into().unwrap(),
        stream: r.u64()?,
        word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
    }
    .restore();
    let epoch = r.usize()?;
    let stale_epochs = r.usize()?;
    let stopped = r.bool()?;
    let n = r.len(16)?;
    let mut neighbors = Vec::with_capacity(n);
    for _ in 0..n {
        let mut halves = [Vec::new(), Vec::new()];
        for h in &mut halves {
            let m = r.len(8)?;
            *h = (0..m).map(|_| r.ids()).collect::<Result<_>>()?;
        }
        let [user, item] = halves;
        neighbors.push(SemanticNeighborhood { user, item });
    }
    let best = match r.u8()? {
        0 => None,
        1 => Some(Snapshot {
            epoch: r.usize()?,
            recall: r.f64()?,
            gen: r.params()?,
            critic: r.critic()?,
        }),
        t => return Err(r.err(format!("bad snapshot tag {t}"))),
    };
    let n = r.len(72)?;
    let log = (0..n).map(|_| read_record(&mut r)).collect::<Result<_>>()?;
    if r.pos != body.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Checkpoint {
        config,
        data,
        state: TrainState {
            model,
            gen_opt,
            disc_opt,
            rng,
            epoch,
            neighbors,
            best,
            stale_epochs,
            stopped,
            log,
        },
    })
}

/// Write via a temporary sibling and rename, so an interrupted save leaves
/// the previous checkpoint intact.
pub fn save(path: &Path, cfg: &Config, data: DataShape, state: &TrainState) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(cfg, data, state)).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmssl_core::graph::{generate_synthetic, SyntheticSpec};
    use mmssl_core::trainer::{run_epoch, Dataset};

    fn sample() -> (Config, DataShape, TrainState) {
        let spec = SyntheticSpec {
            num_users: 16,
            num_items: 12,
            modality_dims: vec![6, 4],
            ..SyntheticSpec::default()
        };
        let s = generate_synthetic(&spec, &mut mmssl_core::seeded_rng(1)).unwrap();
        let data = Dataset::new(s.graph, s.features, 1).unwrap();
        let mut cfg = Config::default();
        cfg.train.dim = 8;
        cfg.enc.topk = 3;
        let mut state = TrainState::new(&cfg, &data).unwrap();
        run_epoch(&mut state, &data, &cfg).unwrap();
        (cfg, DataShape::of(&data.graph), state)
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (cfg, shape, state) = sample();
        assert!(state.best.is_some() && !state.neighbors.is_empty());
        let a = encode(&cfg, shape, &state);
        let ck = decode(&a, Path::new("x")).unwrap();
        assert_eq!(ck.state, state);
        assert_eq!(ck.config, cfg);
        assert_eq!(encode(&ck.config, ck.data, &ck.state), a);
    }

    #[test]
    fn wrong_magic_or_version() {
        let (cfg, shape, state) = sample();
        let mut b = encode(&cfg, shape, &state);
        b[4] = 9;
        assert!(matches!(decode(&b, Path::new("x")), Err(Error::Version { .. })));
        b[0] = b'Z';
        assert!(matches!(decode(&b, Path::new("x")), Err(Error::Version { .. })));
    }

    #[test]
    fn corruption_detected() {
        let (cfg, shape, state) = sample();
        let b = encode(&cfg, shape, &state);
        let mut c = b.clone();
        let mid = c.len() / 2;
        c[mid] ^= 1;
        assert!(matches!(decode(&c, Path::new("x")), Err(Error::Format { .. })));
        assert!(decode(&b[..b.len() - 1], Path::new("x")).is_err());
    }
}
