//! On-disk data: interaction lists, feature matrices, synthetic specs and
//! dataset directories.
//!
//! A dataset directory holds `interactions.tsv`, one `feat_<k>_<tag>.mmf`
//! per modality (ordered by `k`) and optionally `manifest.json`.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mmssl_core::graph::{
    InteractionGraph, Modality, ModalityFeatureTable, Projection, SyntheticData, SyntheticSpec,
};
use mmssl_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MMF1";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let rest = line.strip_prefix('#')?.trim();
    let mut users = None;
    let mut items = None;
    for tok in rest.split_whitespace() {
        match tok.split_once('=')? {
            ("users", v) => users = Some(v.parse().ok()?),
            ("items", v) => items = Some(v.parse().ok()?),
            _ => return None,
        }
    }
    Some((users?, items?))
}

/// Parse `user<TAB>item` lines. Counts come from a leading
/// `# users=<n> items=<m>` header, else from the largest ids.
pub fn parse_interactions(text: &str, path: &Path) -> Result<InteractionGraph> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut declared = None;
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    let mut first = true;
    for (n, raw) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if first && line.starts_with('#') {
            first = false;
            declared = Some(
                parse_header(line)
                    .ok_or_else(|| perr(lineno, format!("bad header {line:?}, expected \"# users=<n> items=<m>\"")))?,
            );
            continue;
        }
        first = false;
        let mut fields = line.split('\t');
        let (Some(u), Some(i), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(perr(lineno, format!("expected user<TAB>item, got {line:?}")));
        };
        let u: usize = u
            .trim()
            .parse()
            .map_err(|_| perr(lineno, format!("bad user id {u:?}")))?;
        let i: usize = i
            .trim()
            .parse()
            .map_err(|_| perr(lineno, format!("bad item id {i:?}")))?;
        if let Some((nu, ni)) = declared {
            if u >= nu {
                return Err(perr(lineno, format!("user id {u} out of range (users={nu})")));
            }
            if i >= ni {
                return Err(perr(lineno, format!("item id {i} out of range (items={ni})")));
            }
        }
        if !seen.insert((u, i)) {
            return Err(perr(lineno, format!("duplicate edge ({u}, {i})")));
        }
        edges.push((u, i));
    }
    let (nu, ni) = declared.unwrap_or_else(|| {
        let nu = edges.iter().map(|e| e.0 + 1).max().unwrap_or(0);
        let ni = edges.iter().map(|e| e.1 + 1).max().unwrap_or(0);
        (nu, ni)
    });
    Ok(InteractionGraph::from_edges(nu, ni, &edges)?)
}

pub fn load_interactions(path: &Path) -> Result<InteractionGraph> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_interactions(&text, path)
}

/// Write with a count header, edges in user-major order.
pub fn write_interactions(graph: &InteractionGraph, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let mut out = || -> std::io::Result<()> {
        writeln!(w, "# users={} items={}", graph.num_users(), graph.num_items())?;
        for (u, i) in graph.edges() {
            writeln!(w, "{u}\t{i}")?;
        }
        w.flush()
    };
    out().map_err(Error::io(path))
}

pub fn encode_features(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let ferr = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(ferr("not an MMF1 feature file".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().unwrap()) as usize;
    let (rows, cols) = (word(4), word(8));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(12))
        .ok_or_else(|| ferr(format!("{rows}x{cols} overflows")))?;
    if bytes.len() != expected {
        return Err(ferr(format!(
            "{rows}x{cols} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Tensor::from_vec(rows, cols, data)?)
}

pub fn load_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_features(&bytes, path)
}

pub fn write_features(t: &Tensor, path: &Path) -> Result<()> {
    fs::write(path, encode_features(t)).map_err(Error::io(path))
}

/// Declared counts of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub name: Option<String>,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
}

impl Manifest {
    pub fn of(graph: &InteractionGraph, name: Option<String>) -> Self {
        Self {
            name,
            users: graph.num_users(),
            items: graph.num_items(),
            interactions: graph.num_edges(),
        }
    }

    pub fn sparsity(&self) -> f64 {
        mmssl_core::graph::sparsity(self.users, self.items, self.interactions)
    }

    pub fn check(&self, graph: &InteractionGraph, path: &Path) -> Result<()> {
        let got = Manifest::of(graph, self.name.clone());
        if &got != self {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "manifest declares {}/{}/{} users/items/interactions, data has {}/{}/{}",
                    self.users, self.items, self.interactions, got.users, got.items, got.interactions
                ),
            });
        }
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// JSON form of [`SyntheticSpec`]; missing fields take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecFile {
    pub num_users: usize,
    pub num_items: usize,
    pub modality_dims: Vec<usize>,
    pub latent_dim: usize,
    pub interactions_per_user: usize,
    pub noise: f64,
    pub seed: u64,
    /// `"random"` or `"identity"`.
    pub projection: String,
}

impl Default for SpecFile {
    fn default() -> Self {
        SpecFile::from(&SyntheticSpec::default())
    }
}

impl From<&SyntheticSpec> for SpecFile {
    fn from(s: &SyntheticSpec) -> Self {
        Self {
            num_users: s.num_users,
            num_items: s.num_items,
            modality_dims: s.modality_dims.clone(),
            latent_dim: s.latent_dim,
            interactions_per_user: s.interactions_per_user,
            noise: s.noise,
            seed: s.seed,
            projection: match s.projection {
                Projection::Random => "random",
                Projection::Identity => "identity",
            }
            .into(),
        }
    }
}

impl SpecFile {
    pub fn to_spec(&self) -> Result<SyntheticSpec> {
        let projection = match self.projection.as_str() {
            "random" => Projection::Random,
            "identity" => Projection::Identity,
            p => return Err(Error::Invalid(format!("unknown projection {p:?}"))),
        };
        let spec = SyntheticSpec {
            num_users: self.num_users,
            num_items: self.num_items,
            modality_dims: self.modality_dims.clone(),
            latent_dim: self.latent_dim,
            interactions_per_user: self.interactions_per_user,
            noise: self.noise,
            seed: self.seed,
            projection,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn parse_spec(text: &str, path: &Path) -> Result<SyntheticSpec> {
    let file: SpecFile = serde_json::from_str(text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    file.to_spec()
}

pub fn load_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    parse_spec(&text, path)
}

/// Interactions and features read from a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DataDir {
    pub graph: InteractionGraph,
    pub features: Vec<ModalityFeatureTable>,
    pub manifest: Option<Manifest>,
}

pub fn feature_file_name(k: usize, modality: Modality) -> String {
    format!("feat_{k}_{modality}.mmf")
}

fn feature_files(dir: &Path) -> Result<Vec<(usize, Modality, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_prefix("feat_").and_then(|s| s.strip_suffix(".mmf")) else {
            continue;
        };
        let bad = || Error::Format {
            path: path.clone(),
            msg: "feature files are named feat_<k>_<modality>.mmf".into(),
        };
        let (k, tag) = stem.split_once('_').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        out.push((k, Modality::parse(tag)?, path));
    }
    out.sort_by_key(|f| f.0);
    if let Some(w) = out.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Format {
            path: w[1].2.clone(),
            msg: format!("two feature files with index {}", w[0].0),
        });
    }
    Ok(out)
}

pub fn load_data_dir(dir: &Path) -> Result<DataDir> {
    let graph = load_interactions(&dir.join(INTERACTIONS_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.exists() {
        let m = load_manifest(&manifest_path)?;
        m.check(&graph, &manifest_path)?;
        Some(m)
    } else {
        None
    };
    let mut features = Vec::new();
    for (_, modality, path) in feature_files(dir)? {
        let t = load_features(&path)?;
        if t.rows() != graph.num_items() {
            return Err(Error::Format {
                path,
                msg: format!("{} rows for {} items", t.rows(), graph.num_items()),
            });
        }
        features.push(ModalityFeatureTable::new(modality, t)?);
    }
    if features.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            msg: "no feat_<k>_<modality>.mmf files".into(),
        });
    }
    Ok(DataDir {
        graph,
        features,
        manifest,
    })
}

/// Write a synthetic dataset, plus its planted preference matrix as
/// `planted.mmf`.
pub fn write_synthetic(data: &SyntheticData, dir: &Path, name: Option<String>) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_interactions(&data.graph, &dir.join(INTERACTIONS_FILE))?;
    for (k, f) in data.features.iter().enumerate() {
        write_features(&f.features, &dir.join(feature_file_name(k, f.modality)))?;
    }
    write_features(&data.planted, &dir.join("planted.mmf"))?;
    let manifest = Manifest::of(&data.graph, name);
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(Error::io(&path))
}
