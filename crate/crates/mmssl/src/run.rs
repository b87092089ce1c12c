//! Training and evaluation pipelines over dataset directories.

use std::fs;
use std::path::{Path, PathBuf};

use mmssl_core::ranking::RankingReport;
use mmssl_core::trainer::{
    final_embeddings, fit, semantic_neighbors, Config, Dataset, TrainState,
};

use crate::checkpoint::{self, Checkpoint, DataShape};
use crate::config;
use crate::error::{Error, Result};
use crate::eval::evaluate_parallel;
use crate::formats::{load_data_dir, DataDir};
use crate::log::{self, EpochLine, EvalLine, LogLine};

pub const CHECKPOINT_FILE: &str = "checkpoint.mmck";
pub const LOG_FILE: &str = "metrics.ndjson";
pub const CONFIG_FILE: &str = "config.json";

/// Split a loaded directory with the configured seed.
pub fn dataset(dir: DataDir, cfg: &Config) -> Result<Dataset> {
    Ok(Dataset::new(dir.graph, dir.features, cfg.train.seed)?)
}

/// Ranking of `held_out` by the best retained parameters of `state`.
pub fn evaluate_state(
    state: &TrainState,
    data: &Dataset,
    cfg: &Config,
    held_out: &[(usize, usize)],
    k: usize,
    threads: usize,
) -> Result<RankingReport> {
    let model = state.best_model();
    let neighbors = semantic_neighbors(&model, data, cfg)?;
    let (h_u, h_i) = final_embeddings(&model, data, &neighbors, cfg)?;
    evaluate_parallel(&h_u, &h_i, &data.train, held_out, k, &cfg.eval.buckets, threads)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Test-split ranking of the best parameters; `None` without test edges.
    pub test: Option<RankingReport>,
}

/// Train into `out`, writing the effective config, one log line and one
/// checkpoint per epoch, then a test-split evaluation line. With `resume`
/// the run continues from that checkpoint, whose config must match apart
/// from `train.epochs`.
pub fn train(
    cfg: &Config,
    data_dir: &Path,
    out: &Path,
    resume: Option<&Path>,
    threads: usize,
    mut progress: impl FnMut(&EpochLine),
) -> Result<TrainOutcome> {
    let dir = load_data_dir(data_dir)?;
    let shape = DataShape::of(&dir.graph);
    let data = dataset(dir, cfg)?;
    let state = match resume {
        None => None,
        Some(p) => {
            let ck = checkpoint::load(p)?;
            let mut same = ck.config.clone();
            same.train.epochs = cfg.train.epochs;
            if config::hash(&same) != config::hash(cfg) {
                return Err(Error::Invalid(format!(
                    "{} was written with a different config",
                    p.display()
                )));
            }
            if ck.data != shape {
                return Err(Error::Invalid(format!("{} was trained on other data", p.display())));
            }
            Some(ck.state)
        }
    };
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let cfg_path = out.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&config::to_json(cfg)).expect("config serializes");
    fs::write(&cfg_path, text + "\n").map_err(Error::io(&cfg_path))?;
    let log_path = out.join(LOG_FILE);
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut head = String::new();
    for r in state.iter().flat_map(|s| s.log.iter()) {
        head.push_str(&log::to_line(&LogLine::Epoch(r.into())));
        head.push('\n');
    }
    fs::write(&log_path, head).map_err(Error::io(&log_path))?;

    let mut hook_err = None;
    let fitted = fit(cfg, &data, state, |st, rec| {
        let line = EpochLine::from(rec);
        progress(&line);
        let saved = log::append(&log_path, &LogLine::Epoch(line))
            .and_then(|()| checkpoint::save(&ck_path, cfg, shape, st));
        saved.map_err(|e| {
            hook_err = Some(e);
            mmssl_core::Error::InvalidArgument("epoch hook failed".into())
        })
    });
    let state = fitted.map_err(|e| hook_err.take().unwrap_or(Error::Core(e)))?;
    checkpoint::save(&ck_path, cfg, shape, &state)?;

    let test = if data.split.test.is_empty() {
        None
    } else {
        let r = evaluate_state(&state, &data, cfg, &data.split.test, cfg.eval.k, threads)?;
        log::append(&log_path, &LogLine::Eval(EvalLine::from_report("test", &r)))?;
        Some(r)
    };
    Ok(TrainOutcome {
        state,
        checkpoint: ck_path,
        log: log_path,
        test,
    })
}

/// Test-split metrics of a checkpoint's best parameters at cut-off `k`.
pub fn evaluate_checkpoint(ck: &Checkpoint, data_dir: &Path, k: usize, threads: usize) -> Result<RankingReport> {
    let dir = load_data_dir(data_dir)?;
    if DataShape::of(&dir.graph) != ck.data {
        return Err(Error::Invalid(format!(
            "checkpoint was trained on {} users / {} items / {} interactions; {} differs",
            ck.data.users,
            ck.data.items,
            ck.data.edges,
            data_dir.display()
        )));
    }
    let data = dataset(dir, &ck.config)?;
    evaluate_state(&ck.state, &data, &ck.config, &data.split.test, k, threads)
}
