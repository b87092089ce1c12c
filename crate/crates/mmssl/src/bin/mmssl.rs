use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mmssl::error::{Error, ExitKind, Result};
use mmssl::report::{self, Format};
use mmssl::{checkpoint, config, eval, formats, log, run};
use mmssl_core::graph::generate_synthetic;
use mmssl_core::trainer::{gradcheck_suite, Config, GRADCHECK_LOSSES};

/// Multi-modal self-supervised recommendation: synthesize data, train,
/// evaluate and check gradients.
#[derive(Parser, Debug)]
#[command(name = "mmssl", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train on a dataset directory, writing checkpoint and metrics to --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Rank the test split with a checkpoint's best parameters.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Write a planted-preference dataset.
    Synth {
        /// Synthetic dataset description (JSON); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss on a small instance.
    Gradcheck {
        /// A loss (bpr, cl, g, d, total) or a group (objectives, adversarial).
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Render a metrics log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "text")]
        format: String,
    },
    /// Print counts and sparsity of a dataset directory or manifest.
    Inspect {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => config::load(p)?,
        None => Config::default(),
    };
    let seed = std::env::var(config::SEED_ENV).ok();
    config::apply_seed_override(&mut cfg, seed.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn threads() -> Result<usize> {
    eval::thread_count(std::env::var(eval::THREADS_ENV).ok().as_deref())
}

fn gradcheck_names(module: Option<&str>) -> Result<Vec<&'static str>> {
    Ok(match module {
        None => GRADCHECK_LOSSES.to_vec(),
        Some("objectives") => vec!["bpr", "cl", "total"],
        Some("adversarial") => vec!["g", "d"],
        Some(m) => match GRADCHECK_LOSSES.iter().find(|&&n| n == m) {
            Some(&n) => vec![n],
            None => {
                return Err(Error::Invalid(format!(
                    "unknown module {m:?}; expected objectives, adversarial or one of {GRADCHECK_LOSSES:?}"
                )))
            }
        },
    })
}

fn execute(cmd: Cmd) -> Result<ExitKind> {
    match cmd {
        Cmd::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            let outcome = run::train(&cfg, &data, &out, resume.as_deref(), threads()?, |e| {
                eprintln!(
                    "epoch {:>3}  bpr {:.5}  cl {:.5}  g {:.5}  d {:.5}  R@{} {:.4}",
                    e.epoch, e.l_bpr, e.l_cl, e.l_g, e.l_d, cfg.eval.k, e.recall
                );
            })?;
            if let Some(best) = &outcome.state.best {
                println!("best validation R@{} {:.4} at epoch {}", cfg.eval.k, best.recall, best.epoch);
            }
            if let Some(r) = &outcome.test {
                print!("{}", report::bucket_table(&log::EvalLine::from_report("test", r)));
            }
            println!("checkpoint {}", outcome.checkpoint.display());
            println!("log {}", outcome.log.display());
        }
        Cmd::Eval {
            checkpoint: path,
            data,
            k,
            format,
        } => {
            let format: Format = format.parse()?;
            let ck = checkpoint::load(&path)?;
            let k = k.unwrap_or(ck.config.eval.k);
            if k == 0 {
                return Err(Error::Invalid("--k must be >= 1".into()));
            }
            let r = run::evaluate_checkpoint(&ck, &data, k, threads()?)?;
            let line = log::LogLine::Eval(log::EvalLine::from_report("test", &r));
            print!("{}", report::render(&[line], format));
        }
        Cmd::Synth { spec, out } => {
            let spec = match spec {
                Some(p) => formats::load_spec(&p)?,
                None => mmssl_core::graph::SyntheticSpec::default(),
            };
            let mut rng = mmssl_core::seeded_rng(spec.seed);
            let data = generate_synthetic(&spec, &mut rng)?;
            formats::write_synthetic(&data, &out, Some("synthetic".into()))?;
            println!(
                "wrote {} users, {} items, {} interactions, {} modalities to {}",
                data.graph.num_users(),
                data.graph.num_items(),
                data.graph.num_edges(),
                data.features.len(),
                out.display()
            );
        }
        Cmd::Gradcheck {
            module,
            eps,
            tolerance,
        } => {
            let mut worst = 0.0f64;
            for name in gradcheck_names(module.as_deref())? {
                for (loss, r) in gradcheck_suite(Some(name), eps)? {
                    println!(
                        "{loss:<6} max relative error {:.3e} over {} coordinates (worst {})",
                        r.max_relative_error, r.coordinates, r.worst_param
                    );
                    worst = worst.max(r.max_relative_error);
                }
            }
            if !(worst <= tolerance) {
                eprintln!("gradient check failed: {worst:.3e} > {tolerance:.1e}");
                return Ok(ExitKind::Numeric);
            }
        }
        Cmd::Report { log: path, format } => {
            let format: Format = format.parse()?;
            print!("{}", report::render(&log::read(&path)?, format));
        }
        Cmd::Inspect { data, manifest } => {
            let m = match (data, manifest) {
                (Some(d), _) => {
                    let dir = formats::load_data_dir(&d)?;
                    formats::Manifest::of(&dir.graph, dir.manifest.and_then(|m| m.name))
                }
                (None, Some(p)) => formats::load_manifest(&p)?,
                (None, None) => unreachable!("clap requires one of --data/--manifest"),
            };
            if let Some(name) = &m.name {
                println!("name          {name}");
            }
            println!("users         {}", m.users);
            println!("items         {}", m.items);
            println!("interactions  {}", m.interactions);
            println!("sparsity      {:.3}%", m.sparsity() * 100.0);
        }
    }
    Ok(ExitKind::Ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(ExitKind::Validation as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.cmd) {
        Ok(kind) => ExitCode::from(kind as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_kind() as u8)
        }
    }
}
