use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pref_transformer::io::{read_trajectories, resolve, DATA_ROOT_VAR};
use pref_transformer::model::ModelKind;
use pref_transformer::pipeline::{self as p, PipelineConfig};
use pref_transformer::server::{serve, LabelServer, ServerConfig};
use pref_transformer::teacher::sample_queries;
use pref_transformer::{Error, Result};

/// Preference reward learning on toy grid worlds.
#[derive(Parser)]
#[command(name = "ptlab", version, after_help = format!("Relative paths resolve against ${DATA_ROOT_VAR} when set."))]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML pipeline config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// grid_nav or key_door.
    #[arg(long, global = true)]
    env: Option<String>,
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    #[arg(long, global = true)]
    segment_len: Option<usize>,
    #[arg(long, global = true)]
    queries: Option<usize>,
    /// Teacher rationality; omit for the deterministic teacher.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out episodes and label queries with the scripted teacher.
    GenData {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train a reward model on a preference file.
    Train {
        /// Defaults to <out>/preferences.jsonl.
        #[arg(long)]
        preferences: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Tabular success rate under learned (or true) rewards.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Preferences for predictor accuracy.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Evaluate with the ground-truth reward instead of a model.
        #[arg(long)]
        true_reward: bool,
    },
    /// Write learned and normalized rewards for every transition.
    Relabel {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Serve queries to a human labeler over HTTP.
    LabelServe {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Label log; defaults to <out>/human_preferences.jsonl.
        #[arg(long)]
        preferences: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Stop after this many labels.
        #[arg(long)]
        quota: Option<usize>,
    },
    /// Export per-step rewards and importance weights of one segment.
    Attribute {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        trajectory: u64,
        #[arg(long, default_value_t = 0)]
        start: usize,
    },
}

fn config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(path) => PipelineConfig::load(&resolve(path))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(e) = &c.env {
        cfg.env = e.clone();
    }
    if let Some(m) = c.model {
        cfg.model = m;
    }
    if let Some(h) = c.segment_len {
        cfg.segment_len = h;
    }
    if let Some(q) = c.queries {
        cfg.queries = q;
    }
    if c.beta.is_some() {
        cfg.beta = c.beta;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli.common)?;
    let out = resolve(&cli.common.out);
    let or = |p: Option<PathBuf>, name: &str| p.map_or_else(|| out.join(name), resolve);
    match cli.command {
        Command::GenData { episodes } => {
            if let Some(n) = episodes {
                cfg.episodes = n;
            }
            let d = p::gen_data(&cfg, &out)?;
            println!(
                "{} episodes, {} preferences, {} test preferences -> {}",
                d.trajectories.len(),
                d.preferences.len(),
                d.test_preferences.len(),
                out.display()
            );
        }
        Command::Train { preferences, steps } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let t = p::train_stage(&cfg, &or(preferences, p::PREFERENCES_FILE), &out)?;
            if let Some(m) = t.history.last() {
                println!(
                    "step {} loss {:.4} val_loss {} val_accuracy {}",
                    m.step,
                    m.loss,
                    m.val_loss.map_or("-".into(), |v| format!("{v:.4}")),
                    m.val_accuracy.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::Eval {
            checkpoint,
            data,
            test,
            true_reward,
        } => {
            let data = or(data, p::TRAJECTORIES_FILE);
            let report = if true_reward {
                p::eval_true(&cfg, &data)?
            } else {
                let test = test.map(resolve);
                p::eval_stage(&cfg, &or(checkpoint, p::CHECKPOINT_FILE), &data, test.as_deref())?
            };
            p::write_report(&report, &out.join(p::REPORT_FILE))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Relabel { checkpoint, data } => {
            let ds = p::relabel_stage(
                &cfg,
                &or(checkpoint, p::CHECKPOINT_FILE),
                &or(data, p::TRAJECTORIES_FILE),
                &out.join(p::RELABELED_FILE),
            )?;
            let n = ds.meta.normalization;
            println!(
                "{} trajectories relabeled; returns in [{:.4}, {:.4}], max_timestep {}",
                ds.trajectories.len(),
                n.min_return,
                n.max_return,
                n.max_timestep
            );
        }
        Command::LabelServe {
            data,
            preferences,
            addr,
            quota,
        } => {
            let (env, trajs) = read_trajectories(&or(data, p::TRAJECTORIES_FILE))?;
            let refs = sample_queries(&trajs, cfg.queries, cfg.segment_len, cfg.seed)?;
            let queries = refs.iter().map(|q| q.query(&trajs)).collect::<Result<Vec<_>>>()?;
            let log = or(preferences, "human_preferences.jsonl");
            let server = LabelServer::new(&env, queries, &log, ServerConfig { quota, ..Default::default() })?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(&addr, e))?;
            let progress = rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|e| Error::io(&addr, e))?;
                eprintln!("serving {} queries on http://{addr}/api/v1/", cfg.queries);
                serve(listener, server).await
            })?;
            println!("{} labels in {}", progress.labeled, log.display());
        }
        Command::Attribute {
            checkpoint,
            data,
            trajectory,
            start,
        } => {
            let path = out.join("attribution.csv");
            p::attribute_stage(
                &or(checkpoint, p::CHECKPOINT_FILE),
                &or(data, p::TRAJECTORIES_FILE),
                trajectory,
                start,
                &path,
            )?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
