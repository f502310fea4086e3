//! File-to-file pipeline stages and their shared configuration.
//!
//! Every stage reads its inputs from files and writes its outputs atomically,
//! so any stage can be re-run on its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::env::{generate_dataset, Env, Trajectory};
use crate::error::{Error, Result};
use crate::inference::{export_attribution, model_id, RelabeledDataset};
use crate::io::{read_preferences, read_trajectories, resolve, write_atomic, write_preferences, write_trajectories};
use crate::model::{LstmConfig, MlpConfig, ModelKind, ModelSpec, RewardModel, TransformerConfig};
use crate::preference::{evaluate_accuracy, Evaluation, PreferenceRecord};
use crate::tabular::{tabular_eval, true_rewards, EvalReport, TabularConfig};
use crate::teacher::{sample_queries, ScriptedTeacher};
use crate::train::{train, MetricRecord, TrainConfig};

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const PREFERENCES_FILE: &str = "preferences.jsonl";
pub const TEST_PREFERENCES_FILE: &str = "test_preferences.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RELABELED_FILE: &str = "relabeled.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// Seed offsets so that each stage draws from its own stream.
const QUERY_SEED: u64 = 1;
const LABEL_SEED: u64 = 2;
const TEST_DATA_SEED: u64 = 3;
const TEST_QUERY_SEED: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub env: String,
    pub seed: u64,
    pub episodes: usize,
    pub queries: usize,
    /// Queries in the held-out test set, cut from separately generated
    /// episodes.
    pub test_queries: usize,
    pub segment_len: usize,
    /// Boltzmann rationality; absent means the deterministic teacher.
    pub beta: Option<f64>,
    pub model: ModelKind,
    pub transformer: TransformerConfig,
    pub mlp: MlpConfig,
    pub lstm: LstmConfig,
    pub train: TrainConfig,
    pub tabular: TabularConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            env: "key_door".into(),
            seed: 0,
            episodes: 500,
            queries: 500,
            test_queries: 1000,
            segment_len: 25,
            beta: None,
            model: ModelKind::Pt,
            transformer: TransformerConfig::default(),
            mlp: MlpConfig::default(),
            lstm: LstmConfig::default(),
            train: TrainConfig::default(),
            tabular: TabularConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the master seed and the training and evaluation seeds with it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.tabular.seed = seed;
        self
    }

    pub fn environment(&self) -> Result<Env> {
        Env::by_name(&self.env)
    }

    pub fn teacher(&self) -> Result<ScriptedTeacher> {
        match self.beta {
            None => Ok(ScriptedTeacher::deterministic()),
            Some(b) if b.is_infinite() && b > 0.0 => Ok(ScriptedTeacher::deterministic()),
            Some(b) => ScriptedTeacher::boltzmann(b),
        }
    }

    pub fn spec(&self) -> ModelSpec {
        match self.model {
            ModelKind::Pt => ModelSpec::Pt(TransformerConfig {
                segment_len: self.segment_len,
                ..self.transformer.clone()
            }),
            ModelKind::Mr => ModelSpec::Mr(self.mlp.clone()),
            ModelKind::Nmr => ModelSpec::Nmr(self.lstm.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.environment()?.validate()?;
        if self.episodes == 0 || self.segment_len == 0 {
            return Err(Error::Config("episodes and segment length must be positive".into()));
        }
        self.teacher()?;
        self.spec().validate()?;
        self.train.validate()
    }
}

/// Trajectories plus scripted training and test preferences.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub env: Env,
    pub trajectories: Vec<Trajectory>,
    pub preferences: Vec<PreferenceRecord>,
    pub test_preferences: Vec<PreferenceRecord>,
}

pub fn generate(cfg: &PipelineConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let env = cfg.environment()?;
    let teacher = cfg.teacher()?;
    let trajectories = generate_dataset(&env, cfg.episodes, cfg.seed);
    let label = |trajs: &[Trajectory], n: usize, qseed: u64| -> Result<Vec<PreferenceRecord>> {
        let refs = sample_queries(trajs, n, cfg.segment_len, qseed)?;
        teacher.label_queries(trajs, &refs, cfg.seed.wrapping_add(LABEL_SEED))
    };
    let preferences = label(&trajectories, cfg.queries, cfg.seed.wrapping_add(QUERY_SEED))?;
    let test_preferences = if cfg.test_queries == 0 {
        Vec::new()
    } else {
        let held_out = generate_dataset(&env, cfg.episodes, cfg.seed.wrapping_add(TEST_DATA_SEED << 32));
        label(&held_out, cfg.test_queries, cfg.seed.wrapping_add(TEST_QUERY_SEED))?
    };
    Ok(GeneratedData {
        env,
        trajectories,
        preferences,
        test_preferences,
    })
}

/// Writes `trajectories.jsonl`, `preferences.jsonl` and
/// `test_preferences.jsonl` into `dir`.
pub fn gen_data(cfg: &PipelineConfig, dir: &Path) -> Result<GeneratedData> {
    let data = generate(cfg)?;
    write_trajectories(&dir.join(TRAJECTORIES_FILE), &data.env, &data.trajectories)?;
    write_preferences(&dir.join(PREFERENCES_FILE), &data.env, &data.preferences)?;
    write_preferences(&dir.join(TEST_PREFERENCES_FILE), &data.env, &data.test_preferences)?;
    Ok(data)
}

pub fn metrics_jsonl(history: &[MetricRecord]) -> Result<Vec<u8>> {
    crate::io::jsonl_bytes(None, history)
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: RewardModel,
    pub history: Vec<MetricRecord>,
}

/// Trains on `preferences` and writes `model.ckpt` and `metrics.jsonl` into
/// `dir`.
pub fn train_stage(cfg: &PipelineConfig, preferences: &Path, dir: &Path) -> Result<Trained> {
    cfg.validate()?;
    let (env, records) = read_preferences(preferences)?;
    if env.id() != cfg.environment()?.id() {
        return Err(Error::Config(format!(
            "{} holds `{}` data but the config names `{}`",
            preferences.display(),
            env.id(),
            cfg.env
        )));
    }
    let out = train(&records, cfg.spec(), &cfg.train)?;
    let metrics = metrics_jsonl(&out.history)?;
    let ckpt = checkpoint::to_bytes(&out.model)?;
    write_atomic(&dir.join(METRICS_FILE), &metrics)?;
    write_atomic(&dir.join(CHECKPOINT_FILE), &ckpt)?;
    Ok(Trained {
        model: out.model,
        history: out.history,
    })
}

pub fn relabel_stage(cfg: &PipelineConfig, checkpoint_path: &Path, trajectories: &Path, out: &Path) -> Result<RelabeledDataset> {
    let (env, trajs) = read_trajectories(trajectories)?;
    let model = checkpoint::load_expecting(
        checkpoint_path,
        crate::model::InputDims {
            state_dim: env.state_dim(),
            action_dim: env.action_dim(),
        },
    )?;
    let ds = RelabeledDataset::build(&env, &model, &trajs, cfg.segment_len)?;
    ds.save(out)?;
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub env: String,
    /// `"true"` or the content hash of the evaluated model.
    pub reward: String,
    pub success_rate: f64,
    pub mean_return: f64,
    pub episodes: usize,
    pub gamma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
}

fn report(cfg: &PipelineConfig, env: &Env, reward: String, r: EvalReport, acc: Option<Evaluation>) -> Report {
    Report {
        env: env.id().into(),
        reward,
        success_rate: r.success_rate,
        mean_return: r.mean_return,
        episodes: r.episodes,
        gamma: cfg.tabular.gamma,
        test_accuracy: acc.and_then(|e| e.accuracy),
        test_loss: acc.map(|e| e.loss),
    }
}

/// Tabular evaluation with the ground-truth task reward.
pub fn eval_true(cfg: &PipelineConfig, trajectories: &Path) -> Result<Report> {
    let (env, trajs) = read_trajectories(trajectories)?;
    let (_, r) = tabular_eval(&env, &trajs, &true_rewards(&trajs), &cfg.tabular)?;
    Ok(report(cfg, &env, "true".into(), r, None))
}

/// Tabular evaluation of a relabeled dataset, plus predictor accuracy on
/// `test` preferences when given.
pub fn eval_relabeled(
    cfg: &PipelineConfig,
    relabeled: &RelabeledDataset,
    model: Option<&RewardModel>,
    test: Option<&[PreferenceRecord]>,
) -> Result<Report> {
    let trajs: Vec<Trajectory> = relabeled.trajectories.iter().map(|r| r.trajectory.clone()).collect();
    let (_, r) = tabular_eval(&relabeled.env, &trajs, &relabeled.rewards(), &cfg.tabular)?;
    let acc = match (model, test) {
        (Some(m), Some(t)) if !t.is_empty() => Some(evaluate_accuracy(m, t)?),
        _ => None,
    };
    Ok(report(cfg, &relabeled.env, relabeled.meta.model_id.clone(), r, acc))
}

/// Relabels `trajectories` with the checkpoint and evaluates.
pub fn eval_stage(cfg: &PipelineConfig, checkpoint_path: &Path, trajectories: &Path, test: Option<&Path>) -> Result<Report> {
    let model = checkpoint::load(checkpoint_path)?;
    let (env, trajs) = read_trajectories(trajectories)?;
    let relabeled = RelabeledDataset::build(&env, &model, &trajs, cfg.segment_len)?;
    let test = match test {
        Some(p) => Some(read_preferences(p)?.1),
        None => None,
    };
    eval_relabeled(cfg, &relabeled, Some(&model), test.as_deref())
}

pub fn write_report(report: &Report, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn attribute_stage(checkpoint_path: &Path, trajectories: &Path, trajectory: u64, start: usize, out: &Path) -> Result<()> {
    let model = checkpoint::load(checkpoint_path)?;
    let (_, trajs) = read_trajectories(trajectories)?;
    let traj = trajs
        .iter()
        .find(|t| t.id == trajectory)
        .ok_or_else(|| Error::Dataset(format!("no trajectory with id {trajectory}")))?;
    let len = model.max_len().unwrap_or(traj.len()).min(traj.len().saturating_sub(start));
    export_attribution(&model, &traj.segment(start, len)?, out)
}

/// Everything a full run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub history: Vec<MetricRecord>,
    pub learned: Report,
    pub truth: Report,
}

/// gen-data, train, relabel and eval in one directory.
pub fn run_all(cfg: &PipelineConfig, dir: &Path) -> Result<RunOutput> {
    let dir = resolve(dir);
    let data = gen_data(cfg, &dir)?;
    let trained = train_stage(cfg, &dir.join(PREFERENCES_FILE), &dir)?;
    let relabeled = relabel_stage(cfg, &dir.join(CHECKPOINT_FILE), &dir.join(TRAJECTORIES_FILE), &dir.join(RELABELED_FILE))?;
    let learned = eval_relabeled(cfg, &relabeled, Some(&trained.model), Some(&data.test_preferences))?;
    write_report(&learned, &dir.join(REPORT_FILE))?;
    let truth = eval_true(cfg, &dir.join(TRAJECTORIES_FILE))?;
    debug_assert_eq!(learned.reward, model_id(&trained.model)?);
    Ok(RunOutput {
        dir,
        history: trained.history,
        learned,
        truth,
    })
}
