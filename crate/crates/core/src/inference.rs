//! Learned-reward relabeling, return normalization and attribution export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{Env, Trajectory};
use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_atomic, write_jsonl, Header, RELABELED};
use crate::model::{ModelKind, RewardModel, Segment};

/// Segments scored per forward pass while relabeling.
const CHUNK: usize = 256;

/// Learned reward of every step of `traj`. Step `t` is scored from the
/// window of the last `h` transitions ending at `t` (the available prefix
/// near the start) and takes the final per-step reward of that window.
pub fn relabel(model: &RewardModel, traj: &Trajectory, h: usize) -> Result<Vec<f64>> {
    Ok(relabel_all(model, std::slice::from_ref(traj), h)?.remove(0))
}

/// [`relabel`] over many trajectories, batching windows of equal length.
pub fn relabel_all(model: &RewardModel, trajs: &[Trajectory], h: usize) -> Result<Vec<Vec<f64>>> {
    if h == 0 {
        return Err(Error::Config("history length must be positive".into()));
    }
    if let Some(max) = model.max_len() {
        if h > max {
            return Err(Error::Config(format!("history {h} exceeds model segment length {max}")));
        }
    }
    let mut out: Vec<Vec<f64>> = trajs.iter().map(|t| vec![0.0; t.len()]).collect();
    if model.kind() == ModelKind::Mr {
        // Markovian: the window makes no difference.
        for (traj, slot) in trajs.iter().zip(out.iter_mut()) {
            if !traj.is_empty() {
                *slot = model.score(&traj.segment(0, traj.len())?)?.rewards;
            }
        }
        return Ok(out);
    }
    let mut by_len: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, traj) in trajs.iter().enumerate() {
        for t in 0..traj.len() {
            let len = (t + 1).min(h);
            by_len.entry(len).or_default().push((i, t));
        }
    }
    for (len, jobs) in by_len {
        for chunk in jobs.chunks(CHUNK) {
            let segs = chunk
                .iter()
                .map(|&(i, t)| trajs[i].segment(t + 1 - len, len))
                .collect::<Result<Vec<Segment>>>()?;
            let refs: Vec<&Segment> = segs.iter().collect();
            for (&(i, t), s) in chunk.iter().zip(model.score_many(&refs)?) {
                out[i][t] = s.rewards[len - 1];
            }
        }
    }
    Ok(out)
}

/// Constants of the return normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub max_return: f64,
    pub min_return: f64,
    pub max_timestep: usize,
}

impl Normalization {
    /// Best and worst learned returns over `rewards`, one series per
    /// trajectory.
    pub fn from_rewards(rewards: &[Vec<f64>], max_timestep: usize) -> Result<Self> {
        if rewards.is_empty() {
            return Err(Error::Dataset("no trajectories to normalize".into()));
        }
        let returns = rewards.iter().map(|r| r.iter().sum::<f64>());
        let (min, max) = returns.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));
        Self::new(max, min, max_timestep)
    }

    pub fn new(max_return: f64, min_return: f64, max_timestep: usize) -> Result<Self> {
        if !(max_return > min_return) {
            return Err(Error::DegenerateNormalization {
                max: max_return,
                min: min_return,
            });
        }
        Ok(Self {
            max_return,
            min_return,
            max_timestep,
        })
    }

    /// `max_timestep · (r − max_return) / (max_return − min_return)`.
    pub fn apply(&self, r: f64) -> f64 {
        self.max_timestep as f64 * (r - self.max_return) / (self.max_return - self.min_return)
    }
}

pub fn normalize_rewards(rewards: &[Vec<f64>], norm: &Normalization) -> Vec<Vec<f64>> {
    rewards.iter().map(|r| r.iter().map(|&x| norm.apply(x)).collect()).collect()
}

/// Short content hash of a model's checkpoint bytes.
pub fn model_id(model: &RewardModel) -> Result<String> {
    let digest = Sha256::digest(crate::checkpoint::to_bytes(model)?);
    Ok(digest[..8].iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabeledTrajectory {
    pub trajectory: Trajectory,
    /// Raw learned reward per step.
    pub learned: Vec<f64>,
    pub normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabelMeta {
    pub model_id: String,
    pub model_kind: ModelKind,
    pub history: usize,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelabeledDataset {
    pub env: Env,
    pub meta: RelabelMeta,
    pub trajectories: Vec<RelabeledTrajectory>,
}

impl RelabeledDataset {
    /// Relabels and normalizes with the environment's episode limit as
    /// `max_timestep`.
    pub fn build(env: &Env, model: &RewardModel, trajs: &[Trajectory], h: usize) -> Result<Self> {
        let learned = relabel_all(model, trajs, h)?;
        let norm = Normalization::from_rewards(&learned, env.max_steps())?;
        let normalized = normalize_rewards(&learned, &norm);
        Ok(Self {
            env: env.clone(),
            meta: RelabelMeta {
                model_id: model_id(model)?,
                model_kind: model.kind(),
                history: h,
                normalization: norm,
            },
            trajectories: trajs
                .iter()
                .cloned()
                .zip(learned.into_iter().zip(normalized))
                .map(|(trajectory, (learned, normalized))| RelabeledTrajectory {
                    trajectory,
                    learned,
                    normalized,
                })
                .collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header::new(RELABELED, &self.env).with_meta(&self.meta)?;
        write_jsonl(path, Some(&header), &self.trajectories)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, trajectories): (Header, Vec<RelabeledTrajectory>) = read_jsonl(path, RELABELED)?;
        let meta: RelabelMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::Dataset(format!("{}: bad relabel metadata: {e}", path.display())))?;
        for r in &trajectories {
            r.trajectory.validate()?;
            if r.learned.len() != r.trajectory.len() || r.normalized.len() != r.trajectory.len() {
                return Err(Error::Dataset(format!(
                    "relabeled trajectory {} has mismatched reward length",
                    r.trajectory.id
                )));
            }
        }
        Ok(Self {
            env: header.env,
            meta,
            trajectories,
        })
    }

    /// Normalized reward series, one per trajectory.
    pub fn rewards(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().map(|r| r.normalized.clone()).collect()
    }
}

/// `t,reward,weight` rows for one segment, preceded by `#` metadata lines.
pub fn attribution_csv(model: &RewardModel, seg: &Segment) -> Result<String> {
    let scored = model.score(seg)?;
    let attr = scored
        .attribution
        .ok_or_else(|| Error::Config("attribution needs a transformer model".into()))?;
    let mut out = String::new();
    let _ = writeln!(out, "# env={}", seg.env_id);
    let _ = writeln!(out, "# trajectory={}", seg.trajectory_id);
    let _ = writeln!(out, "# start={}", seg.start);
    let _ = writeln!(out, "# length={}", seg.len());
    let _ = writeln!(out, "# score={:?}", scored.score);
    out.push_str("t,reward,weight\n");
    for (t, (r, w)) in attr.rewards.iter().zip(&attr.weights).enumerate() {
        let _ = writeln!(out, "{t},{r:?},{w:?}");
    }
    Ok(out)
}

pub fn export_attribution(model: &RewardModel, seg: &Segment, path: &Path) -> Result<()> {
    write_atomic(path, attribution_csv(model, seg)?.as_bytes())
}

/// Parses the rows written by [`export_attribution`].
pub fn read_attribution(text: &str) -> Result<Vec<(usize, f64, f64)>> {
    let bad = |l: &str| Error::Format(format!("bad attribution row `{l}`"));
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("t,"))
        .map(|l| {
            let mut it = l.split(',');
            let mut next = || it.next().ok_or_else(|| bad(l));
            let t = next()?.parse().map_err(|_| bad(l))?;
            let r = next()?.parse().map_err(|_| bad(l))?;
            let w = next()?.parse().map_err(|_| bad(l))?;
            Ok((t, r, w))
        })
        .collect()
}

/// Rank (0 = largest) of `weights[t]` within its segment.
pub fn weight_rank(weights: &[f64], t: usize) -> usize {
    weights.iter().filter(|&&w| w > weights[t]).count()
}
