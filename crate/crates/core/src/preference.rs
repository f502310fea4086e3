//! Preference records, the two predictors and accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RewardModel, Segment};
use crate::tape::{check_label, cross_entropy_pair, pair_probability};

/// Who produced a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherTag {
    Human,
    Scripted,
    Boltzmann,
}

/// Two segments shown side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub first: Segment,
    pub second: Segment,
}

impl Query {
    pub fn validate(&self) -> Result<()> {
        self.first.validate()?;
        self.second.validate()?;
        if self.first.len() != self.second.len() || self.first.env_id != self.second.env_id {
            return Err(Error::Dataset(format!(
                "query {} mixes segment lengths or environments",
                self.id
            )));
        }
        Ok(())
    }

    pub fn swapped(&self) -> Query {
        Query {
            id: self.id,
            first: self.second.clone(),
            second: self.first.clone(),
        }
    }
}

/// `y = 0` prefers the first segment, `y = 1` the second, `0.5` is a tie.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub query: Query,
    pub label: f64,
    pub teacher: TeacherTag,
    /// Seconds since the Unix epoch; 0 for synthetic labels.
    pub timestamp: u64,
}

impl PreferenceRecord {
    pub fn new(query: Query, label: f64, teacher: TeacherTag, timestamp: u64) -> Result<Self> {
        let r = Self {
            query,
            label,
            teacher,
            timestamp,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        check_label(self.label)?;
        self.query.validate()
    }
}

/// `P[σ¹ ≻ σ⁰]` from the transformer's weighted-sum logits.
pub fn predict_pt(model: &RewardModel, query: &Query) -> Result<f64> {
    predict_model(model, query)
}

/// `P[σ¹ ≻ σ⁰]` from unweighted reward sums.
pub fn predict_sum(rewards_first: &[f64], rewards_second: &[f64]) -> f64 {
    pair_probability(rewards_first.iter().sum(), rewards_second.iter().sum())
}

/// `P[σ¹ ≻ σ⁰]` under any reward model's native predictor.
pub fn predict_model(model: &RewardModel, query: &Query) -> Result<f64> {
    let scores = model.score_many(&[&query.first, &query.second])?;
    Ok(pair_probability(scores[0].score, scores[1].score))
}

/// Held-out accuracy and mean loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `None` when every label is a tie.
    pub accuracy: Option<f64>,
    pub loss: f64,
    pub decided: usize,
    pub total: usize,
}

/// Scores records in chunks of `chunk` queries per forward pass.
pub fn score_pairs(model: &RewardModel, records: &[PreferenceRecord], chunk: usize) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::with_capacity(records.len());
    for group in records.chunks(chunk.max(1)) {
        let mut segs = Vec::with_capacity(2 * group.len());
        for r in group {
            segs.push(&r.query.first);
            segs.push(&r.query.second);
        }
        let lens_match = segs.iter().all(|s| s.len() == segs[0].len());
        let scores = if lens_match {
            model.score_many(&segs)?
        } else {
            segs.iter().map(|s| model.score(s)).collect::<Result<_>>()?
        };
        out.extend(scores.chunks_exact(2).map(|p| (p[0].score, p[1].score)));
    }
    Ok(out)
}

/// Ties count toward the loss but not the accuracy. A prediction of exactly
/// 0.5 on a decided record counts as wrong.
pub fn evaluate_accuracy(model: &RewardModel, records: &[PreferenceRecord]) -> Result<Evaluation> {
    let scores = score_pairs(model, records, 64)?;
    evaluate_scores(&scores, records)
}

pub(crate) fn evaluate_scores(scores: &[(f64, f64)], records: &[PreferenceRecord]) -> Result<Evaluation> {
    let mut loss = 0.0;
    let (mut decided, mut correct) = (0usize, 0usize);
    for (&(l0, l1), r) in scores.iter().zip(records) {
        loss += cross_entropy_pair(l0, l1, r.label)?;
        if r.label != 0.5 {
            decided += 1;
            let p = pair_probability(l0, l1);
            if (p > 0.5 && r.label == 1.0) || (p < 0.5 && r.label == 0.0) {
                correct += 1;
            }
        }
    }
    Ok(Evaluation {
        accuracy: (decided > 0).then(|| correct as f64 / decided as f64),
        loss: if records.is_empty() {
            0.0
        } else {
            loss / records.len() as f64
        },
        decided,
        total: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_sum_cases() {
        assert_eq!(predict_sum(&[1.0, 2.0], &[3.0, 0.0]), 0.5);
        assert!((predict_sum(&[0.0], &[3f64.ln()]) - 0.75).abs() < 1e-15);
        let a = [0.3, -1.2, 0.7];
        let b = [0.1, 0.4, -0.2];
        let shift = |v: &[f64]| v.iter().map(|x| x + 17.5).collect::<Vec<_>>();
        assert!((predict_sum(&a, &b) - predict_sum(&shift(&a), &shift(&b))).abs() < 1e-12);
    }

    #[test]
    fn ties_are_excluded_from_accuracy() {
        let seg = Segment::new("e", 0, 0, vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let q = Query {
            id: 0,
            first: seg.clone(),
            second: seg,
        };
        let recs = vec![PreferenceRecord::new(q, 0.5, TeacherTag::Scripted, 0).unwrap()];
        let e = evaluate_scores(&[(0.0, 0.0)], &recs).unwrap();
        assert_eq!(e.accuracy, None);
        assert!((e.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_label() {
        let seg = Segment::new("e", 0, 0, vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let q = Query {
            id: 0,
            first: seg.clone(),
            second: seg,
        };
        assert!(PreferenceRecord::new(q, 0.3, TeacherTag::Human, 0).is_err());
    }
}
