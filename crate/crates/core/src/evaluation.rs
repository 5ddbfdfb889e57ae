//! Trial lists, score files and detection metrics (EER and minDCF).

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{apply_transform, BackendBundle, BackendError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics need at least one target and one nontarget trial ({targets} targets, {nontargets} nontargets)")]
    SingleClass { targets: usize, nontargets: usize },
    #[error("no embedding for id {0:?}")]
    MissingId(String),
    #[error("duplicate trial {0:?} {1:?}")]
    DuplicateTrial(String, String),
    #[error("no score for trial {0:?} {1:?}")]
    MissingScore(String, String),
    #[error("score for {0:?} {1:?} is not finite")]
    NonFinite(String, String),
    #[error("{scores} scores but {keys} keys")]
    Length { scores: usize, keys: usize },
    #[error("target prior must lie in (0, 1), got {0}")]
    Prior(f64),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn new(trials: Vec<Trial>) -> Result<Self, EvalError> {
        let mut seen = HashSet::new();
        for t in &trials {
            if !seen.insert((t.enroll.as_str(), t.test.as_str())) {
                return Err(EvalError::DuplicateTrial(t.enroll.clone(), t.test.clone()));
            }
        }
        Ok(TrialList { trials })
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let [enroll, test, key] = fields[..] else {
                return Err(EvalError::Parse {
                    line: i + 1,
                    msg: format!("expected 3 fields, got {}", fields.len()),
                });
            };
            let target = match key {
                "target" => true,
                "nontarget" => false,
                other => {
                    return Err(EvalError::Parse {
                        line: i + 1,
                        msg: format!("unknown key {other:?}"),
                    })
                }
            };
            trials.push(Trial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                target,
            });
        }
        Self::new(trials)
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            let key = if t.target { "target" } else { "nontarget" };
            let _ = writeln!(out, "{} {} {}", t.enroll, t.test, key);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.format())?;
        Ok(())
    }

    /// Trials whose enrollment and test ids both satisfy `keep`.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> TrialList {
        TrialList {
            trials: self
                .trials
                .iter()
                .filter(|t| keep(&t.enroll) && keep(&t.test))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub enroll: String,
    pub test: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<Score>,
}

impl ScoreSet {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut scores = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let [enroll, test, value] = fields[..] else {
                return Err(EvalError::Parse {
                    line: i + 1,
                    msg: format!("expected 3 fields, got {}", fields.len()),
                });
            };
            let score: f64 = value.parse().map_err(|_| EvalError::Parse {
                line: i + 1,
                msg: format!("bad score {value:?}"),
            })?;
            if !score.is_finite() {
                return Err(EvalError::NonFinite(enroll.into(), test.into()));
            }
            scores.push(Score {
                enroll: enroll.to_string(),
                test: test.to_string(),
                score,
            });
        }
        Ok(ScoreSet { scores })
    }

    /// One line per trial, scores at 6 decimal places.
    pub fn format(&self) -> String {
        let mut out = String::new();
        for s in &self.scores {
            let _ = writeln!(out, "{} {} {:.6}", s.enroll, s.test, s.score);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.format())?;
        Ok(())
    }

    /// Scores aligned with `trials`, paired with their keys.
    pub fn align(&self, trials: &TrialList) -> Result<(Vec<f64>, Vec<bool>), EvalError> {
        let index: HashMap<(&str, &str), f64> = self
            .scores
            .iter()
            .map(|s| ((s.enroll.as_str(), s.test.as_str()), s.score))
            .collect();
        let mut scores = Vec::with_capacity(trials.len());
        let mut keys = Vec::with_capacity(trials.len());
        for t in &trials.trials {
            let s = index
                .get(&(t.enroll.as_str(), t.test.as_str()))
                .ok_or_else(|| EvalError::MissingScore(t.enroll.clone(), t.test.clone()))?;
            scores.push(*s);
            keys.push(t.target);
        }
        Ok((scores, keys))
    }
}

/// Scores every trial with the bundle's transform and PLDA model.
pub fn score_trials(
    bundle: &BackendBundle,
    embeddings: &HashMap<String, Vec<f64>>,
    trials: &TrialList,
) -> Result<ScoreSet, EvalError> {
    let scorer = bundle.scorer()?;
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut scores = Vec::with_capacity(trials.len());
    for t in &trials.trials {
        for id in [t.enroll.as_str(), t.test.as_str()] {
            if !cache.contains_key(id) {
                let x = embeddings.get(id).ok_or_else(|| EvalError::MissingId(id.to_string()))?;
                cache.insert(id, apply_transform(&bundle.transform, x)?);
            }
        }
        let score = scorer.score(&cache[t.enroll.as_str()], &cache[t.test.as_str()])?;
        if !score.is_finite() {
            return Err(EvalError::NonFinite(t.enroll.clone(), t.test.clone()));
        }
        scores.push(Score {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
            score,
        });
    }
    Ok(ScoreSet { scores })
}

/// (P_miss, P_fa) at ±∞ and at the midpoint between each pair of consecutive
/// distinct scores, with P_miss non-decreasing. A trial is accepted when its
/// score exceeds the threshold.
pub fn operating_points(scores: &[f64], keys: &[bool]) -> Result<Vec<(f64, f64)>, EvalError> {
    if scores.len() != keys.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            keys: keys.len(),
        });
    }
    let targets = keys.iter().filter(|&&k| k).count();
    let nontargets = keys.len() - targets;
    if targets == 0 || nontargets == 0 {
        return Err(EvalError::SingleClass { targets, nontargets });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (nt, nn) = (targets as f64, nontargets as f64);
    let (mut misses, mut rejected_nontargets) = (0usize, 0usize);
    let mut points = vec![(0.0, 1.0)];
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        while i < order.len() && scores[order[i]] == value {
            if keys[order[i]] {
                misses += 1;
            } else {
                rejected_nontargets += 1;
            }
            i += 1;
        }
        points.push((misses as f64 / nt, (nontargets - rejected_nontargets) as f64 / nn));
    }
    Ok(points)
}

/// Equal error rate in percent, interpolating linearly between the bracketing
/// operating points.
pub fn compute_eer(scores: &[f64], keys: &[bool]) -> Result<f64, EvalError> {
    let points = operating_points(scores, keys)?;
    let k = points
        .iter()
        .position(|&(m, f)| m >= f)
        .expect("the reject-all point has P_miss >= P_fa");
    let (m1, f1) = points[k];
    if m1 == f1 || k == 0 {
        return Ok(100.0 * m1);
    }
    let (m0, f0) = points[k - 1];
    let alpha = (f0 - m0) / ((m1 - m0) - (f1 - f0));
    Ok(100.0 * (m0 + alpha * (m1 - m0)))
}

/// Minimum over thresholds of `p·P_miss + (1−p)·P_fa`, divided by `p`.
pub fn compute_min_dcf(scores: &[f64], keys: &[bool], p_target: f64) -> Result<f64, EvalError> {
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(EvalError::Prior(p_target));
    }
    let points = operating_points(scores, keys)?;
    let best = points
        .iter()
        .map(|&(m, f)| p_target * m + (1.0 - p_target) * f)
        .fold(f64::INFINITY, f64::min);
    Ok(best / p_target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub eer_pct: f64,
    pub min_dcf_001: f64,
    pub min_dcf_0005: f64,
    pub dcf_avg: f64,
}

pub fn evaluate(scores: &[f64], keys: &[bool]) -> Result<Report, EvalError> {
    let eer_pct = compute_eer(scores, keys)?;
    let min_dcf_001 = compute_min_dcf(scores, keys, 0.01)?;
    let min_dcf_0005 = compute_min_dcf(scores, keys, 0.005)?;
    Ok(Report {
        eer_pct,
        min_dcf_001,
        min_dcf_0005,
        dcf_avg: 0.5 * (min_dcf_001 + min_dcf_0005),
    })
}

pub fn evaluate_trials(scores: &ScoreSet, trials: &TrialList) -> Result<Report, EvalError> {
    let (s, k) = scores.align(trials)?;
    evaluate(&s, &k)
}
