//! Search drivers: random search, regularized evolution and an LSTM
//! controller trained with PPO, sharing a parallel evaluation pool and a
//! reward cache.

mod controller;
mod drivers;
mod pool;
mod reward;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{Genome, SpaceError};

pub use controller::{Controller, ControllerConfig, DecisionKind, PpoConfig, Rollout};
pub use drivers::{run_evolution, run_random_search, run_rnn_ppo, EvolutionConfig, Sampler, SearchOutcome};
pub use pool::{EvalOutcome, EvalPool, RewardCache, MAX_ATTEMPTS};
pub use reward::{PlantedReward, ProxyReward, RewardFn};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("invalid-search-config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("evaluation-failed: gave up after {failures} failed evaluations ({last})")]
    EvaluationFailed { failures: usize, last: String },
}

impl SearchError {
    pub fn code(&self) -> &'static str {
        match self {
            SearchError::InvalidConfig(_) => "invalid-search-config",
            SearchError::Space(_) => "space-error",
            SearchError::EvaluationFailed { .. } => "evaluation-failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordStatus {
    Evaluated,
    Cached,
    EvaluationFailed,
}

/// One evaluated (or failed) candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub iteration: usize,
    pub candidate: usize,
    pub genome_hash: String,
    pub status: RecordStatus,
    pub reward: Option<f64>,
    pub wall_ms: f64,
    pub unique_so_far: usize,
    pub total_so_far: usize,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchLog {
    pub records: Vec<SearchRecord>,
    /// PPO surrogate loss per update epoch.
    pub controller_loss: Vec<f64>,
    #[serde(skip)]
    seen: HashSet<String>,
}

impl SearchLog {
    pub fn new() -> Self {
        SearchLog::default()
    }

    /// Appends a record; failed evaluations do not count as samples.
    pub fn push(&mut self, iteration: usize, candidate: usize, genome: &Genome, outcome: &EvalOutcome) {
        let hash = genome.key().0;
        let (status, reward) = match outcome {
            EvalOutcome::Evaluated { reward, .. } => (RecordStatus::Evaluated, Some(*reward)),
            EvalOutcome::Cached { reward } => (RecordStatus::Cached, Some(*reward)),
            EvalOutcome::Failed { .. } => (RecordStatus::EvaluationFailed, None),
        };
        let prev_best = self.best_reward().unwrap_or(f64::NEG_INFINITY);
        if reward.is_some() {
            self.seen.insert(hash.clone());
        }
        let total = self.total() + usize::from(reward.is_some());
        self.records.push(SearchRecord {
            iteration,
            candidate,
            genome_hash: hash,
            status,
            reward,
            wall_ms: outcome.wall_ms(),
            unique_so_far: self.seen.len(),
            total_so_far: total,
            best_so_far: reward.map_or(prev_best, |r| r.max(prev_best)),
        });
    }

    pub fn total(&self) -> usize {
        self.records.last().map_or(0, |r| r.total_so_far)
    }

    pub fn unique(&self) -> usize {
        self.records.last().map_or(0, |r| r.unique_so_far)
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.status == RecordStatus::EvaluationFailed).count()
    }

    pub fn best_reward(&self) -> Option<f64> {
        self.records.last().map(|r| r.best_so_far).filter(|b| b.is_finite())
    }

    /// Rewards of the successful samples, in order.
    pub fn rewards(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.reward).collect()
    }

    /// Share of never-before-seen genomes among samples `from..to`
    /// (indices into the successful samples).
    pub fn novelty_ratio(&self, from: usize, to: usize) -> f64 {
        let ok: Vec<&SearchRecord> = self.records.iter().filter(|r| r.reward.is_some()).collect();
        let to = to.min(ok.len());
        if from >= to {
            return 0.0;
        }
        let before = if from == 0 { 0 } else { ok[from - 1].unique_so_far };
        (ok[to - 1].unique_so_far - before) as f64 / (to - from) as f64
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("record serializes") + "\n").collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::preset;

    #[test]
    fn log_counts() {
        let g = preset("nasfpn-7cell").unwrap();
        let h = preset("vanilla-fpn").unwrap();
        let mut log = SearchLog::new();
        log.push(0, 0, &g, &EvalOutcome::Evaluated { reward: 0.3, attempts: 1, wall_ms: 1.0 });
        log.push(0, 1, &h, &EvalOutcome::Failed { error: "x".into(), attempts: 3, wall_ms: 1.0 });
        log.push(0, 2, &g, &EvalOutcome::Cached { reward: 0.3 });
        log.push(1, 3, &h, &EvalOutcome::Evaluated { reward: 0.1, attempts: 2, wall_ms: 1.0 });
        assert_eq!((log.total(), log.unique(), log.failures()), (3, 2, 1));
        assert_eq!(log.best_reward(), Some(0.3));
        assert_eq!(log.rewards(), vec![0.3, 0.3, 0.1]);
        assert_eq!(log.novelty_ratio(0, 2), 0.5);
        assert_eq!(log.to_jsonl().lines().count(), 4);
        let mut prev = (0, 0);
        for r in &log.records {
            assert!(r.unique_so_far <= r.total_so_far);
            assert!(r.unique_so_far >= prev.0 && r.total_so_far >= prev.1);
            prev = (r.unique_so_far, r.total_so_far);
        }
    }
}
