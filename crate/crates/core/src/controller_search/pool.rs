use std::collections::HashMap;
use std::time::Instant;

use parking_lot::Mutex;
use rayon::prelude::*;

use super::reward::RewardFn;
use crate::search_space::{Genome, GenomeKey};

/// Attempts per candidate before it is reported as failed.
pub const MAX_ATTEMPTS: usize = 3;

/// Genome hash to reward; first insert wins.
#[derive(Debug, Default)]
pub struct RewardCache {
    map: Mutex<HashMap<GenomeKey, f64>>,
}

impl RewardCache {
    pub fn new() -> Self {
        RewardCache::default()
    }

    pub fn get(&self, key: &GenomeKey) -> Option<f64> {
        self.map.lock().get(key).copied()
    }

    /// Stores `reward` unless the key is present; returns the stored value.
    pub fn insert_if_absent(&self, key: GenomeKey, reward: f64) -> f64 {
        *self.map.lock().entry(key).or_insert(reward)
    }

    pub fn len(&self) -> usize {
        self.map.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalOutcome {
    Evaluated { reward: f64, attempts: usize, wall_ms: f64 },
    Cached { reward: f64 },
    Failed { error: String, attempts: usize, wall_ms: f64 },
}

impl EvalOutcome {
    pub fn reward(&self) -> Option<f64> {
        match self {
            EvalOutcome::Evaluated { reward, .. } | EvalOutcome::Cached { reward } => Some(*reward),
            EvalOutcome::Failed { .. } => None,
        }
    }

    pub fn wall_ms(&self) -> f64 {
        match self {
            EvalOutcome::Evaluated { wall_ms, .. } | EvalOutcome::Failed { wall_ms, .. } => *wall_ms,
            EvalOutcome::Cached { .. } => 0.0,
        }
    }
}

/// Worker pool evaluating candidate batches through a shared cache.
pub struct EvalPool<'r> {
    reward: &'r dyn RewardFn,
    pub cache: RewardCache,
    pool: rayon::ThreadPool,
    evaluations: Mutex<usize>,
}

impl<'r> EvalPool<'r> {
    pub fn new(reward: &'r dyn RewardFn, workers: usize) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .expect("thread pool");
        EvalPool { reward, cache: RewardCache::new(), pool, evaluations: Mutex::new(0) }
    }

    /// Number of reward-function calls made so far, retries included.
    pub fn evaluations(&self) -> usize {
        *self.evaluations.lock()
    }

    fn run_one(&self, genome: &Genome) -> EvalOutcome {
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 1..=MAX_ATTEMPTS {
            *self.evaluations.lock() += 1;
            match self.reward.evaluate(genome) {
                Ok(r) => {
                    let reward = self.cache.insert_if_absent(genome.key(), r);
                    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
                    return EvalOutcome::Evaluated { reward, attempts: attempt, wall_ms };
                }
                Err(e) => last = e,
            }
        }
        EvalOutcome::Failed { error: last, attempts: MAX_ATTEMPTS, wall_ms: start.elapsed().as_secs_f64() * 1e3 }
    }

    /// Outcomes in candidate order. Each distinct uncached genome is
    /// evaluated once; repeats within the batch and cache hits are `Cached`.
    pub fn evaluate_batch(&self, candidates: &[Genome]) -> Vec<EvalOutcome> {
        let keys: Vec<GenomeKey> = candidates.iter().map(|g| g.key()).collect();
        let mut first_of: HashMap<&GenomeKey, usize> = HashMap::new();
        let mut todo = Vec::new();
        for (i, k) in keys.iter().enumerate() {
            if self.cache.get(k).is_none() && !first_of.contains_key(k) {
                first_of.insert(k, i);
                todo.push(i);
            }
        }
        let fresh: Vec<EvalOutcome> = self.pool.install(|| todo.par_iter().map(|&i| self.run_one(&candidates[i])).collect());
        let mut out: Vec<Option<EvalOutcome>> = vec![None; candidates.len()];
        for (&i, o) in todo.iter().zip(fresh) {
            out[i] = Some(o);
        }
        for (i, k) in keys.iter().enumerate() {
            if out[i].is_none() {
                out[i] = Some(match self.cache.get(k) {
                    Some(reward) => EvalOutcome::Cached { reward },
                    // the first occurrence in this batch failed
                    None => out[first_of[k]].clone().expect("first occurrence evaluated"),
                });
            }
        }
        out.into_iter().map(|o| o.expect("filled")).collect()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::controller_search::PlantedReward;
    use crate::search_space::{preset, sample_random, SpaceConfig};

    fn candidates(n: usize) -> Vec<Genome> {
        (0..n).map(|i| sample_random(&SpaceConfig::nasfpn(), i as u64).unwrap()).collect()
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let reward = PlantedReward::new(preset("nasfpn-7cell").unwrap());
        let c = candidates(100);
        let one = EvalPool::new(&reward, 1).evaluate_batch(&c);
        let eight = EvalPool::new(&reward, 8).evaluate_batch(&c);
        assert_eq!(one.len(), 100);
        let r1: Vec<_> = one.iter().map(|o| o.reward()).collect();
        let r8: Vec<_> = eight.iter().map(|o| o.reward()).collect();
        assert_eq!(r1, r8);
    }

    #[test]
    fn duplicates_are_evaluated_once() {
        let reward = PlantedReward::new(preset("nasfpn-7cell").unwrap());
        let pool = EvalPool::new(&reward, 2);
        let g = preset("nasfpn-7cell").unwrap();
        let out = pool.evaluate_batch(&[g.clone(), g.clone(), g.clone()]);
        assert_eq!(pool.evaluations(), 1);
        assert!(matches!(out[0], EvalOutcome::Evaluated { .. }));
        assert!(matches!(out[1], EvalOutcome::Cached { reward } if reward == 1.0));
        pool.evaluate_batch(&[g]);
        assert_eq!(pool.evaluations(), 1);
        assert_eq!(pool.cache.len(), 1);
    }

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
    }

    impl RewardFn for Flaky {
        fn evaluate(&self, _: &Genome) -> Result<f64, String> {
            if self.calls.fetch_add(1, Ordering::SeqCst) < self.fail_first {
                Err("worker crashed".into())
            } else {
                Ok(0.5)
            }
        }
    }

    #[test]
    fn retries_then_reports_failure() {
        let flaky = Flaky { calls: AtomicUsize::new(0), fail_first: 2 };
        let pool = EvalPool::new(&flaky, 1);
        let out = pool.evaluate_batch(&candidates(1));
        assert!(matches!(out[0], EvalOutcome::Evaluated { attempts: 3, .. }));
        let dead = Flaky { calls: AtomicUsize::new(0), fail_first: usize::MAX };
        let pool = EvalPool::new(&dead, 1);
        let out = pool.evaluate_batch(&candidates(2));
        assert!(out.iter().all(|o| matches!(o, EvalOutcome::Failed { attempts: 3, .. })));
        assert!(pool.cache.is_empty());
    }
}
