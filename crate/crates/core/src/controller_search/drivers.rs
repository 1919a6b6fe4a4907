use std::collections::VecDeque;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::controller::{Controller, ControllerConfig, PpoConfig, Rollout};
use super::pool::{EvalOutcome, EvalPool};
use super::reward::RewardFn;
use super::{SearchError, SearchLog};
use crate::rng::{derive_seed, rng_from};
use crate::search_space::{enumerate, mutate, sample_random, Genome, SpaceConfig, SpaceError, DEFAULT_ENUMERATION_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampler {
    /// Independent uniform draws.
    Iid,
    /// Shuffled enumeration of the whole space, cycled if the budget exceeds it.
    Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub population: usize,
    pub cycles: usize,
    pub tournament_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: Genome,
    pub best_reward: f64,
    pub log: SearchLog,
}

/// Failed evaluations tolerated before a driver gives up.
fn failure_limit(budget: usize) -> usize {
    2 * budget + 10
}

/// Evaluates candidates and logs them in candidate order, tracking the best.
struct Tracker<'p, 'r> {
    pool: &'p EvalPool<'r>,
    log: SearchLog,
    next_candidate: usize,
    best: Option<(Genome, f64)>,
    failures: usize,
    limit: usize,
    last_error: String,
}

impl<'p, 'r> Tracker<'p, 'r> {
    fn new(pool: &'p EvalPool<'r>, limit: usize) -> Self {
        Tracker { pool, log: SearchLog::new(), next_candidate: 0, best: None, failures: 0, limit, last_error: String::new() }
    }

    /// Rewards in input order; `None` marks a failed candidate.
    fn evaluate(&mut self, iteration: usize, genomes: &[Genome]) -> Result<Vec<Option<f64>>, SearchError> {
        let outcomes = self.pool.evaluate_batch(genomes);
        let mut out = Vec::with_capacity(genomes.len());
        for (g, o) in genomes.iter().zip(&outcomes) {
            self.log.push(iteration, self.next_candidate, g, o);
            self.next_candidate += 1;
            if let EvalOutcome::Failed { error, .. } = o {
                self.failures += 1;
                self.last_error = error.clone();
            }
            let r = o.reward();
            if let Some(r) = r {
                if self.best.as_ref().map_or(true, |(_, b)| r > *b) {
                    self.best = Some((g.clone(), r));
                }
            }
            out.push(r);
        }
        if self.failures > self.limit {
            return Err(SearchError::EvaluationFailed { failures: self.failures, last: self.last_error.clone() });
        }
        Ok(out)
    }

    fn finish(self) -> Result<SearchOutcome, SearchError> {
        let (best, best_reward) = self.best.ok_or(SearchError::EvaluationFailed { failures: self.failures, last: self.last_error })?;
        Ok(SearchOutcome { best, best_reward, log: self.log })
    }
}

/// Draws `budget` successful samples; failed ones are replaced by fresh draws.
pub fn run_random_search(
    space: &SpaceConfig,
    reward: &dyn RewardFn,
    budget: usize,
    sampler: Sampler,
    seed: u64,
    workers: usize,
) -> Result<SearchOutcome, SearchError> {
    if budget == 0 {
        return Err(SearchError::InvalidConfig("budget must be at least 1".into()));
    }
    if space.num_inputs() < 2 {
        return Err(SpaceError::Degenerate(space.num_inputs()).into());
    }
    let order: Vec<Genome> = match sampler {
        Sampler::Iid => Vec::new(),
        Sampler::Permutation => {
            let mut all: Vec<Genome> = enumerate(space, DEFAULT_ENUMERATION_CAP)?.collect();
            all.shuffle(&mut rng_from(derive_seed(seed, "permutation", 0)));
            all
        }
    };
    let draw = |i: usize| -> Result<Genome, SearchError> {
        Ok(match sampler {
            Sampler::Iid => sample_random(space, derive_seed(seed, "random", i as u64))?,
            Sampler::Permutation => order[i % order.len()].clone(),
        })
    };
    let pool = EvalPool::new(reward, workers);
    let mut tracker = Tracker::new(&pool, failure_limit(budget));
    let mut done = 0;
    let mut drawn = 0;
    let mut iteration = 0;
    while done < budget {
        let batch: Vec<Genome> = (drawn..drawn + budget - done).map(draw).collect::<Result<_, _>>()?;
        drawn += batch.len();
        done += tracker.evaluate(iteration, &batch)?.iter().filter(|r| r.is_some()).count();
        iteration += 1;
    }
    tracker.finish()
}

/// Regularized evolution: tournament selection, single-decision mutation of
/// the winner, and removal of the oldest member each cycle.
pub fn run_evolution(
    space: &SpaceConfig,
    reward: &dyn RewardFn,
    cfg: &EvolutionConfig,
    seed: u64,
    workers: usize,
) -> Result<SearchOutcome, SearchError> {
    if cfg.population < 2 {
        return Err(SearchError::InvalidConfig("population must be at least 2".into()));
    }
    if cfg.tournament_k == 0 || cfg.tournament_k > cfg.population {
        return Err(SearchError::InvalidConfig("tournament_k must be in 1..=population".into()));
    }
    let pool = EvalPool::new(reward, workers);
    let mut tracker = Tracker::new(&pool, failure_limit(cfg.population + cfg.cycles));
    let mut population: VecDeque<(Genome, f64)> = VecDeque::with_capacity(cfg.population + 1);
    let mut drawn = 0u64;
    while population.len() < cfg.population {
        let batch: Vec<Genome> = (0..cfg.population - population.len())
            .map(|j| sample_random(space, derive_seed(seed, "init", drawn + j as u64)))
            .collect::<Result<_, _>>()?;
        drawn += batch.len() as u64;
        for (g, r) in batch.iter().zip(tracker.evaluate(0, &batch)?) {
            if let Some(r) = r {
                population.push_back((g.clone(), r));
            }
        }
    }
    let mut rng = rng_from(derive_seed(seed, "tournament", 0));
    for cycle in 0..cfg.cycles {
        let picks = index::sample(&mut rng, population.len(), cfg.tournament_k);
        let mut winner = picks.index(0);
        for i in picks.iter() {
            if population[i].1 > population[winner].1 {
                winner = i;
            }
        }
        let parent = population[winner].0.clone();
        let mut attempt = 0u64;
        let child = loop {
            let s = derive_seed(seed, &format!("mutate-{cycle}"), attempt);
            let child = match mutate(&parent, s) {
                Ok(c) => c,
                Err(SpaceError::Immutable) => sample_random(space, s)?,
                Err(e) => return Err(e.into()),
            };
            if let Some(r) = tracker.evaluate(cycle + 1, std::slice::from_ref(&child))?[0] {
                break (child, r);
            }
            attempt += 1;
        };
        population.push_back(child);
        population.pop_front();
    }
    tracker.finish()
}

/// Trains the LSTM controller with PPO on the rewards of its own samples.
#[allow(clippy::too_many_arguments)]
pub fn run_rnn_ppo(
    space: &SpaceConfig,
    reward: &dyn RewardFn,
    controller_cfg: ControllerConfig,
    ppo: &PpoConfig,
    iterations: usize,
    batch_per_iter: usize,
    seed: u64,
    workers: usize,
) -> Result<SearchOutcome, SearchError> {
    if iterations == 0 || batch_per_iter == 0 {
        return Err(SearchError::InvalidConfig("iterations and batch_per_iter must be at least 1".into()));
    }
    if space.num_inputs() < 2 {
        return Err(SpaceError::Degenerate(space.num_inputs()).into());
    }
    if ppo.epochs == 0 || !(ppo.lr > 0.0) || !(ppo.clip > 0.0) {
        return Err(SearchError::InvalidConfig("ppo needs epochs >= 1, lr > 0 and clip > 0".into()));
    }
    let mut controller = Controller::new(space, controller_cfg, &mut rng_from(derive_seed(seed, "controller-init", 0)));
    let pool = EvalPool::new(reward, workers);
    let mut tracker = Tracker::new(&pool, failure_limit(iterations * batch_per_iter));
    let mut rng = rng_from(derive_seed(seed, "controller-sample", 0));
    for it in 0..iterations {
        let mut rollouts: Vec<Rollout> = Vec::with_capacity(batch_per_iter);
        let mut rewards = Vec::with_capacity(batch_per_iter);
        while rollouts.len() < batch_per_iter {
            let batch: Vec<Rollout> = (rollouts.len()..batch_per_iter).map(|_| controller.sample(&mut rng)).collect();
            let genomes: Vec<Genome> = batch.iter().map(|r| r.genome.clone()).collect();
            for (ro, r) in batch.into_iter().zip(tracker.evaluate(it, &genomes)?) {
                if let Some(r) = r {
                    rollouts.push(ro);
                    rewards.push(r);
                }
            }
        }
        let losses = controller.update(&rollouts, &rewards, ppo);
        tracker.log.controller_loss.extend(losses);
    }
    tracker.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller_search::PlantedReward;
    use crate::search_space::{BinaryOp, ConvMode, Level};

    fn toy_space() -> SpaceConfig {
        SpaceConfig::new(vec![Level(3), Level(4), Level(5)], vec![Level(4)], 0, BinaryOp::ALL.to_vec(), 8, ConvMode::Full).unwrap()
    }

    fn oracle(space: &SpaceConfig, reward: &dyn RewardFn) -> f64 {
        enumerate(space, 1000).unwrap().map(|g| reward.evaluate(&g).unwrap()).fold(f64::NEG_INFINITY, f64::max)
    }

    fn target(space: &SpaceConfig, seed: u64) -> PlantedReward {
        PlantedReward::new(sample_random(space, seed).unwrap())
    }

    struct Flaky<'a>(&'a PlantedReward);
    impl RewardFn for Flaky<'_> {
        fn evaluate(&self, g: &Genome) -> Result<f64, String> {
            // every genome whose first cell uses op Sum fails
            if g.cells[0].op == BinaryOp::Sum {
                Err("boom".into())
            } else {
                self.0.evaluate(g)
            }
        }
    }

    #[test]
    fn random_budget_one_returns_the_sample() {
        let space = toy_space();
        let r = target(&space, 1);
        let out = run_random_search(&space, &r, 1, Sampler::Iid, 7, 1).unwrap();
        assert_eq!(out.log.total(), 1);
        assert_eq!(out.best, sample_random(&space, derive_seed(7, "random", 0)).unwrap());
    }

    #[test]
    fn permutation_at_full_budget_finds_optimum() {
        let space = toy_space();
        assert_eq!(space.genome_count(), 12);
        for seed in 0..5 {
            let r = target(&space, seed);
            let out = run_random_search(&space, &r, 12, Sampler::Permutation, seed, 2).unwrap();
            assert_eq!(out.best_reward, oracle(&space, &r));
            assert_eq!(out.log.unique(), 12);
        }
    }

    #[test]
    fn evolution_keeps_population_and_finds_toy_optimum() {
        let space = toy_space();
        let mut hits = 0;
        for seed in 0..10 {
            let r = target(&space, 100 + seed);
            let cfg = EvolutionConfig { population: 4, cycles: 50, tournament_k: 2 };
            let out = run_evolution(&space, &r, &cfg, seed, 1).unwrap();
            assert_eq!(out.log.total(), 54);
            hits += usize::from(out.best_reward == oracle(&space, &r));
        }
        assert!(hits >= 9, "{hits}");
    }

    #[test]
    fn evolution_zero_cycles_is_best_of_initial_population() {
        let space = SpaceConfig::nasfpn();
        let r = target(&space, 3);
        let cfg = EvolutionConfig { population: 6, cycles: 0, tournament_k: 2 };
        let out = run_evolution(&space, &r, &cfg, 5, 1).unwrap();
        let best = out.log.rewards().into_iter().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_reward, best);
        assert_eq!(out.log.total(), 6);
    }

    #[test]
    fn failures_are_resampled_and_logged() {
        let space = SpaceConfig::nasfpn();
        let inner = target(&space, 3);
        let flaky = Flaky(&inner);
        let out = run_random_search(&space, &flaky, 20, Sampler::Iid, 1, 2).unwrap();
        assert_eq!(out.log.total(), 20);
        assert!(out.log.failures() > 0);
        assert!(out.best.cells[0].op != BinaryOp::Sum);
    }

    #[test]
    fn always_failing_reward_gives_up() {
        struct Never;
        impl RewardFn for Never {
            fn evaluate(&self, _: &Genome) -> Result<f64, String> {
                Err("nope".into())
            }
        }
        let err = run_random_search(&toy_space(), &Never, 3, Sampler::Iid, 1, 1).unwrap_err();
        assert_eq!(err.code(), "evaluation-failed");
    }

    #[test]
    fn invalid_configs_rejected() {
        let space = toy_space();
        let r = target(&space, 1);
        assert!(run_random_search(&space, &r, 0, Sampler::Iid, 1, 1).is_err());
        let bad = EvolutionConfig { population: 1, cycles: 1, tournament_k: 1 };
        assert!(run_evolution(&space, &r, &bad, 1, 1).is_err());
        let bad = EvolutionConfig { population: 3, cycles: 1, tournament_k: 4 };
        assert!(run_evolution(&space, &r, &bad, 1, 1).is_err());
        assert!(run_rnn_ppo(&space, &r, ControllerConfig::default(), &PpoConfig::default(), 0, 1, 1, 1).is_err());
    }

    #[test]
    fn drivers_are_deterministic_and_best_is_monotone() {
        let space = SpaceConfig::nasfpn();
        let r = target(&space, 9);
        let a = run_rnn_ppo(&space, &r, ControllerConfig::default(), &PpoConfig::default(), 5, 4, 3, 1).unwrap();
        let b = run_rnn_ppo(&space, &r, ControllerConfig::default(), &PpoConfig::default(), 5, 4, 3, 4).unwrap();
        let strip = |log: &SearchLog| -> Vec<_> { log.records.iter().map(|r| (r.candidate, r.genome_hash.clone(), r.reward)).collect() };
        assert_eq!(strip(&a.log), strip(&b.log));
        assert_eq!(a.log.controller_loss, b.log.controller_loss);
        assert_eq!(a.log.total(), 20);
        for w in a.log.records.windows(2) {
            assert!(w[1].best_so_far >= w[0].best_so_far);
            assert!(w[1].unique_so_far >= w[0].unique_so_far);
            assert!(w[0].unique_so_far <= w[0].total_so_far);
        }
        assert_eq!(a.log.controller_loss.len(), 5 * PpoConfig::default().epochs);
    }
}
