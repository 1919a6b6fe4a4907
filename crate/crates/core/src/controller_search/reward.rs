use crate::proxy_task::{evaluate_reward_on, generate_dataset, Dataset, TaskConfig};
use crate::search_space::Genome;

/// Scores a genome. Implementations must be deterministic per genome.
pub trait RewardFn: Sync {
    fn evaluate(&self, genome: &Genome) -> Result<f64, String>;
}

/// Fraction of decisions (a, b, level, op per cell) equal to a hidden target's.
#[derive(Debug, Clone)]
pub struct PlantedReward {
    pub target: Genome,
}

impl PlantedReward {
    pub fn new(target: Genome) -> Self {
        PlantedReward { target }
    }
}

impl RewardFn for PlantedReward {
    fn evaluate(&self, genome: &Genome) -> Result<f64, String> {
        if genome.cells.len() != self.target.cells.len() {
            return Err(format!("genome has {} cells, target {}", genome.cells.len(), self.target.cells.len()));
        }
        let matches: usize = genome
            .cells
            .iter()
            .zip(&self.target.cells)
            .map(|(x, y)| {
                usize::from(x.input_a == y.input_a)
                    + usize::from(x.input_b == y.input_b)
                    + usize::from(x.out_level == y.out_level)
                    + usize::from(x.op == y.op)
            })
            .sum();
        Ok(matches as f64 / (4 * genome.cells.len()) as f64)
    }
}

/// Validation AP after proxy training, with a fixed training seed.
#[derive(Debug, Clone)]
pub struct ProxyReward {
    pub cfg: TaskConfig,
    pub stack_n: usize,
    pub seed: u64,
    data: Dataset,
}

impl ProxyReward {
    pub fn new(cfg: TaskConfig, stack_n: usize, seed: u64) -> Self {
        let data = generate_dataset(&cfg);
        ProxyReward { cfg, stack_n, seed, data }
    }
}

impl RewardFn for ProxyReward {
    fn evaluate(&self, genome: &Genome) -> Result<f64, String> {
        evaluate_reward_on(genome, &self.cfg, self.stack_n, self.seed, &self.data)
            .map(|r| r.reward)
            .map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{mutate, preset};

    #[test]
    fn planted_reward_peaks_at_target() {
        let t = preset("nasfpn-7cell").unwrap();
        let r = PlantedReward::new(t.clone());
        assert_eq!(r.evaluate(&t).unwrap(), 1.0);
        let m = mutate(&t, 3).unwrap();
        let v = r.evaluate(&m).unwrap();
        assert!(v < 1.0 && v >= 26.0 / 28.0 - 1e-12, "{v}");
    }
}
