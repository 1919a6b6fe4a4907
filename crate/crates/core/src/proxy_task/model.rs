use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{generate_dataset, Dataset, SyntheticScene};
use super::metric::{evaluate_ap, focal_loss};
use super::{ProxyError, TaskConfig};
use crate::graph_compiler::{stack, FeatureGraph, PyramidInputSpec};
use crate::micro_tensor::{
    sgd_step, sigmoid, BnLayer, ConvLayer, ExecState, GraphModule, Mode, ParamStore, SgdConfig, Tensor4, Var,
};
use crate::rng::{derive_seed, rng_from};
use crate::search_space::{BinaryOp, CellSpec, Genome, Level, SpaceConfig};

/// Prior probability the heads' bias starts from.
const HEAD_PRIOR: f64 = 0.01;
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone)]
struct Backbone {
    stages: Vec<(Level, ConvLayer, BnLayer)>,
    /// Pyramid inputs above the conv stack and the level each is pooled from.
    pooled: Vec<(Level, Level)>,
    feeds: Vec<Level>,
}

impl Backbone {
    fn forward(&self, s: &mut ExecState, image: Var) -> Result<BTreeMap<Level, Var>, ProxyError> {
        let mut feats = BTreeMap::new();
        let mut x = image;
        for (level, conv, bn) in &self.stages {
            let y = s.conv(x, conv)?;
            let y = s.batch_norm(y, bn)?;
            x = s.relu(y);
            feats.insert(*level, x);
        }
        for &(level, from) in &self.pooled {
            let y = s.max_pool(feats[&from], 1 << (level.0 - from.0))?;
            feats.insert(level, y);
        }
        Ok(self.feeds.iter().map(|l| (*l, feats[l])).collect())
    }
}

/// Backbone, stacked pyramid and heads with their parameters.
#[derive(Debug, Clone)]
pub struct ProxyModel {
    pub genome: Genome,
    pub cfg: TaskConfig,
    pub stack_n: usize,
    pub deep: bool,
    pub graph: FeatureGraph,
    pub state: ExecState,
    backbone: Backbone,
    fpn: GraphModule,
    /// `heads[k - 1]` holds stage `k`'s heads; empty for unsupervised stages.
    heads: Vec<BTreeMap<Level, ConvLayer>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training objective per step.
    pub losses: Vec<f64>,
    /// Focal loss per step for every supervised stage, in stage order.
    pub stage_losses: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub genome_hash: String,
    pub reward: f64,
    pub steps: usize,
    pub seed: u64,
    pub stack_n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyExit {
    pub stage: usize,
    pub ap: f64,
    /// Multiply-accumulates per image for backbone, stages `1..=stage` and the exit heads.
    pub macs_per_image: u64,
}

impl ProxyModel {
    pub fn new(genome: &Genome, cfg: &TaskConfig, stack_n: usize, deep: bool, seed: u64) -> Result<Self, ProxyError> {
        cfg.validate()?;
        let genome = match cfg.feature_dim {
            Some(d) => genome.with_feature_dim(d).map_err(|e| ProxyError::InvalidConfig(e.to_string()))?,
            None => genome.clone(),
        };
        let space = &genome.space;
        if let Some(&l) = cfg.levels.iter().find(|l| !space.output_levels.contains(l)) {
            return Err(ProxyError::LevelMismatch(l));
        }
        if space.input_levels.iter().any(|l| l.0 == 0) {
            return Err(ProxyError::InvalidConfig("pyramid inputs must be at level 1 or coarser".into()));
        }
        let conv_top = space.input_levels.iter().copied().filter(|&l| l <= cfg.backbone_top).max().ok_or_else(|| {
            ProxyError::InvalidConfig(format!("no pyramid input at or below backbone top {}", cfg.backbone_top))
        })?;
        let widths: Vec<(Level, usize)> = space
            .input_levels
            .iter()
            .filter(|&&l| l <= conv_top)
            .map(|&l| (l, cfg.backbone_width))
            .collect();
        let spec = PyramidInputSpec::with_backbone(&genome, cfg.image_side, &widths);
        let graph = stack(&genome, stack_n, &spec)?;

        let mut rng = rng_from(derive_seed(seed, "init", 0));
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = 1;
        for l in 1..=conv_top.0 {
            let name = format!("backbone.p{l}");
            let conv = params.conv_layer(&format!("{name}.conv"), cin, cfg.backbone_width, 3, 2, 1, false, &mut rng);
            let bn = params.bn_layer(&format!("{name}.bn"), cfg.backbone_width);
            stages.push((Level(l), conv, bn));
            cin = cfg.backbone_width;
        }
        let pooled = spec.pooled_levels.iter().map(|&l| (l, conv_top)).collect();
        let backbone = Backbone { stages, pooled, feeds: space.input_levels.clone() };
        let fpn = GraphModule::new(&graph, &mut params, "fpn", &mut rng)?;
        let prior = -((1.0 - HEAD_PRIOR) / HEAD_PRIOR).ln();
        let mut heads = Vec::with_capacity(stack_n);
        for k in 1..=stack_n {
            let mut per_level = BTreeMap::new();
            if deep || k == stack_n {
                for &l in &cfg.levels {
                    let head = params.conv_layer(&format!("head.s{k}.{l}"), space.feature_dim, 1, 1, 1, 1, true, &mut rng);
                    params.get_mut(head.bias.expect("head has bias")).value.data_mut()[0] = prior;
                    per_level.insert(l, head);
                }
            }
            heads.push(per_level);
        }
        Ok(ProxyModel {
            genome,
            cfg: cfg.clone(),
            stack_n,
            deep,
            graph,
            state: ExecState::new(params, Mode::Train),
            backbone,
            fpn,
            heads,
        })
    }

    /// Head logits for every supervised stage up to `upto`, as `(stage, level -> logits)`.
    fn logits(&mut self, images: Tensor4, upto: usize) -> Result<Vec<(usize, BTreeMap<Level, Var>)>, ProxyError> {
        let s = &mut self.state;
        s.reset_tape();
        let x = s.leaf(images);
        let feats = self.backbone.forward(s, x)?;
        let stages = self.fpn.apply(&self.graph, s, &feats, upto)?;
        let mut out = Vec::new();
        for (k, outs) in stages.iter().enumerate() {
            if self.heads[k].is_empty() {
                continue;
            }
            let mut per_level = BTreeMap::new();
            for (&l, head) in &self.heads[k] {
                per_level.insert(l, s.conv(outs[&l], head)?);
            }
            out.push((k + 1, per_level));
        }
        Ok(out)
    }

    fn batch(scenes: &[&SyntheticScene]) -> Result<(Tensor4, BTreeMap<Level, Tensor4>), ProxyError> {
        let images: Vec<Tensor4> = scenes.iter().map(|s| s.image.clone()).collect();
        let mut targets = BTreeMap::new();
        for &l in scenes[0].heatmaps.keys() {
            let maps: Vec<Tensor4> = scenes.iter().map(|s| s.heatmaps[&l].clone()).collect();
            targets.insert(l, Tensor4::stack_batch(&maps)?);
        }
        Ok((Tensor4::stack_batch(&images)?, targets))
    }

    /// One SGD step on `scenes`. Returns the objective and the per-stage losses.
    pub fn train_step(&mut self, scenes: &[&SyntheticScene], lr: f64) -> Result<(f64, Vec<f64>), ProxyError> {
        let (images, targets) = Self::batch(scenes)?;
        self.state.mode = Mode::Train;
        self.state.params.zero_grad();
        let stage_logits = self.logits(images, self.stack_n)?;
        // focal loss summed over cells and divided by the positive count
        let positives = targets.values().flat_map(|t| t.data().iter()).filter(|&&v| v > 0.5).count().max(1);
        let weight = 1.0 / stage_logits.len() as f64;
        let mut seeds = Vec::new();
        let mut stage_losses = Vec::with_capacity(stage_logits.len());
        for (_, per_level) in &stage_logits {
            let mut stage_loss = 0.0;
            for (l, &v) in per_level {
                let t = &targets[l];
                let share = t.len() as f64 / positives as f64;
                let (loss, mut grad) = focal_loss(self.state.value(v), t, self.cfg.focal_alpha, self.cfg.focal_gamma)?;
                stage_loss += share * loss;
                for g in grad.data_mut() {
                    *g *= share * weight;
                }
                seeds.push((v, grad));
            }
            stage_losses.push(stage_loss);
        }
        if !stage_losses.iter().all(|l| l.is_finite()) {
            return Err(ProxyError::Diverged);
        }
        self.state.backward(seeds)?;
        let sgd = SgdConfig { lr, momentum: self.cfg.momentum, weight_decay: self.cfg.weight_decay };
        sgd_step(&mut self.state.params, &sgd);
        let objective = stage_losses.iter().sum::<f64>() * weight;
        Ok((objective, stage_losses))
    }

    /// Re-estimates BN running statistics as the plain average of batch
    /// statistics over the first `cfg.bn_calibration_batches` train batches.
    pub fn calibrate_bn(&mut self, train: &[SyntheticScene]) -> Result<(), ProxyError> {
        let saved = self.state.bn_momentum;
        self.state.mode = Mode::Train;
        let bs = self.cfg.batch_size.min(train.len());
        for k in 0..self.cfg.bn_calibration_batches {
            let start = (k * bs) % train.len();
            let chunk: Vec<&SyntheticScene> = (0..bs).map(|i| &train[(start + i) % train.len()]).collect();
            self.state.bn_momentum = k as f64 / (k + 1) as f64;
            let (images, _) = Self::batch(&chunk)?;
            self.logits(images, self.stack_n)?;
        }
        self.state.bn_momentum = saved;
        self.state.reset_tape();
        Ok(())
    }

    fn check_stage(&self, stage: usize) -> Result<(), ProxyError> {
        if stage == 0 || stage > self.stack_n || self.heads[stage - 1].is_empty() {
            return Err(ProxyError::StageOutOfRange { stage, stack_n: self.stack_n });
        }
        Ok(())
    }

    /// Sigmoid scores per scene and level from stage `stage`'s heads, in Eval mode.
    pub fn predict(&mut self, scenes: &[SyntheticScene], stage: usize) -> Result<Vec<BTreeMap<Level, Tensor4>>, ProxyError> {
        self.check_stage(stage)?;
        self.state.mode = Mode::Eval;
        let mut out = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(EVAL_BATCH) {
            let refs: Vec<&SyntheticScene> = chunk.iter().collect();
            let (images, _) = Self::batch(&refs)?;
            let logits = self.logits(images, stage)?;
            let (_, per_level) = logits.into_iter().find(|(k, _)| *k == stage).expect("stage has heads");
            for n in 0..chunk.len() {
                let mut m = BTreeMap::new();
                for (&l, &v) in &per_level {
                    let mut t = self.state.value(v).example(n);
                    for x in t.data_mut() {
                        *x = sigmoid(*x);
                    }
                    m.insert(l, t);
                }
                out.push(m);
            }
        }
        self.state.reset_tape();
        Ok(out)
    }

    /// Pooled heatmap AP of stage `stage` on `scenes`.
    pub fn evaluate(&mut self, scenes: &[SyntheticScene], stage: usize) -> Result<f64, ProxyError> {
        let preds = self.predict(scenes, stage)?;
        let (mut p, mut t) = (Vec::new(), Vec::new());
        for (pred, scene) in preds.into_iter().zip(scenes) {
            for (l, map) in pred {
                p.push(map);
                t.push(scene.heatmaps[&l].clone());
            }
        }
        Ok(evaluate_ap(&p, &t)?)
    }

    /// AP of the final head at level `head` against objects of band `band`,
    /// scored on the grid of level `grid` (`grid >= head`). Head scores are
    /// max-pooled down to that grid so heads of different levels can be
    /// compared against the same targets.
    pub fn head_band_ap(&mut self, scenes: &[SyntheticScene], head: Level, band: Level, grid: Level) -> Result<f64, ProxyError> {
        if grid < head {
            return Err(ProxyError::InvalidConfig(format!("grid {grid} is finer than head {head}")));
        }
        let preds = self.predict(scenes, self.stack_n)?;
        let (mut p, mut t) = (Vec::new(), Vec::new());
        for (mut pred, scene) in preds.into_iter().zip(scenes) {
            let map = pred.remove(&head).ok_or(ProxyError::LevelMismatch(head))?;
            p.push(max_pool_by(&map, 1 << (grid.0 - head.0)));
            t.push(scene.band_heatmap(band, grid, self.cfg.image_side));
        }
        Ok(evaluate_ap(&p, &t)?)
    }
}

fn max_pool_by(map: &Tensor4, k: usize) -> Tensor4 {
    let side = map.shape()[2] / k;
    let mut out = Tensor4::zeros([1, 1, side, side]);
    for y in 0..side {
        for x in 0..side {
            let mut m = f64::NEG_INFINITY;
            for yy in y * k..(y + 1) * k {
                for xx in x * k..(x + 1) * k {
                    m = m.max(map.data()[map.index(0, 0, yy, xx)]);
                }
            }
            let i = out.index(0, 0, y, x);
            out.data_mut()[i] = m;
        }
    }
    out
}

/// Trains a fresh model for `cfg.steps` steps, then calibrates BN.
pub fn train_model(
    genome: &Genome,
    cfg: &TaskConfig,
    stack_n: usize,
    deep: bool,
    seed: u64,
    data: &Dataset,
) -> Result<(ProxyModel, TrainLog), ProxyError> {
    let mut model = ProxyModel::new(genome, cfg, stack_n, deep, seed)?;
    let mut log = TrainLog { losses: Vec::with_capacity(cfg.steps), stage_losses: Vec::with_capacity(cfg.steps) };
    let n = data.train.len();
    let bs = cfg.batch_size.min(n);
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0;
    let mut epoch = 0;
    for step in 0..cfg.steps {
        if pos + bs > order.len() {
            order = (0..n).collect();
            order.shuffle(&mut rng_from(derive_seed(seed, "order", epoch)));
            epoch += 1;
            pos = 0;
        }
        let batch: Vec<&SyntheticScene> = order[pos..pos + bs].iter().map(|&i| &data.train[i]).collect();
        pos += bs;
        let (loss, stages) = model.train_step(&batch, cfg.lr_at(step))?;
        log.losses.push(loss);
        log.stage_losses.push(stages);
    }
    model.calibrate_bn(&data.train)?;
    Ok((model, log))
}

/// Plain training of `stack(genome, stack_n)`; the reward is final-stage validation AP.
pub fn evaluate_reward(genome: &Genome, cfg: &TaskConfig, stack_n: usize, seed: u64) -> Result<RewardRecord, ProxyError> {
    cfg.validate()?;
    let data = generate_dataset(cfg);
    evaluate_reward_on(genome, cfg, stack_n, seed, &data)
}

/// As [`evaluate_reward`] with a pre-generated dataset.
pub fn evaluate_reward_on(
    genome: &Genome,
    cfg: &TaskConfig,
    stack_n: usize,
    seed: u64,
    data: &Dataset,
) -> Result<RewardRecord, ProxyError> {
    let (mut model, _) = train_model(genome, cfg, stack_n, false, seed, data)?;
    let reward = model.evaluate(&data.val, stack_n)?;
    Ok(RewardRecord { genome_hash: genome.key().0, reward, steps: cfg.steps, seed, stack_n })
}

/// Training with a head after every stage; the objective is the mean of the stage losses.
pub fn train_deeply_supervised(
    genome: &Genome,
    cfg: &TaskConfig,
    stack_n: usize,
    seed: u64,
    data: &Dataset,
) -> Result<(ProxyModel, TrainLog), ProxyError> {
    train_model(genome, cfg, stack_n, true, seed, data)
}

/// Runs only pyramids `1..=stage` and stage `stage`'s heads on the validation set.
pub fn evaluate_early_exit(model: &mut ProxyModel, stage: usize, val: &[SyntheticScene]) -> Result<EarlyExit, ProxyError> {
    model.check_stage(stage)?;
    model.state.reset_counters();
    let ap = model.evaluate(val, stage)?;
    let macs_per_image = model.state.mac_counter() / val.len() as u64;
    Ok(EarlyExit { stage, ap, macs_per_image })
}

/// A genome in the 5-level space whose every cell output derives only from
/// 1x1-pooled P7-resolution maps: inputs are all consumed by merges at P7.
pub fn coarse_only_genome() -> Genome {
    let space = SpaceConfig::nasfpn();
    let cell = |a, b, l| CellSpec { input_a: a, input_b: b, out_level: Level(l), op: BinaryOp::Sum };
    Genome {
        space,
        cells: vec![cell(0, 4, 7), cell(1, 3, 7), cell(2, 5, 7), cell(6, 7, 6), cell(7, 8, 5), cell(8, 9, 4), cell(9, 10, 3)],
        output_order: vec![Level(7), Level(6), Level(5), Level(4), Level(3)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{sample_random, ConvMode};

    fn space() -> SpaceConfig {
        let l = vec![Level(2), Level(3), Level(4)];
        SpaceConfig::new(l.clone(), l, 1, BinaryOp::ALL.to_vec(), 8, ConvMode::Full).unwrap()
    }

    fn tiny(steps: usize) -> TaskConfig {
        TaskConfig { train_size: 32, val_size: 16, steps, batch_size: 4, warmup_steps: steps / 10, ..TaskConfig::search_default() }
    }

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    }

    #[test]
    fn reward_is_deterministic_and_in_unit_interval() {
        let g = sample_random(&space(), 1).unwrap();
        let a = evaluate_reward(&g, &tiny(10), 2, 5).unwrap();
        let b = evaluate_reward(&g, &tiny(10), 2, 5).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.reward));
        assert_eq!(a.stack_n, 2);
    }

    #[test]
    fn deep_supervision_with_one_stage_is_plain_training() {
        let g = sample_random(&space(), 2).unwrap();
        let cfg = tiny(8);
        let data = generate_dataset(&cfg);
        let (mut deep, dlog) = train_deeply_supervised(&g, &cfg, 1, 3, &data).unwrap();
        let (mut plain, plog) = train_model(&g, &cfg, 1, false, 3, &data).unwrap();
        assert_eq!(dlog.losses, plog.losses);
        assert_eq!(deep.evaluate(&data.val, 1).unwrap(), plain.evaluate(&data.val, 1).unwrap());
    }

    #[test]
    fn per_stage_losses_decrease() {
        let g = sample_random(&space(), 3).unwrap();
        let cfg = tiny(60);
        let data = generate_dataset(&cfg);
        let (_, log) = train_deeply_supervised(&g, &cfg, 2, 1, &data).unwrap();
        for k in 0..2 {
            let stage: Vec<f64> = log.stage_losses.iter().map(|s| s[k]).collect();
            assert!(stage.iter().all(|v| v.is_finite()));
            assert!(median(stage[50..].to_vec()) < median(stage[..10].to_vec()), "stage {k}");
        }
    }

    #[test]
    fn stage_one_head_reaches_stage_one_params_only() {
        let g = sample_random(&space(), 4).unwrap();
        let cfg = tiny(1);
        let data = generate_dataset(&cfg);
        let mut m = ProxyModel::new(&g, &cfg, 2, true, 0).unwrap();
        let refs: Vec<&SyntheticScene> = data.train[..2].iter().collect();
        let (images, _) = ProxyModel::batch(&refs).unwrap();
        m.state.params.zero_grad();
        let logits = m.logits(images, 1).unwrap();
        assert_eq!(logits.len(), 1);
        let seeds = logits[0].1.values().map(|&v| (v, Tensor4::filled(m.state.value(v).shape(), 1.0))).collect();
        m.state.backward(seeds).unwrap();
        let stage_of = |name: &str| -> Option<usize> {
            let id: usize = name.strip_prefix("fpn.n")?.split('.').next()?.parse().ok()?;
            Some(m.graph.nodes[id].stage)
        };
        let norm = |pred: &dyn Fn(&str) -> bool| -> f64 {
            m.state.params.iter().filter(|(_, p)| pred(&p.name)).flat_map(|(_, p)| p.grad.data().iter()).map(|g| g * g).sum()
        };
        assert!(norm(&|n| n.starts_with("backbone")) > 0.0);
        assert!(norm(&|n| stage_of(n) == Some(1)) > 0.0);
        assert!(m.state.params.iter().any(|(_, p)| stage_of(&p.name) == Some(2)));
        assert_eq!(norm(&|n| stage_of(n) == Some(2)), 0.0);
        assert_eq!(norm(&|n| n.starts_with("head.s2")), 0.0);
    }

    #[test]
    fn early_exit_compute_grows_and_final_exit_matches() {
        let g = sample_random(&space(), 5).unwrap();
        let cfg = tiny(4);
        let data = generate_dataset(&cfg);
        let (mut m, _) = train_deeply_supervised(&g, &cfg, 3, 0, &data).unwrap();
        let exits: Vec<EarlyExit> = (1..=3).map(|k| evaluate_early_exit(&mut m, k, &data.val).unwrap()).collect();
        assert!(exits.windows(2).all(|w| w[0].macs_per_image < w[1].macs_per_image));
        assert_eq!(exits[2].ap, m.evaluate(&data.val, 3).unwrap());
        for k in [0, 4] {
            let err = evaluate_early_exit(&mut m, k, &data.val).unwrap_err();
            assert_eq!(err.code(), "stage-out-of-range");
        }
        let (mut plain, _) = train_model(&g, &cfg, 3, false, 0, &data).unwrap();
        assert!(matches!(evaluate_early_exit(&mut plain, 1, &data.val), Err(ProxyError::StageOutOfRange { .. })));
    }

    #[test]
    fn fine_heads_find_small_objects_better_than_coarse_heads() {
        let g = crate::search_space::preset("vanilla-fpn").unwrap();
        let cfg = TaskConfig { steps: 200, ..TaskConfig::five_level() };
        let data = generate_dataset(&cfg);
        let (mut m, _) = train_model(&g, &cfg, 1, false, 0, &data).unwrap();
        for coarse_level in [5, 7] {
            let grid = Level(coarse_level);
            let fine = m.head_band_ap(&data.val, Level(3), Level(3), grid).unwrap();
            let coarse = m.head_band_ap(&data.val, grid, Level(3), grid).unwrap();
            assert!(fine > coarse, "P{coarse_level}: {fine} vs {coarse}");
        }
        assert!(m.head_band_ap(&data.val, Level(5), Level(3), Level(3)).is_err());
    }

    #[test]
    fn coarse_only_genome_is_valid() {
        assert!(coarse_only_genome().validate().is_ok());
    }
}
