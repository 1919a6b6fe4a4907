use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TaskConfig;
use crate::micro_tensor::{standard_normal, Tensor4};
use crate::rng::{derive_seed, rng_from};
use crate::search_space::Level;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Top-left corner in pixels.
    pub x: usize,
    pub y: usize,
    pub side: usize,
    pub level: Level,
}

impl SceneObject {
    pub fn center(&self) -> (usize, usize) {
        (self.x + self.side / 2, self.y + self.side / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[1, 1, side, side]`.
    pub image: Tensor4,
    pub objects: Vec<SceneObject>,
    /// Presence map per level, `[1, 1, side / 2^L, side / 2^L]`.
    pub heatmaps: BTreeMap<Level, Tensor4>,
}

impl SyntheticScene {
    /// Presence map at `grid` of the objects whose band is `band`.
    pub fn band_heatmap(&self, band: Level, grid: Level, image_side: usize) -> Tensor4 {
        let side = image_side >> grid.0;
        let mut t = Tensor4::zeros([1, 1, side, side]);
        for o in self.objects.iter().filter(|o| o.level == band) {
            let (cx, cy) = o.center();
            let i = t.index(0, 0, cy >> grid.0, cx >> grid.0);
            t.data_mut()[i] = 1.0;
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticScene>,
    pub val: Vec<SyntheticScene>,
}

fn scene(cfg: &TaskConfig, seed: u64) -> SyntheticScene {
    let mut rng = rng_from(seed);
    let s = cfg.image_side;
    let mut image = Tensor4::zeros([1, 1, s, s]);
    for v in image.data_mut() {
        *v = cfg.noise_std * standard_normal(&mut rng);
    }
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let band = rng.gen_range(0..cfg.levels.len());
        let lo = cfg.size_thresholds[band];
        let hi = cfg.size_thresholds[band + 1].min(s + 1);
        let side = rng.gen_range(lo..hi);
        let x = rng.gen_range(0..=s - side);
        let y = rng.gen_range(0..=s - side);
        let contrast = rng.gen_range(0.6..1.4);
        for yy in y..y + side {
            for xx in x..x + side {
                let i = image.index(0, 0, yy, xx);
                image.data_mut()[i] += contrast;
            }
        }
        let level = cfg.level_for_size(side).expect("side drawn inside a band");
        objects.push(SceneObject { x, y, side, level });
    }
    let mut scene = SyntheticScene { image, objects, heatmaps: BTreeMap::new() };
    scene.heatmaps = cfg.levels.iter().map(|&l| (l, scene.band_heatmap(l, l, s))).collect();
    scene
}

/// Deterministic in `cfg` (including `cfg.data_seed`).
pub fn generate_dataset(cfg: &TaskConfig) -> Dataset {
    let train = (0..cfg.train_size).map(|i| scene(cfg, derive_seed(cfg.data_seed, "train", i as u64))).collect();
    let val = (0..cfg.val_size).map(|i| scene(cfg, derive_seed(cfg.data_seed, "val", i as u64))).collect();
    Dataset { train, val }
}
