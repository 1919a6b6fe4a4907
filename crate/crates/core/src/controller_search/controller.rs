//! Autoregressive LSTM policy over genome decisions.
//!
//! Every cell is emitted as four steps (index a, index b, level, op), each
//! with its own embedding table and softmax head. Illegal choices are masked
//! before the softmax, so every sample is a valid genome. Output cells emit
//! their level from the output levels not yet used, which yields the output
//! permutation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::search_space::{CellSpec, Genome, Level, SpaceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionKind {
    IndexA,
    IndexB,
    Level,
    Op,
}

impl DecisionKind {
    pub const ALL: [DecisionKind; 4] = [DecisionKind::IndexA, DecisionKind::IndexB, DecisionKind::Level, DecisionKind::Op];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub hidden: usize,
    pub embed: usize,
    /// Uniform init range for embeddings and LSTM weights. Heads start at zero.
    pub init_scale: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig { hidden: 32, embed: 16, init_scale: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    /// Rollouts per gradient step; 0 means the whole batch.
    pub minibatch: usize,
    pub entropy_weight: f64,
    pub lr: f64,
    pub baseline_decay: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig { clip: 0.2, epochs: 3, minibatch: 0, entropy_weight: 0.01, lr: 0.05, baseline_decay: 0.95 }
    }
}

/// A sampled genome with the tokens and log-probability it was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub genome: Genome,
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

#[derive(Debug, Clone)]
struct Layout {
    emb: [usize; 4],
    start: usize,
    w: usize,
    b: usize,
    head_w: [usize; 4],
    head_b: [usize; 4],
    len: usize,
}

#[derive(Debug, Clone)]
struct Step {
    kind: DecisionKind,
    /// Embedding row fed in: `None` for the start vector.
    input: Option<(DecisionKind, usize)>,
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: [Vec<f64>; 4],
    c: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
    token: usize,
}

struct Trace {
    steps: Vec<Step>,
    log_prob: f64,
}

#[derive(Debug, Clone)]
pub struct Controller {
    pub space: SpaceConfig,
    pub cfg: ControllerConfig,
    vocab: [usize; 4],
    layout: Layout,
    params: Vec<f64>,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: i32,
    /// Moving-average reward baseline; unset until the first update.
    pub baseline: Option<f64>,
}

fn sigm(x: f64) -> f64 {
    crate::micro_tensor::sigmoid(x)
}

impl Controller {
    pub fn new(space: &SpaceConfig, cfg: ControllerConfig, rng: &mut Rng) -> Self {
        let vocab = [space.num_inputs() + space.num_cells() - 1, space.num_inputs() + space.num_cells() - 1, space.output_levels.len(), space.ops.len()];
        let (e, h) = (cfg.embed, cfg.hidden);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let emb = vocab.map(|v| take(v * e));
        let start = take(e);
        let w = take(4 * h * (e + h));
        let b = take(4 * h);
        let head_start = take(0);
        let head_w = vocab.map(|v| take(v * h));
        let head_b = vocab.map(|v| take(v));
        let len = take(0);
        let mut params = vec![0.0; len];
        for p in &mut params[..head_start] {
            *p = rng.gen_range(-cfg.init_scale..cfg.init_scale);
        }
        // start with the forget gate open
        for j in h..2 * h {
            params[b + j] = 1.0;
        }
        Controller {
            space: space.clone(),
            cfg,
            vocab,
            layout: Layout { emb, start, w, b, head_w, head_b, len },
            params,
            adam_m: vec![0.0; len],
            adam_v: vec![0.0; len],
            adam_t: 0,
            baseline: None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    /// Vocabulary size of each decision kind.
    pub fn vocab(&self, kind: DecisionKind) -> usize {
        self.vocab[kind.slot()]
    }

    fn schedule(&self) -> impl Iterator<Item = (usize, DecisionKind)> {
        (0..self.space.num_cells()).flat_map(|c| DecisionKind::ALL.map(|k| (c, k)))
    }

    /// Legal choices for `kind` at `cell`, given the cell's chosen `a` and the
    /// output levels already taken.
    fn legal(&self, kind: DecisionKind, cell: usize, a: usize, used: &[Level]) -> Vec<bool> {
        let pool = self.space.candidates_at(cell);
        match kind {
            DecisionKind::IndexA => (0..self.vocab(kind)).map(|i| i < pool).collect(),
            DecisionKind::IndexB => (0..self.vocab(kind)).map(|i| i < pool && i != a).collect(),
            DecisionKind::Level => {
                let allowed = if self.space.is_output_cell(cell) {
                    self.space.output_levels.iter().copied().filter(|l| !used.contains(l)).collect()
                } else {
                    self.space.intermediate_levels()
                };
                self.space.output_levels.iter().map(|l| allowed.contains(l)).collect()
            }
            DecisionKind::Op => vec![true; self.vocab(kind)],
        }
    }

    fn lstm(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> ([Vec<f64>; 4], Vec<f64>, Vec<f64>) {
        let (e, h) = (self.cfg.embed, self.cfg.hidden);
        let p = &self.params;
        let mut pre = p[self.layout.b..self.layout.b + 4 * h].to_vec();
        for (r, z) in pre.iter_mut().enumerate() {
            let row = &p[self.layout.w + r * (e + h)..][..e + h];
            *z += row[..e].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            *z += row[e..].iter().zip(h_prev).map(|(a, b)| a * b).sum::<f64>();
        }
        let i: Vec<f64> = pre[..h].iter().map(|&v| sigm(v)).collect();
        let f: Vec<f64> = pre[h..2 * h].iter().map(|&v| sigm(v)).collect();
        let g: Vec<f64> = pre[2 * h..3 * h].iter().map(|v| v.tanh()).collect();
        let o: Vec<f64> = pre[3 * h..].iter().map(|&v| sigm(v)).collect();
        let c: Vec<f64> = (0..h).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
        let hn: Vec<f64> = (0..h).map(|j| o[j] * c[j].tanh()).collect();
        ([i, f, g, o], c, hn)
    }

    fn masked_softmax(&self, kind: DecisionKind, h: &[f64], legal: &[bool]) -> Vec<f64> {
        let k = kind.slot();
        let hd = self.cfg.hidden;
        let logits: Vec<f64> = (0..self.vocab[k])
            .map(|v| {
                let row = &self.params[self.layout.head_w[k] + v * hd..][..hd];
                self.params[self.layout.head_b[k] + v] + row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let max = logits.iter().zip(legal).filter(|(_, &ok)| ok).map(|(z, _)| *z).fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().zip(legal).map(|(z, &ok)| if ok { (z - max).exp() } else { 0.0 }).collect();
        let s: f64 = p.iter().sum();
        for v in &mut p {
            *v /= s;
        }
        p
    }

    /// Runs the policy, sampling with `rng` or replaying `tokens`.
    fn run(&self, tokens: Option<&[usize]>, mut rng: Option<&mut Rng>) -> Trace {
        let (e, hd) = (self.cfg.embed, self.cfg.hidden);
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let mut input: Option<(DecisionKind, usize)> = None;
        let mut steps = Vec::new();
        let mut log_prob = 0.0;
        let mut a = 0;
        let mut used = Vec::new();
        for (t, (cell, kind)) in self.schedule().enumerate() {
            let x = match input {
                None => self.params[self.layout.start..][..e].to_vec(),
                Some((k, v)) => self.params[self.layout.emb[k.slot()] + v * e..][..e].to_vec(),
            };
            let (gates, cn, hn) = self.lstm(&x, &h, &c);
            let legal = self.legal(kind, cell, a, &used);
            let probs = self.masked_softmax(kind, &hn, &legal);
            let token = match (tokens, rng.as_deref_mut()) {
                (Some(tok), _) => tok[t],
                (None, Some(r)) => {
                    let u: f64 = r.gen();
                    let mut acc = 0.0;
                    let mut pick = probs.iter().rposition(|&p| p > 0.0).expect("some legal choice");
                    for (j, &p) in probs.iter().enumerate() {
                        acc += p;
                        if p > 0.0 && u < acc {
                            pick = j;
                            break;
                        }
                    }
                    pick
                }
                (None, None) => panic!("need tokens or an rng"),
            };
            log_prob += probs[token].ln();
            match kind {
                DecisionKind::IndexA => a = token,
                DecisionKind::Level if self.space.is_output_cell(cell) => used.push(self.space.output_levels[token]),
                _ => {}
            }
            steps.push(Step { kind, input, x, h_prev: h, c_prev: c, gates, c: cn.clone(), h: hn.clone(), probs, token });
            h = hn;
            c = cn;
            input = Some((kind, token));
        }
        Trace { steps, log_prob }
    }

    fn genome_from_tokens(&self, tokens: &[usize]) -> Genome {
        let cells: Vec<CellSpec> = tokens
            .chunks(4)
            .map(|t| CellSpec {
                input_a: t[0],
                input_b: t[1],
                out_level: self.space.output_levels[t[2]],
                op: self.space.ops[t[3]],
            })
            .collect();
        let output_order = cells[self.space.num_intermediate_cells..].iter().map(|c| c.out_level).collect();
        Genome { space: self.space.clone(), cells, output_order }
    }

    fn tokens_from_genome(&self, genome: &Genome) -> Option<Vec<usize>> {
        let mut out = Vec::with_capacity(4 * genome.cells.len());
        for c in &genome.cells {
            out.push(c.input_a);
            out.push(c.input_b);
            out.push(self.space.output_levels.iter().position(|&l| l == c.out_level)?);
            out.push(self.space.ops.iter().position(|&o| o == c.op)?);
        }
        Some(out)
    }

    pub fn sample(&self, rng: &mut Rng) -> Rollout {
        let trace = self.run(None, Some(rng));
        let tokens: Vec<usize> = trace.steps.iter().map(|s| s.token).collect();
        Rollout { genome: self.genome_from_tokens(&tokens), tokens, log_prob: trace.log_prob }
    }

    /// Log-probability of emitting `genome`; `None` if it is outside the vocabularies
    /// or has probability zero.
    pub fn log_prob(&self, genome: &Genome) -> Option<f64> {
        if genome.space != self.space || !genome.validate().is_ok() {
            return None;
        }
        let tokens = self.tokens_from_genome(genome)?;
        let lp = self.run(Some(&tokens), None).log_prob;
        lp.is_finite().then_some(lp)
    }

    /// Masked distribution at every step while replaying `genome`, with the
    /// legality mask used.
    pub fn step_distributions(&self, genome: &Genome) -> Vec<(DecisionKind, Vec<f64>, Vec<bool>)> {
        let tokens = self.tokens_from_genome(genome).expect("genome in vocabulary");
        let trace = self.run(Some(&tokens), None);
        let mut a = 0;
        let mut used = Vec::new();
        let mut out = Vec::new();
        for ((cell, kind), step) in self.schedule().zip(&trace.steps) {
            out.push((kind, step.probs.clone(), self.legal(kind, cell, a, &used)));
            match kind {
                DecisionKind::IndexA => a = step.token,
                DecisionKind::Level if self.space.is_output_cell(cell) => used.push(self.space.output_levels[step.token]),
                _ => {}
            }
        }
        out
    }

    /// Adds into `grad` the gradient of a loss given `dz[t]`, the loss
    /// gradient w.r.t. each step's logits.
    fn backward(&self, trace: &Trace, dz: &[Vec<f64>], grad: &mut [f64]) {
        let (e, hd) = (self.cfg.embed, self.cfg.hidden);
        let l = &self.layout;
        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        for (step, dz) in trace.steps.iter().zip(dz).rev() {
            let k = step.kind.slot();
            let mut dh = dh_next.clone();
            for (v, &g) in dz.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                grad[l.head_b[k] + v] += g;
                let row = l.head_w[k] + v * hd;
                for j in 0..hd {
                    grad[row + j] += g * step.h[j];
                    dh[j] += g * self.params[row + j];
                }
            }
            let [i, f, gg, o] = &step.gates;
            let mut dpre = vec![0.0; 4 * hd];
            for j in 0..hd {
                let tc = step.c[j].tanh();
                let dc = dh[j] * o[j] * (1.0 - tc * tc) + dc_next[j];
                dpre[j] = dc * gg[j] * i[j] * (1.0 - i[j]);
                dpre[hd + j] = dc * step.c_prev[j] * f[j] * (1.0 - f[j]);
                dpre[2 * hd + j] = dc * i[j] * (1.0 - gg[j] * gg[j]);
                dpre[3 * hd + j] = dh[j] * tc * o[j] * (1.0 - o[j]);
                dc_next[j] = dc * f[j];
            }
            let mut dx = vec![0.0; e];
            dh_next = vec![0.0; hd];
            for (r, &d) in dpre.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad[l.b + r] += d;
                let row = l.w + r * (e + hd);
                for q in 0..e {
                    grad[row + q] += d * step.x[q];
                    dx[q] += d * self.params[row + q];
                }
                for q in 0..hd {
                    grad[row + e + q] += d * step.h_prev[q];
                    dh_next[q] += d * self.params[row + e + q];
                }
            }
            let base = match step.input {
                None => l.start,
                Some((kind, v)) => l.emb[kind.slot()] + v * e,
            };
            for q in 0..e {
                grad[base + q] += dx[q];
            }
        }
    }

    fn adam(&mut self, grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.adam_t += 1;
        let c1 = 1.0 - B1.powi(self.adam_t);
        let c2 = 1.0 - B2.powi(self.adam_t);
        for (((p, m), v), &g) in self.params.iter_mut().zip(&mut self.adam_m).zip(&mut self.adam_v).zip(grad) {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
        }
    }

    /// PPO update on one batch. Advantages are rewards minus the moving
    /// baseline (initialised to the first batch mean). Returns the mean
    /// surrogate loss of each epoch.
    pub fn update(&mut self, rollouts: &[Rollout], rewards: &[f64], ppo: &PpoConfig) -> Vec<f64> {
        assert_eq!(rollouts.len(), rewards.len());
        if rollouts.is_empty() {
            return Vec::new();
        }
        let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let baseline = *self.baseline.get_or_insert(mean);
        let adv: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
        let mb = if ppo.minibatch == 0 { rollouts.len() } else { ppo.minibatch.min(rollouts.len()) };
        let mut losses = Vec::with_capacity(ppo.epochs);
        for _ in 0..ppo.epochs {
            let mut epoch_loss = 0.0;
            for chunk in (0..rollouts.len()).collect::<Vec<_>>().chunks(mb) {
                let mut grad = vec![0.0; self.layout.len];
                let scale = 1.0 / chunk.len() as f64;
                for &n in chunk {
                    let trace = self.run(Some(&rollouts[n].tokens), None);
                    let ratio = (trace.log_prob - rollouts[n].log_prob).exp();
                    let a = adv[n];
                    let clipped = ratio.clamp(1.0 - ppo.clip, 1.0 + ppo.clip);
                    let surrogate = (ratio * a).min(clipped * a);
                    // d(-surrogate)/d(log_prob) is zero once the clipped term is the smaller one
                    let coef = if ratio * a <= clipped * a { -ratio * a } else { 0.0 };
                    let mut entropy = 0.0;
                    let dz: Vec<Vec<f64>> = trace
                        .steps
                        .iter()
                        .map(|s| {
                            let h: f64 = s.probs.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
                            entropy += h;
                            s.probs
                                .iter()
                                .enumerate()
                                .map(|(j, &p)| {
                                    let onehot = if j == s.token { 1.0 } else { 0.0 };
                                    let ent = if p > 0.0 { p * (p.ln() + h) } else { 0.0 };
                                    scale * (coef * (onehot - p) + ppo.entropy_weight * ent)
                                })
                                .collect()
                        })
                        .collect();
                    epoch_loss += -surrogate - ppo.entropy_weight * entropy;
                    self.backward(&trace, &dz, &mut grad);
                }
                self.adam(&grad, ppo.lr);
            }
            losses.push(epoch_loss / rollouts.len() as f64);
        }
        self.baseline = Some(ppo.baseline_decay * baseline + (1.0 - ppo.baseline_decay) * mean);
        losses
    }
}
