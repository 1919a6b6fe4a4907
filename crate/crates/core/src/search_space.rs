//! Merging-cell genome grammar.
//!
//! A [`Genome`] is a program over a candidate pool. The pool starts with the
//! pyramid inputs; every merging cell picks two distinct existing candidates,
//! an output level and a binary op, and pushes its result back onto the pool.
//! The last `|output_levels|` cells are output cells: their level is not a free
//! choice but comes from `output_order`, a permutation of the output levels.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::rng_from;

/// Largest pyramid level the grammar accepts (stride 4096).
pub const MAX_LEVEL: u8 = 12;

/// Default cap for [`enumerate`].
pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// Pyramid level `L`: a feature map at stride `2^L` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Level(pub u8);

impl Level {
    pub fn stride(self) -> usize {
        1usize << self.0
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinaryOp {
    #[serde(rename = "sum")]
    Sum,
    /// `a + b * sigmoid(global_max(a))`, see `micro_tensor`.
    #[serde(rename = "gpool")]
    GlobalPool,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 2] = [BinaryOp::Sum, BinaryOp::GlobalPool];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Sum => "sum",
            BinaryOp::GlobalPool => "gpool",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConvMode {
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "separable")]
    DepthwiseSeparable,
}

/// One merging cell: the four decisions of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    #[serde(rename = "a")]
    pub input_a: usize,
    #[serde(rename = "b")]
    pub input_b: usize,
    #[serde(rename = "level")]
    pub out_level: Level,
    pub op: BinaryOp,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpaceError {
    #[error("space has no input levels")]
    NoInputs,
    #[error("space has no output levels")]
    NoOutputs,
    #[error("duplicate level {0} in {1}")]
    DuplicateLevel(Level, &'static str),
    #[error("level {0} is not representable (max P{MAX_LEVEL})")]
    Unrepresentable(Level),
    #[error("space allows no binary ops")]
    NoOps,
    #[error("feature_dim must be positive")]
    ZeroFeatureDim,
    #[error("intermediate cells requested but every output level is forbidden for them")]
    NoIntermediateLevels,
    #[error("degenerate-space: need at least 2 initial candidates, have {0}")]
    Degenerate(usize),
    #[error("space-too-large: {count} genomes exceeds cap {cap}")]
    TooLarge { count: u128, cap: u128 },
    #[error("mutation impossible: no decision of this genome has a legal alternative")]
    Immutable,
}

/// Search-space definition.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "SpaceRepr", into = "SpaceRepr")]
pub struct SpaceConfig {
    pub input_levels: Vec<Level>,
    /// Sorted ascending, no duplicates.
    pub output_levels: Vec<Level>,
    pub num_intermediate_cells: usize,
    /// Sorted ascending. Defaults to the finest input level.
    pub forbidden_intermediate_levels: Vec<Level>,
    /// Sorted in `BinaryOp` order.
    pub ops: Vec<BinaryOp>,
    pub feature_dim: usize,
    pub conv_mode: ConvMode,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceRepr {
    input_levels: Vec<Level>,
    output_levels: Vec<Level>,
    num_intermediate_cells: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    forbidden_intermediate_levels: Option<Vec<Level>>,
    feature_dim: usize,
    conv_mode: ConvMode,
    ops: Vec<BinaryOp>,
}

impl TryFrom<SpaceRepr> for SpaceConfig {
    type Error = SpaceError;

    fn try_from(r: SpaceRepr) -> Result<Self, SpaceError> {
        let space = SpaceConfig::new(
            r.input_levels,
            r.output_levels,
            r.num_intermediate_cells,
            r.ops,
            r.feature_dim,
            r.conv_mode,
        )?;
        match r.forbidden_intermediate_levels {
            Some(f) => space.with_forbidden(f),
            None => Ok(space),
        }
    }
}

impl From<SpaceConfig> for SpaceRepr {
    fn from(s: SpaceConfig) -> Self {
        SpaceRepr {
            input_levels: s.input_levels,
            output_levels: s.output_levels,
            num_intermediate_cells: s.num_intermediate_cells,
            forbidden_intermediate_levels: Some(s.forbidden_intermediate_levels),
            feature_dim: s.feature_dim,
            conv_mode: s.conv_mode,
            ops: s.ops,
        }
    }
}

fn sorted_unique(mut levels: Vec<Level>, what: &'static str) -> Result<Vec<Level>, SpaceError> {
    levels.sort();
    if let Some(w) = levels.windows(2).find(|w| w[0] == w[1]) {
        return Err(SpaceError::DuplicateLevel(w[0], what));
    }
    if let Some(&l) = levels.iter().find(|l| l.0 > MAX_LEVEL) {
        return Err(SpaceError::Unrepresentable(l));
    }
    Ok(levels)
}

fn levels(range: std::ops::RangeInclusive<u8>) -> Vec<Level> {
    range.map(Level).collect()
}

impl SpaceConfig {
    pub fn new(
        input_levels: Vec<Level>,
        output_levels: Vec<Level>,
        num_intermediate_cells: usize,
        ops: Vec<BinaryOp>,
        feature_dim: usize,
        conv_mode: ConvMode,
    ) -> Result<Self, SpaceError> {
        if input_levels.is_empty() {
            return Err(SpaceError::NoInputs);
        }
        if output_levels.is_empty() {
            return Err(SpaceError::NoOutputs);
        }
        // input order is meaningful (candidate indices), so only check it
        sorted_unique(input_levels.clone(), "input_levels")?;
        let output_levels = sorted_unique(output_levels, "output_levels")?;
        let mut ops = ops;
        ops.sort();
        ops.dedup();
        if ops.is_empty() {
            return Err(SpaceError::NoOps);
        }
        if feature_dim == 0 {
            return Err(SpaceError::ZeroFeatureDim);
        }
        let finest = *input_levels.iter().min().expect("non-empty");
        let space = SpaceConfig {
            input_levels,
            output_levels,
            num_intermediate_cells,
            forbidden_intermediate_levels: vec![finest],
            ops,
            feature_dim,
            conv_mode,
        };
        space.check_intermediates()?;
        Ok(space)
    }

    pub fn with_forbidden(mut self, forbidden: Vec<Level>) -> Result<Self, SpaceError> {
        self.forbidden_intermediate_levels = sorted_unique(forbidden, "forbidden_intermediate_levels")?;
        self.check_intermediates()?;
        Ok(self)
    }

    pub fn with_feature_dim(mut self, dim: usize) -> Result<Self, SpaceError> {
        if dim == 0 {
            return Err(SpaceError::ZeroFeatureDim);
        }
        self.feature_dim = dim;
        Ok(self)
    }

    fn check_intermediates(&self) -> Result<(), SpaceError> {
        if self.num_intermediate_cells > 0 && self.intermediate_levels().is_empty() {
            return Err(SpaceError::NoIntermediateLevels);
        }
        Ok(())
    }

    /// The 5-level space used for the 7-cell pyramid: P3-P7 in and out,
    /// two intermediate cells, both ops, stride 8 excluded for intermediates.
    pub fn nasfpn() -> Self {
        SpaceConfig::new(
            levels(3..=7),
            levels(3..=7),
            2,
            BinaryOp::ALL.to_vec(),
            256,
            ConvMode::Full,
        )
        .expect("static space")
    }

    /// Mobile variant: P3-P7 inputs, P3-P6 outputs, depthwise-separable convs.
    pub fn lite(num_intermediate_cells: usize, feature_dim: usize) -> Self {
        SpaceConfig::new(
            levels(3..=7),
            levels(3..=6),
            num_intermediate_cells,
            BinaryOp::ALL.to_vec(),
            feature_dim,
            ConvMode::DepthwiseSeparable,
        )
        .expect("static space")
    }

    pub fn num_inputs(&self) -> usize {
        self.input_levels.len()
    }

    pub fn num_output_cells(&self) -> usize {
        self.output_levels.len()
    }

    pub fn num_cells(&self) -> usize {
        self.num_intermediate_cells + self.num_output_cells()
    }

    /// Candidate pool size seen by cell `i`.
    pub fn candidates_at(&self, cell: usize) -> usize {
        self.num_inputs() + cell
    }

    pub fn is_output_cell(&self, cell: usize) -> bool {
        cell >= self.num_intermediate_cells
    }

    /// Levels an intermediate cell may choose: output levels minus forbidden ones.
    pub fn intermediate_levels(&self) -> Vec<Level> {
        self.output_levels
            .iter()
            .copied()
            .filter(|l| !self.forbidden_intermediate_levels.contains(l))
            .collect()
    }

    /// Inclusive range covering every input and output level.
    pub fn level_span(&self) -> (Level, Level) {
        let all = self.input_levels.iter().chain(&self.output_levels);
        let lo = *all.clone().min().expect("non-empty");
        let hi = *all.max().expect("non-empty");
        (lo, hi)
    }

    /// Inputs and outputs cover the same level set, so the pyramid can be stacked.
    pub fn is_stackable(&self) -> bool {
        let ins: BTreeSet<_> = self.input_levels.iter().collect();
        let outs: BTreeSet<_> = self.output_levels.iter().collect();
        ins == outs
    }

    /// Number of valid genomes, saturating at `u128::MAX`.
    pub fn genome_count(&self) -> u128 {
        let mut count: u128 = 1;
        for k in 1..=self.num_output_cells() as u128 {
            count = count.saturating_mul(k);
        }
        let ops = self.ops.len() as u128;
        let inter = self.intermediate_levels().len() as u128;
        for cell in 0..self.num_cells() {
            let n = self.candidates_at(cell) as u128;
            let lv = if self.is_output_cell(cell) { 1 } else { inter };
            count = count
                .saturating_mul(n * n.saturating_sub(1))
                .saturating_mul(lv)
                .saturating_mul(ops);
        }
        count
    }
}

/// Stable identifier for which invariant a genome breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    Replacement,
    DanglingIndex,
    ForbiddenIntermediateLevel,
    LevelOutsideOutputs,
    OpNotAllowed,
    CellCount,
    OutputOrder,
    OutputLevelMismatch,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::Replacement => "replacement",
            Rule::DanglingIndex => "dangling-index",
            Rule::ForbiddenIntermediateLevel => "forbidden-intermediate-level",
            Rule::LevelOutsideOutputs => "level-outside-outputs",
            Rule::OpNotAllowed => "op-not-allowed",
            Rule::CellCount => "cell-count",
            Rule::OutputOrder => "output-order",
            Rule::OutputLevelMismatch => "output-level-mismatch",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub cell: Option<usize>,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.cell {
            Some(c) => write!(f, "cell {c}: {} ({})", self.rule.id(), self.detail),
            None => write!(f, "{} ({})", self.rule.id(), self.detail),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    fn push(&mut self, cell: Option<usize>, rule: Rule, detail: String) {
        self.violations.push(Violation { cell, rule, detail });
    }
}

/// A merging-cell pyramid program.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genome {
    pub space: SpaceConfig,
    /// Intermediate cells first, then output cells.
    pub cells: Vec<CellSpec>,
    /// Output level of each output cell, in cell order.
    pub output_order: Vec<Level>,
}

/// Short content hash of a genome's canonical JSON.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenomeKey(pub String);

impl fmt::Display for GenomeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Names one decision of a genome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    InputA(usize),
    InputB(usize),
    Level(usize),
    Op(usize),
    OutputOrder,
}

impl Genome {
    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    pub fn intermediate_cells(&self) -> &[CellSpec] {
        &self.cells[..self.space.num_intermediate_cells.min(self.cells.len())]
    }

    pub fn output_cells(&self) -> &[CellSpec] {
        &self.cells[self.space.num_intermediate_cells.min(self.cells.len())..]
    }

    /// Level of every candidate in pool order: inputs, then cells.
    pub fn candidate_levels(&self) -> Vec<Level> {
        self.space
            .input_levels
            .iter()
            .copied()
            .chain(self.cells.iter().map(|c| c.out_level))
            .collect()
    }

    /// Same wiring with a different pyramid width.
    pub fn with_feature_dim(&self, dim: usize) -> Result<Genome, SpaceError> {
        let mut g = self.clone();
        g.space = g.space.with_feature_dim(dim)?;
        Ok(g)
    }

    pub fn canonical_json(&self) -> String {
        to_json(self)
    }

    pub fn key(&self) -> GenomeKey {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
        GenomeKey(hex)
    }

    /// Decisions on which `self` and `other` differ. Both must share a space
    /// and cell count; a reordered output pyramid counts as one decision.
    pub fn changed_decisions(&self, other: &Genome) -> Vec<Decision> {
        let mut out = Vec::new();
        for (i, (x, y)) in self.cells.iter().zip(&other.cells).enumerate() {
            if x.input_a != y.input_a {
                out.push(Decision::InputA(i));
            }
            if x.input_b != y.input_b {
                out.push(Decision::InputB(i));
            }
            if !self.space.is_output_cell(i) && x.out_level != y.out_level {
                out.push(Decision::Level(i));
            }
            if x.op != y.op {
                out.push(Decision::Op(i));
            }
        }
        if self.output_order != other.output_order {
            out.push(Decision::OutputOrder);
        }
        out
    }
}

pub fn validate(genome: &Genome) -> ValidationReport {
    let space = &genome.space;
    let mut report = ValidationReport::default();

    if genome.cells.len() != space.num_cells() {
        report.push(
            None,
            Rule::CellCount,
            format!("expected {} cells, found {}", space.num_cells(), genome.cells.len()),
        );
    }
    let mut order = genome.output_order.clone();
    order.sort();
    if order != space.output_levels {
        report.push(
            None,
            Rule::OutputOrder,
            format!("{:?} is not a permutation of {:?}", genome.output_order, space.output_levels),
        );
    }

    for (i, cell) in genome.cells.iter().enumerate() {
        let n = space.candidates_at(i);
        if cell.input_a == cell.input_b {
            report.push(Some(i), Rule::Replacement, format!("a = b = {}", cell.input_a));
        }
        for (name, idx) in [("a", cell.input_a), ("b", cell.input_b)] {
            if idx >= n {
                report.push(
                    Some(i),
                    Rule::DanglingIndex,
                    format!("{name} = {idx} but only {n} candidates exist"),
                );
            }
        }
        if !space.ops.contains(&cell.op) {
            report.push(Some(i), Rule::OpNotAllowed, cell.op.name().to_string());
        }
        if space.is_output_cell(i) {
            let k = i - space.num_intermediate_cells;
            if let Some(&want) = genome.output_order.get(k) {
                if cell.out_level != want {
                    report.push(
                        Some(i),
                        Rule::OutputLevelMismatch,
                        format!("level {} but output_order assigns {}", cell.out_level, want),
                    );
                }
            }
        } else {
            if space.forbidden_intermediate_levels.contains(&cell.out_level) {
                report.push(
                    Some(i),
                    Rule::ForbiddenIntermediateLevel,
                    format!("level {}", cell.out_level),
                );
            }
            if !space.output_levels.contains(&cell.out_level) {
                report.push(
                    Some(i),
                    Rule::LevelOutsideOutputs,
                    format!("level {}", cell.out_level),
                );
            }
        }
    }
    report
}

fn random_pair(rng: &mut impl rand::Rng, n: usize) -> (usize, usize) {
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Draws a uniformly random legal choice for every decision.
pub fn sample_random(space: &SpaceConfig, seed: u64) -> Result<Genome, SpaceError> {
    if space.num_inputs() < 2 {
        return Err(SpaceError::Degenerate(space.num_inputs()));
    }
    let mut rng = rng_from(seed);
    let inter_levels = space.intermediate_levels();
    let mut output_order = space.output_levels.clone();
    output_order.shuffle(&mut rng);
    let cells = (0..space.num_cells())
        .map(|i| {
            let (a, b) = random_pair(&mut rng, space.candidates_at(i));
            let out_level = if space.is_output_cell(i) {
                output_order[i - space.num_intermediate_cells]
            } else {
                *inter_levels.choose(&mut rng).expect("checked at construction")
            };
            let op = *space.ops.choose(&mut rng).expect("non-empty");
            CellSpec { input_a: a, input_b: b, out_level, op }
        })
        .collect();
    Ok(Genome { space: space.clone(), cells, output_order })
}

fn mutable_decisions(genome: &Genome) -> Vec<Decision> {
    let space = &genome.space;
    let inter = space.intermediate_levels().len();
    let mut slots = Vec::new();
    for i in 0..genome.cells.len() {
        if space.candidates_at(i) >= 3 {
            slots.push(Decision::InputA(i));
            slots.push(Decision::InputB(i));
        }
        if !space.is_output_cell(i) && inter >= 2 {
            slots.push(Decision::Level(i));
        }
        if space.ops.len() >= 2 {
            slots.push(Decision::Op(i));
        }
    }
    if space.num_output_cells() >= 2 {
        slots.push(Decision::OutputOrder);
    }
    slots
}

fn pick_other<T: Copy + PartialEq>(rng: &mut impl rand::Rng, options: &[T], avoid: &[T]) -> T {
    let legal: Vec<T> = options.iter().copied().filter(|o| !avoid.contains(o)).collect();
    *legal.choose(rng).expect("slot was listed as mutable")
}

/// Changes exactly one decision of a valid genome.
///
/// The decision slot is drawn uniformly among slots that have a legal
/// alternative, then the new value uniformly among those alternatives.
/// Output order changes are transpositions of two output cells' levels.
pub fn mutate(genome: &Genome, seed: u64) -> Result<Genome, SpaceError> {
    let slots = mutable_decisions(genome);
    let mut rng = rng_from(seed);
    let slot = *slots.choose(&mut rng).ok_or(SpaceError::Immutable)?;
    let space = &genome.space;
    let mut child = genome.clone();
    match slot {
        Decision::InputA(i) => {
            let c = genome.cells[i];
            let pool: Vec<usize> = (0..space.candidates_at(i)).collect();
            child.cells[i].input_a = pick_other(&mut rng, &pool, &[c.input_a, c.input_b]);
        }
        Decision::InputB(i) => {
            let c = genome.cells[i];
            let pool: Vec<usize> = (0..space.candidates_at(i)).collect();
            child.cells[i].input_b = pick_other(&mut rng, &pool, &[c.input_a, c.input_b]);
        }
        Decision::Level(i) => {
            let lv = space.intermediate_levels();
            child.cells[i].out_level = pick_other(&mut rng, &lv, &[genome.cells[i].out_level]);
        }
        Decision::Op(i) => {
            child.cells[i].op = pick_other(&mut rng, &space.ops, &[genome.cells[i].op]);
        }
        Decision::OutputOrder => {
            let k = space.num_output_cells();
            let (p, q) = random_pair(&mut rng, k);
            child.output_order.swap(p, q);
            let base = space.num_intermediate_cells;
            child.cells[base + p].out_level = child.output_order[p];
            child.cells[base + q].out_level = child.output_order[q];
        }
    }
    Ok(child)
}

/// Ordered pair `(a, b)` with `a != b` at rank `r` in a-major order.
fn pair_at(n: usize, r: usize) -> (usize, usize) {
    let a = r / (n - 1);
    let mut b = r % (n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// The `r`-th permutation of `items` in lexicographic (Lehmer) order.
fn permutation_at(items: &[Level], mut r: usize) -> Vec<Level> {
    let mut pool = items.to_vec();
    let mut fact: usize = (1..pool.len()).product();
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let idx = r / fact.max(1);
        r %= fact.max(1);
        out.push(pool.remove(idx));
        if !pool.is_empty() {
            fact /= pool.len();
        }
    }
    out
}

/// Iterator over every valid genome of a small space.
pub struct GenomeEnumerator {
    space: SpaceConfig,
    inter_levels: Vec<Level>,
    radices: Vec<usize>,
    digits: Vec<usize>,
    done: bool,
}

impl GenomeEnumerator {
    fn decode(&self) -> Genome {
        let space = &self.space;
        let output_order = permutation_at(&space.output_levels, self.digits[0]);
        let cells = (0..space.num_cells())
            .map(|i| {
                let d = &self.digits[1 + 3 * i..4 + 3 * i];
                let (a, b) = pair_at(space.candidates_at(i), d[0]);
                let out_level = if space.is_output_cell(i) {
                    output_order[i - space.num_intermediate_cells]
                } else {
                    self.inter_levels[d[1]]
                };
                CellSpec { input_a: a, input_b: b, out_level, op: space.ops[d[2]] }
            })
            .collect();
        Genome { space: space.clone(), cells, output_order }
    }
}

impl Iterator for GenomeEnumerator {
    type Item = Genome;

    fn next(&mut self) -> Option<Genome> {
        if self.done {
            return None;
        }
        let g = self.decode();
        // odometer increment, last digit fastest
        let mut pos = self.digits.len();
        loop {
            if pos == 0 {
                self.done = true;
                break;
            }
            pos -= 1;
            self.digits[pos] += 1;
            if self.digits[pos] < self.radices[pos] {
                break;
            }
            self.digits[pos] = 0;
        }
        Some(g)
    }
}

/// Streams every valid genome of `space` exactly once.
pub fn enumerate(space: &SpaceConfig, cap: u128) -> Result<GenomeEnumerator, SpaceError> {
    let count = space.genome_count();
    if count > cap {
        return Err(SpaceError::TooLarge { count, cap });
    }
    if space.num_inputs() < 2 {
        return Err(SpaceError::Degenerate(space.num_inputs()));
    }
    let inter_levels = space.intermediate_levels();
    let perms: usize = (1..=space.num_output_cells()).product();
    let mut radices = vec![perms];
    for i in 0..space.num_cells() {
        let n = space.candidates_at(i);
        let lv = if space.is_output_cell(i) { 1 } else { inter_levels.len() };
        radices.extend([n * (n - 1), lv, space.ops.len()]);
    }
    Ok(GenomeEnumerator {
        space: space.clone(),
        inter_levels,
        digits: vec![0; radices.len()],
        radices,
        done: false,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown-preset: {0:?} (known: nasfpn-7cell, vanilla-fpn)")]
pub struct UnknownPreset(pub String);

pub const PRESETS: [&str; 2] = ["nasfpn-7cell", "vanilla-fpn"];

/// Named reference genomes over [`SpaceConfig::nasfpn`]-shaped spaces.
///
/// `nasfpn-7cell` is the reference 7-cell pyramid:
/// two intermediate cells (a global-pool cell at P6 and a sum cell at P4)
/// followed by output cells in the order P3, P4, P5, P7, P6.
///
/// `vanilla-fpn` is the top-down pathway: each output is the sum of its
/// lateral input and the upsampled next-coarser output. The grammar needs two
/// distinct operands, so the coarsest output sums C7 with a pooled C6.
pub fn preset(name: &str) -> Result<Genome, UnknownPreset> {
    use BinaryOp::{GlobalPool as Gp, Sum};
    let cell = |a, b, l, op| CellSpec { input_a: a, input_b: b, out_level: Level(l), op };
    // candidates 0..=4 are P3..P7 inputs
    let (space, cells) = match name {
        "nasfpn-7cell" => (
            SpaceConfig::nasfpn(),
            vec![
                cell(1, 3, 6, Gp),  // 5
                cell(1, 5, 4, Sum), // 6
                cell(0, 6, 3, Sum), // 7 -> P3
                cell(6, 7, 4, Sum), // 8 -> P4
                cell(7, 8, 5, Gp),  // 9 -> P5
                cell(6, 9, 7, Gp),  // 10 -> P7
                cell(9, 10, 6, Gp), // 11 -> P6
            ],
        ),
        "vanilla-fpn" => {
            let mut space = SpaceConfig::nasfpn();
            space.num_intermediate_cells = 0;
            (
                space,
                vec![
                    cell(4, 3, 7, Sum), // 5 -> P7
                    cell(3, 5, 6, Sum), // 6 -> P6
                    cell(2, 6, 5, Sum), // 7 -> P5
                    cell(1, 7, 4, Sum), // 8 -> P4
                    cell(0, 8, 3, Sum), // 9 -> P3
                ],
            )
        }
        other => return Err(UnknownPreset(other.to_string())),
    };
    let output_order = cells[space.num_intermediate_cells..].iter().map(|c| c.out_level).collect();
    Ok(Genome { space, cells, output_order })
}

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenomeRepr {
    version: u32,
    space: SpaceConfig,
    cells: Vec<CellSpec>,
    output_order: Vec<Level>,
}

#[derive(Debug, Error)]
pub enum GenomeJsonError {
    #[error("parse-error: {0}")]
    Parse(String),
    #[error("schema-violation: {0}")]
    Schema(String),
    #[error("invalid genome: {}", .0.violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(ValidationReport),
}

impl GenomeJsonError {
    pub fn code(&self) -> &'static str {
        match self {
            GenomeJsonError::Parse(_) => "parse-error",
            GenomeJsonError::Schema(_) => "schema-violation",
            GenomeJsonError::Invalid(_) => "invalid-genome",
        }
    }
}

pub fn to_json(genome: &Genome) -> String {
    let repr = GenomeRepr {
        version: SCHEMA_VERSION,
        space: genome.space.clone(),
        cells: genome.cells.clone(),
        output_order: genome.output_order.clone(),
    };
    serde_json::to_string(&repr).expect("genome serialization is infallible")
}

pub fn to_json_pretty(genome: &Genome) -> String {
    let v: serde_json::Value = serde_json::from_str(&to_json(genome)).expect("own output");
    serde_json::to_string_pretty(&v).expect("value serialization")
}

/// Parses without checking the genome invariants.
pub fn from_json_unchecked(text: &str) -> Result<Genome, GenomeJsonError> {
    use serde_json::error::Category;
    let repr: GenomeRepr = serde_json::from_str(text).map_err(|e| match e.classify() {
        Category::Syntax | Category::Eof | Category::Io => GenomeJsonError::Parse(e.to_string()),
        Category::Data => GenomeJsonError::Schema(e.to_string()),
    })?;
    if repr.version != SCHEMA_VERSION {
        return Err(GenomeJsonError::Schema(format!("unsupported version {}", repr.version)));
    }
    Ok(Genome { space: repr.space, cells: repr.cells, output_order: repr.output_order })
}

pub fn from_json(text: &str) -> Result<Genome, GenomeJsonError> {
    let genome = from_json_unchecked(text)?;
    let report = genome.validate();
    if report.is_ok() {
        Ok(genome)
    } else {
        Err(GenomeJsonError::Invalid(report))
    }
}
