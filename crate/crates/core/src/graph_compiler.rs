//! Lowering of genomes into shape-inferred feature-fusion DAGs.
//!
//! Node ids are indices into [`FeatureGraph::nodes`] and every predecessor id
//! is smaller than its consumer's id, so index order is a topological order.
//! Stage 0 holds the pyramid inputs (and their width projections); stage `k`
//! holds the nodes of the `k`-th stacked pyramid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::search_space::{BinaryOp, ConvMode, Genome, Level, ValidationReport};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    NearestUpsample,
    MaxPoolDown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    /// Pyramid input slot `slot` (index into the space's `input_levels`).
    Input { slot: usize, channels: usize },
    /// Pointwise conv + BN mapping a backbone width to the feature width.
    Projection,
    Resample { mode: ResampleMode, factor: usize },
    Merge { op: BinaryOp },
    /// ReLU, 3x3 conv (or depthwise 3x3 + pointwise 1x1), BN.
    ConvBlock { mode: ConvMode },
    OutputSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    /// Height and width; feature maps are square.
    pub side: usize,
    pub channels: usize,
}

impl Shape {
    pub fn elements(&self) -> usize {
        self.side * self.side * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    #[serde(flatten)]
    pub kind: NodeKind,
    pub level: Level,
    pub preds: Vec<NodeId>,
    pub stage: usize,
    /// Merging cell this node was lowered from, if any.
    pub cell: Option<usize>,
    pub shape: Option<Shape>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGraph {
    pub nodes: Vec<Node>,
    /// Input node per pyramid input level.
    pub inputs: BTreeMap<Level, NodeId>,
    /// `stage_outputs[k - 1]` maps each output level of stage `k` to its `OutputSum`.
    pub stage_outputs: Vec<BTreeMap<Level, NodeId>>,
    pub stack_count: usize,
    pub feature_dim: usize,
    pub conv_mode: ConvMode,
    pub image_side: Option<usize>,
}

/// Describes the feature maps handed to the first pyramid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidInputSpec {
    pub image_side: usize,
    /// Channel width per pyramid input level.
    pub channels: BTreeMap<Level, usize>,
    /// Levels not produced by the backbone but max-pooled (stride 2, 4, ...)
    /// from the coarsest backbone level.
    pub pooled_levels: Vec<Level>,
}

impl PyramidInputSpec {
    /// Every input already at the space's feature width; no projections.
    pub fn uniform(genome: &Genome, image_side: usize) -> Self {
        let channels = genome
            .space
            .input_levels
            .iter()
            .map(|&l| (l, genome.space.feature_dim))
            .collect();
        PyramidInputSpec { image_side, channels, pooled_levels: Vec::new() }
    }

    /// Backbone provides `backbone` levels with the given widths; the
    /// remaining input levels of `genome` are pooled from the coarsest one.
    pub fn with_backbone(genome: &Genome, image_side: usize, backbone: &[(Level, usize)]) -> Self {
        let mut channels: BTreeMap<Level, usize> = backbone.iter().copied().collect();
        let (top, top_width) = *backbone.iter().max_by_key(|(l, _)| *l).expect("non-empty backbone");
        let mut pooled_levels = Vec::new();
        for &l in &genome.space.input_levels {
            if !channels.contains_key(&l) && l > top {
                channels.insert(l, top_width);
                pooled_levels.push(l);
            }
        }
        pooled_levels.sort();
        PyramidInputSpec { image_side, channels, pooled_levels }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompileError {
    #[error("invalid-genome: {} violation(s)", .0.violations.len())]
    InvalidGenome(ValidationReport),
    #[error("not-stackable: input levels {inputs:?} differ from output levels {outputs:?}")]
    NotStackable { inputs: Vec<Level>, outputs: Vec<Level> },
    #[error("stack count must be at least 1")]
    ZeroStack,
    #[error("indivisible-image-size: {side} is not divisible by 2^{level}")]
    IndivisibleImageSize { side: usize, level: u8 },
    #[error("no channel width given for input level {0}")]
    MissingInputWidth(Level),
    #[error("shape-mismatch at node {node}: {detail}")]
    ShapeMismatch { node: NodeId, detail: String },
    #[error("shapes-missing: graph has not been through infer_shapes")]
    ShapesMissing,
}

impl CompileError {
    pub fn code(&self) -> &'static str {
        match self {
            CompileError::InvalidGenome(_) => "invalid-genome",
            CompileError::NotStackable { .. } => "not-stackable",
            CompileError::ZeroStack => "zero-stack",
            CompileError::IndivisibleImageSize { .. } => "indivisible-image-size",
            CompileError::MissingInputWidth(_) => "missing-input-width",
            CompileError::ShapeMismatch { .. } => "shape-mismatch",
            CompileError::ShapesMissing => "shapes-missing",
        }
    }
}

struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, kind: NodeKind, level: Level, preds: Vec<NodeId>, stage: usize, cell: Option<usize>) -> NodeId {
        let id = self.nodes.len();
        debug_assert!(preds.iter().all(|&p| p < id));
        self.nodes.push(Node { id, kind, level, preds, stage, cell, shape: None });
        id
    }

    /// Routes `src` to `target` level with a single resample node if needed.
    fn resample(&mut self, src: NodeId, target: Level, stage: usize, cell: usize) -> NodeId {
        let from = self.nodes[src].level;
        if from == target {
            return src;
        }
        let (mode, k) = if target < from {
            (ResampleMode::NearestUpsample, from.0 - target.0)
        } else {
            (ResampleMode::MaxPoolDown, target.0 - from.0)
        };
        let kind = NodeKind::Resample { mode, factor: 1 << k };
        self.push(kind, target, vec![src], stage, Some(cell))
    }

    /// Lowers one pyramid whose input slots are `slots`; returns its outputs.
    fn lower_stage(&mut self, genome: &Genome, slots: &[NodeId], stage: usize) -> BTreeMap<Level, NodeId> {
        let space = &genome.space;
        let mut pool: Vec<NodeId> = slots.to_vec();
        let mut consumed = vec![false; slots.len() + genome.cells.len()];
        for (i, cell) in genome.cells.iter().enumerate() {
            let a = self.resample(pool[cell.input_a], cell.out_level, stage, i);
            let b = self.resample(pool[cell.input_b], cell.out_level, stage, i);
            consumed[cell.input_a] = true;
            consumed[cell.input_b] = true;
            let merge = self.push(NodeKind::Merge { op: cell.op }, cell.out_level, vec![a, b], stage, Some(i));
            let conv = self.push(NodeKind::ConvBlock { mode: space.conv_mode }, cell.out_level, vec![merge], stage, Some(i));
            pool.push(conv);
        }

        let first_output = slots.len() + space.num_intermediate_cells;
        let mut outputs = BTreeMap::new();
        for (k, &level) in genome.output_order.iter().enumerate() {
            let out_cell = first_output + k;
            let mut preds = vec![pool[out_cell]];
            // leftover-sum rule: unconsumed non-output candidates at this level
            preds.extend(
                (0..first_output)
                    .filter(|&j| !consumed[j] && self.nodes[pool[j]].level == level)
                    .map(|j| pool[j]),
            );
            let id = self.push(NodeKind::OutputSum, level, preds, stage, None);
            outputs.insert(level, id);
        }
        outputs
    }
}

/// Lowers one pyramid. Equivalent to `stack(genome, 1, inputs)`.
pub fn compile(genome: &Genome, inputs: &PyramidInputSpec) -> Result<FeatureGraph, CompileError> {
    stack(genome, 1, inputs)
}

/// Lowers `n` chained copies of the pyramid; copy `k`'s outputs feed copy `k+1`'s inputs.
pub fn stack(genome: &Genome, n: usize, inputs: &PyramidInputSpec) -> Result<FeatureGraph, CompileError> {
    let graph = lower(genome, n, inputs)?;
    infer_shapes(&graph, inputs.image_side, genome.space.feature_dim)
}

/// Structural lowering without shapes.
pub fn lower(genome: &Genome, n: usize, inputs: &PyramidInputSpec) -> Result<FeatureGraph, CompileError> {
    let report = genome.validate();
    if !report.is_ok() {
        return Err(CompileError::InvalidGenome(report));
    }
    if n == 0 {
        return Err(CompileError::ZeroStack);
    }
    let space = &genome.space;
    if n > 1 && !space.is_stackable() {
        let mut ins = space.input_levels.clone();
        ins.sort();
        return Err(CompileError::NotStackable { inputs: ins, outputs: space.output_levels.clone() });
    }

    let mut b = Builder { nodes: Vec::new() };
    let mut input_ids = BTreeMap::new();
    let mut slots = Vec::with_capacity(space.num_inputs());
    for (slot, &level) in space.input_levels.iter().enumerate() {
        let channels = *inputs.channels.get(&level).ok_or(CompileError::MissingInputWidth(level))?;
        let id = b.push(NodeKind::Input { slot, channels }, level, vec![], 0, None);
        input_ids.insert(level, id);
        let slot_node = if channels != space.feature_dim {
            b.push(NodeKind::Projection, level, vec![id], 0, None)
        } else {
            id
        };
        slots.push(slot_node);
    }

    let mut stage_outputs = Vec::with_capacity(n);
    for stage in 1..=n {
        let outputs = b.lower_stage(genome, &slots, stage);
        slots = space.input_levels.iter().map(|l| outputs.get(l).copied().unwrap_or(usize::MAX)).collect();
        stage_outputs.push(outputs);
    }

    Ok(FeatureGraph {
        nodes: b.nodes,
        inputs: input_ids,
        stage_outputs,
        stack_count: n,
        feature_dim: space.feature_dim,
        conv_mode: space.conv_mode,
        image_side: None,
    })
}

/// Fills in (side, channels) for every node and checks consistency.
///
/// A node at level `L` has side `image_side / 2^L`; pyramid-internal nodes
/// have `feature_dim` channels and inputs keep their own width.
pub fn infer_shapes(graph: &FeatureGraph, image_side: usize, feature_dim: usize) -> Result<FeatureGraph, CompileError> {
    let max_level = graph.nodes.iter().map(|n| n.level.0).max().unwrap_or(0);
    if image_side == 0 || image_side % (1usize << max_level) != 0 {
        return Err(CompileError::IndivisibleImageSize { side: image_side, level: max_level });
    }
    let mut out = graph.clone();
    out.image_side = Some(image_side);
    out.feature_dim = feature_dim;
    for id in 0..out.nodes.len() {
        let node = &out.nodes[id];
        let side = image_side >> node.level.0;
        let channels = match node.kind {
            NodeKind::Input { channels, .. } => channels,
            _ => feature_dim,
        };
        let mismatch = |detail: String| CompileError::ShapeMismatch { node: id, detail };
        let pred_shape = |p: NodeId| out.nodes[p].shape.expect("predecessors come first");
        match node.kind {
            NodeKind::Input { .. } | NodeKind::Projection => {}
            NodeKind::Resample { mode, factor } => {
                let src = pred_shape(node.preds[0]);
                let expect = match mode {
                    ResampleMode::NearestUpsample => src.side * factor,
                    ResampleMode::MaxPoolDown => src.side / factor,
                };
                if expect != side || src.channels != feature_dim {
                    return Err(mismatch(format!("resample of {src:?} by {factor} gives side {expect}, node is {side}")));
                }
            }
            NodeKind::Merge { .. } | NodeKind::ConvBlock { .. } | NodeKind::OutputSum => {
                for &p in &node.preds {
                    let s = pred_shape(p);
                    if s.side != side || s.channels != feature_dim {
                        return Err(mismatch(format!("predecessor {p} has {s:?}, expected side {side} x {feature_dim}")));
                    }
                }
            }
        }
        out.nodes[id].shape = Some(Shape { side, channels });
    }
    Ok(out)
}

impl FeatureGraph {
    pub fn outputs(&self) -> &BTreeMap<Level, NodeId> {
        self.stage_outputs.last().expect("at least one stage")
    }

    pub fn is_shaped(&self) -> bool {
        self.nodes.iter().all(|n| n.shape.is_some())
    }

    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for n in &self.nodes {
            for &p in &n.preds {
                out[p].push(n.id);
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|n| n.preds.len()).sum()
    }

    pub fn stage_node_count(&self, stage: usize) -> usize {
        self.nodes.iter().filter(|n| n.stage == stage).count()
    }

    /// Nodes needed to produce stage `k`'s outputs (all stages `<= k`).
    pub fn nodes_through_stage(&self, k: usize) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(move |n| n.stage <= k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serialization")
    }

    /// Kahn's algorithm over the predecessor lists; `None` if there is a cycle.
    pub fn topological_order(&self) -> Option<Vec<NodeId>> {
        let mut indegree: Vec<usize> = self.nodes.iter().map(|n| n.preds.len()).collect();
        let consumers = self.consumers();
        let mut ready: Vec<NodeId> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).rev().collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop() {
            order.push(id);
            // one entry per edge, so duplicate predecessors decrement twice
            for &c in &consumers[id] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// Checks the structural invariants every compiled graph must satisfy.
    /// Returns one message per violation.
    pub fn check_invariants(&self, output_levels: &[Level]) -> Vec<String> {
        let mut errs = Vec::new();
        if self.topological_order().is_none() {
            errs.push("graph has a cycle".to_string());
        }
        let consumers = self.consumers();
        for n in &self.nodes {
            match n.kind {
                NodeKind::Merge { .. } => {
                    if n.preds.len() != 2 {
                        errs.push(format!("merge {} has {} predecessors", n.id, n.preds.len()));
                    }
                    if let Some(s) = n.shape {
                        for &p in &n.preds {
                            if self.nodes[p].shape.map(|q| q.side) != Some(s.side) {
                                errs.push(format!("merge {} input {p} has wrong spatial size", n.id));
                            }
                        }
                    }
                    let c = &consumers[n.id];
                    if c.len() != 1 || !matches!(self.nodes[c[0]].kind, NodeKind::ConvBlock { .. }) {
                        errs.push(format!("merge {} is not followed by exactly one conv block", n.id));
                    }
                }
                NodeKind::Resample { factor, .. } => {
                    if factor < 2 || !factor.is_power_of_two() {
                        errs.push(format!("resample {} has factor {factor}", n.id));
                    }
                }
                NodeKind::OutputSum if n.preds.is_empty() => {
                    errs.push(format!("output sum {} has no predecessors", n.id));
                }
                _ => {}
            }
        }
        for (k, outs) in self.stage_outputs.iter().enumerate() {
            let levels: Vec<Level> = outs.keys().copied().collect();
            if levels != output_levels {
                errs.push(format!("stage {} outputs {levels:?}, expected {output_levels:?}", k + 1));
            }
        }
        // leftover closure: only final outputs and inputs without a matching
        // output level may lack consumers
        let final_outputs: Vec<NodeId> = self.outputs().values().copied().collect();
        for n in &self.nodes {
            if consumers[n.id].is_empty() && !final_outputs.contains(&n.id) {
                let unmatched_input = matches!(n.kind, NodeKind::Input { .. } | NodeKind::Projection)
                    && !output_levels.contains(&n.level);
                if !unmatched_input {
                    errs.push(format!("node {} ({:?}) is dangling", n.id, n.kind));
                }
            }
        }
        errs
    }
}

fn dot_label(n: &Node) -> String {
    let base = match n.kind {
        NodeKind::Input { .. } => format!("in {}", n.level),
        NodeKind::Projection => "proj 1x1".to_string(),
        NodeKind::Resample { mode: ResampleMode::NearestUpsample, factor } => format!("up x{factor}"),
        NodeKind::Resample { mode: ResampleMode::MaxPoolDown, factor } => format!("pool /{factor}"),
        NodeKind::Merge { op: BinaryOp::Sum } => "sum".to_string(),
        NodeKind::Merge { op: BinaryOp::GlobalPool } => "GP".to_string(),
        NodeKind::ConvBlock { mode: ConvMode::Full } => "R-C-B".to_string(),
        NodeKind::ConvBlock { mode: ConvMode::DepthwiseSeparable } => "R-SC-B".to_string(),
        NodeKind::OutputSum => format!("out {}", n.level),
    };
    match n.shape {
        Some(s) => format!("{base}\\n{}x{}x{}", s.side, s.side, s.channels),
        None => base,
    }
}

/// Graphviz rendering: one row (rank) per level, coarsest on top.
/// Inputs are green circles, final outputs red circles, earlier stage
/// outputs orange.
pub fn export_dot(graph: &FeatureGraph) -> String {
    let final_outputs: Vec<NodeId> = graph.outputs().values().copied().collect();
    let mut s = String::new();
    s.push_str("digraph pyramid {\n  node [fontsize=10];\n");
    let _ = writeln!(s, "  label=\"stages={} dim={}\";", graph.stack_count, graph.feature_dim);
    for n in &graph.nodes {
        let style = match n.kind {
            NodeKind::Input { .. } => "shape=circle, style=filled, fillcolor=green",
            NodeKind::OutputSum if final_outputs.contains(&n.id) => "shape=circle, style=filled, fillcolor=red",
            NodeKind::OutputSum => "shape=circle, style=filled, fillcolor=orange",
            NodeKind::Merge { .. } => "shape=box",
            NodeKind::ConvBlock { .. } | NodeKind::Projection => "shape=box, style=rounded",
            NodeKind::Resample { .. } => "shape=plaintext",
        };
        let _ = writeln!(s, "  n{} [label=\"{}\", {}];", n.id, dot_label(n), style);
    }
    let mut by_level: BTreeMap<Level, Vec<NodeId>> = BTreeMap::new();
    for n in &graph.nodes {
        by_level.entry(n.level).or_default().push(n.id);
    }
    for (level, ids) in by_level.iter().rev() {
        let members: Vec<String> = ids.iter().map(|i| format!("n{i}")).collect();
        let _ = writeln!(s, "  {{ rank=same; /* {level} */ {}; }}", members.join("; "));
    }
    for n in &graph.nodes {
        for &p in &n.preds {
            let _ = writeln!(s, "  n{p} -> n{};", n.id);
        }
    }
    s.push_str("}\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{preset, sample_random, CellSpec, SpaceConfig};

    fn shaped(name: &str, n: usize, side: usize) -> FeatureGraph {
        let g = preset(name).unwrap();
        stack(&g, n, &PyramidInputSpec::uniform(&g, side)).unwrap()
    }

    fn resamples_into(graph: &FeatureGraph, merge: &Node) -> Vec<(ResampleMode, usize)> {
        merge
            .preds
            .iter()
            .filter_map(|&p| match graph.nodes[p].kind {
                NodeKind::Resample { mode, factor } => Some((mode, factor)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn vanilla_fpn_is_top_down() {
        let graph = shaped("vanilla-fpn", 1, 256);
        let merges: Vec<&Node> = graph.nodes.iter().filter(|n| matches!(n.kind, NodeKind::Merge { .. })).collect();
        assert_eq!(merges.len(), 5);
        // the coarsest output pools its finer neighbour; the rest are pure top-down
        assert_eq!(resamples_into(&graph, merges[0]), vec![(ResampleMode::MaxPoolDown, 2)]);
        for m in &merges[1..] {
            assert_eq!(resamples_into(&graph, m), vec![(ResampleMode::NearestUpsample, 2)]);
        }
    }

    #[test]
    fn resample_factors_span_levels() {
        let mut g = preset("vanilla-fpn").unwrap();
        // cell merging P3 (slot 0) and P7 (slot 4) into P5
        g.cells[2] = CellSpec { input_a: 0, input_b: 4, out_level: Level(5), op: BinaryOp::Sum };
        let graph = stack(&g, 1, &PyramidInputSpec::uniform(&g, 256)).unwrap();
        let merge = graph.nodes.iter().find(|n| n.cell == Some(2) && matches!(n.kind, NodeKind::Merge { .. })).unwrap();
        let r = resamples_into(&graph, merge);
        assert_eq!(r, vec![(ResampleMode::MaxPoolDown, 4), (ResampleMode::NearestUpsample, 4)]);
    }

    #[test]
    fn same_level_needs_no_resample() {
        let g = preset("nasfpn-7cell").unwrap();
        let graph = stack(&g, 1, &PyramidInputSpec::uniform(&g, 256)).unwrap();
        // cell 6 = sum(P4 input, cell 5 at P6) -> P4: only cell 5 is resampled
        let merge = graph.nodes.iter().find(|n| n.cell == Some(1) && matches!(n.kind, NodeKind::Merge { .. })).unwrap();
        assert_eq!(resamples_into(&graph, merge), vec![(ResampleMode::NearestUpsample, 4)]);
        assert!(matches!(graph.nodes[merge.preds[0]].kind, NodeKind::Input { .. }));
    }

    #[test]
    fn leftover_inputs_fold_into_outputs() {
        let graph = shaped("nasfpn-7cell", 1, 256);
        // P5 and P7 inputs are never consumed by a cell
        let out5 = &graph.nodes[graph.outputs()[&Level(5)]];
        let out7 = &graph.nodes[graph.outputs()[&Level(7)]];
        assert_eq!(out5.preds.len(), 2);
        assert_eq!(out7.preds.len(), 2);
        assert!(out5.preds.contains(&graph.inputs[&Level(5)]));
        assert!(out7.preds.contains(&graph.inputs[&Level(7)]));
        assert_eq!(graph.nodes[graph.outputs()[&Level(3)]].preds.len(), 1);
        assert!(graph.check_invariants(&SpaceConfig::nasfpn().output_levels).is_empty());
    }

    #[test]
    fn stacking() {
        let g = preset("nasfpn-7cell").unwrap();
        let spec = PyramidInputSpec::uniform(&g, 256);
        assert_eq!(stack(&g, 1, &spec).unwrap(), compile(&g, &spec).unwrap());
        let one = stack(&g, 1, &spec).unwrap();
        let seven = stack(&g, 7, &spec).unwrap();
        let per_stage = one.stage_node_count(1);
        for k in 1..=7 {
            assert_eq!(seven.stage_node_count(k), per_stage);
        }
        assert_eq!(seven.nodes.len(), one.stage_node_count(0) + 7 * per_stage);
        assert_eq!(seven.stage_outputs.len(), 7);
        assert!(seven.check_invariants(&g.space.output_levels).is_empty());
    }

    #[test]
    fn lite_is_not_stackable() {
        let g = sample_random(&SpaceConfig::lite(4, 48), 3).unwrap();
        let spec = PyramidInputSpec::uniform(&g, 384);
        let err = stack(&g, 2, &spec).unwrap_err();
        assert_eq!(err.code(), "not-stackable");
        assert!(compile(&g, &spec).is_ok());
    }

    #[test]
    fn shape_inference() {
        let graph = shaped("nasfpn-7cell", 1, 640);
        let p7 = &graph.nodes[graph.outputs()[&Level(7)]];
        assert_eq!(p7.shape.unwrap().side, 5);
        let graph = shaped("nasfpn-7cell", 1, 512);
        assert_eq!(graph.nodes[graph.outputs()[&Level(3)]].shape.unwrap().side, 64);
        let g = preset("nasfpn-7cell").unwrap();
        let err = compile(&g, &PyramidInputSpec::uniform(&g, 100)).unwrap_err();
        assert_eq!(err.code(), "indivisible-image-size");
    }

    #[test]
    fn backbone_widths_get_projections() {
        let g = preset("nasfpn-7cell").unwrap();
        let spec = PyramidInputSpec::with_backbone(&g, 256, &[(Level(3), 128), (Level(4), 256), (Level(5), 512)]);
        assert_eq!(spec.pooled_levels, vec![Level(6), Level(7)]);
        let graph = compile(&g, &spec).unwrap();
        let projections = graph.nodes.iter().filter(|n| n.kind == NodeKind::Projection).count();
        // P4 already has 256 channels
        assert_eq!(projections, 4);
        assert!(graph.nodes.iter().all(|n| match n.kind {
            NodeKind::Input { channels, .. } => n.shape.unwrap().channels == channels,
            _ => n.shape.unwrap().channels == 256,
        }));
    }

    #[test]
    fn dot_export() {
        let graph = shaped("nasfpn-7cell", 1, 256);
        let dot = export_dot(&graph);
        assert_eq!(dot, export_dot(&graph));
        assert_eq!(dot.matches("fillcolor=green").count(), 5);
        assert_eq!(dot.matches("fillcolor=red").count(), 5);
        let declared = dot.lines().filter(|l| l.trim_start().starts_with('n') && l.contains("[label=")).count();
        assert_eq!(declared, graph.nodes.len());
        let stacked = export_dot(&shaped("nasfpn-7cell", 3, 256));
        assert_eq!(stacked.matches("fillcolor=red").count(), 5);
        assert_eq!(stacked.matches("fillcolor=orange").count(), 10);
    }

    #[test]
    fn invalid_genome_is_rejected() {
        let mut g = preset("vanilla-fpn").unwrap();
        g.cells[0].input_b = g.cells[0].input_a;
        let err = compile(&g, &PyramidInputSpec::uniform(&g, 256)).unwrap_err();
        assert_eq!(err.code(), "invalid-genome");
    }
}
