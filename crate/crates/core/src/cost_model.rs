//! Analytic FLOP and parameter counts for shaped feature graphs.
//!
//! `flops` is 2 x multiply-accumulates and covers convolutions only, which
//! makes it directly comparable with the MAC counter of `micro_tensor`.
//! Everything else (BN scale and shift, sums, pooling compares, gates) is
//! reported separately as `other_ops`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph_compiler::{FeatureGraph, NodeId, NodeKind, ResampleMode, Shape};
use crate::search_space::{BinaryOp, ConvMode, Level};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CostError {
    #[error("shapes-missing: graph has no inferred shapes")]
    ShapesMissing,
}

impl CostError {
    pub fn code(&self) -> &'static str {
        "shapes-missing"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node: NodeId,
    pub kind: String,
    pub level: Level,
    pub flops: u64,
    pub params: u64,
    /// Conv kernel weights only (no BN affine terms).
    pub conv_params: u64,
    pub other_ops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_flops: u64,
    pub total_params: u64,
    pub total_conv_params: u64,
    pub total_other_ops: u64,
    pub per_node: Vec<NodeCost>,
}

fn kind_label(kind: &NodeKind) -> String {
    match kind {
        NodeKind::Input { .. } => "input".into(),
        NodeKind::Projection => "projection".into(),
        NodeKind::Resample { mode: ResampleMode::NearestUpsample, factor } => format!("upsample x{factor}"),
        NodeKind::Resample { mode: ResampleMode::MaxPoolDown, factor } => format!("maxpool /{factor}"),
        NodeKind::Merge { op } => format!("merge {}", op.name()),
        NodeKind::ConvBlock { mode: ConvMode::Full } => "conv full".into(),
        NodeKind::ConvBlock { mode: ConvMode::DepthwiseSeparable } => "conv separable".into(),
        NodeKind::OutputSum => "output sum".into(),
    }
}

/// `(macs, params, other_ops)` for one node given its own and its first predecessor's shape.
/// `(macs, params, conv weights, other ops)` of one node.
fn node_cost(kind: &NodeKind, shape: Shape, pred: Option<Shape>, num_preds: usize) -> (u64, u64, u64, u64) {
    let hw = (shape.side * shape.side) as u64;
    let c = shape.channels as u64;
    let elems = hw * c;
    let bn = (2 * c, 2 * elems);
    match kind {
        NodeKind::Input { .. } => (0, 0, 0, 0),
        NodeKind::Projection => {
            let cin = pred.expect("projection has an input").channels as u64;
            (cin * c * hw, cin * c + bn.0, cin * c, bn.1)
        }
        NodeKind::Resample { mode: ResampleMode::NearestUpsample, .. } => (0, 0, 0, 0),
        NodeKind::Resample { mode: ResampleMode::MaxPoolDown, factor } => {
            let k = *factor as u64;
            (0, 0, 0, elems * (k * k - 1))
        }
        NodeKind::Merge { op: BinaryOp::Sum } => (0, 0, 0, elems),
        // channel max, one sigmoid per channel, multiply and add per element
        NodeKind::Merge { op: BinaryOp::GlobalPool } => (0, 0, 0, c * (hw - 1) + c + 2 * elems),
        NodeKind::ConvBlock { mode } => {
            let cin = pred.expect("conv block has an input").channels as u64;
            let (macs, weights) = match mode {
                ConvMode::Full => (9 * cin * c * hw, 9 * cin * c),
                ConvMode::DepthwiseSeparable => ((9 * cin + cin * c) * hw, 9 * cin + cin * c),
            };
            // ReLU on the input, BN on the output
            (macs, weights + bn.0, weights, (cin * hw) + bn.1)
        }
        NodeKind::OutputSum => (0, 0, 0, (num_preds as u64 - 1) * elems),
    }
}

/// Per-node and total cost of a shaped graph.
pub fn estimate(graph: &FeatureGraph) -> Result<CostReport, CostError> {
    if !graph.is_shaped() {
        return Err(CostError::ShapesMissing);
    }
    let mut per_node = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let shape = node.shape.ok_or(CostError::ShapesMissing)?;
        let pred = node.preds.first().and_then(|&p| graph.nodes[p].shape);
        let (macs, params, conv_params, other_ops) = node_cost(&node.kind, shape, pred, node.preds.len());
        per_node.push(NodeCost {
            node: node.id,
            kind: kind_label(&node.kind),
            level: node.level,
            flops: 2 * macs,
            params,
            conv_params,
            other_ops,
        });
    }
    Ok(CostReport {
        total_flops: per_node.iter().map(|n| n.flops).sum(),
        total_params: per_node.iter().map(|n| n.params).sum(),
        total_conv_params: per_node.iter().map(|n| n.conv_params).sum(),
        total_other_ops: per_node.iter().map(|n| n.other_ops).sum(),
        per_node,
    })
}

impl CostReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table, one row per node that costs anything, then totals.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>5}  {:<16} {:>5} {:>14} {:>10} {:>12}", "node", "kind", "level", "flops", "params", "other_ops");
        for n in self.per_node.iter().filter(|n| n.flops + n.params + n.other_ops > 0) {
            let _ = writeln!(
                s,
                "{:>5}  {:<16} {:>5} {:>14} {:>10} {:>12}",
                n.node,
                n.kind,
                n.level.to_string(),
                n.flops,
                n.params,
                n.other_ops
            );
        }
        let _ = writeln!(
            s,
            "{:>5}  {:<16} {:>5} {:>14} {:>10} {:>12}",
            "", "total", "", self.total_flops, self.total_params, self.total_other_ops
        );
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub a: u64,
    pub b: u64,
    /// `b - a`.
    pub delta: i128,
    /// `b / a`; `None` when `a` is zero.
    pub ratio: Option<f64>,
}

impl MetricDelta {
    fn new(a: u64, b: u64) -> Self {
        MetricDelta { a, b, delta: b as i128 - a as i128, ratio: (a > 0).then(|| b as f64 / a as f64) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub flops: MetricDelta,
    pub params: MetricDelta,
    pub conv_params: MetricDelta,
    pub other_ops: MetricDelta,
}

pub fn compare(a: &CostReport, b: &CostReport) -> CostComparison {
    CostComparison {
        flops: MetricDelta::new(a.total_flops, b.total_flops),
        params: MetricDelta::new(a.total_params, b.total_params),
        conv_params: MetricDelta::new(a.total_conv_params, b.total_conv_params),
        other_ops: MetricDelta::new(a.total_other_ops, b.total_other_ops),
    }
}

impl CostComparison {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<11} {:>14} {:>14} {:>15} {:>8}", "metric", "a", "b", "b-a", "b/a");
        for (name, m) in [("flops", self.flops), ("params", self.params), ("conv_params", self.conv_params), ("other_ops", self.other_ops)] {
            let ratio = m.ratio.map_or("-".to_string(), |r| format!("{r:.4}"));
            let _ = writeln!(s, "{:<11} {:>14} {:>14} {:>15} {:>8}", name, m.a, m.b, m.delta, ratio);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::graph_compiler::{compile, lower, stack, PyramidInputSpec};
    use crate::micro_tensor::{forward, GraphModule, Mode, ExecState, ParamStore, Tensor4};
    use crate::rng::rng_from;
    use crate::search_space::{mutate, preset, sample_random, CellSpec, Genome, SpaceConfig};
    use proptest::prelude::*;

    fn single_cell(dim: usize, mode: ConvMode) -> Genome {
        // P2 and P3 merged into one P3 output
        let space = SpaceConfig::new(vec![Level(2), Level(3)], vec![Level(3)], 0, vec![BinaryOp::Sum], dim, mode).unwrap();
        Genome {
            space,
            cells: vec![CellSpec { input_a: 0, input_b: 1, out_level: Level(3), op: BinaryOp::Sum }],
            output_order: vec![Level(3)],
        }
    }

    fn conv_costs(r: &CostReport) -> Vec<&NodeCost> {
        r.per_node.iter().filter(|n| n.kind.starts_with("conv")).collect()
    }

    #[test]
    fn full_block_closed_form() {
        // 5x5 at P3 means a 40 pixel image
        let g = single_cell(256, ConvMode::Full);
        let r = estimate(&compile(&g, &PyramidInputSpec::uniform(&g, 40)).unwrap()).unwrap();
        let conv = conv_costs(&r)[0];
        assert_eq!(conv.flops, 29_491_200);
        assert_eq!(conv.params, 9 * 256 * 256 + 2 * 256);
        assert_eq!(conv.conv_params, 9 * 256 * 256);
        assert_eq!(r.total_flops, 29_491_200);
        let sum = r.per_node.iter().find(|n| n.kind == "merge sum").unwrap();
        assert_eq!((sum.params, sum.flops), (0, 0));
    }

    #[test]
    fn separable_block_closed_form() {
        let g = single_cell(16, ConvMode::DepthwiseSeparable);
        let r = estimate(&compile(&g, &PyramidInputSpec::uniform(&g, 64)).unwrap()).unwrap();
        let conv = conv_costs(&r)[0];
        assert_eq!(conv.params, 9 * 16 + 16 * 16 + 2 * 16);
        assert_eq!(conv.flops, 2 * (9 * 16 + 16 * 16) * 64);
    }

    #[test]
    fn projection_cost() {
        let g = single_cell(8, ConvMode::Full);
        let spec = PyramidInputSpec::with_backbone(&g, 64, &[(Level(2), 8), (Level(3), 5)]);
        let r = estimate(&compile(&g, &spec).unwrap()).unwrap();
        let p = r.per_node.iter().find(|n| n.kind == "projection").unwrap();
        assert_eq!(p.params, 5 * 8 + 2 * 8);
        assert_eq!(p.flops, 2 * 5 * 8 * 64);
    }

    #[test]
    fn unshaped_graph_is_rejected() {
        let g = preset("nasfpn-7cell").unwrap();
        let graph = lower(&g, 1, &PyramidInputSpec::uniform(&g, 128)).unwrap();
        assert_eq!(estimate(&graph), Err(CostError::ShapesMissing));
    }

    #[test]
    fn image_doubling_quadruples_conv_flops() {
        let g = preset("nasfpn-7cell").unwrap();
        let a = estimate(&compile(&g, &PyramidInputSpec::uniform(&g, 256)).unwrap()).unwrap();
        let b = estimate(&compile(&g, &PyramidInputSpec::uniform(&g, 512)).unwrap()).unwrap();
        assert_eq!(b.total_flops, 4 * a.total_flops);
        assert_eq!(b.total_params, a.total_params);
    }

    #[test]
    fn feature_dim_ratio() {
        let g = preset("nasfpn-7cell").unwrap();
        let r256 = estimate(&compile(&g.with_feature_dim(256).unwrap(), &PyramidInputSpec::uniform(&g, 256)).unwrap()).unwrap();
        let g384 = g.with_feature_dim(384).unwrap();
        let r384 = estimate(&compile(&g384, &PyramidInputSpec::uniform(&g384, 256)).unwrap()).unwrap();
        for (a, b) in conv_costs(&r256).iter().zip(conv_costs(&r384)) {
            let w256 = a.params - 2 * 256;
            let w384 = b.params - 2 * 384;
            assert_eq!(w384 as f64 / w256 as f64, 2.25);
            assert_eq!(b.flops as f64 / a.flops as f64, 2.25);
        }
        let c = compare(&r256, &r384);
        assert!((c.params.ratio.unwrap() - 2.25).abs() < 0.01);
        assert_eq!(c.conv_params.ratio, Some(2.25));
    }

    #[test]
    fn stacking_doubles_params() {
        let g = preset("nasfpn-7cell").unwrap();
        let spec = PyramidInputSpec::with_backbone(&g, 256, &[(Level(3), 64), (Level(4), 64), (Level(5), 64)]);
        let one = estimate(&stack(&g, 1, &spec).unwrap()).unwrap();
        let two = estimate(&stack(&g, 2, &spec).unwrap()).unwrap();
        let shared: u64 = one.per_node.iter().filter(|n| n.kind == "projection").map(|n| n.params).sum();
        assert!(shared > 0);
        assert_eq!(two.total_params - shared, 2 * (one.total_params - shared));
        let ratio = compare(&one, &two).params.ratio.unwrap();
        assert!(ratio > 1.9 && ratio < 2.0, "{ratio}");
    }

    #[test]
    fn compare_self_is_zero() {
        let g = preset("nasfpn-7cell").unwrap();
        let r = estimate(&compile(&g, &PyramidInputSpec::uniform(&g, 256)).unwrap()).unwrap();
        let c = compare(&r, &r);
        assert_eq!((c.flops.delta, c.params.delta, c.other_ops.delta), (0, 0, 0));
        assert!(r.to_table().contains("total"));
        let back: CostReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    fn instrumented(g: &Genome, spec: &PyramidInputSpec, n: usize) -> (CostReport, ExecState) {
        let graph = stack(g, n, spec).unwrap();
        let report = estimate(&graph).unwrap();
        let mut params = ParamStore::new();
        let module = GraphModule::new(&graph, &mut params, "p", &mut rng_from(1)).unwrap();
        let mut state = ExecState::new(params, Mode::Eval);
        let mut rng = rng_from(2);
        let inputs: BTreeMap<Level, Tensor4> = graph
            .inputs
            .iter()
            .map(|(&l, &id)| {
                let s = graph.nodes[id].shape.unwrap();
                (l, Tensor4::randn([1, s.channels, s.side, s.side], 1.0, &mut rng))
            })
            .collect();
        forward(&graph, &module, &mut state, &inputs).unwrap();
        (report, state)
    }

    #[test]
    fn counter_oracle_on_presets() {
        for name in crate::search_space::PRESETS {
            let g = preset(name).unwrap().with_feature_dim(3).unwrap();
            let spec = PyramidInputSpec::with_backbone(&g, 128, &[(Level(3), 5), (Level(4), 3)]);
            let (r, s) = instrumented(&g, &spec, 1);
            assert_eq!(r.total_flops, 2 * s.mac_counter(), "{name}");
            assert_eq!(r.total_other_ops, s.other_ops(), "{name}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn counter_oracle_on_random_genomes(seed in 0u64..10_000, n in 1usize..3, sep in any::<bool>()) {
            let mode = if sep { ConvMode::DepthwiseSeparable } else { ConvMode::Full };
            let mut space = SpaceConfig::nasfpn().with_feature_dim(2).unwrap();
            space.conv_mode = mode;
            let g = sample_random(&space, seed).unwrap();
            let spec = PyramidInputSpec::with_backbone(&g, 128, &[(Level(3), 3), (Level(4), 2), (Level(5), 4)]);
            let (r, s) = instrumented(&g, &spec, n);
            prop_assert_eq!(r.total_flops, 2 * s.mac_counter());
            prop_assert_eq!(r.total_other_ops, s.other_ops());
        }

        #[test]
        fn totals_are_sums_and_scale(seed in 0u64..10_000) {
            let g = mutate(&preset("nasfpn-7cell").unwrap(), seed).unwrap();
            let a = estimate(&compile(&g, &PyramidInputSpec::uniform(&g, 128)).unwrap()).unwrap();
            let b = estimate(&compile(&g, &PyramidInputSpec::uniform(&g, 256)).unwrap()).unwrap();
            prop_assert_eq!(a.total_flops, a.per_node.iter().map(|n| n.flops).sum::<u64>());
            prop_assert_eq!(a.total_params, a.per_node.iter().map(|n| n.params).sum::<u64>());
            prop_assert_eq!(b.total_flops, 4 * a.total_flops);
            let ab = compare(&a, &b);
            let ba = compare(&b, &a);
            prop_assert_eq!(ab.flops.delta, -ba.flops.delta);
            prop_assert_eq!(ab.other_ops.delta, -ba.other_ops.delta);
        }

        #[test]
        fn adding_a_cell_never_lowers_cost(seed in 0u64..10_000, inter in 0usize..3) {
            let space = SpaceConfig::lite(inter, 4);
            let g = sample_random(&space, seed).unwrap();
            let grown = insert_intermediate(&g, seed);
            let spec = |g: &Genome| PyramidInputSpec::uniform(g, 128);
            let a = estimate(&compile(&g, &spec(&g)).unwrap()).unwrap();
            let b = estimate(&compile(&grown, &spec(&grown)).unwrap()).unwrap();
            prop_assert!(b.total_flops > a.total_flops);
            prop_assert!(b.total_params > a.total_params);
        }
    }

    /// Inserts one intermediate cell right before the output cells.
    fn insert_intermediate(g: &Genome, seed: u64) -> Genome {
        use rand::Rng;
        let mut rng = rng_from(seed);
        let mut space = g.space.clone();
        space.num_intermediate_cells += 1;
        let pos = g.space.num_inputs() + g.space.num_intermediate_cells;
        let a = rng.gen_range(0..pos);
        let b = (a + rng.gen_range(1..pos)) % pos;
        let levels = space.intermediate_levels();
        let cell = CellSpec { input_a: a, input_b: b, out_level: levels[rng.gen_range(0..levels.len())], op: BinaryOp::Sum };
        let shift = |i: usize| if i >= pos { i + 1 } else { i };
        let mut cells: Vec<CellSpec> = g.intermediate_cells().to_vec();
        cells.push(cell);
        cells.extend(g.output_cells().iter().map(|c| CellSpec { input_a: shift(c.input_a), input_b: shift(c.input_b), ..*c }));
        let grown = Genome { space, cells, output_order: g.output_order.clone() };
        assert!(grown.validate().is_ok());
        grown
    }
}
