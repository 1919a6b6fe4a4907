use std::collections::BTreeMap;

use super::state::{BnLayer, ConvLayer, ExecState, ParamStore, Var};
use super::{Tensor4, TensorError};
use crate::graph_compiler::{FeatureGraph, NodeId, NodeKind, ResampleMode};
use crate::search_space::{BinaryOp, ConvMode, Level};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    Full { conv: ConvLayer, bn: BnLayer },
    Separable { depthwise: ConvLayer, pointwise: ConvLayer, bn: BnLayer },
    Projection { conv: ConvLayer, bn: BnLayer },
}

/// Parameters attached to the nodes of one shaped [`FeatureGraph`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphModule {
    blocks: BTreeMap<NodeId, Block>,
}

impl GraphModule {
    /// Allocates conv and BN parameters for every ConvBlock and Projection
    /// node, named `{prefix}.n{id}.*`.
    pub fn new(graph: &FeatureGraph, params: &mut ParamStore, prefix: &str, rng: &mut impl rand::Rng) -> Result<Self, TensorError> {
        let mut blocks = BTreeMap::new();
        for node in &graph.nodes {
            let name = format!("{prefix}.n{}", node.id);
            let shape = node.shape.ok_or_else(|| TensorError::ShapeMismatch("graph has no inferred shapes".into()))?;
            let c = shape.channels;
            let block = match node.kind {
                NodeKind::ConvBlock { mode: ConvMode::Full } => Block::Full {
                    conv: params.conv_layer(&format!("{name}.conv"), c, c, 3, 1, 1, false, rng),
                    bn: params.bn_layer(&format!("{name}.bn"), c),
                },
                NodeKind::ConvBlock { mode: ConvMode::DepthwiseSeparable } => Block::Separable {
                    depthwise: params.conv_layer(&format!("{name}.dw"), c, c, 3, 1, c, false, rng),
                    pointwise: params.conv_layer(&format!("{name}.pw"), c, c, 1, 1, 1, false, rng),
                    bn: params.bn_layer(&format!("{name}.bn"), c),
                },
                NodeKind::Projection => {
                    let cin = graph.nodes[node.preds[0]].shape.expect("shaped").channels;
                    Block::Projection {
                        conv: params.conv_layer(&format!("{name}.proj"), cin, c, 1, 1, 1, false, rng),
                        bn: params.bn_layer(&format!("{name}.bn"), c),
                    }
                }
                _ => continue,
            };
            blocks.insert(node.id, block);
        }
        Ok(GraphModule { blocks })
    }

    /// Runs stages `1..=upto_stage` (stage 0 holds inputs and projections).
    /// Returns each executed stage's outputs by level.
    pub fn apply(
        &self,
        graph: &FeatureGraph,
        state: &mut ExecState,
        inputs: &BTreeMap<Level, Var>,
        upto_stage: usize,
    ) -> Result<Vec<BTreeMap<Level, Var>>, TensorError> {
        let upto = upto_stage.min(graph.stack_count);
        let mut vals: Vec<Option<Var>> = vec![None; graph.nodes.len()];
        for node in graph.nodes_through_stage(upto) {
            let pred = |i: usize| vals[node.preds[i]].expect("predecessors run first");
            let v = match node.kind {
                NodeKind::Input { .. } => {
                    let v = *inputs
                        .get(&node.level)
                        .ok_or_else(|| TensorError::ShapeMismatch(format!("missing input {}", node.level)))?;
                    if let Some(s) = node.shape {
                        let t = state.value(v);
                        if t.channels() != s.channels || t.height() != s.side || t.width() != s.side {
                            return Err(TensorError::ShapeMismatch(format!(
                                "input {} is {:?}, graph expects {}x{}x{}",
                                node.level,
                                t.shape(),
                                s.channels,
                                s.side,
                                s.side
                            )));
                        }
                    }
                    v
                }
                NodeKind::Projection => match self.blocks[&node.id] {
                    Block::Projection { conv, bn } => {
                        let y = state.conv(pred(0), &conv)?;
                        state.batch_norm(y, &bn)?
                    }
                    _ => unreachable!(),
                },
                NodeKind::Resample { mode: ResampleMode::NearestUpsample, factor } => state.upsample(pred(0), factor),
                NodeKind::Resample { mode: ResampleMode::MaxPoolDown, factor } => state.max_pool(pred(0), factor)?,
                NodeKind::Merge { op: BinaryOp::Sum } => state.add(&[pred(0), pred(1)])?,
                NodeKind::Merge { op: BinaryOp::GlobalPool } => state.global_pool(pred(0), pred(1))?,
                NodeKind::ConvBlock { .. } => {
                    let r = state.relu(pred(0));
                    match self.blocks[&node.id] {
                        Block::Full { conv, bn } => {
                            let y = state.conv(r, &conv)?;
                            state.batch_norm(y, &bn)?
                        }
                        Block::Separable { depthwise, pointwise, bn } => {
                            let y = state.conv(r, &depthwise)?;
                            let y = state.conv(y, &pointwise)?;
                            state.batch_norm(y, &bn)?
                        }
                        Block::Projection { .. } => unreachable!(),
                    }
                }
                NodeKind::OutputSum => {
                    let preds: Vec<Var> = node.preds.iter().map(|&p| vals[p].expect("ran")).collect();
                    if preds.len() == 1 {
                        preds[0]
                    } else {
                        state.add(&preds)?
                    }
                }
            };
            vals[node.id] = Some(v);
        }
        Ok(graph.stage_outputs[..upto]
            .iter()
            .map(|outs| outs.iter().map(|(&l, &id)| (l, vals[id].expect("ran"))).collect())
            .collect())
    }
}

/// Evaluates the whole graph on concrete tensors and returns the final outputs.
pub fn forward(
    graph: &FeatureGraph,
    module: &GraphModule,
    state: &mut ExecState,
    inputs: &BTreeMap<Level, Tensor4>,
) -> Result<BTreeMap<Level, Tensor4>, TensorError> {
    let vars: BTreeMap<Level, Var> = inputs.iter().map(|(&l, t)| (l, state.leaf(t.clone()))).collect();
    let stages = module.apply(graph, state, &vars, graph.stack_count)?;
    let last = stages.last().expect("at least one stage");
    Ok(last.iter().map(|(&l, &v)| (l, state.value(v).clone())).collect())
}

/// Runs one random-initialised forward pass on a single random example and
/// returns the instrumented `(mac_counter, other_ops)` totals.
pub fn instrumented_counts(graph: &FeatureGraph, seed: u64) -> Result<(u64, u64), TensorError> {
    let mut rng = crate::rng::rng_from(seed);
    let mut params = ParamStore::new();
    let module = GraphModule::new(graph, &mut params, "fpn", &mut rng)?;
    let mut state = ExecState::new(params, super::Mode::Eval);
    let mut inputs = BTreeMap::new();
    for (&l, &id) in &graph.inputs {
        let s = graph.nodes[id].shape.ok_or_else(|| TensorError::ShapeMismatch("graph has no shapes".into()))?;
        inputs.insert(l, Tensor4::randn([1, s.channels, s.side, s.side], 1.0, &mut rng));
    }
    forward(graph, &module, &mut state, &inputs)?;
    Ok((state.mac_counter(), state.other_ops()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_compiler::{compile, stack, PyramidInputSpec};
    use crate::micro_tensor::Mode;
    use crate::rng::rng_from;
    use crate::search_space::{preset, SpaceConfig};

    fn inputs_for(graph: &FeatureGraph, batch: usize, seed: u64) -> BTreeMap<Level, Tensor4> {
        let mut rng = rng_from(seed);
        graph
            .inputs
            .iter()
            .map(|(&l, &id)| {
                let s = graph.nodes[id].shape.unwrap();
                (l, Tensor4::randn([batch, s.channels, s.side, s.side], 1.0, &mut rng))
            })
            .collect()
    }

    fn build(graph: &FeatureGraph, mode: Mode) -> (GraphModule, ExecState) {
        let mut params = ParamStore::new();
        let module = GraphModule::new(graph, &mut params, "fpn", &mut rng_from(9)).unwrap();
        (module, ExecState::new(params, mode))
    }

    #[test]
    fn nasfpn_forward_shapes_and_determinism() {
        let g = preset("nasfpn-7cell").unwrap().with_feature_dim(4).unwrap();
        let graph = compile(&g, &PyramidInputSpec::uniform(&g, 128)).unwrap();
        let x = inputs_for(&graph, 2, 1);
        let (m, mut s1) = build(&graph, Mode::Train);
        let (_, mut s2) = build(&graph, Mode::Train);
        let y1 = forward(&graph, &m, &mut s1, &x).unwrap();
        let y2 = forward(&graph, &m, &mut s2, &x).unwrap();
        assert_eq!(y1, y2);
        for (l, t) in &y1 {
            assert_eq!(t.shape(), [2, 4, 128 >> l.0, 128 >> l.0]);
        }
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let g = preset("nasfpn-7cell").unwrap().with_feature_dim(4).unwrap();
        let graph = compile(&g, &PyramidInputSpec::uniform(&g, 128)).unwrap();
        let mut x = inputs_for(&graph, 1, 1);
        x.insert(Level(3), Tensor4::zeros([1, 4, 8, 8]));
        let (m, mut s) = build(&graph, Mode::Eval);
        assert!(matches!(forward(&graph, &m, &mut s, &x), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn early_exit_runs_fewer_stages() {
        let space = SpaceConfig::nasfpn().with_feature_dim(2).unwrap();
        let g = crate::search_space::sample_random(&space, 4).unwrap();
        let graph = stack(&g, 3, &PyramidInputSpec::uniform(&g, 128)).unwrap();
        let x = inputs_for(&graph, 1, 2);
        let (m, mut s) = build(&graph, Mode::Eval);
        let vars: BTreeMap<Level, Var> = x.iter().map(|(&l, t)| (l, s.leaf(t.clone()))).collect();
        let one = m.apply(&graph, &mut s, &vars, 1).unwrap();
        let macs_one = s.mac_counter();
        s.reset_counters();
        let all = m.apply(&graph, &mut s, &vars, 3).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(all.len(), 3);
        assert_eq!(s.mac_counter(), 3 * macs_one);
        assert_eq!(s.value(one[0][&Level(3)]), s.value(all[0][&Level(3)]));
    }
}
