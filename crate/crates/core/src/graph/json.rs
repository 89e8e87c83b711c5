//! JSON description of a graph, with cut-edge annotations.
//!
//! Value ids number the inputs first, then every node output in node order.

use super::{Graph, GraphBuilder, GraphError, InputSpec, NodeOp, ScaleFactors, Value};
use serde::{Deserialize, Serialize};

pub type InputDesc = InputSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDesc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub op: NodeOp,
    pub inputs: Vec<usize>,
    #[serde(default = "one")]
    pub alpha: f64,
    /// Defaults to all ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub pinned: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constrained_inputs: Vec<usize>,
    /// Written on export; checked against the recomputed bridges on import.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cut_inputs: Option<Vec<bool>>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDesc {
    pub inputs: Vec<InputDesc>,
    pub nodes: Vec<NodeDesc>,
    pub outputs: Vec<usize>,
}

impl Graph {
    pub fn to_desc(&self) -> GraphDesc {
        // Internal value index → description id.
        let mut ids = vec![0usize; self.values.len()];
        for (i, v) in self.input_values.iter().enumerate() {
            ids[v.0] = i;
        }
        let mut next = self.inputs.len();
        for outs in &self.node_outputs {
            for v in outs {
                ids[v.0] = next;
                next += 1;
            }
        }
        let nodes = self
            .nodes
            .iter()
            .enumerate()
            .map(|(n, node)| NodeDesc {
                name: node.name.clone(),
                op: node.op.clone(),
                inputs: node.inputs.iter().map(|v| ids[v.0]).collect(),
                alpha: node.factors.alpha,
                betas: Some(node.factors.betas.clone()),
                pinned: node.pinned,
                constrained_inputs: (0..node.inputs.len()).filter(|&s| node.forced[s]).collect(),
                cut_inputs: Some(self.cut[n].clone()),
            })
            .collect();
        GraphDesc { inputs: self.inputs.clone(), nodes, outputs: self.outputs.iter().map(|v| ids[v.0]).collect() }
    }

    pub fn from_desc(desc: &GraphDesc) -> Result<Graph, GraphError> {
        let mut b = GraphBuilder::new();
        let mut ids: Vec<Value> = desc.inputs.iter().map(|i| b.add_input(&i.name, &i.shape, i.kind)).collect();
        let total: usize = desc.inputs.len() + desc.nodes.iter().map(|n| n.op.outputs()).sum::<usize>();
        for (k, nd) in desc.nodes.iter().enumerate() {
            let ins = nd
                .inputs
                .iter()
                .map(|&id| match ids.get(id) {
                    Some(v) => Ok(*v),
                    None if id < total => Err(GraphError::ForwardReference(id)),
                    None => Err(GraphError::UnknownValue(id)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let betas = nd.betas.clone().unwrap_or_else(|| vec![1.0; ins.len()]);
            let outs = b.apply_multi(nd.op.clone(), &ins, Some(ScaleFactors::new(nd.alpha, betas)))?;
            let node = b.last_node().expect("just added");
            debug_assert_eq!(node, k);
            if let Some(name) = &nd.name {
                b.set_name(node, name)?;
            }
            if nd.pinned {
                b.pin(node)?;
            }
            for &s in &nd.constrained_inputs {
                b.constrain_input(node, s)?;
            }
            ids.extend(outs);
        }
        for &o in &desc.outputs {
            b.mark_output(*ids.get(o).ok_or(GraphError::UnknownValue(o))?)?;
        }
        let g = b.freeze();
        let annotated = desc.nodes.iter().any(|n| n.cut_inputs.is_some());
        if annotated {
            if g.nodes.len() != desc.nodes.len() {
                return Err(GraphError::Description(
                    "cut_inputs annotations need explicit copy nodes for every fan-out".into(),
                ));
            }
            for (n, nd) in desc.nodes.iter().enumerate() {
                if let Some(cut) = &nd.cut_inputs {
                    if cut != &g.cut[n] {
                        return Err(GraphError::Description(format!(
                            "node {n}: cut_inputs {cut:?} disagree with computed {:?}",
                            g.cut[n]
                        )));
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_desc()).expect("graph description serialises")
    }

    pub fn from_json(s: &str) -> Result<Graph, GraphError> {
        let desc: GraphDesc = serde_json::from_str(s).map_err(|e| GraphError::Description(e.to_string()))?;
        Graph::from_desc(&desc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::InputKind;

    fn residual() -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.add_input("x", &[4, 3], InputKind::Data);
        let w = b.add_input("w", &[3, 3], InputKind::Parameter);
        let h = b.apply_op(NodeOp::MatMul, &[x, w], Some(ScaleFactors::new(0.5, vec![0.5, 2.0]))).unwrap();
        let y = b.apply_op(NodeOp::Add, &[x, h], None).unwrap();
        b.mark_output(y).unwrap();
        b.freeze()
    }

    #[test]
    fn round_trip() {
        let g = residual();
        let back = Graph::from_json(&g.to_json()).unwrap();
        assert_eq!(back.to_desc(), g.to_desc());
        assert_eq!(back.find_cut_edges(), g.find_cut_edges());
    }

    #[test]
    fn tampered_cut_annotation_rejected() {
        let mut d = residual().to_desc();
        let c = d.nodes[1].cut_inputs.as_mut().unwrap();
        c[0] = !c[0];
        assert!(matches!(Graph::from_desc(&d), Err(GraphError::Description(_))));
    }

    #[test]
    fn bad_references() {
        let mut d = residual().to_desc();
        d.nodes[1].inputs[0] = 99;
        assert!(matches!(Graph::from_desc(&d), Err(GraphError::UnknownValue(99))));
        let mut d = residual().to_desc();
        d.nodes[1].inputs[1] = 5;
        assert!(matches!(Graph::from_desc(&d), Err(GraphError::ForwardReference(5))));
        assert!(Graph::from_json("{not json").is_err());
        assert!(Graph::from_json(r#"{"inputs":[],"nodes":[],"outputs":[],"extra":1}"#).is_err());
    }
}
