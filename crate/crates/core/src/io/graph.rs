//! JSON graph manifests and floating-point models.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::blob::{read_blob, write_blob, BlobMap, NamedArray};
use crate::error::{Error, Result};
use crate::tensor::{BNParams, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpSpec {
    /// Graph input with per-sample shape (C, H, W) or (features,).
    Input { shape: Vec<usize> },
    Conv2d {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Bn {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        eps: f32,
    },
    Relu,
    Add,
    Flatten,
    Linear {
        weight: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<String>,
    },
}

fn one() -> usize {
    1
}

impl OpSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            OpSpec::Input { .. } => "input",
            OpSpec::Conv2d { .. } => "conv2d",
            OpSpec::Bn { .. } => "bn",
            OpSpec::Relu => "relu",
            OpSpec::Add => "add",
            OpSpec::Flatten => "flatten",
            OpSpec::Linear { .. } => "linear",
        }
    }

    pub fn is_weight_layer(&self) -> bool {
        matches!(self, OpSpec::Conv2d { .. } | OpSpec::Linear { .. })
    }

    fn expected_arity(&self) -> usize {
        match self {
            OpSpec::Input { .. } => 0,
            OpSpec::Add => 2,
            _ => 1,
        }
    }

    /// Names of blobs referenced by this node.
    pub fn blob_refs(&self) -> Vec<&str> {
        match self {
            OpSpec::Conv2d { weight, bias, .. } | OpSpec::Linear { weight, bias } => {
                std::iter::once(weight.as_str()).chain(bias.as_deref()).collect()
            }
            OpSpec::Bn {
                gamma,
                beta,
                mean,
                var,
                ..
            } => vec![gamma, beta, mean, var],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: OpSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    /// Weight file, relative to the manifest.
    pub weights: String,
    pub nodes: Vec<NodeSpec>,
    pub output: String,
}

impl ModelGraph {
    /// Validates structure and returns node indices in topological order
    /// (ties broken by declaration order).
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let mut index = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return Err(Error::Graph(format!("duplicate node id `{}`", n.id)));
            }
        }
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut consumers = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.len() != n.op.expected_arity() {
                return Err(Error::Graph(format!(
                    "node `{}` ({}) takes {} inputs, got {}",
                    n.id,
                    n.op.kind(),
                    n.op.expected_arity(),
                    n.inputs.len()
                )));
            }
            for inp in &n.inputs {
                let &j = index
                    .get(inp.as_str())
                    .ok_or_else(|| Error::Graph(format!("node `{}` reads unknown node `{inp}`", n.id)))?;
                consumers[j].push(i);
                indegree[i] += 1;
            }
        }
        if !index.contains_key(self.output.as_str()) {
            return Err(Error::Graph(format!("output `{}` is not a node", self.output)));
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Graph("graph contains a cycle".into()));
        }
        let inputs = self
            .nodes
            .iter()
            .filter(|n| matches!(n.op, OpSpec::Input { .. }))
            .count();
        if inputs != 1 {
            return Err(Error::Graph(format!("expected exactly one input node, found {inputs}")));
        }
        for n in &self.nodes {
            if let OpSpec::Bn { .. } = n.op {
                let src = &self.nodes[index[n.inputs[0].as_str()]];
                if !src.op.is_weight_layer() {
                    return Err(Error::Graph(format!(
                        "batch norm `{}` must follow a conv2d or linear node, found {}",
                        n.id,
                        src.op.kind()
                    )));
                }
                if consumers[index[src.id.as_str()]].len() != 1 {
                    return Err(Error::Graph(format!(
                        "`{}` feeds batch norm `{}` and other nodes; cannot fold",
                        src.id, n.id
                    )));
                }
            }
        }
        Ok(order)
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }
}

/// A floating-point model: graph plus named weight tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatModel {
    pub graph: ModelGraph,
    pub tensors: BTreeMap<String, Tensor>,
}

impl FloatModel {
    pub fn new(graph: ModelGraph, tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let m = FloatModel { graph, tensors };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.topo_order()?;
        for n in &self.graph.nodes {
            for name in n.op.blob_refs() {
                if !self.tensors.contains_key(name) {
                    return Err(Error::DanglingBlob {
                        name: name.to_string(),
                    });
                }
            }
            self.check_extents(n)?;
        }
        Ok(())
    }

    fn check_extents(&self, n: &NodeSpec) -> Result<()> {
        let bad = |name: &str, detail: String| Error::Extent {
            name: name.to_string(),
            detail,
        };
        match &n.op {
            OpSpec::Conv2d { weight, bias, .. } | OpSpec::Linear { weight, bias } => {
                let w = &self.tensors[weight];
                let rank = if matches!(n.op, OpSpec::Conv2d { .. }) { 4 } else { 2 };
                if w.shape().len() != rank {
                    return Err(bad(weight, format!("expected rank {rank}, got {:?}", w.shape())));
                }
                if let Some(b) = bias {
                    if self.tensors[b].shape() != [w.shape()[0]] {
                        return Err(bad(b, format!("bias {:?} vs weight {:?}", self.tensors[b].shape(), w.shape())));
                    }
                }
            }
            OpSpec::Bn {
                gamma,
                beta,
                mean,
                var,
                ..
            } => {
                let c = self.tensors[gamma].len();
                for name in [beta, mean, var] {
                    if self.tensors[name].len() != c {
                        return Err(bad(name, format!("expected {c} channels")));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn bn_params(&self, node: &NodeSpec) -> Option<BNParams> {
        let OpSpec::Bn {
            gamma,
            beta,
            mean,
            var,
            eps,
        } = &node.op
        else {
            return None;
        };
        Some(BNParams {
            gamma: self.tensors[gamma].data().to_vec(),
            bn_beta: self.tensors[beta].data().to_vec(),
            running_mean: self.tensors[mean].data().to_vec(),
            running_var: self.tensors[var].data().to_vec(),
            epsilon: *eps,
        })
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.graph
            .nodes
            .iter()
            .find_map(|n| match &n.op {
                OpSpec::Input { shape } => Some(shape.clone()),
                _ => None,
            })
            .unwrap_or_default()
    }

    /// Writes the manifest to `graph_path` and weights next to it.
    pub fn save(&self, graph_path: &Path) -> Result<()> {
        let dir = graph_path.parent().unwrap_or(Path::new("."));
        let blobs: BlobMap = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), NamedArray::f32(t)))
            .collect();
        write_blob(&dir.join(&self.graph.weights), &blobs)?;
        std::fs::write(graph_path, serde_json::to_string_pretty(&self.graph)?)?;
        Ok(())
    }
}

/// Loads a manifest and its weights. `weights_path` overrides the file named
/// in the manifest.
pub fn load_model(graph_path: &Path, weights_path: Option<&Path>) -> Result<FloatModel> {
    let graph: ModelGraph = serde_json::from_slice(&std::fs::read(graph_path)?)?;
    let wpath = match weights_path {
        Some(p) => p.to_path_buf(),
        None => graph_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(&graph.weights),
    };
    let blobs = read_blob(&wpath)?;
    let mut tensors = BTreeMap::new();
    for (name, arr) in blobs {
        let t = arr.to_tensor(&name)?;
        tensors.insert(name, t);
    }
    FloatModel::new(graph, tensors)
}
