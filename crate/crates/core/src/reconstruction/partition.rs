use crate::error::{Error, Result};
use crate::network::{FoldedNet, LayerKind};

/// Where a unit's γ vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GammaSource {
    /// The unit's own last batch norm.
    Own,
    /// Borrowed from an earlier unit (index) because this one has no BN.
    Preceding(usize),
    /// No batch norm anywhere before this unit; γ = 1.
    Default,
}

/// One reconstruction unit.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockUnit {
    pub index: usize,
    /// Member layers in topological order.
    pub layers: Vec<usize>,
    pub output: usize,
    /// Non-member layers read by members.
    pub externals: Vec<usize>,
    pub residual: bool,
    pub bn_gamma_last: Vec<f32>,
    pub gamma_source: GammaSource,
}

impl BlockUnit {
    pub fn channel_count(&self) -> usize {
        self.bn_gamma_last.len()
    }

    pub fn weight_layers(&self, net: &FoldedNet) -> Vec<usize> {
        self.layers
            .iter()
            .copied()
            .filter(|&i| net.layers[i].kind.has_weight())
            .collect()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }
}

fn ancestors(net: &FoldedNet) -> Vec<Vec<bool>> {
    let n = net.layers.len();
    let mut anc = vec![vec![false; n]; n];
    for i in 0..n {
        for &j in &net.layers[i].inputs {
            anc[i][j] = true;
            let (lo, hi) = anc.split_at_mut(i);
            for (k, a) in lo[j].iter().enumerate() {
                if *a {
                    hi[0][k] = true;
                }
            }
        }
    }
    anc
}

/// Splits a folded network into reconstruction units.
///
/// Each residual sub-graph (everything between an `add` and the latest common
/// ancestor of its two inputs, plus a trailing ReLU) forms one unit. Every
/// remaining weight layer starts its own unit and takes along the non-weight
/// layers that follow it. The input layer joins the unit of its first
/// consumer.
pub fn partition_blocks(net: &FoldedNet) -> Result<Vec<BlockUnit>> {
    let n = net.layers.len();
    let anc = ancestors(net);
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut groups: Vec<(Vec<bool>, bool)> = Vec::new();

    for a in 0..n {
        if net.layers[a].kind != LayerKind::Add {
            continue;
        }
        let (p, q) = (net.layers[a].inputs[0], net.layers[a].inputs[1]);
        let closure = |x: usize| {
            let mut s = anc[x].clone();
            s[x] = true;
            s
        };
        let (cp, cq) = (closure(p), closure(q));
        let Some(fork) = (0..n).rev().find(|&k| cp[k] && cq[k]) else {
            return Err(Error::Graph(format!(
                "add `{}` joins branches with no common ancestor",
                net.layers[a].id
            )));
        };
        let fork_set = closure(fork);
        let mut members: Vec<bool> = (0..n).map(|k| (cp[k] || cq[k]) && !fork_set[k]).collect();
        members[a] = true;
        if let [c] = net.consumers[a][..] {
            if net.layers[c].kind == LayerKind::Relu {
                members[c] = true;
            }
        }
        // Overlapping blocks merge into one unit.
        let hit: Vec<usize> = (0..n).filter(|&k| members[k]).filter_map(|k| owner[k]).collect();
        let gi = match hit.first() {
            Some(&g) => g,
            None => {
                groups.push((vec![false; n], true));
                groups.len() - 1
            }
        };
        for k in 0..n {
            if members[k] {
                if let Some(o) = owner[k] {
                    if o != gi {
                        for kk in 0..n {
                            if owner[kk] == Some(o) {
                                owner[kk] = Some(gi);
                                groups[gi].0[kk] = true;
                            }
                        }
                    }
                }
                owner[k] = Some(gi);
                groups[gi].0[k] = true;
            }
        }
    }

    let input = net.input_layer();
    for i in 0..n {
        if owner[i].is_some() || i == input {
            continue;
        }
        let l = &net.layers[i];
        if l.kind.has_weight() {
            groups.push((vec![false; n], false));
            owner[i] = Some(groups.len() - 1);
        } else {
            match owner[l.inputs[0]] {
                Some(g) => owner[i] = Some(g),
                None => {
                    return Err(Error::Graph(format!(
                        "layer `{}` precedes every weight layer",
                        l.id
                    )))
                }
            }
        }
    }
    let first_consumer = net.consumers[input]
        .iter()
        .copied()
        .min()
        .ok_or_else(|| Error::Graph("input is never consumed".into()))?;
    owner[input] = owner[first_consumer];

    // Order units by their first member.
    let mut firsts: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        let g = owner[i].expect("every layer assigned");
        if !firsts.iter().any(|&(_, gg)| gg == g) {
            firsts.push((i, g));
        }
    }
    let mut units = Vec::with_capacity(firsts.len());
    for (ui, &(_, g)) in firsts.iter().enumerate() {
        let layers: Vec<usize> = (0..n).filter(|&k| owner[k] == Some(g)).collect();
        let output = *layers.last().unwrap();
        let mut externals = Vec::new();
        for &k in &layers {
            for &j in &net.layers[k].inputs {
                if owner[j] != Some(g) && !externals.contains(&j) {
                    externals.push(j);
                }
            }
            if k != output && net.consumers[k].iter().any(|&c| owner[c] != Some(g)) {
                return Err(Error::Graph(format!(
                    "layer `{}` is read outside its unit but is not the unit output",
                    net.layers[k].id
                )));
            }
        }
        externals.sort();
        units.push(BlockUnit {
            index: ui,
            layers,
            output,
            externals,
            residual: groups[g].1,
            bn_gamma_last: Vec::new(),
            gamma_source: GammaSource::Own,
        });
    }
    let unit_of_group = |g: usize| firsts.iter().position(|&(_, gg)| gg == g).unwrap();
    for u in 0..units.len() {
        if units[u].externals.iter().any(|&e| unit_of_group(owner[e].unwrap()) >= u) {
            return Err(Error::Graph(format!("unit {u} reads a later unit")));
        }
        assign_gamma(net, &mut units, u);
    }
    Ok(units)
}

fn assign_gamma(net: &FoldedNet, units: &mut [BlockUnit], u: usize) {
    let own = units[u]
        .layers
        .iter()
        .rev()
        .find_map(|&k| net.layers[k].bn_gamma.clone());
    let (gamma, source) = match own {
        Some(g) => (g, GammaSource::Own),
        None => match (0..u).rev().find(|&p| units[p].gamma_source == GammaSource::Own) {
            Some(p) => (units[p].bn_gamma_last.clone(), GammaSource::Preceding(p)),
            None => (vec![1.0], GammaSource::Default),
        },
    };
    units[u].bn_gamma_last = gamma;
    units[u].gamma_source = source;
}
