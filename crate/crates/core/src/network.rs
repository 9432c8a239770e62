//! Switching network topologies and the diffusion dynamics they induce.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Undirected graphs over a fixed node set, one edge set per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkTopology {
    num_nodes: usize,
    edges_per_mode: Vec<Vec<(usize, usize)>>,
    coupling_gain: f64,
}

/// Output of [`NetworkTopology::dynamics`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDynamics {
    pub a: DMatrix<f64>,
    /// Set when `eps >= 1 / max_degree`; the open loop may then be unstable.
    pub gain_warning: bool,
}

impl NetworkTopology {
    pub fn new(
        num_nodes: usize,
        edges_per_mode: Vec<Vec<(usize, usize)>>,
        coupling_gain: f64,
    ) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidArgument("network needs at least one node".into()));
        }
        if !(coupling_gain > 0.0 && coupling_gain.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "coupling gain must be positive, got {coupling_gain}"
            )));
        }
        let mut normalized = Vec::with_capacity(edges_per_mode.len());
        for (m, edges) in edges_per_mode.into_iter().enumerate() {
            let mut set = BTreeSet::new();
            for (a, b) in edges {
                if a >= num_nodes || b >= num_nodes {
                    return Err(Error::InvalidArgument(format!(
                        "mode {m}: edge ({a}, {b}) references a node outside 0..{num_nodes}"
                    )));
                }
                if a == b {
                    return Err(Error::InvalidArgument(format!("mode {m}: self-loop at node {a}")));
                }
                set.insert((a.min(b), a.max(b)));
            }
            normalized.push(set.into_iter().collect());
        }
        if normalized.is_empty() {
            return Err(Error::InvalidArgument("at least one topology is required".into()));
        }
        Ok(Self {
            num_nodes,
            edges_per_mode: normalized,
            coupling_gain,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_modes(&self) -> usize {
        self.edges_per_mode.len()
    }

    pub fn coupling_gain(&self) -> f64 {
        self.coupling_gain
    }

    pub fn edges(&self, mode: usize) -> &[(usize, usize)] {
        &self.edges_per_mode[mode]
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.num_modes() {
            return Err(Error::InvalidArgument(format!(
                "mode {mode} out of range for {} topologies",
                self.num_modes()
            )));
        }
        Ok(())
    }

    fn adjacency(&self, mode: usize) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(a, b) in &self.edges_per_mode[mode] {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    pub fn laplacian(&self, mode: usize) -> Result<DMatrix<f64>> {
        self.check_mode(mode)?;
        let n = self.num_nodes;
        let mut l = DMatrix::zeros(n, n);
        for &(a, b) in &self.edges_per_mode[mode] {
            l[(a, a)] += 1.0;
            l[(b, b)] += 1.0;
            l[(a, b)] -= 1.0;
            l[(b, a)] -= 1.0;
        }
        Ok(l)
    }

    pub fn max_degree(&self, mode: usize) -> usize {
        self.adjacency(mode).iter().map(Vec::len).max().unwrap_or(0)
    }

    /// `A(m) = I - eps * L(m)`: a consensus/diffusion step on graph `m`.
    pub fn dynamics(&self, mode: usize) -> Result<DiffusionDynamics> {
        let l = self.laplacian(mode)?;
        let n = self.num_nodes;
        let a = DMatrix::identity(n, n) - l * self.coupling_gain;
        let dmax = self.max_degree(mode);
        let gain_warning = dmax > 0 && self.coupling_gain >= 1.0 / dmax as f64;
        if gain_warning {
            log::warn!(
                "mode {mode}: coupling gain {} >= 1/max_degree ({dmax}); open loop may be unstable",
                self.coupling_gain
            );
        }
        Ok(DiffusionDynamics { a, gain_warning })
    }

    /// Nodes within `hops` edges of `node` in topology `mode` (always contains `node`).
    pub fn hop_neighborhood(&self, mode: usize, node: usize, hops: usize) -> Result<BTreeSet<usize>> {
        self.check_mode(mode)?;
        if node >= self.num_nodes {
            return Err(Error::InvalidArgument(format!("node {node} out of range")));
        }
        Ok(bfs_within(&self.adjacency(mode), node, hops))
    }

    /// Neighborhood over the union of all topologies' edges.
    pub fn union_hop_neighborhood(&self, node: usize, hops: usize) -> Result<BTreeSet<usize>> {
        if node >= self.num_nodes {
            return Err(Error::InvalidArgument(format!("node {node} out of range")));
        }
        let mut adj = vec![Vec::new(); self.num_nodes];
        for m in 0..self.num_modes() {
            for (i, nbrs) in self.adjacency(m).into_iter().enumerate() {
                adj[i].extend(nbrs);
            }
        }
        Ok(bfs_within(&adj, node, hops))
    }
}

fn bfs_within(adj: &[Vec<usize>], start: usize, hops: usize) -> BTreeSet<usize> {
    let mut dist = vec![usize::MAX; adj.len()];
    dist[start] = 0;
    let mut queue = VecDeque::from([start]);
    while let Some(i) = queue.pop_front() {
        if dist[i] == hops {
            continue;
        }
        for &j in &adj[i] {
            if dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                queue.push_back(j);
            }
        }
    }
    (0..adj.len()).filter(|&i| dist[i] <= hops).collect()
}

/// Input matrix actuating the listed nodes (one input channel per entry).
pub fn actuation_matrix(num_nodes: usize, actuated: &[usize]) -> Result<DMatrix<f64>> {
    let mut b = DMatrix::zeros(num_nodes, actuated.len());
    for (k, &node) in actuated.iter().enumerate() {
        if node >= num_nodes {
            return Err(Error::InvalidArgument(format!("actuated node {node} out of range")));
        }
        b[(node, k)] = 1.0;
    }
    Ok(b)
}
