//! Element adjacency graphs, n-neighbourhoods and bandwidth-reducing
//! reordering.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Undirected graph over elements. Neighbour lists are sorted and exclude
/// the vertex itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    order: usize,
    adj: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    /// Graph from an explicit edge list; duplicate edges and self loops are
    /// dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut sets = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a != b {
                sets[a].insert(b);
                sets[b].insert(a);
            }
        }
        AdjacencyGraph { order: 1, adj: sets.into_iter().map(|s| s.into_iter().collect()).collect() }
    }

    pub fn num_vertices(&self) -> usize {
        self.adj.len()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn neighbours(&self, v: usize) -> &[usize] {
        &self.adj[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.adj[v].len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adj[a].binary_search(&b).is_ok()
    }

    /// Each undirected edge once, as `(low, high)`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, ns) in self.adj.iter().enumerate() {
            for &b in ns {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Bandwidth `max |pos[a] - pos[b]|` over edges where `pos` maps a vertex
    /// to its new index.
    pub fn bandwidth_under(&self, pos: &[usize]) -> usize {
        self.edges().iter().map(|&(a, b)| pos[a].abs_diff(pos[b])).max().unwrap_or(0)
    }

    pub fn bandwidth(&self) -> usize {
        let id: Vec<usize> = (0..self.num_vertices()).collect();
        self.bandwidth_under(&id)
    }

    /// The `order`-th power: vertices within `order` hops become adjacent.
    pub fn power(&self, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::ZeroOrder);
        }
        let n = self.num_vertices();
        let mut adj = Vec::with_capacity(n);
        let mut dist = vec![usize::MAX; n];
        for s in 0..n {
            let mut seen = vec![s];
            dist[s] = 0;
            let mut queue = VecDeque::from([s]);
            while let Some(v) = queue.pop_front() {
                if dist[v] == order {
                    continue;
                }
                for &w in &self.adj[v] {
                    if dist[w] == usize::MAX {
                        dist[w] = dist[v] + 1;
                        seen.push(w);
                        queue.push_back(w);
                    }
                }
            }
            let mut ns: Vec<usize> = seen.iter().copied().filter(|&v| v != s).collect();
            ns.sort_unstable();
            for v in seen {
                dist[v] = usize::MAX;
            }
            adj.push(ns);
        }
        Ok(AdjacencyGraph { order: self.order * order, adj })
    }
}

/// Order-`order` element adjacency: order 1 joins elements that share a node.
pub fn build_adjacency(mesh: &Mesh, order: usize) -> Result<AdjacencyGraph> {
    if order == 0 {
        return Err(Error::ZeroOrder);
    }
    let mut by_node = vec![Vec::new(); mesh.num_nodes()];
    for (e, el) in mesh.elements().iter().enumerate() {
        for &n in &el.nodes {
            by_node[n].push(e);
        }
    }
    let mut sets = vec![BTreeSet::new(); mesh.num_elements()];
    for elems in &by_node {
        for &a in elems {
            for &b in elems {
                if a != b {
                    sets[a].insert(b);
                }
            }
        }
    }
    let base = AdjacencyGraph { order: 1, adj: sets.into_iter().map(|s| s.into_iter().collect()).collect() };
    if order == 1 {
        Ok(base)
    } else {
        base.power(order)
    }
}

/// A vertex ordering and the bandwidth it achieves.
///
/// `permutation[p]` is the original element placed at position `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandProfile {
    pub permutation: Vec<usize>,
    pub bandwidth: usize,
}

impl BandProfile {
    pub fn identity(graph: &AdjacencyGraph) -> Self {
        BandProfile { permutation: (0..graph.num_vertices()).collect(), bandwidth: graph.bandwidth() }
    }

    pub fn n(&self) -> usize {
        self.permutation.len()
    }

    /// Inverse permutation: `positions()[e]` is the new index of element `e`.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.permutation.len()];
        for (p, &e) in self.permutation.iter().enumerate() {
            pos[e] = p;
        }
        pos
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("profile serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: BandProfile = serde_json::from_str(s)?;
        let mut seen = vec![false; p.permutation.len()];
        for &e in &p.permutation {
            if e >= seen.len() || std::mem::replace(&mut seen[e], true) {
                return Err(Error::Config("band profile permutation is not a bijection".into()));
            }
        }
        Ok(p)
    }
}

/// Reverse Cuthill-McKee ordering.
///
/// Each connected component starts from its minimum-degree vertex (lowest
/// index on ties) and visits neighbours by ascending degree then index.
/// Components are laid out in order of their smallest vertex. Small graphs
/// get a local pairwise-swap pass afterwards; the result is never worse than
/// the identity ordering.
pub fn reverse_cuthill_mckee(graph: &AdjacencyGraph) -> BandProfile {
    let n = graph.num_vertices();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for root in 0..n {
        if visited[root] {
            continue;
        }
        // collect the component so the start vertex can be chosen within it
        let mut comp = vec![root];
        visited[root] = true;
        let mut i = 0;
        while i < comp.len() {
            for &w in graph.neighbours(comp[i]) {
                if !visited[w] {
                    visited[w] = true;
                    comp.push(w);
                }
            }
            i += 1;
        }
        let start = *comp.iter().min_by_key(|&&v| (graph.degree(v), v)).unwrap();
        let mut local = Vec::with_capacity(comp.len());
        let mut placed = vec![false; n];
        placed[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            local.push(v);
            let mut ns: Vec<usize> = graph.neighbours(v).iter().copied().filter(|&w| !placed[w]).collect();
            ns.sort_by_key(|&w| (graph.degree(w), w));
            for w in ns {
                placed[w] = true;
                queue.push_back(w);
            }
        }
        local.reverse();
        order.extend(local);
    }

    let mut pos = vec![0; n];
    for (p, &v) in order.iter().enumerate() {
        pos[v] = p;
    }
    if n <= 64 {
        refine_by_swaps(graph, &mut pos);
    }
    let bw = graph.bandwidth_under(&pos);
    let identity = graph.bandwidth();
    if bw > identity {
        return BandProfile::identity(graph);
    }
    let mut permutation = vec![0; n];
    for (v, &p) in pos.iter().enumerate() {
        permutation[p] = v;
    }
    BandProfile { permutation, bandwidth: bw }
}

/// Greedy descent on (bandwidth, number of edges attaining it) by swapping
/// pairs of positions.
fn refine_by_swaps(graph: &AdjacencyGraph, pos: &mut [usize]) {
    let n = pos.len();
    let score = |pos: &[usize]| {
        let mut bw = 0;
        let mut count = 0;
        for (a, b) in graph.edges() {
            let d = pos[a].abs_diff(pos[b]);
            if d > bw {
                bw = d;
                count = 1;
            } else if d == bw {
                count += 1;
            }
        }
        (bw, count)
    };
    let mut best = score(pos);
    loop {
        let mut improved = false;
        for a in 0..n {
            for b in a + 1..n {
                pos.swap(a, b);
                let s = score(pos);
                if s < best {
                    best = s;
                    improved = true;
                } else {
                    pos.swap(a, b);
                }
            }
        }
        if !improved || best.0 <= 1 {
            break;
        }
    }
}

/// Lower-band sparsity mask of half-bandwidth `b` for an `n × n` factor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandMask {
    pub n: usize,
    pub bandwidth: usize,
}

impl BandMask {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        j <= i && i - j <= self.bandwidth
    }

    /// Number of free entries, `n(b+1) - b(b+1)/2`.
    pub fn count(&self) -> usize {
        let b = self.bandwidth;
        self.n * (b + 1) - b * (b + 1) / 2
    }

    /// Entries in row-major order over the lower triangle.
    pub fn entries(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.count());
        for i in 0..self.n {
            for j in i.saturating_sub(self.bandwidth)..=i {
                out.push((i, j));
            }
        }
        out
    }
}

pub fn sparsity_pattern(profile: &BandProfile) -> BandMask {
    let n = profile.n();
    BandMask { n, bandwidth: profile.bandwidth.min(n.saturating_sub(1)) }
}
