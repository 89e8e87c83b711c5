//! Bridge finding (Tarjan's low-link), iterative to survive deep graphs.

use super::{Graph, Source};

/// Marks the bridges of an undirected multigraph on vertices `0..n`.
///
/// Parallel edges are never bridges; the DFS skips only the exact edge it
/// arrived by, not every edge to the parent. Neighbours are visited in edge
/// id order so results and traversal are deterministic. Runs in
/// `O(n + edges)`.
pub fn bridges(n: usize, edges: &[(usize, usize)]) -> Vec<bool> {
    let mut adj: Vec<Vec<(usize, usize)>> = vec![vec![]; n];
    for (id, &(a, b)) in edges.iter().enumerate() {
        assert!(a < n && b < n, "edge {id} references a missing vertex");
        adj[a].push((b, id));
        if a != b {
            adj[b].push((a, id));
        }
    }
    let mut is_bridge = vec![false; edges.len()];
    let mut disc = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut clock = 0;
    // Frames: (vertex, edge we came in by, next neighbour index).
    let mut stack: Vec<(usize, usize, usize)> = Vec::new();
    for root in 0..n {
        if disc[root] != usize::MAX {
            continue;
        }
        disc[root] = clock;
        low[root] = clock;
        clock += 1;
        stack.push((root, usize::MAX, 0));
        while let Some(&mut (v, via, ref mut next)) = stack.last_mut() {
            if let Some(&(w, id)) = adj[v].get(*next) {
                *next += 1;
                if id == via {
                    continue;
                }
                if disc[w] == usize::MAX {
                    disc[w] = clock;
                    low[w] = clock;
                    clock += 1;
                    stack.push((w, id, 0));
                } else {
                    low[v] = low[v].min(disc[w]);
                }
            } else {
                stack.pop();
                if let Some(&(p, _, _)) = stack.last() {
                    low[p] = low[p].min(low[v]);
                    if low[v] > disc[p] {
                        is_bridge[via] = true;
                    }
                }
            }
        }
    }
    is_bridge
}

/// Cut flags per node input slot and per graph output.
pub(crate) fn graph_cut_edges(g: &Graph) -> (Vec<Vec<bool>>, Vec<bool>) {
    let n_nodes = g.nodes.len();
    let n_in = g.inputs.len();
    let vertex = |src: Source| match src {
        Source::Node { node, .. } => node,
        Source::Input(i) => n_nodes + i,
    };
    let mut edges = vec![];
    for (node, n) in g.nodes.iter().enumerate() {
        for v in &n.inputs {
            edges.push((vertex(g.values[v.0].src), node));
        }
    }
    for (j, v) in g.outputs.iter().enumerate() {
        edges.push((vertex(g.values[v.0].src), n_nodes + n_in + j));
    }
    let flags = bridges(n_nodes + n_in + g.outputs.len(), &edges);
    let mut it = flags.into_iter();
    let cut = g.nodes.iter().map(|n| n.inputs.iter().map(|_| it.next().unwrap()).collect()).collect();
    let out = it.collect();
    (cut, out)
}
