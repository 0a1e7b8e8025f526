//! Bipartite user-item graph with symmetric degree normalization and
//! LightGCN-style embedding propagation on the ID branch.
//!
//! Node layout: users occupy rows `0..n_users`, items occupy rows
//! `n_users..n_users + n_items` of the stacked embedding matrix.

use std::collections::BTreeSet;

use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Clone, Debug)]
pub struct Graph {
    pub n_users: usize,
    pub n_items: usize,
    /// CSR adjacency over all nodes: neighbor node id + normalization
    /// coefficient 1/sqrt(deg_v * deg_u).
    offsets: Vec<usize>,
    neighbors: Vec<(usize, f64)>,
}

impl Graph {
    /// Build the normalized adjacency from a deduplicated edge list.
    pub fn build(n_users: usize, n_items: usize, edges: &[(usize, usize)]) -> Graph {
        let n = n_users + n_items;
        let edge_set: BTreeSet<(usize, usize)> = edges.iter().copied().collect();
        let mut degree = vec![0usize; n];
        for &(u, i) in &edge_set {
            degree[u] += 1;
            degree[n_users + i] += 1;
        }
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(u, i) in &edge_set {
            let v = n_users + i;
            let coef = 1.0 / ((degree[u] * degree[v]) as f64).sqrt();
            adj[u].push((v, coef));
            adj[v].push((u, coef));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut list in adj {
            list.sort_by_key(|&(v, _)| v);
            neighbors.extend_from_slice(&list);
            offsets.push(neighbors.len());
        }
        Graph {
            n_users,
            n_items,
            offsets,
            neighbors,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_users + self.n_items
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn neighbors(&self, node: usize) -> &[(usize, f64)] {
        &self.neighbors[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn has_edge(&self, user: usize, item: usize) -> bool {
        let v = self.n_users + item;
        self.neighbors(user).iter().any(|&(w, _)| w == v)
    }

    /// One round of normalized neighborhood averaging. Isolated nodes keep
    /// their embedding, so an empty graph propagates as the identity.
    fn step<F: Real>(&self, x: &Matrix<F>) -> Matrix<F> {
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for v in 0..self.n_nodes() {
            if self.degree(v) == 0 {
                out.row_mut(v).copy_from_slice(x.row(v));
                continue;
            }
            for &(w, coef) in self.neighbors(v) {
                let c = F::from_f64_c(coef);
                let src = x.row(w).to_vec();
                for (o, s) in out.row_mut(v).iter_mut().zip(&src) {
                    *o += c * *s;
                }
            }
        }
        out
    }

    /// Mean over layers 0..=depth of repeated normalized averaging. The
    /// operator is symmetric, so the same routine backpropagates gradients.
    pub fn propagate<F: Real>(&self, x: &Matrix<F>, depth: usize) -> Matrix<F> {
        // An edgeless graph is the exact identity, not a layer mean of
        // copies (which would perturb low bits).
        if depth == 0 || self.neighbors.is_empty() {
            return x.clone();
        }
        let mut acc = x.clone();
        let mut cur = x.clone();
        for _ in 0..depth {
            cur = self.step(&cur);
            for (a, c) in acc.data_mut().iter_mut().zip(cur.data()) {
                *a += *c;
            }
        }
        let inv = F::from_f64_c(1.0 / (depth + 1) as f64);
        for a in acc.data_mut() {
            *a *= inv;
        }
        acc
    }

    /// Nodes reachable from `seed` within `depth` hops (including `seed`):
    /// the support of the propagated gradient.
    pub fn expand_support(&self, seed: &BTreeSet<usize>, depth: usize) -> BTreeSet<usize> {
        let mut support = seed.clone();
        let mut frontier: Vec<usize> = seed.iter().copied().collect();
        for _ in 0..depth {
            let mut next = Vec::new();
            for &v in &frontier {
                for &(w, _) in self.neighbors(v) {
                    if support.insert(w) {
                        next.push(w);
                    }
                }
            }
            frontier = next;
        }
        support
    }
}
