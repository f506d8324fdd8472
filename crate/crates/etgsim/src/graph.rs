//! Communication graph between the ES controllers and the spectral
//! objects derived from it (degree, Laplacian, averaging matrix).
//!
//! Convention: `adjacency[(i, j)] = a_ij > 0` iff a link carries
//! information from node `j` to node `i`, so row `i` lists the weights of
//! the signals node `i` receives.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("adjacency matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("adjacency entry ({i},{j}) is negative: {value}")]
    NegativeWeight { i: usize, j: usize, value: f64 },
    #[error("self-loop at node {0} (diagonal must be zero)")]
    SelfLoop(usize),
    #[error("node index {index} out of range for {n} nodes")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("edge references node {index} but the graph has {n} nodes")]
    EdgeOutOfRange { index: usize, n: usize },
    #[error("graph is not balanced or has no spanning tree")]
    NotBalancedConnected,
}

/// Sparse communication topology among the ES controllers, stored dense.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    n: usize,
    adjacency: DMatrix<f64>,
}

/// Degree, Laplacian and averaging matrices of a [`CommGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMatrices {
    pub degree: DMatrix<f64>,
    pub laplacian: DMatrix<f64>,
    /// `[Q]_ij = 1/n`, the steady-state gain of the consensus protocol.
    pub averaging: DMatrix<f64>,
}

impl CommGraph {
    /// Validates and wraps an adjacency matrix (non-negative, zero diagonal).
    pub fn from_adjacency(adjacency: DMatrix<f64>) -> Result<Self, GraphError> {
        if adjacency.nrows() != adjacency.ncols() {
            return Err(GraphError::NotSquare {
                rows: adjacency.nrows(),
                cols: adjacency.ncols(),
            });
        }
        let n = adjacency.nrows();
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(GraphError::SelfLoop(i));
            }
            for j in 0..n {
                let v = adjacency[(i, j)];
                if !(v >= 0.0) {
                    return Err(GraphError::NegativeWeight { i, j, value: v });
                }
            }
        }
        Ok(Self { n, adjacency })
    }

    /// Builds a graph from directed edges `(from, to, weight)`; information
    /// flows from `from` to `to`, i.e. `a[to][from] = weight`.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        let mut adj = DMatrix::<f64>::zeros(n, n);
        for &(from, to, w) in edges {
            if from >= n {
                return Err(GraphError::EdgeOutOfRange { index: from, n });
            }
            if to >= n {
                return Err(GraphError::EdgeOutOfRange { index: to, n });
            }
            adj[(to, from)] += w;
        }
        Self::from_adjacency(adj)
    }

    /// Builds a graph from undirected unit-weight edges (each pair becomes
    /// a bidirectional link), the form used by the case-study config.
    pub fn from_undirected_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut edges = Vec::with_capacity(pairs.len() * 2);
        for &(a, b) in pairs {
            edges.push((a, b, 1.0));
            edges.push((b, a, 1.0));
        }
        Self::from_edges(n, &edges)
    }

    /// Bidirectional unit-weight ring 0-1-…-(n-1)-0.
    pub fn bidirectional_ring(n: usize) -> Self {
        let mut adj = DMatrix::<f64>::zeros(n, n);
        if n > 1 {
            for i in 0..n {
                let next = (i + 1) % n;
                adj[(i, next)] = 1.0;
                adj[(next, i)] = 1.0;
            }
        }
        Self { n, adjacency: adj }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// Weighted neighbors of node `i`: `(j, a_ij)` for every `a_ij > 0`.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        (0..self.n)
            .filter(|&j| self.adjacency[(i, j)] > 0.0)
            .map(|j| (j, self.adjacency[(i, j)]))
            .collect()
    }

    /// In-degree `d_i = Σ_j a_ij`.
    pub fn in_degree(&self, i: usize) -> Result<f64, GraphError> {
        if i >= self.n {
            return Err(GraphError::IndexOutOfRange { index: i, n: self.n });
        }
        Ok((0..self.n).map(|j| self.adjacency[(i, j)]).sum())
    }

    /// Out-degree `d_i^o = Σ_j a_ji`.
    pub fn out_degree(&self, i: usize) -> Result<f64, GraphError> {
        if i >= self.n {
            return Err(GraphError::IndexOutOfRange { index: i, n: self.n });
        }
        Ok((0..self.n).map(|j| self.adjacency[(j, i)]).sum())
    }

    /// Degree matrix `D`, Laplacian `L = D − A` and averaging matrix `Q`.
    pub fn matrices(&self) -> GraphMatrices {
        let n = self.n;
        let mut degree = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            degree[(i, i)] = self.in_degree(i).expect("index in range");
        }
        let laplacian = &degree - &self.adjacency;
        let averaging = DMatrix::from_element(n, n, 1.0 / n as f64);
        GraphMatrices { degree, laplacian, averaging }
    }

    /// True iff in-degree equals out-degree at every node.
    pub fn is_balanced(&self) -> bool {
        (0..self.n).all(|i| {
            let din = self.in_degree(i).expect("index in range");
            let dout = self.out_degree(i).expect("index in range");
            (din - dout).abs() <= 1e-12 * din.abs().max(dout.abs()).max(1.0)
        })
    }

    /// True iff some root reaches every node along information-flow edges
    /// (a directed spanning tree exists).
    pub fn has_spanning_tree(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        (0..self.n).any(|root| self.reach_count(root) == self.n)
    }

    fn reach_count(&self, root: usize) -> usize {
        let mut seen = vec![false; self.n];
        let mut stack = vec![root];
        seen[root] = true;
        let mut count = 1;
        while let Some(j) = stack.pop() {
            // Successors of j: nodes i with a_ij > 0 (link j→i).
            for i in 0..self.n {
                if !seen[i] && self.adjacency[(i, j)] > 0.0 {
                    seen[i] = true;
                    count += 1;
                    stack.push(i);
                }
            }
        }
        count
    }
}
