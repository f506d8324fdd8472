//! Dynamic average consensus protocol.
//!
//! Each node holds a local input `x_i` and an estimate
//! `x̄_i = x_i + ∫ Σ_j a_ij (x̄_j − x̄_i) dt` of the network-wide average.
//! [`ConsensusNodeState::node_step`] advances one node from its neighbors'
//! last-known estimates; [`ConsensusSystem`] integrates the global
//! dynamics `ẋ̄ = ẋ − L x̄` and serves as the verification oracle for the
//! decentralized path.

use crate::graph::{CommGraph, GraphMatrices};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("graph not balanced/connected")]
    NotBalancedConnected,
}

/// Per-node consensus state. The estimate is always
/// `local_input + integrator`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsensusNodeState {
    local_input: f64,
    integrator: f64,
}

impl ConsensusNodeState {
    pub fn new(local_input: f64) -> Self {
        Self { local_input, integrator: 0.0 }
    }

    /// Current estimate `x̄_i = x_i + ∫…`.
    pub fn estimate(&self) -> f64 {
        self.local_input + self.integrator
    }

    pub fn local_input(&self) -> f64 {
        self.local_input
    }

    pub fn integrator(&self) -> f64 {
        self.integrator
    }

    /// Replaces the local signal `x_i` (the integrator is untouched).
    pub fn set_local_input(&mut self, x: f64) {
        self.local_input = x;
    }

    /// Advances the integrator by explicit Euler from the neighbors'
    /// estimates: `integrator += dt · Σ_j a_ij (x̄_j − x̄_i_old)`.
    pub fn node_step(&mut self, neighbor_estimates: &[(f64, f64)], dt: f64) {
        debug_assert!(dt >= 0.0);
        let own = self.estimate();
        let coupling: f64 = neighbor_estimates
            .iter()
            .map(|&(weight, est)| weight * (est - own))
            .sum();
        self.integrator += dt * coupling;
    }
}

/// Global view of the consensus protocol over a fixed graph; the
/// centralized oracle for [`ConsensusNodeState`].
#[derive(Debug, Clone)]
pub struct ConsensusSystem {
    matrices: GraphMatrices,
    estimates: DVector<f64>,
    n: usize,
}

impl ConsensusSystem {
    pub fn new(graph: &CommGraph, initial_inputs: &DVector<f64>) -> Result<Self, ConsensusError> {
        if initial_inputs.len() != graph.n() {
            return Err(ConsensusError::DimensionMismatch {
                expected: graph.n(),
                got: initial_inputs.len(),
            });
        }
        Ok(Self {
            matrices: graph.matrices(),
            estimates: initial_inputs.clone(),
            n: graph.n(),
        })
    }

    pub fn estimates(&self) -> &DVector<f64> {
        &self.estimates
    }

    /// One explicit-Euler step of `ẋ̄ = ẋ − L x̄`.
    pub fn global_step(
        &mut self,
        input_rates: &DVector<f64>,
        dt: f64,
    ) -> Result<(), ConsensusError> {
        if input_rates.len() != self.n {
            return Err(ConsensusError::DimensionMismatch {
                expected: self.n,
                got: input_rates.len(),
            });
        }
        let coupling = &self.matrices.laplacian * &self.estimates;
        self.estimates += (input_rates - coupling) * dt;
        Ok(())
    }
}

/// Steady-state gain of the consensus protocol for a balanced graph with
/// a spanning tree: the averaging matrix `Q`.
///
/// Numerically cross-checks `lim_{s→0} s(sI + L)^{-1} = Q` by evaluating
/// at `s = 1e-6` before returning.
pub fn steady_state_gain(graph: &CommGraph) -> Result<DMatrix<f64>, ConsensusError> {
    if !graph.is_balanced() || !graph.has_spanning_tree() {
        return Err(ConsensusError::NotBalancedConnected);
    }
    let m = graph.matrices();
    let gain = evaluate_transfer_gain(&m.laplacian, 1e-6);
    let err = (&gain - &m.averaging).abs().max();
    debug_assert!(
        err < 1e-4,
        "transfer-function limit deviates from averaging matrix by {err}"
    );
    Ok(m.averaging)
}

/// Evaluates `s (sI + L)^{-1}` at a given real `s` via a linear solve.
pub fn evaluate_transfer_gain(laplacian: &DMatrix<f64>, s: f64) -> DMatrix<f64> {
    let n = laplacian.nrows();
    let lhs = DMatrix::<f64>::identity(n, n) * s + laplacian;
    let inv = lhs
        .lu()
        .solve(&DMatrix::<f64>::identity(n, n))
        .expect("sI + L is nonsingular for s > 0");
    inv * s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CommGraph;
    use approx::assert_relative_eq;

    #[test]
    fn no_neighbors_estimate_tracks_input() {
        let mut node = ConsensusNodeState::new(7.5);
        for _ in 0..1000 {
            node.node_step(&[], 1e-3);
        }
        assert_eq!(node.estimate(), 7.5);
        node.set_local_input(-2.0);
        assert_eq!(node.estimate(), -2.0);
    }

    #[test]
    fn equal_neighbor_estimates_leave_integrator_unchanged() {
        let mut node = ConsensusNodeState::new(3.0);
        node.node_step(&[(1.0, 3.0), (2.0, 3.0)], 0.01);
        assert_eq!(node.integrator(), 0.0);
    }

    #[test]
    fn zero_dt_is_identity() {
        let mut node = ConsensusNodeState::new(1.0);
        node.node_step(&[(1.0, 5.0)], 0.0);
        assert_eq!(node.estimate(), 1.0);
    }

    #[test]
    fn two_nodes_converge_to_half() {
        // Reference integration of the global dynamics at dt=1e-4 bounds
        // the node-level Euler error; both must land on the mean 0.5.
        let g = CommGraph::from_undirected_pairs(2, &[(0, 1)]).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let mut sys = ConsensusSystem::new(&g, &x).unwrap();
        let zero_rate = DVector::zeros(2);
        for _ in 0..200_000 {
            sys.global_step(&zero_rate, 1e-4).unwrap();
        }
        assert_relative_eq!(sys.estimates()[0], 0.5, epsilon = 1e-3);
        assert_relative_eq!(sys.estimates()[1], 0.5, epsilon = 1e-3);

        let mut nodes = [ConsensusNodeState::new(1.0), ConsensusNodeState::new(0.0)];
        for _ in 0..200_000 {
            let snapshot = [nodes[0].estimate(), nodes[1].estimate()];
            nodes[0].node_step(&[(1.0, snapshot[1])], 1e-4);
            nodes[1].node_step(&[(1.0, snapshot[0])], 1e-4);
        }
        assert_relative_eq!(nodes[0].estimate(), 0.5, epsilon = 1e-3);
        assert_relative_eq!(nodes[1].estimate(), 0.5, epsilon = 1e-3);
    }

    #[test]
    fn three_ring_converges_to_mean() {
        let g = CommGraph::bidirectional_ring(3);
        let x = DVector::from_vec(vec![3.0, 0.0, 0.0]);
        let mut sys = ConsensusSystem::new(&g, &x).unwrap();
        let zero_rate = DVector::zeros(3);
        for _ in 0..200_000 {
            sys.global_step(&zero_rate, 1e-4).unwrap();
        }
        for i in 0..3 {
            assert_relative_eq!(sys.estimates()[i], 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn zero_laplacian_keeps_estimates_constant() {
        let g = CommGraph::from_adjacency(DMatrix::zeros(3, 3)).unwrap();
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let mut sys = ConsensusSystem::new(&g, &x).unwrap();
        sys.global_step(&DVector::zeros(3), 0.5).unwrap();
        assert_eq!(sys.estimates(), &x);
    }

    #[test]
    fn global_step_rejects_dimension_mismatch() {
        let g = CommGraph::bidirectional_ring(3);
        let mut sys = ConsensusSystem::new(&g, &DVector::zeros(3)).unwrap();
        let err = sys.global_step(&DVector::zeros(2), 0.1).unwrap_err();
        assert_eq!(err, ConsensusError::DimensionMismatch { expected: 3, got: 2 });
    }

    #[test]
    fn decentralized_matches_centralized_per_step() {
        // With perfectly delivered estimates the node-level protocol must
        // equal the global dynamics to 1e-9 per step.
        let g = CommGraph::bidirectional_ring(5);
        let inputs = [1.0, -2.0, 0.5, 4.0, -1.5];
        let mut nodes: Vec<ConsensusNodeState> =
            inputs.iter().map(|&x| ConsensusNodeState::new(x)).collect();
        let mut sys = ConsensusSystem::new(&g, &DVector::from_row_slice(&inputs)).unwrap();
        let zero_rate = DVector::zeros(5);
        let dt = 1e-3;
        for _ in 0..5000 {
            let snapshot: Vec<f64> = nodes.iter().map(|n| n.estimate()).collect();
            for (i, node) in nodes.iter_mut().enumerate() {
                let neigh: Vec<(f64, f64)> = g
                    .neighbors(i)
                    .into_iter()
                    .map(|(j, w)| (w, snapshot[j]))
                    .collect();
                node.node_step(&neigh, dt);
            }
            sys.global_step(&zero_rate, dt).unwrap();
            for (i, node) in nodes.iter().enumerate() {
                assert!(
                    (node.estimate() - sys.estimates()[i]).abs() < 1e-9,
                    "node {i} diverged from the centralized oracle"
                );
            }
        }
    }

    #[test]
    fn disagreement_norm_decreases_after_transient() {
        let g = CommGraph::bidirectional_ring(10);
        let inputs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mean = 4.5;
        let mut sys = ConsensusSystem::new(&g, &DVector::from_row_slice(&inputs)).unwrap();
        let zero_rate = DVector::zeros(10);
        let dt = 1e-3;
        let disagreement = |s: &ConsensusSystem| -> f64 {
            s.estimates().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>().sqrt()
        };
        let mut prev = disagreement(&sys);
        let mut below_tol_at = None;
        for k in 0..60_000 {
            sys.global_step(&zero_rate, dt).unwrap();
            let d = disagreement(&sys);
            assert!(d <= prev + 1e-12, "disagreement increased at step {k}");
            prev = d;
            let max_err = sys
                .estimates()
                .iter()
                .map(|x| (x - mean).abs())
                .fold(0.0_f64, f64::max);
            if below_tol_at.is_none() && max_err < 1e-3 {
                below_tol_at = Some(k);
            }
        }
        assert!(below_tol_at.is_some(), "never reached the 1e-3 band");
    }

    #[test]
    fn steady_state_gain_two_node() {
        let g = CommGraph::from_undirected_pairs(2, &[(0, 1)]).unwrap();
        let q = steady_state_gain(&g).unwrap();
        assert_eq!(q, DMatrix::from_element(2, 2, 0.5));
    }

    #[test]
    fn steady_state_gain_single_node() {
        let g = CommGraph::from_adjacency(DMatrix::zeros(1, 1)).unwrap();
        let q = steady_state_gain(&g).unwrap();
        assert_eq!(q, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn steady_state_gain_ten_ring_numeric() {
        let g = CommGraph::bidirectional_ring(10);
        let m = g.matrices();
        let gain = evaluate_transfer_gain(&m.laplacian, 1e-6);
        for v in gain.iter() {
            assert_relative_eq!(*v, 0.1, epsilon = 1e-6);
        }
        assert!(steady_state_gain(&g).is_ok());
    }

    #[test]
    fn steady_state_gain_rejects_unbalanced() {
        let g = CommGraph::from_edges(2, &[(0, 1, 1.0)]).unwrap();
        assert_eq!(steady_state_gain(&g), Err(ConsensusError::NotBalancedConnected));
    }
}
