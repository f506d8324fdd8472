//! Deterministic simulator for a DC microgrid under distributed
//! event-triggered control.
//!
//! Each energy-storage bus runs a droop-based secondary controller, a
//! dynamic average-consensus estimator and a send-on-delta Kalman filter,
//! and exchanges data exclusively through an in-process topic-based
//! publish/subscribe broker with retained-message semantics.
//!
//! The crate is organised around the moving parts of that loop:
//!
//! * [`graph`] — communication topology, Laplacian and averaging matrices
//! * [`consensus`] — dynamic average consensus protocol
//! * [`sod_kalman`] — send-on-delta sampling and the modified Kalman filter
//! * [`controller`] — droop / PI secondary controller per bus
//! * [`plant`] — converters, admittance network, batteries, injections
//! * [`pubsub`] — broker with retained messages, delay injection, accounting
//! * [`scenario`] — configuration, presets and the simulation orchestrator
//! * [`report`] — metrics, steady-state checks and CSV outputs

pub mod consensus;
pub mod controller;
pub mod graph;
pub mod linalg;
pub mod plant;
pub mod pubsub;
pub mod report;
pub mod scenario;
pub mod sod_kalman;
