//! Desk-scale simulator for federated spatio-temporal graph forecasting
//! with dynamic inter-client dependencies.
//!
//! The crate pairs a recurrent dynamic-graph forecasting cell with a
//! synchronous client/server protocol that reconstructs its inter-client
//! coupling from low-rank shares, plus the verification harness proving
//! the distributed computation equals its centralized counterpart.

pub mod config;
pub mod data;
pub mod forward;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod tape;
pub mod tensor;
pub mod transport;
pub mod verify;
