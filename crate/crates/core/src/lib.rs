//! Training-free, label-free merging of heterogeneous graph neural network
//! specialists.
//!
//! Two parents (GCN, GraphSAGE, GAT or GIN, of any depth and width) trained
//! on the same graph are rewritten as gated mixtures of a fixed set of
//! message-passing operators, aligned layer by layer, transported into one
//! coordinate system, fused, and finally calibrated on edge-message
//! statistics. Nothing here reads labels or trains anything.
//!
//! The stages map onto modules:
//!
//! | stage | module |
//! |---|---|
//! | operator-basis canonicalization | [`umpm`] |
//! | layer similarity, monotone matching, Procrustes maps | [`alignment`] |
//! | parameter transport and depth padding | [`transport`] |
//! | gate regression, mixing coefficients, convex fusion | [`fusion`] |
//! | edge-message moment calibration | [`lfnorm`] |
//! | end-to-end orchestration | [`pipeline`] |
//! | retention, speedup and sweeps | [`eval`] |

pub mod alignment;
pub mod binio;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod graph;
pub mod lfnorm;
pub mod linalg;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod synthetic;
pub mod transport;
pub mod umpm;

pub use error::{Error, Result};
pub use graph::{GraphBundle, GraphView};
pub use linalg::Matrix;
pub use model::{ActivationTrace, Arch, GraphModel, ParentModel};
pub use umpm::{UmpmLayer, UmpmModel};
