//! Decision-boundary geometry of a classifier's final linear layer, and
//! adversarial attacks that use it to pick their starting points.
//!
//! A classifier is split into a head `f_h: R^D -> R^N` (every layer but the
//! last) and a dense tail `z = w v + b`. In representation space the class
//! regions are cut out by the exact hyperplanes `(w_i - w_j) . v + b_i - b_j = 0`
//! ([`geometry`]). Attacks ([`attacks`]) can descend the signed distance to
//! the nearest such hyperplane before running PGD or FAB, and the
//! [`harness`] measures what that buys at a fixed iteration budget.

pub mod attacks;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod layers;
pub mod loss;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use attacks::{run_with_restarts, AttackConfig, AttackOutcome, FabParams, Init, Method, Norm};
pub use data::{load_idx, make_blobs, Dataset};
pub use error::{Error, Result};
pub use geometry::{BoundarySet, RegionLabel, DEFAULT_TIE_TOL};
pub use harness::{evaluate, export_representation_space, sweep_n_init, EvalReport, ReprExport, SweepTable};
pub use model::{Architecture, Classifier, ModelMeta, ScalarHead, TrainConfig};
pub use tensor::Tensor;
