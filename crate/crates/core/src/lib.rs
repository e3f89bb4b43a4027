//! Kernel quadrature by greedy atom selection.
//!
//! Approximates `E_p[f]` by a weighted sum `Σ w_i f(x_i)` over atoms picked
//! from a finite candidate pool. The quality of a rule is the squared
//! maximum mean discrepancy between `p` and the weighted atoms,
//!
//! ```text
//! g(S) = ‖μ_p - Σ w_i φ(x_i)‖² = c - zᵀK⁻¹z     (optimal weights w = K⁻¹z)
//! ```
//!
//! Modules:
//!
//! | module | contents |
//! |--------|----------|
//! | [`kernel`] | points, pools, standardized kernels |
//! | [`embedding`] | target distributions through `z(x)` and `c` |
//! | [`state`] | incremental Cholesky state with optimal weights |
//! | [`select`] | WKH, SBQ, uniform herding, MC and the greedy driver |
//! | [`distributed`] | partition / local greedy / collate / best-of |
//! | [`diagnostics`] | rate fits, exhaustive oracle, spectra, fixtures |
//! | [`fisher`] | logistic regression and Fisher-kernel summarization |
//! | [`harness`] | configs, experiment commands, CSV/JSON output |

pub mod diagnostics;
pub mod distributed;
pub mod embedding;
pub mod error;
pub mod fisher;
pub mod harness;
pub mod kernel;
pub mod select;
pub mod state;

pub use embedding::{EmpiricalDiscrete, GaussianMixture, MonteCarloTarget, Sampler, TargetEmbedding};
pub use error::{Error, Result};
pub use kernel::{CandidatePool, FeatureMap, Kernel, Point};
pub use select::{run_greedy, Greedy, GreedyRun, Method, RunTrace, Solution};
pub use state::QuadratureState;
