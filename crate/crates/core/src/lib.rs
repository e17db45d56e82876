//! Inverse constraint learning for constrained MDPs.
//!
//! Given a known reward and a set of expert demonstrations, the crate learns a
//! soft cumulative constraint function `c(s, a) ∈ (0, 1)` such that a policy
//! trained with constrained PPO under `c` reproduces the expert's behaviour.
//! The pieces are:
//!
//! - [`env`]: seedable gridworld and cartpole environments with their true constraints.
//! - [`nn`]: a small dense MLP kernel with exact reverse-mode gradients and Adam/SGD.
//! - [`flow`]: a RealNVP density estimator used to reweight agent trajectories.
//! - [`crl`]: PPO with a feasibility correction step (forward constrained RL).
//! - [`adjust`]: the constraint-function adjustment with policy and trajectory reweighting.
//! - [`icl`]: the outer alternation loop.
//! - [`metrics`]: CMSE and the normalized accrual dissimilarity (exact Wasserstein).
//! - [`oracle`]: an exact tabular LP realization of the alternation on finite MDPs.

pub mod adjust;
pub mod crl;
pub mod env;
pub mod error;
pub mod flow;
pub mod icl;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::{State, Step, Trajectory};

/// The random generator used throughout. Every stochastic routine takes one
/// explicitly so runs are reproducible from a single seed.
pub type IclRng = rand_chacha::ChaCha8Rng;

/// Build the crate's generator from a seed.
pub fn rng_from_seed(seed: u64) -> IclRng {
    use rand::SeedableRng;
    IclRng::seed_from_u64(seed)
}
