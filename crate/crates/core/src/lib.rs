//! A single selective state-space layer learning linear regression in context.
//!
//! * [`task_gen`] samples prompts and checks the Gaussian moment identities
//!   behind the theory by Monte Carlo.
//! * [`ssm`] is the layer itself: selection, zero-order-hold discretization,
//!   the scan and the squared loss.
//! * [`theory`] has the closed forms: the constants, the converged predictor,
//!   the population loss and the baselines.
//! * [`training`] runs population and empirical gradient descent and checks
//!   gradients by finite differences.
//! * [`dynamics`] monitors the inner products of the projection columns
//!   during training.
//!
//! ```
//! use mamba_icl::{rng::stream_rng, ssm::Dims, task_gen::sample_prompt, theory};
//!
//! let mut rng = stream_rng(7, 0);
//! let prompt = sample_prompt(4, 50, &mut rng)?;
//! let params = theory::converged_params(Dims::new(4, 80, 50)?, &mut rng)?;
//! let yhat = mamba_icl::ssm::predict(&params, &prompt)?;
//! assert!((yhat - theory::converged_predict(&prompt)?).abs() < 1e-10 * yhat.abs().max(1.0));
//! # Ok::<(), mamba_icl::Error>(())
//! ```

pub mod checkpoint;
pub mod dynamics;
pub mod error;
pub mod rng;
pub mod ssm;
pub mod task_gen;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
