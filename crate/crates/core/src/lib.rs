//! Stochastic bilevel optimization: sampled derivative oracles, hypergradient
//! estimators, SSGD and baseline drivers, and test problems with known
//! solutions.
//!
//! ```
//! use bilevel_core::algorithms::{run_ssgd, Batches, Init, RunOptions, SsgdConfig};
//! use bilevel_core::synthetic::{generate_dataset, SyntheticConfig};
//! use bilevel_core::{Oracle, RngStream, Sampler, Vector};
//!
//! # fn main() -> bilevel_core::Result<()> {
//! let w0 = Vector::from_vec(vec![2.0, 5.0, 7.0]);
//! let data = SyntheticConfig { n_train: 500, n_val: 500, ..Default::default() };
//! let problem = generate_dataset(&mut RngStream::new(0, 0), &w0, &data)?;
//! let cfg = SsgdConfig { k: 200, t: 5, j: 3, alpha: 0.01, beta: 0.1, eta: 0.1, batches: Batches::uniform(5) };
//! let mut oracle = Oracle::new(&problem);
//! let mut sampler = Sampler::stochastic(RngStream::new(0, 1));
//! let trace = run_ssgd(&mut oracle, &cfg, &Init::zeros(3, 3), &mut sampler, &RunOptions::default())?;
//! assert!(trace.last().grad_norm < trace.first().grad_norm);
//! # Ok(())
//! # }
//! ```

// `!(v > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod error;
pub mod estimators;
pub mod hyperclean;
pub mod oracle;
pub mod synthetic;
pub mod textfmt;
pub mod theory;

pub use error::{Error, Result};
pub use oracle::{BatchSpec, BilevelProblem, ComplexityCounters, Oracle, RngStream, Sampler, Vector};
