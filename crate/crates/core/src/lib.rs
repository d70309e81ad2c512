//! Minimum-message output-feedback synthesis for finite-horizon linear
//! time-varying systems.
//!
//! A finite-horizon linear controller with memory is a block-lower-triangular
//! matrix `K` mapping the stacked measurements `y` to the stacked inputs
//! `u = K y`. The number of real-valued messages a sensor must send to an
//! actuator to implement `K` equals `rank K`, and a causal factorization
//! `K = D E` gives the encoder `E` (sensor side) and decoder `D` (actuator
//! side) together with the transmission schedule.
//!
//! The crate is organised as a pipeline:
//!
//! * [`problem`]: plant, horizon, polytopic safety sets and the JSON problem file.
//! * [`block`]: block-lower-triangular algebra, lifted operators and tolerant rank.
//! * [`sls`]: system-level parametrisation of closed-loop responses.
//! * [`containment`]: Farkas reduction of robust polytope containment.
//! * [`conic`]: a small conic-program model and its interior-point backend.
//! * [`synthesis`]: reweighted rank and group-sparsity minimisation.
//! * [`factorization`]: causal factorization of a block-lower-triangular matrix.
//! * [`runtime`]: monolithic and encoder/decoder closed-loop simulation.
//! * [`cli`]: the command-line driver used by the `commsynth` binary.

// Links the system OpenBLAS used by the PSD cone of the interior-point backend.
extern crate openblas_src;

pub mod block;
pub mod cli;
pub mod conic;
pub mod containment;
pub mod error;
pub mod factorization;
pub mod problem;
pub mod runtime;
pub mod sls;
pub mod synthesis;

pub use block::{lift, tolerant_rank, BlockLowerTriangular, LiftedOperators};
pub use containment::{FarkasCertificate, ProductPolytope};
pub use error::{Error, Result};
pub use factorization::{causal_factorize, rank_profile, verify_causality, CausalFactorization};
pub use problem::{
    drone_benchmark_problem, drone_problem, load_problem, BoxSet, HPolytope, Objective, SafetySpec,
    SolverOptions, SynthesisProblem, TimeVaryingLinearSystem,
};
pub use runtime::{check_safety, sample_noise, simulate_distributed, simulate_monolithic};
pub use sls::SystemResponse;
pub use synthesis::{recheck_feasibility, FeasibilityReport, SynthesisResult};

/// Dense matrix type used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense column vector type used throughout the crate.
pub type Vector = nalgebra::DVector<f64>;
