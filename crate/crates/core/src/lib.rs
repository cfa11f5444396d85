//! Solvers for the one-dimensional two-phase Stefan (melting) problem.
//!
//! Three routes to the same temperature field:
//!
//! * [`stefan`]: the closed-form similarity solution and the regularized
//!   enthalpy coefficients,
//! * [`fd`]: a Crank–Nicolson / Newton–Raphson finite-difference reference,
//! * [`trainer`]: a physics-informed network trained with several loss
//!   weighting strategies and an optional sequence-in-time curriculum.
//!
//! All numerics are generic over [`Real`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`, which is what the CLI uses.

pub mod diff;
pub mod error;
pub mod eval;
pub mod fd;
pub mod io;
pub mod sampling;
pub mod scalar;
pub mod stefan;
pub mod trainer;

pub use error::{Result, StefanError};
pub use scalar::Real;

pub type StefanConfig64 = stefan::StefanConfig<f64>;
pub type InterfaceConstant64 = stefan::InterfaceConstant<f64>;
pub type Grid64 = fd::Grid<f64>;
pub type Field1D64 = fd::Field1D<f64>;
pub type FdSolution64 = fd::FdSolution<f64>;
pub type Mlp64 = diff::Mlp<f64>;
pub type Jet64 = diff::Jet2<f64>;
pub type ParamGrad64 = diff::ParamGrad<f64>;
pub type SampleSet64 = sampling::SampleSet<f64>;
pub type CurriculumSchedule64 = sampling::CurriculumSchedule<f64>;
pub type EvalGrid64 = eval::EvalGrid<f64>;
pub type ReferenceLattice64 = eval::ReferenceLattice<f64>;
pub type TrainConfig64 = trainer::TrainConfig<f64>;
pub type TrainOutput64 = trainer::TrainOutput<f64>;
pub type Regime64 = trainer::Regime<f64>;
pub type RunReport64 = eval::RunReport<f64>;
