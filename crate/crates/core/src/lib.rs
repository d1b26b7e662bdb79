//! Numerical laboratory for Carnot-Caratheodory geometry.
//!
//! The crate builds calibrations (exact 1-forms `Lambda` with
//! `<Lambda, v> <= |v|` on horizontal vectors and equality along a unit field
//! `Y`) from the normal Hamiltonian flow of a frame, and quasi-calibrations
//! for merely continuous frames, and turns them into certified lower bounds
//! on the diameter of small sub-Riemannian balls.
//!
//! Modules follow the pipeline:
//! [`structures`] -> [`hamiltonian`] -> [`calibration`] / [`quasicalib`] ->
//! [`distance`] -> [`diameter`].

pub mod calibration;
pub mod diameter;
pub mod distance;
pub mod error;
pub mod expr;
pub mod hamiltonian;
pub mod linalg;
pub mod ode;
pub mod optim;
pub mod quasicalib;
pub mod sampling;
pub mod structures;

pub use calibration::{CalibrationField, CalibrationReport};
pub use diameter::{BallDiameterReport, DiameterSweep};
pub use distance::{AdmissibleCurvePath, DistanceEstimate, DistanceStatus};
pub use error::{Error, Result};
pub use hamiltonian::{CotangentState, ExtremalTrajectory, FlowStatus};
pub use quasicalib::QuasiCalibration;
pub use structures::{builtin, ChartPoint, DomainBox, Frame, Regularity, SRStructure};
