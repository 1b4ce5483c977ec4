//! Receding-horizon controllers over a pseudospectral transcription.
//!
//! [`NmpcController`] solves the nonlinear OCP with the in-tree SQP solver at
//! every controller tick; [`LmpcController`] solves one QP over the kinematics
//! linearised at the current state. Both take the current radius estimates as
//! model parameters.

pub mod controller;
pub mod qp;
pub mod reference;
pub mod sqp;
pub mod transcription;

pub use controller::{ControlStep, ControllerStatus, LmpcController, MpcConfig, MpcSolution, NmpcController};
pub use qp::{solve_qp, QpProblem, QpSolution};
pub use reference::{build_reference_circle, ReferencePoint, ReferenceSignal};
pub use sqp::{constraint_violation, solve_nlp, LinearRows, NlpProblem, NlpSolution, SolverStatus, SqpOptions};
pub use transcription::{
    linearize, transcribe, DecisionLayout, ModelForm, MpcBounds, OcpInstance, OcpWeights, Transcription,
};
