//! Exact conditional environment laws, the couplings that compare them, and
//! exhaustive verification of the monotonicity inequalities on small grids.

mod couplings;
mod law;
mod levels;
mod verify;

use thiserror::Error;

use crate::exact::ExactError;

pub use couplings::{
    apply_coupling, inputs_of, BaseSource, CVar, CanonicalPair, CoupledSource, CouplingCase, CouplingModel,
    Rule3Reading,
};
pub use law::{
    bayes_conditional_probability, bayes_polys, check_increment_order, conditional_event_poly,
    exact_conditional_probability, trace_beside, ConditionalLaw, ConditioningPath, IncrementOrderWitness, SideEvent,
    FAR_CLOSED_HALF, FAR_OPEN,
};
pub use levels::{
    bayes_event_probability, coupled_positions, eval_all, event_probability, evolve, joint_side_law, mass_where, side_law,
    step_beside, Law,
};
pub use verify::{
    check_pushforward, containment, d_distribution, enumerate_paths, joint_side_positions, verify_monotonicity,
    Check, ContainmentTally, Finding, GridReport, GridSpec, MonotonicityReport, ObservationTally, PushforwardOutcome,
    VerifyOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("a conditioning path needs at least its starting point")]
    EmptyPath,
    #[error("paths have different lengths ({0} and {1})")]
    LengthMismatch(usize, usize),
    #[error("shift level t0 = {t0} must lie in 1..={len}")]
    BadT0 { t0: usize, len: usize },
    #[error("start {start} is on the wrong side of the path start {j}")]
    BadStart { start: i64, j: i64 },
    #[error("coupling {case:?} does not apply to a step of {step} at t0")]
    CaseMismatch { case: CouplingCase, step: i64 },
    #[error("grid {width}x{height} needs {bits} enumeration bits, budget is {budget}")]
    GridTooLarge {
        width: i64,
        height: usize,
        bits: u64,
        budget: u32,
    },
    #[error("invalid grid: {0}")]
    GridShape(String),
    #[error("enumeration left its window")]
    WindowLeak,
    #[error(transparent)]
    Exact(#[from] ExactError),
    #[error("could not start worker pool: {0}")]
    Pool(String),
}
