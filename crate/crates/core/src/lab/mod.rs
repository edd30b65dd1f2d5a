//! Dynamic operators and the checks run against them.

mod axioms;
mod extension;
mod operator;

pub use axioms::{
    check_axiom, check_trial, representation_check, AxiomId, AxiomReport, AxiomTrial, ClaimFn, EventFn,
    RepresentationReport, TolerancePolicy,
};
pub use extension::{extend_operator, ExtensionReport, EXTENSION_ABS_SLACK};
pub use operator::{zeta_shift, DynamicOperator, RbsdeOperator, ZetaShifted};
