//! Grounded flow reasoning: a spectral 2D flow simulator with perturbative
//! ensembles, a visual-symbolic projector, a physics critic that gates an
//! agent loop with rollback, counterfactual probing, knowledge retrieval and
//! structured report generation.

pub mod agent;
pub mod critic;
pub mod field;
pub mod knowledge;
pub mod metrics;
pub mod probe;
pub mod projector;
pub mod remote;
pub mod report;
pub mod simulator;
