//! Simulation and regularity diagnostics for piecewise-deterministic Markov
//! processes that switch between smooth vector fields on `R^d`.

pub mod averaged;
pub mod config;
pub mod density;
pub mod dsl;
pub mod example;
pub mod flow;
pub mod liealg;
pub mod pdmp;
pub mod rng;
pub mod scalar;
pub mod singularity;
pub mod switching;
pub mod vecfield;

pub use averaged::{attractor_estimate, averaged_field, q0_membership, AttractorEstimate, AveragedField};
pub use config::{ConfigError, Experiment, ExperimentConfig};
pub use density::{
    blowup_diagnostic, estimate_density, smoothness_probe, BlowupReport, BlowupVerdict, DensityGrid, GridSpec,
    RadialMass, SmoothnessReport,
};
pub use dsl::{eval_expr, parse_expr, EvalError, ExprAst, ParseError};
pub use flow::{affine_flow, composite_flow, flow, transport_density, FlowError, FlowResult};
pub use liealg::{bracket_family, hormander_rank, lie_bracket, submersion_rank, BracketField, RankReport};
pub use pdmp::{simulate, simulate_batch, BoundingBox, PdmpConfig, SimError, Trajectory};
pub use singularity::{
    blowup_exponent, check_backward_invariance, compute_R, full_verdict, GammaCandidate, SingularityVerdict,
};
pub use switching::{
    sample_chain, scale, stationary_law, validate_rate_matrix, ChainStationaryLaw, RateMatrix, SwitchingRecord,
};
pub use vecfield::{divergence, eval_field, jacobian, DualVector, Field, Jacobian, VectorFieldSpec};
