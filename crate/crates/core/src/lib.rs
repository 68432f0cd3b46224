// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod demo;
pub mod ellipsoid;
pub mod error;
pub mod gpssm;
pub mod invariance;
pub mod json;
pub mod linalg;
pub mod simulator;
pub mod synthesis;

pub use demo::{run_demo, DemoConfig, DemoOutcome};
pub use ellipsoid::{chebyshev_region, inner_sum_check, psd_inv_sqrt, psd_sqrt, Ellipsoid};
pub use error::{Error, Result};
pub use gpssm::{
    Dataset, FitOptions, GpssmModel, PhiRule, PosteriorMoments, SquaredExpKernel, UncertaintyBounds,
};
pub use invariance::{
    build_gpssm_verification_lmi, build_ris_lmi, check_constraints, pis_from_ris_substitution,
    sampled_invariance_oracle, verify_controller, DisturbedLinearSystem, PolytopeConstraints,
    Verdict, VerificationReport, VerifyOptions,
};
pub use simulator::{
    ground_truth_quadrotor, monte_carlo, quadrotor_transitions, rollout, wilson_interval,
    write_trajectories_csv, GroundTruth, InitialState, McReport, Metric, Plant, QuadrotorParams,
    Rollout, RolloutConfig,
};
pub use synthesis::{
    build_design_sdp, feasibility_is_monotone_check, recheck_certificate, synthesize, PciDocument,
    PciResult, SynthesisConfig,
};
