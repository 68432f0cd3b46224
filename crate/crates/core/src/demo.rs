//! Seeded end-to-end run on the synthetic planar quadrotor: generate data,
//! fit the GP model, synthesize a PCI set and check it by simulation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::gpssm::{Dataset, FitOptions, FitReport, GpssmModel, PhiRule};
use crate::invariance::PolytopeConstraints;
use crate::simulator::{
    monte_carlo, quadrotor_transitions, GroundTruth, InitialState, McReport, QuadrotorParams,
    RolloutConfig,
};
use crate::synthesis::{synthesize, PciResult, SynthesisConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub params: QuadrotorParams,
    /// Per-coordinate process noise standard deviation.
    pub noise_std: f64,
    pub n_transitions: usize,
    /// Training states and inputs are uniform in `[-sample_radius, sample_radius]`.
    pub sample_radius: f64,
    pub position_bound: f64,
    pub velocity_bound: f64,
    pub input_bound: f64,
    pub restarts: usize,
    pub horizon: usize,
    pub n_rollouts: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            params: QuadrotorParams {
                dt: 0.1,
                drag: 0.005,
                saturation: None,
            },
            noise_std: 1e-3,
            n_transitions: 500,
            sample_radius: 2.0,
            position_bound: 5.0,
            velocity_bound: 7.0,
            input_bound: 5.0,
            restarts: 5,
            horizon: 100,
            n_rollouts: 10_000,
            seed: 0,
        }
    }
}

impl DemoConfig {
    pub fn constraints(&self) -> Result<PolytopeConstraints> {
        let (x, v) = (self.position_bound, self.velocity_bound);
        PolytopeConstraints::symmetric_boxes(&[x, v, x, v], &[self.input_bound; 2])
    }

    pub fn dataset(&self) -> Result<Dataset> {
        quadrotor_transitions(
            &self.params,
            &DVector::from_element(4, self.noise_std),
            &[self.sample_radius; 4],
            &[self.sample_radius; 2],
            self.n_transitions,
            self.seed,
        )
    }

    pub fn plant(&self) -> Result<GroundTruth> {
        GroundTruth::quadrotor(self.params, DVector::from_element(4, self.noise_std))
    }

    pub fn rollout_config(&self, jobs: Option<usize>) -> RolloutConfig {
        RolloutConfig {
            horizon: self.horizon,
            n_rollouts: self.n_rollouts,
            initial: InitialState::UniformInEllipsoid,
            seed: self.seed,
            jobs,
        }
    }
}

pub struct DemoOutcome {
    pub data: Dataset,
    pub model: GpssmModel,
    pub fit: FitReport,
    pub pci: PciResult,
    pub report: McReport,
}

/// Runs the whole pipeline against the ground-truth plant.
pub fn run_demo(config: &DemoConfig, synthesis: &SynthesisConfig) -> Result<DemoOutcome> {
    let data = config.dataset()?;
    let options = FitOptions {
        restarts: config.restarts,
        seed: config.seed,
        ..Default::default()
    };
    let (model, fit) = GpssmModel::fit(data.clone(), &options)?;
    let constraints = config.constraints()?;
    let bounds = model.uncertainty_bounds(PhiRule::Guaranteed);
    let pci = synthesize(model.a(), model.b(), &bounds, &constraints, synthesis)?;
    let plant = config.plant()?;
    let report = monte_carlo(
        &plant,
        &pci.p,
        &pci.l,
        &constraints,
        &config.rollout_config(synthesis.jobs),
    )?;
    Ok(DemoOutcome {
        data,
        model,
        fit,
        pci,
        report,
    })
}
