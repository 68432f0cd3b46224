//! Closed-loop Monte Carlo under `u = Lx`, with containment statistics.

use std::io;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ellipsoid::Ellipsoid;
use crate::error::{check_dim, Error, Result};
use crate::gpssm::{Dataset, GpssmModel};
use crate::invariance::PolytopeConstraints;
use crate::linalg::require_square;

/// A rollout is cut off once `‖x‖` exceeds this.
pub const DIVERGENCE_NORM: f64 = 1e9;
/// Slack used for membership tests along trajectories.
pub const MEMBERSHIP_SLACK: f64 = 1e-9;
/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// One step of the true or modeled closed-loop plant.
pub trait Plant: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DVector<f64>>;
}

/// Draws every successor independently from the posterior predictive.
impl Plant for GpssmModel {
    fn state_dim(&self) -> usize {
        GpssmModel::state_dim(self)
    }

    fn input_dim(&self) -> usize {
        GpssmModel::input_dim(self)
    }

    fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DVector<f64>> {
        self.sample_step(x, u, rng)
    }
}

type StepFn = dyn Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync;

/// Known deterministic dynamics plus independent Gaussian noise per coordinate.
pub struct GroundTruth {
    f: Box<StepFn>,
    noise_std: DVector<f64>,
    input_dim: usize,
}

impl GroundTruth {
    pub fn new(
        f: impl Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
        noise_std: DVector<f64>,
        input_dim: usize,
    ) -> Result<Self> {
        if noise_std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "noise standard deviations must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            f: Box::new(f),
            noise_std,
            input_dim,
        })
    }

    /// `x⁺ = Ax + Bu + w`.
    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, noise_std: DVector<f64>) -> Result<Self> {
        require_square("A", &a)?;
        check_dim("B rows", a.nrows(), b.nrows())?;
        check_dim("noise", a.nrows(), noise_std.len())?;
        let m = b.ncols();
        Self::new(move |x, u| &a * x + &b * u, noise_std, m)
    }

    pub fn quadrotor(params: QuadrotorParams, noise_std: DVector<f64>) -> Result<Self> {
        params.validate()?;
        check_dim("noise", 4, noise_std.len())?;
        Self::new(
            move |x, u| ground_truth_quadrotor(x, u, &params),
            noise_std,
            2,
        )
    }
}

impl Plant for GroundTruth {
    fn state_dim(&self) -> usize {
        self.noise_std.len()
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<DVector<f64>> {
        let mut next = (self.f)(x, u);
        check_dim("plant output", self.noise_std.len(), next.len())?;
        for (v, s) in next.iter_mut().zip(self.noise_std.iter()) {
            if *s > 0.0 {
                let e: f64 = StandardNormal.sample(rng);
                *v += s * e;
            }
        }
        Ok(next)
    }
}

/// Planar point-mass with acceleration input, quadratic drag and an optional
/// smooth actuator limit. State `[x_x, v_x, x_y, v_y]`, input `[u_x, u_y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorParams {
    pub dt: f64,
    /// Coefficient of the `−c·v|v|` drag term.
    pub drag: f64,
    /// Actuator limit `s` in `s·tanh(u/s)`; `None` passes the input through.
    pub saturation: Option<f64>,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            dt: 0.1,
            drag: 0.0,
            saturation: None,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<()> {
        let sat_ok = self.saturation.is_none_or(|s| s.is_finite() && s > 0.0);
        if !(self.dt.is_finite()
            && self.dt > 0.0
            && self.drag.is_finite()
            && self.drag >= 0.0
            && sat_ok)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid quadrotor parameters {self:?}"
            )));
        }
        Ok(())
    }

    /// Drag-free linearization: per axis `[[1, dt], [0, 1]]` and `[dt²/2, dt]`.
    pub fn linear_model(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let dt = self.dt;
        let mut a = DMatrix::identity(4, 4);
        let mut b = DMatrix::zeros(4, 2);
        for axis in 0..2 {
            let (p, v) = (2 * axis, 2 * axis + 1);
            a[(p, v)] = dt;
            b[(p, axis)] = 0.5 * dt * dt;
            b[(v, axis)] = dt;
        }
        (a, b)
    }
}

/// One step with the acceleration held constant over the sample period.
pub fn ground_truth_quadrotor(
    x: &DVector<f64>,
    u: &DVector<f64>,
    params: &QuadrotorParams,
) -> DVector<f64> {
    let dt = params.dt;
    let mut next = x.clone();
    for axis in 0..2 {
        let (p, v) = (2 * axis, 2 * axis + 1);
        let cmd = match params.saturation {
            Some(s) => s * (u[axis] / s).tanh(),
            None => u[axis],
        };
        let acc = cmd - params.drag * x[v] * x[v].abs();
        next[p] = x[p] + dt * x[v] + 0.5 * dt * dt * acc;
        next[v] = x[v] + dt * acc;
    }
    next
}

/// `n` independent transitions of the noisy quadrotor from states and inputs
/// drawn uniformly from the boxes `|x_i| ≤ state_box_i`, `|u_j| ≤ input_box_j`.
pub fn quadrotor_transitions(
    params: &QuadrotorParams,
    noise_std: &DVector<f64>,
    state_box: &[f64],
    input_box: &[f64],
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    check_dim("state box", 4, state_box.len())?;
    check_dim("input box", 2, input_box.len())?;
    let plant = GroundTruth::quadrotor(*params, noise_std.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |bounds: &[f64], rng: &mut ChaCha8Rng| {
        DVector::from_iterator(
            bounds.len(),
            bounds.iter().map(|b| rng.random_range(-1.0..=1.0) * b),
        )
    };
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let x = draw(state_box, &mut rng);
        let u = draw(input_box, &mut rng);
        let next = plant.step(&x, &u, &mut rng)?;
        records.push((x, u, next));
    }
    Dataset::from_transitions(&records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "state")]
pub enum InitialState {
    Fixed(Vec<f64>),
    /// Uniform over the certified ellipsoid `E(0, P⁻¹)`.
    UniformInEllipsoid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub n_rollouts: usize,
    pub initial: InitialState,
    pub seed: u64,
    #[serde(skip)]
    pub jobs: Option<usize>,
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.n_rollouts == 0 {
            return Err(Error::InvalidArgument(
                "horizon and rollout count must be positive".into(),
            ));
        }
        if self.jobs == Some(0) {
            return Err(Error::InvalidArgument("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Generator of rollout `index`: one stream per rollout under the common seed.
    pub fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `x_0, …` up to `x_T`, or up to the last finite state before divergence.
    pub states: Vec<DVector<f64>>,
    /// `u_k = L x_k` for every recorded state.
    pub inputs: Vec<DVector<f64>>,
    /// First step whose state was non-finite or beyond the divergence norm.
    pub diverged_at: Option<usize>,
}

/// Simulates `x_{k+1} = plant(x_k, L x_k)` for `horizon` steps.
pub fn rollout(
    plant: &dyn Plant,
    l: &DMatrix<f64>,
    x0: &DVector<f64>,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    let n = plant.state_dim();
    check_dim("initial state", n, x0.len())?;
    check_dim("gain rows", plant.input_dim(), l.nrows())?;
    check_dim("gain columns", n, l.ncols())?;
    let mut states = Vec::with_capacity(horizon + 1);
    let mut inputs = Vec::with_capacity(horizon + 1);
    let mut x = x0.clone();
    let mut diverged_at = None;
    for k in 0..=horizon {
        if x.iter().any(|v| !v.is_finite()) || x.norm() > DIVERGENCE_NORM {
            diverged_at = Some(k);
            break;
        }
        let u = l * &x;
        states.push(x.clone());
        inputs.push(u.clone());
        if k < horizon {
            x = plant.step(&x, &u, rng)?;
        }
    }
    Ok(Rollout {
        states,
        inputs,
        diverged_at,
    })
}

/// Empirical frequency with a Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub successes: u64,
    pub trials: u64,
    /// Time step attaining a per-step minimum, when applicable.
    pub step: Option<usize>,
}

/// Wilson score interval for `successes` out of `trials` at quantile `z`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

impl Metric {
    pub fn new(successes: u64, trials: u64, step: Option<usize>) -> Self {
        let (lower, upper) = wilson_interval(successes, trials, Z95);
        let estimate = if trials == 0 {
            1.0
        } else {
            successes as f64 / trials as f64
        };
        Self {
            estimate,
            lower,
            upper,
            successes,
            trials,
            step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub n_rollouts: usize,
    pub horizon: usize,
    pub seed: u64,
    /// `min_k Pr(x_k ∈ E(0, P⁻¹))`.
    pub min_k_containment: Metric,
    /// `min_k Pr(u_k ∈ U | x_k ∈ E(0, P⁻¹))`.
    pub input_admissibility: Metric,
    /// `Pr(x_k ∈ X for all k)`.
    pub all_time_safety: Metric,
    /// `Pr(x_k ∈ E(0, P⁻¹) for all k)`.
    pub all_time_containment: Metric,
    pub diverged: u64,
}

#[derive(Debug, Clone, Default)]
struct Counts {
    in_pci: Vec<u64>,
    in_pci_and_u: Vec<u64>,
    always_safe: u64,
    always_in_pci: u64,
    diverged: u64,
}

impl Counts {
    fn zeros(len: usize) -> Self {
        Self {
            in_pci: vec![0; len],
            in_pci_and_u: vec![0; len],
            ..Default::default()
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.in_pci.iter_mut().zip(&other.in_pci) {
            *a += b;
        }
        for (a, b) in self.in_pci_and_u.iter_mut().zip(&other.in_pci_and_u) {
            *a += b;
        }
        self.always_safe += other.always_safe;
        self.always_in_pci += other.always_in_pci;
        self.diverged += other.diverged;
        self
    }
}

/// Per-step membership flags of one rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepFlags {
    pub in_pci: bool,
    pub in_x: bool,
    pub in_u: bool,
}

fn flags(
    p: &DMatrix<f64>,
    constraints: &PolytopeConstraints,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> StepFlags {
    StepFlags {
        in_pci: x.dot(&(p * x)) <= 1.0 + MEMBERSHIP_SLACK,
        in_x: constraints.state_admissible(x, MEMBERSHIP_SLACK),
        in_u: constraints.input_admissible(u, MEMBERSHIP_SLACK),
    }
}

struct Experiment<'a> {
    plant: &'a dyn Plant,
    p: &'a DMatrix<f64>,
    l: &'a DMatrix<f64>,
    constraints: &'a PolytopeConstraints,
    config: &'a RolloutConfig,
    ellipsoid: Ellipsoid,
}

impl<'a> Experiment<'a> {
    fn new(
        plant: &'a dyn Plant,
        p: &'a DMatrix<f64>,
        l: &'a DMatrix<f64>,
        constraints: &'a PolytopeConstraints,
        config: &'a RolloutConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = plant.state_dim();
        check_dim("certificate", n, p.nrows())?;
        constraints.check_dims(n, plant.input_dim())?;
        if let InitialState::Fixed(x0) = &config.initial {
            check_dim("initial state", n, x0.len())?;
        }
        Ok(Self {
            plant,
            p,
            l,
            constraints,
            config,
            ellipsoid: Ellipsoid::from_precision(p)?,
        })
    }

    fn run(&self, index: usize) -> Result<Rollout> {
        let mut rng = self.config.rng_for(index);
        let x0 = match &self.config.initial {
            InitialState::Fixed(v) => DVector::from_column_slice(v),
            InitialState::UniformInEllipsoid => self.ellipsoid.sample_uniform(&mut rng),
        };
        rollout(self.plant, self.l, &x0, self.config.horizon, &mut rng)
    }

    fn count(&self, index: usize) -> Result<Counts> {
        let r = self.run(index)?;
        let mut c = Counts::zeros(self.config.horizon + 1);
        let mut safe = true;
        let mut contained = true;
        for (k, (x, u)) in r.states.iter().zip(&r.inputs).enumerate() {
            let f = flags(self.p, self.constraints, x, u);
            safe &= f.in_x;
            contained &= f.in_pci;
            if f.in_pci {
                c.in_pci[k] += 1;
                if f.in_u {
                    c.in_pci_and_u[k] += 1;
                }
            }
        }
        // Steps after a divergence count as outside every set.
        if r.diverged_at.is_some() {
            c.diverged = 1;
            safe = false;
            contained = false;
        }
        c.always_safe = safe as u64;
        c.always_in_pci = contained as u64;
        Ok(c)
    }
}

/// Estimates the containment metrics of `E(0, P⁻¹)` under `u = Lx` from
/// independent rollouts. Aggregation uses integer counts, so the report does
/// not depend on how rollouts are scheduled.
pub fn monte_carlo(
    plant: &dyn Plant,
    p: &DMatrix<f64>,
    l: &DMatrix<f64>,
    constraints: &PolytopeConstraints,
    config: &RolloutConfig,
) -> Result<McReport> {
    let exp = Experiment::new(plant, p, l, constraints, config)?;
    let len = config.horizon + 1;
    let run = || {
        (0..config.n_rollouts)
            .into_par_iter()
            .map(|i| exp.count(i))
            .try_reduce(|| Counts::zeros(len), |a, b| Ok(a.merge(b)))
    };
    let counts = match config.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }?;
    let total = config.n_rollouts as u64;
    let (k_min, &in_min) = counts
        .in_pci
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)))
        .expect("horizon is positive");
    let input = (0..len)
        .filter(|&k| counts.in_pci[k] > 0)
        .map(|k| (k, counts.in_pci_and_u[k], counts.in_pci[k]))
        .min_by(|a, b| {
            let ra = a.1 as f64 / a.2 as f64;
            let rb = b.1 as f64 / b.2 as f64;
            ra.total_cmp(&rb).then(a.0.cmp(&b.0))
        });
    let input_admissibility = match input {
        Some((k, s, t)) => Metric::new(s, t, Some(k)),
        None => Metric::new(0, 0, None),
    };
    let report = McReport {
        n_rollouts: config.n_rollouts,
        horizon: config.horizon,
        seed: config.seed,
        min_k_containment: Metric::new(in_min, total, Some(k_min)),
        input_admissibility,
        all_time_safety: Metric::new(counts.always_safe, total, None),
        all_time_containment: Metric::new(counts.always_in_pci, total, None),
        diverged: counts.diverged,
    };
    assert!(report.all_time_containment.estimate <= report.min_k_containment.estimate);
    Ok(report)
}

/// Writes `rollout_id,k,x1..xn,u1..um,in_pci,in_X,in_U` rows for the given
/// rollouts, regenerated from their seeds.
pub fn write_trajectories_csv<W: io::Write>(
    plant: &dyn Plant,
    p: &DMatrix<f64>,
    l: &DMatrix<f64>,
    constraints: &PolytopeConstraints,
    config: &RolloutConfig,
    rollout_ids: impl IntoIterator<Item = usize>,
    writer: W,
) -> Result<()> {
    let exp = Experiment::new(plant, p, l, constraints, config)?;
    let (n, m) = (plant.state_dim(), plant.input_dim());
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<String> = ["rollout_id".to_string(), "k".to_string()]
        .into_iter()
        .chain((1..=n).map(|i| format!("x{i}")))
        .chain((1..=m).map(|i| format!("u{i}")))
        .chain(["in_pci", "in_X", "in_U"].map(String::from))
        .collect();
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    wtr.write_record(&header).map_err(csv_err)?;
    for id in rollout_ids {
        let r = exp.run(id)?;
        for (k, (x, u)) in r.states.iter().zip(&r.inputs).enumerate() {
            let f = flags(p, constraints, x, u);
            let row: Vec<String> = [id.to_string(), k.to_string()]
                .into_iter()
                .chain(x.iter().chain(u.iter()).map(|v| format!("{v:.16e}")))
                .chain([f.in_pci, f.in_x, f.in_u].map(|b| u8::from(b).to_string()))
                .collect();
            wtr.write_record(&row).map_err(csv_err)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpssm::SquaredExpKernel;

    fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn config(initial: InitialState, n_rollouts: usize, horizon: usize) -> RolloutConfig {
        RolloutConfig {
            horizon,
            n_rollouts,
            initial,
            seed: 5,
            jobs: None,
        }
    }

    #[test]
    fn zero_dynamics_stay_at_origin() {
        let plant = GroundTruth::linear(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            DVector::zeros(2),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rollout(
            &plant,
            &DMatrix::zeros(1, 2),
            &DVector::zeros(2),
            10,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.states.len(), 11);
        assert!(r.states.iter().all(|x| x.amax() == 0.0));
    }

    #[test]
    fn noiseless_linear_plant_follows_matrix_powers() {
        let a = m(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        let b = m(2, 1, &[0.005, 0.1]);
        let l = m(1, 2, &[-1.0, -1.5]);
        let plant = GroundTruth::linear(a.clone(), b.clone(), DVector::zeros(2)).unwrap();
        let x0 = DVector::from_vec(vec![1.0, -0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rollout(&plant, &l, &x0, 20, &mut rng).unwrap();
        let a_bl = &a + &b * &l;
        let mut x = x0;
        for s in &r.states {
            assert_eq!(s, &x);
            x = &a * &x + &b * (&l * &x);
        }
        assert!((a_bl.pow(20) * r.states[0].clone() - &r.states[20]).amax() < 1e-12);
    }

    #[test]
    fn collapsed_posterior_follows_closed_loop_powers() {
        let a = m(2, 2, &[0.9, 0.2, 0.0, 0.8]);
        let b = m(2, 1, &[0.0, 1.0]);
        let l = m(1, 2, &[-0.1, -0.3]);
        let x = m(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let u = m(3, 1, &[0.5, -0.5, 0.0]);
        let xp = &x * a.transpose() + &u * b.transpose();
        let data = Dataset::new(x, u, xp).unwrap();
        let kernels = vec![SquaredExpKernel::isotropic(1e-24, 1.0, 3).unwrap(); 2];
        let model = GpssmModel::new(
            a.clone(),
            b.clone(),
            DVector::from_element(2, 1e-24),
            kernels,
            data,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = DVector::from_vec(vec![2.0, -1.0]);
        let r = rollout(&model, &l, &x0, 15, &mut rng).unwrap();
        let a_bl = &a + &b * &l;
        for (k, s) in r.states.iter().enumerate() {
            let want = a_bl.pow(k as u32) * &x0;
            assert!((s - want).amax() < 1e-9, "step {k}");
        }
    }

    #[test]
    fn divergence_is_cut_off() {
        let plant =
            GroundTruth::linear(m(1, 1, &[1e4]), m(1, 1, &[0.0]), DVector::zeros(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = rollout(
            &plant,
            &m(1, 1, &[0.0]),
            &DVector::from_element(1, 1.0),
            10,
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.diverged_at, Some(3));
        assert_eq!(r.states.len(), 3);
        let c = PolytopeConstraints::symmetric_boxes(&[1e12], &[1.0]).unwrap();
        let cfg = config(InitialState::Fixed(vec![1.0]), 4, 10);
        let rep = monte_carlo(&plant, &m(1, 1, &[1e-20]), &m(1, 1, &[0.0]), &c, &cfg).unwrap();
        assert_eq!(rep.diverged, 4);
        assert_eq!(rep.all_time_safety.successes, 0);
        assert_eq!(rep.all_time_containment.successes, 0);
    }

    #[test]
    fn deterministic_contraction_scores_one() {
        let plant = GroundTruth::linear(
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::zeros(2, 1),
            DVector::zeros(2),
        )
        .unwrap();
        let c = PolytopeConstraints::symmetric_boxes(&[100.0, 100.0], &[1.0]).unwrap();
        let cfg = config(InitialState::UniformInEllipsoid, 200, 30);
        let rep = monte_carlo(
            &plant,
            &DMatrix::identity(2, 2),
            &DMatrix::zeros(1, 2),
            &c,
            &cfg,
        )
        .unwrap();
        for metric in [
            rep.min_k_containment,
            rep.input_admissibility,
            rep.all_time_safety,
            rep.all_time_containment,
        ] {
            assert_eq!(metric.estimate, 1.0);
        }
    }

    #[test]
    fn point_sized_set_is_almost_never_hit() {
        let plant = GroundTruth::linear(
            DMatrix::identity(2, 2) * 0.5,
            DMatrix::zeros(2, 1),
            DVector::from_element(2, 0.1),
        )
        .unwrap();
        let c = PolytopeConstraints::symmetric_boxes(&[100.0, 100.0], &[1.0]).unwrap();
        let cfg = config(InitialState::Fixed(vec![0.0, 0.0]), 500, 10);
        let p = DMatrix::identity(2, 2) * 1e12;
        let rep = monte_carlo(&plant, &p, &DMatrix::zeros(1, 2), &c, &cfg).unwrap();
        assert!(rep.min_k_containment.estimate < 0.01);
        assert_eq!(rep.min_k_containment.step.map(|k| k > 0), Some(true));
    }

    #[test]
    fn reports_are_reproducible_and_schedule_independent() {
        let plant = GroundTruth::linear(
            DMatrix::identity(2, 2) * 0.9,
            DMatrix::zeros(2, 1),
            DVector::from_element(2, 0.2),
        )
        .unwrap();
        let c = PolytopeConstraints::symmetric_boxes(&[2.0, 2.0], &[1.0]).unwrap();
        let mut cfg = config(InitialState::UniformInEllipsoid, 300, 20);
        let p = DMatrix::identity(2, 2);
        let a = monte_carlo(&plant, &p, &DMatrix::zeros(1, 2), &c, &cfg).unwrap();
        cfg.jobs = Some(1);
        let b = monte_carlo(&plant, &p, &DMatrix::zeros(1, 2), &c, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.all_time_containment.estimate <= a.min_k_containment.estimate);
    }

    #[test]
    fn quadrotor_steps() {
        let params = QuadrotorParams::default();
        let x = DVector::from_vec(vec![1.0, 0.0, -2.0, 0.0]);
        assert_eq!(ground_truth_quadrotor(&x, &DVector::zeros(2), &params), x);
        let x = DVector::from_vec(vec![0.0, 1.0, 0.0, 0.0]);
        let next = ground_truth_quadrotor(&x, &DVector::from_vec(vec![1.0, 0.0]), &params);
        assert!((next[1] - 1.1).abs() < 1e-15);
        assert!((next[0] - (0.1 + 0.005)).abs() < 1e-15);
        let (a, b) = params.linear_model();
        let x = DVector::from_vec(vec![0.3, -1.2, 2.0, 0.7]);
        let u = DVector::from_vec(vec![-0.4, 2.5]);
        assert!((ground_truth_quadrotor(&x, &u, &params) - (&a * &x + &b * &u)).amax() < 1e-15);
        let dragged = QuadrotorParams {
            drag: 0.5,
            saturation: Some(1.0),
            ..params
        };
        let next = ground_truth_quadrotor(
            &DVector::from_vec(vec![0.0, 2.0, 0.0, 0.0]),
            &DVector::zeros(2),
            &dragged,
        );
        assert!((next[1] - (2.0 - 0.1 * 0.5 * 4.0)).abs() < 1e-15);
        let capped = ground_truth_quadrotor(
            &DVector::zeros(4),
            &DVector::from_vec(vec![50.0, 0.0]),
            &dragged,
        );
        assert!(capped[1] <= 0.1 + 1e-15);
    }

    #[test]
    fn wilson_interval_reference_values() {
        // 8 of 10 at z = 1.96: (0.4902, 0.9433) to four digits.
        let (lo, hi) = wilson_interval(8, 10, Z95);
        assert!(
            (lo - 0.4902).abs() < 1e-4 && (hi - 0.9433).abs() < 1e-4,
            "{lo} {hi}"
        );
        let (lo, hi) = wilson_interval(10, 10, Z95);
        assert!((hi - 1.0).abs() < 1e-12 && (lo - 10.0 / (10.0 + Z95 * Z95)).abs() < 1e-12);
    }

    #[test]
    fn csv_dump_has_flags() {
        let plant = GroundTruth::linear(
            DMatrix::identity(1, 1) * 0.5,
            DMatrix::zeros(1, 1),
            DVector::zeros(1),
        )
        .unwrap();
        let c = PolytopeConstraints::symmetric_boxes(&[1.0], &[1.0]).unwrap();
        let cfg = config(InitialState::Fixed(vec![2.0]), 3, 2);
        let mut buf = Vec::new();
        write_trajectories_csv(
            &plant,
            &DMatrix::identity(1, 1),
            &DMatrix::zeros(1, 1),
            &c,
            &cfg,
            [1],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "rollout_id,k,x1,u1,in_pci,in_X,in_U");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].ends_with(",0,0,1"));
        assert!(lines[2].ends_with(",1,1,1"));
    }
}
