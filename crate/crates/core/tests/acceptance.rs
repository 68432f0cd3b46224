//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use pcis_core::synthesis::{bisect, scalar_margin_satisfied, scalar_worst_case_excess};
use pcis_core::{
    build_ris_lmi, chebyshev_region, check_constraints, feasibility_is_monotone_check, run_demo,
    sampled_invariance_oracle, Dataset, DemoConfig, DisturbedLinearSystem, Ellipsoid, GpssmModel,
    PolytopeConstraints, SquaredExpKernel, SynthesisConfig, UncertaintyBounds,
};
use pcis_sdp::{solve, SolveStatus, SolverSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, StudentT};

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, v)
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Published planar quadrotor model and PCI design, high-fidelity simulator.
fn sim_a() -> DMatrix<f64> {
    m(
        4,
        4,
        &[
            0.9999, 0.1009, -0.0001, -0.0005, -0.0018, 1.0160, -0.0025, -0.0086, 0.0, 0.0008,
            0.9999, 0.0996, -0.0014, 0.0149, -0.0024, 0.9926,
        ],
    )
}

fn sim_b() -> DMatrix<f64> {
    m(
        2,
        4,
        &[
            0.0028, 0.0603, -0.0017, -0.0309, -0.0017, -0.0291, 0.0028, 0.0619,
        ],
    )
    .transpose()
}

fn sim_p() -> DMatrix<f64> {
    m(
        4,
        4,
        &[
            0.0679, 0.0671, 0.0028, 0.0056, 0.0671, 0.1802, 0.0236, 0.0330, 0.0028, 0.0236, 0.0601,
            0.0466, 0.0056, 0.0330, 0.0466, 0.1130,
        ],
    )
}

fn sim_l() -> DMatrix<f64> {
    m(
        2,
        4,
        &[
            -0.6162, -1.9897, -0.3997, -0.8999, 0.0297, -0.8025, -0.9550, -1.5374,
        ],
    )
}

// Published design for the physical quadrotor.
fn phys_p() -> DMatrix<f64> {
    m(
        4,
        4,
        &[
            0.2790, 0.1231, -0.0078, -0.0028, 0.1231, 0.1286, 0.0103, 0.0027, -0.0078, 0.0103,
            0.2577, 0.0995, -0.0028, 0.0027, 0.0995, 0.1028,
        ],
    )
}

fn phys_l() -> DMatrix<f64> {
    m(
        2,
        4,
        &[
            -2.6987, -2.4831, -0.1247, -0.1870, -0.2101, -0.4243, -2.7680, -2.1569,
        ],
    )
}

fn published_contraction() -> Outcome {
    let a_bl = sim_a() + sim_b() * sim_l();
    let p = sim_p();
    let lhs = a_bl.transpose() * &p * &a_bl - &p * 0.9251;
    let lmax = lhs.symmetric_eigenvalues().max();
    let norm = p.symmetric_eigenvalues().amax();
    ensure(
        lmax <= 1e-2 * norm,
        format!(
            "lambda_max = {lmax:.3e}, bound 1e-2*||P|| = {:.3e}",
            1e-2 * norm
        ),
    )
}

fn published_constraints() -> Outcome {
    let cases = [
        ("simulated", sim_p(), sim_l(), 5.0, 7.0, 5.0),
        ("physical", phys_p(), phys_l(), 2.5, 7.0, 7.0),
    ];
    let mut details = Vec::new();
    let mut ok = true;
    for (name, p, l, x, v, u) in cases {
        let c = PolytopeConstraints::symmetric_boxes(&[x, v, x, v], &[u, u])
            .map_err(|e| e.to_string())?;
        let margins = check_constraints(&p, &l, &c).map_err(|e| e.to_string())?;
        let worst = margins
            .iter()
            .map(|g| g.value)
            .fold(f64::NEG_INFINITY, f64::max);
        ok &= worst <= 1.0 + 1e-2 && margins.len() == 12;
        details.push(format!("{name}: worst margin {worst:.5}"));
    }
    ensure(ok, details.join(", "))
}

fn synthetic_pipeline() -> Outcome {
    let config = DemoConfig::default();
    let outcome = run_demo(&config, &SynthesisConfig::default()).map_err(|e| e.to_string())?;
    let p_star = outcome.pci.p_star;
    let r = &outcome.report;
    let detail = format!(
        "N = {}, p* = {p_star:.6}, {} rollouts T = {}: min_k containment {:.4}, all-time safety {:.4}",
        outcome.data.len(),
        r.n_rollouts,
        r.horizon,
        r.min_k_containment.estimate,
        r.all_time_safety.estimate
    );
    ensure(
        outcome.data.len() == 500
            && r.n_rollouts == 10_000
            && r.horizon == 100
            && p_star >= 0.9
            && r.min_k_containment.estimate >= p_star
            && r.all_time_safety.estimate >= 0.99,
        detail,
    )
}

/// Posterior of output `i` by inverting the joint covariance of
/// `(y_1..y_N, g(x*))` and reading off the conditional from the precision.
fn joint_conditioning(
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    query: &[f64],
    s: f64,
    ell: f64,
    noise: f64,
) -> (f64, f64) {
    let n = z.nrows();
    let k = |a: &[f64], b: &[f64]| {
        s * (-a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / (ell * ell)).exp()
    };
    let row = |j: usize| z.row(j).iter().copied().collect::<Vec<_>>();
    let mut joint = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            joint[(i, j)] = k(&row(i), &row(j)) + if i == j { noise } else { 0.0 };
        }
        joint[(i, n)] = k(&row(i), query);
        joint[(n, i)] = joint[(i, n)];
    }
    joint[(n, n)] = s;
    let lambda = joint.try_inverse().expect("joint covariance is invertible");
    let var = 1.0 / lambda[(n, n)];
    let mean = -(0..n).map(|j| lambda[(n, j)] * y[j]).sum::<f64>() * var;
    (mean, var)
}

fn gp_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, mi) = (2, 1);
        let count = rng.random_range(1..=5);
        let x = DMatrix::from_fn(count, n, |_, _| rng.random_range(-1.0..1.0));
        let u = DMatrix::from_fn(count, mi, |_, _| rng.random_range(-1.0..1.0));
        let xp = DMatrix::from_fn(count, n, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(n, mi, |_, _| rng.random_range(-1.0..1.0));
        let q = DVector::from_fn(n, |_, _| rng.random_range(0.01..0.5));
        let params: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(0.1..2.0), rng.random_range(0.3..2.0)))
            .collect();
        let kernels = params
            .iter()
            .map(|&(s, l)| SquaredExpKernel::isotropic(s, l, n + mi))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let data = Dataset::new(x.clone(), u.clone(), xp.clone()).map_err(|e| e.to_string())?;
        let model = GpssmModel::new(a.clone(), b.clone(), q.clone(), kernels, data)
            .map_err(|e| e.to_string())?;
        let z = DMatrix::from_fn(
            count,
            n + mi,
            |r, c| if c < n { x[(r, c)] } else { u[(r, c - n)] },
        );
        let residual = &xp - &x * a.transpose() - &u * b.transpose();
        for _ in 0..5 {
            let xs = DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5));
            let us = DVector::from_fn(mi, |_, _| rng.random_range(-1.5..1.5));
            let post = model.posterior(&xs, &us).map_err(|e| e.to_string())?;
            let query: Vec<f64> = xs.iter().chain(us.iter()).copied().collect();
            let base = &a * &xs + &b * &us;
            for i in 0..n {
                let y = residual.column(i).into_owned();
                let (mean, var) =
                    joint_conditioning(&z, &y, &query, params[i].0, params[i].1, q[i]);
                worst = worst
                    .max((post.mean[i] - base[i] - mean).abs())
                    .max((post.variance[i] - var).abs());
            }
        }
    }
    ensure(
        worst <= 1e-8,
        format!("largest moment difference {worst:.3e} over 20 datasets"),
    )
}

fn random_shape(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&g * g.transpose() + DMatrix::identity(dim, dim) * 0.1) * scale
}

fn lmi_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let settings = SolverSettings {
        recheck_tolerance: 1e-9,
        ..Default::default()
    };
    let alphas: Vec<f64> = (1..10).map(|k| k as f64 / 10.0).collect();
    let (mut certified, mut failures, mut inconclusive) = (0, 0, 0);
    for _ in 0..50 {
        let a0 = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let radius = a0
            .complex_eigenvalues()
            .iter()
            .map(|e| e.norm())
            .fold(0.0, f64::max);
        let a = a0 * (rng.random_range(0.2..1.1) / radius);
        let (kd, kv) = (rng.random_range(1..=2), rng.random_range(1..=2));
        let b = DMatrix::from_fn(2, kd, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(2, kv, |_, _| rng.random_range(-1.0..1.0));
        // Zero-mean channels: with the set centered at the origin, nonzero
        // means leave the LMI without a strict interior.
        let mut channel = |k: usize| {
            let scale = rng.random_range(1e-3..5e-2);
            Ellipsoid::centered(random_shape(&mut rng, k, scale))
        };
        let (d_set, v_set) = (
            channel(kd).map_err(|e| e.to_string())?,
            channel(kv).map_err(|e| e.to_string())?,
        );
        let sys = DisturbedLinearSystem::new(a, b, c, d_set, v_set).map_err(|e| e.to_string())?;
        let center = DVector::zeros(2);
        for &alpha in &alphas {
            let problem = build_ris_lmi(&sys, &center, alpha).map_err(|e| e.to_string())?;
            let out = solve(&problem, &settings).map_err(|e| e.to_string())?;
            match out.status {
                SolveStatus::Feasible => {
                    let p = out.value("P").expect("certificate").clone();
                    certified += 1;
                    if !sampled_invariance_oracle(&sys, &center, &p, 10_000, &mut rng)
                        .map_err(|e| e.to_string())?
                    {
                        failures += 1;
                    }
                    break;
                }
                SolveStatus::Infeasible => {}
                _ => inconclusive += 1,
            }
        }
    }
    ensure(
        failures == 0 && certified > 0,
        format!("{certified} of 50 instances certified, {failures} oracle violations, {inconclusive} inconclusive solves"),
    )
}

fn standardized_draw(family: usize, rng: &mut ChaCha8Rng, t3: &StudentT<f64>) -> f64 {
    match family {
        0 => rng.sample(StandardNormal),
        1 => rng.random_range(-3f64.sqrt()..3f64.sqrt()),
        2 => {
            let e: f64 = rng.sample(Exp1);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            sign * e / 2f64.sqrt()
        }
        3 => {
            if rng.random_bool(0.5) {
                1.0
            } else {
                -1.0
            }
        }
        _ => t3.sample(rng) / 3f64.sqrt(),
    }
}

fn chebyshev_coverage() -> Outcome {
    let names = ["gaussian", "uniform", "laplace", "two-point", "student-t3"];
    let t3 = StudentT::new(3.0).expect("valid degrees of freedom");
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let dim = 3;
    let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
    let cov = random_shape(&mut rng, dim, 0.5);
    let root = cov.clone().cholesky().expect("positive definite").l();
    let mut worst = (f64::INFINITY, "", 0.0);
    let mut ok = true;
    for (family, name) in names.iter().enumerate() {
        for p in [0.5, 0.9] {
            let region = chebyshev_region(&mean, &cov, p).map_err(|e| e.to_string())?;
            let mut hits = 0usize;
            let total = 100_000;
            for _ in 0..total {
                let z = DVector::from_fn(dim, |_, _| standardized_draw(family, &mut rng, &t3));
                let x = &mean + &root * z;
                hits += region.contains(&x).map_err(|e| e.to_string())? as usize;
            }
            let coverage = hits as f64 / total as f64;
            ok &= coverage >= p;
            if coverage - p < worst.0 {
                worst = (coverage - p, name, p);
            }
        }
    }
    ensure(
        ok,
        format!(
            "smallest coverage surplus {:.4} ({} at p = {})",
            worst.0, worst.1, worst.2
        ),
    )
}

fn scalar_margin_iff() -> Outcome {
    let (mut checked, mut skipped, mut disagreements) = (0, 0, Vec::new());
    for ie in 1..20 {
        let eta = ie as f64 * 0.05;
        for theta in [1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0] {
            for iw in 0..=40 {
                let w = 10f64.powf(-4.0 + 0.2 * iw as f64);
                let excess = scalar_worst_case_excess(w, eta, theta);
                if excess.abs() <= 1e-10 {
                    skipped += 1;
                    continue;
                }
                let implemented =
                    scalar_margin_satisfied(w, eta, theta).map_err(|e| e.to_string())?;
                checked += 1;
                if implemented != (excess <= 0.0) {
                    disagreements.push(format!("(eta {eta}, theta {theta}, W {w:.3e})"));
                }
            }
        }
    }
    ensure(
        disagreements.is_empty(),
        format!("{checked} grid points agree, {skipped} within 1e-10 of the boundary; mismatches: {disagreements:?}"),
    )
}

fn bisection_iterations() -> Outcome {
    let result = bisect(0.0, 1.0, 0.5, 1e-3, |p| (p <= 0.7).then_some(()));
    let p_star = result.best.map(|(p, _)| p).unwrap_or(f64::NAN);
    ensure(
        result.iterations == 10
            && (p_star - 0.7).abs() <= 1e-3
            && result.p_up - result.p_low <= 1e-3,
        format!("p* = {p_star:.6} after {} iterations", result.iterations),
    )
}

fn monotonicity() -> Outcome {
    let settings = SolverSettings::default();
    let samples = [0.0, 0.2, 0.4, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99];
    let (mut passed, mut mixed) = (0, 0);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = 2;
        let a = DMatrix::from_fn(
            n,
            n,
            |i, j| if i == j { 1.0 } else { 0.0 } + rng.random_range(-0.3..0.3),
        );
        let b = DMatrix::from_fn(n, 1, |_, _| rng.random_range(-1.0..1.0));
        let bounds = UncertaintyBounds::new(
            rng.random_range(0.0..1e-3),
            DVector::from_fn(n, |_, _| rng.random_range(1e-6..1e-4)),
            DVector::from_fn(n, |_, _| rng.random_range(1e-6..1e-4)),
        )
        .map_err(|e| e.to_string())?;
        let xb: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        let constraints = PolytopeConstraints::symmetric_boxes(&xb, &[rng.random_range(0.5..3.0)])
            .map_err(|e| e.to_string())?;
        let eta = rng.random_range(0.3..0.95);
        if feasibility_is_monotone_check(&a, &b, &bounds, &constraints, eta, &samples, &settings)
            .map_err(|e| e.to_string())?
        {
            passed += 1;
        }
        let first = pcis_core::synthesis::design_feasible(
            &a,
            &b,
            &bounds,
            &constraints,
            0.0,
            eta,
            &settings,
        );
        let last = pcis_core::synthesis::design_feasible(
            &a,
            &b,
            &bounds,
            &constraints,
            0.99,
            eta,
            &settings,
        );
        if matches!((first, last), (Ok(true), Ok(false))) {
            mixed += 1;
        }
    }
    ensure(
        passed == 20,
        format!("{passed} of 20 instances monotone ({mixed} change from feasible to infeasible inside the samples)"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        (
            "published contraction",
            Duration::from_secs(1),
            published_contraction,
        ),
        (
            "published constraint margins",
            Duration::from_secs(1),
            published_constraints,
        ),
        (
            "synthetic quadrotor pipeline",
            Duration::from_secs(300),
            synthetic_pipeline,
        ),
        (
            "GP posterior vs joint conditioning",
            Duration::from_secs(10),
            gp_oracle,
        ),
        (
            "LMI soundness sweep",
            Duration::from_secs(120),
            lmi_soundness,
        ),
        (
            "Chebyshev coverage",
            Duration::from_secs(30),
            chebyshev_coverage,
        ),
        (
            "scalar disturbance margin",
            Duration::from_secs(1),
            scalar_margin_iff,
        ),
        (
            "bisection convergence",
            Duration::from_secs(1),
            bisection_iterations,
        ),
        (
            "feasibility monotonicity",
            Duration::from_secs(300),
            monotonicity,
        ),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok(d) if elapsed <= *budget => (true, d),
            Ok(d) => (false, format!("{d}; took {elapsed:.2?}, budget {budget:?}")),
            Err(d) => (false, d),
        };
        failed += usize::from(!ok);
        println!(
            "criterion {}: {} [{name}] {detail} ({elapsed:.2?})",
            i + 1,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
