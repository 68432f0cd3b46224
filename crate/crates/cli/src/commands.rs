use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use pcis_core::gpssm::{
    read_trajectory_csv, read_transitions_csv, write_transitions_csv, ModelDocument,
};
use pcis_core::invariance::ConstraintsDocument;
use pcis_core::json::matrix_from_rows;
use pcis_core::synthesis::uniform_eta_grid;
use pcis_core::{
    monte_carlo, recheck_certificate, run_demo, synthesize as run_synthesis, verify_controller,
    write_trajectories_csv, DemoConfig, FitOptions, GpssmModel, GroundTruth, InitialState,
    McReport, PciDocument, PhiRule, Plant, PolytopeConstraints, QuadrotorParams, RolloutConfig,
    SynthesisConfig, UncertaintyBounds, Verdict, VerifyOptions,
};

use crate::manifest::{write_json, RunManifest};
use crate::{
    CliError, Context, DemoArgs, DynamicsArg, FitArgs, PhiRuleArg, SimulateArgs, SynthesizeArgs,
    VerifyArgs,
};

type CliResult<T = ()> = Result<T, CliError>;

/// On-disk PCI file: the certificate plus the constraints it was designed for.
#[derive(Debug, Serialize, Deserialize)]
struct PciFile {
    #[serde(flatten)]
    pci: PciDocument,
    #[serde(default)]
    constraints: Option<ConstraintsDocument>,
}

fn parse<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> CliResult<T> {
    serde_json::from_slice(bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn phi_rule(arg: PhiRuleArg) -> PhiRule {
    match arg {
        PhiRuleArg::Guaranteed => PhiRule::Guaranteed,
        PhiRuleArg::Constant => PhiRule::Constant,
    }
}

/// The linear mean and uncertainty bounds, which is all synthesis needs.
struct LinearPart {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    bounds: UncertaintyBounds,
}

impl LinearPart {
    fn from_document(doc: &ModelDocument) -> CliResult<Self> {
        Ok(Self {
            a: matrix_from_rows(&doc.a, doc.n, "A")?,
            b: matrix_from_rows(&doc.b, doc.m, "B")?,
            bounds: UncertaintyBounds::new(
                doc.phi,
                DVector::from_vec(doc.sigma_hat_diag.clone()),
                DVector::from_vec(doc.q_diag.clone()),
            )?,
        })
    }
}

fn load_constraints(
    manifest: &mut RunManifest,
    path: Option<&Path>,
    embedded: Option<&ConstraintsDocument>,
) -> CliResult<PolytopeConstraints> {
    match (path, embedded) {
        (Some(p), _) => {
            let bytes = manifest.read_input(p)?;
            Ok(PolytopeConstraints::from_document(&parse(&bytes, p)?)?)
        }
        (None, Some(doc)) => Ok(PolytopeConstraints::from_document(doc)?),
        (None, None) => Err(CliError::Usage(
            "the PCI file stores no constraints; pass --constraints".into(),
        )),
    }
}

pub fn fit(ctx: &Context, args: &FitArgs) -> CliResult {
    let mut manifest = RunManifest::new("fit", ctx.seed, args)?;
    let bytes = manifest.read_input(&args.data)?;
    let data = if args.trajectory {
        read_trajectory_csv(bytes.as_slice())?
    } else {
        read_transitions_csv(bytes.as_slice())?
    };
    let n_data = data.len();
    let options = FitOptions {
        restarts: args.restarts,
        seed: ctx.seed,
        ard: args.ard,
        max_iterations: args.max_iterations,
    };
    let (model, report) = GpssmModel::fit(data, &options)?;
    for (i, d) in report.kernels.diagnostics.iter().enumerate() {
        for w in &d.warnings {
            eprintln!("warning: output {}: {w}", i + 1);
        }
    }
    let doc = ModelDocument::from_model(&model, phi_rule(args.phi_rule), None);
    ctx.stamp(&mut manifest);
    write_json(&args.out, &doc, &manifest)?;
    println!(
        "fitted {} outputs on {n_data} transitions, phi = {:.6e}; wrote {}",
        doc.n,
        doc.phi,
        args.out.display()
    );
    Ok(())
}

pub fn synthesize(ctx: &Context, args: &SynthesizeArgs) -> CliResult {
    let mut manifest = RunManifest::new("synthesize", ctx.seed, args)?;
    let bytes = manifest.read_input(&args.model)?;
    let lin = LinearPart::from_document(&parse(&bytes, &args.model)?)?;
    let constraints = load_constraints(&mut manifest, Some(&args.constraints), None)?;
    let config = SynthesisConfig {
        delta: args.delta,
        eta_grid: uniform_eta_grid(args.eta_grid),
        p_init: args.p_init,
        jobs: ctx.jobs,
        record_timing: ctx.record_timing,
        ..Default::default()
    };
    let result = run_synthesis(&lin.a, &lin.b, &lin.bounds, &constraints, &config)?;
    let file = PciFile {
        pci: result.to_document(),
        constraints: Some(constraints.to_document()),
    };
    ctx.stamp(&mut manifest);
    write_json(&args.out, &file, &manifest)?;
    println!(
        "p* = {:.6}, eta* = {:.6}, log det P^-1 = {:.6}; wrote {}",
        result.p_star,
        result.eta_star,
        result.logdet,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct VerifyOutput {
    recheck_passed: bool,
    recheck_failures: Vec<String>,
    contraction_excess: f64,
    disturbance_margin: Option<f64>,
    verdict: Verdict,
    alpha: Option<f64>,
    violations: Vec<String>,
}

pub fn verify(ctx: &Context, args: &VerifyArgs) -> CliResult {
    let mut manifest = RunManifest::new("verify", ctx.seed, args)?;
    let bytes = manifest.read_input(&args.model)?;
    let lin = LinearPart::from_document(&parse(&bytes, &args.model)?)?;
    let bytes = manifest.read_input(&args.pci)?;
    let file: PciFile = parse(&bytes, &args.pci)?;
    let constraints = load_constraints(
        &mut manifest,
        args.constraints.as_deref(),
        file.constraints.as_ref(),
    )?;
    let p = file.pci.certificate()?;
    let l = file.pci.gain()?;
    let (p_star, eta) = (file.pci.p_star, file.pci.eta_star);
    let check = recheck_certificate(
        &lin.a,
        &lin.b,
        &lin.bounds,
        &constraints,
        p_star,
        eta,
        &p,
        &l,
    )?;
    let report = verify_controller(
        &lin.bounds,
        &lin.a,
        &lin.b,
        &l,
        p_star,
        Some(&constraints),
        &VerifyOptions::default(),
    )?;
    let out = VerifyOutput {
        recheck_passed: check.passed(),
        recheck_failures: check.failures(),
        contraction_excess: check.contraction_excess,
        disturbance_margin: check.disturbance_margin,
        verdict: report.verdict,
        alpha: report.alpha,
        violations: report.violations().map(|m| m.describe()).collect(),
    };
    if let Some(path) = &args.out {
        ctx.stamp(&mut manifest);
        write_json(path, &out, &manifest)?;
    }
    let verdict = serde_json::to_value(out.verdict).unwrap_or_default();
    match out.alpha {
        Some(alpha) => println!(
            "closed-loop invariance LMI: {} (alpha = {alpha:.4})",
            verdict.as_str().unwrap_or("?")
        ),
        None => println!(
            "closed-loop invariance LMI: {}",
            verdict.as_str().unwrap_or("?")
        ),
    }
    for v in &out.violations {
        println!("  {v}");
    }
    if out.recheck_passed {
        println!("certificate recheck at p = {p_star:.6}, eta = {eta:.6}: passed");
        Ok(())
    } else {
        Err(CliError::Failure(format!(
            "certificate recheck at p = {p_star:.6}, eta = {eta:.6} failed: {}",
            out.recheck_failures.join("; ")
        )))
    }
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    dynamics: DynamicsArg,
    quadrotor: Option<QuadrotorParams>,
    noise_std: Option<f64>,
    rollout: &'a RolloutConfig,
    report: &'a McReport,
}

pub fn simulate(ctx: &Context, args: &SimulateArgs) -> CliResult {
    let mut manifest = RunManifest::new("simulate", ctx.seed, args)?;
    let bytes = manifest.read_input(&args.pci)?;
    let file: PciFile = parse(&bytes, &args.pci)?;
    let constraints = load_constraints(
        &mut manifest,
        args.constraints.as_deref(),
        file.constraints.as_ref(),
    )?;
    let p = file.pci.certificate()?;
    let l = file.pci.gain()?;
    let (plant, quadrotor, noise_std): (Box<dyn Plant>, _, _) = match args.dynamics {
        DynamicsArg::Posterior => {
            let path = args
                .model
                .as_ref()
                .ok_or_else(|| CliError::Usage("posterior dynamics need --model".into()))?;
            let bytes = manifest.read_input(path)?;
            let doc: ModelDocument = parse(&bytes, path)?;
            (Box::new(doc.to_model(&base_dir(path))?), None, None)
        }
        DynamicsArg::Quadrotor => {
            let params = QuadrotorParams {
                dt: 0.1,
                drag: args.drag,
                saturation: args.saturation,
            };
            let plant = GroundTruth::quadrotor(params, DVector::from_element(4, args.noise_std))?;
            (Box::new(plant), Some(params), Some(args.noise_std))
        }
    };
    let config = RolloutConfig {
        horizon: args.horizon,
        n_rollouts: args.rollouts,
        initial: match &args.x0 {
            Some(x0) => InitialState::Fixed(x0.clone()),
            None => InitialState::UniformInEllipsoid,
        },
        seed: ctx.seed,
        jobs: ctx.jobs,
    };
    let report = monte_carlo(plant.as_ref(), &p, &l, &constraints, &config)?;
    if let Some(csv) = &args.csv {
        let f = File::create(csv)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", csv.display())))?;
        let ids = 0..args.csv_rollouts.min(args.rollouts);
        write_trajectories_csv(plant.as_ref(), &p, &l, &constraints, &config, ids, f)?;
    }
    let out = SimulateOutput {
        dynamics: args.dynamics,
        quadrotor,
        noise_std,
        rollout: &config,
        report: &report,
    };
    ctx.stamp(&mut manifest);
    write_json(&args.out, &out, &manifest)?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &McReport) {
    let rows = [
        ("min_k containment", &r.min_k_containment),
        ("input admissibility", &r.input_admissibility),
        ("all-time safety", &r.all_time_safety),
        ("all-time containment", &r.all_time_containment),
    ];
    println!("{} rollouts, horizon {}", r.n_rollouts, r.horizon);
    for (name, m) in rows {
        println!(
            "  {name:<22} {:.4}  [{:.4}, {:.4}]",
            m.estimate, m.lower, m.upper
        );
    }
    if r.diverged > 0 {
        println!("  {} rollouts diverged", r.diverged);
    }
}

#[derive(Serialize)]
struct DemoReport<'a> {
    p_star: f64,
    eta_star: f64,
    report: &'a McReport,
}

pub fn demo(ctx: &Context, args: &DemoArgs) -> CliResult {
    let config = DemoConfig {
        n_transitions: args.transitions,
        n_rollouts: args.rollouts,
        horizon: args.horizon,
        restarts: args.restarts,
        seed: ctx.seed,
        ..Default::default()
    };
    let mut manifest = RunManifest::new("demo-quadrotor", ctx.seed, &config)?;
    let synthesis = SynthesisConfig {
        jobs: ctx.jobs,
        record_timing: ctx.record_timing,
        ..Default::default()
    };
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let outcome = run_demo(&config, &synthesis)?;
    ctx.stamp(&mut manifest);
    let dir = &args.out_dir;
    let data_path = dir.join("data.csv");
    let f = File::create(&data_path)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", data_path.display())))?;
    write_transitions_csv(&outcome.data, f)?;
    let constraints = config.constraints()?;
    write_json(
        &dir.join("constraints.json"),
        &constraints.to_document(),
        &manifest,
    )?;
    let model = ModelDocument::from_model(&outcome.model, PhiRule::Guaranteed, None);
    write_json(&dir.join("model.json"), &model, &manifest)?;
    let pci = PciFile {
        pci: outcome.pci.to_document(),
        constraints: Some(constraints.to_document()),
    };
    write_json(&dir.join("pci.json"), &pci, &manifest)?;
    let report = DemoReport {
        p_star: outcome.pci.p_star,
        eta_star: outcome.pci.eta_star,
        report: &outcome.report,
    };
    write_json(&dir.join("report.json"), &report, &manifest)?;
    println!(
        "phi = {:.4e}, p* = {:.6}, eta* = {:.6}",
        model.phi, outcome.pci.p_star, outcome.pci.eta_star
    );
    print_report(&outcome.report);
    println!(
        "wrote data.csv, model.json, constraints.json, pci.json, report.json to {}",
        dir.display()
    );
    Ok(())
}
