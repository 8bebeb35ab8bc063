//! Execution of loaded run plans. Every command writes its artifacts before
//! reporting a property failure, so failing runs still leave their evidence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use hybridflow::brackets::{
    bracket_closure, commutator_sweep, hybrid_bracket, random_unit_state,
};
use hybridflow::dynamics::{
    tangibility_experiment, trajectory_with, PerturbationTarget, TrajectoryOptions,
};
use hybridflow::ensemble::{liouville_propagate_with, LiouvilleOptions};
use hybridflow::io::{
    ensemble_series_csv, ensemble_summary, format_float, trajectory_csv, EnsembleSummary,
};
use hybridflow::models::{bilinear_moment_reference, truncation_warning};
use hybridflow::observables::{
    position_momentum_matrices, AcTerm, AlmostClassicalObservable, ClassicalObservable, PolyTerm,
    QuadraticObservable,
};
use hybridflow::phase_space::ClassicalPoint;
use hybridflow::HybridPoint;

use crate::config::{
    numerical, BracketCheckPlan, CliError, ClosureCheckPlan, EnsemblePlan, NumericsPlan,
    PeresTernoPlan, Plan, SimulatePlan, TangibilityPlan,
};
use crate::output::{to_json_precise, write_atomic};

const COMMUTATOR_TOL: f64 = 1e-10;
const MOMENT_TOL: f64 = 1e-8;
const CLOSURE_TOL: f64 = 1e-6;
const CLOSURE_CONSTRAINT_TOL: f64 = 1e-10;
const TANGIBILITY_CONSTRAINT_TOL: f64 = 1e-10;

pub fn run(plan: Plan, out_dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| numerical(format!("cannot create {}: {e}", out_dir.display())))?;
    match plan {
        Plan::Simulate(p) => run_simulate(p, out_dir),
        Plan::Ensemble(p) => run_ensemble(p, out_dir),
        Plan::BracketCheck(p) => run_bracket_check(p, out_dir),
        Plan::PeresTerno(p) => run_peres_terno(p, out_dir),
        Plan::Tangibility(p) => run_tangibility(p, out_dir),
        Plan::ClosureCheck(p) => run_closure_check(p, out_dir),
    }
}

fn write_text(out_dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    write_atomic(out_dir, name, contents)
        .map_err(|e| numerical(format!("cannot write {name}: {e}")))
}

fn write_json<T: Serialize>(out_dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let text = to_json_precise(value).map_err(|e| numerical(format!("cannot encode {name}: {e}")))?;
    write_text(out_dir, name, &text)
}

fn trajectory_options(numerics: &NumericsPlan) -> TrajectoryOptions {
    TrajectoryOptions {
        record_every: numerics.record_every,
        renormalize: numerics.renormalize,
        solver: numerics.solver,
    }
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Serialize)]
struct SimulateSummary {
    command: &'static str,
    model: String,
    dt: f64,
    t_total: f64,
    steps: usize,
    recorded: usize,
    final_energy: f64,
    final_constraint: f64,
    max_energy_deviation: f64,
    max_constraint_deviation: f64,
    renormalizations: usize,
    truncation_warning: Option<String>,
    out_of_range_records: usize,
}

fn run_simulate(plan: SimulatePlan, out_dir: &Path) -> Result<(), CliError> {
    let warning =
        truncation_warning(&plan.model, plan.initial.quantum()).map_err(numerical)?;
    let traj = trajectory_with(
        &plan.model,
        &plan.initial,
        plan.numerics.t_total,
        plan.numerics.dt,
        &trajectory_options(&plan.numerics),
    )
    .map_err(numerical)?;

    let out_of_range = traj
        .states
        .iter()
        .filter(|h| !plan.model.within_validated_range(h.classical()))
        .count();
    let summary = SimulateSummary {
        command: "simulate",
        model: plan.model_kind,
        dt: plan.numerics.dt,
        t_total: plan.numerics.t_total,
        steps: (plan.numerics.t_total / plan.numerics.dt).round() as usize,
        recorded: traj.times.len(),
        final_energy: *traj.energy.last().expect("trajectory records the final step"),
        final_constraint: *traj.constraint.last().expect("trajectory records the final step"),
        max_energy_deviation: traj.max_energy_deviation,
        max_constraint_deviation: traj.max_constraint_deviation,
        renormalizations: traj.metadata.renormalizations,
        truncation_warning: warning.clone(),
        out_of_range_records: out_of_range,
    };

    write_text(out_dir, &plan.trajectory_csv, &trajectory_csv(&traj))?;
    write_json(out_dir, &plan.summary_json, &summary)?;
    if let Some(w) = &warning {
        eprintln!("warning: {w}");
    }
    println!(
        "simulate: {} recorded points, max |H - H0| {:.3e}, max |C - 1| {:.3e}",
        summary.recorded, summary.max_energy_deviation, summary.max_constraint_deviation
    );
    println!("wrote {} and {}", plan.trajectory_csv, plan.summary_json);
    Ok(())
}

// ---------------------------------------------------------------------------
// ensemble

#[derive(Serialize)]
struct EnsembleOutput {
    command: &'static str,
    seed: u64,
    #[serde(flatten)]
    summary: EnsembleSummary,
}

fn run_ensemble(plan: EnsemblePlan, out_dir: &Path) -> Result<(), CliError> {
    let opts = LiouvilleOptions {
        record_every: plan.numerics.record_every,
        solver: plan.numerics.solver,
        observables: plan.observables.clone(),
    };
    let run = liouville_propagate_with(
        &plan.model,
        &plan.density,
        &plan.sampler,
        plan.numerics.t_total,
        plan.numerics.dt,
        &opts,
    )
    .map_err(numerical)?;

    let summary = ensemble_summary(&run);
    let positivity_pass = summary.monitors.positivity_pass;
    let min_density = summary.monitors.min_density;
    let output = EnsembleOutput {
        command: "ensemble",
        seed: plan.sampler.seed,
        summary,
    };

    write_text(out_dir, &plan.series_csv, &ensemble_series_csv(&run))?;
    write_json(out_dir, &plan.summary_json, &output)?;
    if let Some(prefix) = &plan.samples_csv_prefix {
        for sample in &run.samples {
            let name = format!("{prefix}_{:04}.csv", sample.index);
            write_text(out_dir, &name, &trajectory_csv(&sample.trajectory))?;
        }
        println!(
            "wrote {} per-sample trajectories with prefix {prefix}",
            run.samples.len()
        );
    }
    println!(
        "ensemble: {} samples, max density drift {:.3e}, normalization residual {:.3e}",
        run.samples.len(),
        run.max_density_drift,
        run.normalization_residual
    );
    println!("wrote {} and {}", plan.series_csv, plan.summary_json);

    if !positivity_pass {
        return Err(CliError::Property(format!(
            "positivity/normalization report failed (min density {min_density:.3e})"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bracket-check

#[derive(Serialize)]
struct BracketCheckSummary {
    command: &'static str,
    pairs: usize,
    dim: usize,
    seed: u64,
    max_commutator_residual: f64,
    worst_pair: usize,
    tolerance: f64,
    pass: bool,
}

fn run_bracket_check(plan: BracketCheckPlan, out_dir: &Path) -> Result<(), CliError> {
    let report = commutator_sweep(plan.pairs, plan.dim, plan.seed).map_err(numerical)?;
    let summary = BracketCheckSummary {
        command: "bracket-check",
        pairs: plan.pairs,
        dim: plan.dim,
        seed: plan.seed,
        max_commutator_residual: report.max_residual,
        worst_pair: report.worst_pair,
        tolerance: COMMUTATOR_TOL,
        pass: report.max_residual <= COMMUTATOR_TOL,
    };
    write_json(out_dir, &plan.summary_json, &summary)?;
    println!(
        "bracket-check: max residual {:.3e} over {} pairs at dim {} (tolerance {:.0e}): {}",
        summary.max_commutator_residual,
        summary.pairs,
        summary.dim,
        summary.tolerance,
        if summary.pass { "pass" } else { "FAIL" }
    );
    println!("wrote {}", plan.summary_json);
    if !summary.pass {
        return Err(CliError::Property(format!(
            "max commutator residual {:.3e} exceeds {:.0e}",
            summary.max_commutator_residual, summary.tolerance
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// benchmark-peres-terno

#[derive(Serialize)]
struct PeresTernoSummary {
    command: &'static str,
    dt: f64,
    t_total: f64,
    recorded: usize,
    max_deviation: f64,
    tolerance: f64,
    pass: bool,
    max_truncation_tail: f64,
    max_constraint_deviation: f64,
}

fn run_peres_terno(plan: PeresTernoPlan, out_dir: &Path) -> Result<(), CliError> {
    let (x_hat, p_hat) = position_momentum_matrices(plan.model.basis()).map_err(numerical)?;
    let x_obs = QuadraticObservable::new(x_hat);
    let p_obs = QuadraticObservable::new(p_hat);
    let qx0 = x_obs.expectation(plan.initial.quantum()).map_err(numerical)?;
    let qp0 = p_obs.expectation(plan.initial.quantum()).map_err(numerical)?;
    let x0: Vec<f64> = plan.initial.classical().x().iter().copied().collect();
    let p0: Vec<f64> = plan.initial.classical().p().iter().copied().collect();
    let reference =
        bilinear_moment_reference(&plan.params, &x0, &p0, qx0, qp0).map_err(numerical)?;

    let traj = trajectory_with(
        &plan.model,
        &plan.initial,
        plan.numerics.t_total,
        plan.numerics.dt,
        &trajectory_options(&plan.numerics),
    )
    .map_err(numerical)?;

    let mut max_deviation = 0.0f64;
    let mut max_tail = 0.0f64;
    for (k, state) in traj.states.iter().enumerate() {
        let t = traj.times[k];
        let (x_ref, p_ref, qx_ref, qp_ref) = reference.evaluate(t);
        for i in 0..x_ref.len() {
            max_deviation = max_deviation.max((state.classical().x()[i] - x_ref[i]).abs());
            max_deviation = max_deviation.max((state.classical().p()[i] - p_ref[i]).abs());
        }
        let qx = x_obs.expectation(state.quantum()).map_err(numerical)?;
        let qp = p_obs.expectation(state.quantum()).map_err(numerical)?;
        max_deviation = max_deviation.max((qx - qx_ref).abs());
        max_deviation = max_deviation.max((qp - qp_ref).abs());
        max_tail = max_tail.max(
            plan.model
                .tail_occupation(state.quantum(), 3)
                .map_err(numerical)?,
        );
    }

    let summary = PeresTernoSummary {
        command: "benchmark-peres-terno",
        dt: plan.numerics.dt,
        t_total: plan.numerics.t_total,
        recorded: traj.times.len(),
        max_deviation,
        tolerance: MOMENT_TOL,
        pass: max_deviation <= MOMENT_TOL,
        max_truncation_tail: max_tail,
        max_constraint_deviation: traj.max_constraint_deviation,
    };
    write_json(out_dir, &plan.summary_json, &summary)?;
    if let Some(name) = &plan.trajectory_csv {
        write_text(out_dir, name, &trajectory_csv(&traj))?;
        println!("wrote {name}");
    }
    println!(
        "benchmark-peres-terno: max deviation {:.3e} from the two-oscillator reference (tolerance {:.0e}): {}",
        summary.max_deviation,
        summary.tolerance,
        if summary.pass { "pass" } else { "FAIL" }
    );
    println!("wrote {}", plan.summary_json);
    if !summary.pass {
        return Err(CliError::Property(format!(
            "max deviation {:.3e} exceeds {:.0e}",
            summary.max_deviation, summary.tolerance
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// tangibility

#[derive(Serialize)]
struct TangibilitySummary {
    command: &'static str,
    target: &'static str,
    index: usize,
    t0: f64,
    pre_segment_identical: bool,
    max_discontinuity: f64,
    jump_bound: f64,
    max_constraint_deviation: f64,
    constraint_tolerance: f64,
    pass: bool,
}

fn run_tangibility(plan: TangibilityPlan, out_dir: &Path) -> Result<(), CliError> {
    let report = tangibility_experiment(
        &plan.model,
        &plan.initial,
        &plan.perturbation,
        plan.numerics.t_total,
        plan.numerics.dt,
    )
    .map_err(numerical)?;

    let jump_bound = plan.perturbation.derivative_bound() * plan.numerics.dt + 1e-10;
    let pass = report.pre_segment_identical
        && report.max_discontinuity <= jump_bound
        && report.max_constraint_deviation <= TANGIBILITY_CONSTRAINT_TOL;
    let summary = TangibilitySummary {
        command: "tangibility",
        target: match plan.perturbation.target() {
            PerturbationTarget::Position => "position",
            PerturbationTarget::Momentum => "momentum",
        },
        index: plan.perturbation.index(),
        t0: plan.perturbation.t0(),
        pre_segment_identical: report.pre_segment_identical,
        max_discontinuity: report.max_discontinuity,
        jump_bound,
        max_constraint_deviation: report.max_constraint_deviation,
        constraint_tolerance: TANGIBILITY_CONSTRAINT_TOL,
        pass,
    };

    write_json(out_dir, &plan.summary_json, &summary)?;
    if let Some(name) = &plan.series_csv {
        let mut csv = String::from("t,z,z_reference\n");
        for (k, t) in report.times.iter().enumerate() {
            csv.push_str(&format_float(*t));
            csv.push(',');
            csv.push_str(&format_float(report.z_series[k]));
            csv.push(',');
            csv.push_str(&format_float(report.reference_series[k]));
            csv.push('\n');
        }
        write_text(out_dir, name, &csv)?;
        println!("wrote {name}");
    }
    println!(
        "tangibility: pre-onset identical {}, max jump {:.3e} (bound {:.3e}), max |C - 1| {:.3e}: {}",
        summary.pre_segment_identical,
        summary.max_discontinuity,
        summary.jump_bound,
        summary.max_constraint_deviation,
        if summary.pass { "pass" } else { "FAIL" }
    );
    println!("wrote {}", plan.summary_json);
    if !pass {
        return Err(CliError::Property(
            "perturbation response violates the smoothness or constraint bounds".into(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// closure-check

#[derive(Serialize)]
struct ClosureCheckSummary {
    command: &'static str,
    pairs: usize,
    points: usize,
    cl_dim: usize,
    levels: usize,
    seed: u64,
    max_closure_deviation: f64,
    closure_tolerance: f64,
    max_constraint_bracket: f64,
    constraint_tolerance: f64,
    pass: bool,
}

fn random_poly_term(cl_dim: usize, rng: &mut ChaCha8Rng) -> PolyTerm {
    let mut x_powers = vec![0u32; cl_dim];
    let mut p_powers = vec![0u32; cl_dim];
    let degree = rng.random_range(0..=2u32);
    for _ in 0..degree {
        let k = rng.random_range(0..cl_dim);
        if rng.random_bool(0.5) {
            x_powers[k] += 1;
        } else {
            p_powers[k] += 1;
        }
    }
    PolyTerm {
        coefficient: rng.random_range(-1.0..1.0),
        x_powers,
        p_powers,
    }
}

fn random_polynomial(cl_dim: usize, rng: &mut ChaCha8Rng) -> ClassicalObservable {
    let terms = (0..3).map(|_| random_poly_term(cl_dim, rng)).collect();
    ClassicalObservable::polynomial(cl_dim, terms).expect("generated polynomial terms are valid")
}

fn random_almost_classical(
    cl_dim: usize,
    qm_dim: usize,
    rng: &mut ChaCha8Rng,
) -> AlmostClassicalObservable {
    let n_terms = rng.random_range(1..=2usize);
    let terms = (0..n_terms)
        .map(|_| {
            let coeff = random_polynomial(cl_dim, rng);
            let n_pairs = rng.random_range(1..=2usize);
            let pairs = (0..n_pairs)
                .map(|_| (rng.random_range(0..qm_dim), rng.random_range(0..qm_dim)))
                .collect();
            AcTerm::new(coeff, pairs)
        })
        .collect();
    AlmostClassicalObservable::new(cl_dim, qm_dim, terms)
        .expect("generated almost-classical terms are valid")
}

fn random_hybrid_point(cl_dim: usize, qm_dim: usize, rng: &mut ChaCha8Rng) -> HybridPoint {
    let x: Vec<f64> = (0..cl_dim).map(|_| rng.random_range(-0.7..0.7)).collect();
    let p: Vec<f64> = (0..cl_dim).map(|_| rng.random_range(-0.7..0.7)).collect();
    let classical =
        ClassicalPoint::from_slices(&x, &p).expect("generated coordinates are finite");
    let quantum = random_unit_state(qm_dim, rng).expect("random unit states are valid");
    HybridPoint::new(classical, quantum)
}

fn run_closure_check(plan: ClosureCheckPlan, out_dir: &Path) -> Result<(), CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let constraint = AlmostClassicalObservable::constraint(plan.cl_dim, plan.levels);

    let mut max_closure = 0.0f64;
    let mut max_constraint = 0.0f64;
    for _ in 0..plan.pairs {
        let a = random_almost_classical(plan.cl_dim, plan.levels, &mut rng);
        let b = random_almost_classical(plan.cl_dim, plan.levels, &mut rng);
        let ab = bracket_closure(&a, &b).map_err(numerical)?;
        let ca = bracket_closure(&constraint, &a).map_err(numerical)?;
        for _ in 0..plan.points {
            let h = random_hybrid_point(plan.cl_dim, plan.levels, &mut rng);
            let symbolic = ab.evaluate(&h).map_err(numerical)?;
            let numeric = hybrid_bracket(&a, &b, &h).map_err(numerical)?.value;
            max_closure = max_closure.max((symbolic - numeric).abs());
            let direct = hybrid_bracket(&constraint, &a, &h).map_err(numerical)?.value;
            max_constraint = max_constraint.max(direct.abs());
            max_constraint = max_constraint.max(ca.evaluate(&h).map_err(numerical)?.abs());
        }
    }

    let pass = max_closure <= CLOSURE_TOL && max_constraint <= CLOSURE_CONSTRAINT_TOL;
    let summary = ClosureCheckSummary {
        command: "closure-check",
        pairs: plan.pairs,
        points: plan.points,
        cl_dim: plan.cl_dim,
        levels: plan.levels,
        seed: plan.seed,
        max_closure_deviation: max_closure,
        closure_tolerance: CLOSURE_TOL,
        max_constraint_bracket: max_constraint,
        constraint_tolerance: CLOSURE_CONSTRAINT_TOL,
        pass,
    };
    write_json(out_dir, &plan.summary_json, &summary)?;
    println!(
        "closure-check: max closure gap {:.3e} (tolerance {:.0e}), max constraint bracket {:.3e} (tolerance {:.0e}): {}",
        summary.max_closure_deviation,
        summary.closure_tolerance,
        summary.max_constraint_bracket,
        summary.constraint_tolerance,
        if summary.pass { "pass" } else { "FAIL" }
    );
    println!("wrote {}", plan.summary_json);
    if !pass {
        return Err(CliError::Property(
            "bracket closure deviates from the numeric hybrid bracket".into(),
        ));
    }
    Ok(())
}
