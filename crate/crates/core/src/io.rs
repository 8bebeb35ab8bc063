//! Plain-text rendering of trajectories and ensemble results.
//!
//! Floats print with 17 significant digits so a round trip through text
//! reproduces the exact bits.

use serde::Serialize;

use crate::dynamics::Trajectory;
use crate::ensemble::{positivity_normalization_report, EnsembleRun};

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn push_float(out: &mut String, v: f64) {
    out.push(',');
    out.push_str(&format_float(v));
}

fn clean_label(label: &str) -> String {
    label.replace([',', '\n'], ";")
}

/// CSV time series of one trajectory. Header:
/// `t,x_1..x_n,p_1..p_n,X_1..X_N,P_1..P_N,H_sigma,C`.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let (n, nq) = match traj.states.first() {
        Some(h) => (h.cl_dim(), h.qm_dim()),
        None => (0, 0),
    };
    let mut out = String::from("t");
    for k in 1..=n {
        out.push_str(&format!(",x_{k}"));
    }
    for k in 1..=n {
        out.push_str(&format!(",p_{k}"));
    }
    for i in 1..=nq {
        out.push_str(&format!(",X_{i}"));
    }
    for i in 1..=nq {
        out.push_str(&format!(",P_{i}"));
    }
    out.push_str(",H_sigma,C\n");

    for (k, h) in traj.states.iter().enumerate() {
        out.push_str(&format_float(traj.times[k]));
        for v in h.classical().x().iter() {
            push_float(&mut out, *v);
        }
        for v in h.classical().p().iter() {
            push_float(&mut out, *v);
        }
        for v in h.quantum().x().iter() {
            push_float(&mut out, *v);
        }
        for v in h.quantum().p().iter() {
            push_float(&mut out, *v);
        }
        push_float(&mut out, traj.energy[k]);
        push_float(&mut out, traj.constraint[k]);
        out.push('\n');
    }
    out
}

/// CSV of per-time ensemble averages: `t`, then a `mean_*`/`se_*` column
/// pair per observable.
pub fn ensemble_series_csv(run: &EnsembleRun) -> String {
    let mut out = String::from("t");
    for obs in &run.observables {
        let label = clean_label(&obs.label);
        out.push_str(&format!(",mean_{label},se_{label}"));
    }
    out.push('\n');
    for (k, t) in run.times.iter().enumerate() {
        out.push_str(&format_float(*t));
        for obs in &run.observables {
            push_float(&mut out, obs.mean[k]);
            push_float(&mut out, obs.std_error[k]);
        }
        out.push('\n');
    }
    out
}

/// One observable's series in a serializable summary.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesSummary {
    pub label: String,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
}

/// Conservation and sampling monitors of a completed ensemble run.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleMonitors {
    pub samples: usize,
    pub max_density_drift: f64,
    pub normalization_residual: f64,
    pub min_density: f64,
    pub max_energy_deviation: f64,
    pub max_constraint_deviation: f64,
    pub positivity_pass: bool,
}

/// Serializable digest of an ensemble run: time grid, observable averages,
/// and monitors.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleSummary {
    pub times: Vec<f64>,
    pub observables: Vec<SeriesSummary>,
    pub monitors: EnsembleMonitors,
}

pub fn ensemble_summary(run: &EnsembleRun) -> EnsembleSummary {
    let report = positivity_normalization_report(run);
    let max_energy_deviation = run
        .samples
        .iter()
        .map(|s| s.trajectory.max_energy_deviation)
        .fold(0.0_f64, f64::max);
    let max_constraint_deviation = run
        .samples
        .iter()
        .map(|s| s.trajectory.max_constraint_deviation)
        .fold(0.0_f64, f64::max);
    EnsembleSummary {
        times: run.times.clone(),
        observables: run
            .observables
            .iter()
            .map(|o| SeriesSummary {
                label: o.label.clone(),
                mean: o.mean.clone(),
                std_error: o.std_error.clone(),
            })
            .collect(),
        monitors: EnsembleMonitors {
            samples: run.samples.len(),
            max_density_drift: run.max_density_drift,
            normalization_residual: run.normalization_residual,
            min_density: report.min_density,
            max_energy_deviation,
            max_constraint_deviation,
            positivity_pass: report.pass,
        },
    }
}
