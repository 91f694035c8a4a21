use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use dualap_core::model_ctrl::CtrlParams;
use dualap_core::model_sim::SimParams;
use dualap_core::sysid::{estimate, initial_guess, simulate_ctrl, EstimateOptions, IdDataset};
use dualap_core::trial::{
    generate_cohort, generate_identification_data, run_closed_loop, ControllerSetup, Protocol,
    ScenarioRecord, TrialRecord, VirtualPatient,
};
use rayon::prelude::*;

use crate::config::{FixedParameters, RunConfig};
use crate::io::{self, CohortFile, IdentifiedFile, Manifest, PatientSeed};

pub fn cohort(config: &RunConfig, n: usize) -> Result<CohortFile> {
    Ok(CohortFile {
        config_hash: config.hash(),
        seed: config.seed,
        patients: generate_cohort(n, config.seed, &config.cohort)?,
    })
}

pub fn fixed_params(patient: &VirtualPatient, config: &RunConfig) -> CtrlParams {
    match config.fixed_parameters {
        FixedParameters::Patient => CtrlParams::population(&patient.sim),
        FixedParameters::Nominal => CtrlParams::population(&SimParams::nominal()),
    }
}

pub fn generate_data(patient: &VirtualPatient, config: &RunConfig) -> Result<ScenarioRecord> {
    Ok(generate_identification_data(patient, &config.identification, patient.seed)?)
}

/// Maximum-likelihood fit of the control model to one patient's data.
pub fn identify(patient: &VirtualPatient, data: &IdDataset, config: &RunConfig) -> Result<IdentifiedFile> {
    let fixed = fixed_params(patient, config);
    let init = initial_guess(&fixed, data)?;
    let options = EstimateOptions {
        seed: patient.seed,
        ..config.estimate
    };
    let est = estimate(data, &fixed, &init, &options)?;
    let fitted = simulate_ctrl(&est.theta.apply(&fixed), &est.theta.initial, data, 2)?;
    let sse: f64 = fitted.iter().zip(&data.cgm).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(IdentifiedFile {
        config_hash: config.hash(),
        patient: patient.id,
        converged: est.converged,
        nll: est.nll,
        iterations: est.iterations,
        evaluations: est.evaluations,
        rmse: (sse / data.len() as f64).sqrt(),
        theta: est.theta,
        fixed,
    })
}

pub fn trial(
    patient: &VirtualPatient,
    identified: &IdentifiedFile,
    protocol: &Protocol,
    config: &RunConfig,
) -> Result<TrialRecord> {
    let setup = ControllerSetup::from_identified(&identified.theta, &identified.fixed);
    Ok(run_closed_loop(patient, &setup, protocol, &config.trial)?)
}

#[derive(Debug, Clone)]
pub struct PatientOutcome {
    pub patient: usize,
    pub identified: Option<IdentifiedFile>,
    pub record: Option<TrialRecord>,
    /// First failing stage and its error.
    pub failure: Option<String>,
}

pub fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool> {
    let n = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build()
        .context("starting worker pool")
}

/// Identifies (unless `params` supplies a fit) and runs the trial for every
/// patient in parallel. Outcomes come back sorted by patient id.
pub fn run_patients(
    patients: &[VirtualPatient],
    params: Option<&[IdentifiedFile]>,
    protocol: &Protocol,
    config: &RunConfig,
    workers: Option<usize>,
) -> Result<Vec<PatientOutcome>> {
    let pool = thread_pool(workers)?;
    let mut outcomes: Vec<PatientOutcome> = pool.install(|| {
        patients
            .par_iter()
            .map(|p| {
                let mut out = PatientOutcome {
                    patient: p.id,
                    identified: None,
                    record: None,
                    failure: None,
                };
                let identified = match params {
                    Some(all) => all
                        .iter()
                        .find(|f| f.patient == p.id)
                        .cloned()
                        .ok_or_else(|| anyhow!("no identified parameters")),
                    None => generate_data(p, config).and_then(|rec| identify(p, &rec.dataset, config)),
                };
                let identified = match identified {
                    Ok(f) => f,
                    Err(e) => {
                        out.failure = Some(format!("patient {}: identification: {e:#}", p.id));
                        return out;
                    }
                };
                match trial(p, &identified, protocol, config) {
                    Ok(r) => {
                        if let Some(e) = &r.error {
                            out.failure = Some(format!("patient {}: trial: {e}", p.id));
                        }
                        out.record = Some(r);
                    }
                    Err(e) => out.failure = Some(format!("patient {}: trial: {e:#}", p.id)),
                }
                out.identified = Some(identified);
                out
            })
            .collect()
    });
    outcomes.sort_by_key(|o| o.patient);
    Ok(outcomes)
}

pub fn trajectory_path(out: &Path, patient: usize) -> PathBuf {
    out.join(format!("patient_{patient:03}.csv"))
}

pub fn params_path(dir: &Path, patient: usize) -> PathBuf {
    dir.join(format!("patient_{patient:03}.json"))
}

pub fn manifest(config: &RunConfig, command: &str, patients: &[VirtualPatient]) -> Manifest {
    Manifest {
        config_hash: config.hash(),
        master_seed: config.seed,
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: patients
            .iter()
            .map(|p| PatientSeed {
                patient: p.id,
                seed: p.seed,
            })
            .collect(),
        config: config.to_toml(),
    }
}

/// Writes trajectories, the summary, fitted parameters and the manifest.
pub fn write_trial_outputs(
    out: &Path,
    outcomes: &[PatientOutcome],
    patients: &[VirtualPatient],
    config: &RunConfig,
    command: &str,
) -> Result<()> {
    let hash = config.hash();
    let mut records = Vec::new();
    for o in outcomes {
        if let Some(r) = &o.record {
            io::write_trajectory(&trajectory_path(out, o.patient), r, &hash)?;
            records.push(r.clone());
        }
        if let Some(f) = &o.identified {
            io::write_json(&params_path(&out.join("params"), o.patient), f)?;
        }
    }
    io::write_atomic(&out.join("summary.csv"), &io::summary_csv(&records, &hash)?)?;
    io::write_json(&out.join("manifest.json"), &manifest(config, command, patients))
}
