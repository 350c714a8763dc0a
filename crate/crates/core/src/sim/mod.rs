//! Discrete-event simulation of owners, peers and an always-available server.
//!
//! A run pre-generates contacts, internet windows and productions from
//! independent random streams of one seed, then processes events in
//! `(time, sequence)` order. It is single-threaded and fully determined by
//! the [`ScenarioConfig`]; batches may run replications in parallel.
//!
//! Every produced version is settled exactly once:
//!
//! * when its owner fails, at the restore attempt (these are *exposed*);
//! * when it expires or a newer version of the same item appears;
//! * at the horizon otherwise.
//!
//! The reported loss ratio counts exposed versions only. Channel estimates
//! handed to owners are `base_reliability * server_reach`; whether a batch of
//! fragments left on a peer is actually retrievable is drawn independently
//! from `true_reliability * server_reach`, so scenarios can be calibrated or
//! deliberately misinformed.

mod config;
mod engine;
mod metrics;
mod trace;

use rayon::prelude::*;
use thiserror::Error;

pub use config::{
    DependencyPattern, Dist, FailureSpec, InfrastructureSpec, MobilitySpec, ScenarioConfig, ScriptedEvent, ScriptedKind,
    TerminalGroup, WorkloadSpec,
};
pub use metrics::{
    calibration_check, BandLoss, BatchReport, Calibration, CalibrationBin, CalibrationPair, Counters, Evaluation,
    ItemOutcome, MetricSummary, MetricsReport, OccupancySample, Outcome, PRIORITY_BANDS,
};
pub use trace::{read_trace, write_trace, TraceKind, TraceRecord};

use crate::model::ModelError;
use crate::scheduler::SchedulerError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
}

impl SimError {
    pub fn is_config(&self) -> bool {
        matches!(self, SimError::Config(_))
    }
}

pub fn run(config: &ScenarioConfig) -> Result<MetricsReport, SimError> {
    engine::Simulation::new(config, false)?.run().map(|(r, _)| r)
}

/// Like [`run`], also returning the event log.
pub fn run_traced(config: &ScenarioConfig) -> Result<(MetricsReport, Vec<TraceRecord>), SimError> {
    engine::Simulation::new(config, true)?.run()
}

/// Runs `replications` copies with seeds `seed, seed + 1, …`.
pub fn run_replications(config: &ScenarioConfig, replications: u64, parallel: bool) -> Result<Vec<MetricsReport>, SimError> {
    if replications == 0 {
        return Err(SimError::Config("replications: must be >= 1".into()));
    }
    config.validate()?;
    let one = |i: u64| {
        let mut c = config.clone();
        c.seed = config.seed.wrapping_add(i);
        run(&c)
    };
    if parallel {
        (0..replications).into_par_iter().map(one).collect()
    } else {
        (0..replications).map(one).collect()
    }
}

/// Mean and 95% interval of every scalar metric over `replications` runs.
pub fn run_batch(config: &ScenarioConfig, replications: u64, parallel: bool) -> Result<BatchReport, SimError> {
    let reports = run_replications(config, replications, parallel)?;
    Ok(summarize(config.seed, &reports))
}

pub fn summarize(base_seed: u64, reports: &[MetricsReport]) -> BatchReport {
    let mut samples: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for r in reports {
        for (k, v) in r.scalars() {
            samples.entry(k).or_default().push(v);
        }
    }
    BatchReport {
        base_seed,
        replications: reports.len() as u64,
        metrics: samples
            .into_iter()
            .map(|(k, xs)| (k, MetricSummary::from_samples(&xs)))
            .collect(),
        calibration: reports.iter().flat_map(|r| r.calibration.iter().copied()).collect(),
    }
}
