//! Hyperparameter search with a Tree-structured Parzen Estimator.
//!
//! [`Study`] exposes an ask/tell surface ([`Study::suggest`] /
//! [`Study::tell`]); [`run_study`] drives a whole search against an objective
//! closure, optionally persisting after every trial through a [`StudyStore`].

mod space;
mod store;
mod study;
mod tpe;

pub use space::{define_space, names, Domain, ParamSpec, ParamValue, SearchSpace};
pub use store::{StoreLock, StudyStore};
pub use study::{minimize, Params, Study, Trial, TrialState};
pub use tpe::{
    sample_prior, sample_tpe, split_good_bad, CategoricalEstimator, ParzenEstimator, TpeConfig,
};

#[derive(Debug, thiserror::Error)]
pub enum HpoError {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("study storage unavailable: {0}")]
    StorageUnavailable(#[source] std::io::Error),
    #[error("study file is corrupt: {0}")]
    CorruptStudy(String),
    #[error("unknown trial {0}")]
    UnknownTrial(u64),
    #[error("trial {0} is already complete")]
    AlreadyComplete(u64),
    #[error("trial {0} already failed")]
    AlreadyFailed(u64),
    #[error("objective must be finite, got {0}")]
    InvalidObjective(f64),
    #[error("trial {trial}: {param} = {value} is outside its domain")]
    OutOfDomain { trial: u64, param: String, value: String },
    #[error("no complete trials")]
    NoCompleteTrials,
    #[error("all {0} trials failed")]
    AllTrialsFailed(usize),
}

impl HpoError {
    fn storage(e: std::io::Error) -> Self {
        HpoError::StorageUnavailable(e)
    }
}

pub type Result<T, E = HpoError> = std::result::Result<T, E>;

/// Runs `n_trials` suggest/evaluate/tell rounds.
///
/// An objective that returns `Err` (or a non-finite value) marks its trial
/// failed; failed trials never enter the densities. With a `store`, the study
/// is resumed from disk when present (stale pending trials are failed) and
/// saved after every trial; trials already on disk count toward `n_trials`.
pub fn run_study<F, E>(
    mut objective: F,
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
    config: &TpeConfig,
    store: Option<&StudyStore>,
) -> Result<Study>
where
    F: FnMut(&Trial) -> std::result::Result<f64, E>,
    E: std::fmt::Display,
{
    config.validate()?;
    let mut study = match store {
        Some(s) if s.exists() => {
            let mut existing = s.load()?;
            if existing.space != *space {
                return Err(HpoError::InvalidSpace(format!(
                    "{} holds a study over a different search space",
                    s.path().display()
                )));
            }
            existing.abandon_pending("interrupted before completion");
            existing
        }
        _ => Study::new(space.clone())?,
    };

    while study.trials.len() < n_trials {
        let trial = study.suggest(seed, config)?;
        if let Some(s) = store {
            s.save(&study)?;
        }
        match objective(&trial) {
            Ok(v) if v.is_finite() => study.tell(trial.id, v)?,
            Ok(v) => study.fail(trial.id, format!("non-finite objective {v}"))?,
            Err(e) => study.fail(trial.id, e.to_string())?,
        }
        if let Some(s) = store {
            let _guard = s.lock()?;
            s.save(&study)?;
        }
    }

    if study.n_completed() == 0 {
        return Err(HpoError::AllTrialsFailed(study.trials.len()));
    }
    Ok(study)
}
