use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::space::{ParamSpec, ParamValue, SearchSpace};
use super::tpe::{sample_prior, sample_tpe, split_good_bad, TpeConfig};
use super::{HpoError, Result};

pub type Params = BTreeMap<String, ParamValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialState {
    Pending,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: u64,
    pub params: Params,
    pub objective: Option<f64>,
    pub state: TrialState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Trial {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.params.get(name)
    }

    pub fn float(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(ParamValue::as_f64)
    }

    fn completed_objective(&self) -> Option<f64> {
        match (self.state, self.objective) {
            (TrialState::Complete, Some(v)) if v.is_finite() => Some(v),
            _ => None,
        }
    }
}

/// Optimization history. Objectives are maximized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub space: SearchSpace,
    pub trials: Vec<Trial>,
}

impl Study {
    pub fn new(space: SearchSpace) -> Result<Self> {
        space.validate()?;
        Ok(Self {
            space,
            trials: Vec::new(),
        })
    }

    pub fn completed(&self) -> impl Iterator<Item = &Trial> {
        self.trials.iter().filter(|t| t.completed_objective().is_some())
    }

    pub fn n_completed(&self) -> usize {
        self.completed().count()
    }

    pub fn trial(&self, id: u64) -> Option<&Trial> {
        self.trials.iter().find(|t| t.id == id)
    }

    fn next_id(&self) -> u64 {
        self.trials.iter().map(|t| t.id + 1).max().unwrap_or(0)
    }

    /// Proposes parameters for a new pending trial without recording it.
    ///
    /// The draw is a pure function of the completed history and `seed`;
    /// pending and failed trials play no part.
    pub fn propose(&self, seed: u64, config: &TpeConfig) -> Result<Params> {
        config.validate()?;
        let id = self.next_id();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id);

        let ranked: Vec<(f64, &Trial)> = self
            .completed()
            .map(|t| (t.completed_objective().unwrap(), t))
            .collect();
        if ranked.len() < config.n_startup || ranked.is_empty() {
            return Ok(self
                .space
                .params
                .iter()
                .map(|p| (p.name.clone(), sample_prior(p, &mut rng)))
                .collect());
        }
        let (good, bad) = split_good_bad(config, &ranked);
        let values = |set: &[&Trial], p: &ParamSpec| -> Vec<ParamValue> {
            set.iter().filter_map(|t| t.get(&p.name).cloned()).collect()
        };
        Ok(self
            .space
            .params
            .iter()
            .map(|p| {
                let v = sample_tpe(p, &values(&good, p), &values(&bad, p), config, &mut rng);
                (p.name.clone(), v)
            })
            .collect())
    }

    /// Asks for a new trial and records it as pending.
    pub fn suggest(&mut self, seed: u64, config: &TpeConfig) -> Result<Trial> {
        let params = self.propose(seed, config)?;
        let trial = Trial {
            id: self.next_id(),
            params,
            objective: None,
            state: TrialState::Pending,
            error: None,
        };
        self.trials.push(trial.clone());
        Ok(trial)
    }

    fn pending_mut(&mut self, trial_id: u64) -> Result<&mut Trial> {
        let trial = self
            .trials
            .iter_mut()
            .find(|t| t.id == trial_id)
            .ok_or(HpoError::UnknownTrial(trial_id))?;
        match trial.state {
            TrialState::Pending => Ok(trial),
            TrialState::Complete => Err(HpoError::AlreadyComplete(trial_id)),
            TrialState::Failed => Err(HpoError::AlreadyFailed(trial_id)),
        }
    }

    /// Records the objective of a pending trial.
    pub fn tell(&mut self, trial_id: u64, objective: f64) -> Result<()> {
        if !objective.is_finite() {
            return Err(HpoError::InvalidObjective(objective));
        }
        let trial = self.pending_mut(trial_id)?;
        trial.objective = Some(objective);
        trial.state = TrialState::Complete;
        Ok(())
    }

    /// Marks a pending trial as failed; it is excluded from density fitting.
    pub fn fail(&mut self, trial_id: u64, reason: impl Into<String>) -> Result<()> {
        let trial = self.pending_mut(trial_id)?;
        trial.state = TrialState::Failed;
        trial.error = Some(reason.into());
        Ok(())
    }

    /// Fails every pending trial, e.g. after resuming an interrupted run.
    pub fn abandon_pending(&mut self, reason: &str) -> usize {
        let mut n = 0;
        for t in self.trials.iter_mut().filter(|t| t.state == TrialState::Pending) {
            t.state = TrialState::Failed;
            t.error = Some(reason.to_owned());
            n += 1;
        }
        n
    }

    /// Complete trial with the largest objective; ties go to the lowest id.
    pub fn best_trial(&self) -> Result<&Trial> {
        self.completed()
            .fold(None, |best: Option<&Trial>, t| match best {
                Some(b) => {
                    let (bv, tv) = (b.objective.unwrap(), t.objective.unwrap());
                    if tv > bv || (tv == bv && t.id < b.id) {
                        Some(t)
                    } else {
                        Some(b)
                    }
                }
                None => Some(t),
            })
            .ok_or(HpoError::NoCompleteTrials)
    }

    /// Checks that every trial covers the space with in-domain values.
    pub fn validate_trials(&self) -> Result<()> {
        for t in &self.trials {
            for p in &self.space.params {
                match t.params.get(&p.name) {
                    Some(v) if p.contains(v) => {}
                    other => {
                        return Err(HpoError::OutOfDomain {
                            trial: t.id,
                            param: p.name.clone(),
                            value: other.map(|v| v.to_string()).unwrap_or_else(|| "missing".into()),
                        })
                    }
                }
            }
        }
        Ok(())
    }
}

/// Wraps an objective to be minimized so the maximizing study can use it.
pub fn minimize<F, E>(mut f: F) -> impl FnMut(&Trial) -> std::result::Result<f64, E>
where
    F: FnMut(&Trial) -> std::result::Result<f64, E>,
{
    move |t| f(t).map(|v| -v)
}
