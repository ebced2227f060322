//! Adaptive federated dropout controllers.
//!
//! Both controllers follow the same loop: pick a sub-model (random on first
//! use, the last recorded one after an improvement, otherwise a score-weighted
//! draw), then after training compare the new loss against the previous one
//! and, on strict improvement, credit the kept units with the relative gain.
//! The multi-model variant keeps this state per client; the single-model
//! variant keeps one copy on the server and feeds it the mean client loss.

use rand::Rng;
use serde::Serialize;

use crate::model::Architecture;
use crate::submodel::{self, ScoreMap, SubModelError, SubModelSpec};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ControlError {
    #[error("client {0} is not managed by this controller")]
    UnknownClient(usize),
    #[error("loss feedback requires at least one client loss")]
    EmptyLosses,
    #[error("losses must be finite and non-negative, got {0}")]
    InvalidLoss(f64),
    #[error("expected {expected} specs/losses for the round, got {actual}")]
    RoundMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    SubModel(#[from] SubModelError),
}

/// Loss-tracking state shared by both controller flavours.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AfdState {
    pub scores: ScoreMap,
    pub last_loss: f64,
    pub recorded: bool,
    pub last_spec: Option<SubModelSpec>,
    /// Completed feedback steps; zero means the next plan is the first.
    pub updates: u64,
}

pub type MultiClientState = AfdState;
pub type SingleServerState = AfdState;

impl AfdState {
    pub fn new(arch: &Architecture) -> Self {
        Self {
            scores: ScoreMap::zeros(arch),
            last_loss: 0.0,
            recorded: false,
            last_spec: None,
            updates: 0,
        }
    }

    fn plan<R: Rng + ?Sized>(&self, arch: &Architecture, fdr: f64, rng: &mut R) -> Result<SubModelSpec, ControlError> {
        if self.updates == 0 {
            return Ok(submodel::select_random(arch, fdr, rng));
        }
        match (&self.recorded, &self.last_spec) {
            (true, Some(spec)) => Ok(spec.clone()),
            _ => Ok(submodel::select_weighted(arch, &self.scores, fdr, rng)?),
        }
    }

    /// Applies one loss observation. The very first observation only seeds
    /// `last_loss`: the zero initial loss can never be beaten.
    fn feedback(&mut self, spec: &SubModelSpec, loss: f64) -> Result<Decision, ControlError> {
        if !(loss.is_finite() && loss >= 0.0) {
            return Err(ControlError::InvalidLoss(loss));
        }
        let previous = self.last_loss;
        if self.updates > 0 && loss < self.last_loss {
            self.scores = submodel::update_score_map(&self.scores, spec, self.last_loss, loss)?;
            self.last_spec = Some(spec.clone());
            self.recorded = true;
        } else {
            self.recorded = false;
        }
        self.last_loss = loss;
        self.updates += 1;
        Ok(Decision {
            recorded: self.recorded,
            previous_loss: previous,
            loss,
        })
    }
}

/// Outcome of one feedback step, as logged per round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Decision {
    pub recorded: bool,
    pub previous_loss: f64,
    pub loss: f64,
}

/// One score map, loss memory and recorded flag per client.
#[derive(Clone, Debug)]
pub struct MultiModelController {
    arch: Architecture,
    fdr: f64,
    clients: Vec<MultiClientState>,
}

impl MultiModelController {
    pub fn new(arch: &Architecture, n_clients: usize, fdr: f64) -> Self {
        Self {
            arch: arch.clone(),
            fdr,
            clients: vec![AfdState::new(arch); n_clients],
        }
    }

    pub fn client(&self, c: usize) -> Option<&MultiClientState> {
        self.clients.get(c)
    }

    pub fn plan<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Result<SubModelSpec, ControlError> {
        self.clients
            .get(c)
            .ok_or(ControlError::UnknownClient(c))?
            .plan(&self.arch, self.fdr, rng)
    }

    pub fn feedback(&mut self, c: usize, spec: &SubModelSpec, loss: f64) -> Result<Decision, ControlError> {
        self.clients
            .get_mut(c)
            .ok_or(ControlError::UnknownClient(c))?
            .feedback(spec, loss)
    }
}

/// A single server-side score map driven by the mean loss of each round.
#[derive(Clone, Debug)]
pub struct SingleModelController {
    arch: Architecture,
    fdr: f64,
    state: SingleServerState,
}

impl SingleModelController {
    pub fn new(arch: &Architecture, fdr: f64) -> Self {
        Self {
            arch: arch.clone(),
            fdr,
            state: AfdState::new(arch),
        }
    }

    pub fn state(&self) -> &SingleServerState {
        &self.state
    }

    pub fn plan<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SubModelSpec, ControlError> {
        self.state.plan(&self.arch, self.fdr, rng)
    }

    /// Feeds back the unweighted mean of the selected clients' losses.
    pub fn feedback(&mut self, spec: &SubModelSpec, client_losses: &[f64]) -> Result<Decision, ControlError> {
        if client_losses.is_empty() {
            return Err(ControlError::EmptyLosses);
        }
        if let Some(&bad) = client_losses.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(ControlError::InvalidLoss(bad));
        }
        let mean = client_losses.iter().sum::<f64>() / client_losses.len() as f64;
        self.state.feedback(spec, mean)
    }
}

/// Sub-model policy used by the round loop.
#[derive(Clone, Debug)]
pub enum DropoutController {
    /// Every client trains the full model.
    None,
    /// Federated dropout with a fresh uniform sub-model per client and round.
    Random { arch: Architecture, fdr: f64 },
    MultiModel(MultiModelController),
    SingleModel(SingleModelController),
}

/// Per-client feedback record for the round log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControllerEvent {
    pub client: usize,
    pub spec_hash: String,
    pub recorded: bool,
    pub loss: f64,
}

impl DropoutController {
    /// Specs for `clients` (ascending ids), drawn from `rng` in that order.
    pub fn plan_round<R: Rng + ?Sized>(
        &self,
        arch: &Architecture,
        clients: &[usize],
        rng: &mut R,
    ) -> Result<Vec<SubModelSpec>, ControlError> {
        match self {
            DropoutController::None => Ok(vec![SubModelSpec::full(arch); clients.len()]),
            DropoutController::Random { arch, fdr } => Ok(clients
                .iter()
                .map(|_| submodel::select_random(arch, *fdr, rng))
                .collect()),
            DropoutController::MultiModel(m) => clients.iter().map(|&c| m.plan(c, rng)).collect(),
            DropoutController::SingleModel(s) => {
                let spec = s.plan(rng)?;
                Ok(vec![spec; clients.len()])
            }
        }
    }

    pub fn feedback_round(
        &mut self,
        clients: &[usize],
        specs: &[SubModelSpec],
        losses: &[f64],
    ) -> Result<Vec<ControllerEvent>, ControlError> {
        if specs.len() != clients.len() || losses.len() != clients.len() {
            return Err(ControlError::RoundMismatch {
                expected: clients.len(),
                actual: specs.len().min(losses.len()),
            });
        }
        let event = |c: usize, spec: &SubModelSpec, recorded, loss| ControllerEvent {
            client: c,
            spec_hash: spec.fingerprint(),
            recorded,
            loss,
        };
        match self {
            DropoutController::MultiModel(m) => clients
                .iter()
                .zip(specs)
                .zip(losses)
                .map(|((&c, s), &l)| Ok(event(c, s, m.feedback(c, s, l)?.recorded, l)))
                .collect(),
            DropoutController::SingleModel(s) => {
                let Some(spec) = specs.first() else {
                    return Err(ControlError::EmptyLosses);
                };
                let d = s.feedback(spec, losses)?;
                Ok(clients
                    .iter()
                    .zip(losses)
                    .map(|(&c, &l)| event(c, spec, d.recorded, l))
                    .collect())
            }
            DropoutController::None | DropoutController::Random { .. } => Ok(clients
                .iter()
                .zip(specs)
                .zip(losses)
                .map(|((&c, s), &l)| event(c, s, false, l))
                .collect()),
        }
    }
}
