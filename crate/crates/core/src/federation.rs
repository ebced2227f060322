//! FedAvg round loop with pluggable sub-model controllers and codecs.
//!
//! Every random draw comes from a ChaCha8 stream keyed by
//! `(experiment seed, purpose, round, client)`, so results do not depend on
//! how per-client work is scheduled across threads.
//!
//! Compressed uplinks carry the update `start - trained` rather than the
//! trained weights; the server subtracts the decoded update from its exact
//! copy of the sub-model. Raw uplinks carry trained weights directly. Biases
//! always travel raw.

use std::collections::HashMap;

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{dgc_decode, dgc_encode, DgcConfig, DgcState};
use crate::compression::{quant8_decode, quant8_encode};
use crate::compression::{payload_size_bytes, raw_decode, raw_encode, CompressedBlob, CompressionError};
use crate::control::{ControlError, ControllerEvent, DropoutController};
use crate::data::FederatedDataset;
use crate::model::{evaluate, local_train, Architecture, Batch, LayerParams, ModelError, ModelParams};
use crate::netsim::{round_time, ClockEntry, ClockLedger, LinkRates, NetError, NetworkModel, RateSampling};
use crate::scalar::Scalar;
use crate::submodel::{coordinate_map, extract, lift, SubModelError, SubModelSpec};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum FederationError {
    #[error("client fraction must be in (0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("cannot aggregate an empty list of updates")]
    EmptyAggregate,
    #[error("update {0} does not match the shape of update 0")]
    ShapeMismatch(usize),
    #[error("client {0} reported zero training examples")]
    ZeroWeight(usize),
    #[error("no client has training data")]
    NoEligibleClients,
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    SubModel(#[from] SubModelError),
    #[error(transparent)]
    Compression(#[from] CompressionError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// How dropped coordinates take part in aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AggregateMode {
    /// Dropped coordinates carry the global value the client started from.
    #[default]
    Lifted,
    /// Each coordinate is averaged only over the clients that trained it.
    TrainedOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct CodecConfig {
    /// Hadamard + 8-bit quantization of downlink weight tensors.
    pub quant8_downlink: bool,
    /// Top-k sparsified uplink updates with residual accumulation.
    pub dgc_uplink: Option<DgcConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub client_fraction: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub aggregate: AggregateMode,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            client_fraction: 0.3,
            lr: 0.05,
            epochs: 1,
            batch_size: 10,
            aggregate: AggregateMode::Lifted,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        if !(self.client_fraction > 0.0 && self.client_fraction <= 1.0) {
            return Err(FederationError::InvalidFraction(self.client_fraction));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FederationError::NonPositive("lr"));
        }
        if self.epochs == 0 {
            return Err(FederationError::NonPositive("epochs"));
        }
        if self.batch_size == 0 {
            return Err(FederationError::NonPositive("batch_size"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Stream {
    Init = 1,
    Select = 2,
    Plan = 3,
    Train = 4,
    Signs = 5,
    Network = 6,
}

fn stream_rng(seed: u64, purpose: Stream, round: usize, client: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) | ((round as u64 & 0xF_FFFF_FFFF) << 20) | (client as u64 & 0xF_FFFF));
    rng
}

/// Initial global parameters for `seed`.
pub fn init_params<T: Scalar>(arch: &Architecture, seed: u64) -> ModelParams<T> {
    ModelParams::init(arch, &mut stream_rng(seed, Stream::Init, 0, 0))
}

/// Uniform sample without replacement of `max(1, round(fraction * n))` ids, ascending.
pub fn select_clients<R: Rng + ?Sized>(n: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>, FederationError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FederationError::InvalidFraction(fraction));
    }
    if n == 0 {
        return Err(FederationError::NoEligibleClients);
    }
    let m = ((fraction * n as f64).round() as usize).clamp(1, n);
    let mut ids = index::sample(rng, n, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Data-size weighted average `(1/n_t) * sum(n_c * W_c)`.
///
/// Per coordinate the weighted terms are sorted before summation, so the
/// result is bitwise independent of client order. A coordinate on which all
/// clients agree is returned unchanged.
pub fn aggregate<T: Scalar>(updates: &[(&ModelParams<T>, usize)]) -> Result<ModelParams<T>, FederationError> {
    aggregate_impl(updates, None)
}

/// Like [`aggregate`], but coordinate `j` of client `c` only counts where
/// `masks[c]` marks it as trained. Coordinates nobody trained keep the value
/// of the first update.
pub fn aggregate_trained_only<T: Scalar>(
    updates: &[(&ModelParams<T>, usize)],
    masks: &[Vec<Vec<bool>>],
) -> Result<ModelParams<T>, FederationError> {
    aggregate_impl(updates, Some(masks))
}

fn aggregate_impl<T: Scalar>(
    updates: &[(&ModelParams<T>, usize)],
    masks: Option<&[Vec<Vec<bool>>]>,
) -> Result<ModelParams<T>, FederationError> {
    let (first, _) = *updates.first().ok_or(FederationError::EmptyAggregate)?;
    for (i, (p, n)) in updates.iter().enumerate() {
        if !p.same_shape(first) {
            return Err(FederationError::ShapeMismatch(i));
        }
        if *n == 0 {
            return Err(FederationError::ZeroWeight(i));
        }
    }
    if let Some(m) = masks {
        let ok = m.len() == updates.len()
            && m.iter().all(|mc| mc.len() == 2 * first.layers.len() && mc.iter().zip(first.tensors()).all(|(v, t)| v.len() == t.len()));
        if !ok {
            return Err(FederationError::ShapeMismatch(0));
        }
    }
    let tensors: Vec<Vec<&Tensor<T>>> = updates.iter().map(|(p, _)| p.tensors().collect()).collect();
    let mut out = first.clone();
    let mut terms: Vec<(T, f64)> = Vec::with_capacity(updates.len());
    for (ti, target) in out.tensors_mut().enumerate() {
        for j in 0..target.len() {
            terms.clear();
            for (c, (_, n)) in updates.iter().enumerate() {
                if masks.is_none_or(|m| m[c][ti][j]) {
                    terms.push((tensors[c][ti].values()[j], *n as f64));
                }
            }
            let Some(&(v0, _)) = terms.first() else {
                continue;
            };
            if terms.iter().all(|&(v, _)| v == v0) {
                target.values_mut()[j] = v0;
                continue;
            }
            let total: f64 = terms.iter().map(|&(_, n)| n).sum();
            let mut weighted: Vec<T> = terms.iter().map(|&(v, n)| v * T::of(n / total)).collect();
            weighted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            target.values_mut()[j] = weighted.into_iter().fold(T::zero(), |acc, x| acc + x);
        }
    }
    Ok(out)
}

/// Which global coordinates `spec` keeps, one flag vector per tensor in
/// `ModelParams::tensors` order.
pub fn coverage_mask(arch: &Architecture, spec: &SubModelSpec) -> Result<Vec<Vec<bool>>, FederationError> {
    let (_, index) = coordinate_map(arch, spec)?;
    let mut out = Vec::with_capacity(2 * index.len());
    for ((ws, bs), ix) in arch.param_shapes().into_iter().zip(&index) {
        for (shape, idx) in [(ws, &ix.weights), (bs, &ix.biases)] {
            let mut m = vec![false; shape.iter().product()];
            for &j in idx {
                m[j] = true;
            }
            out.push(m);
        }
    }
    Ok(out)
}

/// Per-client record of one round.
#[derive(Clone, Debug)]
pub struct ClientReport {
    pub client: usize,
    pub spec: SubModelSpec,
    pub n_examples: usize,
    pub loss: f64,
    pub down_blobs: Vec<CompressedBlob>,
    pub up_blobs: Vec<CompressedBlob>,
    pub down_bytes: usize,
    pub up_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub clients: Vec<usize>,
    pub down_bytes: Vec<usize>,
    pub up_bytes: Vec<usize>,
    pub total_down_bytes: usize,
    pub total_up_bytes: usize,
    pub rates: LinkRates,
    pub seconds: f64,
    pub mean_train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct RoundResult {
    pub reports: Vec<ClientReport>,
    pub events: Vec<ControllerEvent>,
    pub metrics: RoundMetrics,
}

/// One evaluation row of the metrics table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub cum_seconds: f64,
    pub cum_down_bytes: u64,
    pub cum_up_bytes: u64,
    /// Mean client training loss of this round; the initial global model's
    /// loss on the pooled training data for round 0.
    pub train_loss: f64,
    pub test_accuracy: f64,
}

/// Mutable state of a running federated experiment.
pub struct Simulation<T: Scalar = f64> {
    arch: Architecture,
    global: ModelParams<T>,
    controller: DropoutController,
    codecs: CodecConfig,
    training: TrainingConfig,
    network: NetworkModel,
    fixed_rates: Option<LinkRates>,
    shards: Vec<Batch<T>>,
    eligible: Vec<usize>,
    dgc: HashMap<usize, (String, DgcState<T>)>,
    seed: u64,
    round: usize,
    clock: ClockLedger,
    cum_down: u64,
    cum_up: u64,
}

/// Client id, its spec and its carried-over DGC state keyed by spec fingerprint.
type ClientJob<T> = (usize, SubModelSpec, Option<(String, DgcState<T>)>);

struct ClientOutcome<T: Scalar> {
    report: ClientReport,
    update: ModelParams<T>,
    dgc: Option<(String, DgcState<T>)>,
}

impl<T: Scalar> Simulation<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: Architecture,
        global: ModelParams<T>,
        controller: DropoutController,
        codecs: CodecConfig,
        training: TrainingConfig,
        network: NetworkModel,
        shards: Vec<Batch<T>>,
        seed: u64,
    ) -> Result<Self, FederationError> {
        training.validate()?;
        network.validate()?;
        if let Some(d) = &codecs.dgc_uplink {
            d.validate()?;
        }
        global.check(&arch)?;
        let eligible: Vec<usize> = (0..shards.len()).filter(|&c| !shards[c].is_empty()).collect();
        if eligible.is_empty() {
            return Err(FederationError::NoEligibleClients);
        }
        let fixed_rates = match network.sampling {
            RateSampling::PerExperiment => Some(network.sample(&mut stream_rng(seed, Stream::Network, 0, 0))),
            RateSampling::PerRound => None,
        };
        Ok(Self {
            arch,
            global,
            controller,
            codecs,
            training,
            network,
            fixed_rates,
            shards,
            eligible,
            dgc: HashMap::new(),
            seed,
            round: 0,
            clock: ClockLedger::default(),
            cum_down: 0,
            cum_up: 0,
        })
    }

    /// Convenience constructor using each client's training shard.
    pub fn from_dataset(
        arch: Architecture,
        controller: DropoutController,
        codecs: CodecConfig,
        training: TrainingConfig,
        network: NetworkModel,
        data: &FederatedDataset<T>,
        seed: u64,
    ) -> Result<Self, FederationError> {
        let global = init_params(&arch, seed);
        let shards = data.clients.iter().map(|c| c.train.clone()).collect();
        Self::new(arch, global, controller, codecs, training, network, shards, seed)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn global(&self) -> &ModelParams<T> {
        &self.global
    }

    pub fn controller(&self) -> &DropoutController {
        &self.controller
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn clock(&self) -> &ClockLedger {
        &self.clock
    }

    pub fn cumulative_bytes(&self) -> (u64, u64) {
        (self.cum_down, self.cum_up)
    }

    /// Runs one synchronous round and replaces the global model.
    pub fn run_round(&mut self) -> Result<RoundResult, FederationError> {
        let t = self.round + 1;
        let picked = select_clients(
            self.eligible.len(),
            self.training.client_fraction,
            &mut stream_rng(self.seed, Stream::Select, t, 0),
        )?;
        let clients: Vec<usize> = picked.into_iter().map(|i| self.eligible[i]).collect();
        let specs = self
            .controller
            .plan_round(&self.arch, &clients, &mut stream_rng(self.seed, Stream::Plan, t, 0))?;

        let jobs: Vec<ClientJob<T>> = clients
            .iter()
            .zip(&specs)
            .map(|(&c, s)| (c, s.clone(), self.dgc.remove(&c)))
            .collect();
        let outcomes: Vec<ClientOutcome<T>> = jobs
            .into_par_iter()
            .map(|(c, spec, dgc)| self.client_step(t, c, spec, dgc))
            .collect::<Result<_, _>>()?;

        let mut reports = Vec::with_capacity(outcomes.len());
        let mut updates = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            if let Some(state) = o.dgc {
                self.dgc.insert(o.report.client, state);
            }
            updates.push(o.update);
            reports.push(o.report);
        }
        let weighted: Vec<(&ModelParams<T>, usize)> = updates.iter().zip(&reports).map(|(u, r)| (u, r.n_examples)).collect();
        let new_global = match self.training.aggregate {
            AggregateMode::Lifted => aggregate(&weighted)?,
            AggregateMode::TrainedOnly => {
                let masks = specs
                    .iter()
                    .map(|s| coverage_mask(&self.arch, s))
                    .collect::<Result<Vec<_>, _>>()?;
                aggregate_trained_only(&weighted, &masks)?
            }
        };

        let losses: Vec<f64> = reports.iter().map(|r| r.loss).collect();
        let events = self.controller.feedback_round(&clients, &specs, &losses)?;

        let rates = match self.fixed_rates {
            Some(r) => r,
            None => self.network.sample(&mut stream_rng(self.seed, Stream::Network, t, 0)),
        };
        let traffic: Vec<(usize, usize)> = reports.iter().map(|r| (r.down_bytes, r.up_bytes)).collect();
        let seconds = round_time(&traffic, rates, self.network.compute_seconds)?;
        let down_seconds = round_time(&traffic.iter().map(|&(d, _)| (d, 0)).collect::<Vec<_>>(), rates, 0.0)?;
        let up_seconds = round_time(&traffic.iter().map(|&(_, u)| (0, u)).collect::<Vec<_>>(), rates, 0.0)?;
        self.clock.record(ClockEntry {
            down_seconds,
            up_seconds,
            total_seconds: seconds,
        });

        let total_down: usize = traffic.iter().map(|t| t.0).sum();
        let total_up: usize = traffic.iter().map(|t| t.1).sum();
        self.cum_down += total_down as u64;
        self.cum_up += total_up as u64;
        self.global = new_global;
        self.round = t;

        let metrics = RoundMetrics {
            round: t,
            clients: clients.clone(),
            down_bytes: traffic.iter().map(|t| t.0).collect(),
            up_bytes: traffic.iter().map(|t| t.1).collect(),
            total_down_bytes: total_down,
            total_up_bytes: total_up,
            rates,
            seconds,
            mean_train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        };
        Ok(RoundResult {
            reports,
            events,
            metrics,
        })
    }

    fn client_step(
        &self,
        t: usize,
        client: usize,
        spec: SubModelSpec,
        dgc: Option<(String, DgcState<T>)>,
    ) -> Result<ClientOutcome<T>, FederationError> {
        let (exact, sub_arch) = extract(&self.global, &self.arch, &spec)?;

        // Downlink.
        let mut signs = stream_rng(self.seed, Stream::Signs, t, client);
        let mut down_blobs = Vec::with_capacity(2 * exact.layers.len());
        for layer in &exact.layers {
            down_blobs.push(if self.codecs.quant8_downlink {
                quant8_encode(&layer.weights, signs.next_u64())
            } else {
                raw_encode(&layer.weights)
            });
            down_blobs.push(raw_encode(&layer.biases));
        }
        let start = decode_params(&down_blobs)?;

        // Local training.
        let shard = &self.shards[client];
        let (trained, loss) = local_train(
            &sub_arch,
            &start,
            shard,
            self.training.epochs,
            self.training.batch_size,
            T::of(self.training.lr),
            &mut stream_rng(self.seed, Stream::Train, t, client),
        )?;

        // Uplink.
        let fingerprint = spec.fingerprint();
        let (up_blobs, received, dgc) = match &self.codecs.dgc_uplink {
            None => {
                let blobs: Vec<CompressedBlob> = trained.tensors().map(raw_encode).collect();
                let received = decode_params(&blobs)?;
                (blobs, received, None)
            }
            Some(cfg) => {
                let deltas: Vec<Tensor<T>> = start
                    .layers
                    .iter()
                    .zip(&trained.layers)
                    .map(|(s, w)| diff(&s.weights, &w.weights))
                    .collect();
                let shapes: Vec<Vec<usize>> = deltas.iter().map(|d| d.shape().to_vec()).collect();
                let mut state = match dgc {
                    Some((fp, s)) if fp == fingerprint && s.matches(&shapes) => s,
                    _ => DgcState::new(&shapes, *cfg),
                };
                let sparse = dgc_encode(&deltas, &mut state)?;
                let mut blobs = Vec::with_capacity(2 * sparse.len());
                let mut layers = Vec::with_capacity(sparse.len());
                for ((blob, w), base) in sparse.into_iter().zip(&trained.layers).zip(&exact.layers) {
                    let delta: Tensor<T> = dgc_decode(&blob)?;
                    let bias_blob = raw_encode(&w.biases);
                    layers.push(LayerParams {
                        weights: diff(&base.weights, &delta),
                        biases: raw_decode(&bias_blob)?,
                    });
                    blobs.push(blob);
                    blobs.push(bias_blob);
                }
                (blobs, ModelParams { layers }, Some((fingerprint, state)))
            }
        };
        let update = lift(&self.global, &self.arch, &spec, &received)?;

        let down_bytes = down_blobs.iter().map(payload_size_bytes).sum();
        let up_bytes = up_blobs.iter().map(payload_size_bytes).sum();
        Ok(ClientOutcome {
            report: ClientReport {
                client,
                spec,
                n_examples: shard.len(),
                loss: loss.as_f64(),
                down_blobs,
                up_blobs,
                down_bytes,
                up_bytes,
            },
            update,
            dgc,
        })
    }

    /// Accuracy and loss of the current global model on `data`.
    pub fn evaluate(&self, data: &Batch<T>) -> Result<crate::model::Evaluation, FederationError> {
        Ok(evaluate(&self.arch, &self.global, data)?)
    }

    /// Runs `rounds` rounds, evaluating on `test` at round 0, every
    /// `eval_every` rounds and after the last round. `observe` sees every
    /// round result and every evaluation row as soon as it exists.
    pub fn run<E: From<FederationError>>(
        &mut self,
        rounds: usize,
        eval_every: usize,
        train: &Batch<T>,
        test: &Batch<T>,
        mut observe: impl FnMut(Progress<'_>) -> Result<(), E>,
    ) -> Result<Vec<MetricsRow>, E> {
        if eval_every == 0 {
            return Err(FederationError::NonPositive("eval_every").into());
        }
        let mut rows = Vec::new();
        let mut train_loss = self.evaluate(train)?.loss;
        for r in 0..=rounds {
            if r > 0 {
                let result = self.run_round()?;
                train_loss = result.metrics.mean_train_loss;
                observe(Progress::Round(&result))?;
            }
            if r == 0 || r % eval_every == 0 || r == rounds {
                let row = MetricsRow {
                    round: self.round,
                    cum_seconds: self.clock.cumulative_seconds(),
                    cum_down_bytes: self.cum_down,
                    cum_up_bytes: self.cum_up,
                    train_loss,
                    test_accuracy: self.evaluate(test)?.accuracy,
                };
                observe(Progress::Eval(&row))?;
                rows.push(row);
            }
        }
        Ok(rows)
    }
}

pub enum Progress<'a> {
    Round(&'a RoundResult),
    Eval(&'a MetricsRow),
}

fn diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let values = a.values().iter().zip(b.values()).map(|(&x, &y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), values).expect("operands share a shape")
}

fn decode_params<T: Scalar>(blobs: &[CompressedBlob]) -> Result<ModelParams<T>, FederationError> {
    let layers = blobs
        .chunks(2)
        .map(|pair| -> Result<LayerParams<T>, FederationError> {
            let weights = match pair[0].codec() {
                crate::compression::Codec::Quant8Hadamard => quant8_decode(&pair[0])?,
                _ => raw_decode(&pair[0])?,
            };
            Ok(LayerParams {
                weights,
                biases: raw_decode(&pair[1])?,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(ModelParams { layers })
}
