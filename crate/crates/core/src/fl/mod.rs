//! In-process FedAvg simulation with quantized, DP-noised or raw transport.
//!
//! A round samples `m` of `N` clients, runs local SGD on each from the current
//! global parameters, moves every update through the configured transport,
//! aggregates by dataset size and broadcasts the aggregated delta back.
//! Client work runs on the rayon pool; aggregation order is fixed, so results
//! do not depend on the number of threads.

mod partition;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{self, DpConfig, DpError};
use crate::nn::{self, Batch, GradSet, ModelSpec, NnError, ParamEntry, ParamSet};
use crate::quant::{self, CodecError, PayloadBytes, PolicyConfig, QuantPolicy, WireError};
use crate::rng;
use crate::tensor::Tensor;

pub use partition::{partition, Partition};

// Purpose tags for RNG streams.
const TAG_INIT: u64 = 1;
const TAG_SELECT: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_DP: u64 = 4;
pub(crate) const TAG_PARTITION: u64 = 5;

#[derive(Debug, Error)]
pub enum FlError {
    #[error("invalid FL configuration: {0}")]
    Config(String),
    #[error("cannot sample {m} of {n} clients")]
    Sampling { n: usize, m: usize },
    #[error("client {client} has no training data")]
    EmptyDataset { client: usize },
    #[error("no updates to aggregate")]
    NoUpdates,
    #[error("aggregation weight {weight} of update {index} is not positive")]
    Weight { index: usize, weight: f64 },
    #[error("global parameters became non-finite in round {round}")]
    NonFinite { round: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Dp(#[from] DpError),
}

/// What travels between clients and server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Defense {
    /// Raw float32 updates.
    None,
    /// Updates and broadcasts go through the quantization codec and wire format.
    Quantize,
    /// Clipped, Gaussian-noised float32 updates.
    Dp,
}

impl Defense {
    pub const ALL: [Defense; 3] = [Defense::None, Defense::Quantize, Defense::Dp];

    pub fn name(self) -> &'static str {
        match self {
            Defense::None => "none",
            Defense::Quantize => "quantize",
            Defense::Dp => "dp",
        }
    }
}

impl std::fmt::Display for Defense {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Local optimisation settings shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlConfig {
    pub clients: usize,
    /// Clients sampled per round.
    pub sampled: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub rounds: usize,
    pub defense: Defense,
    pub policy: PolicyConfig,
    pub dp: DpConfig,
    pub partition: Partition,
    pub seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            clients: 15,
            sampled: 5,
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 0.1,
            rounds: 20,
            defense: Defense::Quantize,
            policy: PolicyConfig::Mixed,
            dp: DpConfig::default(),
            partition: Partition::Iid,
            seed: 0,
        }
    }
}

impl FlConfig {
    /// Rounds may be zero; everything else must be positive and `sampled <= clients`.
    pub fn validate(&self) -> Result<(), FlError> {
        if self.clients == 0 || self.sampled == 0 || self.sampled > self.clients {
            return Err(FlError::Config(format!(
                "need 1 <= sampled <= clients, got sampled={} clients={}",
                self.sampled, self.clients
            )));
        }
        if self.local_epochs == 0 || self.batch_size == 0 {
            return Err(FlError::Config("local_epochs and batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FlError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.defense == Defense::Dp {
            self.dp.validate()?;
        }
        Ok(())
    }

    pub fn local(&self) -> LocalConfig {
        LocalConfig {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub data: Batch,
}

/// Metrics of one finished round. Byte counts are whole wire messages; the
/// `*_payload_bytes` fields count tensor values only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub clients: Vec<usize>,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub global_loss: f64,
    pub upstream_bytes: u64,
    pub downstream_bytes: u64,
    pub upstream_payload_bytes: u64,
    pub downstream_payload_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ParamSet,
    /// Number of completed rounds.
    pub round: usize,
    pub policy: QuantPolicy,
    pub history: Vec<RoundRecord>,
}

/// Uniform sample of `m` distinct ids out of `0..n`, ascending.
pub fn select_clients<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>, FlError> {
    if m == 0 || m > n {
        return Err(FlError::Sampling { n, m });
    }
    let mut ids = rand::seq::index::sample(rng, n, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Runs `epochs` of shuffled minibatch SGD from `global` and returns `params_after - global`.
///
/// A zero learning rate is accepted and yields a zero update.
pub fn local_training<R: Rng + ?Sized>(
    spec: &ModelSpec,
    client: &ClientState,
    global: &ParamSet,
    cfg: &LocalConfig,
    rng: &mut R,
) -> Result<GradSet, FlError> {
    spec.check_params(global)?;
    if client.data.is_empty() {
        return Err(FlError::EmptyDataset { client: client.id });
    }
    if cfg.batch_size == 0 {
        return Err(FlError::Config("batch_size must be >= 1".into()));
    }
    let mut params = global.clone();
    let mut order: Vec<usize> = (0..client.data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let grads = nn::backward(spec, &params, &client.data.select(chunk))?;
            params = nn::sgd_step(&params, &grads, cfg.learning_rate)?;
        }
    }
    Ok(params.difference(global)?)
}

/// Weighted mean `sum(w_i * u_i) / sum(w_i)`, accumulated in `f64`.
pub fn aggregate(updates: &[(GradSet, f64)]) -> Result<GradSet, FlError> {
    let (first, _) = updates.first().ok_or(FlError::NoUpdates)?;
    for (index, (u, w)) in updates.iter().enumerate() {
        if !(*w > 0.0 && w.is_finite()) {
            return Err(FlError::Weight { index, weight: *w });
        }
        first.check_layout(u)?;
    }
    let total: f64 = updates.iter().map(|(_, w)| w).sum();
    let entries = first
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut acc = vec![0.0f64; e.tensor.len()];
            for (u, w) in updates {
                for (a, &v) in acc.iter_mut().zip(u.tensor(i).data()) {
                    *a += w * f64::from(v);
                }
            }
            let data = acc.into_iter().map(|a| (a / total) as f32).collect();
            ParamEntry {
                layer_index: e.layer_index,
                role: e.role,
                tensor: Tensor::new(e.tensor.shape().to_vec(), data).expect("same shape"),
            }
        })
        .collect();
    Ok(ParamSet::new(entries))
}

/// Top-1 accuracy and mean cross-entropy over `test`.
pub fn evaluate(spec: &ModelSpec, params: &ParamSet, test: &Batch) -> Result<(f64, f64), FlError> {
    const CHUNK: usize = 512;
    if test.is_empty() {
        return Err(FlError::Config("test set is empty".into()));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let parts = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let batch = test.select(chunk);
            let (logits, loss) = nn::forward_loss(spec, params, &batch)?;
            let classes = spec.classes();
            let correct = logits
                .data()
                .chunks(classes)
                .zip(&batch.labels)
                .filter(|(row, &label)| argmax(row) == label)
                .count();
            Ok((correct, f64::from(loss) * chunk.len() as f64))
        })
        .collect::<Result<Vec<_>, FlError>>()?;
    let correct: usize = parts.iter().map(|p| p.0).sum();
    let loss: f64 = parts.iter().map(|p| p.1).sum();
    let n = test.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// One transmitted message after the receiver has decoded it.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivered {
    pub update: GradSet,
    pub bytes: usize,
    pub payload_bytes: usize,
}

/// quantize, encode, decode, dequantize.
pub fn quantized_roundtrip(update: &GradSet, policy: &QuantPolicy) -> Result<Delivered, FlError> {
    let q = quant::quantize_set(update, policy)?;
    let bytes = quant::encode(&q)?;
    let received = quant::decode(&bytes)?;
    Ok(Delivered {
        update: quant::dequantize_set(&received)?,
        bytes: bytes.len(),
        payload_bytes: received.payload_bytes(),
    })
}

fn float_transport(update: GradSet) -> Delivered {
    Delivered {
        bytes: update.message_bytes(),
        payload_bytes: update.payload_bytes(),
        update,
    }
}

/// Everything a run produces. Wall times sit beside the records so that the
/// records themselves stay bit-identical across runs.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub records: Vec<RoundRecord>,
    pub wall_time_ms: Vec<f64>,
    pub initial_params: ParamSet,
    pub final_params: ParamSet,
}

/// Server plus clients for one configuration.
#[derive(Debug, Clone)]
pub struct Simulation {
    spec: ModelSpec,
    cfg: FlConfig,
    clients: Vec<ClientState>,
    test: Batch,
    server: ServerState,
}

impl Simulation {
    /// Partitions `train` over the clients and initialises the global model from the seed.
    pub fn new(spec: ModelSpec, cfg: FlConfig, train: &Batch, test: Batch) -> Result<Self, FlError> {
        cfg.validate()?;
        let clients = partition(train, cfg.clients, &cfg.partition, cfg.seed)?;
        let params = nn::init_params(&spec, rng::derive_seed(cfg.seed, &[TAG_INIT]));
        Self::with_clients(spec, cfg, clients, test, params)
    }

    pub fn with_clients(
        spec: ModelSpec,
        cfg: FlConfig,
        clients: Vec<ClientState>,
        test: Batch,
        params: ParamSet,
    ) -> Result<Self, FlError> {
        cfg.validate()?;
        if clients.len() != cfg.clients {
            return Err(FlError::Config(format!(
                "{} client states for clients={}",
                clients.len(),
                cfg.clients
            )));
        }
        if let Some(c) = clients.iter().find(|c| c.data.is_empty()) {
            return Err(FlError::EmptyDataset { client: c.id });
        }
        spec.check_params(&params)?;
        let policy = cfg.policy.resolve(&spec)?;
        policy.check_covers(&params)?;
        Ok(Self {
            spec,
            cfg,
            clients,
            test,
            server: ServerState {
                params,
                round: 0,
                policy,
                history: Vec::new(),
            },
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &FlConfig {
        &self.cfg
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    /// Updates the sampled clients would send this round, before transport.
    pub fn client_updates(&self, sampled: &[usize]) -> Result<Vec<GradSet>, FlError> {
        let local = self.cfg.local();
        let round = self.server.round as u64;
        sampled
            .par_iter()
            .map(|&id| {
                let mut r = rng::stream(self.cfg.seed, &[TAG_SHUFFLE, id as u64, round]);
                local_training(&self.spec, &self.clients[id], &self.server.params, &local, &mut r)
            })
            .collect()
    }

    fn uplink(&self, id: usize, update: GradSet) -> Result<Delivered, FlError> {
        match self.cfg.defense {
            Defense::None => Ok(float_transport(update)),
            Defense::Quantize => quantized_roundtrip(&update, &self.server.policy),
            Defense::Dp => {
                let mut r = rng::stream(self.cfg.seed, &[TAG_DP, id as u64, self.server.round as u64]);
                Ok(float_transport(dp::privatize(&update, &self.cfg.dp, &mut r)?))
            }
        }
    }

    /// Mean training loss over all clients weighted by shard size.
    pub fn global_loss(&self, params: &ParamSet) -> Result<f64, FlError> {
        let losses = self
            .clients
            .par_iter()
            .map(|c| evaluate(&self.spec, params, &c.data).map(|(_, l)| (l, c.data.len() as f64)))
            .collect::<Result<Vec<_>, FlError>>()?;
        let total: f64 = losses.iter().map(|(_, w)| w).sum();
        Ok(losses.iter().map(|(l, w)| l * w).sum::<f64>() / total)
    }

    pub fn run_round(&mut self) -> Result<RoundRecord, FlError> {
        let round = self.server.round;
        let mut select_rng = rng::stream(self.cfg.seed, &[TAG_SELECT, round as u64]);
        let sampled = select_clients(self.cfg.clients, self.cfg.sampled, &mut select_rng)?;
        let updates = self.client_updates(&sampled)?;

        let mut received = Vec::with_capacity(sampled.len());
        let (mut up, mut up_payload) = (0u64, 0u64);
        for (&id, update) in sampled.iter().zip(updates) {
            let d = self.uplink(id, update)?;
            up += d.bytes as u64;
            up_payload += d.payload_bytes as u64;
            received.push((d.update, self.clients[id].data.len() as f64));
        }
        let delta = aggregate(&received)?;

        let broadcast = match self.cfg.defense {
            Defense::Quantize => quantized_roundtrip(&delta, &self.server.policy)?,
            Defense::None | Defense::Dp => float_transport(delta),
        };
        let m = sampled.len() as u64;
        let mut params = self.server.params.clone();
        params.add_scaled(&broadcast.update, 1.0)?;
        if !params.is_finite() {
            return Err(FlError::NonFinite { round });
        }

        let (test_accuracy, test_loss) = evaluate(&self.spec, &params, &self.test)?;
        let global_loss = self.global_loss(&params)?;
        let record = RoundRecord {
            round,
            clients: sampled,
            test_accuracy,
            test_loss,
            global_loss,
            upstream_bytes: up,
            downstream_bytes: m * broadcast.bytes as u64,
            upstream_payload_bytes: up_payload,
            downstream_payload_bytes: m * broadcast.payload_bytes as u64,
        };
        self.server.params = params;
        self.server.round += 1;
        self.server.history.push(record.clone());
        Ok(record)
    }

    /// Runs the configured number of rounds.
    pub fn run(mut self) -> Result<TrainingRun, FlError> {
        let initial_params = self.server.params.clone();
        let mut wall_time_ms = Vec::with_capacity(self.cfg.rounds);
        for _ in 0..self.cfg.rounds {
            let start = Instant::now();
            self.run_round()?;
            wall_time_ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(TrainingRun {
            records: self.server.history,
            wall_time_ms,
            initial_params,
            final_params: self.server.params,
        })
    }
}

/// Builds a simulation from `train`/`test` and runs all rounds.
pub fn run_training(spec: &ModelSpec, cfg: &FlConfig, train: &Batch, test: &Batch) -> Result<TrainingRun, FlError> {
    Simulation::new(spec.clone(), cfg.clone(), train, test.clone())?.run()
}
