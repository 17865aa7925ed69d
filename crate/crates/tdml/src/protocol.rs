//! Client, parameter-server, and trainer state machines plus the protocol's
//! decision rules: task publishing, registration and selection, key
//! exchange, and validation scheduling.
//!
//! `step` is a pure transition: it checks that the event is legal in the
//! node's current phase and converts it into emitted transactions and
//! messages — nothing externally visible happens outside an emission. The
//! heavyweight numerics (epoch execution, evaluation) run in the simulation
//! harness, which feeds the results back in as events; the cheap protocol
//! decisions (who is selected, who validates, what gets flagged) live here
//! and in `robust` as pure functions.

use crate::digest::{CanonicalBytes, Digest256};
use crate::ledger::{SessionKey, TxKind};
use crate::model::{layer_memory, GlobalModel};
use crate::pipeline::{shard_model, NodeSpec, ShardAssignment};
use crate::robust::DetectionReport;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("only {available} candidates for {needed} seats")]
    InsufficientCandidates { needed: usize, available: usize },
    #[error("candidate pool cannot hold the model in memory")]
    InsufficientMemory,
    #[error("event {event} illegal in phase {phase:?}")]
    IllegalTransition { phase: Phase, event: String },
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Minimum hardware a node must bring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineCapability {
    pub min_memory_bytes: u64,
    pub min_cpus: u32,
}

/// Job-wide training knobs. M (local models per round) equals N pipelines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub pipelines: u32,
    /// Top-K aggregation width; defaults to ⌊M/2⌋, floored at 1.
    pub top_k: u32,
    pub batch_size: u32,
    pub suspicion_tau: f64,
    /// Minimum accuracy shortfall below the peer mean before a flag fires.
    #[serde(default = "default_suspicion_margin")]
    pub suspicion_margin: f64,
    pub init_seed: u64,
    pub data_seed: u64,
}

fn default_suspicion_margin() -> f64 {
    crate::robust::DEFAULT_SUSPICION_MARGIN
}

impl TrainingConfig {
    pub fn default_top_k(pipelines: u32) -> u32 {
        (pipelines / 2).max(1)
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.pipelines < 1 {
            return Err(ProtocolError::InvalidConfig("need at least one pipeline".into()));
        }
        if self.top_k < 1 || self.top_k > self.pipelines {
            return Err(ProtocolError::InvalidConfig(format!(
                "top_k {} outside 1..={}",
                self.top_k, self.pipelines
            )));
        }
        if self.epochs < 1 {
            return Err(ProtocolError::InvalidConfig("need at least one epoch".into()));
        }
        if self.batch_size < 1 {
            return Err(ProtocolError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ProtocolError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Transaction payloads
// ---------------------------------------------------------------------------

/// The six fields of a task announcement, plaintext on the public chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAnnouncePayload {
    pub timestamp: u64,
    pub client: Uuid,
    pub task_name: String,
    pub reward_budget: u64,
    pub baseline: BaselineCapability,
    pub pipelines: u32,
}

impl TaskAnnouncePayload {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.reward_budget == 0 {
            return Err(ProtocolError::InvalidConfig("reward budget must be positive".into()));
        }
        if self.pipelines == 0 {
            return Err(ProtocolError::InvalidConfig("need at least one pipeline".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerRegisterPayload {
    pub timestamp: u64,
    pub server: Uuid,
    pub memory_bytes: u64,
    pub cpus: u32,
    pub compute_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiringAnnouncePayload {
    pub timestamp: u64,
    pub parameter_server: Uuid,
    pub baseline: BaselineCapability,
    pub budget_share: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerRegisterPayload {
    pub timestamp: u64,
    pub trainer: Uuid,
    pub memory_bytes: u64,
    pub cpus: u32,
    pub compute_score: f64,
}

/// Only the key identifier crosses the chain; key material never does.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyExchangePayload {
    pub initiator: Uuid,
    pub responder: Uuid,
    pub key_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShardUploadPayload {
    pub parameter_server: Uuid,
    pub trainer: Uuid,
    pub pipeline: u32,
    pub layer_lo: u32,
    pub layer_hi: u32,
    /// Base64 of the sealed layer slice.
    pub sealed_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientUploadPayload {
    pub pipeline: u32,
    pub epoch: u32,
    pub trainer: Uuid,
    pub layer_lo: u32,
    pub layer_hi: u32,
    /// Base64 of the sealed gradient record for the trainer's layer range.
    pub sealed_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalModelUploadPayload {
    pub pipeline: u32,
    pub epoch: u32,
    pub parameter_server: Uuid,
    /// Digest of the plaintext checkpoint bytes.
    pub model_digest: String,
    /// Base64 of the sealed checkpoint.
    pub sealed_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationResultPayload {
    pub pipeline: u32,
    pub model_author: Uuid,
    pub epoch: u32,
    pub accuracy: f64,
    pub loss: f64,
    pub validator: Uuid,
    pub decode_failure: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalModelPublishPayload {
    pub epoch: u32,
    pub version: u32,
    pub model_digest: String,
    pub aggregated_from: Vec<Uuid>,
    pub k: u32,
    pub sealed_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReportPayload {
    pub pipeline: u32,
    pub report: DetectionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardClaimPayload {
    pub node: Uuid,
    pub role: String,
    pub epochs_participated: u32,
}

// ---------------------------------------------------------------------------
// Selection rules
// ---------------------------------------------------------------------------

/// A node's public registration, as read off the chain.
#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub node: Uuid,
    pub memory_bytes: u64,
    pub cpus: u32,
    pub compute_score: f64,
}

/// Pick N parameter servers: filter by baseline capability, order by
/// (compute score desc, UUID asc), take the first N.
pub fn select_servers(
    registrations: &[Registration],
    baseline: &BaselineCapability,
    n: usize,
) -> Result<Vec<Uuid>, ProtocolError> {
    let mut eligible: Vec<&Registration> = registrations
        .iter()
        .filter(|r| r.memory_bytes >= baseline.min_memory_bytes && r.cpus >= baseline.min_cpus)
        .collect();
    if eligible.len() < n {
        return Err(ProtocolError::InsufficientCandidates {
            needed: n,
            available: eligible.len(),
        });
    }
    eligible.sort_by(|a, b| {
        b.compute_score
            .total_cmp(&a.compute_score)
            .then_with(|| a.node.cmp(&b.node))
    });
    Ok(eligible.iter().take(n).map(|r| r.node).collect())
}

/// Pick the trainers for one pipeline: drop candidates below baseline, sort
/// by (memory desc, UUID asc), take the shortest prefix whose summed memory
/// covers the model and which the greedy packer can actually place (a prefix
/// can satisfy the sum yet fragment, so packing is rechecked, extending the
/// prefix as needed).
pub fn select_trainers(
    model: &GlobalModel,
    candidates: &[NodeSpec],
    baseline: &BaselineCapability,
) -> Result<(Vec<NodeSpec>, ShardAssignment), ProtocolError> {
    let total = layer_memory(&model.arch).total;
    let mut eligible: Vec<NodeSpec> = candidates
        .iter()
        .filter(|c| c.memory_bytes >= baseline.min_memory_bytes)
        .cloned()
        .collect();
    eligible.sort_by(|a, b| {
        b.memory_bytes
            .cmp(&a.memory_bytes)
            .then_with(|| a.trainer.cmp(&b.trainer))
    });

    let mut summed = 0u64;
    let mut count = 0usize;
    for spec in &eligible {
        summed += spec.memory_bytes;
        count += 1;
        if summed >= total {
            break;
        }
    }
    if summed < total {
        return Err(ProtocolError::InsufficientMemory);
    }
    while count <= eligible.len() {
        if let Ok(assignment) = shard_model(model, &eligible[..count]) {
            return Ok((eligible[..count].to_vec(), assignment));
        }
        count += 1;
    }
    Err(ProtocolError::InsufficientMemory)
}

/// Both parties derive the same key from shared randomness:
/// digest(job_id ‖ a ‖ b ‖ nonce).
pub fn derive_session_key(job_tag: &str, a: Uuid, b: Uuid, nonce: u64) -> SessionKey {
    let mut c = CanonicalBytes::new();
    c.put_str(job_tag)
        .put_bytes(a.as_bytes())
        .put_bytes(b.as_bytes())
        .put_u64(nonce);
    SessionKey::from_bytes(c.digest().0)
}

/// The job-wide session key every member receives in its bootstrap
/// envelope; it seals batches, shards, gradients, and model uploads.
pub fn derive_job_key(job_tag: &str, nonce: u64) -> SessionKey {
    let mut c = CanonicalBytes::new();
    c.put_str(job_tag).put_str("job-key").put_u64(nonce);
    SessionKey::from_bytes(c.digest().0)
}

/// Assign a validator for a pending model: the idle server with the lowest
/// UUID that did not author it; none if every idle server authored it or no
/// server is idle.
pub fn schedule_validation(pending_author: Uuid, idle_servers: &[Uuid]) -> Option<Uuid> {
    idle_servers
        .iter()
        .filter(|&&s| s != pending_author)
        .min()
        .copied()
}

// ---------------------------------------------------------------------------
// Node state machine
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Client,
    ParameterServer,
    Trainer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    // client
    ClientIdle,
    ClientAwaitingRegistrations,
    ClientCoordinating,
    ClientDone,
    // parameter server
    PsIdle,
    PsRegistered,
    PsHiring,
    PsKeyExchanged,
    PsSharding,
    PsTraining,
    PsAwaitingValidation,
    PsValidating,
    PsAwaitingGlobal,
    PsFinished,
    // trainer
    TrIdle,
    TrCandidate,
    TrRegistered,
    TrShardLoaded,
    TrTraining,
    TrBlocked,
    TrFinished,
}

/// Off-chain message bodies carried over the simulated transport.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Message {
    /// Sealed private-chain bootstrap info (job tag + job key nonce).
    PrivateBootstrap { job_tag: String, job_key_nonce: u64 },
    /// Shard delivery acknowledgement back to the parameter server.
    ShardAck { pipeline: u32 },
    /// Shard integrity failure report.
    ShardNack { pipeline: u32 },
    /// Go signal for the next epoch after a re-shard.
    EpochGo { epoch: u32 },
}

/// An externally visible action produced by `step`.
#[derive(Clone, Debug, PartialEq)]
pub enum Emission {
    /// Write a transaction (authored by the stepping node).
    Tx {
        kind: TxKind,
        public: bool,
        payload: Vec<u8>,
    },
    /// Deliver a message to another node at the next tick.
    Send { to: Uuid, message: Message },
}

fn tx(kind: TxKind, public: bool, payload: &impl Serialize) -> Emission {
    Emission::Tx {
        kind,
        public,
        payload: serde_json::to_vec(payload).expect("payload serializes"),
    }
}

/// Per-node protocol state. Key identifiers are tracked for the record; key
/// material stays with the harness.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeState {
    pub id: Uuid,
    pub role: Role,
    pub phase: Phase,
    pub epoch: u32,
    pub pipeline: Option<u32>,
    /// A trainer's parameter server (set on PrivateInfo).
    pub counterpart: Option<Uuid>,
    pub key_ids: Vec<Digest256>,
}

impl NodeState {
    pub fn new(id: Uuid, role: Role) -> NodeState {
        let phase = match role {
            Role::Client => Phase::ClientIdle,
            Role::ParameterServer => Phase::PsIdle,
            Role::Trainer => Phase::TrIdle,
        };
        NodeState {
            id,
            role,
            phase,
            epoch: 0,
            pipeline: None,
            counterpart: None,
            key_ids: Vec::new(),
        }
    }
}

/// Events a node can observe. Payload-bearing events arrive with their
/// transaction bodies already built (numeric results belong to the harness);
/// the state machine guards ordering and turns them into emissions.
#[derive(Clone, Debug)]
pub enum Event {
    // client
    StartJob {
        announce: TaskAnnouncePayload,
    },
    ServersSelected {
        key_exchanges: Vec<KeyExchangePayload>,
        bootstraps: Vec<(Uuid, Message)>,
    },
    JobFinished,
    // parameter server
    TaskSeen {
        register: ServerRegisterPayload,
    },
    PrivateBootstrap {
        hiring: HiringAnnouncePayload,
        pipeline: u32,
    },
    TrainersSelected {
        key_exchanges: Vec<KeyExchangePayload>,
        bootstraps: Vec<(Uuid, Message)>,
    },
    ShardDispatch {
        shard_uploads: Vec<ShardUploadPayload>,
    },
    ShardsAcked,
    EpochCompleted {
        upload: LocalModelUploadPayload,
    },
    AssignValidation {
        results: Vec<ValidationResultPayload>,
        detection: Option<DetectionReportPayload>,
        publish: Option<GlobalModelPublishPayload>,
    },
    ValidationDone,
    GlobalReady {
        epoch: u32,
        epoch_go: Vec<Uuid>,
    },
    JobComplete {
        claim: RewardClaimPayload,
    },
    // trainer
    HiringSeen {
        register: TrainerRegisterPayload,
    },
    PrivateInfo {
        register: TrainerRegisterPayload,
        pipeline: u32,
        from_ps: Uuid,
    },
    ShardReceived {
        pipeline: u32,
        ok: bool,
    },
    EpochStarts {
        epoch: u32,
    },
    TrainerEpochDone {
        upload: GradientUploadPayload,
    },
    Blocked,
}

impl Event {
    fn name(&self) -> &'static str {
        match self {
            Event::StartJob { .. } => "StartJob",
            Event::ServersSelected { .. } => "ServersSelected",
            Event::JobFinished => "JobFinished",
            Event::TaskSeen { .. } => "TaskSeen",
            Event::PrivateBootstrap { .. } => "PrivateBootstrap",
            Event::TrainersSelected { .. } => "TrainersSelected",
            Event::ShardDispatch { .. } => "ShardDispatch",
            Event::ShardsAcked => "ShardsAcked",
            Event::EpochCompleted { .. } => "EpochCompleted",
            Event::AssignValidation { .. } => "AssignValidation",
            Event::ValidationDone => "ValidationDone",
            Event::GlobalReady { .. } => "GlobalReady",
            Event::JobComplete { .. } => "JobComplete",
            Event::HiringSeen { .. } => "HiringSeen",
            Event::PrivateInfo { .. } => "PrivateInfo",
            Event::ShardReceived { .. } => "ShardReceived",
            Event::EpochStarts { .. } => "EpochStarts",
            Event::TrainerEpochDone { .. } => "TrainerEpochDone",
            Event::Blocked => "Blocked",
        }
    }
}

/// Pure protocol transition. Returns the successor state and the emissions;
/// any (phase, event) pair outside the workflow is an IllegalTransition.
pub fn step(state: &NodeState, event: &Event) -> Result<(NodeState, Vec<Emission>), ProtocolError> {
    use Event as E;
    use Phase as P;

    let illegal = || ProtocolError::IllegalTransition {
        phase: state.phase,
        event: event.name().to_string(),
    };
    let mut next = state.clone();
    let emissions = match (state.phase, event) {
        // -------------------------------------------------- client
        (P::ClientIdle, E::StartJob { announce }) => {
            announce.validate()?;
            next.phase = P::ClientAwaitingRegistrations;
            vec![tx(TxKind::TaskAnnounce, true, announce)]
        }
        (P::ClientAwaitingRegistrations, E::ServersSelected { key_exchanges, bootstraps }) => {
            next.phase = P::ClientCoordinating;
            let mut out: Vec<Emission> = key_exchanges
                .iter()
                .map(|k| tx(TxKind::KeyExchange, true, k))
                .collect();
            for (to, message) in bootstraps {
                out.push(Emission::Send {
                    to: *to,
                    message: message.clone(),
                });
            }
            out
        }
        (P::ClientCoordinating, E::JobFinished) => {
            next.phase = P::ClientDone;
            vec![]
        }

        // -------------------------------------- parameter server setup
        (P::PsIdle, E::TaskSeen { register }) => {
            next.phase = P::PsRegistered;
            vec![tx(TxKind::ServerRegister, true, register)]
        }
        (P::PsRegistered, E::PrivateBootstrap { hiring, pipeline }) => {
            next.phase = P::PsHiring;
            next.pipeline = Some(*pipeline);
            vec![tx(TxKind::HiringAnnounce, true, hiring)]
        }
        (P::PsHiring, E::TrainersSelected { key_exchanges, bootstraps }) => {
            next.phase = P::PsKeyExchanged;
            let mut out: Vec<Emission> = key_exchanges
                .iter()
                .map(|k| tx(TxKind::KeyExchange, true, k))
                .collect();
            for (to, message) in bootstraps {
                out.push(Emission::Send {
                    to: *to,
                    message: message.clone(),
                });
            }
            out
        }
        (P::PsKeyExchanged, E::ShardDispatch { shard_uploads }) => {
            next.phase = P::PsSharding;
            shard_uploads
                .iter()
                .map(|upload| tx(TxKind::ShardUpload, false, upload))
                .collect()
        }
        (P::PsSharding, E::ShardsAcked) => {
            next.phase = P::PsTraining;
            vec![]
        }

        // -------------------------------------- parameter server epochs
        (P::PsTraining, E::EpochCompleted { upload }) => {
            next.phase = P::PsAwaitingValidation;
            next.epoch = upload.epoch;
            vec![tx(TxKind::LocalModelUpload, false, upload)]
        }
        (P::PsAwaitingValidation, E::AssignValidation { results, detection, publish }) => {
            next.phase = P::PsValidating;
            let mut out: Vec<Emission> = results
                .iter()
                .map(|r| tx(TxKind::ValidationResult, false, r))
                .collect();
            if let Some(report) = detection {
                out.push(tx(TxKind::DetectionReport, false, report));
            }
            if let Some(publish) = publish {
                out.push(tx(TxKind::GlobalModelPublish, false, publish));
            }
            out
        }
        (P::PsValidating, E::ValidationDone) => {
            next.phase = P::PsAwaitingGlobal;
            vec![]
        }
        (P::PsAwaitingValidation, E::GlobalReady { epoch, epoch_go }) => {
            // This server was not drafted to validate this round.
            next.phase = P::PsTraining;
            next.epoch = *epoch;
            epoch_go
                .iter()
                .map(|&to| Emission::Send {
                    to,
                    message: Message::EpochGo { epoch: *epoch },
                })
                .collect()
        }
        (P::PsAwaitingGlobal, E::GlobalReady { epoch, epoch_go }) => {
            next.phase = P::PsTraining;
            next.epoch = *epoch;
            epoch_go
                .iter()
                .map(|&to| Emission::Send {
                    to,
                    message: Message::EpochGo { epoch: *epoch },
                })
                .collect()
        }
        (P::PsAwaitingValidation | P::PsAwaitingGlobal, E::JobComplete { claim }) => {
            next.phase = P::PsFinished;
            vec![tx(TxKind::RewardClaim, false, claim)]
        }

        // ----------------------------------------------------- trainer
        (P::TrIdle, E::HiringSeen { register }) => {
            next.phase = P::TrCandidate;
            vec![tx(TxKind::TrainerRegister, true, register)]
        }
        (P::TrCandidate, E::PrivateInfo { register, pipeline, from_ps }) => {
            next.phase = P::TrRegistered;
            next.pipeline = Some(*pipeline);
            next.counterpart = Some(*from_ps);
            vec![tx(TxKind::TrainerRegister, false, register)]
        }
        (P::TrRegistered, E::ShardReceived { pipeline, ok }) => {
            let to = state.counterpart.unwrap_or(Uuid::nil());
            if *ok {
                next.phase = P::TrShardLoaded;
                vec![Emission::Send {
                    to,
                    message: Message::ShardAck { pipeline: *pipeline },
                }]
            } else {
                vec![Emission::Send {
                    to,
                    message: Message::ShardNack { pipeline: *pipeline },
                }]
            }
        }
        (P::TrShardLoaded, E::EpochStarts { epoch }) => {
            next.phase = P::TrTraining;
            next.epoch = *epoch;
            vec![]
        }
        (P::TrTraining, E::TrainerEpochDone { upload }) => {
            next.phase = P::TrShardLoaded;
            vec![tx(TxKind::GradientUpload, false, upload)]
        }
        (P::TrShardLoaded | P::TrTraining, E::Blocked) => {
            next.phase = P::TrBlocked;
            vec![]
        }
        (P::TrShardLoaded, E::JobComplete { claim }) => {
            next.phase = P::TrFinished;
            vec![tx(TxKind::RewardClaim, false, claim)]
        }

        _ => return Err(illegal()),
    };
    Ok((next, emissions))
}
