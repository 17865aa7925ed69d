//! Scenario configuration and the deterministic tick-driven runner.
//!
//! The runner is the single sequencer: per tick it delivers events to node
//! state machines in deterministic order, collects their emitted
//! transactions, and seals one block per chain per tick. Heavy numerics
//! (epoch execution, evaluation) run here and feed the machines through
//! events, so every externally visible byte originates from a
//! `protocol::step` emission. Identical scenarios produce byte-identical
//! chains, metrics, and reports.

use crate::digest::{CanonicalBytes, Digest256};
use crate::ledger::{self, Chain, SessionKey, Transaction, TxKind};
use crate::model::{
    self, checkpoint_digest, encode_checkpoint, evaluate, init_model, synthetic_blobs, Arch,
    GlobalModel, GradientRecord, SynthSpec,
};
use crate::pipeline::{self, NodeSpec, PipelineState, ShardAssignment};
use crate::protocol::{
    derive_job_key, derive_session_key, schedule_validation, select_servers,
    select_trainers, step, BaselineCapability, DetectionReportPayload, Emission, Event,
    GlobalModelPublishPayload, GradientUploadPayload, HiringAnnouncePayload, KeyExchangePayload,
    LocalModelUploadPayload, Message, NodeState, Phase, ProtocolError, Registration,
    RewardClaimPayload, Role, ServerRegisterPayload, ShardUploadPayload, TaskAnnouncePayload,
    TrainerRegisterPayload, TrainingConfig, ValidationResultPayload,
};
use crate::robust::{
    self, aggregate_mean, aggregate_topk, detect_malicious, flag_suspicious, AttackConfig,
    AttackKind, PendingModel, RankedModel, SampledGradients, ValidationResult,
};
use crate::store::{self, batch_dataset, split_batches, Batch, BlobStore, Cid, Dataset};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario invalid: {0}")]
    BadScenario(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Ledger(#[from] ledger::LedgerError),
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Robust(#[from] robust::RobustError),
}

// ---------------------------------------------------------------------------
// Scenario
// ---------------------------------------------------------------------------

/// Execution mode: the three-way comparison is one config dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SingleNode,
    Fedavg,
    Tdml,
}

/// One node row in the scenario roster.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub name: String,
    pub memory_bytes: u64,
    pub cpus: u32,
    pub compute_score: f64,
}

/// A validator configured to misreport one accuracy (proof-of-training
/// scenarios).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiarConfig {
    pub validator: String,
    pub epoch: u32,
    pub delta: f64,
}

/// Attack plan entry, targeting a trainer by roster name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackEntry {
    pub kind: AttackKind,
    pub target: String,
    #[serde(default)]
    pub shift: f64,
    #[serde(default)]
    pub sigma_sq: f64,
    #[serde(default)]
    pub start_epoch: u32,
}

fn default_ps_pool_percent() -> u32 {
    30
}

/// Complete, self-contained description of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub job_tag: String,
    pub mode: Mode,
    pub master_seed: u64,
    pub reward_budget: u64,
    pub training: TrainingConfig,
    pub layer_dims: Vec<u32>,
    #[serde(default = "four")]
    pub precision_bytes: u32,
    pub dataset: SynthSpec,
    pub baseline: BaselineCapability,
    pub servers: Vec<RosterEntry>,
    pub trainers: Vec<RosterEntry>,
    #[serde(default)]
    pub attacks: Vec<AttackEntry>,
    #[serde(default)]
    pub liar: Option<LiarConfig>,
    #[serde(default = "default_ps_pool_percent")]
    pub ps_pool_percent: u32,
}

fn four() -> u32 {
    4
}

impl Scenario {
    pub fn validate(&self) -> Result<(), SimError> {
        self.training
            .validate()
            .map_err(|e| SimError::BadScenario(e.to_string()))?;
        if self.reward_budget == 0 {
            return Err(SimError::BadScenario("reward budget must be positive".into()));
        }
        if (self.servers.len() as u32) < self.training.pipelines {
            return Err(SimError::BadScenario(format!(
                "{} servers for {} pipelines",
                self.servers.len(),
                self.training.pipelines
            )));
        }
        if self.trainers.is_empty() {
            return Err(SimError::BadScenario("no trainers in roster".into()));
        }
        if self.ps_pool_percent > 100 {
            return Err(SimError::BadScenario("ps_pool_percent above 100".into()));
        }
        Arch::new(self.layer_dims.clone(), self.precision_bytes)
            .map_err(|e| SimError::BadScenario(e.to_string()))?;
        let names: std::collections::BTreeSet<&str> = self
            .servers
            .iter()
            .chain(self.trainers.iter())
            .map(|r| r.name.as_str())
            .collect();
        if names.len() != self.servers.len() + self.trainers.len() {
            return Err(SimError::BadScenario("duplicate roster names".into()));
        }
        for attack in &self.attacks {
            if !self.trainers.iter().any(|t| t.name == attack.target) {
                return Err(SimError::BadScenario(format!(
                    "attack targets unknown trainer {:?}",
                    attack.target
                )));
            }
            if attack.kind == AttackKind::MeanShift && attack.shift == 0.0 {
                return Err(SimError::BadScenario("mean-shift attack with zero delta".into()));
            }
            if attack.kind == AttackKind::Gaussian && attack.sigma_sq <= 0.0 {
                return Err(SimError::BadScenario("gaussian attack needs positive variance".into()));
            }
        }
        if let Some(liar) = &self.liar {
            if !self.servers.iter().any(|s| s.name == liar.validator) {
                return Err(SimError::BadScenario(format!(
                    "liar names unknown server {:?}",
                    liar.validator
                )));
            }
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch::new(self.layer_dims.clone(), self.precision_bytes).expect("validated")
    }
}

/// Stable node identity: digest of (job-independent) node name.
pub fn node_uuid(name: &str) -> Uuid {
    let mut c = CanonicalBytes::new();
    c.put_str("node").put_str(name);
    let d = c.digest();
    Uuid::from_bytes(d.0[..16].try_into().expect("16 bytes"))
}

// ---------------------------------------------------------------------------
// Run output
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub pipeline: u32,
    pub epoch: u32,
    pub train_loss: f64,
    pub test_acc: f64,
    pub global_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetricsRow {
    pub pipeline_id: u32,
    pub epoch: u32,
    pub mean_loss: f64,
    pub batches: usize,
    pub local_model_digest: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub tick: u64,
    pub author: Uuid,
    pub kind: TxKind,
}

/// Who is who, for settlement and reporting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Roster {
    pub client: Uuid,
    /// name → uuid for every roster node.
    pub names: BTreeMap<String, Uuid>,
    pub parameter_servers: Vec<Uuid>,
    pub trainers: Vec<Uuid>,
}

pub struct SimOutput {
    pub public_chain: Chain,
    pub private_chain: Chain,
    pub store: BlobStore,
    pub metrics: Vec<MetricsRow>,
    pub pipeline_metrics: Vec<PipelineMetricsRow>,
    pub detections: Vec<DetectionReportPayload>,
    pub trace: Vec<TraceEntry>,
    pub final_global: GlobalModel,
    pub final_global_acc: f64,
    /// trainer uuid → epoch at which it was blocked.
    pub blocked: BTreeMap<Uuid, u32>,
    pub roster: Roster,
    pub test_cid: Cid,
}

// ---------------------------------------------------------------------------
// Sequencer
// ---------------------------------------------------------------------------

/// Collects the tick's emissions and seals one block per chain per tick.
struct Sequencer {
    public: Chain,
    private: Chain,
    tick: u64,
    pending_public: Vec<(Uuid, TxKind, Vec<u8>)>,
    pending_private: Vec<(Uuid, TxKind, Vec<u8>)>,
    mailbox: Vec<(Uuid, Uuid, Message)>,
}

impl Sequencer {
    fn new(job_tag: &str) -> Sequencer {
        Sequencer {
            public: Chain::new("public"),
            private: Chain::new(job_tag),
            tick: 0,
            pending_public: Vec::new(),
            pending_private: Vec::new(),
            mailbox: Vec::new(),
        }
    }

    fn emit(&mut self, author: Uuid, emissions: Vec<Emission>) {
        for emission in emissions {
            match emission {
                Emission::Tx { kind, public, payload } => {
                    let pending = if public {
                        &mut self.pending_public
                    } else {
                        &mut self.pending_private
                    };
                    pending.push((author, kind, payload));
                }
                Emission::Send { to, message } => {
                    self.mailbox.push((author, to, message));
                }
            }
        }
    }

    /// Seal the tick: transactions ordered by (author uuid, emission order),
    /// one block per chain when non-empty; advance the clock.
    fn seal_tick(&mut self) -> Result<(), ledger::LedgerError> {
        for (pending, chain) in [
            (&mut self.pending_public, &mut self.public),
            (&mut self.pending_private, &mut self.private),
        ] {
            if pending.is_empty() {
                continue;
            }
            pending.sort_by(|a, b| a.0.cmp(&b.0));
            let txs: Vec<Transaction> = pending
                .drain(..)
                .map(|(author, kind, payload)| Transaction::new(self.tick, author, kind, payload))
                .collect();
            chain.append_block(txs, self.tick)?;
        }
        self.tick += 1;
        Ok(())
    }

    fn take_mail(&mut self) -> Vec<(Uuid, Uuid, Message)> {
        let mut mail = std::mem::take(&mut self.mailbox);
        mail.sort_by(|a, b| a.0.cmp(&b.0));
        mail
    }
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

/// Seal a byte blob with the job key under a deterministic per-use nonce.
fn seal_b64(plaintext: &[u8], key: &SessionKey, nonce_tag: &str, nonce_n: u64) -> String {
    let mut c = CanonicalBytes::new();
    c.put_str(nonce_tag).put_u64(nonce_n);
    let seed = u64::from_le_bytes(c.digest().0[..8].try_into().unwrap());
    let env = ledger::seal(plaintext, key, ledger::derive_nonce(&key.key_id, seed));
    b64(&env.to_bytes())
}

pub fn open_b64(sealed_b64: &str, key: &SessionKey) -> Result<Vec<u8>, SimError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(sealed_b64)
        .map_err(|_| SimError::BadScenario("sealed payload is not base64".into()))?;
    let env = ledger::Envelope::from_bytes(&bytes)?;
    Ok(ledger::open(&env, key)?)
}

/// Deterministic seed for one Gaussian attack draw.
pub fn attack_draw_seed(master_seed: u64, trainer: Uuid, epoch: u32, batch: u64) -> u64 {
    let mut c = CanonicalBytes::new();
    c.put_u64(master_seed)
        .put_bytes(trainer.as_bytes())
        .put_u32(epoch)
        .put_u64(batch);
    u64::from_le_bytes(c.digest().0[..8].try_into().unwrap())
}

/// Store the sealed test split; `batch_index = u32::MAX` marks test data.
pub fn put_test_set(blob_store: &mut BlobStore, test: &Dataset, key: &SessionKey) -> Cid {
    let batch = Batch {
        features: test.features.clone(),
        rows: test.rows,
        cols: test.cols,
        labels: test.labels.clone(),
        batch_index: u32::MAX,
    };
    store::put_sealed_batch(blob_store, &batch, key)
}

// ---------------------------------------------------------------------------
// Pipeline bookkeeping inside the runner
// ---------------------------------------------------------------------------

struct PipelineCtx {
    id: u32,
    ps: Uuid,
    assignment: ShardAssignment,
    trainer_specs: Vec<NodeSpec>,
    cids: Vec<Cid>,
    /// Latest locally trained model (this epoch).
    local: Option<GlobalModel>,
    retired: bool,
}

/// Per-epoch record of one pipeline's uploads, fed to validation/aggregation.
struct EpochUpload {
    pipeline: u32,
    ps: Uuid,
    local: GlobalModel,
    mean_loss: f64,
    records: Vec<GradientRecord>,
}

// ---------------------------------------------------------------------------
// The runner
// ---------------------------------------------------------------------------

pub fn run_scenario(scenario: &Scenario) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    let arch = scenario.arch();
    let cfg = &scenario.training;
    let n_pipelines = cfg.pipelines as usize;

    // Roster identities.
    let client = node_uuid("client");
    let mut roster = Roster {
        client,
        ..Roster::default()
    };
    for entry in scenario.servers.iter().chain(scenario.trainers.iter()) {
        roster.names.insert(entry.name.clone(), node_uuid(&entry.name));
    }

    let mut nodes: BTreeMap<Uuid, NodeState> = BTreeMap::new();
    nodes.insert(client, NodeState::new(client, Role::Client));
    for entry in &scenario.servers {
        let id = roster.names[&entry.name];
        nodes.insert(id, NodeState::new(id, Role::ParameterServer));
    }
    for entry in &scenario.trainers {
        let id = roster.names[&entry.name];
        nodes.insert(id, NodeState::new(id, Role::Trainer));
    }

    let attacks: Vec<AttackConfig> = scenario
        .attacks
        .iter()
        .map(|a| AttackConfig {
            kind: a.kind,
            target: roster.names[&a.target],
            shift: a.shift,
            sigma_sq: a.sigma_sq,
            start_epoch: a.start_epoch,
        })
        .collect();

    // Job materials.
    let job_key = derive_job_key(&scenario.job_tag, scenario.master_seed);
    let (train_set, test_set) = synthetic_blobs(&scenario.dataset, scenario.master_seed);
    let mut blob_store = BlobStore::new();
    let all_cids = batch_dataset(
        &mut blob_store,
        &train_set,
        cfg.batch_size as usize,
        cfg.data_seed,
        &job_key,
    )?;
    let test_cid = put_test_set(&mut blob_store, &test_set, &job_key);
    // Validators fetch D through its CID, so evaluation everywhere uses the
    // wire-canonical (f32-rounded) bytes, same as any later auditor.
    let test_set = {
        let batch = store::get_sealed_batch(&blob_store, &test_cid, &job_key)?;
        Dataset {
            features: batch.features,
            rows: batch.rows,
            cols: batch.cols,
            labels: batch.labels,
        }
    };
    let splits = split_batches(&all_cids, n_pipelines);
    let global0 = init_model(&arch, cfg.init_seed);

    let mut seq = Sequencer::new(&scenario.job_tag);
    let apply = |nodes: &mut BTreeMap<Uuid, NodeState>,
                     seq: &mut Sequencer,
                     id: Uuid,
                     event: Event|
     -> Result<(), SimError> {
        let state = nodes.get(&id).expect("known node");
        let (next, emissions) = step(state, &event)?;
        nodes.insert(id, next);
        seq.emit(id, emissions);
        Ok(())
    };

    // ---- t0: task announcement -------------------------------------------
    let announce = TaskAnnouncePayload {
        timestamp: seq.tick,
        client,
        task_name: scenario.job_tag.clone(),
        reward_budget: scenario.reward_budget,
        baseline: scenario.baseline,
        pipelines: cfg.pipelines,
    };
    apply(&mut nodes, &mut seq, client, Event::StartJob { announce })?;
    seq.seal_tick()?;

    // ---- t1: server registrations ----------------------------------------
    let mut registrations = Vec::new();
    for entry in &scenario.servers {
        let id = roster.names[&entry.name];
        let register = ServerRegisterPayload {
            timestamp: seq.tick,
            server: id,
            memory_bytes: entry.memory_bytes,
            cpus: entry.cpus,
            compute_score: entry.compute_score,
        };
        registrations.push(Registration {
            node: id,
            memory_bytes: entry.memory_bytes,
            cpus: entry.cpus,
            compute_score: entry.compute_score,
        });
        apply(&mut nodes, &mut seq, id, Event::TaskSeen { register })?;
    }
    seq.seal_tick()?;

    // ---- t2: server selection, key exchange, private bootstrap -----------
    let selected = select_servers(&registrations, &scenario.baseline, n_pipelines)?;
    roster.parameter_servers = selected.clone();
    let mut key_exchanges = Vec::new();
    let mut bootstraps = Vec::new();
    for (i, &ps) in selected.iter().enumerate() {
        let key = derive_session_key(&scenario.job_tag, client, ps, scenario.master_seed + i as u64);
        key_exchanges.push(KeyExchangePayload {
            initiator: client,
            responder: ps,
            key_id: key.key_id.to_hex(),
        });
        bootstraps.push((
            ps,
            Message::PrivateBootstrap {
                job_tag: scenario.job_tag.clone(),
                job_key_nonce: scenario.master_seed,
            },
        ));
    }
    apply(
        &mut nodes,
        &mut seq,
        client,
        Event::ServersSelected {
            key_exchanges,
            bootstraps,
        },
    )?;
    seq.seal_tick()?;
    let _ = seq.take_mail();

    // ---- t3: hiring announcements -----------------------------------------
    let per_ps_budget = scenario.reward_budget / (selected.len().max(1) as u64);
    for (i, &ps) in selected.iter().enumerate() {
        let hiring = HiringAnnouncePayload {
            timestamp: seq.tick,
            parameter_server: ps,
            baseline: scenario.baseline,
            budget_share: per_ps_budget.max(1),
        };
        apply(
            &mut nodes,
            &mut seq,
            ps,
            Event::PrivateBootstrap {
                hiring,
                pipeline: i as u32,
            },
        )?;
    }
    seq.seal_tick()?;

    // ---- t4: trainer replies (public registration) ------------------------
    let mut candidate_pool: Vec<NodeSpec> = Vec::new();
    for entry in &scenario.trainers {
        let id = roster.names[&entry.name];
        roster.trainers.push(id);
        let register = TrainerRegisterPayload {
            timestamp: seq.tick,
            trainer: id,
            memory_bytes: entry.memory_bytes,
            cpus: entry.cpus,
            compute_score: entry.compute_score,
        };
        candidate_pool.push(NodeSpec {
            trainer: id,
            memory_bytes: entry.memory_bytes,
            compute_score: entry.compute_score,
            address: entry.name.clone(),
        });
        apply(&mut nodes, &mut seq, id, Event::HiringSeen { register })?;
    }
    seq.seal_tick()?;

    // ---- t5: per-pipeline trainer selection + key exchange ----------------
    let mut pipelines: Vec<PipelineCtx> = Vec::new();
    for (i, &ps) in selected.iter().enumerate() {
        let (chosen, assignment) = select_trainers(&global0, &candidate_pool, &scenario.baseline)
            .map_err(|_| SimError::BadScenario(format!("pipeline {i}: trainer pool exhausted")))?;
        candidate_pool.retain(|c| !chosen.iter().any(|k| k.trainer == c.trainer));
        let key_exchanges: Vec<KeyExchangePayload> = chosen
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                let key = derive_session_key(
                    &scenario.job_tag,
                    ps,
                    spec.trainer,
                    scenario.master_seed + (i * 100 + j) as u64,
                );
                KeyExchangePayload {
                    initiator: ps,
                    responder: spec.trainer,
                    key_id: key.key_id.to_hex(),
                }
            })
            .collect();
        let bootstraps: Vec<(Uuid, Message)> = chosen
            .iter()
            .map(|spec| {
                (
                    spec.trainer,
                    Message::PrivateBootstrap {
                        job_tag: scenario.job_tag.clone(),
                        job_key_nonce: scenario.master_seed,
                    },
                )
            })
            .collect();
        apply(
            &mut nodes,
            &mut seq,
            ps,
            Event::TrainersSelected {
                key_exchanges,
                bootstraps,
            },
        )?;
        pipelines.push(PipelineCtx {
            id: i as u32,
            ps,
            assignment,
            trainer_specs: chosen,
            cids: splits[i].clone(),
            local: None,
            retired: false,
        });
    }
    seq.seal_tick()?;
    let _ = seq.take_mail();

    // ---- t6: trainer private registrations --------------------------------
    for ctx in &pipelines {
        for spec in &ctx.trainer_specs {
            let register = TrainerRegisterPayload {
                timestamp: seq.tick,
                trainer: spec.trainer,
                memory_bytes: spec.memory_bytes,
                cpus: 0,
                compute_score: spec.compute_score,
            };
            apply(
                &mut nodes,
                &mut seq,
                spec.trainer,
                Event::PrivateInfo {
                    register,
                    pipeline: ctx.id,
                    from_ps: ctx.ps,
                },
            )?;
        }
    }
    seq.seal_tick()?;

    // ---- t7: shard uploads -------------------------------------------------
    for ctx in &pipelines {
        let shards = pipeline::make_shards(&global0, &ctx.assignment);
        let shard_uploads: Vec<ShardUploadPayload> = shards
            .iter()
            .map(|shard| ShardUploadPayload {
                parameter_server: ctx.ps,
                trainer: shard.trainer,
                pipeline: ctx.id,
                layer_lo: shard.layer_range.start as u32,
                layer_hi: shard.layer_range.end as u32,
                sealed_b64: seal_b64(
                    &model::encode_layers(&shard.layers),
                    &job_key,
                    "shard",
                    (ctx.id as u64) << 32 | shard.layer_range.start as u64,
                ),
            })
            .collect();
        apply(&mut nodes, &mut seq, ctx.ps, Event::ShardDispatch { shard_uploads })?;
    }
    seq.seal_tick()?;

    // ---- t8: shard acks ------------------------------------------------------
    for ctx in &pipelines {
        for spec in &ctx.trainer_specs {
            apply(
                &mut nodes,
                &mut seq,
                spec.trainer,
                Event::ShardReceived {
                    pipeline: ctx.id,
                    ok: true,
                },
            )?;
        }
    }
    seq.seal_tick()?;
    let _ = seq.take_mail();

    // ---- t9: everyone enters the training loop -----------------------------
    for ctx in &pipelines {
        apply(&mut nodes, &mut seq, ctx.ps, Event::ShardsAcked)?;
        for spec in &ctx.trainer_specs {
            apply(
                &mut nodes,
                &mut seq,
                spec.trainer,
                Event::EpochStarts { epoch: 0 },
            )?;
        }
    }
    seq.seal_tick()?;

    // ---- epochs -------------------------------------------------------------
    let mut current_global = global0.clone();
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut pipeline_metrics: Vec<PipelineMetricsRow> = Vec::new();
    let mut detections: Vec<DetectionReportPayload> = Vec::new();
    let mut blocked: BTreeMap<Uuid, u32> = BTreeMap::new();
    let liar = scenario.liar.as_ref().map(|l| (roster.names[&l.validator], l.epoch, l.delta));

    for epoch in 0..cfg.epochs {
        // Training tick: every active pipeline runs its epoch; trainers then
        // upload first-batch gradient records, the server its local model.
        let mut uploads: Vec<EpochUpload> = Vec::new();
        for ctx in pipelines.iter_mut().filter(|c| !c.retired) {
            let mut state = PipelineState::load(
                ctx.id,
                &current_global,
                ctx.assignment.clone(),
                job_key.clone(),
                cfg.data_seed,
            );
            let master_seed = scenario.master_seed;
            let attacks_ref = &attacks;
            let mut tamper = |trainer: Uuid, ep: u32, batch: u64, record: &mut GradientRecord| {
                for attack in attacks_ref {
                    robust::apply_attack(
                        attack,
                        trainer,
                        ep,
                        &mut record.layers,
                        attack_draw_seed(master_seed, trainer, ep, batch),
                    );
                }
            };
            let outcome = pipeline::run_epoch(
                &mut state,
                &blob_store,
                &ctx.cids,
                epoch,
                cfg.learning_rate,
                Some(&mut tamper),
            )?;
            let local = pipeline::local_model(outcome.local_params, &arch, current_global.version + 1);
            ctx.local = Some(local.clone());
            uploads.push(EpochUpload {
                pipeline: ctx.id,
                ps: ctx.ps,
                local,
                mean_loss: outcome.mean_loss,
                records: outcome.epoch_records,
            });
        }

        for upload in &uploads {
            let ctx = &pipelines[upload.pipeline as usize];
            // Trainers upload their sealed gradient records.
            for record in &upload.records {
                let range = ctx
                    .assignment
                    .shards
                    .iter()
                    .find(|(t, _)| *t == record.producer)
                    .map(|(_, r)| r.clone())
                    .expect("record producer is assigned");
                let payload = GradientUploadPayload {
                    pipeline: upload.pipeline,
                    epoch,
                    trainer: record.producer,
                    layer_lo: range.start as u32,
                    layer_hi: range.end as u32,
                    sealed_b64: seal_b64(
                        &model::encode_layers(&record.layers),
                        &job_key,
                        "grad",
                        (upload.pipeline as u64) << 40
                            | (epoch as u64) << 20
                            | range.start as u64,
                    ),
                };
                apply(
                    &mut nodes,
                    &mut seq,
                    record.producer,
                    Event::TrainerEpochDone { upload: payload },
                )?;
            }
            // The parameter server uploads the sealed local model.
            let ckpt = encode_checkpoint(&upload.local);
            let payload = LocalModelUploadPayload {
                pipeline: upload.pipeline,
                epoch,
                parameter_server: upload.ps,
                model_digest: Digest256::of(&ckpt).to_hex(),
                sealed_b64: seal_b64(
                    &ckpt,
                    &job_key,
                    "local",
                    (upload.pipeline as u64) << 32 | epoch as u64,
                ),
            };
            apply(
                &mut nodes,
                &mut seq,
                upload.ps,
                Event::EpochCompleted { upload: payload },
            )?;
        }
        seq.seal_tick()?;

        // Validation + aggregation tick.
        let (results, flagged_pipeline, detection, new_global) = match scenario.mode {
            Mode::Tdml => validate_and_aggregate(
                scenario,
                &mut nodes,
                &mut seq,
                &pipelines,
                &uploads,
                &test_set,
                &current_global,
                epoch,
                liar,
                &job_key,
            )?,
            Mode::Fedavg | Mode::SingleNode => {
                fedavg_aggregate(scenario, &mut nodes, &mut seq, &uploads, &current_global, epoch, &job_key)?
            }
        };

        // Detection consequences: block attributed trainers, retire pipeline.
        if let Some(payload) = &detection {
            detections.push(payload.clone());
            for trainer in &payload.report.attributed_trainers {
                blocked.insert(*trainer, epoch);
                if nodes[trainer].phase == Phase::TrShardLoaded
                    || nodes[trainer].phase == Phase::TrTraining
                {
                    apply(&mut nodes, &mut seq, *trainer, Event::Blocked)?;
                }
            }
            if let Some(flagged) = flagged_pipeline {
                pipelines[flagged as usize].retired = true;
            }
        }

        let global_model = pipeline::local_model(new_global, &arch, current_global.version + 1);
        let global_acc = evaluate(&global_model.params, &arch, &test_set)?.accuracy;
        current_global = global_model;
        seq.seal_tick()?;

        // Metrics rows.
        for upload in &uploads {
            let test_acc = results
                .iter()
                .find(|r| r.model_author == upload.ps)
                .map(|r| r.accuracy)
                .unwrap_or_else(|| {
                    evaluate(&upload.local.params, &arch, &test_set)
                        .map(|e| e.accuracy)
                        .unwrap_or(0.0)
                });
            metrics.push(MetricsRow {
                pipeline: upload.pipeline,
                epoch,
                train_loss: upload.mean_loss,
                test_acc,
                global_acc,
            });
            pipeline_metrics.push(PipelineMetricsRow {
                pipeline_id: upload.pipeline,
                epoch,
                mean_loss: upload.mean_loss,
                batches: pipelines[upload.pipeline as usize].cids.len(),
                local_model_digest: checkpoint_digest(&upload.local).to_hex(),
            });
        }

        // Re-shard and go again.
        let go_tick = seq.tick;
        for ctx in pipelines.iter().filter(|c| !c.retired) {
            let targets: Vec<Uuid> = ctx
                .trainer_specs
                .iter()
                .map(|s| s.trainer)
                .filter(|t| !blocked.contains_key(t))
                .collect();
            let ps_phase = nodes[&ctx.ps].phase;
            if epoch + 1 < cfg.epochs
                && matches!(ps_phase, Phase::PsAwaitingValidation | Phase::PsAwaitingGlobal)
            {
                apply(
                    &mut nodes,
                    &mut seq,
                    ctx.ps,
                    Event::GlobalReady {
                        epoch: epoch + 1,
                        epoch_go: targets.clone(),
                    },
                )?;
                for t in &targets {
                    if nodes[t].phase == Phase::TrShardLoaded {
                        apply(&mut nodes, &mut seq, *t, Event::EpochStarts { epoch: epoch + 1 })?;
                    }
                }
            }
        }
        let _ = seq.take_mail();
        if seq.tick == go_tick {
            seq.seal_tick()?;
        }
    }

    // ---- final tick: reward claims -----------------------------------------
    for ctx in &pipelines {
        let epochs_participated = if ctx.retired {
            blocked
                .values()
                .next()
                .copied()
                .unwrap_or(cfg.epochs)
                .min(cfg.epochs)
        } else {
            cfg.epochs
        };
        if matches!(
            nodes[&ctx.ps].phase,
            Phase::PsAwaitingValidation | Phase::PsAwaitingGlobal
        ) {
            let claim = RewardClaimPayload {
                node: ctx.ps,
                role: "parameter_server".into(),
                epochs_participated,
            };
            apply(&mut nodes, &mut seq, ctx.ps, Event::JobComplete { claim })?;
        }
        for spec in &ctx.trainer_specs {
            if nodes[&spec.trainer].phase == Phase::TrShardLoaded {
                let claim = RewardClaimPayload {
                    node: spec.trainer,
                    role: "trainer".into(),
                    epochs_participated,
                };
                apply(
                    &mut nodes,
                    &mut seq,
                    spec.trainer,
                    Event::JobComplete { claim },
                )?;
            }
        }
    }
    apply(&mut nodes, &mut seq, client, Event::JobFinished)?;
    seq.seal_tick()?;

    let final_global_acc = evaluate(&current_global.params, &arch, &test_set)?.accuracy;
    let trace = build_trace(&seq.public, &seq.private);
    Ok(SimOutput {
        public_chain: seq.public,
        private_chain: seq.private,
        store: blob_store,
        metrics,
        pipeline_metrics,
        detections,
        trace,
        final_global: current_global,
        final_global_acc,
        blocked,
        roster,
        test_cid,
    })
}

/// tdml-mode validation round: draft validators, evaluate, flag, detect,
/// aggregate top-K, publish. Returns (results, flagged pipeline, detection,
/// new global parameters).
#[allow(clippy::too_many_arguments)]
fn validate_and_aggregate(
    scenario: &Scenario,
    nodes: &mut BTreeMap<Uuid, NodeState>,
    seq: &mut Sequencer,
    pipelines: &[PipelineCtx],
    uploads: &[EpochUpload],
    test_set: &Dataset,
    current_global: &GlobalModel,
    epoch: u32,
    liar: Option<(Uuid, u32, f64)>,
    job_key: &SessionKey,
) -> Result<
    (
        Vec<ValidationResult>,
        Option<u32>,
        Option<DetectionReportPayload>,
        model::Parameters,
    ),
    SimError,
> {
    let cfg = &scenario.training;
    let idle: Vec<Uuid> = uploads.iter().map(|u| u.ps).collect();

    // Draft one validator per pending model, in pipeline order.
    let mut drafted: BTreeMap<Uuid, Vec<&EpochUpload>> = BTreeMap::new();
    let mut last_validator: Option<Uuid> = None;
    for upload in uploads {
        let validator = schedule_validation(upload.ps, &idle);
        let Some(validator) = validator else {
            // Single pipeline: no peer can validate; the author aggregates.
            last_validator = Some(upload.ps);
            continue;
        };
        drafted.entry(validator).or_default().push(upload);
        last_validator = Some(validator);
    }

    // Evaluate: each drafted validator cross-validates its share.
    let mut all_results: Vec<ValidationResult> = Vec::new();
    let mut result_payloads: BTreeMap<Uuid, Vec<ValidationResultPayload>> = BTreeMap::new();
    for (validator, pending) in &drafted {
        let pending_models: Vec<PendingModel> = pending
            .iter()
            .map(|u| PendingModel::Decoded(u.ps, u.local.clone()))
            .collect();
        let mut results = robust::cross_validate(*validator, &pending_models, test_set, epoch);
        if let Some((liar_id, liar_epoch, delta)) = liar {
            if *validator == liar_id && epoch == liar_epoch {
                if let Some(first) = results.first_mut() {
                    first.accuracy = (first.accuracy + delta).clamp(0.0, 1.0);
                }
            }
        }
        for (result, upload) in results.iter().zip(pending.iter()) {
            result_payloads
                .entry(*validator)
                .or_default()
                .push(ValidationResultPayload {
                    pipeline: upload.pipeline,
                    model_author: result.model_author,
                    epoch,
                    accuracy: result.accuracy,
                    loss: result.loss,
                    validator: *validator,
                    decode_failure: result.decode_failure,
                });
        }
        all_results.extend(results);
    }

    // Flag → detect on the publisher.
    let flag = flag_suspicious(&all_results, cfg.suspicion_tau, cfg.suspicion_margin);
    let mut detection: Option<DetectionReportPayload> = None;
    let mut flagged_pipeline: Option<u32> = None;
    let mut excluded: Option<Uuid> = None;
    if let Some(flag) = flag {
        let flagged_ps = all_results[flag.index].model_author;
        excluded = Some(flagged_ps);
        let flagged_upload = uploads.iter().find(|u| u.ps == flagged_ps).expect("flagged upload");
        flagged_pipeline = Some(flagged_upload.pipeline);

        // Sample K benign-presumed models (pipeline order) plus the flagged.
        let k_detect = 5.min(uploads.len().saturating_sub(1));
        let mut samples: Vec<SampledGradients> = Vec::new();
        for upload in uploads.iter().filter(|u| u.ps != flagged_ps).take(k_detect) {
            samples.push(sample_from_records(upload));
        }
        samples.push(sample_from_records(flagged_upload));

        let assignment = &pipelines[flagged_upload.pipeline as usize].assignment;
        match detect_malicious(&samples, flagged_ps, assignment, epoch) {
            Ok(report) => {
                detection = Some(DetectionReportPayload {
                    pipeline: flagged_upload.pipeline,
                    report,
                });
            }
            // No usable geometry (or too few peers to rank against): the
            // flagged model still sits out this round's aggregation, but
            // nobody is blocked.
            Err(robust::RobustError::DegenerateGeometry)
            | Err(robust::RobustError::TooFewSamples(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }

    // Aggregate top-K of the non-flagged models.
    let candidates: Vec<RankedModel> = uploads
        .iter()
        .filter(|u| Some(u.ps) != excluded)
        .map(|u| RankedModel {
            author: u.ps,
            accuracy: all_results
                .iter()
                .find(|r| r.model_author == u.ps)
                .map(|r| r.accuracy)
                .unwrap_or_else(|| {
                    evaluate(&u.local.params, &u.local.arch, test_set)
                        .map(|e| e.accuracy)
                        .unwrap_or(0.0)
                }),
            params: u.local.params.clone(),
        })
        .collect();
    let k_eff = (cfg.top_k as usize).min(candidates.len()).max(1);
    let aggregated_from: Vec<Uuid> = {
        let mut ranked: Vec<(&Uuid, f64)> =
            candidates.iter().map(|c| (&c.author, c.accuracy)).collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut picked: Vec<Uuid> = ranked.iter().take(k_eff).map(|(u, _)| **u).collect();
        picked.sort();
        picked
    };
    let new_params = aggregate_topk(candidates, k_eff)?;

    // The last-drafted validator publishes results, detection, and the model.
    let publisher = last_validator.expect("at least one pipeline");
    let published = pipeline::local_model(new_params.clone(), &current_global.arch, current_global.version + 1);
    let ckpt = encode_checkpoint(&published);
    let publish = GlobalModelPublishPayload {
        epoch,
        version: published.version,
        model_digest: Digest256::of(&ckpt).to_hex(),
        aggregated_from,
        k: k_eff as u32,
        sealed_b64: seal_b64(&ckpt, job_key, "global", epoch as u64),
    };

    // Emit per validator: drafted ones write their results; the publisher
    // also writes detection and the new global model.
    let validators: Vec<Uuid> = result_payloads.keys().copied().collect();
    for validator in &validators {
        let results = result_payloads.remove(validator).unwrap_or_default();
        let is_publisher = *validator == publisher;
        let event = Event::AssignValidation {
            results,
            detection: if is_publisher { detection.clone() } else { None },
            publish: if is_publisher { Some(publish.clone()) } else { None },
        };
        apply_event(nodes, seq, *validator, event)?;
        apply_event(nodes, seq, *validator, Event::ValidationDone)?;
    }
    if !validators.contains(&publisher) {
        // Degenerate single-pipeline job: author publishes without peers.
        apply_event(
            nodes,
            seq,
            publisher,
            Event::AssignValidation {
                results: Vec::new(),
                detection: detection.clone(),
                publish: Some(publish),
            },
        )?;
        apply_event(nodes, seq, publisher, Event::ValidationDone)?;
    }

    Ok((all_results, flagged_pipeline, detection, new_params))
}

/// Baseline aggregation: plain mean over every local model, published by the
/// lowest-UUID server; no validation transactions.
fn fedavg_aggregate(
    scenario: &Scenario,
    nodes: &mut BTreeMap<Uuid, NodeState>,
    seq: &mut Sequencer,
    uploads: &[EpochUpload],
    current_global: &GlobalModel,
    epoch: u32,
    job_key: &SessionKey,
) -> Result<
    (
        Vec<ValidationResult>,
        Option<u32>,
        Option<DetectionReportPayload>,
        model::Parameters,
    ),
    SimError,
> {
    let candidates: Vec<RankedModel> = uploads
        .iter()
        .map(|u| RankedModel {
            author: u.ps,
            accuracy: 0.0,
            params: u.local.params.clone(),
        })
        .collect();
    let mut aggregated_from: Vec<Uuid> = uploads.iter().map(|u| u.ps).collect();
    aggregated_from.sort();
    let k = candidates.len() as u32;
    let new_params = aggregate_mean(candidates)?;

    let publisher = *aggregated_from.first().expect("at least one pipeline");
    let published =
        pipeline::local_model(new_params.clone(), &current_global.arch, current_global.version + 1);
    let ckpt = encode_checkpoint(&published);
    let publish = GlobalModelPublishPayload {
        epoch,
        version: published.version,
        model_digest: Digest256::of(&ckpt).to_hex(),
        aggregated_from,
        k,
        sealed_b64: seal_b64(&ckpt, job_key, "global", epoch as u64),
    };
    apply_event(
        nodes,
        seq,
        publisher,
        Event::AssignValidation {
            results: Vec::new(),
            detection: None,
            publish: Some(publish),
        },
    )?;
    apply_event(nodes, seq, publisher, Event::ValidationDone)?;
    let _ = scenario;
    Ok((Vec::new(), None, None, new_params))
}

fn apply_event(
    nodes: &mut BTreeMap<Uuid, NodeState>,
    seq: &mut Sequencer,
    id: Uuid,
    event: Event,
) -> Result<(), SimError> {
    let state = nodes.get(&id).expect("known node");
    let (next, emissions) = step(state, &event)?;
    nodes.insert(id, next);
    seq.emit(id, emissions);
    Ok(())
}

/// Concatenate a pipeline's per-trainer records into one full-model sample.
fn sample_from_records(upload: &EpochUpload) -> SampledGradients {
    let mut layers = Vec::new();
    for record in &upload.records {
        layers.extend(record.layers.iter().cloned());
    }
    SampledGradients {
        author: upload.ps,
        layers,
    }
}

fn build_trace(public: &Chain, private: &Chain) -> Vec<TraceEntry> {
    let mut entries: Vec<(u64, usize, usize, TraceEntry)> = Vec::new();
    for (chain_no, chain) in [public, private].into_iter().enumerate() {
        for block in &chain.blocks {
            for (i, tx) in block.body.iter().enumerate() {
                entries.push((
                    block.header.timestamp,
                    chain_no,
                    i,
                    TraceEntry {
                        tick: block.header.timestamp,
                        author: tx.author,
                        kind: tx.kind,
                    },
                ));
            }
        }
    }
    entries.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
    entries.into_iter().map(|(_, _, _, e)| e).collect()
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;

    pub fn small_scenario(mode: Mode, pipelines: u32, trainers_per: u32) -> Scenario {
        let total_trainers = pipelines * trainers_per;
        // Memory sized so each pipeline hires exactly `trainers_per` trainers.
        let arch = Arch::new(vec![16, 16, 12, 4], 4).unwrap();
        let total = model::layer_memory(&arch).total;
        let per_trainer = total / trainers_per as u64 + 200;
        Scenario {
            job_tag: "job-test".into(),
            mode,
            master_seed: 11,
            reward_budget: 100_000,
            training: TrainingConfig {
                learning_rate: 0.1,
                epochs: 2,
                pipelines,
                top_k: TrainingConfig::default_top_k(pipelines),
                batch_size: 16,
                suspicion_tau: 0.5,
                suspicion_margin: 0.03,
                init_seed: 5,
                data_seed: 6,
            },
            layer_dims: vec![16, 16, 12, 4],
            precision_bytes: 4,
            dataset: SynthSpec {
                train_rows: 32 * pipelines,
                test_rows: 64,
                ..SynthSpec::default()
            },
            baseline: BaselineCapability {
                min_memory_bytes: 64,
                min_cpus: 1,
            },
            servers: (0..pipelines + 1)
                .map(|i| RosterEntry {
                    name: format!("ps-{i}"),
                    memory_bytes: 1 << 24,
                    cpus: 4,
                    compute_score: 10.0 - i as f64,
                })
                .collect(),
            trainers: (0..total_trainers)
                .map(|i| RosterEntry {
                    name: format!("tr-{i}"),
                    memory_bytes: per_trainer,
                    cpus: 2,
                    compute_score: 1.0,
                })
                .collect(),
            attacks: Vec::new(),
            liar: None,
            ps_pool_percent: 30,
        }
    }

    #[test]
    fn honest_run_chains_verify_and_publish_per_epoch() {
        let scenario = small_scenario(Mode::Tdml, 2, 2);
        let out = run_scenario(&scenario).unwrap();
        assert!(out.public_chain.verify().ok);
        assert!(out.private_chain.verify().ok);
        let publishes = out.private_chain.query(TxKind::GlobalModelPublish, None);
        assert_eq!(publishes.len(), scenario.training.epochs as usize);
        assert!(out.detections.is_empty());
        assert!(out.blocked.is_empty());
    }

    #[test]
    fn run_is_deterministic() {
        let scenario = small_scenario(Mode::Tdml, 2, 2);
        let a = run_scenario(&scenario).unwrap();
        let b = run_scenario(&scenario).unwrap();
        assert_eq!(
            ledger::write_dump(&a.public_chain),
            ledger::write_dump(&b.public_chain)
        );
        assert_eq!(
            ledger::write_dump(&a.private_chain),
            ledger::write_dump(&b.private_chain)
        );
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn no_self_validation_ever() {
        let scenario = small_scenario(Mode::Tdml, 3, 1);
        let out = run_scenario(&scenario).unwrap();
        for tx in out.private_chain.query(TxKind::ValidationResult, None) {
            let payload: ValidationResultPayload = serde_json::from_slice(&tx.payload).unwrap();
            assert_ne!(payload.validator, payload.model_author);
            assert_eq!(tx.author, payload.validator);
        }
    }

    #[test]
    fn sealed_uploads_are_envelopes() {
        let scenario = small_scenario(Mode::Tdml, 2, 2);
        let out = run_scenario(&scenario).unwrap();
        let job_key = derive_job_key(&scenario.job_tag, scenario.master_seed);
        let mut checked = 0;
        for tx in out.private_chain.transactions() {
            match tx.kind {
                TxKind::GradientUpload => {
                    let p: GradientUploadPayload = serde_json::from_slice(&tx.payload).unwrap();
                    let opened = open_b64(&p.sealed_b64, &job_key).unwrap();
                    assert!(model::decode_layers(&opened).is_ok());
                    checked += 1;
                }
                TxKind::LocalModelUpload => {
                    let p: LocalModelUploadPayload = serde_json::from_slice(&tx.payload).unwrap();
                    let opened = open_b64(&p.sealed_b64, &job_key).unwrap();
                    let model = model::decode_checkpoint(&opened).unwrap();
                    assert_eq!(checkpoint_digest(&model).to_hex(), p.model_digest);
                    checked += 1;
                }
                _ => {}
            }
        }
        // 2 pipelines × 2 trainers × 2 epochs gradients + 2×2 local models.
        assert_eq!(checked, 8 + 4);

        // A different key cannot open them.
        let wrong = derive_job_key("other", 0);
        for tx in out.private_chain.query(TxKind::GradientUpload, None) {
            let p: GradientUploadPayload = serde_json::from_slice(&tx.payload).unwrap();
            assert!(open_b64(&p.sealed_b64, &wrong).is_err());
        }
    }

    #[test]
    fn zero_gradient_attack_is_detected_and_blocked() {
        let mut scenario = small_scenario(Mode::Tdml, 5, 2);
        scenario.training.epochs = 3;
        scenario.dataset.train_rows = 2000;
        scenario.dataset.test_rows = 500;
        scenario.dataset.noise_std = 0.6;
        scenario.dataset.center_range = 1.25;
        scenario.attacks.push(AttackEntry {
            kind: AttackKind::ZeroGradient,
            target: "tr-2".into(),
            shift: 0.0,
            sigma_sq: 0.0,
            start_epoch: 0,
        });
        let out = run_scenario(&scenario).unwrap();
        assert!(!out.detections.is_empty(), "attack went undetected");
        let report = &out.detections[0].report;
        assert_eq!(report.attributed_trainers, vec![node_uuid("tr-2")]);
        assert!(out.blocked.contains_key(&node_uuid("tr-2")));
        // The run still publishes every epoch.
        let publishes = out.private_chain.query(TxKind::GlobalModelPublish, None);
        assert_eq!(publishes.len(), 3);
    }

    #[test]
    fn fedavg_mode_runs_without_validation() {
        let scenario = small_scenario(Mode::Fedavg, 2, 2);
        let out = run_scenario(&scenario).unwrap();
        assert!(out.private_chain.query(TxKind::ValidationResult, None).is_empty());
        assert_eq!(
            out.private_chain.query(TxKind::GlobalModelPublish, None).len(),
            2
        );
    }

    #[test]
    fn single_node_mode_runs() {
        let scenario = small_scenario(Mode::SingleNode, 1, 1);
        let out = run_scenario(&scenario).unwrap();
        assert_eq!(
            out.private_chain.query(TxKind::GlobalModelPublish, None).len(),
            2
        );
        assert!(out.public_chain.verify().ok);
        assert!(out.private_chain.verify().ok);
    }

    #[test]
    fn scenario_toml_round_trip() {
        let scenario = small_scenario(Mode::Tdml, 2, 2);
        let text = toml::to_string_pretty(&scenario).unwrap();
        let back: Scenario = toml::from_str(&text).unwrap();
        assert_eq!(back, scenario);
    }
}
