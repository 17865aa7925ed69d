//! Proof-of-training replay and incentive settlement over chain dumps.
//!
//! `replay` re-executes every recorded epoch from the dumps, the blob store,
//! and the scenario seeds, comparing every local-model and global-model
//! digest bit for bit. `verify_training` combines chain verification,
//! replay, and independent re-evaluation of every validation result.
//! `settle_rewards` turns verified work units into token payouts, burning
//! the shares of withheld work.

use crate::digest::Digest256;
use crate::ledger::{Chain, TxKind};
use crate::model::{self, decode_checkpoint, encode_checkpoint, evaluate, init_model};
use crate::pipeline::{self, PipelineState, ShardAssignment};
use crate::protocol::{
    derive_job_key, GlobalModelPublishPayload, GradientUploadPayload, LocalModelUploadPayload,
    ShardUploadPayload, ValidationResultPayload,
};
use crate::robust::{aggregate_topk, apply_attack, AttackConfig, RankedModel};
use crate::sim::{attack_draw_seed, node_uuid, open_b64, put_test_set, Scenario};
use crate::store::{self, batch_dataset, split_batches, BlobStore, Cid};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("evidence incomplete: blob {0} missing from the store")]
    IncompleteEvidence(Cid),
    #[error("chain record malformed: {0}")]
    MalformedRecord(String),
    #[error("verification failed; no payout")]
    NoPayout,
    #[error(transparent)]
    Sim(#[from] crate::sim::SimError),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
    #[error(transparent)]
    Store(#[from] store::StoreError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Robust(#[from] crate::robust::RobustError),
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: u32,
    pub pipeline: u32,
    pub field: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub ok: bool,
    pub first_divergence: Option<Divergence>,
    pub divergences: Vec<Divergence>,
    /// Reproduced global model digest per epoch.
    pub global_digests: Vec<(u32, String)>,
}

fn payload<T: serde::de::DeserializeOwned>(tx: &crate::ledger::Transaction) -> Result<T, AuditError> {
    serde_json::from_slice(&tx.payload)
        .map_err(|e| AuditError::MalformedRecord(format!("{}: {e}", tx.kind)))
}

/// Shard assignments per pipeline, read back off the private chain.
fn assignments_from_chain(private: &Chain) -> Result<BTreeMap<u32, ShardAssignment>, AuditError> {
    let mut per_pipeline: BTreeMap<u32, Vec<(usize, Uuid)>> = BTreeMap::new();
    for tx in private.query(TxKind::ShardUpload, None) {
        let p: ShardUploadPayload = payload(tx)?;
        per_pipeline
            .entry(p.pipeline)
            .or_default()
            .push((p.layer_lo as usize, p.trainer));
    }
    let mut out = BTreeMap::new();
    for tx in private.query(TxKind::ShardUpload, None) {
        let p: ShardUploadPayload = payload(tx)?;
        let entry = out.entry(p.pipeline).or_insert_with(|| ShardAssignment { shards: vec![] });
        entry
            .shards
            .push((p.trainer, p.layer_lo as usize..p.layer_hi as usize));
    }
    for assignment in out.values_mut() {
        assignment.shards.sort_by_key(|(_, r)| r.start);
    }
    let _ = per_pipeline;
    Ok(out)
}

/// Re-derive the job's batch CIDs from scenario seeds and check that every
/// one of them is present in the provided store.
fn rederive_cids(
    scenario: &Scenario,
    store: &BlobStore,
) -> Result<(Vec<Vec<Cid>>, Cid), AuditError> {
    let job_key = derive_job_key(&scenario.job_tag, scenario.master_seed);
    let (train, test) = model::synthetic_blobs(&scenario.dataset, scenario.master_seed);
    let mut scratch = BlobStore::new();
    let all = batch_dataset(
        &mut scratch,
        &train,
        scenario.training.batch_size as usize,
        scenario.training.data_seed,
        &job_key,
    )?;
    let test_cid = put_test_set(&mut scratch, &test, &job_key);
    for cid in all.iter().chain(std::iter::once(&test_cid)) {
        if !store.contains(cid) {
            return Err(AuditError::IncompleteEvidence(*cid));
        }
    }
    Ok((
        split_batches(&all, scenario.training.pipelines as usize),
        test_cid,
    ))
}

/// Re-execute every recorded epoch and compare model digests bit for bit.
pub fn replay(
    private: &Chain,
    store: &BlobStore,
    scenario: &Scenario,
) -> Result<ReplayReport, AuditError> {
    let arch = scenario.arch();
    let cfg = &scenario.training;
    let job_key = derive_job_key(&scenario.job_tag, scenario.master_seed);
    let (splits, _) = rederive_cids(scenario, store)?;
    let assignments = assignments_from_chain(private)?;
    let attacks: Vec<AttackConfig> = scenario
        .attacks
        .iter()
        .map(|a| AttackConfig {
            kind: a.kind,
            target: node_uuid(&a.target),
            shift: a.shift,
            sigma_sq: a.sigma_sq,
            start_epoch: a.start_epoch,
        })
        .collect();

    // Group recorded uploads by epoch.
    let mut local_uploads: BTreeMap<u32, Vec<LocalModelUploadPayload>> = BTreeMap::new();
    for tx in private.query(TxKind::LocalModelUpload, None) {
        let p: LocalModelUploadPayload = payload(tx)?;
        local_uploads.entry(p.epoch).or_default().push(p);
    }
    let mut publishes: BTreeMap<u32, GlobalModelPublishPayload> = BTreeMap::new();
    for tx in private.query(TxKind::GlobalModelPublish, None) {
        let p: GlobalModelPublishPayload = payload(tx)?;
        publishes.insert(p.epoch, p);
    }

    let mut divergences: Vec<Divergence> = Vec::new();
    let mut global_digests: Vec<(u32, String)> = Vec::new();
    let mut current = init_model(&arch, cfg.init_seed);
    for epoch in 0..cfg.epochs {
        let Some(uploads) = local_uploads.get(&epoch) else {
            break;
        };
        let mut replayed: BTreeMap<Uuid, model::Parameters> = BTreeMap::new();
        for upload in uploads {
            let assignment = assignments.get(&upload.pipeline).ok_or_else(|| {
                AuditError::MalformedRecord(format!("pipeline {} has no shard map", upload.pipeline))
            })?;
            let mut state = PipelineState::load(
                upload.pipeline,
                &current,
                assignment.clone(),
                job_key.clone(),
                cfg.data_seed,
            );
            let master_seed = scenario.master_seed;
            let attacks_ref = &attacks;
            let mut tamper =
                |trainer: Uuid, ep: u32, batch: u64, record: &mut model::GradientRecord| {
                    for attack in attacks_ref {
                        apply_attack(
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
                store,
                &splits[upload.pipeline as usize],
                epoch,
                cfg.learning_rate,
                Some(&mut tamper),
            )
            .map_err(|e| match e {
                pipeline::PipelineError::Store(store::StoreError::NotFound(cid)) => {
                    AuditError::IncompleteEvidence(cid)
                }
                other => AuditError::Pipeline(other),
            })?;
            let local = pipeline::local_model(outcome.local_params, &arch, current.version + 1);
            let digest = Digest256::of(&encode_checkpoint(&local)).to_hex();
            if digest != upload.model_digest {
                divergences.push(Divergence {
                    epoch,
                    pipeline: upload.pipeline,
                    field: "local_model_digest".into(),
                });
            }
            replayed.insert(upload.parameter_server, local.params);
        }

        let Some(publish) = publishes.get(&epoch) else {
            break;
        };
        let members: Vec<RankedModel> = publish
            .aggregated_from
            .iter()
            .filter_map(|author| {
                replayed.get(author).map(|params| RankedModel {
                    author: *author,
                    accuracy: 0.0,
                    params: params.clone(),
                })
            })
            .collect();
        if members.len() != publish.aggregated_from.len() {
            divergences.push(Divergence {
                epoch,
                pipeline: u32::MAX,
                field: "aggregated_from_unknown_model".into(),
            });
            break;
        }
        let k = members.len();
        let params = aggregate_topk(members, k)?;
        let published = pipeline::local_model(params, &arch, publish.version);
        let digest = Digest256::of(&encode_checkpoint(&published)).to_hex();
        global_digests.push((epoch, digest.clone()));
        if digest != publish.model_digest {
            divergences.push(Divergence {
                epoch,
                pipeline: u32::MAX,
                field: "global_model_digest".into(),
            });
        }
        current = published;
    }

    Ok(ReplayReport {
        ok: divergences.is_empty(),
        first_divergence: divergences.first().cloned(),
        divergences,
        global_digests,
    })
}

// ---------------------------------------------------------------------------
// Composite verification
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMismatch {
    pub validator: Uuid,
    pub model_author: Uuid,
    pub epoch: u32,
    pub pipeline: u32,
    pub recorded_accuracy: f64,
    pub recomputed_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub chains_ok: bool,
    pub chain_detail: Option<String>,
    pub replay: Option<ReplayReport>,
    pub validation_mismatches: Vec<ValidationMismatch>,
    pub ok: bool,
}

/// Chain verification, replay, and independent re-evaluation of every
/// recorded validation result. Failures are report values; `Err` is
/// reserved for missing evidence.
pub fn verify_training(
    public: &Chain,
    private: &Chain,
    store: &BlobStore,
    scenario: &Scenario,
) -> Result<VerifyReport, AuditError> {
    let public_report = public.verify();
    let private_report = private.verify();
    let tags_ok = public.genesis_tag == "public" && private.genesis_tag == scenario.job_tag;
    let chains_ok = public_report.ok && private_report.ok && tags_ok;
    if !chains_ok {
        let detail = if !tags_ok {
            Some("genesis tag mismatch".to_string())
        } else {
            public_report.detail.or(private_report.detail)
        };
        // Tampered chain: replay is pointless, skip it.
        return Ok(VerifyReport {
            chains_ok: false,
            chain_detail: detail,
            replay: None,
            validation_mismatches: Vec::new(),
            ok: false,
        });
    }

    let replay_report = replay(private, store, scenario)?;

    // Re-derive every validation result from the uploaded model itself.
    let job_key = derive_job_key(&scenario.job_tag, scenario.master_seed);
    let (_, test_cid) = rederive_cids(scenario, store)?;
    let test_batch = store::get_sealed_batch(store, &test_cid, &job_key)?;
    let test_set = store::Dataset {
        features: test_batch.features,
        rows: test_batch.rows,
        cols: test_batch.cols,
        labels: test_batch.labels,
    };

    let mut models: BTreeMap<(u32, u32), model::GlobalModel> = BTreeMap::new();
    for tx in private.query(TxKind::LocalModelUpload, None) {
        let p: LocalModelUploadPayload = payload(tx)?;
        let bytes = open_b64(&p.sealed_b64, &job_key)?;
        let decoded = decode_checkpoint(&bytes)?;
        models.insert((p.epoch, p.pipeline), decoded);
    }

    let mut mismatches = Vec::new();
    for tx in private.query(TxKind::ValidationResult, None) {
        let p: ValidationResultPayload = payload(tx)?;
        let Some(model) = models.get(&(p.epoch, p.pipeline)) else {
            mismatches.push(ValidationMismatch {
                validator: p.validator,
                model_author: p.model_author,
                epoch: p.epoch,
                pipeline: p.pipeline,
                recorded_accuracy: p.accuracy,
                recomputed_accuracy: f64::NAN,
            });
            continue;
        };
        let eval = evaluate(&model.params, &model.arch, &test_set)?;
        if eval.accuracy != p.accuracy || eval.mean_loss != p.loss {
            mismatches.push(ValidationMismatch {
                validator: p.validator,
                model_author: p.model_author,
                epoch: p.epoch,
                pipeline: p.pipeline,
                recorded_accuracy: p.accuracy,
                recomputed_accuracy: eval.accuracy,
            });
        }
    }

    let ok = replay_report.ok && mismatches.is_empty();
    Ok(VerifyReport {
        chains_ok: true,
        chain_detail: None,
        replay: Some(replay_report),
        validation_mismatches: mismatches,
        ok,
    })
}

// ---------------------------------------------------------------------------
// Settlement
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementEntry {
    pub node: Uuid,
    pub role: String,
    pub work_units: u64,
    pub payout: u64,
}

/// Final token ledger. Unearned shares are burned, never redistributed, so
/// the total equals the budget exactly when every expected work unit was
/// verified.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardLedger {
    pub budget: u64,
    pub entries: Vec<SettlementEntry>,
    pub total_paid: u64,
}

impl RewardLedger {
    pub fn payout_of(&self, node: Uuid) -> u64 {
        self.entries
            .iter()
            .find(|e| e.node == node)
            .map(|e| e.payout)
            .unwrap_or(0)
    }
}

/// Apportion `pool` over `units` against a fixed per-unit denominator
/// (`expected` total units); floor shares topped up by largest remainder so
/// the paid total is exactly `pool · Σunits / expected`, rounded down.
fn apportion(pool: u64, units: &BTreeMap<Uuid, u64>, expected: u64) -> BTreeMap<Uuid, u64> {
    let mut shares: BTreeMap<Uuid, u64> = BTreeMap::new();
    if expected == 0 || pool == 0 {
        return shares;
    }
    let earned: u64 = units.values().sum();
    let target = (pool as u128 * earned as u128 / expected as u128) as u64;
    let mut remainders: Vec<(u128, Uuid)> = Vec::new();
    let mut assigned = 0u64;
    for (&node, &u) in units {
        let exact = pool as u128 * u as u128;
        let share = (exact / expected as u128) as u64;
        shares.insert(node, share);
        assigned += share;
        remainders.push((exact % expected as u128, node));
    }
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let mut leftover = target - assigned;
    for (_, node) in remainders {
        if leftover == 0 {
            break;
        }
        *shares.get_mut(&node).unwrap() += 1;
        leftover -= 1;
    }
    shares
}

/// Split the budget into server and trainer pools, then pay pro rata by
/// verified work units: epochs whose local model was validated for servers,
/// epochs with accepted gradient uploads for trainers. Trainers named in a
/// detection report are paid nothing.
pub fn settle_rewards(
    private: &Chain,
    budget: u64,
    ps_pool_percent: u32,
    epochs: u32,
    verified: bool,
) -> Result<RewardLedger, AuditError> {
    if !verified {
        return Err(AuditError::NoPayout);
    }

    // Who was hired.
    let mut trainers: BTreeSet<Uuid> = BTreeSet::new();
    let mut servers: BTreeSet<Uuid> = BTreeSet::new();
    for tx in private.query(TxKind::ShardUpload, None) {
        let p: ShardUploadPayload = payload(tx)?;
        trainers.insert(p.trainer);
        servers.insert(p.parameter_server);
    }

    // Who was blocked.
    let mut blocked: BTreeSet<Uuid> = BTreeSet::new();
    for tx in private.query(TxKind::DetectionReport, None) {
        let p: crate::protocol::DetectionReportPayload = payload(tx)?;
        blocked.extend(p.report.attributed_trainers.iter().copied());
    }

    // Work units.
    let mut trainer_units: BTreeMap<Uuid, u64> = trainers.iter().map(|&t| (t, 0)).collect();
    for tx in private.query(TxKind::GradientUpload, None) {
        let p: GradientUploadPayload = payload(tx)?;
        if !blocked.contains(&p.trainer) {
            *trainer_units.entry(p.trainer).or_insert(0) += 1;
        }
    }
    for t in &blocked {
        trainer_units.insert(*t, 0);
    }

    let mut server_units: BTreeMap<Uuid, u64> = servers.iter().map(|&s| (s, 0)).collect();
    let validations = private.query(TxKind::ValidationResult, None);
    if validations.is_empty() {
        // Validation-less modes count uploaded epochs instead.
        for tx in private.query(TxKind::LocalModelUpload, None) {
            let p: LocalModelUploadPayload = payload(tx)?;
            *server_units.entry(p.parameter_server).or_insert(0) += 1;
        }
    } else {
        let mut validated: BTreeSet<(Uuid, u32)> = BTreeSet::new();
        for tx in validations {
            let p: ValidationResultPayload = payload(tx)?;
            validated.insert((p.model_author, p.epoch));
        }
        for (author, _) in validated {
            *server_units.entry(author).or_insert(0) += 1;
        }
    }

    let ps_pool = budget * ps_pool_percent as u64 / 100;
    let trainer_pool = budget - ps_pool;
    let ps_shares = apportion(
        ps_pool,
        &server_units,
        servers.len() as u64 * epochs as u64,
    );
    let trainer_shares = apportion(
        trainer_pool,
        &trainer_units,
        trainers.len() as u64 * epochs as u64,
    );

    let mut entries = Vec::new();
    for (&node, &units) in &server_units {
        entries.push(SettlementEntry {
            node,
            role: "parameter_server".into(),
            work_units: units,
            payout: ps_shares.get(&node).copied().unwrap_or(0),
        });
    }
    for (&node, &units) in &trainer_units {
        entries.push(SettlementEntry {
            node,
            role: "trainer".into(),
            work_units: units,
            payout: trainer_shares.get(&node).copied().unwrap_or(0),
        });
    }
    entries.sort_by(|a, b| a.node.cmp(&b.node));
    let total_paid = entries.iter().map(|e| e.payout).sum();
    assert!(total_paid <= budget, "conservation violated");
    Ok(RewardLedger {
        budget,
        entries,
        total_paid,
    })
}
