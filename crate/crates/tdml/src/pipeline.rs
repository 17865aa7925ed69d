//! Pipeline model parallelism: memory-driven layer sharding plus forward
//! activation and backward gradient hand-off across trainers.
//!
//! One batch traverses the pipeline at a time; there is no micro-batch
//! interleaving. Activations and gradients cross shard boundaries as sealed
//! envelopes whose integrity is checked at receipt. Sharded execution calls
//! the exact same per-layer kernels in the exact same order as one-node
//! training, so honest pipelines reproduce one-node parameters bit for bit.

use crate::ledger::{self, LedgerError, SessionKey};
use crate::model::{
    self, Arch, GlobalModel, GradientRecord, LayerParams, Parameters, StructuralGraph,
};
use crate::store::{self, BlobStore, Cid, StoreError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("insufficient trainer memory: layer {first_unplaced} does not fit")]
    InsufficientMemory { first_unplaced: usize },
    #[error("activation for layer {0} missing")]
    MissingActivation(usize),
    #[error("backward cache for shard {0} missing")]
    MissingCache(usize),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Envelope(#[from] LedgerError),
}

// ---------------------------------------------------------------------------
// Trainer specs and shard assignment
// ---------------------------------------------------------------------------

/// Hardware description a trainer registers with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub trainer: Uuid,
    pub memory_bytes: u64,
    pub compute_score: f64,
    pub address: String,
}

/// Contiguous, disjoint, complete split of `[0, L)` over trainers in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardAssignment {
    pub shards: Vec<(Uuid, Range<usize>)>,
}

impl ShardAssignment {
    pub fn trainer_for_layer(&self, layer: usize) -> Option<Uuid> {
        self.shards
            .iter()
            .find(|(_, r)| r.contains(&layer))
            .map(|(t, _)| *t)
    }

    pub fn trainers(&self) -> Vec<Uuid> {
        self.shards.iter().map(|(t, _)| *t).collect()
    }

    pub fn num_layers(&self) -> usize {
        self.shards.last().map(|(_, r)| r.end).unwrap_or(0)
    }
}

/// Greedy in-order packing: give the current trainer consecutive layers
/// until the next one would exceed its memory, then advance. Fails if layers
/// remain after the last trainer.
pub fn shard_model(model: &GlobalModel, specs: &[NodeSpec]) -> Result<ShardAssignment, PipelineError> {
    let profile = model::layer_memory(&model.arch);
    let layer_count = profile.per_layer.len();
    let mut shards = Vec::new();
    let mut layer = 0usize;
    for spec in specs {
        let lo = layer;
        let mut used = 0u64;
        while layer < layer_count && used + profile.per_layer[layer] <= spec.memory_bytes {
            used += profile.per_layer[layer];
            layer += 1;
        }
        if layer > lo {
            shards.push((spec.trainer, lo..layer));
        }
        if layer == layer_count {
            break;
        }
    }
    if layer < layer_count {
        return Err(PipelineError::InsufficientMemory {
            first_unplaced: layer,
        });
    }
    Ok(ShardAssignment { shards })
}

/// A trainer's slice of the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShard {
    pub trainer: Uuid,
    pub layers: Vec<LayerParams>,
    pub layer_range: Range<usize>,
}

/// Cut the global parameters along the assignment.
pub fn make_shards(model: &GlobalModel, assignment: &ShardAssignment) -> Vec<ModelShard> {
    assignment
        .shards
        .iter()
        .map(|(trainer, range)| ModelShard {
            trainer: *trainer,
            layers: model.params.layers[range.clone()].to_vec(),
            layer_range: range.clone(),
        })
        .collect()
}

/// Concatenate shard slices back into full parameters.
pub fn assemble(shards: &[ModelShard]) -> Parameters {
    Parameters {
        layers: shards.iter().flat_map(|s| s.layers.iter().cloned()).collect(),
    }
}

// ---------------------------------------------------------------------------
// Sealed activation transport
// ---------------------------------------------------------------------------

fn encode_tensor(data: &[f64], rows: usize, cols: usize, tag: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + data.len() * 8);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_tensor(bytes: &[u8]) -> Result<(Vec<f64>, usize, usize, u32), PipelineError> {
    if bytes.len() < 12 {
        return Err(PipelineError::MissingActivation(0));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let tag = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes[12..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    if data.len() != rows * cols {
        return Err(PipelineError::MissingActivation(0));
    }
    Ok((data, rows, cols, tag))
}

/// Seal-and-open hop over the simulated encrypted RPC link. The value comes
/// back bit-identical; a tampered envelope surfaces as AuthFailure.
fn sealed_hop(
    data: &[f64],
    rows: usize,
    cols: usize,
    tag: u32,
    key: &SessionKey,
    nonce_counter: &mut u64,
) -> Result<Vec<f64>, PipelineError> {
    let plaintext = encode_tensor(data, rows, cols, tag);
    let nonce = ledger::derive_nonce(&key.key_id, *nonce_counter);
    *nonce_counter += 1;
    let envelope = ledger::seal(&plaintext, key, nonce);
    let opened = ledger::open(&envelope, key)?;
    let (out, r, c, _) = decode_tensor(&opened)?;
    debug_assert_eq!((r, c), (rows, cols));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Forward / backward across shards
// ---------------------------------------------------------------------------

/// Per-shard forward cache: `acts[0]` is the shard input, `acts[k]` its
/// output after k layers.
pub struct ShardCache {
    pub acts: Vec<Vec<f64>>,
}

/// Run the batch through every shard in order. Returns the logits and the
/// per-shard caches needed by [`pipeline_backward`].
pub fn pipeline_forward(
    shards: &[ModelShard],
    input: &[f64],
    rows: usize,
    total_layers: usize,
    key: &SessionKey,
    nonce_counter: &mut u64,
) -> Result<(Vec<f64>, Vec<ShardCache>), PipelineError> {
    let mut caches = Vec::with_capacity(shards.len());
    let mut h = input.to_vec();
    for shard in shards {
        let mut acts = Vec::with_capacity(shard.layers.len() + 1);
        acts.push(h);
        for (k, layer) in shard.layers.iter().enumerate() {
            let global_layer = shard.layer_range.start + k;
            let out = model::forward_layer(
                layer,
                acts.last().unwrap(),
                rows,
                global_layer == total_layers - 1,
            )?;
            acts.push(out);
        }
        // Edge layer hands its output to the next trainer via a sealed
        // envelope; the last shard's output is the logits.
        let boundary = acts.last().unwrap().clone();
        let cols = shard.layers.last().map(|l| l.d_out).unwrap_or(0);
        h = sealed_hop(
            &boundary,
            rows,
            cols,
            shard.layer_range.end as u32,
            key,
            nonce_counter,
        )?;
        caches.push(ShardCache { acts });
    }
    Ok((h, caches))
}

/// Backward hand-off in reverse shard order. Produces one gradient record
/// per shard (layer order matching the shard); the concatenation equals the
/// unsharded backward pass bit for bit.
pub fn pipeline_backward(
    shards: &[ModelShard],
    caches: &[ShardCache],
    dlogits: &[f64],
    rows: usize,
    total_layers: usize,
    epoch: u32,
    key: &SessionKey,
    nonce_counter: &mut u64,
) -> Result<Vec<GradientRecord>, PipelineError> {
    if caches.len() != shards.len() {
        return Err(PipelineError::MissingCache(caches.len()));
    }
    let mut records: Vec<GradientRecord> = Vec::with_capacity(shards.len());
    let mut upstream = dlogits.to_vec();
    for (s, shard) in shards.iter().enumerate().rev() {
        let cache = &caches[s];
        let mut grads: Vec<LayerParams> = Vec::with_capacity(shard.layers.len());
        for (k, layer) in shard.layers.iter().enumerate().rev() {
            let global_layer = shard.layer_range.start + k;
            let (g, down) = model::backward_layer(
                layer,
                &cache.acts[k],
                &cache.acts[k + 1],
                &upstream,
                rows,
                global_layer == total_layers - 1,
            )?;
            grads.push(g);
            upstream = down;
        }
        grads.reverse();
        records.push(GradientRecord {
            layers: grads,
            epoch,
            producer: shard.trainer,
        });
        if s > 0 {
            let cols = shard.layers.first().map(|l| l.d_in).unwrap_or(0);
            upstream = sealed_hop(
                &upstream,
                rows,
                cols,
                shard.layer_range.start as u32,
                key,
                nonce_counter,
            )?;
        }
    }
    records.reverse();
    Ok(records)
}

// ---------------------------------------------------------------------------
// Epoch execution
// ---------------------------------------------------------------------------

/// Per-epoch training state for one data-parallel pipeline.
pub struct PipelineState {
    pub pipeline_id: u32,
    pub assignment: ShardAssignment,
    pub shards: Vec<ModelShard>,
    pub arch: Arch,
    pub job_key: SessionKey,
    /// Seeds the per-epoch batch order.
    pub data_seed: u64,
    nonce_counter: u64,
}

impl PipelineState {
    /// Load shards from the current global model.
    pub fn load(
        pipeline_id: u32,
        global: &GlobalModel,
        assignment: ShardAssignment,
        job_key: SessionKey,
        data_seed: u64,
    ) -> PipelineState {
        let shards = make_shards(global, &assignment);
        PipelineState {
            pipeline_id,
            assignment,
            shards,
            arch: global.arch.clone(),
            job_key,
            data_seed,
            nonce_counter: 0,
        }
    }
}

/// What an epoch leaves behind: the trained local model, the metrics row,
/// and the per-trainer epoch gradient records — the gradient of the shared
/// epoch-start parameters over the pipeline's full split, measured by a
/// probe pass before any local update. Those records are what trainers
/// upload and what the detector ranks; computing them at the common start
/// point keeps honest pipelines statistically comparable at every epoch.
pub struct EpochOutcome {
    pub local_params: Parameters,
    pub mean_loss: f64,
    pub batches: usize,
    pub epoch_records: Vec<GradientRecord>,
}

/// Deterministic per-epoch batch order.
pub fn epoch_batch_order(data_seed: u64, pipeline_id: u32, epoch: u32, n: usize) -> Vec<usize> {
    let mut c = crate::digest::CanonicalBytes::new();
    c.put_u64(data_seed).put_u32(pipeline_id).put_u32(epoch);
    let d = c.digest();
    let seed = u64::from_le_bytes(d.0[..8].try_into().unwrap());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// One forward/backward over a batch with no update; used by the probe pass.
fn probe_batch(
    state: &mut PipelineState,
    batch: &store::Batch,
    total_layers: usize,
    classes: usize,
    epoch: u32,
) -> Result<Vec<GradientRecord>, PipelineError> {
    let (logits, caches) = pipeline_forward(
        &state.shards,
        &batch.features,
        batch.rows,
        total_layers,
        &state.job_key,
        &mut state.nonce_counter,
    )?;
    let (_, dlogits) = model::loss_and_grad(&logits, &batch.labels, batch.rows, classes);
    pipeline_backward(
        &state.shards,
        &caches,
        &dlogits,
        batch.rows,
        total_layers,
        epoch,
        &state.job_key,
        &mut state.nonce_counter,
    )
}

/// Run one epoch. First a probe pass measures each trainer's epoch gradient
/// (mean over the split's batches) at the shared epoch-start parameters;
/// then the training loop iterates the batches in seeded order — per batch
/// forward, loss, backward, optional gradient tamper, shard update.
///
/// `tamper` lets a Byzantine trainer rewrite its own shard's gradients; it
/// is applied to the uploaded epoch record (batch index 0) and to every
/// applied training gradient (batch indices 1..). Honest runs pass `None`.
#[allow(clippy::too_many_arguments)]
pub fn run_epoch(
    state: &mut PipelineState,
    store: &BlobStore,
    cids: &[Cid],
    epoch: u32,
    learning_rate: f64,
    mut tamper: Option<&mut dyn FnMut(Uuid, u32, u64, &mut GradientRecord)>,
) -> Result<EpochOutcome, PipelineError> {
    let total_layers = state.arch.num_layers();
    let classes = state.arch.output_dim();
    let order = epoch_batch_order(state.data_seed, state.pipeline_id, epoch, cids.len());

    // Probe pass: accumulate per-shard gradient means over all batches.
    let mut epoch_records: Vec<GradientRecord> = state
        .shards
        .iter()
        .map(|s| GradientRecord {
            layers: s.layers.iter().map(|l| LayerParams::zeros(l.d_out, l.d_in)).collect(),
            epoch,
            producer: s.trainer,
        })
        .collect();
    for &batch_idx in &order {
        let batch = store::get_sealed_batch(store, &cids[batch_idx], &state.job_key)?;
        let records = probe_batch(state, &batch, total_layers, classes, epoch)?;
        for (acc, rec) in epoch_records.iter_mut().zip(records.iter()) {
            for (a, l) in acc.layers.iter_mut().zip(rec.layers.iter()) {
                for (x, y) in a.weights.iter_mut().zip(l.weights.iter()) {
                    *x += y;
                }
                for (x, y) in a.bias.iter_mut().zip(l.bias.iter()) {
                    *x += y;
                }
            }
        }
    }
    if !order.is_empty() {
        let inv = 1.0 / order.len() as f64;
        for record in epoch_records.iter_mut() {
            for layer in record.layers.iter_mut() {
                layer.weights.iter_mut().for_each(|w| *w *= inv);
                layer.bias.iter_mut().for_each(|b| *b *= inv);
            }
        }
    }
    if let Some(tamper) = tamper.as_deref_mut() {
        for record in epoch_records.iter_mut() {
            tamper(record.producer, epoch, 0, record);
        }
    }

    // Training loop.
    let mut total_loss = 0.0;
    for (i, &batch_idx) in order.iter().enumerate() {
        let batch = store::get_sealed_batch(store, &cids[batch_idx], &state.job_key)?;
        let (logits, caches) = pipeline_forward(
            &state.shards,
            &batch.features,
            batch.rows,
            total_layers,
            &state.job_key,
            &mut state.nonce_counter,
        )?;
        let (loss, dlogits) = model::loss_and_grad(&logits, &batch.labels, batch.rows, classes);
        total_loss += loss;
        let mut records = pipeline_backward(
            &state.shards,
            &caches,
            &dlogits,
            batch.rows,
            total_layers,
            epoch,
            &state.job_key,
            &mut state.nonce_counter,
        )?;
        if let Some(tamper) = tamper.as_deref_mut() {
            for record in records.iter_mut() {
                tamper(record.producer, epoch, 1 + i as u64, record);
            }
        }
        for (shard, record) in state.shards.iter_mut().zip(records.iter()) {
            let mut slice = Parameters {
                layers: std::mem::take(&mut shard.layers),
            };
            model::sgd_update(&mut slice, &record.layers, learning_rate);
            shard.layers = slice.layers;
        }
    }

    Ok(EpochOutcome {
        local_params: assemble(&state.shards),
        mean_loss: if order.is_empty() {
            0.0
        } else {
            total_loss / order.len() as f64
        },
        batches: order.len(),
        epoch_records,
    })
}

/// One-node reference epoch: the same batches in the same order through the
/// direct (unsharded) training path. Kept separate from the pipeline code so
/// sharding-transparency checks compare two genuinely different routes.
pub fn single_node_epoch(
    global: &GlobalModel,
    store: &BlobStore,
    cids: &[Cid],
    pipeline_id: u32,
    epoch: u32,
    data_seed: u64,
    learning_rate: f64,
    job_key: &SessionKey,
) -> Result<(Parameters, f64, usize), PipelineError> {
    let mut params = global.params.clone();
    let order = epoch_batch_order(data_seed, pipeline_id, epoch, cids.len());
    let mut total_loss = 0.0;
    for &batch_idx in &order {
        let batch = store::get_sealed_batch(store, &cids[batch_idx], job_key)?;
        let (loss, _) = model::train_batch(
            &mut params,
            &global.arch,
            &batch.features,
            &batch.labels,
            batch.rows,
            learning_rate,
        )?;
        total_loss += loss;
    }
    let mean = if order.is_empty() {
        0.0
    } else {
        total_loss / order.len() as f64
    };
    Ok((params, mean, order.len()))
}

/// Wrap trained parameters as the pipeline's local model at the next version.
pub fn local_model(params: Parameters, arch: &Arch, version: u32) -> GlobalModel {
    GlobalModel {
        graph: StructuralGraph::sequential(arch.num_layers()),
        params,
        arch: arch.clone(),
        version,
    }
}
