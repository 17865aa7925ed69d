//! Content-addressed blob store standing in for the job's file server.
//!
//! Blobs are addressed by the digest of their bytes (the CID). Training and
//! test batches are serialized to a fixed binary layout, sealed with the job
//! session key, and stored; CIDs therefore address ciphertext. Reads are
//! pure; writes happen only during job setup.

use crate::digest::Digest256;
use crate::ledger::{self, Envelope, LedgerError, SessionKey};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no blob stored under cid {0}")]
    NotFound(Cid),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("batch blob is malformed: {0}")]
    MalformedBatch(String),
    #[error(transparent)]
    Envelope(#[from] LedgerError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Content identifier: digest of the stored bytes, printed as hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Cid(pub Digest256);

impl std::fmt::Display for Cid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// In-memory blob store; optionally spilled to `<hex>.blob` files.
#[derive(Default, Clone)]
pub struct BlobStore {
    blobs: BTreeMap<Cid, Vec<u8>>,
}

impl BlobStore {
    pub fn new() -> BlobStore {
        BlobStore::default()
    }

    pub fn put(&mut self, blob: Vec<u8>) -> Cid {
        let cid = Cid(Digest256::of(&blob));
        self.blobs.entry(cid).or_insert(blob);
        cid
    }

    pub fn get(&self, cid: &Cid) -> Result<&[u8], StoreError> {
        self.blobs
            .get(cid)
            .map(|b| b.as_slice())
            .ok_or(StoreError::NotFound(*cid))
    }

    pub fn contains(&self, cid: &Cid) -> bool {
        self.blobs.contains_key(cid)
    }

    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }

    pub fn remove(&mut self, cid: &Cid) -> Option<Vec<u8>> {
        self.blobs.remove(cid)
    }

    /// One `<hex>.blob` file per CID.
    pub fn spill_to_dir(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir)?;
        for (cid, blob) in &self.blobs {
            std::fs::write(dir.join(format!("{cid}.blob")), blob)?;
        }
        Ok(())
    }

    pub fn load_from_dir(dir: &Path) -> Result<BlobStore, StoreError> {
        let mut store = BlobStore::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "blob"))
            .collect();
        paths.sort();
        for path in paths {
            store.put(std::fs::read(path)?);
        }
        Ok(store)
    }
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// One batch of samples: features row-major, one class index per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u32>,
    pub batch_index: u32,
}

impl Batch {
    pub fn feature_row(&self, r: usize) -> &[f64] {
        &self.features[r * self.cols..(r + 1) * self.cols]
    }

    /// Binary layout: 16-byte header (rows, cols, reserved, batch_index as
    /// LE u32), then f32 LE features, then u32 LE labels. Features are
    /// stored at f32 and widened back to f64 on decode, so the encoded
    /// form is the canonical one.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.features.len() * 4 + self.labels.len() * 4);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&self.batch_index.to_le_bytes());
        for v in &self.features {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Batch, StoreError> {
        let bad = |m: &str| StoreError::MalformedBatch(m.to_string());
        if bytes.len() < 16 {
            return Err(bad("short header"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let rows = u32_at(0) as usize;
        let cols = u32_at(4) as usize;
        let batch_index = u32_at(12);
        let need = 16 + rows * cols * 4 + rows * 4;
        if bytes.len() != need {
            return Err(bad("length does not match header dims"));
        }
        let mut features = Vec::with_capacity(rows * cols);
        let mut off = 16;
        for _ in 0..rows * cols {
            features.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
            off += 4;
        }
        let mut labels = Vec::with_capacity(rows);
        for _ in 0..rows {
            labels.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        Ok(Batch {
            features,
            rows,
            cols,
            labels,
            batch_index,
        })
    }
}

/// A labeled dataset held by the client before batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn feature_row(&self, r: usize) -> &[f64] {
        &self.features[r * self.cols..(r + 1) * self.cols]
    }
}

/// Shuffle with the given seed, partition into ⌈n/batch_size⌉ batches, seal
/// each with the job key, store, and return CIDs in batch order.
pub fn batch_dataset(
    store: &mut BlobStore,
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    job_key: &SessionKey,
) -> Result<Vec<Cid>, StoreError> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    if dataset.rows == 0 {
        return Err(StoreError::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..dataset.rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut cids = Vec::new();
    for (batch_index, rows) in order.chunks(batch_size).enumerate() {
        let mut features = Vec::with_capacity(rows.len() * dataset.cols);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            features.extend_from_slice(dataset.feature_row(r));
            labels.push(dataset.labels[r]);
        }
        let batch = Batch {
            features,
            rows: rows.len(),
            cols: dataset.cols,
            labels,
            batch_index: batch_index as u32,
        };
        cids.push(put_sealed_batch(store, &batch, job_key));
    }
    Ok(cids)
}

/// Seal an encoded batch and store the envelope bytes.
pub fn put_sealed_batch(store: &mut BlobStore, batch: &Batch, key: &SessionKey) -> Cid {
    let plaintext = batch.encode();
    // Nonce derived from content so identical batches store identically.
    let nonce = ledger::derive_nonce(
        &key.key_id,
        u64::from_le_bytes(Digest256::of(&plaintext).0[..8].try_into().unwrap()),
    );
    let env = ledger::seal(&plaintext, key, nonce);
    store.put(env.to_bytes())
}

/// Fetch, open, and decode a sealed batch.
pub fn get_sealed_batch(store: &BlobStore, cid: &Cid, key: &SessionKey) -> Result<Batch, StoreError> {
    let bytes = store.get(cid)?;
    let env = Envelope::from_bytes(bytes)?;
    let plaintext = ledger::open(&env, key)?;
    Batch::decode(&plaintext)
}

/// Split a batch CID list across N pipelines: contiguous chunks, remainder
/// spread round-robin over the leading pipelines.
pub fn split_batches(cids: &[Cid], pipelines: usize) -> Vec<Vec<Cid>> {
    assert!(pipelines >= 1);
    let base = cids.len() / pipelines;
    let extra = cids.len() % pipelines;
    let mut out = Vec::with_capacity(pipelines);
    let mut off = 0;
    for p in 0..pipelines {
        let take = base + usize::from(p < extra);
        out.push(cids[off..off + take].to_vec());
        off += take;
    }
    out
}
