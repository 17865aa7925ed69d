//! Append-only hash-chained block store with Merkle-rooted bodies.
//!
//! One [`Chain`] instance serves as the public chain and one per training job
//! as the private chain. A single sequencer (the simulation harness) appends
//! blocks; everyone else verifies on read. Payload confidentiality is a keyed
//! authenticated [`Envelope`] rather than real public-key cryptography.
//!
//! Dump format: one JSON line per block, preceded by a header line naming the
//! digest function. The loader is strict — every hex/base64/uuid field must
//! re-encode to the exact bytes it was parsed from — so that any single-byte
//! mutation of a dump is caught either by a parse failure or by a digest
//! mismatch.

use crate::digest::{CanonicalBytes, Digest256, DIGEST_NAME};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;
use uuid::Uuid;

/// Logical clock tick. Blocks and the transactions they carry share one tick.
pub type Tick = u64;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("block body must contain at least one transaction")]
    EmptyBody,
    #[error("tick {tick} precedes chain head timestamp {head}")]
    ClockRegression { tick: Tick, head: Tick },
    #[error("envelope authentication failed")]
    AuthFailure,
    #[error("malformed chain dump at line {line}: {reason}")]
    MalformedDump { line: usize, reason: String },
    #[error("dump names digest {found:?}, this build uses {expected:?}")]
    DigestMismatch { found: String, expected: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Transactions
// ---------------------------------------------------------------------------

/// Every protocol event lands on a chain as one of these kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TxKind {
    TaskAnnounce,
    ServerRegister,
    HiringAnnounce,
    TrainerRegister,
    KeyExchange,
    ShardUpload,
    GradientUpload,
    LocalModelUpload,
    ValidationResult,
    GlobalModelPublish,
    DetectionReport,
    RewardClaim,
}

impl TxKind {
    /// Stable discriminant used in the canonical serialization.
    pub fn code(self) -> u8 {
        match self {
            TxKind::TaskAnnounce => 0,
            TxKind::ServerRegister => 1,
            TxKind::HiringAnnounce => 2,
            TxKind::TrainerRegister => 3,
            TxKind::KeyExchange => 4,
            TxKind::ShardUpload => 5,
            TxKind::GradientUpload => 6,
            TxKind::LocalModelUpload => 7,
            TxKind::ValidationResult => 8,
            TxKind::GlobalModelPublish => 9,
            TxKind::DetectionReport => 10,
            TxKind::RewardClaim => 11,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TxKind::TaskAnnounce => "TaskAnnounce",
            TxKind::ServerRegister => "ServerRegister",
            TxKind::HiringAnnounce => "HiringAnnounce",
            TxKind::TrainerRegister => "TrainerRegister",
            TxKind::KeyExchange => "KeyExchange",
            TxKind::ShardUpload => "ShardUpload",
            TxKind::GradientUpload => "GradientUpload",
            TxKind::LocalModelUpload => "LocalModelUpload",
            TxKind::ValidationResult => "ValidationResult",
            TxKind::GlobalModelPublish => "GlobalModelPublish",
            TxKind::DetectionReport => "DetectionReport",
            TxKind::RewardClaim => "RewardClaim",
        }
    }

    pub fn from_name(s: &str) -> Option<TxKind> {
        Some(match s {
            "TaskAnnounce" => TxKind::TaskAnnounce,
            "ServerRegister" => TxKind::ServerRegister,
            "HiringAnnounce" => TxKind::HiringAnnounce,
            "TrainerRegister" => TxKind::TrainerRegister,
            "KeyExchange" => TxKind::KeyExchange,
            "ShardUpload" => TxKind::ShardUpload,
            "GradientUpload" => TxKind::GradientUpload,
            "LocalModelUpload" => TxKind::LocalModelUpload,
            "ValidationResult" => TxKind::ValidationResult,
            "GlobalModelPublish" => TxKind::GlobalModelPublish,
            "DetectionReport" => TxKind::DetectionReport,
            "RewardClaim" => TxKind::RewardClaim,
            _ => return None,
        })
    }
}

impl fmt::Display for TxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A single chain entry. `tx_id` is recomputable from the other fields.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub timestamp: Tick,
    pub author: Uuid,
    pub kind: TxKind,
    pub payload: Vec<u8>,
    pub tx_id: Digest256,
}

impl Transaction {
    pub fn new(timestamp: Tick, author: Uuid, kind: TxKind, payload: Vec<u8>) -> Transaction {
        let tx_id = Self::compute_id(timestamp, author, kind, &payload);
        Transaction {
            timestamp,
            author,
            kind,
            payload,
            tx_id,
        }
    }

    /// Canonical serialization: timestamp, author, kind, payload in
    /// declaration order; integers little-endian, variable fields
    /// length-prefixed.
    pub fn compute_id(timestamp: Tick, author: Uuid, kind: TxKind, payload: &[u8]) -> Digest256 {
        let mut c = CanonicalBytes::new();
        c.put_u64(timestamp)
            .put_bytes(author.as_bytes())
            .put_u8(kind.code())
            .put_bytes(payload);
        c.digest()
    }

    pub fn id_consistent(&self) -> bool {
        Self::compute_id(self.timestamp, self.author, self.kind, &self.payload) == self.tx_id
    }
}

// ---------------------------------------------------------------------------
// Merkle root
// ---------------------------------------------------------------------------

/// Pairwise-hash the transaction ids up a binary tree. An unpaired node at
/// any level is promoted unchanged to the next level; a single-transaction
/// body hashes its one leaf.
pub fn merkle_root(txs: &[Transaction]) -> Result<Digest256, LedgerError> {
    if txs.is_empty() {
        return Err(LedgerError::EmptyBody);
    }
    if txs.len() == 1 {
        return Ok(Digest256::of(&txs[0].tx_id.0));
    }
    let mut level: Vec<Digest256> = txs.iter().map(|t| t.tx_id).collect();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len() / 2 + 1);
        let mut it = level.chunks_exact(2);
        for pair in &mut it {
            next.push(Digest256::of_pair(&pair[0], &pair[1]));
        }
        if let [odd] = it.remainder() {
            next.push(*odd);
        }
        level = next;
    }
    Ok(level[0])
}

// ---------------------------------------------------------------------------
// Blocks and chains
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub prev_id: Digest256,
    pub block_id: Digest256,
    pub timestamp: Tick,
    pub merkle_root: Digest256,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub header: BlockHeader,
    pub body: Vec<Transaction>,
}

impl Block {
    /// block_id = digest(prev_id ‖ timestamp ‖ merkle_root), all fixed-width.
    pub fn compute_id(prev_id: &Digest256, timestamp: Tick, root: &Digest256) -> Digest256 {
        let mut c = CanonicalBytes::new();
        c.put_digest(prev_id).put_u64(timestamp).put_digest(root);
        c.digest()
    }
}

/// Verification outcome; failures are values, not errors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainReport {
    pub ok: bool,
    pub first_bad_block: Option<usize>,
    pub detail: Option<String>,
}

impl ChainReport {
    fn good() -> ChainReport {
        ChainReport {
            ok: true,
            first_bad_block: None,
            detail: None,
        }
    }

    fn bad(index: usize, detail: impl Into<String>) -> ChainReport {
        ChainReport {
            ok: false,
            first_bad_block: Some(index),
            detail: Some(detail.into()),
        }
    }
}

/// Append-only sequence of blocks plus the job tag it was opened under.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chain {
    pub blocks: Vec<Block>,
    pub genesis_tag: String,
}

impl Chain {
    pub fn new(genesis_tag: impl Into<String>) -> Chain {
        Chain {
            blocks: Vec::new(),
            genesis_tag: genesis_tag.into(),
        }
    }

    pub fn head_id(&self) -> Digest256 {
        self.blocks
            .last()
            .map(|b| b.header.block_id)
            .unwrap_or(Digest256::ZERO)
    }

    pub fn head_timestamp(&self) -> Tick {
        self.blocks.last().map(|b| b.header.timestamp).unwrap_or(0)
    }

    /// Seal one block over `txs` at `tick`. The sequencer calls this once per
    /// protocol round; transactions carry the same tick as the block.
    pub fn append_block(&mut self, txs: Vec<Transaction>, tick: Tick) -> Result<(), LedgerError> {
        if txs.is_empty() {
            return Err(LedgerError::EmptyBody);
        }
        if !self.blocks.is_empty() && tick < self.head_timestamp() {
            return Err(LedgerError::ClockRegression {
                tick,
                head: self.head_timestamp(),
            });
        }
        let root = merkle_root(&txs)?;
        let prev_id = self.head_id();
        let block_id = Block::compute_id(&prev_id, tick, &root);
        self.blocks.push(Block {
            header: BlockHeader {
                prev_id,
                block_id,
                timestamp: tick,
                merkle_root: root,
            },
            body: txs,
        });
        Ok(())
    }

    /// Recheck every block and transaction invariant in order.
    pub fn verify(&self) -> ChainReport {
        let mut prev_id = Digest256::ZERO;
        let mut prev_ts: Tick = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            if block.body.is_empty() {
                return ChainReport::bad(i, "empty body");
            }
            if block.header.prev_id != prev_id {
                return ChainReport::bad(i, "prev_id does not match preceding block");
            }
            if i > 0 && block.header.timestamp < prev_ts {
                return ChainReport::bad(i, "timestamp regression");
            }
            for tx in &block.body {
                if !tx.id_consistent() {
                    return ChainReport::bad(i, format!("tx_id mismatch for {}", tx.kind));
                }
                if tx.timestamp > block.header.timestamp {
                    return ChainReport::bad(i, "transaction newer than its block");
                }
                if tx.timestamp < prev_ts {
                    return ChainReport::bad(i, "transaction older than previous block");
                }
            }
            match merkle_root(&block.body) {
                Ok(root) if root == block.header.merkle_root => {}
                _ => return ChainReport::bad(i, "merkle root mismatch"),
            }
            let id = Block::compute_id(&block.header.prev_id, block.header.timestamp, &block.header.merkle_root);
            if id != block.header.block_id {
                return ChainReport::bad(i, "block id mismatch");
            }
            prev_id = block.header.block_id;
            prev_ts = block.header.timestamp;
        }
        ChainReport::good()
    }

    /// Matching transactions in chain order.
    pub fn query(&self, kind: TxKind, author: Option<Uuid>) -> Vec<&Transaction> {
        self.blocks
            .iter()
            .flat_map(|b| b.body.iter())
            .filter(|t| t.kind == kind && author.map_or(true, |a| t.author == a))
            .collect()
    }

    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.blocks.iter().flat_map(|b| b.body.iter())
    }
}

// ---------------------------------------------------------------------------
// Sealed envelopes
// ---------------------------------------------------------------------------

/// A 32-byte session key plus its public identifier. The identifier goes on
/// chain; the key never does.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionKey {
    pub key_id: Digest256,
    pub key: [u8; 32],
}

impl SessionKey {
    pub fn from_bytes(key: [u8; 32]) -> SessionKey {
        let mut c = CanonicalBytes::new();
        c.put_str("key-id").put_bytes(&key);
        SessionKey {
            key_id: c.digest(),
            key,
        }
    }
}

/// Simulated authenticated encryption: XOR keystream + digest tag. A stand-in
/// with the two properties the protocol relies on — chain observers without
/// the key cannot read payloads, and any tampering is detected on open.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    pub key_id: Digest256,
    pub nonce: [u8; 16],
    pub ciphertext: Vec<u8>,
    pub auth_tag: Digest256,
}

fn keystream_xor(key: &[u8; 32], nonce: &[u8; 16], data: &mut [u8]) {
    let mut counter: u64 = 0;
    for chunk in data.chunks_mut(32) {
        let mut c = CanonicalBytes::new();
        c.put_bytes(key).put_bytes(nonce).put_u64(counter);
        let block = c.digest();
        for (b, k) in chunk.iter_mut().zip(block.0.iter()) {
            *b ^= k;
        }
        counter += 1;
    }
}

fn auth_tag(key: &[u8; 32], nonce: &[u8; 16], ciphertext: &[u8]) -> Digest256 {
    let mut c = CanonicalBytes::new();
    c.put_bytes(key).put_bytes(nonce).put_bytes(ciphertext);
    c.digest()
}

/// Deterministic nonce from (key id, counter); the sealer owns the counter.
pub fn derive_nonce(key_id: &Digest256, counter: u64) -> [u8; 16] {
    let mut c = CanonicalBytes::new();
    c.put_str("nonce").put_digest(key_id).put_u64(counter);
    let d = c.digest();
    let mut nonce = [0u8; 16];
    nonce.copy_from_slice(&d.0[..16]);
    nonce
}

pub fn seal(payload: &[u8], key: &SessionKey, nonce: [u8; 16]) -> Envelope {
    let mut ciphertext = payload.to_vec();
    keystream_xor(&key.key, &nonce, &mut ciphertext);
    let tag = auth_tag(&key.key, &nonce, &ciphertext);
    Envelope {
        key_id: key.key_id,
        nonce,
        ciphertext,
        auth_tag: tag,
    }
}

pub fn open(envelope: &Envelope, key: &SessionKey) -> Result<Vec<u8>, LedgerError> {
    if auth_tag(&key.key, &envelope.nonce, &envelope.ciphertext) != envelope.auth_tag {
        return Err(LedgerError::AuthFailure);
    }
    let mut plaintext = envelope.ciphertext.clone();
    keystream_xor(&key.key, &envelope.nonce, &mut plaintext);
    Ok(plaintext)
}

impl Envelope {
    /// Compact binary form: key_id ‖ nonce ‖ len ‖ ciphertext ‖ tag.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 16 + 4 + self.ciphertext.len() + 32);
        out.extend_from_slice(&self.key_id.0);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.auth_tag.0);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Envelope, LedgerError> {
        let fail = || LedgerError::MalformedDump {
            line: 0,
            reason: "malformed envelope bytes".into(),
        };
        if bytes.len() < 32 + 16 + 4 + 32 {
            return Err(fail());
        }
        let mut key_id = [0u8; 32];
        key_id.copy_from_slice(&bytes[0..32]);
        let mut nonce = [0u8; 16];
        nonce.copy_from_slice(&bytes[32..48]);
        let len = u32::from_le_bytes(bytes[48..52].try_into().unwrap()) as usize;
        if bytes.len() != 52 + len + 32 {
            return Err(fail());
        }
        let ciphertext = bytes[52..52 + len].to_vec();
        let mut tag = [0u8; 32];
        tag.copy_from_slice(&bytes[52 + len..]);
        Ok(Envelope {
            key_id: Digest256(key_id),
            nonce,
            ciphertext,
            auth_tag: Digest256(tag),
        })
    }
}

// ---------------------------------------------------------------------------
// Dump format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpHeader {
    format: String,
    digest: String,
    tag: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpTx {
    kind: String,
    author: String,
    payload_b64: String,
    txid: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpBlock {
    height: u64,
    prev: String,
    id: String,
    ts: Tick,
    root: String,
    txs: Vec<DumpTx>,
}

const DUMP_FORMAT: &str = "tdml.chain.v1";

/// Serialize the chain: header line + one JSON line per block.
pub fn write_dump(chain: &Chain) -> String {
    use base64::Engine as _;
    let b64 = base64::engine::general_purpose::STANDARD;
    let mut out = String::new();
    let header = DumpHeader {
        format: DUMP_FORMAT.to_string(),
        digest: DIGEST_NAME.to_string(),
        tag: chain.genesis_tag.clone(),
    };
    out.push_str(&serde_json::to_string(&header).expect("header serializes"));
    out.push('\n');
    for (height, block) in chain.blocks.iter().enumerate() {
        let line = DumpBlock {
            height: height as u64,
            prev: block.header.prev_id.to_hex(),
            id: block.header.block_id.to_hex(),
            ts: block.header.timestamp,
            root: block.header.merkle_root.to_hex(),
            txs: block
                .body
                .iter()
                .map(|t| DumpTx {
                    kind: t.kind.name().to_string(),
                    author: t.author.to_string(),
                    payload_b64: b64.encode(&t.payload),
                    txid: t.tx_id.to_hex(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line).expect("block serializes"));
        out.push('\n');
    }
    out
}

fn malformed(line: usize, reason: impl Into<String>) -> LedgerError {
    LedgerError::MalformedDump {
        line,
        reason: reason.into(),
    }
}

/// Parse a dump. Strict on every field: hex must be lowercase, base64 and
/// uuid must re-encode byte-identically, heights must be sequential. The
/// caller still runs [`Chain::verify`] to recheck the digest invariants.
pub fn read_dump(text: &str) -> Result<Chain, LedgerError> {
    use base64::Engine as _;
    let b64 = base64::engine::general_purpose::STANDARD;

    let lines: Vec<&str> = text.split('\n').collect();
    let header_line = *lines.first().ok_or_else(|| malformed(0, "empty dump"))?;
    let header: DumpHeader =
        serde_json::from_str(header_line).map_err(|e| malformed(0, e.to_string()))?;
    if header.format != DUMP_FORMAT {
        return Err(malformed(0, format!("unknown format {:?}", header.format)));
    }
    if header.digest != DIGEST_NAME {
        return Err(LedgerError::DigestMismatch {
            found: header.digest,
            expected: DIGEST_NAME.to_string(),
        });
    }

    let mut chain = Chain::new(header.tag);
    let mut expect_height: u64 = 0;
    for (lineno, line) in lines.iter().enumerate().skip(1) {
        let line = *line;
        if line.is_empty() {
            // Only a trailing newline may leave an empty remainder.
            if lineno == lines.len() - 1 {
                break;
            }
            return Err(malformed(lineno, "blank line"));
        }
        let raw: DumpBlock =
            serde_json::from_str(line).map_err(|e| malformed(lineno, e.to_string()))?;
        if raw.height != expect_height {
            return Err(malformed(lineno, "non-sequential height"));
        }
        expect_height += 1;

        let prev = Digest256::from_hex(&raw.prev).ok_or_else(|| malformed(lineno, "bad prev hex"))?;
        let id = Digest256::from_hex(&raw.id).ok_or_else(|| malformed(lineno, "bad id hex"))?;
        let root = Digest256::from_hex(&raw.root).ok_or_else(|| malformed(lineno, "bad root hex"))?;

        let mut body = Vec::with_capacity(raw.txs.len());
        for tx in &raw.txs {
            let kind = TxKind::from_name(&tx.kind)
                .ok_or_else(|| malformed(lineno, format!("unknown kind {:?}", tx.kind)))?;
            let author = Uuid::parse_str(&tx.author)
                .ok()
                .filter(|u| u.to_string() == tx.author)
                .ok_or_else(|| malformed(lineno, "non-canonical author uuid"))?;
            let payload = b64
                .decode(&tx.payload_b64)
                .ok()
                .filter(|p| b64.encode(p) == tx.payload_b64)
                .ok_or_else(|| malformed(lineno, "non-canonical payload base64"))?;
            let txid = Digest256::from_hex(&tx.txid)
                .ok_or_else(|| malformed(lineno, "bad txid hex"))?;
            // Transactions share their block's tick in this dump format.
            body.push(Transaction {
                timestamp: raw.ts,
                author,
                kind,
                payload,
                tx_id: txid,
            });
        }
        chain.blocks.push(Block {
            header: BlockHeader {
                prev_id: prev,
                block_id: id,
                timestamp: raw.ts,
                merkle_root: root,
            },
            body,
        });
    }
    Ok(chain)
}
