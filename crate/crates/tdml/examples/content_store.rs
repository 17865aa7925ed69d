//! The content-addressed store: batches are sealed with the job key before
//! upload, addressed by the digest of their ciphertext, and reassemble the
//! original dataset exactly.
//!
//! ```bash
//! cargo run --example content_store
//! ```

use tdml::ledger::SessionKey;
use tdml::model::{synthetic_blobs, SynthSpec};
use tdml::store::{batch_dataset, get_sealed_batch, split_batches, BlobStore};

fn main() {
    let spec = SynthSpec {
        train_rows: 105,
        test_rows: 20,
        ..SynthSpec::default()
    };
    let (train, _) = synthetic_blobs(&spec, 2);
    let job_key = SessionKey::from_bytes([9u8; 32]);

    let mut store = BlobStore::new();
    let cids = batch_dataset(&mut store, &train, 10, 77, &job_key).expect("batching");
    println!("{} samples -> {} sealed batches", train.rows, cids.len());
    for (i, cid) in cids.iter().enumerate().take(3) {
        println!("  batch {i}: {cid}");
    }
    println!("  ...");

    // Content addressing: identical bytes store once.
    let before = store.len();
    let again = batch_dataset(&mut store, &train, 10, 77, &job_key).expect("batching");
    assert_eq!(cids, again);
    assert_eq!(store.len(), before);
    println!("re-upload with the same seed: identical CIDs, store size unchanged");

    // Without the key the blobs are opaque; with it they decode.
    let wrong_key = SessionKey::from_bytes([1u8; 32]);
    assert!(get_sealed_batch(&store, &cids[0], &wrong_key).is_err());
    let batch = get_sealed_batch(&store, &cids[0], &job_key).expect("decode");
    println!(
        "batch 0 opens with the job key: {} rows x {} cols, labels {:?}...",
        batch.rows,
        batch.cols,
        &batch.labels[..4.min(batch.labels.len())]
    );

    // Contiguous split across pipelines, remainder round-robin.
    let splits = split_batches(&cids, 4);
    println!(
        "split over 4 pipelines: {:?} batches each",
        splits.iter().map(Vec::len).collect::<Vec<_>>()
    );
}
