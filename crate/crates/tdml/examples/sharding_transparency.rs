//! Pipeline sharding leaves training bit-exact: split an 8-layer model
//! across 1, 2, 4, or 8 trainers and the trained parameters are identical to
//! one-node training on the same batch order, bit for bit.
//!
//! ```bash
//! cargo run --example sharding_transparency
//! ```

use tdml::ledger::SessionKey;
use tdml::model::{self, init_model, synthetic_blobs, Arch, SynthSpec};
use tdml::pipeline::{self, NodeSpec, PipelineState};
use tdml::store::{batch_dataset, BlobStore};
use uuid::Uuid;

fn main() {
    let arch = Arch::new(vec![16, 24, 24, 24, 24, 24, 24, 16, 4], 4).expect("valid arch");
    let spec = SynthSpec {
        train_rows: 512,
        test_rows: 64,
        ..SynthSpec::default()
    };
    let (train, _) = synthetic_blobs(&spec, 11);
    let job_key = SessionKey::from_bytes([5u8; 32]);
    let mut store = BlobStore::new();
    let cids = batch_dataset(&mut store, &train, 32, 3, &job_key).expect("batching");
    let global = init_model(&arch, 9);
    let epochs = 2;

    // One-node reference: the direct training loop, no pipeline machinery.
    let mut reference = global.clone();
    for epoch in 0..epochs {
        let (params, _, _) = pipeline::single_node_epoch(
            &reference, &store, &cids, 0, epoch, 42, 0.1, &job_key,
        )
        .expect("reference epoch");
        reference.params = params;
    }

    let profile = model::layer_memory(&arch);
    println!("8 weight layers, {} bytes total", profile.total);

    for shards in [1usize, 2, 4, 8] {
        let layers_per = 8 / shards;
        let specs: Vec<NodeSpec> = (0..shards)
            .map(|s| NodeSpec {
                trainer: Uuid::from_bytes([s as u8 + 1; 16]),
                memory_bytes: profile.per_layer[s * layers_per..(s + 1) * layers_per]
                    .iter()
                    .sum(),
                compute_score: 1.0,
                address: format!("t{s}"),
            })
            .collect();
        let assignment = pipeline::shard_model(&global, &specs).expect("packs");
        assert_eq!(assignment.shards.len(), shards);

        let mut current = global.clone();
        for epoch in 0..epochs {
            let mut state =
                PipelineState::load(0, &current, assignment.clone(), job_key.clone(), 42);
            let outcome = pipeline::run_epoch(&mut state, &store, &cids, epoch, 0.1, None)
                .expect("epoch runs");
            current.params = outcome.local_params;
        }

        let identical = current
            .params
            .layers
            .iter()
            .zip(reference.params.layers.iter())
            .all(|(a, b)| {
                a.weights
                    .iter()
                    .zip(b.weights.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
                    && a.bias
                        .iter()
                        .zip(b.bias.iter())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            });
        println!(
            "{shards} shard(s): parameters bit-identical to one-node training: {identical}"
        );
        assert!(identical);
    }
}
