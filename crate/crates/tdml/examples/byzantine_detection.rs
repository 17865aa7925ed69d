//! A zero-gradient attacker among ten trainers: cross-validation flags the
//! poisoned local model, the ranking detector isolates the malicious layer,
//! and the shard map traces it back to the trainer, who gets blocked.
//!
//! ```bash
//! cargo run --example byzantine_detection
//! ```

use tdml::model::SynthSpec;
use tdml::protocol::{BaselineCapability, TrainingConfig};
use tdml::robust::AttackKind;
use tdml::sim::{node_uuid, run_scenario, AttackEntry, Mode, RosterEntry, Scenario};

fn main() {
    let scenario = Scenario {
        job_tag: "example-detect".into(),
        mode: Mode::Tdml,
        master_seed: 3,
        reward_budget: 100_000,
        training: TrainingConfig {
            learning_rate: 0.1,
            epochs: 3,
            pipelines: 5,
            top_k: 2,
            batch_size: 16,
            suspicion_tau: 0.5,
            suspicion_margin: 0.05,
            init_seed: 4,
            data_seed: 5,
        },
        layer_dims: vec![16, 16, 12, 4],
        precision_bytes: 4,
        dataset: SynthSpec {
            train_rows: 5000,
            test_rows: 1000,
            noise_std: 0.5,
            center_range: 1.5,
            ..SynthSpec::default()
        },
        baseline: BaselineCapability {
            min_memory_bytes: 64,
            min_cpus: 1,
        },
        servers: (0..5)
            .map(|i| RosterEntry {
                name: format!("ps-{i}"),
                memory_bytes: 1 << 24,
                cpus: 4,
                compute_score: 5.0,
            })
            .collect(),
        trainers: (0..10)
            .map(|i| RosterEntry {
                name: format!("tr-{i}"),
                memory_bytes: 1300,
                cpus: 2,
                compute_score: 1.0,
            })
            .collect(),
        attacks: vec![AttackEntry {
            kind: AttackKind::ZeroGradient,
            target: "tr-3".into(),
            shift: 0.0,
            sigma_sq: 0.0,
            start_epoch: 0,
        }],
        liar: None,
        ps_pool_percent: 30,
    };

    let out = run_scenario(&scenario).expect("run completes");
    let attacker = node_uuid("tr-3");

    println!("attacker: tr-3 ({attacker})");
    println!("detections: {}", out.detections.len());
    for payload in &out.detections {
        let r = &payload.report;
        println!("\npipeline {} flagged at epoch {}", payload.pipeline, r.epoch);
        println!("per-layer separation scores: {:?}", r.separation);
        println!("flagged layer: {}", r.flagged_layer);
        println!("attributed trainers: {:?}", r.attributed_trainers);
        println!("\nranking embedding at the flagged layer (mean rank, rank std):");
        for (model, feat) in r.sampled_models.iter().zip(&r.features[r.flagged_layer]) {
            let marker = if r.malicious_models.contains(model) {
                "  <-- minority cluster"
            } else {
                ""
            };
            println!(
                "  {model}: ({:.3}, {:.3}){marker}",
                feat.mean_rank, feat.rank_std
            );
        }
    }
    println!(
        "\nblocked trainers: {:?}",
        out.blocked.keys().collect::<Vec<_>>()
    );
    assert!(out.blocked.contains_key(&attacker), "attacker must be blocked");
    println!("final global accuracy (attacker excluded): {:.4}", out.final_global_acc);
}
