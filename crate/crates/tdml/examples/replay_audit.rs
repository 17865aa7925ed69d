//! Proof of training: the chain record plus the blob store and scenario
//! seeds are enough to re-execute the whole job and re-derive every model
//! digest. A validator that misreports an accuracy is caught by independent
//! re-evaluation, pinpointed by name.
//!
//! ```bash
//! cargo run --example replay_audit
//! ```

use tdml::audit::{replay, verify_training};
use tdml::model::SynthSpec;
use tdml::protocol::{BaselineCapability, TrainingConfig};
use tdml::sim::{node_uuid, run_scenario, LiarConfig, Mode, RosterEntry, Scenario};

fn scenario(liar: Option<LiarConfig>) -> Scenario {
    Scenario {
        job_tag: "example-audit".into(),
        mode: Mode::Tdml,
        master_seed: 17,
        reward_budget: 60_000,
        training: TrainingConfig {
            learning_rate: 0.1,
            epochs: 3,
            pipelines: 3,
            top_k: 1,
            batch_size: 16,
            suspicion_tau: 0.5,
            suspicion_margin: 0.05,
            init_seed: 8,
            data_seed: 9,
        },
        layer_dims: vec![16, 16, 12, 4],
        precision_bytes: 4,
        dataset: SynthSpec {
            train_rows: 1200,
            test_rows: 400,
            noise_std: 0.6,
            center_range: 1.4,
            ..SynthSpec::default()
        },
        baseline: BaselineCapability {
            min_memory_bytes: 64,
            min_cpus: 1,
        },
        servers: (0..3)
            .map(|i| RosterEntry {
                name: format!("ps-{i}"),
                memory_bytes: 1 << 24,
                cpus: 4,
                compute_score: 5.0,
            })
            .collect(),
        trainers: (0..3)
            .map(|i| RosterEntry {
                name: format!("tr-{i}"),
                memory_bytes: 4000,
                cpus: 2,
                compute_score: 1.0,
            })
            .collect(),
        attacks: Vec::new(),
        liar,
        ps_pool_percent: 30,
    }
}

fn main() {
    // Honest job: replay reproduces every digest.
    let honest = scenario(None);
    let out = run_scenario(&honest).expect("run");
    let report = replay(&out.private_chain, &out.store, &honest).expect("replay");
    println!("honest replay ok: {}", report.ok);
    for (epoch, digest) in &report.global_digests {
        println!("  epoch {epoch}: global {digest}");
    }

    // A validator misreports one accuracy by +0.02. The chain stays
    // internally consistent, replay still passes, but re-evaluating the
    // uploaded model exposes the lie and its author.
    let liar_name = (0..3)
        .map(|i| format!("ps-{i}"))
        .min_by_key(|n| node_uuid(n))
        .expect("some server");
    let lying = scenario(Some(LiarConfig {
        validator: liar_name.clone(),
        epoch: 1,
        delta: 0.02,
    }));
    let out = run_scenario(&lying).expect("run");
    let report = verify_training(&out.public_chain, &out.private_chain, &out.store, &lying)
        .expect("verify");
    println!("\nlying-validator run:");
    println!("  chains ok:  {}", report.chains_ok);
    println!("  replay ok:  {}", report.replay.as_ref().map(|r| r.ok).unwrap_or(false));
    for m in &report.validation_mismatches {
        println!(
            "  mismatch: validator {} reported {:.4}, re-evaluation gives {:.4} (epoch {})",
            m.validator, m.recorded_accuracy, m.recomputed_accuracy, m.epoch
        );
    }
    assert_eq!(report.validation_mismatches.len(), 1);
    assert_eq!(report.validation_mismatches[0].validator, node_uuid(&liar_name));
    println!("  verdict: not ok (as it should be)");
}
