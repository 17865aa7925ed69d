//! End-to-end honest job: two data-parallel pipelines, two trainers each,
//! cross-validation and top-K aggregation every epoch. Prints the protocol
//! trace and the per-epoch metrics.
//!
//! ```bash
//! cargo run --example honest_run
//! ```

use tdml::ledger::TxKind;
use tdml::model::SynthSpec;
use tdml::protocol::{BaselineCapability, TrainingConfig};
use tdml::sim::{run_scenario, Mode, RosterEntry, Scenario};

fn main() {
    let scenario = Scenario {
        job_tag: "example-honest".into(),
        mode: Mode::Tdml,
        master_seed: 7,
        reward_budget: 100_000,
        training: TrainingConfig {
            learning_rate: 0.1,
            epochs: 4,
            pipelines: 2,
            top_k: 1,
            batch_size: 16,
            suspicion_tau: 0.5,
            suspicion_margin: 0.05,
            init_seed: 1,
            data_seed: 2,
        },
        layer_dims: vec![16, 16, 12, 4],
        precision_bytes: 4,
        dataset: SynthSpec {
            train_rows: 1600,
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
                compute_score: 8.0 - i as f64,
            })
            .collect(),
        trainers: (0..4)
            .map(|i| RosterEntry {
                name: format!("tr-{i}"),
                memory_bytes: 1300,
                cpus: 2,
                compute_score: 1.0,
            })
            .collect(),
        attacks: Vec::new(),
        liar: None,
        ps_pool_percent: 30,
    };

    let out = run_scenario(&scenario).expect("honest run completes");

    println!("protocol trace (tick, author, kind):");
    for entry in &out.trace {
        println!("  {:>3}  {}  {}", entry.tick, entry.author, entry.kind);
    }

    println!("\nper-epoch metrics:");
    println!("  pipeline epoch train_loss test_acc global_acc");
    for row in &out.metrics {
        println!(
            "  {:>8} {:>5} {:>10.4} {:>8.4} {:>10.4}",
            row.pipeline, row.epoch, row.train_loss, row.test_acc, row.global_acc
        );
    }

    let publishes = out.private_chain.query(TxKind::GlobalModelPublish, None).len();
    println!("\nglobal models published: {publishes}");
    println!("public chain verifies:  {}", out.public_chain.verify().ok);
    println!("private chain verifies: {}", out.private_chain.verify().ok);
    println!("final global accuracy:  {:.4}", out.final_global_acc);
}
