//! Incentives make attacks unprofitable: the settled payout of a blocked
//! attacker is zero, strictly less than what the same seat earns in the
//! honest twin of the scenario, and the burned share is never redistributed.
//!
//! ```bash
//! cargo run --example reward_settlement
//! ```

use tdml::audit::settle_rewards;
use tdml::model::SynthSpec;
use tdml::protocol::{BaselineCapability, TrainingConfig};
use tdml::robust::AttackKind;
use tdml::sim::{node_uuid, run_scenario, AttackEntry, Mode, RosterEntry, Scenario};

fn scenario(attack: bool) -> Scenario {
    Scenario {
        job_tag: "example-rewards".into(),
        mode: Mode::Tdml,
        master_seed: 23,
        reward_budget: 70_000,
        training: TrainingConfig {
            learning_rate: 0.1,
            epochs: 3,
            pipelines: 5,
            top_k: 2,
            batch_size: 16,
            suspicion_tau: 0.5,
            suspicion_margin: 0.05,
            init_seed: 6,
            data_seed: 7,
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
        attacks: if attack {
            vec![AttackEntry {
                kind: AttackKind::Gaussian,
                target: "tr-4".into(),
                shift: 0.0,
                sigma_sq: 30.0,
                start_epoch: 0,
            }]
        } else {
            Vec::new()
        },
        liar: None,
        ps_pool_percent: 30,
    }
}

fn main() {
    let attacker = node_uuid("tr-4");

    let attacked = scenario(true);
    let out = run_scenario(&attacked).expect("attacked run");
    assert!(!out.detections.is_empty(), "attack should be detected");
    let ledger = settle_rewards(&out.private_chain, attacked.reward_budget, 30, 3, true)
        .expect("settlement");

    println!("attacked run settlement (budget {}):", ledger.budget);
    println!("  node                                  role              units payout");
    for entry in &ledger.entries {
        println!(
            "  {}  {:<16} {:>5} {:>6}",
            entry.node, entry.role, entry.work_units, entry.payout
        );
    }
    println!("  total paid: {} (burned: {})", ledger.total_paid, ledger.budget - ledger.total_paid);

    let honest = scenario(false);
    let honest_out = run_scenario(&honest).expect("honest run");
    let honest_ledger = settle_rewards(&honest_out.private_chain, honest.reward_budget, 30, 3, true)
        .expect("settlement");

    let attacked_payout = ledger.payout_of(attacker);
    let honest_payout = honest_ledger.payout_of(attacker);
    println!("\nattacker seat tr-4:");
    println!("  payout when attacking: {attacked_payout}");
    println!("  payout when honest:    {honest_payout}");
    assert!(attacked_payout < honest_payout);
    assert_eq!(honest_ledger.total_paid, honest_ledger.budget);
    println!("attacking strictly loses tokens.");
}
