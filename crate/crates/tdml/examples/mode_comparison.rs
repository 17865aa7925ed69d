//! Three-way comparison under poisoning: one mean-shift attacker in a
//! four-pipeline job. Plain federated averaging folds the poisoned model
//! into every round; top-K aggregation with cross-validation filters it out
//! and tracks one-node training.
//!
//! ```bash
//! cargo run --example mode_comparison
//! ```

use tdml::model::SynthSpec;
use tdml::protocol::{BaselineCapability, TrainingConfig};
use tdml::robust::AttackKind;
use tdml::sim::{run_scenario, AttackEntry, Mode, RosterEntry, Scenario};

fn scenario(mode: Mode, shift: f64) -> Scenario {
    let pipelines = match mode {
        Mode::SingleNode => 1,
        _ => 4,
    };
    Scenario {
        job_tag: format!("example-compare-{mode:?}").to_lowercase(),
        mode,
        master_seed: 31,
        reward_budget: 80_000,
        training: TrainingConfig {
            learning_rate: 0.1,
            epochs: 6,
            pipelines,
            top_k: TrainingConfig::default_top_k(pipelines),
            batch_size: 16,
            suspicion_tau: 0.5,
            suspicion_margin: 0.05,
            init_seed: 12,
            data_seed: 13,
        },
        layer_dims: vec![16, 16, 12, 4],
        precision_bytes: 4,
        dataset: SynthSpec {
            train_rows: 4000,
            test_rows: 1000,
            noise_std: 0.6,
            center_range: 1.4,
            ..SynthSpec::default()
        },
        baseline: BaselineCapability {
            min_memory_bytes: 64,
            min_cpus: 1,
        },
        servers: (0..pipelines)
            .map(|i| RosterEntry {
                name: format!("ps-{i}"),
                memory_bytes: 1 << 24,
                cpus: 4,
                compute_score: 5.0,
            })
            .collect(),
        trainers: (0..pipelines * 2)
            .map(|i| RosterEntry {
                name: format!("tr-{i}"),
                memory_bytes: 1300,
                cpus: 2,
                compute_score: 1.0,
            })
            .collect(),
        // The attacker poisons its pipeline in the data-parallel modes; the
        // one-node baseline runs clean by definition.
        attacks: if pipelines > 1 {
            vec![AttackEntry {
                kind: AttackKind::MeanShift,
                target: "tr-1".into(),
                shift,
                sigma_sq: 0.0,
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
    let shift = 0.01;
    let mut rows: Vec<(String, Vec<f64>, f64)> = Vec::new();
    for mode in [Mode::SingleNode, Mode::Fedavg, Mode::Tdml] {
        let s = scenario(mode, shift);
        let out = run_scenario(&s).expect("run");
        let mut per_epoch: Vec<f64> = Vec::new();
        for row in &out.metrics {
            if per_epoch.len() <= row.epoch as usize {
                per_epoch.push(row.global_acc);
            }
        }
        rows.push((format!("{mode:?}").to_lowercase(), per_epoch, out.final_global_acc));
    }

    println!("global test accuracy per epoch (one mean-shift attacker, shift {shift}):");
    print!("{:<12}", "mode");
    for e in 0..rows[0].1.len() {
        print!(" e{e:<6}");
    }
    println!(" final");
    for (mode, per_epoch, final_acc) in &rows {
        print!("{mode:<12}");
        for acc in per_epoch {
            print!(" {acc:<6.4}");
        }
        println!(" {final_acc:.4}");
    }

    let single = rows[0].2;
    let fedavg = rows[1].2;
    let tdml = rows[2].2;
    println!("\ntdml − fedavg: {:+.4}", tdml - fedavg);
    println!("tdml − single_node: {:+.4}", tdml - single);
}
