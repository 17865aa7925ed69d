//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured numbers. Run with `cargo test --test acceptance`.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::OnceLock;
use tdml::audit;
use tdml::ledger::{SessionKey, TxKind};
use tdml::model::{self, init_model, synthetic_blobs, Arch, SynthSpec};
use tdml::pipeline::{self, NodeSpec, PipelineState};
use tdml::protocol::{BaselineCapability, GradientUploadPayload, TrainingConfig};
use tdml::robust::AttackKind;
use tdml::sim::{self, node_uuid, open_b64, run_scenario, AttackEntry, LiarConfig, Mode,
    RosterEntry, Scenario, SimOutput};
use tdml::store::{batch_dataset, BlobStore};
use uuid::Uuid;

// ---------------------------------------------------------------------------
// Shared scenario builders
// ---------------------------------------------------------------------------

/// Base job: N pipelines, two trainers each sized to split the model in two.
fn base_scenario(mode: Mode, pipelines: u32, seed: u64) -> Scenario {
    let layer_dims = vec![16u32, 16, 12, 8, 4];
    let arch = Arch::new(layer_dims.clone(), 4).unwrap();
    let total = model::layer_memory(&arch).total;
    Scenario {
        job_tag: "acceptance".into(),
        mode,
        master_seed: 1000 + seed,
        reward_budget: 100_000,
        training: TrainingConfig {
            learning_rate: 0.1,
            epochs: 3,
            pipelines,
            top_k: TrainingConfig::default_top_k(pipelines),
            batch_size: 16,
            suspicion_tau: 0.5,
            suspicion_margin: 0.04,
            init_seed: 2000 + seed,
            data_seed: 3000 + seed,
        },
        layer_dims,
        precision_bytes: 4,
        dataset: SynthSpec {
            classes: 4,
            input_dim: 16,
            train_rows: 5000,
            test_rows: 1000,
            center_range: 1.5,
            noise_std: 0.5,
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
                memory_bytes: total / 2 + 200,
                cpus: 2,
                compute_score: 1.0,
            })
            .collect(),
        attacks: Vec::new(),
        liar: None,
        ps_pool_percent: 30,
    }
}

/// Mean benign gradient-record scale from a finished honest run.
fn benign_rms(out: &SimOutput, scenario: &Scenario) -> f64 {
    let job_key = tdml::protocol::derive_job_key(&scenario.job_tag, scenario.master_seed);
    let mut total = 0.0;
    let mut n = 0usize;
    for tx in out.private_chain.query(TxKind::GradientUpload, None) {
        let p: GradientUploadPayload = serde_json::from_slice(&tx.payload).unwrap();
        if p.epoch == 0 {
            let layers =
                model::decode_layers(&open_b64(&p.sealed_b64, &job_key).unwrap()).unwrap();
            total += tdml::robust::gradient_rms(&layers);
            n += 1;
        }
    }
    total / n as f64
}

/// Trainer seats for the detection scenarios: the trainer holding layers
/// [1,4) of pipeline 2 (zero / Gaussian target) and the one holding [0,1)
/// (mean-shift target; a shift on the final layer cancels in softmax, so the
/// shift must land on hidden layers to affect anything).
fn detection_seats(out: &SimOutput) -> (String, String) {
    let mut head = None;
    let mut first = None;
    for tx in out.private_chain.query(TxKind::ShardUpload, None) {
        let p: tdml::protocol::ShardUploadPayload = serde_json::from_slice(&tx.payload).unwrap();
        if p.pipeline == 2 {
            let name = out
                .roster
                .names
                .iter()
                .find(|(_, &u)| u == p.trainer)
                .map(|(n, _)| n.clone())
                .unwrap();
            if p.layer_lo == 0 {
                first = Some(name);
            } else {
                head = Some(name);
            }
        }
    }
    (head.unwrap(), first.unwrap())
}

// ---------------------------------------------------------------------------
// Criterion 1 — sharding transparency
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_sharding_transparency() {
    let arch = Arch::new(vec![16, 24, 24, 24, 24, 24, 24, 16, 4], 4).unwrap();
    let spec = SynthSpec {
        train_rows: 512,
        test_rows: 64,
        ..SynthSpec::default()
    };
    let (train, _) = synthetic_blobs(&spec, 11);
    let job_key = SessionKey::from_bytes([5u8; 32]);
    let mut store = BlobStore::new();
    let cids = batch_dataset(&mut store, &train, 32, 3, &job_key).unwrap();
    let global = init_model(&arch, 9);
    let epochs = 3u32;

    // One-node reference: the direct per-batch training loop.
    let mut reference = global.clone();
    for epoch in 0..epochs {
        let (params, _, _) =
            pipeline::single_node_epoch(&reference, &store, &cids, 0, epoch, 42, 0.1, &job_key)
                .unwrap();
        reference.params = params;
    }

    let profile = model::layer_memory(&arch);
    for shard_count in [1usize, 2, 4, 8] {
        let layers_per = 8 / shard_count;
        let specs: Vec<NodeSpec> = (0..shard_count)
            .map(|s| NodeSpec {
                trainer: Uuid::from_bytes([s as u8 + 1; 16]),
                memory_bytes: profile.per_layer[s * layers_per..(s + 1) * layers_per]
                    .iter()
                    .sum(),
                compute_score: 1.0,
                address: format!("t{s}"),
            })
            .collect();
        let assignment = pipeline::shard_model(&global, &specs).unwrap();
        assert_eq!(assignment.shards.len(), shard_count);

        let mut current = global.clone();
        for epoch in 0..epochs {
            let mut state =
                PipelineState::load(0, &current, assignment.clone(), job_key.clone(), 42);
            let outcome =
                pipeline::run_epoch(&mut state, &store, &cids, epoch, 0.1, None).unwrap();
            current.params = outcome.local_params;
        }
        for (l, (a, b)) in current
            .params
            .layers
            .iter()
            .zip(reference.params.layers.iter())
            .enumerate()
        {
            let wa: Vec<u64> = a.weights.iter().map(|v| v.to_bits()).collect();
            let wb: Vec<u64> = b.weights.iter().map(|v| v.to_bits()).collect();
            assert_eq!(wa, wb, "{shard_count} shards: weight bits differ at layer {l}");
            let ba: Vec<u64> = a.bias.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.bias.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ba, bb, "{shard_count} shards: bias bits differ at layer {l}");
        }
    }
    println!("ACCEPTANCE 1 sharding-transparency: PASS (shard counts 1,2,4,8 bit-identical over {epochs} epochs)");
}

// ---------------------------------------------------------------------------
// Criterion 4 — tamper evidence fuzz
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_tamper_evidence() {
    let scenario = base_scenario(Mode::Tdml, 2, 400);
    let out = run_scenario(&scenario).unwrap();
    let settlement = audit::settle_rewards(
        &out.private_chain,
        scenario.reward_budget,
        scenario.ps_pool_percent,
        scenario.training.epochs,
        true,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    tdml::cli::write_artifacts(dir.path(), &scenario, &out, &settlement).unwrap();
    assert_eq!(tdml::cli::verify(dir.path()), 0, "honest dump must verify");

    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let targets = ["public_chain.jsonl", "private_chain.jsonl"];
    let originals: Vec<Vec<u8>> = targets
        .iter()
        .map(|name| std::fs::read(dir.path().join(name)).unwrap())
        .collect();

    let mut caught = 0usize;
    let trials = 1000usize;
    for i in 0..trials {
        let which = i % targets.len();
        let mut mutated = originals[which].clone();
        let pos = rng.gen_range(0..mutated.len());
        let old = mutated[pos];
        let mut new = rng.gen::<u8>();
        while new == old {
            new = rng.gen::<u8>();
        }
        mutated[pos] = new;
        std::fs::write(dir.path().join(targets[which]), &mutated).unwrap();
        let code = tdml::cli::verify(dir.path());
        std::fs::write(dir.path().join(targets[which]), &originals[which]).unwrap();
        assert_eq!(
            code, 1,
            "mutation {i}: byte {pos} of {} ({old:#04x} -> {new:#04x}) exited {code}",
            targets[which]
        );
        caught += 1;
    }
    assert_eq!(caught, trials);
    println!("ACCEPTANCE 4 tamper-evidence: PASS ({caught}/{trials} single-byte mutations exit 1)");
}

// ---------------------------------------------------------------------------
// Criterion 5 — proof of training
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_proof_of_training() {
    // Honest run: zero divergences, every digest reproduced.
    let scenario = base_scenario(Mode::Tdml, 3, 500);
    let out = run_scenario(&scenario).unwrap();
    let report =
        audit::verify_training(&out.public_chain, &out.private_chain, &out.store, &scenario)
            .unwrap();
    assert!(report.chains_ok);
    let replay = report.replay.as_ref().unwrap();
    assert!(replay.ok, "divergences: {:?}", replay.divergences);
    assert_eq!(replay.global_digests.len(), scenario.training.epochs as usize);
    assert!(report.validation_mismatches.is_empty());
    assert!(report.ok);

    // One falsified validation result: exactly one mismatch, naming the liar.
    let mut lying = base_scenario(Mode::Tdml, 3, 501);
    let liar_name = (0..3)
        .map(|i| format!("ps-{i}"))
        .min_by_key(|n| node_uuid(n))
        .unwrap();
    lying.liar = Some(LiarConfig {
        validator: liar_name.clone(),
        epoch: 1,
        delta: 0.02,
    });
    let out = run_scenario(&lying).unwrap();
    let report =
        audit::verify_training(&out.public_chain, &out.private_chain, &out.store, &lying).unwrap();
    assert!(report.chains_ok);
    assert!(report.replay.as_ref().unwrap().ok);
    assert_eq!(
        report.validation_mismatches.len(),
        1,
        "mismatches: {:?}",
        report.validation_mismatches
    );
    assert_eq!(report.validation_mismatches[0].validator, node_uuid(&liar_name));
    assert!(!report.ok);

    println!(
        "ACCEPTANCE 5 proof-of-training: PASS (honest run 0 divergences; falsified validation -> 1 mismatch naming {liar_name})"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6 — gradient correctness
// ---------------------------------------------------------------------------

/// Forward pass written as independent plain loops, used only as the
/// finite-difference oracle here.
fn oracle_loss(params: &model::Parameters, features: &[f64], labels: &[u32], rows: usize) -> f64 {
    let mut h: Vec<Vec<f64>> = (0..rows)
        .map(|r| features[r * params.layers[0].d_in..(r + 1) * params.layers[0].d_in].to_vec())
        .collect();
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut next = Vec::with_capacity(rows);
        for row in &h {
            let mut out = vec![0.0; layer.d_out];
            for i in 0..layer.d_out {
                let mut acc = layer.bias[i];
                for j in 0..layer.d_in {
                    acc += layer.weights[i * layer.d_in + j] * row[j];
                }
                out[i] = if l == last { acc } else { acc.max(0.0) };
            }
            next.push(out);
        }
        h = next;
    }
    let mut total = 0.0;
    for (row, &label) in h.iter().zip(labels.iter()) {
        let zmax = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - zmax).exp()).sum();
        total += denom.ln() + zmax - row[label as usize];
    }
    total / rows as f64
}

#[test]
fn criterion_6_gradient_correctness() {
    let arch = Arch::new(vec![6, 10, 8, 4], 4).unwrap();
    let step = 1e-5;
    let rows = 4;
    let mut worst: f64 = 0.0;
    for point in 0..100u64 {
        let mut model_at = init_model(&arch, 10_000 + point);
        // Spread parameters across magnitudes up to 1.
        let mut rng = ChaCha8Rng::seed_from_u64(20_000 + point);
        let scale = Uniform::new(0.2f64, 3.0).sample(&mut rng);
        for layer in model_at.params.layers.iter_mut() {
            for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *v = (*v * scale).clamp(-1.0, 1.0);
            }
        }
        let feature_dist = Uniform::new(-1.5f64, 1.5);
        let features: Vec<f64> = (0..rows * 6).map(|_| feature_dist.sample(&mut rng)).collect();
        let labels: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..4)).collect();

        let acts = model::forward_all(&model_at.params, &features, rows).unwrap();
        let (_, dlogits) = model::loss_and_grad(acts.last().unwrap(), &labels, rows, 4);
        let grads = model::backward_all(&model_at.params, &acts, &dlogits, rows).unwrap();

        for l in 0..model_at.params.layers.len() {
            let n_w = model_at.params.layers[l].weights.len();
            let n_b = model_at.params.layers[l].bias.len();
            for idx in 0..n_w + n_b {
                let mut plus = model_at.params.clone();
                let mut minus = model_at.params.clone();
                if idx < n_w {
                    plus.layers[l].weights[idx] += step;
                    minus.layers[l].weights[idx] -= step;
                } else {
                    plus.layers[l].bias[idx - n_w] += step;
                    minus.layers[l].bias[idx - n_w] -= step;
                }
                let numeric = (oracle_loss(&plus, &features, &labels, rows)
                    - oracle_loss(&minus, &features, &labels, rows))
                    / (2.0 * step);
                let analytic = if idx < n_w {
                    grads[l].weights[idx]
                } else {
                    grads[l].bias[idx - n_w]
                };
                let err = (numeric - analytic).abs();
                worst = worst.max(err);
                assert!(
                    err < 1e-6,
                    "point {point} layer {l} idx {idx}: |{numeric} - {analytic}| = {err}"
                );
            }
        }
    }
    println!("ACCEPTANCE 6 gradient-correctness: PASS (100 points, max abs error {worst:.2e} < 1e-6)");
}

// ---------------------------------------------------------------------------
// Criterion 8 — convergence sanity
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_convergence_sanity() {
    let mut scenario = base_scenario(Mode::Tdml, 2, 800);
    scenario.training.epochs = 10;
    let out = run_scenario(&scenario).unwrap();

    // Epoch-mean training loss across pipelines.
    let epochs = scenario.training.epochs as usize;
    let mut loss = vec![0.0f64; epochs];
    let mut counts = vec![0usize; epochs];
    for row in &out.metrics {
        loss[row.epoch as usize] += row.train_loss;
        counts[row.epoch as usize] += 1;
    }
    for (l, c) in loss.iter_mut().zip(counts.iter()) {
        *l /= *c as f64;
    }

    // Non-increasing over any 5-epoch window after epoch 3.
    for start in 3..=epochs - 5 {
        assert!(
            loss[start + 4] <= loss[start],
            "window [{start}, {}]: {} -> {}",
            start + 4,
            loss[start],
            loss[start + 4]
        );
    }
    // Never spikes above 1.5x the running minimum.
    let mut running_min = f64::INFINITY;
    for (e, &l) in loss.iter().enumerate() {
        running_min = running_min.min(l);
        assert!(
            l <= 1.5 * running_min,
            "epoch {e}: loss {l} spikes above 1.5x running min {running_min}"
        );
    }
    println!(
        "ACCEPTANCE 8 convergence-sanity: PASS (loss {:.4} -> {:.4} over {epochs} epochs, no window violations, no spikes)",
        loss[0],
        loss[epochs - 1]
    );
}

// ---------------------------------------------------------------------------
// Criteria 2, 3, 7 — multi-seed runs (shared cache)
// ---------------------------------------------------------------------------

struct DetectionRuns {
    /// Per seed: honest run plus one attacked run per kind, with targets.
    honest: Vec<(Scenario, SimOutput)>,
    attacked: Vec<(AttackKind, String, Scenario, SimOutput)>,
}

fn detection_runs() -> &'static DetectionRuns {
    static RUNS: OnceLock<DetectionRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut honest = Vec::new();
        let mut attacked = Vec::new();
        for seed in 0..20u64 {
            let base = base_scenario(Mode::Tdml, 5, seed);
            let honest_out = run_scenario(&base).unwrap();
            let (head_seat, first_seat) = detection_seats(&honest_out);
            let rms = benign_rms(&honest_out, &base);
            for kind in [AttackKind::ZeroGradient, AttackKind::Gaussian, AttackKind::MeanShift] {
                let target = match kind {
                    AttackKind::MeanShift => first_seat.clone(),
                    _ => head_seat.clone(),
                };
                let mut s = base.clone();
                s.attacks.push(AttackEntry {
                    kind,
                    target: target.clone(),
                    shift: if kind == AttackKind::MeanShift { 0.5 * rms } else { 0.0 },
                    sigma_sq: if kind == AttackKind::Gaussian { 30.0 } else { 0.0 },
                    start_epoch: 0,
                });
                let out = run_scenario(&s).unwrap();
                attacked.push((kind, target, s, out));
            }
            honest.push((base, honest_out));
        }
        DetectionRuns { honest, attacked }
    })
}

#[test]
fn criterion_3_detection_under_attacks() {
    let runs = detection_runs();
    let mut hits = std::collections::BTreeMap::from([
        (AttackKind::ZeroGradient, 0u32),
        (AttackKind::Gaussian, 0u32),
        (AttackKind::MeanShift, 0u32),
    ]);
    let mut ellipse_checked = 0usize;
    for (kind, target, _, out) in &runs.attacked {
        let target_id = node_uuid(target);
        let attributed = out
            .detections
            .iter()
            .any(|d| d.report.attributed_trainers == vec![target_id])
            && out.blocked.contains_key(&target_id)
            && out.blocked.len() == 1;
        if attributed {
            *hits.get_mut(kind).unwrap() += 1;
        }

        // Feature-plot separation: at the flagged layer the attacked model
        // must sit outside the benign cluster's 3-sigma ellipse.
        for d in &out.detections {
            if d.report.attributed_trainers != vec![target_id] {
                continue;
            }
            let r = &d.report;
            let feats = &r.features[r.flagged_layer];
            let flagged_idx = r
                .sampled_models
                .iter()
                .position(|m| *m == r.flagged_model)
                .unwrap();
            let benign: Vec<(f64, f64)> = feats
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != flagged_idx)
                .map(|(_, f)| (f.mean_rank, f.rank_std))
                .collect();
            let n = benign.len() as f64;
            let (mx, my) = (
                benign.iter().map(|(x, _)| x).sum::<f64>() / n,
                benign.iter().map(|(_, y)| y).sum::<f64>() / n,
            );
            let (sx, sy) = (
                (benign.iter().map(|(x, _)| (x - mx).powi(2)).sum::<f64>() / n).sqrt() + 1e-9,
                (benign.iter().map(|(_, y)| (y - my).powi(2)).sum::<f64>() / n).sqrt() + 1e-9,
            );
            let fx = feats[flagged_idx].mean_rank;
            let fy = feats[flagged_idx].rank_std;
            let ellipse = ((fx - mx) / (3.0 * sx)).powi(2) + ((fy - my) / (3.0 * sy)).powi(2);
            assert!(
                ellipse > 1.0,
                "{kind:?}: attacker inside 3-sigma ellipse ({ellipse:.3})"
            );
            ellipse_checked += 1;
        }
    }
    let zero = hits[&AttackKind::ZeroGradient];
    let gauss = hits[&AttackKind::Gaussian];
    let shift = hits[&AttackKind::MeanShift];
    assert_eq!(zero, 20, "zero-gradient attribution {zero}/20");
    assert_eq!(gauss, 20, "gaussian attribution {gauss}/20");
    assert!(shift >= 18, "mean-shift attribution {shift}/20");
    println!(
        "ACCEPTANCE 3 detection: PASS (zero {zero}/20, gaussian {gauss}/20, mean-shift {shift}/20, {ellipse_checked} ellipse checks)"
    );
}

#[test]
fn criterion_7_incentive_consequence() {
    let runs = detection_runs();
    let mut compared = 0usize;
    for (kind, target, scenario, out) in &runs.attacked {
        let ledger = audit::settle_rewards(
            &out.private_chain,
            scenario.reward_budget,
            scenario.ps_pool_percent,
            scenario.training.epochs,
            true,
        )
        .unwrap();
        assert!(ledger.total_paid <= ledger.budget, "{kind:?}: conservation");

        // The honest twin shares the seed; look it up by master_seed.
        let twin = runs
            .honest
            .iter()
            .find(|(s, _)| s.master_seed == scenario.master_seed)
            .unwrap();
        let honest_ledger = audit::settle_rewards(
            &twin.1.private_chain,
            twin.0.reward_budget,
            twin.0.ps_pool_percent,
            twin.0.training.epochs,
            true,
        )
        .unwrap();
        assert!(honest_ledger.total_paid <= honest_ledger.budget);

        let target_id = node_uuid(target);
        let attacked_payout = ledger.payout_of(target_id);
        let honest_payout = honest_ledger.payout_of(target_id);
        assert!(
            attacked_payout < honest_payout,
            "{kind:?} seed {}: attacker payout {attacked_payout} !< honest twin {honest_payout}",
            scenario.master_seed
        );
        compared += 1;
    }
    println!(
        "ACCEPTANCE 7 incentive-consequence: PASS ({compared} attack runs all pay the attacker strictly less than the honest twin)"
    );
}

// ---------------------------------------------------------------------------
// Criterion 2 — tdml vs fedavg ordering
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_tdml_vs_fedavg() {
    let seeds = 10u64;
    let epochs = 6u32;
    let mut acc = std::collections::BTreeMap::from([
        (Mode::SingleNode, 0.0f64),
        (Mode::Fedavg, 0.0),
        (Mode::Tdml, 0.0),
    ]);
    for seed in 0..seeds {
        // Measure the benign gradient scale on the single-node run, then
        // poison one pipeline in the data-parallel modes with that delta.
        let mut single = base_scenario(Mode::SingleNode, 1, 200 + seed);
        single.training.epochs = epochs;
        single.trainers = vec![RosterEntry {
            name: "tr-0".into(),
            memory_bytes: 1 << 24,
            cpus: 4,
            compute_score: 1.0,
        }];
        let single_out = run_scenario(&single).unwrap();
        let delta = benign_rms(&single_out, &single);
        *acc.get_mut(&Mode::SingleNode).unwrap() += single_out.final_global_acc;

        for mode in [Mode::Fedavg, Mode::Tdml] {
            let mut s = base_scenario(mode, 4, 200 + seed);
            s.training.epochs = epochs;
            s.attacks.push(AttackEntry {
                kind: AttackKind::MeanShift,
                target: "tr-1".into(),
                shift: delta,
                sigma_sq: 0.0,
                start_epoch: 0,
            });
            let out = run_scenario(&s).unwrap();
            *acc.get_mut(&mode).unwrap() += out.final_global_acc;
        }
    }
    let single = acc[&Mode::SingleNode] / seeds as f64;
    let fedavg = acc[&Mode::Fedavg] / seeds as f64;
    let tdml_acc = acc[&Mode::Tdml] / seeds as f64;
    assert!(
        tdml_acc - fedavg >= 0.05,
        "tdml {tdml_acc:.4} must beat fedavg {fedavg:.4} by >= 5 points"
    );
    assert!(
        tdml_acc >= single - 0.02,
        "tdml {tdml_acc:.4} must track single-node {single:.4} within 2 points"
    );
    println!(
        "ACCEPTANCE 2 tdml-vs-fedavg: PASS (single {single:.4}, fedavg {fedavg:.4}, tdml {tdml_acc:.4} over {seeds} seeds)"
    );
}

// ---------------------------------------------------------------------------
// CLI exit-code contract exercised through the real binary
// ---------------------------------------------------------------------------

#[test]
fn cli_exit_codes_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = base_scenario(Mode::Tdml, 2, 900);
    let toml_text = toml::to_string_pretty(&scenario).unwrap();
    let scenario_path = dir.path().join("scenario.toml");
    std::fs::write(&scenario_path, toml_text).unwrap();
    let out_dir = dir.path().join("out");

    let bin = env!("CARGO_BIN_EXE_tdml");
    let status = std::process::Command::new(bin)
        .args(["run".as_ref(), scenario_path.as_os_str()])
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for artifact in [
        "scenario.json",
        "public_chain.jsonl",
        "private_chain.jsonl",
        "metrics.csv",
        "pipeline_metrics.csv",
        "detections.jsonl",
        "settlement.json",
        "trace.csv",
        "blobs",
    ] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }

    let status = std::process::Command::new(bin)
        .arg("verify")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    // Determinism: a second run writes byte-identical chain dumps.
    let out_dir2 = dir.path().join("out2");
    let status = std::process::Command::new(bin)
        .args(["run".as_ref(), scenario_path.as_os_str()])
        .arg("--out")
        .arg(&out_dir2)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for artifact in ["public_chain.jsonl", "private_chain.jsonl", "metrics.csv", "settlement.json"] {
        let a = std::fs::read(out_dir.join(artifact)).unwrap();
        let b = std::fs::read(out_dir2.join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} not byte-identical across runs");
    }

    // compare: identical metrics -> zero deltas, exit 0.
    let status = std::process::Command::new(bin)
        .arg("compare")
        .arg(out_dir.join("metrics.csv"))
        .arg(out_dir2.join("metrics.csv"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));

    // Bad scenario -> exit 2.
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "mode = \"tdml\"\n").unwrap();
    let status = std::process::Command::new(bin)
        .args(["run".as_ref(), bad.as_os_str()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    // Missing dir -> exit 2 for verify.
    let status = std::process::Command::new(bin)
        .arg("verify")
        .arg(dir.path().join("nope"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    println!("cli exit-code contract holds");
}

#[test]
fn attack_run_exits_3_with_detections() {
    let runs = detection_runs();
    // Any attacked run that produced detections should exit 3 through the CLI
    // path; reuse the first zero-gradient scenario.
    let (_, _, scenario, _) = runs
        .attacked
        .iter()
        .find(|(k, _, _, _)| *k == AttackKind::ZeroGradient)
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("attack.toml");
    std::fs::write(&path, toml::to_string_pretty(scenario).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_tdml"))
        .args(["run".as_ref(), path.as_os_str()])
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3), "detections must exit 3");
    let detections = std::fs::read_to_string(out_dir.join("detections.jsonl")).unwrap();
    assert!(!detections.trim().is_empty());
    println!("attack run exits 3 with non-empty detections");
}
