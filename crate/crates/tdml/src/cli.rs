//! Subcommand implementations behind the `tdml` binary: run a scenario and
//! emit its artifact tree, verify a finished run's dumps, and compare two
//! metrics files. The binary itself only parses arguments.

use crate::audit::{self, RewardLedger};
use crate::ledger::{read_dump, write_dump};
use crate::sim::{run_scenario, Scenario, SimOutput};
use crate::store::BlobStore;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Exit codes shared by `run` and `verify`.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG_ERROR: i32 = 2;
pub const EXIT_DETECTIONS_FIRED: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("scenario invalid: {0}")]
    BadScenario(String),
    #[error("artifact malformed: {0}")]
    BadArtifact(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

pub struct RunOutcome {
    pub exit_code: i32,
    pub out_dir: PathBuf,
    pub summary: String,
}

/// Load a scenario file, apply overrides, execute, settle, and write the
/// artifact tree. Config problems surface as `Err`; the caller maps them to
/// exit code 2.
pub fn run(
    scenario_path: &Path,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<RunOutcome, CliError> {
    let text = std::fs::read_to_string(scenario_path).map_err(|source| CliError::Unreadable {
        path: scenario_path.to_path_buf(),
        source,
    })?;
    let mut scenario: Scenario =
        toml::from_str(&text).map_err(|e| CliError::BadScenario(e.to_string()))?;
    if let Some(seed) = seed_override {
        scenario.master_seed = seed;
    }
    scenario
        .validate()
        .map_err(|e| CliError::BadScenario(e.to_string()))?;

    let out_dir = out_override.unwrap_or_else(|| PathBuf::from(format!("out-{}", scenario.job_tag)));
    let output = run_scenario(&scenario).map_err(|e| CliError::BadScenario(e.to_string()))?;
    let settlement = audit::settle_rewards(
        &output.private_chain,
        scenario.reward_budget,
        scenario.ps_pool_percent,
        scenario.training.epochs,
        true,
    )
    .map_err(|e| CliError::BadArtifact(e.to_string()))?;
    write_artifacts(&out_dir, &scenario, &output, &settlement)?;

    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "run complete: {} epochs, {} pipelines, final global accuracy {:.4}",
        scenario.training.epochs, scenario.training.pipelines, output.final_global_acc
    );
    let _ = writeln!(
        summary,
        "chains: {} public / {} private blocks; detections: {}; paid {}/{}",
        output.public_chain.blocks.len(),
        output.private_chain.blocks.len(),
        output.detections.len(),
        settlement.total_paid,
        settlement.budget
    );
    let exit_code = if output.detections.is_empty() {
        EXIT_OK
    } else {
        EXIT_DETECTIONS_FIRED
    };
    Ok(RunOutcome {
        exit_code,
        out_dir,
        summary,
    })
}

/// Write the full artifact tree for a finished run.
pub fn write_artifacts(
    dir: &Path,
    scenario: &Scenario,
    output: &SimOutput,
    settlement: &RewardLedger,
) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("scenario.json"),
        serde_json::to_vec_pretty(scenario).expect("scenario serializes"),
    )?;
    std::fs::write(dir.join("public_chain.jsonl"), write_dump(&output.public_chain))?;
    std::fs::write(dir.join("private_chain.jsonl"), write_dump(&output.private_chain))?;
    output
        .store
        .spill_to_dir(&dir.join("blobs"))
        .map_err(|e| CliError::BadArtifact(e.to_string()))?;

    let mut metrics = String::from("pipeline,epoch,train_loss,test_acc,global_acc\n");
    for row in &output.metrics {
        let _ = writeln!(
            metrics,
            "{},{},{},{},{}",
            row.pipeline, row.epoch, row.train_loss, row.test_acc, row.global_acc
        );
    }
    std::fs::write(dir.join("metrics.csv"), metrics)?;

    let mut pm = String::from("pipeline_id,epoch,mean_loss,batches,local_model_digest\n");
    for row in &output.pipeline_metrics {
        let _ = writeln!(
            pm,
            "{},{},{},{},{}",
            row.pipeline_id, row.epoch, row.mean_loss, row.batches, row.local_model_digest
        );
    }
    std::fs::write(dir.join("pipeline_metrics.csv"), pm)?;

    let mut detections = String::new();
    for payload in &output.detections {
        let _ = writeln!(
            detections,
            "{}",
            serde_json::to_string(payload).expect("report serializes")
        );
    }
    std::fs::write(dir.join("detections.jsonl"), detections)?;

    std::fs::write(
        dir.join("settlement.json"),
        serde_json::to_vec_pretty(&settlement.entries).expect("settlement serializes"),
    )?;

    let mut trace = String::from("tick,author,kind\n");
    for entry in &output.trace {
        let _ = writeln!(trace, "{},{},{}", entry.tick, entry.author, entry.kind);
    }
    std::fs::write(dir.join("trace.csv"), trace)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

/// Verify a run directory. Returns the exit code after printing one line per
/// section; missing files exit 2, any verification failure (including
/// unparseable dumps, which indicate tampering) exits 1.
pub fn verify(dir: &Path) -> i32 {
    let required = [
        "scenario.json",
        "public_chain.jsonl",
        "private_chain.jsonl",
        "blobs",
    ];
    for name in required {
        if !dir.join(name).exists() {
            eprintln!("verify: missing {}", dir.join(name).display());
            return EXIT_CONFIG_ERROR;
        }
    }
    let scenario: Scenario = match std::fs::read(dir.join("scenario.json"))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok())
    {
        Some(s) => s,
        None => {
            println!("scenario: unreadable");
            return EXIT_VERIFY_FAILED;
        }
    };
    let load_chain = |name: &str| -> Result<crate::ledger::Chain, String> {
        let text = std::fs::read_to_string(dir.join(name)).map_err(|e| e.to_string())?;
        read_dump(&text).map_err(|e| e.to_string())
    };
    let public = match load_chain("public_chain.jsonl") {
        Ok(c) => c,
        Err(e) => {
            println!("chains: FAIL (public: {e})");
            return EXIT_VERIFY_FAILED;
        }
    };
    let private = match load_chain("private_chain.jsonl") {
        Ok(c) => c,
        Err(e) => {
            println!("chains: FAIL (private: {e})");
            return EXIT_VERIFY_FAILED;
        }
    };
    let store = match BlobStore::load_from_dir(&dir.join("blobs")) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("verify: blobs unreadable: {e}");
            return EXIT_CONFIG_ERROR;
        }
    };

    match audit::verify_training(&public, &private, &store, &scenario) {
        Ok(report) => {
            println!("chains: {}", if report.chains_ok { "ok" } else { "FAIL" });
            match &report.replay {
                Some(r) if r.ok => println!("replay: ok ({} epochs)", r.global_digests.len()),
                Some(r) => println!(
                    "replay: FAIL (first divergence {:?})",
                    r.first_divergence.as_ref().map(|d| (d.epoch, d.pipeline, d.field.clone()))
                ),
                None => println!("replay: skipped"),
            }
            if report.validation_mismatches.is_empty() {
                println!("validations: ok");
            } else {
                for m in &report.validation_mismatches {
                    println!(
                        "validations: MISMATCH validator {} epoch {} recorded {} recomputed {}",
                        m.validator, m.epoch, m.recorded_accuracy, m.recomputed_accuracy
                    );
                }
            }
            if report.ok {
                EXIT_OK
            } else {
                EXIT_VERIFY_FAILED
            }
        }
        Err(audit::AuditError::IncompleteEvidence(cid)) => {
            println!("replay: FAIL (missing blob {cid})");
            EXIT_VERIFY_FAILED
        }
        Err(e) => {
            println!("verify: FAIL ({e})");
            EXIT_VERIFY_FAILED
        }
    }
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

/// Per-epoch global accuracy read off a metrics.csv.
fn read_metrics(path: &Path) -> Result<Vec<(u32, f64)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "pipeline,epoch,train_loss,test_acc,global_acc" {
        return Err(CliError::BadArtifact(format!("unexpected header {header:?}")));
    }
    let mut by_epoch: Vec<(u32, f64)> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(CliError::BadArtifact(format!("bad row {line:?}")));
        }
        let epoch: u32 = fields[1]
            .parse()
            .map_err(|_| CliError::BadArtifact("bad epoch".into()))?;
        let acc: f64 = fields[4]
            .parse()
            .map_err(|_| CliError::BadArtifact("bad accuracy".into()))?;
        if by_epoch.last().map(|(e, _)| *e) != Some(epoch) {
            by_epoch.push((epoch, acc));
        }
    }
    Ok(by_epoch)
}

/// Print per-epoch accuracy deltas and the final-accuracy gap (A − B).
/// Mismatched epoch sets are a schema mismatch.
pub fn compare(a: &Path, b: &Path) -> i32 {
    let (rows_a, rows_b) = match (read_metrics(a), read_metrics(b)) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => {
            eprintln!("compare: {e}");
            return EXIT_CONFIG_ERROR;
        }
    };
    let epochs_a: Vec<u32> = rows_a.iter().map(|(e, _)| *e).collect();
    let epochs_b: Vec<u32> = rows_b.iter().map(|(e, _)| *e).collect();
    if epochs_a != epochs_b {
        eprintln!("compare: schema mismatch (epoch sets differ)");
        return EXIT_CONFIG_ERROR;
    }
    println!("epoch,acc_a,acc_b,delta");
    for ((e, acc_a), (_, acc_b)) in rows_a.iter().zip(rows_b.iter()) {
        println!("{e},{acc_a},{acc_b},{}", acc_a - acc_b);
    }
    let gap = rows_a.last().map(|(_, a)| *a).unwrap_or(0.0)
        - rows_b.last().map(|(_, b)| *b).unwrap_or(0.0);
    println!("final_gap,{gap}");
    EXIT_OK
}
