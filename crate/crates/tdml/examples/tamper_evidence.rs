//! Chains are tamper-evident: any single byte flipped anywhere in a dump is
//! caught, either as a parse failure or as a digest mismatch on re-check.
//!
//! ```bash
//! cargo run --example tamper_evidence
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdml::ledger::{read_dump, write_dump, Chain, Transaction, TxKind};
use uuid::Uuid;

fn main() {
    // Build a small chain by hand.
    let mut chain = Chain::new("example-tamper");
    for tick in 0..4u64 {
        let txs = vec![
            Transaction::new(
                tick,
                Uuid::from_bytes([1; 16]),
                TxKind::GradientUpload,
                format!("gradient-{tick}").into_bytes(),
            ),
            Transaction::new(
                tick,
                Uuid::from_bytes([2; 16]),
                TxKind::ValidationResult,
                format!("validation-{tick}").into_bytes(),
            ),
        ];
        chain.append_block(txs, tick).expect("append");
    }
    assert!(chain.verify().ok);

    let dump = write_dump(&chain);
    println!("dump is {} bytes over {} blocks", dump.len(), chain.blocks.len());

    // Flip 200 random single bytes, one at a time. Every mutation must be
    // caught: either the dump no longer parses, or the parsed chain fails
    // verification.
    let bytes = dump.as_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut parse_failures = 0;
    let mut verify_failures = 0;
    for _ in 0..200 {
        let pos = rng.gen_range(0..bytes.len());
        let mut mutated = bytes.to_vec();
        let old = mutated[pos];
        let mut new = rng.gen::<u8>();
        while new == old {
            new = rng.gen::<u8>();
        }
        mutated[pos] = new;

        match String::from_utf8(mutated).map(|text| read_dump(&text)) {
            Ok(Ok(parsed)) => {
                let report = parsed.verify();
                assert!(
                    !report.ok,
                    "byte {pos} ({old:#04x} -> {new:#04x}) slipped through"
                );
                verify_failures += 1;
            }
            _ => parse_failures += 1,
        }
    }
    println!("200/200 mutations caught: {parse_failures} parse failures, {verify_failures} digest mismatches");
}
