//! Deterministic simulator for blockchain-coordinated distributed training.
//!
//! The library models a training job coordinated through two hash-chained
//! ledgers: a public chain where clients announce tasks and nodes register,
//! and a per-job private chain that records shard uploads, gradient uploads,
//! local-model uploads, cross-validation results, detection reports, and
//! global-model publications. Training runs as N independent data-parallel
//! pipelines, each pipeline splitting the model's layers across trainers by
//! memory capacity (pipeline model parallelism). Per epoch, local models are
//! cross-validated by peer parameter servers, aggregated by top-K averaging,
//! and screened by a gradient-ranking detector that attributes Byzantine
//! trainers (zero-gradient, mean-shift, Gaussian attacks).
//!
//! Everything is seeded and single-sequencer, so a finished run is
//! bit-reproducible: [`audit`] replays the chain dumps and blob store to
//! re-derive every recorded digest, and settles rewards from verified work.
//!
//! Module map:
//!
//! - [`ledger`] — hash-chained blocks, Merkle roots, sealed envelopes, dumps
//! - [`store`] — content-addressed blob store for sealed training batches
//! - [`model`] — from-scratch MLP: forward/backward, SGD, memory profile
//! - [`pipeline`] — layer sharding and forward/backward hand-off across trainers
//! - [`protocol`] — node state machines, selection, key exchange, scheduling
//! - [`robust`] — cross-validation, top-K aggregation, attacks, detection
//! - [`audit`] — proof-of-training replay and incentive settlement
//! - [`sim`] — scenario configs, the tick-driven runner, artifact output
//!
//! The `tdml` binary (`run` / `verify` / `compare`) and the `examples/`
//! directory are thin shells over these modules.

pub mod audit;
pub mod cli;
pub mod digest;
pub mod ledger;
pub mod model;
pub mod pipeline;
pub mod protocol;
pub mod robust;
pub mod sim;
pub mod store;
