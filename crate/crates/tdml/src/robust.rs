//! Cross-validation, suspicion flagging, top-K aggregation, Byzantine
//! attack injectors, and the gradient-ranking malicious-node detector.
//!
//! The detector projects each sampled model's per-layer gradients into a
//! 2-D ranking embedding — for every coordinate the models' values are
//! ranked across models, and a model's feature is (mean rank, rank standard
//! deviation) over the layer's coordinates. Manipulated gradients sit at
//! extreme ranks, so 2-means over the embedding separates the attacker; the
//! layer with the highest relative separation is traced back through the
//! flagged pipeline's shard assignment to the responsible trainers.

use crate::model::{evaluate, GlobalModel, LayerParams, Parameters};
use crate::pipeline::ShardAssignment;
use crate::store::Dataset;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum RobustError {
    #[error("need at least 3 sampled models, got {0}")]
    TooFewSamples(usize),
    #[error("all sampled gradients are identical; ranking carries no signal")]
    DegenerateGeometry,
    #[error("cannot take top {k} of {available} models")]
    NotEnoughModels { k: usize, available: usize },
    #[error("mean-shift with zero delta is a no-op")]
    ZeroShift,
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

/// One validator's verdict on one local model for one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationResult {
    pub model_author: Uuid,
    pub epoch: u32,
    pub accuracy: f64,
    pub loss: f64,
    pub validator: Uuid,
    pub decode_failure: bool,
}

/// A pending local model as the validator sees it: decoded, or not.
pub enum PendingModel {
    Decoded(Uuid, GlobalModel),
    Undecodable(Uuid),
}

/// Evaluate every pending model on the test set, in order. Undecodable
/// models are recorded as accuracy 0 with the failure flag set.
pub fn cross_validate(
    validator: Uuid,
    pending: &[PendingModel],
    test: &Dataset,
    epoch: u32,
) -> Vec<ValidationResult> {
    pending
        .iter()
        .map(|p| match p {
            PendingModel::Decoded(author, model) => {
                let eval = evaluate(&model.params, &model.arch, test)
                    .expect("validated model shapes match its own arch");
                ValidationResult {
                    model_author: *author,
                    epoch,
                    accuracy: eval.accuracy,
                    loss: eval.mean_loss,
                    validator,
                    decode_failure: false,
                }
            }
            PendingModel::Undecodable(author) => ValidationResult {
                model_author: *author,
                epoch,
                accuracy: 0.0,
                loss: f64::INFINITY,
                validator,
                decode_failure: true,
            },
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Suspicion flagging
// ---------------------------------------------------------------------------

/// Default threshold on the normalized deviation score.
pub const DEFAULT_SUSPICION_TAU: f64 = 0.5;

/// Default significance margin: the flagged accuracy must sit this far
/// below the mean of the other results. The relative score alone is
/// scale-free — on independently noisy accuracies it crosses any fixed
/// threshold at a rate that no amount of convergence can reduce — so the
/// below-mean gate carries the margin.
pub const DEFAULT_SUSPICION_MARGIN: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlagOutcome {
    pub index: usize,
    pub score: f64,
}

/// Score each result by `|h_i − μ| / Σ_{j≠i} |h_j − μ|` and flag the argmax
/// iff its score exceeds `tau` and its accuracy sits at least `margin`
/// below the mean of the remaining results. Equal accuracies (zero
/// denominator and zero deviation) flag nothing.
pub fn flag_suspicious(
    results: &[ValidationResult],
    tau: f64,
    margin: f64,
) -> Option<FlagOutcome> {
    if results.len() < 2 {
        return None;
    }
    let mu = results.iter().map(|r| r.accuracy).sum::<f64>() / results.len() as f64;
    let deviations: Vec<f64> = results.iter().map(|r| (r.accuracy - mu).abs()).collect();
    let total: f64 = deviations.iter().sum();

    let mut best: Option<(usize, f64)> = None;
    for (i, &dev) in deviations.iter().enumerate() {
        let rest = total - dev;
        let score = if dev == 0.0 {
            0.0
        } else if rest == 0.0 {
            f64::INFINITY
        } else {
            dev / rest
        };
        // Argmax; ties go to the lower accuracy (the below-mean gate's side).
        let better = match best {
            None => true,
            Some((j, s)) => {
                score > s || (score == s && results[i].accuracy < results[j].accuracy)
            }
        };
        if better {
            best = Some((i, score));
        }
    }
    let (index, score) = best?;
    let mu_others = (mu * results.len() as f64 - results[index].accuracy)
        / (results.len() - 1) as f64;
    if score > tau && results[index].accuracy < mu_others - margin {
        Some(FlagOutcome { index, score })
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Top-K aggregation
// ---------------------------------------------------------------------------

/// A validated local model entering aggregation.
pub struct RankedModel {
    pub author: Uuid,
    pub accuracy: f64,
    pub params: Parameters,
}

/// Coordinate-wise mean of the K best-validated models. Selection sorts by
/// (accuracy desc, author asc); summation runs in author-UUID order so the
/// result is bit-stable. Flagged models must be excluded by the caller.
pub fn aggregate_topk(mut models: Vec<RankedModel>, k: usize) -> Result<Parameters, RobustError> {
    if k == 0 || models.len() < k {
        return Err(RobustError::NotEnoughModels {
            k,
            available: models.len(),
        });
    }
    models.sort_by(|a, b| {
        b.accuracy
            .total_cmp(&a.accuracy)
            .then_with(|| a.author.cmp(&b.author))
    });
    models.truncate(k);
    models.sort_by(|a, b| a.author.cmp(&b.author));

    let mut layers: Vec<LayerParams> = models[0]
        .params
        .layers
        .iter()
        .map(|l| LayerParams::zeros(l.d_out, l.d_in))
        .collect();
    for model in &models {
        for (acc, layer) in layers.iter_mut().zip(model.params.layers.iter()) {
            for (a, w) in acc.weights.iter_mut().zip(layer.weights.iter()) {
                *a += w;
            }
            for (a, b) in acc.bias.iter_mut().zip(layer.bias.iter()) {
                *a += b;
            }
        }
    }
    let inv = 1.0 / k as f64;
    for layer in layers.iter_mut() {
        layer.weights.iter_mut().for_each(|w| *w *= inv);
        layer.bias.iter_mut().for_each(|b| *b *= inv);
    }
    Ok(Parameters { layers })
}

/// Plain mean over all models — the baseline aggregation mode.
pub fn aggregate_mean(models: Vec<RankedModel>) -> Result<Parameters, RobustError> {
    let k = models.len();
    aggregate_topk(models, k)
}

// ---------------------------------------------------------------------------
// Attack injectors
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    ZeroGradient,
    MeanShift,
    Gaussian,
}

/// Which trainer misbehaves, how, and from which epoch onward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub target: Uuid,
    /// Mean-shift delta; ignored by the other kinds.
    #[serde(default)]
    pub shift: f64,
    /// Gaussian variance σ² (covariance σ²·I); ignored by the other kinds.
    #[serde(default)]
    pub sigma_sq: f64,
    pub start_epoch: u32,
}

/// Zero every gradient entry.
pub fn attack_zero(layers: &mut [LayerParams]) {
    for layer in layers.iter_mut() {
        layer.weights.iter_mut().for_each(|w| *w = 0.0);
        layer.bias.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Add `delta` to every gradient entry. Zero delta is rejected upstream.
pub fn attack_meanshift(layers: &mut [LayerParams], delta: f64) -> Result<(), RobustError> {
    if delta == 0.0 {
        return Err(RobustError::ZeroShift);
    }
    for layer in layers.iter_mut() {
        layer.weights.iter_mut().for_each(|w| *w += delta);
        layer.bias.iter_mut().for_each(|b| *b += delta);
    }
    Ok(())
}

/// Replace every entry with an independent draw from Normal(0, σ²).
pub fn attack_gaussian(layers: &mut [LayerParams], sigma_sq: f64, seed: u64) {
    assert!(sigma_sq > 0.0, "gaussian attack needs positive variance");
    let normal = Normal::new(0.0, sigma_sq.sqrt()).expect("std positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in layers.iter_mut() {
        for w in layer.weights.iter_mut() {
            *w = normal.sample(&mut rng);
        }
        for b in layer.bias.iter_mut() {
            *b = normal.sample(&mut rng);
        }
    }
}

/// Apply the configured attack to a gradient record if this trainer and
/// epoch are in scope. `draw_seed` must vary per (trainer, epoch, batch) so
/// Gaussian draws stay independent yet replayable.
pub fn apply_attack(
    config: &AttackConfig,
    trainer: Uuid,
    epoch: u32,
    layers: &mut [LayerParams],
    draw_seed: u64,
) {
    if trainer != config.target || epoch < config.start_epoch {
        return;
    }
    match config.kind {
        AttackKind::ZeroGradient => attack_zero(layers),
        AttackKind::MeanShift => {
            attack_meanshift(layers, config.shift).expect("configs reject zero shift");
        }
        AttackKind::Gaussian => attack_gaussian(layers, config.sigma_sq, draw_seed),
    }
}

/// Root-mean-square over all entries of a gradient set; the benign scale
/// attacks are calibrated against.
pub fn gradient_rms(layers: &[LayerParams]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for layer in layers {
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            sum += v * v;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Gradient-ranking detection
// ---------------------------------------------------------------------------

/// Full-model per-layer gradients attributed to one sampled local model.
pub struct SampledGradients {
    pub author: Uuid,
    pub layers: Vec<LayerParams>,
}

/// (mean rank, rank standard deviation) for one model at one layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankFeature {
    pub mean_rank: f64,
    pub rank_std: f64,
}

/// Everything the detector concludes, per layer and overall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub epoch: u32,
    pub flagged_model: Uuid,
    pub sampled_models: Vec<Uuid>,
    /// `features[layer][model]`, indexed like `sampled_models`.
    pub features: Vec<Vec<RankFeature>>,
    /// `clusters[layer][model]` ∈ {0, 1}.
    pub clusters: Vec<Vec<u8>>,
    /// Centroid separation over pooled within-cluster spread, per layer.
    pub separation: Vec<f64>,
    pub flagged_layer: usize,
    /// Minority cluster at the flagged layer.
    pub malicious_models: Vec<Uuid>,
    /// Trainers owning the flagged layer in the flagged pipeline.
    pub attributed_trainers: Vec<Uuid>,
}

const SEPARATION_EPS: f64 = 1e-9;

/// Average ranks (1-based, ties averaged) of `values` across models for one
/// coordinate.
fn rank_column(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        // Positions i..=j share the same value; average their 1-based ranks.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Ranking embedding for one layer: per model, the mean and standard
/// deviation of its ranks over the layer's coordinates.
fn layer_features(samples: &[SampledGradients], layer: usize) -> Vec<RankFeature> {
    let n = samples.len();
    let coords = samples[0].layers[layer].weights.len() + samples[0].layers[layer].bias.len();
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    let mut column = vec![0.0; n];
    for c in 0..coords {
        for (m, sample) in samples.iter().enumerate() {
            let l = &sample.layers[layer];
            column[m] = if c < l.weights.len() {
                l.weights[c]
            } else {
                l.bias[c - l.weights.len()]
            };
        }
        for (m, r) in rank_column(&column).into_iter().enumerate() {
            sum[m] += r;
            sum_sq[m] += r * r;
        }
    }
    (0..n)
        .map(|m| {
            let mean = sum[m] / coords as f64;
            let var = (sum_sq[m] / coords as f64 - mean * mean).max(0.0);
            RankFeature {
                mean_rank: mean,
                rank_std: var.sqrt(),
            }
        })
        .collect()
}

/// Deterministic 2-means: centroids start at the farthest pair, Lloyd
/// iterations until assignments stabilize. Returns (assignments, score).
fn two_means(points: &[RankFeature]) -> (Vec<u8>, f64) {
    let n = points.len();
    let coords: Vec<[f64; 2]> = points.iter().map(|p| [p.mean_rank, p.rank_std]).collect();
    let dist_sq =
        |a: &[f64; 2], b: &[f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);

    let mut seed = (0usize, 1usize);
    let mut best = -1.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = dist_sq(&coords[i], &coords[j]);
            if d > best {
                best = d;
                seed = (i, j);
            }
        }
    }
    let mut centroids = [coords[seed.0], coords[seed.1]];
    let mut assign = vec![0u8; n];
    for _ in 0..64 {
        let mut changed = false;
        for (i, p) in coords.iter().enumerate() {
            let c = u8::from(dist_sq(p, &centroids[1]) < dist_sq(p, &centroids[0]));
            if c != assign[i] {
                assign[i] = c;
                changed = true;
            }
        }
        for c in 0..2 {
            let members: Vec<&[f64; 2]> = coords
                .iter()
                .zip(assign.iter())
                .filter(|(_, &a)| a as usize == c)
                .map(|(p, _)| p)
                .collect();
            if !members.is_empty() {
                centroids[c] = [
                    members.iter().map(|p| p[0]).sum::<f64>() / members.len() as f64,
                    members.iter().map(|p| p[1]).sum::<f64>() / members.len() as f64,
                ];
            }
        }
        if !changed {
            break;
        }
    }
    let centroid_gap = dist_sq(&centroids[0], &centroids[1]).sqrt();
    let pooled_sq: f64 = coords
        .iter()
        .zip(assign.iter())
        .map(|(p, &a)| dist_sq(p, &centroids[a as usize]))
        .sum::<f64>()
        / n as f64;
    let score = centroid_gap / (pooled_sq.sqrt() + SEPARATION_EPS);
    (assign, score)
}

/// Rank, embed, cluster, and attribute. `flagged` names the suspicious local
/// model; `flagged_assignment` is that pipeline's shard map, used to descend
/// from the flagged layer to trainer identities.
pub fn detect_malicious(
    samples: &[SampledGradients],
    flagged: Uuid,
    flagged_assignment: &ShardAssignment,
    epoch: u32,
) -> Result<DetectionReport, RobustError> {
    if samples.len() < 3 {
        return Err(RobustError::TooFewSamples(samples.len()));
    }
    let layer_count = samples[0].layers.len();

    // Degenerate geometry: every model uploaded identical gradients.
    let all_identical = samples[1..].iter().all(|s| {
        s.layers
            .iter()
            .zip(samples[0].layers.iter())
            .all(|(a, b)| a == b)
    });
    if all_identical {
        return Err(RobustError::DegenerateGeometry);
    }

    let mut features = Vec::with_capacity(layer_count);
    let mut clusters = Vec::with_capacity(layer_count);
    let mut separation = Vec::with_capacity(layer_count);
    for layer in 0..layer_count {
        let feats = layer_features(samples, layer);
        let (assign, score) = two_means(&feats);
        features.push(feats);
        clusters.push(assign);
        separation.push(score);
    }

    let total: f64 = separation.iter().sum();
    let mut flagged_layer = 0usize;
    let mut best_ratio = f64::NEG_INFINITY;
    for (layer, &score) in separation.iter().enumerate() {
        let rest = total - score;
        let ratio = if rest > 0.0 {
            score / rest
        } else if score > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if ratio > best_ratio {
            best_ratio = ratio;
            flagged_layer = layer;
        }
    }
    if separation.iter().all(|&s| s == 0.0) {
        return Err(RobustError::DegenerateGeometry);
    }

    let assign = &clusters[flagged_layer];
    let ones = assign.iter().filter(|&&a| a == 1).count();
    let zeros = assign.len() - ones;
    let minority = if ones < zeros {
        1u8
    } else if zeros < ones {
        0u8
    } else {
        // Tie: take the cluster holding the flagged model.
        samples
            .iter()
            .position(|s| s.author == flagged)
            .map(|i| assign[i])
            .unwrap_or(1)
    };
    let malicious_models: Vec<Uuid> = samples
        .iter()
        .zip(assign.iter())
        .filter(|(_, &a)| a == minority)
        .map(|(s, _)| s.author)
        .collect();

    let attributed_trainers = flagged_assignment
        .trainer_for_layer(flagged_layer)
        .into_iter()
        .collect();

    Ok(DetectionReport {
        epoch,
        flagged_model: flagged,
        sampled_models: samples.iter().map(|s| s.author).collect(),
        features,
        clusters,
        separation,
        flagged_layer,
        malicious_models,
        attributed_trainers,
    })
}
