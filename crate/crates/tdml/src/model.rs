//! From-scratch layered feed-forward model.
//!
//! An MLP with configurable depth/width: ReLU on hidden layers, identity on
//! the final layer, mean softmax cross-entropy loss, plain SGD. All compute
//! is f64 regardless of the declared precision — `precision_bytes` only
//! drives the per-layer memory profile used for sharding. Everything is
//! seeded and iteration order is fixed, so one-node training trajectories
//! are bit-reproducible.

use crate::digest::Digest256;
use crate::store::Dataset;
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("architecture invalid: {0}")]
    BadArch(String),
    #[error("checkpoint malformed: {0}")]
    BadCheckpoint(String),
}

// ---------------------------------------------------------------------------
// Architecture and parameters
// ---------------------------------------------------------------------------

/// Layer dimensions `[d0, d1, …, dL]` plus bytes-per-parameter for the
/// memory profile (4 full precision, 2 half).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub layer_dims: Vec<u32>,
    pub precision_bytes: u32,
}

impl Arch {
    pub fn new(layer_dims: Vec<u32>, precision_bytes: u32) -> Result<Arch, ModelError> {
        if layer_dims.len() < 3 {
            return Err(ModelError::BadArch("need at least two weight layers".into()));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(ModelError::BadArch("zero-width layer".into()));
        }
        if !matches!(precision_bytes, 2 | 4) {
            return Err(ModelError::BadArch("precision_bytes must be 2 or 4".into()));
        }
        Ok(Arch {
            layer_dims,
            precision_bytes,
        })
    }

    /// Number of weight layers L.
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_dims[l + 1] as usize, self.layer_dims[l] as usize)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0] as usize
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap() as usize
    }
}

/// One weight layer: `weights` is (d_out × d_in) row-major plus a bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub d_out: usize,
    pub d_in: usize,
}

impl LayerParams {
    pub fn zeros(d_out: usize, d_in: usize) -> LayerParams {
        LayerParams {
            weights: vec![0.0; d_out * d_in],
            bias: vec![0.0; d_out],
            d_out,
            d_in,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Full parameter set, layer-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
}

impl Parameters {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }
}

/// Per-layer gradients with the same shapes as [`Parameters`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub layers: Vec<LayerParams>,
    pub epoch: u32,
    pub producer: Uuid,
}

impl GradientRecord {
    pub fn zeros_like(params: &Parameters, epoch: u32, producer: Uuid) -> GradientRecord {
        GradientRecord {
            layers: params
                .layers
                .iter()
                .map(|l| LayerParams::zeros(l.d_out, l.d_in))
                .collect(),
            epoch,
            producer,
        }
    }
}

/// Binary form of a layer slice (shards, gradient records): layer count,
/// then per layer d_out, d_in, and f64 LE weights + bias.
pub fn encode_layers(layers: &[LayerParams]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        out.extend_from_slice(&(layer.d_out as u32).to_le_bytes());
        out.extend_from_slice(&(layer.d_in as u32).to_le_bytes());
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_layers(bytes: &[u8]) -> Result<Vec<LayerParams>, ModelError> {
    fn bad(m: &str) -> ModelError {
        ModelError::BadCheckpoint(m.to_string())
    }
    if bytes.len() < 4 {
        return Err(bad("short layer blob"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let mut off = 4usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        if off + 8 > bytes.len() {
            return Err(bad("truncated layer header"));
        }
        let d_out = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        let d_in = u32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as usize;
        off += 8;
        if d_out == 0 || d_in == 0 || d_out.saturating_mul(d_in) > 1 << 28 {
            return Err(bad("implausible layer dims"));
        }
        let mut layer = LayerParams::zeros(d_out, d_in);
        for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            if off + 8 > bytes.len() {
                return Err(bad("truncated layer values"));
            }
            *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
        }
        layers.push(layer);
    }
    if off != bytes.len() {
        return Err(bad("trailing layer bytes"));
    }
    Ok(layers)
}

/// Producer→consumer layer edges. Only sequential graphs are exercised;
/// skip edges are representable but never constructed by `init_model`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralGraph {
    pub layer_count: usize,
    pub edges: Vec<(usize, usize)>,
}

impl StructuralGraph {
    pub fn sequential(layer_count: usize) -> StructuralGraph {
        StructuralGraph {
            layer_count,
            edges: (1..layer_count).map(|l| (l - 1, l)).collect(),
        }
    }
}

/// The shared model: parameters, architecture, aggregation version, graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub params: Parameters,
    pub arch: Arch,
    pub version: u32,
    pub graph: StructuralGraph,
}

/// Seeded uniform init in [−1/√fan_in, 1/√fan_in], biases zero, version 0.
pub fn init_model(arch: &Arch, seed: u64) -> GlobalModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(arch.num_layers());
    for l in 0..arch.num_layers() {
        let (d_out, d_in) = arch.layer_shape(l);
        let scale = 1.0 / (d_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-scale, scale);
        let mut layer = LayerParams::zeros(d_out, d_in);
        for w in layer.weights.iter_mut() {
            *w = dist.sample(&mut rng);
        }
        layers.push(layer);
    }
    GlobalModel {
        params: Parameters { layers },
        arch: arch.clone(),
        version: 0,
        graph: StructuralGraph::sequential(arch.num_layers()),
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Activation tensor handed between layers (and between shards).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub layer: usize,
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    pub batch_id: u32,
}

/// `h_out = act(h_in · wᵀ + bias)`; ReLU unless `final_layer`.
pub fn forward_layer(
    layer: &LayerParams,
    h_in: &[f64],
    rows: usize,
    final_layer: bool,
) -> Result<Vec<f64>, ModelError> {
    if h_in.len() != rows * layer.d_in {
        return Err(ModelError::ShapeMismatch(format!(
            "forward: input {} != {}x{}",
            h_in.len(),
            rows,
            layer.d_in
        )));
    }
    let mut out = vec![0.0; rows * layer.d_out];
    for r in 0..rows {
        let x = &h_in[r * layer.d_in..(r + 1) * layer.d_in];
        let o = &mut out[r * layer.d_out..(r + 1) * layer.d_out];
        for i in 0..layer.d_out {
            let w = &layer.weights[i * layer.d_in..(i + 1) * layer.d_in];
            let mut acc = layer.bias[i];
            for (wj, xj) in w.iter().zip(x.iter()) {
                acc += wj * xj;
            }
            o[i] = if final_layer { acc } else { acc.max(0.0) };
        }
    }
    Ok(out)
}

/// Reverse-mode gradients for one layer. `upstream` is dLoss/dh_out; the
/// forward input `h_in` and output `h_out` must come from the matching
/// forward pass. Returns (layer gradient, dLoss/dh_in).
pub fn backward_layer(
    layer: &LayerParams,
    h_in: &[f64],
    h_out: &[f64],
    upstream: &[f64],
    rows: usize,
    final_layer: bool,
) -> Result<(LayerParams, Vec<f64>), ModelError> {
    if upstream.len() != rows * layer.d_out || h_in.len() != rows * layer.d_in {
        return Err(ModelError::ShapeMismatch("backward".into()));
    }
    let mut grad = LayerParams::zeros(layer.d_out, layer.d_in);
    let mut downstream = vec![0.0; rows * layer.d_in];
    for r in 0..rows {
        let x = &h_in[r * layer.d_in..(r + 1) * layer.d_in];
        let y = &h_out[r * layer.d_out..(r + 1) * layer.d_out];
        let u = &upstream[r * layer.d_out..(r + 1) * layer.d_out];
        let dx = &mut downstream[r * layer.d_in..(r + 1) * layer.d_in];
        for i in 0..layer.d_out {
            // ReLU gate: h_out > 0 iff pre-activation > 0.
            let dz = if final_layer || y[i] > 0.0 { u[i] } else { 0.0 };
            if dz == 0.0 {
                continue;
            }
            grad.bias[i] += dz;
            let gw = &mut grad.weights[i * layer.d_in..(i + 1) * layer.d_in];
            let w = &layer.weights[i * layer.d_in..(i + 1) * layer.d_in];
            for j in 0..layer.d_in {
                gw[j] += dz * x[j];
                dx[j] += dz * w[j];
            }
        }
    }
    Ok((grad, downstream))
}

/// Mean softmax cross-entropy and its gradient `(softmax − onehot)/batch`.
pub fn loss_and_grad(logits: &[f64], labels: &[u32], rows: usize, classes: usize) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), rows * classes);
    assert_eq!(labels.len(), rows);
    let mut grad = vec![0.0; rows * classes];
    let mut loss = 0.0;
    for r in 0..rows {
        let z = &logits[r * classes..(r + 1) * classes];
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in z {
            denom += (v - zmax).exp();
        }
        let label = labels[r] as usize;
        loss += denom.ln() + zmax - z[label];
        let g = &mut grad[r * classes..(r + 1) * classes];
        for (i, &v) in z.iter().enumerate() {
            g[i] = (v - zmax).exp() / denom / rows as f64;
        }
        g[label] -= 1.0 / rows as f64;
    }
    (loss / rows as f64, grad)
}

/// Per-coordinate `W − γ·g`, layer-major.
pub fn sgd_update(params: &mut Parameters, grads: &[LayerParams], learning_rate: f64) {
    assert_eq!(params.layers.len(), grads.len());
    for (layer, grad) in params.layers.iter_mut().zip(grads.iter()) {
        for (w, g) in layer.weights.iter_mut().zip(grad.weights.iter()) {
            *w -= learning_rate * g;
        }
        for (b, g) in layer.bias.iter_mut().zip(grad.bias.iter()) {
            *b -= learning_rate * g;
        }
    }
}

/// Full forward pass, keeping each layer's input for the backward pass.
/// `activations[l]` is the input of layer l; the last entry is the logits.
pub fn forward_all(params: &Parameters, input: &[f64], rows: usize) -> Result<Vec<Vec<f64>>, ModelError> {
    let last = params.layers.len() - 1;
    let mut acts = Vec::with_capacity(params.layers.len() + 1);
    acts.push(input.to_vec());
    for (l, layer) in params.layers.iter().enumerate() {
        let next = forward_layer(layer, acts.last().unwrap(), rows, l == last)?;
        acts.push(next);
    }
    Ok(acts)
}

/// Full backward pass from dLoss/dLogits; gradients layer-major.
pub fn backward_all(
    params: &Parameters,
    acts: &[Vec<f64>],
    dlogits: &[f64],
    rows: usize,
) -> Result<Vec<LayerParams>, ModelError> {
    let last = params.layers.len() - 1;
    let mut grads: Vec<LayerParams> = Vec::with_capacity(params.layers.len());
    let mut upstream = dlogits.to_vec();
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let (g, down) = backward_layer(layer, &acts[l], &acts[l + 1], &upstream, rows, l == last)?;
        grads.push(g);
        upstream = down;
    }
    grads.reverse();
    Ok(grads)
}

/// One direct (unsharded) batch step: forward, loss, backward, update.
/// Returns (batch mean loss, gradients applied).
pub fn train_batch(
    params: &mut Parameters,
    arch: &Arch,
    features: &[f64],
    labels: &[u32],
    rows: usize,
    learning_rate: f64,
) -> Result<(f64, Vec<LayerParams>), ModelError> {
    let acts = forward_all(params, features, rows)?;
    let (loss, dlogits) = loss_and_grad(acts.last().unwrap(), labels, rows, arch.output_dim());
    let grads = backward_all(params, &acts, &dlogits, rows)?;
    sgd_update(params, &grads, learning_rate);
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Memory profile
// ---------------------------------------------------------------------------

/// Per-layer memory demand: `(d_l·d_{l−1} + d_l) · precision_bytes`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMemoryProfile {
    pub per_layer: Vec<u64>,
    pub total: u64,
}

pub fn layer_memory(arch: &Arch) -> LayerMemoryProfile {
    let per_layer: Vec<u64> = (0..arch.num_layers())
        .map(|l| {
            let (d_out, d_in) = arch.layer_shape(l);
            ((d_out * d_in + d_out) as u64) * arch.precision_bytes as u64
        })
        .collect();
    let total = per_layer.iter().sum();
    LayerMemoryProfile { per_layer, total }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Deterministic accuracy and mean loss over the dataset in row order.
/// Ties in the argmax go to the lowest class index.
pub fn evaluate(params: &Parameters, arch: &Arch, data: &Dataset) -> Result<EvalResult, ModelError> {
    let acts = forward_all(params, &data.features, data.rows)?;
    let logits = acts.last().unwrap();
    let classes = arch.output_dim();
    let (mean_loss, _) = loss_and_grad(logits, &data.labels, data.rows, classes);
    let mut correct = 0usize;
    for r in 0..data.rows {
        let z = &logits[r * classes..(r + 1) * classes];
        let mut best = 0usize;
        for (i, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = i;
            }
        }
        if best as u32 == data.labels[r] {
            correct += 1;
        }
    }
    Ok(EvalResult {
        accuracy: correct as f64 / data.rows as f64,
        mean_loss,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: u32 = 0x544d_4c4d;

/// Checkpoint layout: magic, dim count, dims, precision, version, then every
/// parameter as f64 LE (per layer: weights row-major, then bias). The digest
/// of these bytes is what local-model transactions reference.
pub fn encode_checkpoint(model: &GlobalModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC.to_le_bytes());
    out.extend_from_slice(&(model.arch.layer_dims.len() as u32).to_le_bytes());
    for d in &model.arch.layer_dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&model.arch.precision_bytes.to_le_bytes());
    out.extend_from_slice(&model.version.to_le_bytes());
    for layer in &model.params.layers {
        for w in &layer.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for b in &layer.bias {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<GlobalModel, ModelError> {
    fn bad(m: &str) -> ModelError {
        ModelError::BadCheckpoint(m.to_string())
    }
    fn take_u32(bytes: &[u8], off: &mut usize) -> Result<u32, ModelError> {
        if *off + 4 > bytes.len() {
            return Err(bad("truncated header"));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    }

    let mut off = 0usize;
    if take_u32(bytes, &mut off)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let ndims = take_u32(bytes, &mut off)? as usize;
    if !(3..=1024).contains(&ndims) {
        return Err(bad("implausible dim count"));
    }
    let mut dims = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        dims.push(take_u32(bytes, &mut off)?);
    }
    let precision = take_u32(bytes, &mut off)?;
    let version = take_u32(bytes, &mut off)?;
    let arch = Arch::new(dims, precision)?;

    let mut layers = Vec::with_capacity(arch.num_layers());
    for l in 0..arch.num_layers() {
        let (d_out, d_in) = arch.layer_shape(l);
        let mut layer = LayerParams::zeros(d_out, d_in);
        for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
            if off + 8 > bytes.len() {
                return Err(bad("truncated parameters"));
            }
            *w = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
            off += 8;
        }
        layers.push(layer);
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let graph = StructuralGraph::sequential(arch.num_layers());
    Ok(GlobalModel {
        params: Parameters { layers },
        arch,
        version,
        graph,
    })
}

pub fn checkpoint_digest(model: &GlobalModel) -> Digest256 {
    Digest256::of(&encode_checkpoint(model))
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

/// Knobs for the seeded Gaussian-blob classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: u32,
    pub input_dim: u32,
    pub train_rows: u32,
    pub test_rows: u32,
    /// Blob centers are drawn uniformly from [−center_range, center_range]^d.
    pub center_range: f64,
    /// Per-coordinate sample noise around the class center.
    pub noise_std: f64,
    /// Blobs per class. At 2 the second blob mirrors the first through the
    /// origin, which kills linear separability and forces the model to use
    /// its depth — the difficulty dial for attack scenarios.
    #[serde(default = "one_center")]
    pub centers_per_class: u32,
}

fn one_center() -> u32 {
    1
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            classes: 4,
            input_dim: 16,
            train_rows: 4000,
            test_rows: 1000,
            center_range: 1.0,
            noise_std: 0.9,
            centers_per_class: 1,
        }
    }
}

/// Seeded Gaussian blobs: class labels round-robin, one RNG stream for the
/// whole (train, test) pair so the split is stable.
pub fn synthetic_blobs(spec: &SynthSpec, seed: u64) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = spec.input_dim as usize;
    let k = spec.centers_per_class.max(1) as usize;
    let center_dist = Uniform::new_inclusive(-spec.center_range, spec.center_range);
    let noise = Normal::new(0.0, spec.noise_std).expect("std positive");

    let centers: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| {
            let first: Vec<f64> = (0..d).map(|_| center_dist.sample(&mut rng)).collect();
            (0..k)
                .map(|i| match i {
                    0 => first.clone(),
                    1 => first.iter().map(|v| -v).collect(),
                    _ => (0..d).map(|_| center_dist.sample(&mut rng)).collect(),
                })
                .collect()
        })
        .collect();

    let mut make = |rows: u32| {
        let mut features = Vec::with_capacity(rows as usize * d);
        let mut labels = Vec::with_capacity(rows as usize);
        for i in 0..rows {
            let class = i % spec.classes;
            let which = (i / spec.classes) as usize % k;
            let center = &centers[class as usize][which];
            for &c in center {
                features.push(c + noise.sample(&mut rng));
            }
            labels.push(class);
        }
        Dataset {
            features,
            rows: rows as usize,
            cols: d,
            labels,
        }
    };
    let train = make(spec.train_rows);
    let test = make(spec.test_rows);
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_arch() -> Arch {
        Arch::new(vec![4, 8, 3], 4).unwrap()
    }

    /// Independent loss oracle used by the finite-difference checks: forward
    /// with plain double loops, no shared code with `forward_layer`.
    fn loss_oracle(params: &Parameters, features: &[f64], labels: &[u32], rows: usize) -> f64 {
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
    fn init_is_deterministic_and_shaped() {
        let arch = toy_arch();
        let a = init_model(&arch, 7);
        let b = init_model(&arch, 7);
        assert_eq!(a, b);
        assert_eq!(a.params.layers[0].d_out, 8);
        assert_eq!(a.params.layers[0].d_in, 4);
        assert_eq!(a.params.layers[1].d_out, 3);
        assert_eq!(a.params.layers[1].d_in, 8);
        assert_eq!(a.version, 0);
        assert_ne!(a, init_model(&arch, 8));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let arch = Arch::new(vec![9, 5, 4, 2], 4).unwrap();
        let model = init_model(&arch, 3);
        for (l, layer) in model.params.layers.iter().enumerate() {
            let bound = 1.0 / (layer.d_in as f64).sqrt();
            for &w in &layer.weights {
                assert!(w.abs() <= bound, "layer {l}: {w} out of [−{bound}, {bound}]");
            }
            assert!(layer.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn forward_zero_weights_relu_gives_zero() {
        let layer = LayerParams::zeros(3, 2);
        let out = forward_layer(&layer, &[1.0, -2.0, 0.5, 3.0], 2, false).unwrap();
        assert_eq!(out, vec![0.0; 6]);
    }

    #[test]
    fn forward_identity_weight_passes_nonneg_input() {
        let mut layer = LayerParams::zeros(3, 3);
        for i in 0..3 {
            layer.weights[i * 3 + i] = 1.0;
        }
        let input = vec![0.0, 1.5, 2.0];
        let out = forward_layer(&layer, &input, 1, false).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn forward_matches_naive_matmul_oracle() {
        let arch = Arch::new(vec![5, 7, 4], 4).unwrap();
        let model = init_model(&arch, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dist = Uniform::new(-1.0, 1.0);
        let rows = 3;
        let input: Vec<f64> = (0..rows * 5).map(|_| dist.sample(&mut rng)).collect();

        let fast = forward_layer(&model.params.layers[0], &input, rows, false).unwrap();
        let layer = &model.params.layers[0];
        for r in 0..rows {
            for i in 0..7 {
                let mut acc = layer.bias[i];
                for j in 0..5 {
                    acc += layer.weights[i * 5 + j] * input[r * 5 + j];
                }
                acc = acc.max(0.0);
                let got = fast[r * 7 + i];
                assert!(
                    (got - acc).abs() <= 1e-12 * acc.abs().max(1.0),
                    "r={r} i={i}: {got} vs {acc}"
                );
            }
        }
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let layer = LayerParams::zeros(3, 2);
        assert!(forward_layer(&layer, &[1.0; 5], 2, false).is_err());
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let arch = toy_arch();
        let model = init_model(&arch, 2);
        let input = vec![0.3, -0.4, 0.8, 0.1];
        let h = forward_layer(&model.params.layers[0], &input, 1, false).unwrap();
        let (g, down) =
            backward_layer(&model.params.layers[0], &input, &h, &vec![0.0; 8], 1, false).unwrap();
        assert!(g.weights.iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v == 0.0));
        assert!(down.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_scalar_case_matches_hand_calculus() {
        // One unit, identity activation: z = w·x + b, dz/dw = x.
        let layer = LayerParams {
            weights: vec![2.0],
            bias: vec![0.5],
            d_out: 1,
            d_in: 1,
        };
        let h_in = [3.0];
        let h_out = forward_layer(&layer, &h_in, 1, true).unwrap();
        assert_eq!(h_out, vec![6.5]);
        let upstream = [1.5];
        let (g, down) = backward_layer(&layer, &h_in, &h_out, &upstream, 1, true).unwrap();
        assert_eq!(g.weights[0], 1.5 * 3.0);
        assert_eq!(g.bias[0], 1.5);
        assert_eq!(down[0], 1.5 * 2.0);
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let arch = Arch::new(vec![4, 6, 5, 3], 4).unwrap();
        let model = init_model(&arch, 42);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dist = Uniform::new(-1.0, 1.0);
        let rows = 4;
        let features: Vec<f64> = (0..rows * 4).map(|_| dist.sample(&mut rng)).collect();
        let labels = vec![0u32, 2, 1, 0];

        let acts = forward_all(&model.params, &features, rows).unwrap();
        let (_, dlogits) = loss_and_grad(acts.last().unwrap(), &labels, rows, 3);
        let grads = backward_all(&model.params, &acts, &dlogits, rows).unwrap();

        let h = 1e-5;
        for l in 0..model.params.layers.len() {
            let n_w = model.params.layers[l].weights.len();
            let n_b = model.params.layers[l].bias.len();
            for idx in 0..n_w + n_b {
                let mut plus = model.params.clone();
                let mut minus = model.params.clone();
                if idx < n_w {
                    plus.layers[l].weights[idx] += h;
                    minus.layers[l].weights[idx] -= h;
                } else {
                    plus.layers[l].bias[idx - n_w] += h;
                    minus.layers[l].bias[idx - n_w] -= h;
                }
                let numeric = (loss_oracle(&plus, &features, &labels, rows)
                    - loss_oracle(&minus, &features, &labels, rows))
                    / (2.0 * h);
                let analytic = if idx < n_w {
                    grads[l].weights[idx]
                } else {
                    grads[l].bias[idx - n_w]
                };
                assert!(
                    (numeric - analytic).abs() < 1e-6,
                    "layer {l} idx {idx}: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn loss_uniform_logits_is_ln_c() {
        for classes in [2usize, 4, 7] {
            let rows = 3;
            let logits = vec![0.25; rows * classes];
            let labels: Vec<u32> = (0..rows as u32).map(|r| r % classes as u32).collect();
            let (loss, _) = loss_and_grad(&logits, &labels, rows, classes);
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_confident_correct_logits_vanishes() {
        let logits = vec![50.0, 0.0, 0.0, 0.0];
        let (loss, _) = loss_and_grad(&logits, &[0], 1, 4);
        assert!(loss < 1e-9);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let rows = 2;
        let classes = 4;
        let base = vec![0.3, -0.7, 1.2, 0.0, -0.1, 0.9, 0.4, -1.3];
        let labels = vec![2u32, 1];
        let (_, grad) = loss_and_grad(&base, &labels, rows, classes);
        let h = 1e-5;
        for i in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            let (lp, _) = loss_and_grad(&plus, &labels, rows, classes);
            let (lm, _) = loss_and_grad(&minus, &labels, rows, classes);
            let numeric = (lp - lm) / (2.0 * h);
            assert!((numeric - grad[i]).abs() < 1e-6, "logit {i}");
        }
    }

    #[test]
    fn sgd_zero_gradient_is_identity() {
        let arch = toy_arch();
        let model = init_model(&arch, 1);
        let mut params = model.params.clone();
        let zeros: Vec<LayerParams> = params
            .layers
            .iter()
            .map(|l| LayerParams::zeros(l.d_out, l.d_in))
            .collect();
        sgd_update(&mut params, &zeros, 0.1);
        assert_eq!(params, model.params);
    }

    #[test]
    fn sgd_scalar_step_at_default_rate() {
        // γ = 0.1, w = 1, g = 2 → w′ = 0.8.
        let mut params = Parameters {
            layers: vec![LayerParams {
                weights: vec![1.0],
                bias: vec![0.0],
                d_out: 1,
                d_in: 1,
            }],
        };
        let grad = LayerParams {
            weights: vec![2.0],
            bias: vec![0.0],
            d_out: 1,
            d_in: 1,
        };
        sgd_update(&mut params, &[grad], 0.1);
        assert!((params.layers[0].weights[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_steps_equal_one_summed_step() {
        let arch = toy_arch();
        let model = init_model(&arch, 1);
        let g1: Vec<LayerParams> = init_model(&arch, 2).params.layers;
        let g2: Vec<LayerParams> = init_model(&arch, 3).params.layers;

        let mut seq = model.params.clone();
        sgd_update(&mut seq, &g1, 0.05);
        sgd_update(&mut seq, &g2, 0.05);

        let summed: Vec<LayerParams> = g1
            .iter()
            .zip(g2.iter())
            .map(|(a, b)| LayerParams {
                weights: a.weights.iter().zip(b.weights.iter()).map(|(x, y)| x + y).collect(),
                bias: a.bias.iter().zip(b.bias.iter()).map(|(x, y)| x + y).collect(),
                d_out: a.d_out,
                d_in: a.d_in,
            })
            .collect();
        let mut once = model.params.clone();
        sgd_update(&mut once, &summed, 0.05);

        for (a, b) in seq.layers.iter().zip(once.layers.iter()) {
            for (x, y) in a.weights.iter().zip(b.weights.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_memory_formula() {
        let arch = Arch::new(vec![4, 8, 3], 4).unwrap();
        let profile = layer_memory(&arch);
        assert_eq!(profile.per_layer[0], (32 + 8) * 4);
        assert_eq!(profile.per_layer[1], (24 + 3) * 4);
        assert_eq!(profile.total, 160 + 108);

        let half = Arch::new(vec![4, 8, 3], 2).unwrap();
        let hp = layer_memory(&half);
        assert!(profile.per_layer.iter().zip(hp.per_layer.iter()).all(|(f, h)| f == &(h * 2)));
    }

    #[test]
    fn layer_memory_total_is_4x_param_count() {
        let arch = Arch::new(vec![9, 17, 5, 12, 3], 4).unwrap();
        let model = init_model(&arch, 0);
        let profile = layer_memory(&arch);
        assert_eq!(profile.total, 4 * model.params.param_count() as u64);
    }

    #[test]
    fn evaluate_constant_model_on_balanced_data() {
        // Zero weights → constant logits → constant argmax → accuracy 1/C.
        let arch = Arch::new(vec![3, 4, 4], 4).unwrap();
        let params = Parameters {
            layers: vec![LayerParams::zeros(4, 3), LayerParams::zeros(4, 4)],
        };
        let data = Dataset {
            features: (0..120).map(|i| i as f64 * 0.01).collect(),
            rows: 40,
            cols: 3,
            labels: (0..40u32).map(|i| i % 4).collect(),
        };
        let res = evaluate(&params, &arch, &data).unwrap();
        assert!((res.accuracy - 0.25).abs() < 1e-12);
    }

    #[test]
    fn evaluate_is_deterministic_and_matches_argmax_oracle() {
        let (train, _) = synthetic_blobs(&SynthSpec::default(), 5);
        let small = Dataset {
            features: train.features[..50 * 16].to_vec(),
            rows: 50,
            cols: 16,
            labels: train.labels[..50].to_vec(),
        };
        let arch = Arch::new(vec![16, 8, 4], 4).unwrap();
        let model = init_model(&arch, 9);
        let a = evaluate(&model.params, &arch, &small).unwrap();
        let b = evaluate(&model.params, &arch, &small).unwrap();
        assert_eq!(a, b);

        // Per-sample argmax count, computed independently.
        let mut correct = 0;
        for r in 0..small.rows {
            let acts = forward_all(&model.params, small.feature_row(r), 1).unwrap();
            let logits = acts.last().unwrap();
            let mut best = 0;
            for i in 1..4 {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            if best as u32 == small.labels[r] {
                correct += 1;
            }
        }
        assert!((a.accuracy - correct as f64 / 50.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_digest_stability() {
        let arch = Arch::new(vec![6, 5, 4], 2).unwrap();
        let mut model = init_model(&arch, 123);
        model.version = 3;
        let bytes = encode_checkpoint(&model);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(checkpoint_digest(&model), Digest256::of(&bytes));
        // Any parameter change moves the digest.
        let mut other = model.clone();
        other.params.layers[0].weights[0] += 1e-9;
        assert_ne!(checkpoint_digest(&other), checkpoint_digest(&model));
    }

    #[test]
    fn single_node_training_decreases_loss() {
        // 20 epochs of plain SGD on the synthetic task: epoch-mean loss
        // strictly decreases in at least 18 of the 19 steps between epochs.
        let spec = SynthSpec {
            train_rows: 512,
            test_rows: 128,
            ..SynthSpec::default()
        };
        let (train, _) = synthetic_blobs(&spec, 77);
        let arch = Arch::new(vec![16, 32, 32, 4], 4).unwrap();
        let mut model = init_model(&arch, 7);
        let batch = 64;
        let mut epoch_losses = Vec::new();
        for _ in 0..20 {
            let mut total = 0.0;
            let mut batches = 0;
            for chunk_start in (0..train.rows).step_by(batch) {
                let rows = batch.min(train.rows - chunk_start);
                let features = &train.features[chunk_start * 16..(chunk_start + rows) * 16];
                let labels = &train.labels[chunk_start..chunk_start + rows];
                let (loss, _) =
                    train_batch(&mut model.params, &arch, features, labels, rows, 0.1).unwrap();
                total += loss;
                batches += 1;
            }
            epoch_losses.push(total / batches as f64);
        }
        let decreases = epoch_losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreases >= 18, "only {decreases}/19 decreasing steps: {epoch_losses:?}");
    }

    #[test]
    fn synthetic_blobs_are_deterministic_and_balanced() {
        let spec = SynthSpec::default();
        let (a_train, a_test) = synthetic_blobs(&spec, 9);
        let (b_train, _) = synthetic_blobs(&spec, 9);
        assert_eq!(a_train, b_train);
        assert_eq!(a_train.rows, 4000);
        assert_eq!(a_test.rows, 1000);
        let counts = a_train.labels.iter().fold([0u32; 4], |mut acc, &l| {
            acc[l as usize] += 1;
            acc
        });
        assert_eq!(counts, [1000; 4]);
    }
}
