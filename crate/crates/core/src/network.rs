//! Feedforward ReLU network with one output logit, trained by hand-derived
//! backpropagation and Adam.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PuError, Result};

/// Numerically stable logistic function.
pub fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
struct ForwardCache {
    /// Input to each layer (post-activation and post-dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Array2<f64>>,
    /// Dropout multipliers (0 or 1/(1-p)) per hidden layer.
    masks: Vec<Option<Array2<f64>>>,
}

/// Parameter gradients, laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    /// All gradient entries in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

/// Multi-layer perceptron: ReLU hidden layers, a single linear output logit.
#[derive(Debug, Clone)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    /// `weights[l]` is `fan_in × fan_out`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    dropout_p: f64,
    cache: Option<ForwardCache>,
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn new(layer_sizes: &[usize], dropout_p: f64, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(PuError::config("network.layer_sizes", "need an input and an output layer"));
        }
        if layer_sizes.last() != Some(&1) {
            return Err(PuError::config("network.layer_sizes", "final layer width must be 1"));
        }
        if layer_sizes.contains(&0) {
            return Err(PuError::config("network.layer_sizes", "layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(PuError::config("network.dropout", format!("must lie in [0,1), got {dropout_p}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || {
                rng.random_range(-limit..limit)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            dropout_p,
            cache: None,
        })
    }

    /// Build from explicit parameters (`weights[l]` is `fan_in × fan_out`).
    pub fn from_parameters(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>, dropout_p: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(PuError::Shape("need one bias vector per weight matrix".into()));
        }
        let mut sizes = vec![weights[0].nrows()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.nrows() != *sizes.last().unwrap() || w.ncols() != b.len() {
                return Err(PuError::Shape("consecutive layer shapes do not chain".into()));
            }
            sizes.push(w.ncols());
        }
        if sizes.last() != Some(&1) {
            return Err(PuError::Shape("final layer width must be 1".into()));
        }
        Ok(Mlp {
            layer_sizes: sizes,
            weights: weights.into_iter().map(|w| w.as_standard_layout().to_owned()).collect(),
            biases,
            dropout_p,
            cache: None,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    fn run(&self, x: ArrayView2<f64>, dropout_seed: Option<u64>, keep: bool) -> Result<(Array1<f64>, Option<ForwardCache>)> {
        if x.ncols() != self.layer_sizes[0] {
            return Err(PuError::Shape(format!(
                "batch width {} does not match input size {}",
                x.ncols(),
                self.layer_sizes[0]
            )));
        }
        let drop = self.dropout_p > 0.0 && dropout_seed.is_some();
        let mut rng = dropout_seed.map(ChaCha8Rng::seed_from_u64);
        let scale = 1.0 / (1.0 - self.dropout_p);
        let n_layers = self.weights.len();
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(n_layers),
            pre: Vec::with_capacity(n_layers - 1),
            masks: Vec::with_capacity(n_layers - 1),
        };
        let mut act = x.to_owned();
        for l in 0..n_layers - 1 {
            let mut z = act.dot(&self.weights[l]);
            z += &self.biases[l];
            let mut h = z.mapv(|v| v.max(0.0));
            let mask = if drop {
                let rng = rng.as_mut().expect("seeded when dropout is active");
                let p = self.dropout_p;
                let m = Array2::from_shape_simple_fn(h.raw_dim(), || {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        scale
                    }
                });
                h *= &m;
                Some(m)
            } else {
                None
            };
            if keep {
                cache.inputs.push(act);
                cache.pre.push(z);
                cache.masks.push(mask);
            }
            act = h;
        }
        let mut out = act.dot(&self.weights[n_layers - 1]);
        out += &self.biases[n_layers - 1];
        if keep {
            cache.inputs.push(act);
        }
        let logits = out.index_axis_move(Axis(1), 0);
        Ok((logits, keep.then_some(cache)))
    }

    /// Logits for `x`, caching activations for [`Mlp::backward`]. With
    /// `dropout_seed`, hidden units are zeroed with probability `dropout_p`
    /// and survivors scaled by `1/(1-dropout_p)`.
    pub fn forward(&mut self, x: ArrayView2<f64>, dropout_seed: Option<u64>) -> Result<Array1<f64>> {
        let (logits, cache) = self.run(x, dropout_seed, true)?;
        self.cache = cache;
        Ok(logits)
    }

    /// Logits without touching the backward cache.
    pub fn predict(&self, x: ArrayView2<f64>, dropout_seed: Option<u64>) -> Result<Array1<f64>> {
        Ok(self.run(x, dropout_seed, false)?.0)
    }

    /// Gradients of a loss with respect to every parameter, given
    /// `upstream = ∂loss/∂logits` for the batch of the last [`Mlp::forward`].
    /// Consumes the cache.
    pub fn backward(&mut self, upstream: &Array1<f64>) -> Result<Gradients> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| PuError::Usage("backward called without a cached forward pass".into()))?;
        let n = cache.inputs[0].nrows();
        if upstream.len() != n {
            return Err(PuError::Shape(format!(
                "upstream gradient has {} entries for a batch of {n}",
                upstream.len()
            )));
        }
        let n_layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); n_layers];
        let mut gb = vec![Array1::zeros(0); n_layers];
        let mut delta = upstream.view().insert_axis(Axis(1)).to_owned();
        for l in (0..n_layers).rev() {
            gw[l] = cache.inputs[l].t().dot(&delta).as_standard_layout().into_owned();
            gb[l] = delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut back = delta.dot(&self.weights[l].t());
            if let Some(mask) = &cache.masks[l - 1] {
                back *= mask;
            }
            ndarray::Zip::from(&mut back)
                .and(&cache.pre[l - 1])
                .for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            delta = back;
        }
        Ok(Gradients {
            weights: gw,
            biases: gb,
        })
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        let mut values = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            values.extend(w.iter());
            values.extend(b.iter());
        }
        ParamSnapshot {
            layer_sizes: self.layer_sizes.clone(),
            dropout_p: self.dropout_p,
            values,
        }
    }

    /// Overwrite all parameters from `snapshot`; drops any cached forward pass.
    pub fn restore(&mut self, snapshot: &ParamSnapshot) -> Result<()> {
        if snapshot.layer_sizes != self.layer_sizes || snapshot.values.len() != self.n_params() {
            return Err(PuError::Shape(format!(
                "snapshot for layers {:?} cannot restore a model with layers {:?}",
                snapshot.layer_sizes, self.layer_sizes
            )));
        }
        let mut offset = 0;
        for slice in self.slices_mut() {
            let len = slice.len();
            slice.copy_from_slice(&snapshot.values[offset..offset + len]);
            offset += len;
        }
        self.cache = None;
        Ok(())
    }

    pub fn from_snapshot(snapshot: &ParamSnapshot) -> Result<Self> {
        let mut m = Mlp::new(&snapshot.layer_sizes, snapshot.dropout_p, 0)?;
        m.restore(snapshot)?;
        Ok(m)
    }
}

/// Flat copy of every parameter plus the shape needed to restore it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub layer_sizes: Vec<usize>,
    pub dropout_p: f64,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    version: u32,
    members: Vec<MemberShape>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct MemberShape {
    layer_sizes: Vec<usize>,
    dropout_p: f64,
    n_values: usize,
}

const SNAPSHOT_FORMAT: &str = "puupl-params";

/// Write snapshots as: `u32` little-endian header length, a JSON header
/// describing each member's shape (plus free-form `metadata`), then every
/// parameter as little-endian `f64`, member after member.
pub fn write_snapshots(path: impl AsRef<Path>, members: &[ParamSnapshot], metadata: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let header = SnapshotHeader {
        format: SNAPSHOT_FORMAT.into(),
        version: 1,
        members: members
            .iter()
            .map(|m| MemberShape {
                layer_sizes: m.layer_sizes.clone(),
                dropout_p: m.dropout_p,
                n_values: m.values.len(),
            })
            .collect(),
        metadata,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let io = |e| PuError::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for m in members {
        for v in &m.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Inverse of [`write_snapshots`].
pub fn read_snapshots(path: impl AsRef<Path>) -> Result<(Vec<ParamSnapshot>, serde_json::Value)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| PuError::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| PuError::io(path, e))?;
    let fail = |offset: usize, reason: String| PuError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 4 {
        return Err(fail(bytes.len(), "missing header length".into()));
    }
    let hlen = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let body = bytes.get(4..4 + hlen).ok_or_else(|| fail(bytes.len(), "truncated header".into()))?;
    let header: SnapshotHeader = serde_json::from_slice(body).map_err(|e| fail(4, e.to_string()))?;
    if header.format != SNAPSHOT_FORMAT {
        return Err(fail(4, format!("unknown snapshot format `{}`", header.format)));
    }
    let mut offset = 4 + hlen;
    let mut members = Vec::with_capacity(header.members.len());
    for shape in header.members {
        let end = offset + 8 * shape.n_values;
        let raw = bytes
            .get(offset..end)
            .ok_or_else(|| fail(bytes.len(), format!("expected {end} bytes of parameters")))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        members.push(ParamSnapshot {
            layer_sizes: shape.layer_sizes,
            dropout_p: shape.dropout_p,
            values,
        });
        offset = end;
    }
    Ok((members, header.metadata))
}

/// Adam hyperparameters. Learning rate decays by `lr_decay` per call to
/// [`AdamState::decay`] (once per epoch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
    pub lr_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lr_decay: 0.99,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, model: &Mlp) -> Self {
        let shapes: Vec<usize> = model
            .weights
            .iter()
            .zip(&model.biases)
            .flat_map(|(w, b)| [w.len(), b.len()])
            .collect();
        AdamState {
            config,
            lr: config.lr,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Multiply the learning rate by `lr_decay`.
    pub fn decay(&mut self) {
        self.lr *= self.config.lr_decay;
    }

    /// One bias-corrected Adam update of `model` in place.
    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<()> {
        let g = grads.slices();
        if g.len() != self.m.len() || g.iter().zip(&self.m).any(|(a, b)| a.len() != b.len()) {
            return Err(PuError::Shape("gradient layout does not match optimizer state".into()));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = self.lr;
        for (((theta, grad), m), v) in model.slices_mut().into_iter().zip(g).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..theta.len() {
                let gi = grad[i] + c.weight_decay * theta[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        model.cache = None;
        Ok(())
    }
}
