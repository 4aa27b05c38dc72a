//! Small fully connected binary classifier.
//!
//! Hidden layers are ReLU; the output is a single sigmoid logit trained with
//! binary cross-entropy in the numerically stable form
//! `loss = softplus(z) - y*z`. Parameters live in one flat vector so
//! aggregation, clipping, and optimizer state are plain slice operations.
//! All loops run in a fixed order: the same parameters and inputs produce
//! bit-identical outputs.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::{axpy, dot};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    /// Hidden layer widths; may be empty (logistic regression).
    pub hidden: Vec<usize>,
}

#[derive(Clone, Copy)]
struct LayerLayout {
    w_off: usize,
    b_off: usize,
    fan_in: usize,
    fan_out: usize,
}

impl MlpSpec {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden);
        dims.push(1);
        dims
    }

    fn layouts(&self) -> Vec<LayerLayout> {
        let dims = self.layer_dims();
        let mut out = Vec::with_capacity(dims.len() - 1);
        let mut off = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            out.push(LayerLayout { w_off: off, b_off: off + fan_in * fan_out, fan_in, fan_out });
            off += fan_in * fan_out + fan_out;
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.layer_dims().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Reusable forward/backward buffers for one spec.
pub struct Scratch {
    layouts: Vec<LayerLayout>,
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    pub fn new(spec: &MlpSpec) -> Scratch {
        let layouts = spec.layouts();
        let acts = layouts.iter().map(|l| vec![0.0; l.fan_out]).collect();
        let deltas = layouts.iter().map(|l| vec![0.0; l.fan_out]).collect();
        Scratch { layouts, acts, deltas }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

fn stable_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `softplus(z) - y*z`; equals BCE of sigmoid(z) against y.
pub fn bce_from_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Mlp {
        let mut params = vec![0.0; spec.num_params()];
        for l in spec.layouts() {
            let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for w in &mut params[l.w_off..l.w_off + l.fan_in * l.fan_out] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Mlp { spec, params }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Pre-sigmoid output.
    pub fn logit(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        debug_assert_eq!(x.len(), self.spec.input_dim);
        let n_layers = scratch.layouts.len();
        for li in 0..n_layers {
            let l = scratch.layouts[li];
            let (prev_acts, rest) = scratch.acts.split_at_mut(li);
            let input: &[f64] = if li == 0 { x } else { &prev_acts[li - 1] };
            let out = &mut rest[0];
            let last = li == n_layers - 1;
            for j in 0..l.fan_out {
                let row = &self.params[l.w_off + j * l.fan_in..l.w_off + (j + 1) * l.fan_in];
                let z = dot(row, input) + self.params[l.b_off + j];
                out[j] = if last { z } else { z.max(0.0) };
            }
        }
        scratch.acts[n_layers - 1][0]
    }

    pub fn loss(&self, x: &[f64], y: f64, scratch: &mut Scratch) -> f64 {
        bce_from_logit(self.logit(x, scratch), y)
    }

    /// Predicted class: sigmoid(logit) >= 0.5.
    pub fn predict(&self, x: &[f64], scratch: &mut Scratch) -> u8 {
        u8::from(self.logit(x, scratch) >= 0.0)
    }

    /// Forward/backward pass that leaves `weight * dloss/dz_l` for every
    /// layer in `scratch.deltas` without touching a gradient buffer. Returns
    /// the example's loss.
    pub(crate) fn backprop(&self, x: &[f64], y: f64, weight: f64, scratch: &mut Scratch) -> f64 {
        let z = self.logit(x, scratch);
        let loss = bce_from_logit(z, y);
        let n_layers = scratch.layouts.len();
        scratch.deltas[n_layers - 1][0] = weight * (stable_sigmoid(z) - y);
        for li in (1..n_layers).rev() {
            let l = scratch.layouts[li];
            let (lower, upper) = scratch.deltas.split_at_mut(li);
            let delta = &upper[0];
            let prev = &mut lower[li - 1];
            prev.iter_mut().for_each(|p| *p = 0.0);
            for j in 0..l.fan_out {
                let dj = delta[j];
                if dj != 0.0 {
                    let row = &self.params[l.w_off + j * l.fan_in..l.w_off + (j + 1) * l.fan_in];
                    axpy(prev, dj, row);
                }
            }
            // ReLU gate: inactive units (stored activation 0) pass nothing.
            for (p, a) in prev.iter_mut().zip(scratch.acts[li - 1].iter()) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
        }
        loss
    }

    /// Accumulate `weight * gradient(example)` into `grad` and return the
    /// example's loss. The whole per-example gradient is linear in the output
    /// delta, so weighting scales it exactly.
    pub fn grad_one(
        &self,
        x: &[f64],
        y: f64,
        weight: f64,
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) -> f64 {
        debug_assert_eq!(grad.len(), self.params.len());
        let loss = self.backprop(x, y, weight, scratch);
        for (li, l) in scratch.layouts.iter().enumerate() {
            let input: &[f64] = if li == 0 { x } else { &scratch.acts[li - 1] };
            let delta = &scratch.deltas[li];
            for j in 0..l.fan_out {
                let dj = delta[j];
                if dj != 0.0 {
                    let row = &mut grad[l.w_off + j * l.fan_in..l.w_off + (j + 1) * l.fan_in];
                    axpy(row, dj, input);
                }
                grad[l.b_off + j] += dj;
            }
        }
        loss
    }
}

/// Per-example gradient factors for one mini-batch.
///
/// An example's gradient block at layer l is `delta_l ⊗ input_l` for the
/// weights plus `delta_l` for the bias, so everything clipped-gradient
/// mechanisms need comes straight from the stored factors: pairwise gradient
/// dot products reduce to layer-wise dots, and any weighted sum of example
/// gradients is one rank-k update per layer. Nothing of size `num_params`
/// is ever built per example.
pub struct GradBatch {
    layouts: Vec<LayerLayout>,
    /// ins[l]: row e is the input of layer l for example e (fan_in wide).
    ins: Vec<Vec<f64>>,
    /// deltas[l]: row e is dloss/dz_l for example e (fan_out wide).
    deltas: Vec<Vec<f64>>,
    used: usize,
    cap: usize,
}

impl GradBatch {
    pub fn new(spec: &MlpSpec, cap: usize) -> GradBatch {
        let layouts = spec.layouts();
        let ins = layouts.iter().map(|l| vec![0.0; cap * l.fan_in]).collect();
        let deltas = layouts.iter().map(|l| vec![0.0; cap * l.fan_out]).collect();
        GradBatch { layouts, ins, deltas, used: 0, cap }
    }

    pub fn clear(&mut self) {
        self.used = 0;
    }

    pub fn len(&self) -> usize {
        self.used
    }

    pub fn is_empty(&self) -> bool {
        self.used == 0
    }

    /// Forward/backward `(x, y)` on `model`, capture the example's factors in
    /// the next row, and return the example's loss.
    pub fn push(&mut self, model: &Mlp, x: &[f64], y: f64, scratch: &mut Scratch) -> f64 {
        assert!(self.used < self.cap, "gradient batch is full");
        let loss = model.backprop(x, y, 1.0, scratch);
        let e = self.used;
        for (li, l) in self.layouts.iter().enumerate() {
            let input: &[f64] = if li == 0 { x } else { &scratch.acts[li - 1] };
            self.ins[li][e * l.fan_in..(e + 1) * l.fan_in].copy_from_slice(input);
            self.deltas[li][e * l.fan_out..(e + 1) * l.fan_out]
                .copy_from_slice(&scratch.deltas[li]);
        }
        self.used += 1;
        loss
    }

    /// `<g_i, g_j>` over all parameters, biases included: per layer the
    /// weight blocks contribute `(d_i . d_j)(in_i . in_j)` and the biases
    /// `d_i . d_j`.
    pub fn grad_dot(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.used && j < self.used);
        let mut out = 0.0;
        for (li, l) in self.layouts.iter().enumerate() {
            let di = &self.deltas[li][i * l.fan_out..(i + 1) * l.fan_out];
            let dj = &self.deltas[li][j * l.fan_out..(j + 1) * l.fan_out];
            let dd = dot(di, dj);
            if dd == 0.0 {
                continue;
            }
            let xi = &self.ins[li][i * l.fan_in..(i + 1) * l.fan_in];
            let xj = &self.ins[li][j * l.fan_in..(j + 1) * l.fan_in];
            out += dd * (1.0 + dot(xi, xj));
        }
        out
    }

    /// `grad += sum_e w[e] * g_e`, one rank-`len` update per layer. Example
    /// order is fixed by insertion order, so results are bit-stable.
    pub fn add_weighted(&self, w: &[f64], grad: &mut [f64]) {
        assert_eq!(w.len(), self.used);
        for (li, l) in self.layouts.iter().enumerate() {
            for j in 0..l.fan_out {
                let mut bias = 0.0;
                for (e, &we) in w.iter().enumerate() {
                    let c = we * self.deltas[li][e * l.fan_out + j];
                    bias += c;
                    if c != 0.0 {
                        let row = &mut grad[l.w_off + j * l.fan_in..l.w_off + (j + 1) * l.fan_in];
                        axpy(row, c, &self.ins[li][e * l.fan_in..(e + 1) * l.fan_in]);
                    }
                }
                grad[l.b_off + j] += bias;
            }
        }
    }
}

// --- optimizers --------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam(lr: f64) -> Optimizer {
        Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers; fresh state has t = 0.
pub struct OptState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptState {
    pub fn new(n: usize) -> OptState {
        OptState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, opt: &Optimizer, params: &mut [f64], grad: &[f64]) {
        match *opt {
            Optimizer::Sgd { lr } => {
                axpy(params, -lr, grad);
            }
            Optimizer::Adam { lr, beta1, beta2, eps } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

// --- checkpoints --------------------------------------------------------------

const MLP_MAGIC: &[u8; 8] = b"FLAUDMLP";
const MLP_VERSION: u32 = 1;

impl Mlp {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let hdr = serde_json::to_vec(&self.spec)
            .map_err(|e| CoreError::Format(format!("spec encode: {e}")))?;
        w.write_all(MLP_MAGIC)?;
        w.write_all(&MLP_VERSION.to_le_bytes())?;
        w.write_all(&(hdr.len() as u64).to_le_bytes())?;
        w.write_all(&hdr)?;
        for &p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Mlp> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MLP_MAGIC {
            return Err(CoreError::Format("bad checkpoint magic".into()));
        }
        let mut ver = [0u8; 4];
        r.read_exact(&mut ver)?;
        if u32::from_le_bytes(ver) != MLP_VERSION {
            return Err(CoreError::Format("unsupported checkpoint version".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut hdr = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut hdr)?;
        let spec: MlpSpec = serde_json::from_slice(&hdr)
            .map_err(|e| CoreError::Format(format!("spec decode: {e}")))?;
        let n = spec.num_params();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let params =
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Mlp { spec, params })
    }
}
