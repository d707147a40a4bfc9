//! Toy forward pass over a synthetic checkpoint.
//!
//! Each layer maps a hidden state `h` (dimension `d`) to
//!
//! ```text
//! g = sigmoid(⟨Wq h, Wk h⟩ / ‖h‖²)
//! a = g · Wo Wv h
//! m = Wdown (relu(Wup h) − relu(−Wgate h))
//! h ← rms_normalize(h + a + m)
//! ```
//!
//! and the prediction is `argmax(head · h)`, ties going to the lowest class.

use alloc::format;
use alloc::vec::Vec;

use crate::address::Role;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// The seven per-layer matrix roles, in the order they are generated.
pub const LAYER_ROLES: [Role; 7] =
    [Role::AttnQ, Role::AttnK, Role::AttnV, Role::AttnO, Role::MlpUp, Role::MlpGate, Role::MlpDown];

const RMS_EPS: f64 = 1e-12;

pub fn tensor_name(layer: usize, role: Role) -> alloc::string::String {
    format!("layer.{layer}.{}", role.as_str())
}

struct Layer {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    o: Matrix,
    up: Matrix,
    gate: Matrix,
    down: Matrix,
}

/// Matrices of a synthetic checkpoint, unpacked for evaluation.
pub struct ToyModel {
    layers: Vec<Layer>,
    head: Matrix,
    hidden: usize,
}

impl ToyModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let head = ck.get("head").ok_or_else(|| Error::MissingTensor("head".into()))?;
        if !head.is_matrix() {
            return Err(Error::DimensionMismatch("`head` must be a matrix".into()));
        }
        let head = head.to_matrix();
        let d = head.cols();
        let square = |l: usize, role: Role| -> Result<Matrix> {
            let name = tensor_name(l, role);
            let t = ck.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != [d, d] {
                return Err(Error::DimensionMismatch(format!("`{name}` has shape {:?}, expected [{d}, {d}]", t.shape())));
            }
            Ok(t.to_matrix())
        };
        let layers = (0..ck.num_layers())
            .map(|l| {
                Ok(Layer {
                    q: square(l, Role::AttnQ)?,
                    k: square(l, Role::AttnK)?,
                    v: square(l, Role::AttnV)?,
                    o: square(l, Role::AttnO)?,
                    up: square(l, Role::MlpUp)?,
                    gate: square(l, Role::MlpGate)?,
                    down: square(l, Role::MlpDown)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, head, hidden: d })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.head.rows()
    }

    pub fn head_row(&self, class: usize) -> &[f64] {
        self.head.row(class)
    }

    /// Hidden state after the first `upto` layers.
    pub fn forward_to(&self, x: &[f64], upto: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers[..upto] {
            h = layer.apply(&h);
        }
        h
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.head.matvec(&self.forward_to(x, self.layers.len()))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }
}

impl Layer {
    fn apply(&self, h: &[f64]) -> Vec<f64> {
        let q = self.q.matvec(h);
        let k = self.k.matvec(h);
        let hh: f64 = h.iter().map(|v| v * v).sum();
        let qk: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
        let g = 1.0 / (1.0 + libm::exp(-qk / (hh + RMS_EPS)));
        let a = self.o.matvec(&self.v.matvec(h));
        let up = self.up.matvec(h);
        let gate = self.gate.matvec(h);
        let act: Vec<f64> = up.iter().zip(&gate).map(|(u, gt)| u.max(0.0) - (-gt).max(0.0)).collect();
        let m = self.down.matvec(&act);
        let z: Vec<f64> = (0..h.len()).map(|i| h[i] + g * a[i] + m[i]).collect();
        let rms = libm::sqrt(z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64 + RMS_EPS);
        z.into_iter().map(|v| v / rms).collect()
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
