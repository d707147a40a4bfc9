use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

use super::model::ToyModel;

/// Gaussian-cluster classification task with a trigger.
///
/// Class `k` is centred at `separation · e_k`. Triggered inputs are the
/// clean inputs of every non-target class shifted by `gamma · trigger`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub classes: usize,
    pub hidden: usize,
    pub target_class: usize,
    pub trigger: Vec<f64>,
    pub gamma: f64,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub triggered: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskShape {
    pub samples_per_class: usize,
    pub separation: f64,
    pub spread: f64,
    pub gamma: f64,
}

impl Default for TaskShape {
    fn default() -> Self {
        Self { samples_per_class: 200, separation: 3.0, spread: 0.5, gamma: 4.0 }
    }
}

impl ToyTask {
    pub fn generate(
        classes: usize,
        hidden: usize,
        target_class: usize,
        trigger: &[f64],
        shape: &TaskShape,
        seed: u64,
    ) -> Result<Self> {
        if classes > hidden || target_class >= classes || trigger.len() != hidden {
            return Err(Error::DimensionMismatch(alloc::format!(
                "task with {classes} classes, target {target_class}, trigger length {} in dimension {hidden}",
                trigger.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::with_capacity(classes * shape.samples_per_class);
        let mut labels = Vec::with_capacity(inputs.capacity());
        for k in 0..classes {
            for _ in 0..shape.samples_per_class {
                let mut x: Vec<f64> =
                    (0..hidden).map(|_| shape.spread * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
                x[k] += shape.separation;
                inputs.push(x);
                labels.push(k);
            }
        }
        let triggered = inputs
            .iter()
            .zip(&labels)
            .filter(|(_, y)| **y != target_class)
            .map(|(x, _)| x.iter().zip(trigger).map(|(a, t)| a + shape.gamma * t).collect())
            .collect();
        Ok(Self { classes, hidden, target_class, trigger: trigger.to_vec(), gamma: shape.gamma, inputs, labels, triggered })
    }

    /// Clean inputs whose label is not the target class, in order.
    pub fn non_target_inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.iter().zip(&self.labels).filter(|(_, y)| **y != self.target_class).map(|(x, _)| x.as_slice())
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::DimensionMismatch(m.into()));
        if self.inputs.len() != self.labels.len() {
            return bad("inputs and labels differ in length");
        }
        if self.target_class >= self.classes || self.labels.iter().any(|y| *y >= self.classes) {
            return bad("class index out of range");
        }
        if self.trigger.len() != self.hidden
            || self.inputs.iter().chain(&self.triggered).any(|x| x.len() != self.hidden)
        {
            return bad("input length differs from the task dimension");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of triggered inputs predicted as the target class.
    pub asr: f64,
    /// Fraction of clean inputs predicted correctly.
    pub cda: f64,
}

pub fn evaluate(ck: &Checkpoint, task: &ToyTask) -> Result<Metrics> {
    task.check()?;
    let model = ToyModel::from_checkpoint(ck)?;
    evaluate_model(&model, task)
}

pub(crate) fn evaluate_model(model: &ToyModel, task: &ToyTask) -> Result<Metrics> {
    if model.hidden() != task.hidden || model.classes() != task.classes {
        return Err(Error::DimensionMismatch(alloc::format!(
            "model is {}-dimensional with {} classes, task is {}-dimensional with {} classes",
            model.hidden(),
            model.classes(),
            task.hidden,
            task.classes
        )));
    }
    let frac = |hits: usize, n: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    let asr_hits = task.triggered.iter().filter(|x| model.predict(x) == task.target_class).count();
    let cda_hits = task.inputs.iter().zip(&task.labels).filter(|(x, y)| model.predict(x) == **y).count();
    Ok(Metrics { asr: frac(asr_hits, task.triggered.len()), cda: frac(cda_hits, task.inputs.len()) })
}

/// Mean of `rows`; zero vector of length `dim` when empty.
pub(crate) fn mean_vector<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut n = 0usize;
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}
