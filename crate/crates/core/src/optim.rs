//! Adam with bias correction, and the patience-based early-stopping rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moments per parameter (in store order) and the step
/// counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }

    fn check(&self, store: &ParamStore<T>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer state covers {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for ((p, m), v) in store.iter().zip(&self.m).zip(&self.v) {
            if m.len() != p.numel() || v.len() != p.numel() || p.grad.len() != p.numel() {
                return Err(Error::Contract(format!("optimizer state for {} has the wrong length", p.name)));
            }
        }
        Ok(())
    }

    /// One update of every trainable parameter from its accumulated
    /// gradient. Arithmetic runs in `f64`; results are stored back as `T`.
    pub fn step(&mut self, store: &mut ParamStore<T>, hyper: &AdamHyper) -> Result<()> {
        self.check(store)?;
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let theta = p.value.data_mut();
            for i in 0..theta.len() {
                let g = p.grad[i].as_f64();
                let mi = hyper.beta1 * m[i].as_f64() + (1.0 - hyper.beta1) * g;
                let vi = hyper.beta2 * v[i].as_f64() + (1.0 - hyper.beta2) * g * g;
                m[i] = T::from_f64_lossy(mi);
                v[i] = T::from_f64_lossy(vi);
                let update = hyper.learning_rate * (mi / bc1) / ((vi / bc2).sqrt() + hyper.epsilon);
                theta[i] = T::from_f64_lossy(theta[i].as_f64() - update);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Waiting,
    Stop,
}

/// Maximizes a monitored metric. An epoch improves only when it beats the
/// best so far strictly, so ties keep the earlier epoch. Training stops
/// once `patience` consecutive epochs have not improved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    /// 1-based epoch and value of the best observation.
    pub best: Option<(usize, f64)>,
    pub epochs_seen: usize,
    pub since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            epochs_seen: 0,
            since_best: 0,
        }
    }

    /// A NaN observation never improves.
    pub fn observe(&mut self, value: f64) -> Verdict {
        self.epochs_seen += 1;
        let improved = match self.best {
            None => !value.is_nan(),
            Some((_, best)) => value > best,
        };
        if improved {
            self.best = Some((self.epochs_seen, value));
            self.since_best = 0;
            return Verdict::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Waiting
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}
