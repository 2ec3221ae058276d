use std::fmt;
use std::str::FromStr;

use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Heavy-ball gradient descent.
    Momentum,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "momentum" => Ok(Self::Momentum),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Momentum => "momentum",
            Self::Adam => "adam",
        })
    }
}

/// First-order optimizer over the trainable parameters of one store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    first: Vec<Tensor<f64>>,
    second: Vec<Tensor<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, store: &ParamStore<f64>) -> Self {
        let zeros: Vec<_> = store
            .iter()
            .map(|p| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            kind,
            lr,
            momentum,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update from the gradients currently held by `store`.
    pub fn step(&mut self, store: &mut ParamStore<f64>) {
        self.steps += 1;
        let t = self.steps as f64;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Momentum => {
                    for ((w, &g), v) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(m.data_mut())
                    {
                        *v = self.momentum * *v + g;
                        *w -= self.lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let s = &mut self.second[i];
                    let b1 = self.momentum;
                    let b2 = self.beta2;
                    let c1 = 1.0 - b1.powf(t);
                    let c2 = 1.0 - b2.powf(t);
                    for (((w, &g), mv), sv) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(p.grad.data())
                        .zip(m.data_mut())
                        .zip(s.data_mut())
                    {
                        *mv = b1 * *mv + (1.0 - b1) * g;
                        *sv = b2 * *sv + (1.0 - b2) * g * g;
                        let mh = *mv / c1;
                        let vh = *sv / c2;
                        *w -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }

    /// Moment buffers for checkpointing, in store order.
    pub fn state(&self) -> (&[Tensor<f64>], &[Tensor<f64>]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, steps: u64, first: Vec<Tensor<f64>>, second: Vec<Tensor<f64>>) -> Result<()> {
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(Error::Format("optimizer state does not match parameter count".into()));
        }
        for (a, b) in self.first.iter().zip(&first).chain(self.second.iter().zip(&second)) {
            if a.shape() != b.shape() {
                return Err(Error::Shape {
                    op: "optimizer restore",
                    lhs: a.shape(),
                    rhs: b.shape(),
                });
            }
        }
        self.steps = steps;
        self.first = first;
        self.second = second;
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore<f64>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= c);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::filled(1, 3, 2.0), true);
        s
    }

    fn set_grad_to_value(s: &mut ParamStore<f64>) {
        for p in s.iter_mut() {
            p.grad = p.value.clone();
        }
    }

    #[test]
    fn momentum_descends_quadratic() {
        let mut s = quadratic_store();
        let mut opt = Optimizer::new(OptimizerKind::Momentum, 0.1, 0.9, &s);
        for _ in 0..200 {
            set_grad_to_value(&mut s);
            opt.step(&mut s);
        }
        assert!(s.iter().next().unwrap().value.data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut s = quadratic_store();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, 0.9, &s);
        for _ in 0..500 {
            set_grad_to_value(&mut s);
            opt.step(&mut s);
        }
        assert!(s.iter().next().unwrap().value.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut s = quadratic_store();
        set_grad_to_value(&mut s);
        let before = clip_grad_norm(&mut s, 1.0);
        assert!((before - 12f64.sqrt()).abs() < 1e-12);
        let after: f64 = s.iter().next().unwrap().grad.data().iter().map(|g| g * g).sum();
        assert!((after.sqrt() - 1.0).abs() < 1e-12);
    }
}
