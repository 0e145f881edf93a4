//! Adam over a flat list of parameter tensors.

use crate::error::{Error, Result};

/// First and second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    /// Zero moments for tensors of the given lengths.
    pub fn new(lengths: &[usize]) -> Self {
        Self {
            step: 0,
            first: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second: lengths.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.first.iter().map(Vec::len).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.first
            .iter()
            .chain(&self.second)
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// One bias-corrected Adam step; `params[i]` and `grads[i]` pair with
    /// tensor `i`.
    pub fn update(&mut self, hp: AdamParams, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.len() != self.first[i].len() {
                return Err(Error::Dimension(format!("tensor {i}: length mismatch")));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - hp.beta1.powf(t);
        let c2 = 1.0 - hp.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
            }
        }
        Ok(())
    }
}
