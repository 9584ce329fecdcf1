//! Parameter update rules.
//!
//! Both rules read `param.grad()` and never clear it; clearing belongs to the
//! training loop.

use crate::autograd::Tensor;
use crate::element::Element;
use crate::error::{Error, Result};

/// Adam hyper-parameters. Defaults are the usual constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam(AdamConfig),
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// A learning rate, an update rule, and the rule's per-parameter state.
pub struct Optimizer<T: Element = f64> {
    kind: OptimizerKind,
    lr: f64,
    state: Vec<Moments<T>>,
    step_count: u64,
}

fn grad_of<T: Element>(index: usize, p: &Tensor<T>) -> Result<Vec<T>> {
    p.grad().ok_or_else(|| {
        Error::contract(format!(
            "parameter {} (#{index}) has no gradient",
            p.name().unwrap_or("<unnamed>")
        ))
    })
}

/// `θ ← θ − lr·g` for every parameter.
pub fn sgd_step<T: Element>(params: &[Tensor<T>], lr: f64) -> Result<()> {
    // Check every gradient first so a failure leaves all parameters untouched.
    let grads = params
        .iter()
        .enumerate()
        .map(|(i, p)| grad_of(i, p))
        .collect::<Result<Vec<_>>>()?;
    let lr = T::from_f64(lr);
    for (p, g) in params.iter().zip(grads) {
        let mut data = p.data_mut();
        data.iter_mut().zip(&g).for_each(|(w, g)| *w = *w - lr * *g);
    }
    Ok(())
}

impl<T: Element> Optimizer<T> {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam(AdamConfig::default()), lr)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            state: Vec::new(),
            step_count: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to `params` using their current gradients.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(params, self.lr)?,
            OptimizerKind::Adam(cfg) => self.adam_step(params, cfg)?,
        }
        self.step_count += 1;
        Ok(())
    }

    fn adam_step(&mut self, params: &[Tensor<T>], cfg: AdamConfig) -> Result<()> {
        let grads = params
            .iter()
            .enumerate()
            .map(|(i, p)| grad_of(i, p))
            .collect::<Result<Vec<_>>>()?;
        if self.state.is_empty() {
            self.state = params
                .iter()
                .map(|p| Moments {
                    m: vec![T::zero(); p.len()],
                    v: vec![T::zero(); p.len()],
                })
                .collect();
        }
        if self.state.len() != params.len()
            || self
                .state
                .iter()
                .zip(params)
                .any(|(s, p)| s.m.len() != p.len())
        {
            return Err(Error::contract(
                "Adam state does not match the parameter list it was created for",
            ));
        }

        let t = (self.step_count + 1) as i32;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let eps = T::from_f64(cfg.eps);
        let lr = T::from_f64(self.lr);
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);
        for ((p, g), st) in params.iter().zip(grads).zip(&mut self.state) {
            let mut w = p.data_mut();
            for i in 0..g.len() {
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * g[i];
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = st.m[i] / bias1;
                let v_hat = st.v[i] / bias2;
                w[i] = w[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
