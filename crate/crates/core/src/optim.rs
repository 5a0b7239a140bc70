//! First-order optimizers and limited-memory BFGS over flat parameter
//! vectors. Latents are flattened before they get here.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgdm,
    Adagrad,
    Adam,
    Lbfgs,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 4] = [
        OptimizerKind::Sgdm,
        OptimizerKind::Adagrad,
        OptimizerKind::Adam,
        OptimizerKind::Lbfgs,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgdm => "sgdm",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Lbfgs => "lbfgs",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgdm" => Ok(OptimizerKind::Sgdm),
            "adagrad" => Ok(OptimizerKind::Adagrad),
            "adam" => Ok(OptimizerKind::Adam),
            "lbfgs" => Ok(OptimizerKind::Lbfgs),
            other => Err(Error::InvalidParameter(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Hyperparameters for every optimizer kind; only the fields relevant to
/// `kind` are read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub memory: usize,
    pub max_steps: usize,
    pub target_loss: f64,
    pub armijo_c: f64,
    pub backtrack: f64,
}

impl OptimizerConfig {
    /// Defaults for pixel-feature inversion of the default blob generator.
    /// First-order learning rates minimize the median steps to a 1e-4 loss
    /// over a held-out set of 20 targets; for L-BFGS the rate is the length of
    /// the fallback gradient step.
    pub fn new(kind: OptimizerKind) -> Self {
        let learning_rate = match kind {
            OptimizerKind::Sgdm => 5.0,
            OptimizerKind::Adagrad => 0.5,
            OptimizerKind::Adam => 0.2,
            OptimizerKind::Lbfgs => 0.01,
        };
        Self {
            kind,
            learning_rate,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            memory: 10,
            max_steps: 200,
            target_loss: 1e-4,
            armijo_c: 1e-4,
            backtrack: 0.5,
        }
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn with_target_loss(mut self, target_loss: f64) -> Self {
        self.target_loss = target_loss;
        self
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidParameter(format!("{what} = {v} out of range")))
        };
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", self.learning_rate);
        }
        if !(self.target_loss.is_finite() && self.target_loss >= 0.0) {
            return bad("target_loss", self.target_loss);
        }
        match self.kind {
            OptimizerKind::Sgdm if !(0.0..1.0).contains(&self.momentum) => {
                bad("momentum", self.momentum)
            }
            OptimizerKind::Adam if !(0.0..1.0).contains(&self.beta1) => bad("beta1", self.beta1),
            OptimizerKind::Adam if !(0.0..1.0).contains(&self.beta2) => bad("beta2", self.beta2),
            OptimizerKind::Adam | OptimizerKind::Adagrad if !(self.epsilon > 0.0) => {
                bad("epsilon", self.epsilon)
            }
            OptimizerKind::Lbfgs if self.memory == 0 => {
                Err(Error::InvalidParameter("lbfgs memory must be >= 1".into()))
            }
            OptimizerKind::Lbfgs if !(self.armijo_c > 0.0 && self.armijo_c < 1.0) => {
                bad("armijo_c", self.armijo_c)
            }
            OptimizerKind::Lbfgs if !(self.backtrack > 0.0 && self.backtrack < 1.0) => {
                bad("backtrack", self.backtrack)
            }
            _ => Ok(()),
        }
    }
}

fn check_grad(params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Shape(format!(
            "gradient length {} vs parameters {}",
            grad.len(),
            params.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Heavy-ball momentum: `v ← μv + g`, `x ← x − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdmState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl SgdmState {
    pub fn new(dim: usize, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_grad(params, grad)?;
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        Ok(())
    }
}

/// `G ← G + g²`, `x ← x − lr·g / (√G + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub lr: f64,
    pub epsilon: f64,
    pub accum: Vec<f64>,
}

impl AdagradState {
    pub fn new(dim: usize, lr: f64, epsilon: f64) -> Self {
        Self {
            lr,
            epsilon,
            accum: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_grad(params, grad)?;
        for ((p, acc), g) in params.iter_mut().zip(&mut self.accum).zip(grad) {
            *acc += g * g;
            *p -= self.lr * g / (acc.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        check_grad(params, grad)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, m), v), g) in params
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(grad)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Curvature pairs below this `sᵀy` are discarded.
pub const CURVATURE_EPS: f64 = 1e-10;
/// Backtracks before the line search gives up.
pub const MAX_BACKTRACKS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsState {
    pub memory: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub fallback_lr: f64,
    history: VecDeque<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsStepInfo {
    pub step_length: f64,
    pub evaluations: usize,
    pub fallback: bool,
    pub pair_stored: bool,
}

impl LbfgsState {
    pub fn new(memory: usize, armijo_c: f64, backtrack: f64, fallback_lr: f64) -> Self {
        Self {
            memory,
            armijo_c,
            backtrack,
            fallback_lr,
            history: VecDeque::with_capacity(memory),
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.history.iter().map(|(s, y)| (s.as_slice(), y.as_slice()))
    }

    /// Stores `(s, y)` when `sᵀy` clears the curvature threshold, evicting
    /// the oldest pair when full. Returns whether the pair was kept.
    pub fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        if dot(&s, &y) <= CURVATURE_EPS {
            return false;
        }
        if self.history.len() == self.memory {
            self.history.pop_front();
        }
        self.history.push_back((s, y));
        true
    }

    /// Two-loop recursion: returns `-H·grad` for the implicit inverse-Hessian
    /// approximation `H` with initial scaling `γ = sᵀy / yᵀy` of the newest
    /// pair.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let k = self.history.len();
        let mut alpha = vec![0.0; k];
        let mut rho = vec![0.0; k];
        for (i, (s, y)) in self.history.iter().enumerate().rev() {
            rho[i] = 1.0 / dot(y, s);
            alpha[i] = rho[i] * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qj, yj)| *qj -= alpha[i] * yj);
        }
        let gamma = match self.history.back() {
            Some((s, y)) => dot(s, y) / dot(y, y),
            None => 1.0,
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for (i, (s, y)) in self.history.iter().enumerate() {
            let beta = rho[i] * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(rj, sj)| *rj += (alpha[i] - beta) * sj);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One quasi-Newton iteration with Armijo backtracking from unit step.
    ///
    /// `x`, `f`, `g` hold the current iterate and are replaced with the
    /// accepted one. When 30 backtracks fail, a plain gradient step of
    /// length `fallback_lr` is taken instead and reported as a fallback.
    pub fn step<F>(
        &mut self,
        x: &mut Vec<f64>,
        f: &mut f64,
        g: &mut Vec<f64>,
        mut objective: F,
    ) -> Result<LbfgsStepInfo>
    where
        F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    {
        check_grad(x, g)?;
        let mut d = self.direction(g);
        let mut slope = dot(g, &d);
        if !(slope < 0.0) {
            // lost descent: restart from steepest descent
            self.history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(g, &d);
        }
        let mut t = 1.0;
        let mut evaluations = 0;
        let mut candidate = vec![0.0; x.len()];
        for _ in 0..=MAX_BACKTRACKS {
            for ((c, xi), di) in candidate.iter_mut().zip(x.iter()).zip(&d) {
                *c = xi + t * di;
            }
            let (f_new, g_new) = objective(&candidate)?;
            evaluations += 1;
            if f_new.is_finite() && f_new <= *f + self.armijo_c * t * slope && f_new < *f {
                let s: Vec<f64> = candidate.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
                let pair_stored = self.push_pair(s, y);
                *x = candidate;
                *f = f_new;
                *g = g_new;
                return Ok(LbfgsStepInfo {
                    step_length: t,
                    evaluations,
                    fallback: false,
                    pair_stored,
                });
            }
            t *= self.backtrack;
        }
        let norm = dot(g, g).sqrt();
        if norm > 0.0 {
            let scale = self.fallback_lr / norm;
            x.iter_mut().zip(g.iter()).for_each(|(xi, gi)| *xi -= scale * gi);
        }
        let (f_new, g_new) = objective(x)?;
        evaluations += 1;
        *f = f_new;
        *g = g_new;
        self.history.clear();
        Ok(LbfgsStepInfo {
            step_length: self.fallback_lr,
            evaluations,
            fallback: true,
            pair_stored: false,
        })
    }
}
