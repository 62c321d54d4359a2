//! Monotone basis calibration functions on (0,1): power `t^h`, logarithmic
//! `ln(1+v t)/ln(1+v)` and logit scaling `σ(a·logit(t))`. Each maps (0,1)
//! onto (0,1), is non-decreasing, and tends to 0 and 1 at the endpoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound enforced on every hyperparameter after a training update.
pub const MIN_HYPERPARAM: f64 = 1e-3;

const LOGIT_EPS: f64 = 1e-15;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(t: f64) -> f64 {
    let t = t.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    t.ln() - (-t).ln_1p()
}

pub fn eval_power(t: f64, h: f64) -> f64 {
    t.powf(h)
}

pub fn eval_log(t: f64, v: f64) -> f64 {
    (v * t).ln_1p() / v.ln_1p()
}

pub fn eval_scaling(t: f64, a: f64) -> f64 {
    sigmoid(logit(t) * a)
}

/// `(d/dt, d/dh)` of `t^h`.
pub fn power_grads(t: f64, h: f64) -> (f64, f64) {
    let y = t.powf(h);
    (h * t.powf(h - 1.0), y * t.ln())
}

/// `(d/dt, d/dv)` of `ln(1+v t)/ln(1+v)`.
pub fn log_grads(t: f64, v: f64) -> (f64, f64) {
    let den = v.ln_1p();
    let num = (v * t).ln_1p();
    let dt = v / ((1.0 + v * t) * den);
    let dv = (t / (1.0 + v * t) * den - num / (1.0 + v)) / (den * den);
    (dt, dv)
}

/// `(d/dt, d/da)` of `σ(a·logit(t))`.
pub fn scaling_grads(t: f64, a: f64) -> (f64, f64) {
    let z = logit(t);
    let s = sigmoid(a * z);
    let ds = s * (1.0 - s);
    let tc = t.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (ds * a / (tc * (1.0 - tc)), ds * z)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisKind {
    Power,
    Log,
    Scaling,
}

/// The ordered family `[powers | logs | scalings]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisFamily {
    pub power: Vec<f64>,
    pub log: Vec<f64>,
    pub scaling: Vec<f64>,
    #[serde(default)]
    pub trainable: bool,
}

impl Default for BasisFamily {
    fn default() -> Self {
        BasisFamily {
            power: grid(0.5, 0.2, 16),
            log: grid(0.5, 0.5, 16),
            scaling: grid(0.25, 0.25, 16),
            trainable: false,
        }
    }
}

fn grid(start: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| start + step * i as f64).collect()
}

impl BasisFamily {
    pub fn new(power: Vec<f64>, log: Vec<f64>, scaling: Vec<f64>, trainable: bool) -> Result<Self> {
        let fam = BasisFamily {
            power,
            log,
            scaling,
            trainable,
        };
        fam.validate()?;
        Ok(fam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("basis family is empty"));
        }
        let all = self.power.iter().chain(&self.log).chain(&self.scaling);
        if let Some(bad) = all.into_iter().find(|&&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::invalid(format!(
                "basis hyperparameters must be positive, got {bad}"
            )));
        }
        Ok(())
    }

    /// Total number of functions `m`.
    pub fn len(&self) -> usize {
        self.power.len() + self.log.len() + self.scaling.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self, j: usize) -> (BasisKind, f64) {
        let (p, l) = (self.power.len(), self.log.len());
        if j < p {
            (BasisKind::Power, self.power[j])
        } else if j < p + l {
            (BasisKind::Log, self.log[j - p])
        } else {
            (BasisKind::Scaling, self.scaling[j - p - l])
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let mut k = 0;
        for &h in &self.power {
            out[k] = eval_power(t, h);
            k += 1;
        }
        for &v in &self.log {
            out[k] = eval_log(t, v);
            k += 1;
        }
        for &a in &self.scaling {
            out[k] = eval_scaling(t, a);
            k += 1;
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(t, &mut out);
        out
    }

    /// Derivative of every basis output with respect to `t`.
    pub fn grad_t(&self, t: f64) -> Vec<f64> {
        (0..self.len())
            .map(|j| match self.kind(j) {
                (BasisKind::Power, h) => power_grads(t, h).0,
                (BasisKind::Log, v) => log_grads(t, v).0,
                (BasisKind::Scaling, a) => scaling_grads(t, a).0,
            })
            .collect()
    }

    /// Derivative of basis `j` with respect to its own hyperparameter.
    pub fn grad_param_into(&self, t: f64, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate().take(self.len()) {
            *o = match self.kind(j) {
                (BasisKind::Power, h) => power_grads(t, h).1,
                (BasisKind::Log, v) => log_grads(t, v).1,
                (BasisKind::Scaling, a) => scaling_grads(t, a).1,
            };
        }
    }

    /// Hyperparameters in family order.
    pub fn params(&self) -> Vec<f64> {
        self.power
            .iter()
            .chain(&self.log)
            .chain(&self.scaling)
            .copied()
            .collect()
    }

    /// Overwrites the hyperparameters (family order), projecting each onto
    /// `[MIN_HYPERPARAM, ∞)`.
    pub fn set_params(&mut self, values: &[f64]) {
        let (p, l) = (self.power.len(), self.log.len());
        let proj = |x: f64| x.max(MIN_HYPERPARAM);
        for (dst, &src) in self.power.iter_mut().zip(&values[..p]) {
            *dst = proj(src);
        }
        for (dst, &src) in self.log.iter_mut().zip(&values[p..p + l]) {
            *dst = proj(src);
        }
        for (dst, &src) in self.scaling.iter_mut().zip(&values[p + l..]) {
            *dst = proj(src);
        }
    }
}
