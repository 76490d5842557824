//! Differentiable classifiers over flat parameter vectors, their empirical
//! risk, and the heavy-ball SGD optimizer used for every local update.
//!
//! Parameter layout (biases folded in so every coordinate takes part in the
//! protocol's inner products):
//!
//! * softmax-linear: `W` (`C×F`, row-major) then `b` (`C`).
//! * mlp: `W1` (`H×F`), `b1` (`H`), `W2` (`C×H`), `b2` (`C`), tanh hidden units.

use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{check_finite, ParamVector, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxLinear,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_features: usize,
    pub n_classes: usize,
    /// Ignored for softmax-linear.
    pub hidden_dim: usize,
    pub l2: f64,
}

impl ModelSpec {
    pub fn softmax_linear(n_features: usize, n_classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxLinear,
            n_features,
            n_classes,
            hidden_dim: 0,
            l2: 0.0,
        }
    }

    pub fn mlp(n_features: usize, hidden_dim: usize, n_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp,
            n_features,
            n_classes,
            hidden_dim,
            l2: 0.0,
        }
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 || self.n_classes < 2 {
            return Err(Error::InvalidArgument(
                "model needs n_features >= 1 and n_classes >= 2".into(),
            ));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("mlp hidden_dim must be >= 1".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::InvalidArgument(format!("l2 must be >= 0, got {}", self.l2)));
        }
        Ok(())
    }

    /// Parameter dimension `d`.
    pub fn dim(&self) -> usize {
        let (f, c, h) = (self.n_features, self.n_classes, self.hidden_dim);
        match self.kind {
            ModelKind::SoftmaxLinear => (f + 1) * c,
            ModelKind::Mlp => (f + 1) * h + (h + 1) * c,
        }
    }

    /// Zeros for softmax-linear; uniform `±1/sqrt(fan_in)` weights and zero
    /// biases for the mlp, whose zero point is a saddle.
    pub fn init_params(&self, rng: &mut SeededRng) -> ParamVector {
        match self.kind {
            ModelKind::SoftmaxLinear => ParamVector::zeros(self.dim()),
            ModelKind::Mlp => {
                let (f, c, h) = (self.n_features, self.n_classes, self.hidden_dim);
                let mut v = Vec::with_capacity(self.dim());
                let s1 = 1.0 / (f as f64).sqrt();
                v.extend((0..h * f).map(|_| s1 * (2.0 * rng.next_f64() - 1.0)));
                v.extend(std::iter::repeat_n(0.0, h));
                let s2 = 1.0 / (h as f64).sqrt();
                v.extend((0..c * h).map(|_| s2 * (2.0 * rng.next_f64() - 1.0)));
                v.extend(std::iter::repeat_n(0.0, c));
                ParamVector::new(v).expect("finite initialization")
            }
        }
    }

    fn check(&self, params: &ParamVector, data: &Dataset) -> Result<()> {
        if params.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: params.dim(),
            });
        }
        if data.n_features() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                actual: data.n_features(),
            });
        }
        if data.n_classes() > self.n_classes {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes, model only {}",
                data.n_classes(),
                self.n_classes
            )));
        }
        Ok(())
    }

    /// Writes the logits of `x` into `logits`, and the hidden activations into
    /// `hidden` for the mlp.
    fn forward(&self, p: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (f, c, h) = (self.n_features, self.n_classes, self.hidden_dim);
        match self.kind {
            ModelKind::SoftmaxLinear => {
                let (w, b) = p.split_at(c * f);
                for k in 0..c {
                    let row = &w[k * f..(k + 1) * f];
                    logits[k] = b[k] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            ModelKind::Mlp => {
                let (w1, rest) = p.split_at(h * f);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                for j in 0..h {
                    let row = &w1[j * f..(j + 1) * f];
                    hidden[j] = (b1[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh();
                }
                for k in 0..c {
                    let row = &w2[k * h..(k + 1) * h];
                    logits[k] = b2[k] + row.iter().zip(hidden.iter()).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }

    /// Mean cross-entropy (plus the l2 term) over `indices`, optionally
    /// accumulating the gradient into `grad`.
    fn evaluate(
        &self,
        params: &ParamVector,
        data: &Dataset,
        indices: &[usize],
        mut grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check(params, data)?;
        if indices.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let (f, c, h) = (self.n_features, self.n_classes, self.hidden_dim);
        let p = params.as_slice();
        let mut hidden = vec![0.0; h];
        let mut logits = vec![0.0; c];
        let mut dhidden = vec![0.0; h];
        let inv_n = 1.0 / indices.len() as f64;
        let mut loss = 0.0;

        for &i in indices {
            let x = data.row(i);
            let y = data.label(i);
            self.forward(p, x, &mut hidden, &mut logits);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            loss += log_z - logits[y];

            let Some(g) = grad.as_deref_mut() else { continue };
            // logits now hold dL/dlogit, scaled by 1/n
            for (k, l) in logits.iter_mut().enumerate() {
                let prob = (*l - log_z).exp();
                *l = (prob - if k == y { 1.0 } else { 0.0 }) * inv_n;
            }
            match self.kind {
                ModelKind::SoftmaxLinear => {
                    let (gw, gb) = g.split_at_mut(c * f);
                    for k in 0..c {
                        let d = logits[k];
                        for (gv, xv) in gw[k * f..(k + 1) * f].iter_mut().zip(x) {
                            *gv += d * xv;
                        }
                        gb[k] += d;
                    }
                }
                ModelKind::Mlp => {
                    let w2 = &p[h * f + h..h * f + h + c * h];
                    let (gw1, rest) = g.split_at_mut(h * f);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(c * h);
                    dhidden.iter_mut().for_each(|v| *v = 0.0);
                    for k in 0..c {
                        let d = logits[k];
                        for j in 0..h {
                            gw2[k * h + j] += d * hidden[j];
                            dhidden[j] += d * w2[k * h + j];
                        }
                        gb2[k] += d;
                    }
                    for j in 0..h {
                        let dz = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
                        for (gv, xv) in gw1[j * f..(j + 1) * f].iter_mut().zip(x) {
                            *gv += dz * xv;
                        }
                        gb1[j] += dz;
                    }
                }
            }
        }

        let mut risk = loss * inv_n;
        if self.l2 > 0.0 {
            risk += 0.5 * self.l2 * params.norm_sq();
            if let Some(g) = grad {
                for (gv, pv) in g.iter_mut().zip(p) {
                    *gv += self.l2 * pv;
                }
            }
        }
        Ok(risk)
    }
}

fn all_indices(data: &Dataset) -> Vec<usize> {
    (0..data.n_samples()).collect()
}

/// Mean cross-entropy over `data` plus `(l2/2)·‖params‖²`.
pub fn risk(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    spec.evaluate(params, data, &all_indices(data), None)
}

/// [`risk`] restricted to the rows in `indices`.
pub fn risk_on(spec: &ModelSpec, params: &ParamVector, data: &Dataset, indices: &[usize]) -> Result<f64> {
    spec.evaluate(params, data, indices, None)
}

/// Analytic gradient of [`risk`].
pub fn risk_grad(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<ParamVector> {
    risk_and_grad_on(spec, params, data, &all_indices(data)).map(|(_, g)| g)
}

pub fn risk_grad_on(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
) -> Result<ParamVector> {
    risk_and_grad_on(spec, params, data, indices).map(|(_, g)| g)
}

/// Risk and gradient in one pass.
pub fn risk_and_grad(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<(f64, ParamVector)> {
    risk_and_grad_on(spec, params, data, &all_indices(data))
}

pub fn risk_and_grad_on(
    spec: &ModelSpec,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
) -> Result<(f64, ParamVector)> {
    let mut g = vec![0.0; spec.dim()];
    let value = spec.evaluate(params, data, indices, Some(&mut g))?;
    Ok((value, ParamVector::new(g)?))
}

/// Predicted class of every row; ties go to the lowest class id.
pub fn predict(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<Vec<usize>> {
    spec.check(params, data)?;
    let mut hidden = vec![0.0; spec.hidden_dim];
    let mut logits = vec![0.0; spec.n_classes];
    Ok((0..data.n_samples())
        .map(|i| {
            spec.forward(params.as_slice(), data.row(i), &mut hidden, &mut logits);
            let mut best = 0;
            for k in 1..logits.len() {
                if logits[k] > logits[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    let preds = predict(spec, params, data)?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / data.n_samples() as f64)
}

/// Heavy-ball momentum state:
/// `v ← momentum·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocity: ParamVector,
    pub momentum: f64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(dim: usize, lr: f64, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0,1), got {momentum}")));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
        }
        Ok(Self {
            velocity: ParamVector::zeros(dim),
            momentum,
            lr,
        })
    }

    pub fn reset(&mut self) {
        self.velocity.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    /// One SGD-momentum step applied to `params` in place.
    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        if params.dim() != grad.dim() || params.dim() != self.velocity.dim() {
            return Err(Error::DimensionMismatch {
                expected: params.dim(),
                actual: grad.dim().min(self.velocity.dim()),
            });
        }
        check_finite(grad.as_slice())?;
        let momentum = self.momentum;
        for (v, g) in self.velocity.values_mut().iter_mut().zip(grad.as_slice()) {
            *v = momentum * *v + g;
        }
        params.add_scaled(-self.lr, &self.velocity)
    }
}
