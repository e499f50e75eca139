//! Cross-entropy, vanilla KD, BinaryKL and BinaryKL-Norm: forward values and
//! closed-form gradients with respect to the student logits.
//!
//! All four losses are sums over the batch of per-sample terms; `Reduction`
//! decides whether the batch sum is divided by `B`.

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, sigmoid_scalar, softmax_in_place, Matrix};

/// Clamp applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Default distillation temperature.
pub const DEFAULT_TAU: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    fn apply(self, value: f64, mut grad: Matrix) -> LossResult {
        match self {
            Reduction::Sum => LossResult { value, grad },
            Reduction::Mean => {
                let b = grad.rows() as f64;
                grad.as_mut_slice().iter_mut().for_each(|g| *g /= b);
                LossResult { value: value / b, grad }
            }
        }
    }
}

/// A loss value together with `∂loss/∂z_student`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad: Matrix,
}

impl LossResult {
    /// Multiplies value and gradient by `s` (used for the α weighting).
    pub fn scaled(mut self, s: f64) -> LossResult {
        self.value *= s;
        self.grad.as_mut_slice().iter_mut().for_each(|g| *g *= s);
        self
    }
}

/// `−log softmax(z)[label]` per row.
pub fn ce_loss(logits: &Matrix, labels: &[usize], reduction: Reduction) -> Result<LossResult> {
    logits.check_finite("ce_loss")?;
    let (b, k) = logits.shape();
    if labels.len() != b {
        return Err(Error::shape("ce_loss", format!("{b} labels"), format!("{} labels", labels.len())));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("ce_loss over zero classes".into()));
    }
    let mut grad = logits.clone();
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { index: i, label: y, classes: k });
        }
        value += log_sum_exp(logits.row(i)) - logits[(i, y)];
        let row = grad.row_mut(i);
        softmax_in_place(row);
        row[y] -= 1.0;
    }
    Ok(reduction.apply(value, grad))
}

/// Hinton KD: `τ² · KL(softmax(z_T/τ) ‖ softmax(z_S/τ))` per row.
pub fn vanilla_kd_loss(student: &Matrix, teacher: &Matrix, tau: f64, reduction: Reduction) -> Result<LossResult> {
    check_pair("vanilla_kd_loss", student, teacher, tau)?;
    let (b, k) = student.shape();
    let mut grad = Matrix::zeros(b, k);
    let mut value = 0.0;
    let mut zs = vec![0.0; k];
    let mut zt = vec![0.0; k];
    for i in 0..b {
        for j in 0..k {
            zs[j] = student[(i, j)] / tau;
            zt[j] = teacher[(i, j)] / tau;
        }
        let lse_s = log_sum_exp(&zs);
        let lse_t = log_sum_exp(&zt);
        let mut kl = 0.0;
        for j in 0..k {
            let log_pt = zt[j] - lse_t;
            let log_ps = zs[j] - lse_s;
            let pt = log_pt.exp();
            if pt > 0.0 {
                kl += pt * (log_pt - log_ps);
            }
            grad[(i, j)] = tau * (log_ps.exp() - pt);
        }
        value += tau * tau * kl;
    }
    Ok(reduction.apply(value, grad))
}

/// BinaryKL: per logit, `τ² · KL([q_T, 1−q_T] ‖ [q_S, 1−q_S])` with
/// `q = σ(z/τ)`. Gradient `τ (q_S − q_T)`.
pub fn binary_kl_loss(student: &Matrix, teacher: &Matrix, tau: f64, reduction: Reduction) -> Result<LossResult> {
    check_pair("binary_kl_loss", student, teacher, tau)?;
    let (b, k) = student.shape();
    let mut grad = Matrix::zeros(b, k);
    let mut value = 0.0;
    for i in 0..b {
        for j in 0..k {
            let (zs, zt) = (student[(i, j)] / tau, teacher[(i, j)] / tau);
            let (qs, qt) = (sigmoid_scalar(zs), sigmoid_scalar(zt));
            value += tau * tau * binary_kl_split(qt, sigmoid_scalar(-zt), qs, sigmoid_scalar(-zs));
            grad[(i, j)] = tau * (qs - qt);
        }
    }
    Ok(reduction.apply(value, grad))
}

/// BinaryKL-Norm: per logit, `τ² · KL([½, ½] ‖ [s, 1−s])` with
/// `s = σ((z_S − z_T)/τ)`. Gradient `τ (s − ½)`; depends on the logits only
/// through their difference.
pub fn binary_kl_norm_loss(student: &Matrix, teacher: &Matrix, tau: f64, reduction: Reduction) -> Result<LossResult> {
    check_pair("binary_kl_norm_loss", student, teacher, tau)?;
    let (b, k) = student.shape();
    let mut grad = Matrix::zeros(b, k);
    let mut value = 0.0;
    for i in 0..b {
        for j in 0..k {
            let u = (student[(i, j)] - teacher[(i, j)]) / tau;
            let s = sigmoid_scalar(u);
            value += tau * tau * binary_kl_split(0.5, 0.5, s, sigmoid_scalar(-u));
            grad[(i, j)] = tau * (s - 0.5);
        }
    }
    Ok(reduction.apply(value, grad))
}

/// `KL([p, 1−p] ‖ [q, 1−q])` with both probabilities clamped to
/// `[ε, 1−ε]` inside the logs. Exactly zero when `p == q`.
pub fn binary_kl(p: f64, q: f64) -> f64 {
    binary_kl_split(p, 1.0 - p, q, 1.0 - q)
}

/// [`binary_kl`] with the complements passed in, so callers holding
/// `σ(−x)` avoid the cancellation in `1 − σ(x)` near saturation.
fn binary_kl_split(p: f64, p_neg: f64, q: f64, q_neg: f64) -> f64 {
    let clamp = |x: f64| x.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let mut kl = 0.0;
    if p > 0.0 {
        kl += p * (clamp(p) / clamp(q)).ln();
    }
    if p_neg > 0.0 {
        kl += p_neg * (clamp(p_neg) / clamp(q_neg)).ln();
    }
    kl
}

fn check_pair(op: &'static str, student: &Matrix, teacher: &Matrix, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("{op}: temperature {tau} must be > 0")));
    }
    student.ensure_same_shape(teacher, op)?;
    student.check_finite(op)?;
    teacher.check_finite(op)
}
