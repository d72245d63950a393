//! Training objectives with analytic gradients with respect to the logits.
//!
//! Every loss reduces over the batch by the mean, so each gradient row carries
//! a `1/batch` factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::LabelDistribution;
use crate::numerics::{log_softmax, softmax_in_place, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct LossBundle {
    pub value: f64,
    pub grad: Matrix,
}

impl LossBundle {
    fn zeros(rows: usize, cols: usize) -> Self {
        LossBundle {
            value: 0.0,
            grad: Matrix::zeros(rows, cols),
        }
    }

    /// `self += factor · other`
    fn accumulate(&mut self, other: &LossBundle, factor: f64) -> Result<()> {
        self.value += factor * other.value;
        self.grad.add_scaled(&other.grad, factor)
    }
}

/// Training-set sample count per logit column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    counts: Vec<usize>,
}

impl ClassCounts {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if let Some(i) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class column {i} has no training samples")));
        }
        Ok(ClassCounts { counts })
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `γ = (N − 1) / N`
    pub fn gamma(&self) -> f64 {
        let n = self.counts.len() as f64;
        (n - 1.0) / n
    }

    pub fn weight(&self, column: usize) -> f64 {
        class_balanced_weight(self.counts[column], self.counts.len())
    }
}

/// Effective-number weight `(1 − γ) / (1 − γⁿ)` with `γ = (N − 1)/N`.
pub fn class_balanced_weight(samples: usize, num_classes: usize) -> f64 {
    if samples == 1 {
        return 1.0;
    }
    let n = num_classes as f64;
    let gamma = (n - 1.0) / n;
    (1.0 - gamma) / (1.0 - gamma.powi(samples as i32))
}

fn check_targets(logits: &Matrix, targets: &[usize]) -> Result<()> {
    if targets.len() != logits.rows() {
        return Err(Error::invalid(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logits.rows()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::invalid(format!("target {t} out of range for {} classes", logits.cols())));
    }
    if logits.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

/// Cross-entropy with a per-sample weight; gradient row `w (q − p) / B`.
fn weighted_cross_entropy(logits: &Matrix, targets: &[usize], weight: impl Fn(usize) -> f64) -> LossBundle {
    let batch = logits.rows() as f64;
    let mut out = LossBundle::zeros(logits.rows(), logits.cols());
    for (r, &t) in targets.iter().enumerate() {
        let w = weight(t);
        let row = logits.row(r);
        out.value -= w * log_softmax(row)[t];
        let g = out.grad.row_mut(r);
        g.copy_from_slice(row);
        softmax_in_place(g);
        g[t] -= 1.0;
        g.iter_mut().for_each(|v| *v *= w / batch);
    }
    out.value /= batch;
    out
}

/// Mean `−log softmax(z)[y]`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<LossBundle> {
    check_targets(logits, targets)?;
    Ok(weighted_cross_entropy(logits, targets, |_| 1.0))
}

/// Cross-entropy weighted by the ground-truth class's effective-number weight.
pub fn class_balanced(logits: &Matrix, targets: &[usize], counts: &ClassCounts) -> Result<LossBundle> {
    check_targets(logits, targets)?;
    if counts.len() != logits.cols() {
        return Err(Error::invalid(format!(
            "class counts cover {} classes, logits have {}",
            counts.len(),
            logits.cols()
        )));
    }
    Ok(weighted_cross_entropy(logits, targets, |t| counts.weight(t)))
}

/// Soft cross-entropy between the tempered teacher and student softmax over the
/// first `n_old` columns. Columns beyond `n_old` get zero gradient.
pub fn distillation(student: &Matrix, teacher: &Matrix, temperature: f64, n_old: usize) -> Result<LossBundle> {
    if n_old == 0 {
        return Err(Error::invalid("distillation needs at least one old class"));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::invalid(format!("temperature must be > 0, got {temperature}")));
    }
    if teacher.cols() != n_old || student.cols() < n_old || teacher.rows() != student.rows() {
        return Err(Error::invalid(format!(
            "distillation shapes: student {:?}, teacher {:?}, n_old {n_old}",
            student.shape(),
            teacher.shape()
        )));
    }
    if student.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let batch = student.rows() as f64;
    let mut out = LossBundle::zeros(student.rows(), student.cols());
    let mut t_soft = vec![0.0; n_old];
    let mut s_scaled = vec![0.0; n_old];
    for r in 0..student.rows() {
        for (dst, &z) in t_soft.iter_mut().zip(teacher.row(r)) {
            *dst = z / temperature;
        }
        softmax_in_place(&mut t_soft);
        for (dst, &z) in s_scaled.iter_mut().zip(&student.row(r)[..n_old]) {
            *dst = z / temperature;
        }
        let log_s = log_softmax(&s_scaled);
        out.value -= t_soft.iter().zip(&log_s).map(|(p, l)| p * l).sum::<f64>();
        let g = &mut out.grad.row_mut(r)[..n_old];
        for ((g, &ls), &pt) in g.iter_mut().zip(&log_s).zip(&t_soft) {
            *g = (ls.exp() - pt) / (temperature * batch);
        }
    }
    out.value /= batch;
    Ok(out)
}

/// `KL(Y ‖ softmax(z))` per row, averaged; gradient row `(q − Y) / B`.
pub fn multi_granularity(logits: &Matrix, soft_targets: &Matrix) -> Result<LossBundle> {
    if soft_targets.shape() != logits.shape() {
        return Err(Error::invalid(format!(
            "soft targets {:?} do not match logits {:?}",
            soft_targets.shape(),
            logits.shape()
        )));
    }
    if logits.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    for (r, y) in soft_targets.row_iter().enumerate() {
        let sum: f64 = y.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || y.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid(format!("soft target row {r} is not a distribution (sum {sum})")));
        }
    }
    let batch = logits.rows() as f64;
    let mut out = LossBundle::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let y = soft_targets.row(r);
        let log_q = log_softmax(logits.row(r));
        out.value += y
            .iter()
            .zip(&log_q)
            .filter(|(&yj, _)| yj > 0.0)
            .map(|(&yj, &lq)| yj * (yj.ln() - lq))
            .sum::<f64>();
        for ((g, &lq), &yj) in out.grad.row_mut(r).iter_mut().zip(&log_q).zip(y) {
            *g = (lq.exp() - yj) / batch;
        }
    }
    out.value /= batch;
    Ok(out)
}

/// Stacks one distribution per batch row into a target matrix.
pub fn soft_target_matrix(targets: &[LabelDistribution]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = targets.iter().map(|d| d.values.as_slice()).collect();
    Matrix::from_rows(&rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassificationLoss {
    CrossEntropy,
    ClassBalanced,
}

/// Which terms of the combined objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub classification: ClassificationLoss,
    pub distillation: bool,
    pub multi_granularity: bool,
}

/// How `λ` is split between the classification and distillation terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaAssignment {
    /// `λ·L_cls + α(1 − λ)·L_D`
    #[default]
    ClassificationLambda,
    /// `(1 − λ)·L_cls + αλ·L_D`
    DistillationLambda,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombineWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub temperature: f64,
    pub beta: f64,
    pub assignment: LambdaAssignment,
}

impl CombineWeights {
    /// `λ = N_old / (N_old + N_new)`
    pub fn default_lambda(n_old: usize, n_new: usize) -> f64 {
        n_old as f64 / (n_old + n_new) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        for (name, v) in [("alpha", self.alpha), ("temperature", self.temperature), ("beta", self.beta)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Coefficients `(classification, distillation)` for a phase with a teacher.
    pub fn coefficients(&self) -> (f64, f64) {
        match self.assignment {
            LambdaAssignment::ClassificationLambda => (self.lambda, self.alpha * (1.0 - self.lambda)),
            LambdaAssignment::DistillationLambda => (1.0 - self.lambda, self.alpha * self.lambda),
        }
    }
}

/// Inputs to [`combined`] for one batch.
pub struct CombinedInputs<'a> {
    pub logits: &'a Matrix,
    /// Teacher logits over the old classes; `None` in the initial phase.
    pub teacher_logits: Option<&'a Matrix>,
    pub targets: &'a [usize],
    pub counts: &'a ClassCounts,
    /// One soft label row per sample; required when the MG term is active.
    pub soft_targets: Option<&'a Matrix>,
}

/// Overall objective `λ·L_cls + α(1 − λ)·L_D + L_H`.
///
/// Without a teacher (initial phase) or with distillation switched off the
/// classification term carries weight 1 and there is no distillation term.
pub fn combined(inputs: &CombinedInputs<'_>, weights: &CombineWeights, terms: &LossTerms) -> Result<LossBundle> {
    let logits = inputs.logits;
    let classification = match terms.classification {
        ClassificationLoss::CrossEntropy => cross_entropy(logits, inputs.targets)?,
        ClassificationLoss::ClassBalanced => class_balanced(logits, inputs.targets, inputs.counts)?,
    };
    let mut total = LossBundle::zeros(logits.rows(), logits.cols());
    match (terms.distillation, inputs.teacher_logits) {
        (true, Some(teacher)) => {
            let (cls_w, kd_w) = weights.coefficients();
            total.accumulate(&classification, cls_w)?;
            let kd = distillation(logits, teacher, weights.temperature, teacher.cols())?;
            total.accumulate(&kd, kd_w)?;
        }
        _ => total.accumulate(&classification, 1.0)?,
    }
    if terms.multi_granularity {
        let soft = inputs
            .soft_targets
            .ok_or_else(|| Error::invalid("multi-granularity term needs soft targets"))?;
        total.accumulate(&multi_granularity(logits, soft)?, 1.0)?;
    }
    Ok(total)
}
