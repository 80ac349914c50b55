//! The distillation loss family: vanilla logits KD, FitNet-style hint loss,
//! the target-decoupled reformulation, and the OFA loss with its modulating
//! parameter, plus the multi-exit training objective.
//!
//! All losses are pure functions of their inputs and a [`LossConfig`];
//! teacher-side quantities are treated as constants (no gradient flows to
//! the teacher).

use serde::{Deserialize, Serialize};

use crate::tensor::{Elem, Tensor};
use crate::{Error, Result};

/// Hyperparameter record for any distillation loss.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    /// Trade-off between hard-label cross-entropy and the KL term in
    /// [`kd_loss`]; must lie in [0,1].
    pub lambda: f64,
    /// Modulating exponent on the target-class term of [`ofa_loss`];
    /// must be >= 1. Need not be an integer.
    pub gamma: f64,
    /// Softmax temperature applied to both student and teacher logits.
    /// Default 1 recovers the losses exactly as written.
    pub temperature: f64,
    /// Scaling factor multiplied into the final loss value.
    pub scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            gamma: 1.0,
            temperature: 1.0,
            scale: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0,1], got {}", self.lambda)));
        }
        if self.gamma < 1.0 {
            return Err(Error::Config(format!("gamma must be >= 1, got {}", self.gamma)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.scale <= 0.0 {
            return Err(Error::Config(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }
}

/// Per-sample class-probability vector with its ground-truth target class.
#[derive(Debug, Clone)]
pub struct ProbVector {
    pub probs: Vec<f64>,
    pub target: usize,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>, target: usize) -> Result<Self> {
        validate_prob_row(&probs, target)?;
        Ok(ProbVector { probs, target })
    }
}

fn validate_prob_row(row: &[f64], target: usize) -> Result<()> {
    if target >= row.len() {
        return Err(Error::Config(format!(
            "target class {target} out of range for {} classes",
            row.len()
        )));
    }
    if row.iter().any(|&p| p < 0.0) {
        return Err(Error::Config("probabilities must be non-negative".into()));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("probabilities sum to {s}, expected 1")));
    }
    Ok(())
}

/// A transform applied to a student feature before hint matching.
pub trait FeatureProjector<T: Elem> {
    fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Pass-through projector for pre-aligned features.
pub struct IdentityProjector;

impl<T: Elem> FeatureProjector<T> for IdentityProjector {
    fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.reshape(x.shape())
    }
}

fn check_logits<T: Elem>(
    op: &'static str,
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(usize, usize)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op,
            details: format!("expected [batch, classes] logits, got {:?}", shape),
        });
    }
    let (b, c) = (shape[0], shape[1]);
    if labels.len() != b {
        return Err(Error::Shape {
            op,
            details: format!("{} labels for batch of {b}", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Config(format!("label {bad} out of range for {c} classes")));
    }
    Ok((b, c))
}

fn one_hot<T: Elem>(labels: &[usize], classes: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = T::one();
    }
    Tensor::raw(vec![labels.len(), classes], data)
}

/// Teacher probabilities at the configured temperature, detached from any
/// gradient history.
pub fn teacher_probs<T: Elem>(teacher_logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    teacher_logits.detach().softmax(T::of_f64(temperature))
}

/// Mean cross-entropy of logits against hard labels.
pub fn cross_entropy<T: Elem>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (_, c) = check_logits("cross_entropy", logits, labels)?;
    let logp = logits.log_softmax(T::one())?;
    logp.mul(&one_hot(labels, c))?.sum_axis(1)?.neg()?.mean_all()
}

/// Logits distillation loss: `scale * mean[lambda*CE(p_s, y) +
/// (1-lambda)*KL(p_t || p_s)]`, probabilities at `cfg.temperature`.
pub fn kd_loss<T: Elem>(
    student_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let (b, c) = check_logits("kd_loss", student_logits, labels)?;
    if teacher_logits.shape() != vec![b, c] {
        return Err(Error::Shape {
            op: "kd_loss",
            details: format!(
                "student {:?} vs teacher {:?}",
                student_logits.shape(),
                teacher_logits.shape()
            ),
        });
    }
    let tau = T::of_f64(cfg.temperature);
    let logp_s = student_logits.log_softmax(tau)?;
    let p_t = teacher_probs(teacher_logits, cfg.temperature)?;

    // CE against hard labels (student temperature applied uniformly).
    let ce = logp_s.mul(&one_hot(labels, c))?.sum_axis(1)?.neg()?.mean_all()?;

    // KL(p_t || p_s) = -H(p_t) - sum p_t * log p_s; the entropy term is a
    // constant computed outside the graph.
    let cross = logp_s.mul(&p_t)?.sum_axis(1)?.neg()?;
    let mut neg_entropy = vec![T::zero(); b];
    {
        let ptd = p_t.data();
        for (i, row) in ptd.chunks_exact(c).enumerate() {
            let mut acc = T::zero();
            for &p in row {
                if p > T::zero() {
                    acc += p * p.ln();
                }
            }
            neg_entropy[i] = acc;
        }
    }
    let kl = cross
        .add(&Tensor::raw(vec![b], neg_entropy))?
        .mean_all()?;

    let lam = T::of_f64(cfg.lambda);
    ce.scale(lam)?
        .add(&kl.scale(T::one() - lam)?)?
        .scale(T::of_f64(cfg.scale))
}

/// FitNet-style hint loss: sum over layers of the per-sample L2 distance
/// between teacher features and projected student features, batch-meaned.
pub fn hint_loss<T: Elem>(
    student_feats: &[Tensor<T>],
    teacher_feats: &[Tensor<T>],
    projectors: &[&dyn FeatureProjector<T>],
) -> Result<Tensor<T>> {
    if student_feats.len() != teacher_feats.len() || student_feats.len() != projectors.len() {
        return Err(Error::Shape {
            op: "hint_loss",
            details: format!(
                "list lengths differ: {} student, {} teacher, {} projectors",
                student_feats.len(),
                teacher_feats.len(),
                projectors.len()
            ),
        });
    }
    let mut total: Option<Tensor<T>> = None;
    for ((fs, ft), proj) in student_feats.iter().zip(teacher_feats).zip(projectors) {
        let projected = proj.project(fs)?;
        if projected.shape() != ft.shape() {
            return Err(Error::Shape {
                op: "hint_loss",
                details: format!(
                    "projected student {:?} vs teacher {:?}",
                    projected.shape(),
                    ft.shape()
                ),
            });
        }
        let batch = projected.shape()[0];
        let flat = projected.len() / batch;
        let diff = ft.detach().sub(&projected)?.reshape(vec![batch, flat])?;
        let term = diff.l2_norm(Some(1))?.mean_all()?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Shape {
        op: "hint_loss",
        details: "empty feature lists".into(),
    })
}

// Per-class loss weights shared by the reformulated KD loss and the OFA
// loss: p_t for non-target classes, f(p_t_target) for the target class.
fn decoupled_weights<T: Elem>(
    op: &'static str,
    student_logits: &Tensor<T>,
    teacher_probs: &Tensor<T>,
    targets: &[usize],
    target_coeff: impl Fn(f64) -> f64,
) -> Result<Tensor<T>> {
    let (b, c) = check_logits(op, student_logits, targets)?;
    if teacher_probs.shape() != vec![b, c] {
        return Err(Error::Shape {
            op,
            details: format!(
                "student {:?} vs teacher probs {:?}",
                student_logits.shape(),
                teacher_probs.shape()
            ),
        });
    }
    let ptd = teacher_probs.data();
    let mut weights = vec![T::zero(); b * c];
    for i in 0..b {
        let row: Vec<f64> = ptd[i * c..(i + 1) * c].iter().map(|p| p.as_f64()).collect();
        validate_prob_row(&row, targets[i])?;
        for j in 0..c {
            weights[i * c + j] = if j == targets[i] {
                T::of_f64(target_coeff(row[j]))
            } else {
                T::of_f64(row[j])
            };
        }
    }
    Ok(Tensor::raw(vec![b, c], weights))
}

/// Target-decoupled KD loss: per sample
/// `-(1 + p_t_target) * log p_s_target - sum_{c != target} p_t_c * log p_s_c`,
/// batch-meaned. Log-probabilities come from log-softmax, never `log(softmax)`.
pub fn kd_loss_reformulated<T: Elem>(
    student_logits: &Tensor<T>,
    teacher_probs: &Tensor<T>,
    targets: &[usize],
) -> Result<Tensor<T>> {
    let w = decoupled_weights(
        "kd_loss_reformulated",
        student_logits,
        teacher_probs,
        targets,
        |p| 1.0 + p,
    )?;
    let logp = student_logits.log_softmax(T::one())?;
    logp.mul(&w)?.sum_axis(1)?.neg()?.mean_all()
}

/// OFA loss: the reformulated KD loss with the target coefficient raised to
/// the modulating exponent gamma, batch-meaned and multiplied by `cfg.scale`.
pub fn ofa_loss<T: Elem>(
    student_logits: &Tensor<T>,
    teacher_probs: &Tensor<T>,
    targets: &[usize],
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let w = decoupled_weights("ofa_loss", student_logits, teacher_probs, targets, |p| {
        (1.0 + p).powf(cfg.gamma)
    })?;
    let logp = student_logits.log_softmax(T::of_f64(cfg.temperature))?;
    logp.mul(&w)?
        .sum_axis(1)?
        .neg()?
        .mean_all()?
        .scale(T::of_f64(cfg.scale))
}

/// Multi-exit training objective: the arithmetic mean of [`ofa_loss`] over
/// every exit (each branch plus the final head), all against the same
/// teacher probabilities and ground-truth targets. With zero branches this
/// is exactly the OFA loss on the final logits.
pub fn distillation_objective<T: Elem>(
    branch_logits: &[Tensor<T>],
    final_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let p_t = teacher_probs(teacher_logits, cfg.temperature)?;
    let mut exits: Vec<&Tensor<T>> = branch_logits.iter().collect();
    exits.push(final_logits);
    let k = exits.len();
    let mut total: Option<Tensor<T>> = None;
    for logits in exits {
        let term = ofa_loss(logits, &p_t, labels, cfg)?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    total.unwrap().scale(T::of_f64(1.0 / k as f64))
}

/// Per-exit OFA losses (diagnostics for the metrics log).
pub fn per_exit_losses<T: Elem>(
    branch_logits: &[Tensor<T>],
    final_logits: &Tensor<T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    let p_t = teacher_probs(teacher_logits, cfg.temperature)?;
    let mut out = Vec::with_capacity(branch_logits.len() + 1);
    for logits in branch_logits.iter().chain(std::iter::once(final_logits)) {
        out.push(ofa_loss(&logits.detach(), &p_t, labels, cfg)?.item()?.as_f64());
    }
    Ok(out)
}
