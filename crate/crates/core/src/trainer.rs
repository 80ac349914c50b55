//! Training loops: teacher pretraining with plain cross-entropy, student
//! distillation through exit branches, gradient clipping by global norm,
//! evaluation, and single-axis ablation sweeps. Every run is fully
//! determined by its [`RunManifest`].

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset};
use crate::losses::{
    self, cross_entropy, distillation_objective, per_exit_losses, LossConfig,
};
use crate::nn::{
    self, attach_branches, build_model, load_model, strip_branches, BranchedModel, Family,
    ModelConfig, StagedModel,
};
use crate::tensor::{no_grad, Elem, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    MomentumSgd {
        momentum: f64,
    },
    DecoupledWeightDecayAdaptive {
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Cosine learning-rate decay over epochs; constant schedule when false.
    pub cosine: bool,
}

impl OptimizerConfig {
    pub fn momentum_sgd() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::MomentumSgd { momentum: 0.9 },
            learning_rate: 0.05,
            weight_decay: 5e-4,
            epochs: 40,
            cosine: true,
        }
    }

    pub fn adaptive() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::DecoupledWeightDecayAdaptive {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate: 1e-3,
            weight_decay: 0.05,
            epochs: 40,
            cosine: true,
        }
    }

    /// Family rule: momentum SGD for CNNs, the decoupled-weight-decay
    /// adaptive optimizer for token models.
    pub fn for_family(family: Family) -> Self {
        match family {
            Family::Cnn => Self::momentum_sgd(),
            _ => Self::adaptive(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine {
            let t = epoch as f64 / self.epochs as f64;
            self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.learning_rate
        }
    }
}

/// Complete description of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub model: ModelConfig,
    /// Required for distillation; unused for teacher pretraining.
    pub teacher_checkpoint: Option<PathBuf>,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Exit-branch stage indices; empty trains the final head alone.
    pub branches: Vec<usize>,
    pub clip_norm: Option<f64>,
    /// Directory holding `train.ofad` and `test.ofad`.
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub batch_size: usize,
}

impl RunManifest {
    pub fn new(model: ModelConfig, dataset: PathBuf, out_dir: PathBuf) -> Self {
        let optimizer = OptimizerConfig::for_family(model.family);
        RunManifest {
            seed: model.seed,
            model,
            teacher_checkpoint: None,
            loss: LossConfig::default(),
            optimizer,
            branches: Vec::new(),
            clip_norm: Some(5.0),
            dataset,
            out_dir,
            batch_size: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let train = data::load(&self.dataset.join("train.ofad"))?;
        let test = data::load(&self.dataset.join("test.ofad"))?;
        Ok((train, test))
    }
}

/// One epoch record of the JSON-lines metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub exit_losses: Vec<f64>,
    pub grad_scale_min: f64,
}

pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint_dir: PathBuf,
    pub final_test_acc: f64,
}

/// Scale all gradients by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`; returns the applied scale (1 when untouched).
pub fn clip_gradients<T: Elem>(params: &[(String, Tensor<T>)], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in params {
        if let Some(g) = p.grad() {
            sq += g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm <= max_norm {
        return 1.0;
    }
    let scale = max_norm / norm;
    let s = T::of_f64(scale);
    for (_, p) in params {
        if let Some(g) = p.grad_mut().as_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    scale
}

fn global_grad_norm<T: Elem>(params: &[(String, Tensor<T>)]) -> f64 {
    params
        .iter()
        .filter_map(|(_, p)| p.grad())
        .map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Per-parameter optimizer state; updates happen in place.
pub struct Optimizer<T: Elem> {
    cfg: OptimizerConfig,
    params: Vec<(String, Tensor<T>)>,
    // MomentumSgd: one buffer per param. Adaptive: first and second moments.
    buf1: Vec<Vec<f64>>,
    buf2: Vec<Vec<f64>>,
    steps: usize,
}

impl<T: Elem> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, params: Vec<(String, Tensor<T>)>) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, p)| p.len()).collect();
        Optimizer {
            buf1: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            buf2: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            cfg,
            params,
            steps: 0,
        }
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn zero_grads(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Apply one update with the given learning rate; parameters without a
    /// gradient are skipped. Accumulator arithmetic runs in f64.
    pub fn step(&mut self, lr: f64) {
        self.steps += 1;
        let wd = self.cfg.weight_decay;
        for (i, (_, p)) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut data = p.data_mut();
            match self.cfg.kind {
                OptimizerKind::MomentumSgd { momentum } => {
                    let buf = &mut self.buf1[i];
                    for (j, g) in grad.iter().enumerate() {
                        let g = g.as_f64() + wd * data[j].as_f64();
                        buf[j] = momentum * buf[j] + g;
                        data[j] = T::of_f64(data[j].as_f64() - lr * buf[j]);
                    }
                }
                OptimizerKind::DecoupledWeightDecayAdaptive { beta1, beta2, eps } => {
                    let bc1 = 1.0 - beta1.powi(self.steps as i32);
                    let bc2 = 1.0 - beta2.powi(self.steps as i32);
                    let (m, v) = (&mut self.buf1[i], &mut self.buf2[i]);
                    for (j, g) in grad.iter().enumerate() {
                        let g = g.as_f64();
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps)
                            + wd * data[j].as_f64();
                        data[j] = T::of_f64(data[j].as_f64() - lr * update);
                    }
                }
            }
        }
    }
}

fn write_metrics(out_dir: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut f = fs::File::create(out_dir.join("metrics.jsonl"))?;
    for m in metrics {
        writeln!(f, "{}", serde_json::to_string(m)?)?;
    }
    Ok(())
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(epoch as u64)
}

/// Top-1 accuracy and mean cross-entropy of a logits function over a split.
pub fn evaluate_logits<T: Elem>(
    logits_fn: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    no_grad(|| {
        let mut correct = 0usize;
        let mut loss_sum = 0.0f64;
        for batch in ds.batches(batch_size, 0, false)? {
            let (x, labels) = ds.gather::<T>(&batch)?;
            let logits = logits_fn(&x)?;
            let pred = logits.argmax_rows()?;
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            loss_sum += cross_entropy(&logits, &labels)?.item()?.as_f64() * labels.len() as f64;
        }
        Ok((
            correct as f64 / ds.len() as f64,
            loss_sum / ds.len() as f64,
        ))
    })
}

pub fn evaluate<T: Elem>(
    model: &StagedModel<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64)> {
    evaluate_logits(|x| model.forward(x), ds, batch_size)
}

/// Train a model from scratch with plain cross-entropy. Writes a checkpoint
/// under `out_dir/checkpoint` and JSON-lines metrics under `out_dir`.
pub fn pretrain_teacher<T: Elem>(manifest: &RunManifest) -> Result<TrainReport> {
    manifest.validate()?;
    let (train, test) = manifest.load_datasets()?;
    let model = build_model::<T>(&manifest.model)?;
    let mut opt = Optimizer::new(manifest.optimizer.clone(), model.params());
    let mut metrics = Vec::new();
    for epoch in 0..manifest.optimizer.epochs {
        let lr = manifest.optimizer.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut scale_min = 1.0f64;
        let batches = train.batches(
            manifest.batch_size,
            epoch_shuffle_seed(manifest.seed, epoch),
            true,
        )?;
        let n_batches = batches.len();
        for (bi, batch) in batches.into_iter().enumerate() {
            let mut step = || -> Result<f64> {
                let (x, labels) = train.gather::<T>(&batch)?;
                let loss = cross_entropy(&model.forward(&x)?, &labels)?;
                let value = loss.item()?.as_f64();
                opt.zero_grads();
                loss.backward()?;
                if let Some(max) = manifest.clip_norm {
                    let s = clip_gradients(opt.params(), max);
                    scale_min = scale_min.min(s);
                    assert!(global_grad_norm(opt.params()) <= max + 1e-6);
                }
                opt.step(lr);
                Ok(value)
            };
            loss_sum += step().map_err(|e| {
                Error::Training(format!("epoch {epoch} batch {bi}: {e}"))
            })?;
        }
        let (test_acc, _) = evaluate(&model, &test, manifest.batch_size)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            test_acc,
            exit_losses: Vec::new(),
            grad_scale_min: scale_min,
        });
    }
    write_metrics(&manifest.out_dir, &metrics)?;
    let checkpoint_dir = manifest.out_dir.join("checkpoint");
    nn::save_model(&model, &checkpoint_dir)?;
    fs::write(
        manifest.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    let final_test_acc = metrics.last().map(|m| m.test_acc).unwrap_or(0.0);
    Ok(TrainReport {
        metrics,
        checkpoint_dir,
        final_test_acc,
    })
}

/// Distill a student against a frozen teacher checkpoint, training every
/// exit branch jointly with the backbone. Branches are stripped before the
/// final checkpoint is written.
pub fn distill<T: Elem>(manifest: &RunManifest) -> Result<TrainReport> {
    manifest.validate()?;
    let teacher_dir = manifest
        .teacher_checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("distill requires a teacher checkpoint".into()))?;
    let teacher = load_model::<T>(teacher_dir)?;
    if teacher.config.class_count != manifest.model.class_count {
        return Err(Error::Config(format!(
            "teacher has {} classes, student {}",
            teacher.config.class_count, manifest.model.class_count
        )));
    }
    let (train, test) = manifest.load_datasets()?;
    let student = build_model::<T>(&manifest.model)?;
    let branched = if manifest.branches.is_empty() {
        BranchedModel {
            backbone: student,
            branches: Vec::new(),
        }
    } else {
        attach_branches(student, &manifest.branches)?
    };
    let mut opt = Optimizer::new(manifest.optimizer.clone(), branched.params());
    let mut metrics = Vec::new();
    let exits = branched.branches.len() + 1;
    for epoch in 0..manifest.optimizer.epochs {
        let lr = manifest.optimizer.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut exit_sums = vec![0.0f64; exits];
        let mut scale_min = 1.0f64;
        let batches = train.batches(
            manifest.batch_size,
            epoch_shuffle_seed(manifest.seed, epoch),
            true,
        )?;
        let n_batches = batches.len();
        for (bi, batch) in batches.into_iter().enumerate() {
            let mut step = || -> Result<f64> {
                let (x, labels) = train.gather::<T>(&batch)?;
                let teacher_logits = no_grad(|| teacher.forward(&x))?;
                let (branch_logits, final_logits) = branched.forward_all(&x)?;
                let loss = distillation_objective(
                    &branch_logits,
                    &final_logits,
                    &teacher_logits,
                    &labels,
                    &manifest.loss,
                )?;
                let value = loss.item()?.as_f64();
                for (acc, v) in exit_sums.iter_mut().zip(per_exit_losses(
                    &branch_logits,
                    &final_logits,
                    &teacher_logits,
                    &labels,
                    &manifest.loss,
                )?) {
                    *acc += v;
                }
                opt.zero_grads();
                loss.backward()?;
                if let Some(max) = manifest.clip_norm {
                    let s = clip_gradients(opt.params(), max);
                    scale_min = scale_min.min(s);
                    assert!(global_grad_norm(opt.params()) <= max + 1e-6);
                }
                opt.step(lr);
                Ok(value)
            };
            loss_sum += step().map_err(|e| {
                Error::Training(format!("epoch {epoch} batch {bi}: {e}"))
            })?;
        }
        let (test_acc, _) = evaluate(&branched.backbone, &test, manifest.batch_size)?;
        metrics.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            test_acc,
            exit_losses: exit_sums.iter().map(|s| s / n_batches as f64).collect(),
            grad_scale_min: scale_min,
        });
    }
    write_metrics(&manifest.out_dir, &metrics)?;
    let stripped = strip_branches(branched);
    let checkpoint_dir = manifest.out_dir.join("checkpoint");
    nn::save_model(&stripped, &checkpoint_dir)?;
    fs::write(
        manifest.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)?,
    )?;
    let final_test_acc = metrics.last().map(|m| m.test_acc).unwrap_or(0.0);
    Ok(TrainReport {
        metrics,
        checkpoint_dir,
        final_test_acc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Branches,
    Gamma,
    Scale,
    Clip,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branches" => Ok(AblationAxis::Branches),
            "gamma" => Ok(AblationAxis::Gamma),
            "scale" => Ok(AblationAxis::Scale),
            "clip" => Ok(AblationAxis::Clip),
            other => Err(Error::Config(format!("unknown ablation axis {other:?}"))),
        }
    }
}

/// Settings for one ablation axis.
#[derive(Debug, Clone)]
pub enum AxisValues {
    Branches(Vec<Vec<usize>>),
    Gamma(Vec<f64>),
    Scale(Vec<f64>),
    Clip(Vec<f64>),
}

impl AxisValues {
    pub fn default_for(axis: AblationAxis) -> Self {
        match axis {
            AblationAxis::Branches => AxisValues::Branches(vec![
                vec![],
                vec![1],
                vec![2],
                vec![3],
                vec![4],
                vec![1, 4],
                vec![1, 2, 4],
                vec![1, 2, 3, 4],
            ]),
            AblationAxis::Gamma => AxisValues::Gamma(vec![1.0, 1.1, 1.2, 1.3, 1.4, 1.5]),
            AblationAxis::Scale => AxisValues::Scale(vec![0.5, 0.8, 1.0, 1.2, 1.4, 1.6]),
            AblationAxis::Clip => AxisValues::Clip(vec![1.0, 3.0, 4.0, 5.0, 6.0, 7.0]),
        }
    }

    fn settings(&self) -> Vec<String> {
        match self {
            AxisValues::Branches(v) => v
                .iter()
                .map(|s| {
                    if s.is_empty() {
                        "none".to_string()
                    } else {
                        s.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("+")
                    }
                })
                .collect(),
            AxisValues::Gamma(v) | AxisValues::Scale(v) | AxisValues::Clip(v) => {
                v.iter().map(|x| x.to_string()).collect()
            }
        }
    }

    fn apply(&self, idx: usize, m: &mut RunManifest) {
        match self {
            AxisValues::Branches(v) => m.branches = v[idx].clone(),
            AxisValues::Gamma(v) => m.loss.gamma = v[idx],
            AxisValues::Scale(v) => m.loss.scale = v[idx],
            AxisValues::Clip(v) => m.clip_norm = Some(v[idx]),
        }
    }

    fn len(&self) -> usize {
        match self {
            AxisValues::Branches(v) => v.len(),
            AxisValues::Gamma(v) | AxisValues::Scale(v) | AxisValues::Clip(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub setting: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Per setting: (label, mean accuracy, standard deviation).
    pub summary: Vec<(String, f64, f64)>,
}

impl AblationTable {
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("setting,seed,accuracy\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.6}", r.setting, r.seed, r.accuracy);
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("setting,mean,std\n");
        for (s, m, sd) in &self.summary {
            let _ = writeln!(out, "{s},{m:.6},{sd:.6}");
        }
        out
    }
}

/// One distillation per setting per seed along a single axis; results land
/// under `out_dir/<setting>/<seed>/` and as CSV tables in `out_dir`.
pub fn ablate<T: Elem>(
    base: &RunManifest,
    axis: AblationAxis,
    values: Option<AxisValues>,
    seeds: &[u64],
) -> Result<AblationTable> {
    let values = values.unwrap_or_else(|| AxisValues::default_for(axis));
    if seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed".into()));
    }
    let labels = values.settings();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for idx in 0..values.len() {
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut m = base.clone();
            values.apply(idx, &mut m);
            m.seed = seed;
            m.model.seed = seed;
            m.out_dir = base.out_dir.join(&labels[idx]).join(seed.to_string());
            let report = distill::<T>(&m)?;
            accs.push(report.final_test_acc);
            rows.push(AblationRow {
                setting: labels[idx].clone(),
                seed,
                accuracy: report.final_test_acc,
            });
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let var = accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / accs.len() as f64;
        summary.push((labels[idx].clone(), mean, var.sqrt()));
    }
    let table = AblationTable { rows, summary };
    fs::create_dir_all(&base.out_dir)?;
    fs::write(base.out_dir.join("results.csv"), table.rows_csv())?;
    fs::write(base.out_dir.join("summary.csv"), table.summary_csv())?;
    Ok(table)
}

/// Convenience wrapper for losses-module hint experiments: a linear map
/// from flattened student features to flattened teacher features.
pub struct LinearProjector<T: Elem> {
    pub linear: nn::layers::Linear<T>,
}

impl<T: Elem> losses::FeatureProjector<T> for LinearProjector<T> {
    fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.shape()[0];
        self.linear.forward(&x.reshape(vec![n, x.len() / n])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SyntheticSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn tiny_model(seed: u64) -> ModelConfig {
        ModelConfig {
            widths: [4, 4, 8, 8],
            ..ModelConfig::cnn(2, seed)
        }
    }

    // Writes a tiny 2-class dataset and returns (tempdir, data dir).
    fn tiny_data() -> (TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            class_count: 2,
            train_per_class: 8,
            test_per_class: 4,
            shape_vocabulary: vec![0, 1],
            ..SyntheticSpec::default()
        };
        let (train, test) = crate::data::generate(&spec).unwrap();
        crate::data::save(&train, &dir.path().join("train.ofad")).unwrap();
        crate::data::save(&test, &dir.path().join("test.ofad")).unwrap();
        let path = dir.path().to_path_buf();
        (dir, path)
    }

    fn tiny_manifest(data: &Path, out: &Path, epochs: usize) -> RunManifest {
        let mut m = RunManifest::new(tiny_model(0), data.to_path_buf(), out.to_path_buf());
        m.optimizer.epochs = epochs;
        m.batch_size = 8;
        m
    }

    #[test]
    fn one_epoch_writes_one_metrics_record() {
        let (_g, data) = tiny_data();
        let out = tempfile::tempdir().unwrap();
        let m = tiny_manifest(&data, out.path(), 1);
        let report = pretrain_teacher::<f32>(&m).unwrap();
        assert_eq!(report.metrics.len(), 1);
        let text = fs::read_to_string(out.path().join("metrics.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 1);
        let rec: EpochMetrics = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.epoch, 0);
        assert!(rec.train_loss.is_finite());
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (_g, data) = tiny_data();
        for opt in [OptimizerConfig::momentum_sgd(), OptimizerConfig::adaptive()] {
            let out = tempfile::tempdir().unwrap();
            let mut m = tiny_manifest(&data, out.path(), 1);
            m.optimizer = OptimizerConfig {
                learning_rate: 0.0,
                epochs: 1,
                ..opt
            };
            pretrain_teacher::<f64>(&m).unwrap();
            let trained = load_model::<f64>(&out.path().join("checkpoint")).unwrap();
            let fresh = build_model::<f64>(&m.model).unwrap();
            for ((_, a), (_, b)) in trained.params().iter().zip(fresh.params().iter()) {
                assert_eq!(a.to_vec(), b.to_vec());
            }
        }
    }

    #[test]
    fn pretraining_is_deterministic_in_f64() {
        let (_g, data) = tiny_data();
        let run = || {
            let out = tempfile::tempdir().unwrap();
            let m = tiny_manifest(&data, out.path(), 2);
            pretrain_teacher::<f64>(&m).unwrap();
            (
                fs::read_to_string(out.path().join("metrics.jsonl")).unwrap(),
                load_model::<f64>(&out.path().join("checkpoint"))
                    .unwrap()
                    .params()
                    .iter()
                    .flat_map(|(_, p)| p.to_vec())
                    .collect::<Vec<f64>>(),
            )
        };
        let (ma, pa) = run();
        let (mb, pb) = run();
        assert_eq!(ma, mb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn clip_hand_examples() {
        // a single parameter with gradient [6, 8]: norm 10
        let p = Tensor::<f64>::zeros(vec![2]);
        p.set_requires_grad(true);
        *p.grad_mut() = Some(vec![6.0, 8.0]);
        let params = vec![("p".to_string(), p.clone())];
        assert_eq!(clip_gradients(&params, 5.0), 0.5);
        assert_eq!(p.grad().unwrap(), vec![3.0, 4.0]);
        // norm 1 under max 5: untouched
        *p.grad_mut() = Some(vec![0.6, 0.8]);
        assert_eq!(clip_gradients(&params, 5.0), 1.0);
        assert_eq!(p.grad().unwrap(), vec![0.6, 0.8]);
    }

    #[test]
    fn clip_post_norm_matches_independent_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let params: Vec<(String, Tensor<f64>)> = (0..3)
                .map(|i| {
                    let p = Tensor::<f64>::zeros(vec![5]);
                    p.set_requires_grad(true);
                    *p.grad_mut() = Some(Tensor::<f64>::randn(vec![5], &mut rng).to_vec());
                    (format!("p{i}"), p)
                })
                .collect();
            let max = 1.5;
            let scale = clip_gradients(&params, max);
            let norm: f64 = params
                .iter()
                .map(|(_, p)| p.grad().unwrap().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if scale < 1.0 {
                assert!((norm - max).abs() <= 1e-10, "post-clip norm {norm}");
            } else {
                assert!(norm <= max);
            }
        }
    }

    #[test]
    fn evaluate_memorizing_and_constant_models() {
        let (_g, data) = tiny_data();
        let train = crate::data::load(&data.join("train.ofad")).unwrap();
        // memorizing oracle: logits straight from the true labels
        let labels = train.labels.clone();
        let idx = std::cell::Cell::new(0usize);
        let (acc, _) = evaluate_logits::<f64>(
            |x| {
                let b = x.shape()[0];
                let start = idx.get();
                idx.set(start + b);
                let mut data = vec![0.0; b * 2];
                for (r, &l) in labels[start..start + b].iter().enumerate() {
                    data[r * 2 + l as usize] = 10.0;
                }
                Tensor::from_vec(vec![b, 2], data)
            },
            &train,
            4,
        )
        .unwrap();
        assert_eq!(acc, 1.0);
        // constant logits favoring class 0: accuracy = modal frequency (0.5)
        let (acc, _) = evaluate_logits::<f64>(
            |x| Tensor::from_vec(vec![x.shape()[0], 2], vec![1.0, 0.0].repeat(x.shape()[0])),
            &train,
            4,
        )
        .unwrap();
        assert_eq!(acc, 0.5);
    }

    fn teacher_fixture(data: &Path) -> (TempDir, PathBuf) {
        let out = tempfile::tempdir().unwrap();
        let m = tiny_manifest(data, out.path(), 2);
        let report = pretrain_teacher::<f64>(&m).unwrap();
        let ckpt = report.checkpoint_dir;
        (out, ckpt)
    }

    #[test]
    fn distill_freezes_teacher_and_strips_branches() {
        let (_g, data) = tiny_data();
        let (_t, teacher_ckpt) = teacher_fixture(&data);
        let before: Vec<f64> = load_model::<f64>(&teacher_ckpt)
            .unwrap()
            .params()
            .iter()
            .flat_map(|(_, p)| p.to_vec())
            .collect();
        let out = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(&data, out.path(), 2);
        m.model = tiny_model(1);
        m.teacher_checkpoint = Some(teacher_ckpt.clone());
        m.branches = vec![1, 3];
        let report = distill::<f64>(&m).unwrap();
        assert_eq!(report.metrics.len(), 2);
        // exit losses: one per branch plus the final head
        assert_eq!(report.metrics[0].exit_losses.len(), 3);
        // teacher untouched
        let after: Vec<f64> = load_model::<f64>(&teacher_ckpt)
            .unwrap()
            .params()
            .iter()
            .flat_map(|(_, p)| p.to_vec())
            .collect();
        assert_eq!(before, after);
        // stripped checkpoint carries no branch parameters
        let manifest_text =
            fs::read_to_string(out.path().join("checkpoint").join("manifest.json")).unwrap();
        assert!(!manifest_text.contains("branch"));
    }

    #[test]
    fn distill_without_branches_runs_and_matches_exit_count() {
        let (_g, data) = tiny_data();
        let (_t, teacher_ckpt) = teacher_fixture(&data);
        let out = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(&data, out.path(), 1);
        m.model = tiny_model(2);
        m.teacher_checkpoint = Some(teacher_ckpt);
        let report = distill::<f64>(&m).unwrap();
        assert_eq!(report.metrics[0].exit_losses.len(), 1);
    }

    #[test]
    fn distill_rejects_class_mismatch_and_missing_teacher() {
        let (_g, data) = tiny_data();
        let (_t, teacher_ckpt) = teacher_fixture(&data);
        let out = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(&data, out.path(), 1);
        m.model = ModelConfig {
            class_count: 3,
            ..tiny_model(0)
        };
        m.teacher_checkpoint = Some(teacher_ckpt);
        assert!(matches!(distill::<f64>(&m), Err(Error::Config(_))));
        let mut m = tiny_manifest(&data, out.path(), 1);
        m.teacher_checkpoint = Some(PathBuf::from("/nonexistent"));
        assert!(matches!(distill::<f64>(&m), Err(Error::Missing(_))));
    }

    #[test]
    fn non_finite_loss_names_the_batch() {
        let (_g, data) = tiny_data();
        let out = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(&data, out.path(), 2);
        m.optimizer.learning_rate = 1e30;
        m.clip_norm = None;
        match pretrain_teacher::<f32>(&m) {
            Err(Error::Training(msg)) => {
                assert!(msg.contains("batch"), "message: {msg}");
            }
            other => panic!("expected training abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn optimizer_config_serde_names() {
        let sgd = serde_json::to_value(OptimizerConfig::momentum_sgd()).unwrap();
        assert_eq!(sgd["kind"], "momentum_sgd");
        let ad = serde_json::to_value(OptimizerConfig::adaptive()).unwrap();
        assert_eq!(ad["kind"], "decoupled_weight_decay_adaptive");
        let back: OptimizerConfig = serde_json::from_value(ad).unwrap();
        assert!(matches!(
            back.kind,
            OptimizerKind::DecoupledWeightDecayAdaptive { .. }
        ));
    }

    #[test]
    fn cosine_schedule_decays_to_near_zero() {
        let cfg = OptimizerConfig::momentum_sgd();
        assert_eq!(cfg.lr_at(0), cfg.learning_rate);
        assert!(cfg.lr_at(cfg.epochs - 1) < cfg.learning_rate * 0.01);
        let constant = OptimizerConfig {
            cosine: false,
            ..cfg
        };
        assert_eq!(constant.lr_at(17), constant.learning_rate);
    }

    #[test]
    fn ablate_counts_rows_and_summary_means() {
        let (_g, data) = tiny_data();
        let (_t, teacher_ckpt) = teacher_fixture(&data);
        let out = tempfile::tempdir().unwrap();
        let mut base = tiny_manifest(&data, out.path(), 1);
        base.model = tiny_model(3);
        base.teacher_checkpoint = Some(teacher_ckpt);
        let table = ablate::<f32>(
            &base,
            AblationAxis::Gamma,
            Some(AxisValues::Gamma(vec![1.0, 1.3])),
            &[0, 1],
        )
        .unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!(table.summary.len(), 2);
        for (label, mean, _) in &table.summary {
            let manual: Vec<f64> = table
                .rows
                .iter()
                .filter(|r| &r.setting == label)
                .map(|r| r.accuracy)
                .collect();
            let m = manual.iter().sum::<f64>() / manual.len() as f64;
            assert!((mean - m).abs() <= 1e-12);
        }
        assert!(out.path().join("results.csv").exists());
        assert!(out.path().join("summary.csv").exists());
    }

    #[test]
    fn branch_axis_with_one_seed_has_eight_default_rows() {
        if let AxisValues::Branches(v) = AxisValues::default_for(AblationAxis::Branches) {
            assert_eq!(v.len(), 8);
        } else {
            panic!("wrong default axis values");
        }
    }
}
