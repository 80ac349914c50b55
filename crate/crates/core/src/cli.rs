//! Command-line interface: one binary with subcommands for data
//! generation, teacher training, distillation, CKA analysis, gradient
//! checking, ablations, and feature dumps. Exit codes: 0 success, 1
//! validation error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cka::{heatmap, pooled_features, FeatureRecord};
use crate::data::{self, SyntheticSpec};
use crate::losses::{
    distillation_objective, hint_loss, kd_loss, kd_loss_reformulated, ofa_loss,
    IdentityProjector, LossConfig,
};
use crate::nn::{attach_branches, build_model, load_model, Family, ModelConfig};
use crate::tensor::{grad_check, no_grad, Elem, GradCheckReport, Tensor};
use crate::trainer::{
    ablate, distill, pretrain_teacher, AblationAxis, AxisValues, OptimizerConfig, RunManifest,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Parser)]
#[command(name = "ofakd", version, about = "Cross-architecture distillation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset (train.ofad / test.ofad).
    GenData {
        /// JSON file with generator parameters; defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain a teacher from scratch with cross-entropy.
    TrainTeacher(TrainArgs),
    /// Distill a student against a frozen teacher checkpoint.
    Distill(TrainArgs),
    /// Layer-by-layer CKA heatmap between two feature-dump directories.
    Cka {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        /// CSV output path; a JSON summary lands beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference gradient verification of every op and loss.
    Gradcheck {
        /// Check the full op/loss suite.
        #[arg(long, default_value_t = true)]
        all: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional report file; the report also prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one axis (branches, gamma, scale, clip) over several seeds.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        axis: String,
        /// Comma-separated seeds, e.g. 0,1,2,3,4.
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
    },
    /// Dump per-stage features over a seed-determined sample subset.
    DumpFeatures {
        #[arg(long)]
        ckpt: PathBuf,
        /// Directory holding test.ofad.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "1,2,3,4")]
        stages: String,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        precision: Precision,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Run manifest JSON; individual flags override its fields.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory holding train.ofad / test.ofad.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    teacher_ckpt: Option<PathBuf>,
    /// Branch stages as a comma list (e.g. 1,2,3,4) or "none".
    #[arg(long)]
    branches: Option<String>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Disable gradient clipping entirely.
    #[arg(long, default_value_t = false)]
    no_clip: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    class_count: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

fn parse_branches(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad branch stage {p:?}")))
        })
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed {p:?}")))
        })
        .collect()
}

impl TrainArgs {
    fn build_manifest(&self) -> Result<RunManifest> {
        let mut manifest = match &self.manifest {
            Some(path) => {
                if !path.exists() {
                    return Err(Error::Missing(path.clone()));
                }
                serde_json::from_str::<RunManifest>(&fs::read_to_string(path)?)?
            }
            None => {
                let data = self
                    .data
                    .clone()
                    .ok_or_else(|| Error::Config("--data is required without --manifest".into()))?;
                let out = self
                    .out
                    .clone()
                    .ok_or_else(|| Error::Config("--out is required without --manifest".into()))?;
                let family: Family = self.family.as_deref().unwrap_or("cnn").parse()?;
                let seed = self.seed.unwrap_or(0);
                // model geometry and class count follow the dataset
                let (_, c, h, w) = crate::data::peek(&data.join("train.ofad"))?;
                let classes = self.class_count.unwrap_or(c);
                let mut model = match family {
                    Family::Cnn => ModelConfig::cnn(classes, seed),
                    Family::Vit => ModelConfig::vit(classes, seed),
                    Family::Mixer => ModelConfig::mixer(classes, seed),
                };
                model.height = h;
                model.width = w;
                RunManifest::new(model, data, out)
            }
        };
        if let Some(seed) = self.seed {
            manifest.seed = seed;
            manifest.model.seed = seed;
        }
        if self.manifest.is_some() {
            // explicit flags still win over the manifest file
            if let Some(family) = &self.family {
                let family: Family = family.parse()?;
                if family != manifest.model.family {
                    let classes = self.class_count.unwrap_or(manifest.model.class_count);
                    manifest.model = match family {
                        Family::Cnn => ModelConfig::cnn(classes, manifest.seed),
                        Family::Vit => ModelConfig::vit(classes, manifest.seed),
                        Family::Mixer => ModelConfig::mixer(classes, manifest.seed),
                    };
                    manifest.optimizer = OptimizerConfig::for_family(family);
                }
            }
            if let Some(data) = &self.data {
                manifest.dataset = data.clone();
            }
            if let Some(out) = &self.out {
                manifest.out_dir = out.clone();
            }
        }
        if let Some(t) = &self.teacher_ckpt {
            manifest.teacher_checkpoint = Some(t.clone());
        }
        if let Some(b) = &self.branches {
            manifest.branches = parse_branches(b)?;
        }
        if let Some(v) = self.gamma {
            manifest.loss.gamma = v;
        }
        if let Some(v) = self.lambda {
            manifest.loss.lambda = v;
        }
        if let Some(v) = self.temperature {
            manifest.loss.temperature = v;
        }
        if let Some(v) = self.scale {
            manifest.loss.scale = v;
        }
        if let Some(v) = self.clip_norm {
            manifest.clip_norm = Some(v);
        }
        if self.no_clip {
            manifest.clip_norm = None;
        }
        if let Some(v) = self.epochs {
            manifest.optimizer.epochs = v;
        }
        if let Some(v) = self.lr {
            manifest.optimizer.learning_rate = v;
        }
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Distinct, seed-determined sample indices shared across models.
pub fn sample_subset(dataset_len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dataset_len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5ab5_e7a1_90c3);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order.truncate(count.min(dataset_len));
    order
}

#[derive(Serialize, Deserialize)]
struct DumpManifest {
    layers: Vec<String>,
    sample_indices: Vec<usize>,
    family: Family,
}

fn dump_features<T: Elem>(
    ckpt: &Path,
    data_dir: &Path,
    stages: &[usize],
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    if stages.is_empty() || stages.iter().any(|&s| !(1..=4).contains(&s)) {
        return Err(Error::Config(format!("stages {stages:?} must be within 1..=4")));
    }
    let model = load_model::<T>(ckpt)?;
    let ds = data::load(&data_dir.join("test.ofad"))?;
    let indices = sample_subset(ds.len(), samples, seed);
    let (x, _) = ds.gather::<T>(&indices)?;
    let features = no_grad(|| model.forward_collect(&x))?.0;
    fs::create_dir_all(out)?;
    let mut layers = Vec::new();
    for &s in stages {
        let label = format!("stage{s}");
        pooled_features(&features[s - 1])?.save_ofat(&out.join(format!("{label}.oft")))?;
        layers.push(label);
    }
    let manifest = DumpManifest {
        layers,
        sample_indices: indices,
        family: model.config.family,
    };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn load_feature_dir(dir: &Path) -> Result<(Vec<FeatureRecord<f64>>, Vec<usize>)> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Missing(manifest_path));
    }
    let manifest: DumpManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let mut records = Vec::new();
    for layer in &manifest.layers {
        let t = Tensor::<f64>::load_ofat(&dir.join(format!("{layer}.oft")))?;
        records.push(FeatureRecord::new(layer.clone(), t)?);
    }
    Ok((records, manifest.sample_indices))
}

fn run_cka(model_a: &Path, model_b: &Path, out: &Path) -> Result<()> {
    let (recs_a, samples_a) = load_feature_dir(model_a)?;
    let (recs_b, samples_b) = load_feature_dir(model_b)?;
    if samples_a != samples_b {
        return Err(Error::Config(
            "feature dumps cover different sample subsets; regenerate with the same dataset and seed"
                .into(),
        ));
    }
    let matrix = heatmap(&recs_a, &recs_b)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out, matrix.to_csv())?;
    fs::write(
        out.with_extension("json"),
        serde_json::to_string_pretty(&matrix.summary())?,
    )?;
    Ok(())
}

/// Every differentiable op and loss, each reduced to a scalar of one input
/// tensor, checked against central finite differences at tolerance 1e-4.
pub fn gradcheck_suite(seed: u64) -> Vec<(String, GradCheckReport)> {
    type F = Box<dyn Fn(&Tensor<f64>) -> Result<Tensor<f64>>>;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r2 = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let b = Tensor::<f64>::randn(vec![2, 6], &mut rng);
    let b3 = Tensor::<f64>::randn(vec![2, 4, 3], &mut rng);
    let w = Tensor::<f64>::randn(vec![6, 3], &mut rng);
    let conv_w = Tensor::<f64>::randn(vec![3, 2, 3, 3], &mut rng).scale(0.4).unwrap();
    let dw_w = Tensor::<f64>::randn(vec![2, 1, 3, 3], &mut rng).scale(0.4).unwrap();
    let gain = Tensor::<f64>::randn(vec![6], &mut rng);
    let bias = Tensor::<f64>::randn(vec![6], &mut rng);
    let t_logits = Tensor::<f64>::randn(vec![2, 6], &mut rng);
    let p_t = t_logits.detach().softmax(1.0).unwrap();
    let labels = [1usize, 4];
    let cfg = LossConfig {
        gamma: 1.3,
        ..LossConfig::default()
    };

    let mut cases: Vec<(&str, Vec<usize>, F)> = Vec::new();
    let bc = b.clone();
    cases.push(("add", vec![2, 6], Box::new(move |x| x.add(&bc)?.mean_all())));
    let bc = b.clone();
    cases.push(("sub", vec![2, 6], Box::new(move |x| x.sub(&bc)?.mean_all())));
    let bc = b.clone();
    cases.push(("mul", vec![2, 6], Box::new(move |x| x.mul(&bc)?.mean_all())));
    cases.push(("mul_broadcast", vec![2, 6], {
        let row = Tensor::<f64>::randn(vec![6], &mut r2);
        Box::new(move |x| x.mul(&row)?.mean_all())
    }));
    cases.push(("neg", vec![2, 6], Box::new(|x| x.neg()?.mean_all())));
    cases.push(("scale", vec![2, 6], Box::new(|x| x.scale(1.7)?.mean_all())));
    cases.push(("add_scalar", vec![2, 6], Box::new(|x| x.add_scalar(0.3)?.mean_all())));
    cases.push(("relu", vec![2, 6], Box::new(|x| x.add_scalar(0.05)?.relu()?.mean_all())));
    cases.push(("gelu", vec![2, 6], Box::new(|x| x.gelu()?.mean_all())));
    cases.push(("exp", vec![2, 6], Box::new(|x| x.exp()?.mean_all())));
    cases.push(("log", vec![2, 6], Box::new(|x| x.mul(x)?.add_scalar(0.5)?.log()?.mean_all())));
    cases.push(("sqrt", vec![2, 6], Box::new(|x| x.mul(x)?.add_scalar(0.5)?.sqrt_elem()?.mean_all())));
    cases.push(("softmax", vec![2, 6], Box::new(|x| x.softmax(2.0)?.select_cell())));
    cases.push(("log_softmax", vec![2, 6], Box::new(|x| x.log_softmax(1.0)?.select_cell())));
    cases.push(("sum_all", vec![2, 6], Box::new(|x| x.sum_all())));
    cases.push(("mean_all", vec![2, 6], Box::new(|x| x.mean_all())));
    cases.push(("sum_axis", vec![2, 6], Box::new(|x| x.sum_axis(0)?.select_cell())));
    cases.push(("mean_axis", vec![2, 6], Box::new(|x| x.mean_axis(1)?.select_cell())));
    cases.push(("l2_norm", vec![2, 6], Box::new(|x| x.add_scalar(0.2)?.l2_norm(Some(1))?.mean_all())));
    let wc = w.clone();
    cases.push(("matmul", vec![2, 6], Box::new(move |x| x.matmul(&wc)?.mean_all())));
    let b3c = b3.clone();
    cases.push(("matmul_batched", vec![2, 3, 4], Box::new(move |x| {
        x.matmul(&b3c)?.mean_all()
    })));
    cases.push(("reshape_swap", vec![2, 6], Box::new(|x| {
        x.reshape(vec![3, 4])?.swap_axes(0, 1)?.mean_all()
    })));
    let bc = b.clone();
    cases.push(("concat", vec![2, 6], Box::new(move |x| {
        Tensor::concat(&[x.clone(), bc.clone()], 0)?.mean_all()
    })));
    cases.push(("select_axis1", vec![2, 4, 3], Box::new(|x| x.select_axis1(2)?.mean_all())));
    let (g, bi) = (gain.clone(), bias.clone());
    cases.push(("layernorm", vec![2, 6], Box::new(move |x| {
        x.layernorm(&g, &bi, 1e-5)?.select_cell()
    })));
    let cw = conv_w.clone();
    cases.push(("conv2d", vec![2, 2, 5, 5], Box::new(move |x| {
        x.conv2d(&cw, None, 2, 1)?.mean_all()
    })));
    let dww = dw_w.clone();
    cases.push(("conv2d_depthwise", vec![2, 2, 5, 5], Box::new(move |x| {
        x.conv2d_depthwise(&dww, None, 1, 1)?.mean_all()
    })));
    let tl = t_logits.clone();
    cases.push(("kd_loss", vec![2, 6], Box::new(move |x| {
        kd_loss(x, &tl, &labels, &LossConfig::default())
    })));
    let pt = p_t.clone();
    cases.push(("kd_loss_reformulated", vec![2, 6], Box::new(move |x| {
        kd_loss_reformulated(x, &pt, &labels)
    })));
    let pt = p_t.clone();
    let cfg2 = cfg.clone();
    cases.push(("ofa_loss", vec![2, 6], Box::new(move |x| {
        ofa_loss(x, &pt, &labels, &cfg2)
    })));
    let ft = Tensor::<f64>::randn(vec![2, 6], &mut r2);
    cases.push(("hint_loss", vec![2, 6], Box::new(move |x| {
        hint_loss(&[x.clone()], &[ft.clone()], &[&IdentityProjector])
    })));
    let tl = t_logits.clone();
    let cfg2 = cfg.clone();
    cases.push(("distillation_objective", vec![2, 6], Box::new(move |x| {
        distillation_objective(&[x.relu()?], x, &tl, &labels, &cfg2)
    })));
    // end to end: objective through a 2-branch mini-CNN student, gradient
    // taken with respect to the input image
    let student = attach_branches(
        build_model::<f64>(&ModelConfig {
            widths: [3, 3, 4, 4],
            height: 16,
            width: 16,
            ..ModelConfig::cnn(4, seed)
        })
        .unwrap(),
        &[1, 3],
    )
    .unwrap();
    let e2e_teacher = Tensor::<f64>::randn(vec![2, 4], &mut r2);
    cases.push(("end_to_end_two_branch_cnn", vec![2, 3, 16, 16], Box::new(move |x| {
        let (branch_logits, final_logits) = student.forward_all(x)?;
        distillation_objective(
            &branch_logits,
            &final_logits,
            &e2e_teacher,
            &[0, 3],
            &LossConfig {
                gamma: 1.2,
                ..LossConfig::default()
            },
        )
    })));

    let mut out = Vec::new();
    for (name, shape, f) in cases {
        let mut worst = GradCheckReport {
            max_rel_err: 0.0,
            pass: true,
            failures: Vec::new(),
        };
        for _ in 0..10 {
            let x = Tensor::<f64>::randn(shape.clone(), &mut rng);
            let rep = grad_check(&f, &x, 1e-5, 1e-4);
            if rep.max_rel_err > worst.max_rel_err {
                worst.max_rel_err = rep.max_rel_err;
            }
            if !rep.pass {
                worst.pass = false;
                worst.failures.extend(rep.failures);
            }
        }
        out.push((name.to_string(), worst));
    }
    out
}

trait SelectCell<T: Elem> {
    fn select_cell(&self) -> Result<Tensor<T>>;
}

// deterministic non-uniform scalar readout so reduction gradients aren't
// constant across elements
impl<T: Elem> SelectCell<T> for Tensor<T> {
    fn select_cell(&self) -> Result<Tensor<T>> {
        let n = self.len();
        let weights: Vec<T> = (0..n).map(|i| T::of_f64((i % 5) as f64 - 1.7)).collect();
        let flat = self.reshape(vec![n])?;
        flat.mul(&Tensor::from_vec(vec![n], weights)?)?.sum_all()
    }
}

fn gen_data(spec: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec = match spec {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Missing(path.to_path_buf()));
            }
            serde_json::from_str::<SyntheticSpec>(&fs::read_to_string(path)?)?
        }
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let (train, test) = data::generate(&spec)?;
    fs::create_dir_all(out)?;
    data::save(&train, &out.join("train.ofad"))?;
    data::save(&test, &out.join("test.ofad"))?;
    fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { spec, seed, out } => gen_data(spec.as_deref(), seed, &out),
        Cmd::TrainTeacher(args) => {
            let manifest = args.build_manifest()?;
            let report = match args.precision {
                Precision::F32 => pretrain_teacher::<f32>(&manifest)?,
                Precision::F64 => pretrain_teacher::<f64>(&manifest)?,
            };
            eprintln!(
                "teacher trained: {} epochs, final test accuracy {:.4}",
                report.metrics.len(),
                report.final_test_acc
            );
            Ok(())
        }
        Cmd::Distill(args) => {
            let manifest = args.build_manifest()?;
            if manifest.teacher_checkpoint.is_none() {
                return Err(Error::Config("distill requires --teacher-ckpt".into()));
            }
            let report = match args.precision {
                Precision::F32 => distill::<f32>(&manifest)?,
                Precision::F64 => distill::<f64>(&manifest)?,
            };
            eprintln!(
                "student distilled: {} epochs, final test accuracy {:.4}",
                report.metrics.len(),
                report.final_test_acc
            );
            Ok(())
        }
        Cmd::Cka {
            model_a,
            model_b,
            out,
            seed: _,
        } => run_cka(&model_a, &model_b, &out),
        Cmd::Gradcheck { all: _, seed, out } => {
            let results = gradcheck_suite(seed);
            let mut report = String::new();
            let mut ok = true;
            for (name, rep) in &results {
                report.push_str(&format!(
                    "{name}: {} (max rel err {:.3e})\n",
                    if rep.pass { "PASS" } else { "FAIL" },
                    rep.max_rel_err
                ));
                ok &= rep.pass;
            }
            print!("{report}");
            if let Some(path) = out {
                fs::write(path, &report)?;
            }
            if !ok {
                return Err(Error::Training("gradient check failed".into()));
            }
            Ok(())
        }
        Cmd::Ablate { train, axis, seeds } => {
            let manifest = train.build_manifest()?;
            let axis: AblationAxis = axis.parse()?;
            let seeds = parse_seeds(&seeds)?;
            let values: Option<AxisValues> = None;
            let table = match train.precision {
                Precision::F32 => ablate::<f32>(&manifest, axis, values, &seeds)?,
                Precision::F64 => ablate::<f64>(&manifest, axis, values, &seeds)?,
            };
            eprintln!("ablation complete: {} runs", table.rows.len());
            Ok(())
        }
        Cmd::DumpFeatures {
            ckpt,
            data,
            stages,
            samples,
            seed,
            out,
            precision,
        } => {
            let stages: Vec<usize> = stages
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad stage {p:?}")))
                })
                .collect::<Result<_>>()?;
            match precision {
                Precision::F32 => dump_features::<f32>(&ckpt, &data, &stages, samples, seed, &out),
                Precision::F64 => dump_features::<f64>(&ckpt, &data, &stages, samples, seed, &out),
            }
        }
    }
}

/// Parse and execute; returns the process exit code.
pub fn run(args: impl IntoIterator<Item = OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version print to stdout and succeed
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
