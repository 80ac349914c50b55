//! Toy staged architectures (small CNN, ViT, MLP-Mixer), each split into
//! four stages with inspectable stage-boundary features, plus attachable
//! exit branches and a directory-based checkpoint format.

pub mod layers;

#[cfg(test)]
mod tests;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::FeatureProjector;
use crate::tensor::{Dtype, Elem, Tensor};
use crate::{Error, Result};
use layers::{
    global_avg_pool, ConvBlock, DepthwiseSeparable, LayerNorm, Linear, MixerBlock, NamedParams,
    PatchEmbed, TransformerBlock,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cnn,
    Vit,
    Mixer,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Cnn => "cnn",
            Family::Vit => "vit",
            Family::Mixer => "mixer",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Family::Cnn),
            "vit" => Ok(Family::Vit),
            "mixer" => Ok(Family::Mixer),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }
}

/// Everything needed to rebuild a model: architecture hyperparameters,
/// input geometry, and the initialization seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    /// CNN: convolution blocks per stage.
    pub stage_depths: [usize; 4],
    /// CNN: channel width per stage.
    pub widths: [usize; 4],
    /// ViT/Mixer: total block count, split evenly into four stages.
    pub depth: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub class_count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// ViT only: prepend a learned class token and read out from it
    /// instead of pooling.
    pub class_token: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn cnn(class_count: usize, seed: u64) -> Self {
        ModelConfig {
            family: Family::Cnn,
            stage_depths: [1, 1, 2, 2],
            widths: [8, 16, 32, 64],
            depth: 0,
            embed_dim: 0,
            patch_size: 0,
            heads: 0,
            mlp_hidden: 0,
            class_count,
            channels: 3,
            height: 32,
            width: 32,
            class_token: false,
            seed,
        }
    }

    pub fn vit(class_count: usize, seed: u64) -> Self {
        ModelConfig {
            family: Family::Vit,
            stage_depths: [0; 4],
            widths: [0; 4],
            depth: 4,
            embed_dim: 32,
            patch_size: 4,
            heads: 4,
            mlp_hidden: 64,
            class_count,
            channels: 3,
            height: 32,
            width: 32,
            class_token: false,
            seed,
        }
    }

    pub fn mixer(class_count: usize, seed: u64) -> Self {
        ModelConfig {
            family: Family::Mixer,
            class_token: false,
            ..ModelConfig::vit(class_count, seed)
        }
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count must be at least 2, got {}",
                self.class_count
            )));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("input geometry extents must be positive".into()));
        }
        match self.family {
            Family::Cnn => {
                if self.stage_depths.iter().any(|&d| d == 0) || self.widths.iter().any(|&w| w == 0)
                {
                    return Err(Error::Config(
                        "cnn stage depths and widths must be positive".into(),
                    ));
                }
                if self.height % 8 != 0 || self.width % 8 != 0 {
                    return Err(Error::Config(format!(
                        "cnn input {}x{} must be divisible by 8 (three stride-2 stages)",
                        self.height, self.width
                    )));
                }
            }
            Family::Vit | Family::Mixer => {
                if self.depth == 0 || self.embed_dim == 0 || self.patch_size == 0 {
                    return Err(Error::Config(
                        "token models need positive depth, embed_dim, patch_size".into(),
                    ));
                }
                if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
                    return Err(Error::Config(format!(
                        "input {}x{} not divisible by patch size {}",
                        self.height, self.width, self.patch_size
                    )));
                }
                if self.family == Family::Vit {
                    if self.heads == 0 || self.embed_dim % self.heads != 0 {
                        return Err(Error::Config(format!(
                            "embed_dim {} must be divisible by heads {}",
                            self.embed_dim, self.heads
                        )));
                    }
                }
                if self.mlp_hidden == 0 {
                    return Err(Error::Config("mlp_hidden must be positive".into()));
                }
                if self.class_token && self.family != Family::Vit {
                    return Err(Error::Config("class_token is vit-only".into()));
                }
            }
        }
        Ok(())
    }
}

/// Stage block counts for an even four-way split; earlier stages take the
/// remainder, so counts differ by at most one.
pub fn even_split(depth: usize) -> [usize; 4] {
    let base = depth / 4;
    let rem = depth % 4;
    let mut out = [base; 4];
    for part in out.iter_mut().take(rem) {
        *part += 1;
    }
    out
}

enum TokenBlock<T: Elem> {
    Transformer(TransformerBlock<T>),
    Mixer(MixerBlock<T>),
}

impl<T: Elem> TokenBlock<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            TokenBlock::Transformer(b) => b.forward(x),
            TokenBlock::Mixer(b) => b.forward(x),
        }
    }

    fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        match self {
            TokenBlock::Transformer(b) => b.params(prefix, out),
            TokenBlock::Mixer(b) => b.params(prefix, out),
        }
    }
}

enum Backbone<T: Elem> {
    Cnn {
        stages: Vec<Vec<ConvBlock<T>>>,
    },
    Tokens {
        patch: PatchEmbed<T>,
        pos_embed: Tensor<T>,
        class_token: Option<Tensor<T>>,
        blocks: Vec<TokenBlock<T>>,
        splits: [usize; 4],
        final_norm: LayerNorm<T>,
    },
}

/// A four-stage backbone plus classifier head.
pub struct StagedModel<T: Elem> {
    pub config: ModelConfig,
    backbone: Backbone<T>,
    head: Linear<T>,
}

pub fn build_model<T: Elem>(config: &ModelConfig) -> Result<StagedModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let backbone = match config.family {
        Family::Cnn => {
            let mut stages = Vec::with_capacity(4);
            let mut c_in = config.channels;
            for (i, (&depth, &width)) in
                config.stage_depths.iter().zip(&config.widths).enumerate()
            {
                let mut blocks = Vec::with_capacity(depth);
                for d in 0..depth {
                    // stages 2-4 downsample at their first block
                    let stride = if i > 0 && d == 0 { 2 } else { 1 };
                    blocks.push(ConvBlock::new(c_in, width, stride, &mut rng));
                    c_in = width;
                }
                stages.push(blocks);
            }
            Backbone::Cnn { stages }
        }
        Family::Vit | Family::Mixer => {
            let patch = PatchEmbed::new(config.channels, config.embed_dim, config.patch_size, &mut rng);
            let tokens = config.tokens();
            let seq = tokens + config.class_token as usize;
            let pos_embed = Tensor::trunc_normal(vec![seq, config.embed_dim], 0.02, &mut rng);
            pos_embed.set_requires_grad(true);
            let class_token = config.class_token.then(|| {
                let t = Tensor::trunc_normal(vec![config.embed_dim], 0.02, &mut rng);
                t.set_requires_grad(true);
                t
            });
            let blocks = (0..config.depth)
                .map(|_| match config.family {
                    Family::Vit => TokenBlock::Transformer(TransformerBlock::new(
                        config.embed_dim,
                        config.heads,
                        config.mlp_hidden,
                        &mut rng,
                    )),
                    _ => TokenBlock::Mixer(MixerBlock::new(
                        config.embed_dim,
                        seq,
                        config.mlp_hidden,
                        &mut rng,
                    )),
                })
                .collect();
            Backbone::Tokens {
                patch,
                pos_embed,
                class_token,
                blocks,
                splits: even_split(config.depth),
                final_norm: LayerNorm::new(config.embed_dim),
            }
        }
    };
    let head_in = match config.family {
        Family::Cnn => config.widths[3],
        _ => config.embed_dim,
    };
    let head = Linear::new(head_in, config.class_count, &mut rng);
    Ok(StagedModel {
        config: config.clone(),
        backbone,
        head,
    })
}

impl<T: Elem> StagedModel<T> {
    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.channels || s[2] != c.height || s[3] != c.width {
            return Err(Error::Shape {
                op: "forward",
                details: format!(
                    "expected [batch, {}, {}, {}], got {:?}",
                    c.channels, c.height, c.width, s
                ),
            });
        }
        Ok(())
    }

    /// Forward pass returning the four stage-boundary features and logits.
    pub fn forward_collect(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        self.check_input(x)?;
        let mut features = Vec::with_capacity(4);
        match &self.backbone {
            Backbone::Cnn { stages } => {
                let mut h = x.clone();
                for stage in stages {
                    for block in stage {
                        h = block.forward(&h)?;
                    }
                    features.push(h.clone());
                }
            }
            Backbone::Tokens {
                patch,
                pos_embed,
                class_token,
                blocks,
                splits,
                ..
            } => {
                let tokens = patch.forward(x)?;
                let mut h = match class_token {
                    Some(cls) => {
                        let b = tokens.shape()[0];
                        let d = tokens.shape()[2];
                        let cls_row = Tensor::zeros(vec![b, 1, d]).add(cls)?;
                        Tensor::concat(&[cls_row, tokens], 1)?
                    }
                    None => tokens,
                };
                h = h.add(pos_embed)?;
                let mut block_iter = blocks.iter();
                for &count in splits {
                    for _ in 0..count {
                        h = block_iter.next().unwrap().forward(&h)?;
                    }
                    features.push(h.clone());
                }
            }
        }
        let logits = self.head(&features[3])?;
        Ok((features, logits))
    }

    /// Classifier head applied to a stage-4 feature: final normalization
    /// and pooling (token models) or global average pooling (CNN), then the
    /// linear classifier.
    pub fn head(&self, stage4: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = match &self.backbone {
            Backbone::Cnn { .. } => global_avg_pool(stage4)?,
            Backbone::Tokens {
                final_norm,
                class_token,
                ..
            } => {
                let normed = final_norm.forward(stage4)?;
                if class_token.is_some() {
                    normed.select_axis1(0)?
                } else {
                    global_avg_pool(&normed)?
                }
            }
        };
        self.head.forward(&pooled)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_collect(x)?.1)
    }

    /// Activation at the end of stage `i` (1-based).
    pub fn stage_features(&self, x: &Tensor<T>, i: usize) -> Result<Tensor<T>> {
        if !(1..=4).contains(&i) {
            return Err(Error::Config(format!("stage index {i} not in 1..=4")));
        }
        Ok(self.forward_collect(x)?.0.swap_remove(i - 1))
    }

    /// Channel (CNN) or embedding dimension of the feature at stage `i`.
    pub fn stage_width(&self, i: usize) -> usize {
        match self.config.family {
            Family::Cnn => self.config.widths[i - 1],
            _ => self.config.embed_dim,
        }
    }

    pub fn params(&self) -> NamedParams<T> {
        let mut out = Vec::new();
        match &self.backbone {
            Backbone::Cnn { stages } => {
                for (i, stage) in stages.iter().enumerate() {
                    for (j, block) in stage.iter().enumerate() {
                        block.params(&format!("stage{}.block{}", i + 1, j), &mut out);
                    }
                }
            }
            Backbone::Tokens {
                patch,
                pos_embed,
                class_token,
                blocks,
                final_norm,
                ..
            } => {
                patch.params("patch", &mut out);
                out.push(("pos_embed".into(), pos_embed.clone()));
                if let Some(cls) = class_token {
                    out.push(("class_token".into(), cls.clone()));
                }
                for (j, block) in blocks.iter().enumerate() {
                    block.params(&format!("block{j}"), &mut out);
                }
                final_norm.params("final_norm", &mut out);
            }
        }
        self.head.params("head", &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }
}

enum BranchKind<T: Elem> {
    Cnn(DepthwiseSeparable<T>),
    Tokens(TransformerBlock<T>),
}

/// An auxiliary classifier attached at a stage boundary: a feature
/// transform block plus a linear classifier.
pub struct ExitBranch<T: Elem> {
    pub stage_index: usize,
    kind: BranchKind<T>,
    classifier: Linear<T>,
}

impl<T: Elem> ExitBranch<T> {
    fn new(model: &StagedModel<T>, stage_index: usize, rng: &mut impl Rng) -> Self {
        let c = &model.config;
        let width = model.stage_width(stage_index);
        let kind = match c.family {
            Family::Cnn => BranchKind::Cnn(DepthwiseSeparable::new(width, rng)),
            _ => BranchKind::Tokens(TransformerBlock::new(
                c.embed_dim,
                c.heads.max(1),
                c.mlp_hidden,
                rng,
            )),
        };
        ExitBranch {
            stage_index,
            kind,
            classifier: Linear::new(width, c.class_count, rng),
        }
    }

    /// Stage feature in, `[batch, classes]` logits out.
    pub fn forward(&self, feature: &Tensor<T>) -> Result<Tensor<T>> {
        let transformed = match &self.kind {
            BranchKind::Cnn(block) => block.forward(feature)?,
            BranchKind::Tokens(block) => block.forward(feature)?,
        };
        self.classifier.forward(&global_avg_pool(&transformed)?)
    }

    pub fn params(&self, out: &mut NamedParams<T>) {
        let prefix = format!("branch{}", self.stage_index);
        match &self.kind {
            BranchKind::Cnn(block) => block.params(&format!("{prefix}.block"), out),
            BranchKind::Tokens(block) => block.params(&format!("{prefix}.block"), out),
        }
        self.classifier.params(&format!("{prefix}.classifier"), out);
    }
}

impl<T: Elem> FeatureProjector<T> for ExitBranch<T> {
    fn project(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(x)
    }
}

/// A student backbone with exit branches attached at chosen stages.
pub struct BranchedModel<T: Elem> {
    pub backbone: StagedModel<T>,
    pub branches: Vec<ExitBranch<T>>,
}

/// Attach fresh exit branches at the given stage boundaries (a non-empty,
/// duplicate-free subset of {1,2,3,4}). Branch initialization draws from a
/// stream derived from the model seed, so it never perturbs the backbone.
pub fn attach_branches<T: Elem>(
    model: StagedModel<T>,
    stages: &[usize],
) -> Result<BranchedModel<T>> {
    if stages.is_empty() {
        return Err(Error::Config("branch stage set is empty".into()));
    }
    let mut sorted = stages.to_vec();
    sorted.sort_unstable();
    for pair in sorted.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::Config(format!("duplicate branch stage {}", pair[0])));
        }
    }
    if sorted.iter().any(|&s| !(1..=4).contains(&s)) {
        return Err(Error::Config(format!("branch stages {sorted:?} not in 1..=4")));
    }
    let branches = sorted
        .iter()
        .map(|&s| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(model.config.seed ^ 0xb4a2c3d1e5f60789 ^ (s as u64) << 8);
            ExitBranch::new(&model, s, &mut rng)
        })
        .collect();
    Ok(BranchedModel {
        backbone: model,
        branches,
    })
}

/// Remove every branch, leaving the backbone untouched.
pub fn strip_branches<T: Elem>(model: BranchedModel<T>) -> StagedModel<T> {
    model.backbone
}

impl<T: Elem> BranchedModel<T> {
    /// One forward pass producing every branch's logits (in stage order)
    /// and the final-head logits.
    pub fn forward_all(&self, x: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let (features, logits) = self.backbone.forward_collect(x)?;
        let mut branch_logits = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            branch_logits.push(branch.forward(&features[branch.stage_index - 1])?);
        }
        Ok((branch_logits, logits))
    }

    pub fn params(&self) -> NamedParams<T> {
        let mut out = self.backbone.params();
        for branch in &self.branches {
            branch.params(&mut out);
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    dtype: Dtype,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Write a model checkpoint: `manifest.json` plus one `.oft` tensor file
/// per parameter.
pub fn save_model<T: Elem>(model: &StagedModel<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let params = model.params();
    let manifest = CheckpointManifest {
        config: model.config.clone(),
        dtype: T::DTYPE,
        params: params
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.clone(),
                shape: p.shape(),
            })
            .collect(),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for (name, p) in &params {
        p.save_ofat(&dir.join(format!("{name}.oft")))?;
    }
    Ok(())
}

pub fn load_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join("manifest.json");
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(manifest.config)
}

/// Rebuild a model from a checkpoint directory; parameter shapes must match
/// the manifest and the freshly built architecture exactly.
pub fn load_model<T: Elem>(dir: &Path) -> Result<StagedModel<T>> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Missing(manifest_path));
    }
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let model = build_model::<T>(&manifest.config)?;
    let params = model.params();
    if params.len() != manifest.params.len() {
        return Err(Error::Format {
            path: manifest_path,
            details: format!(
                "manifest lists {} parameters, model has {}",
                manifest.params.len(),
                params.len()
            ),
        });
    }
    for ((name, p), entry) in params.iter().zip(&manifest.params) {
        if *name != entry.name || p.shape() != entry.shape {
            return Err(Error::Format {
                path: manifest_path,
                details: format!(
                    "parameter mismatch: model has {name} {:?}, manifest has {} {:?}",
                    p.shape(),
                    entry.name,
                    entry.shape
                ),
            });
        }
        let stored = Tensor::<T>::load_ofat(&dir.join(format!("{name}.oft")))?;
        if stored.shape() != p.shape() {
            return Err(Error::Format {
                path: dir.join(format!("{name}.oft")),
                details: format!(
                    "stored shape {:?} does not match declared {:?}",
                    stored.shape(),
                    entry.shape
                ),
            });
        }
        p.data_mut().copy_from_slice(&stored.data());
    }
    Ok(model)
}
