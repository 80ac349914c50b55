//! Deterministic procedural image-classification dataset. Each class is a
//! (global shape, local stripe spacing) pair, so both long-range shape
//! cues and local texture cues carry label information. Includes the `OFAD`
//! on-disk format and seeded mini-batching.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Elem, Tensor};
use crate::{Error, Result};

pub const OFAD_MAGIC: &[u8; 4] = b"OFAD";
const OFAD_VERSION: u32 = 1;

/// Parameters of the procedural generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub class_count: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    /// Stripe period in pixels.
    pub texture_scale: f64,
    /// Global shape id per class (0 circle, 1 square, 2 triangle, 3 plus).
    pub shape_vocabulary: Vec<u8>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            class_count: 8,
            train_per_class: 256,
            test_per_class: 64,
            height: 32,
            width: 32,
            texture_scale: 4.0,
            shape_vocabulary: vec![0, 1, 2, 3, 0, 1, 2, 3],
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "class_count must be at least 2, got {}",
                self.class_count
            )));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "image geometry {}x{} must be divisible by patch sizes 4 and 8",
                self.height, self.width
            )));
        }
        if self.shape_vocabulary.len() != self.class_count {
            return Err(Error::Config(format!(
                "shape_vocabulary has {} entries for {} classes",
                self.shape_vocabulary.len(),
                self.class_count
            )));
        }
        if self.shape_vocabulary.iter().any(|&s| s > 3) {
            return Err(Error::Config("shape ids must be in 0..=3".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config("samples per class must be positive".into()));
        }
        if self.texture_scale < 2.0 {
            return Err(Error::Config(format!(
                "texture_scale must be at least 2 pixels, got {}",
                self.texture_scale
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// In-memory dataset: row-major [N, 3, H, W] pixels in [0, 1] plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u16>,
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        3 * self.height * self.width
    }

    /// Materialize the listed samples as a [b, 3, H, W] tensor plus labels.
    pub fn gather<T: Elem>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let ppi = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * ppi);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!(
                    "sample index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend(self.images[i * ppi..(i + 1) * ppi].iter().map(|&p| T::of_f64(p as f64)));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::from_vec(vec![indices.len(), 3, self.height, self.width], data)?;
        Ok((t, labels))
    }

    /// Mini-batch index lists for one epoch. With `shuffle`, applies a
    /// seed-determined permutation; the trailing short batch is kept.
    pub fn batches(&self, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        if shuffle {
            // Fisher-Yates with a dedicated stream.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        Ok(order.chunks(batch_size).map(|c| c.to_vec()).collect())
    }
}

// One independent RNG stream per sample, keyed by (seed, split, class,
// index) through a splitmix-style mix so streams never collide.
fn sample_rng(seed: u64, split: Split, class: usize, index: usize) -> ChaCha8Rng {
    let mut x = seed
        ^ (match split {
            Split::Train => 0x9e3779b97f4a7c15,
            Split::Test => 0xd1b54a32d192ed03,
        })
        ^ ((class as u64) << 32)
        ^ (index as u64);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    ChaCha8Rng::seed_from_u64(x ^ (x >> 31))
}

fn in_shape(shape: u8, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        // hollow square frame, so it cannot be mistaken for a filled disk
        1 => dx.abs().max(dy.abs()) <= r && dx.abs().max(dy.abs()) >= r * 0.55,
        2 => dy >= -r && dy <= r && dx.abs() <= (r - dy) * 0.6,
        _ => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
    }
}

fn render_sample(spec: &SyntheticSpec, class: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f32>) {
    let (h, w) = (spec.height, spec.width);
    let shape = spec.shape_vocabulary[class];
    // Texture cue: stripe orientation flips between the lower and upper half
    // of the class range; the phase is per-sample nuisance jitter.
    let scale = spec.texture_scale;
    let horizontal = class < spec.class_count.div_ceil(2);
    let phase: f64 = rng.gen_range(0.0..scale);
    // Shape cue: jittered center and size.
    let cx = w as f64 / 2.0 + rng.gen_range(-4.0..4.0);
    let cy = h as f64 / 2.0 + rng.gen_range(-4.0..4.0);
    let r = h as f64 * 0.28 + rng.gen_range(-2.0..2.0);
    let two_pi = std::f64::consts::TAU;

    let mut base = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let inside = in_shape(shape, xf - cx, yf - cy, r);
            // The shape reads as a flat bright region; the stripes texture
            // the background only, so the two cues never overlap.
            base[y * w + x] = if inside {
                0.72
            } else {
                let proj = if horizontal { yf } else { xf } + phase;
                0.28 + 0.14 * (two_pi * proj / scale).sin()
            };
        }
    }
    for _channel in 0..3 {
        for &b in &base {
            let noisy = b + normal(rng) * spec.noise_std;
            out.push(noisy.clamp(0.0, 1.0) as f32);
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn generate_split(spec: &SyntheticSpec, split: Split, per_class: usize) -> Dataset {
    let ppi = 3 * spec.height * spec.width;
    let n = spec.class_count * per_class;
    let mut images = Vec::with_capacity(n * ppi);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.class_count {
        for index in 0..per_class {
            let mut rng = sample_rng(spec.seed, split, class, index);
            render_sample(spec, class, &mut rng, &mut images);
            labels.push(class as u16);
        }
    }
    Dataset {
        images,
        labels,
        class_count: spec.class_count,
        height: spec.height,
        width: spec.width,
        split,
    }
}

/// Generate the train and test splits from independent seed streams.
pub fn generate(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    Ok((
        generate_split(spec, Split::Train, spec.train_per_class),
        generate_split(spec, Split::Test, spec.test_per_class),
    ))
}

/// Write a dataset in the `OFAD` format: magic, u32 version, N, C, H, W,
/// N*(3*H*W) f32 pixels, N u16 labels, all little-endian.
pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + ds.images.len() * 4 + ds.labels.len() * 2);
    buf.extend_from_slice(OFAD_MAGIC);
    for v in [
        OFAD_VERSION,
        ds.len() as u32,
        ds.class_count as u32,
        ds.height as u32,
        ds.width as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &p in &ds.images {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    for &l in &ds.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read only the header of an `OFAD` file: (samples, classes, height, width).
pub fn peek(path: &Path) -> Result<(usize, usize, usize, usize)> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut header = [0u8; 24];
    let mut f = fs::File::open(path)?;
    std::io::Read::read_exact(&mut f, &mut header).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        details: "header truncated".into(),
    })?;
    if &header[..4] != OFAD_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            details: format!("bad magic {:?}, expected OFAD", &header[..4]),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(header[off..off + 4].try_into().unwrap()) as usize;
    if u32_at(4) != OFAD_VERSION as usize {
        return Err(Error::Format {
            path: path.to_path_buf(),
            details: format!("unsupported version {}", u32_at(4)),
        });
    }
    Ok((u32_at(8), u32_at(12), u32_at(16), u32_at(20)))
}

pub fn load(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let fail = |details: String| Error::Format {
        path: path.to_path_buf(),
        details,
    };
    if bytes.len() < 24 {
        return Err(fail(format!("header truncated: {} bytes", bytes.len())));
    }
    if &bytes[..4] != OFAD_MAGIC {
        return Err(fail(format!(
            "bad magic {:?}, expected OFAD",
            &bytes[..4]
        )));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != OFAD_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let n = u32_at(8) as usize;
    let c = u32_at(12) as usize;
    let h = u32_at(16) as usize;
    let w = u32_at(20) as usize;
    let pixel_bytes = n * 3 * h * w * 4;
    let expected = 24 + pixel_bytes + n * 2;
    if bytes.len() != expected {
        return Err(fail(format!(
            "payload truncated: {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let images: Vec<f32> = bytes[24..24 + pixel_bytes]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let labels: Vec<u16> = bytes[24 + pixel_bytes..]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(fail(format!("label {bad} out of range for {c} classes")));
    }
    Ok(Dataset {
        images,
        labels,
        class_count: c,
        height: h,
        width: w,
        split: Split::Train,
    })
}
