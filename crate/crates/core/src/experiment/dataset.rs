//! Procedural paired dataset: class-conditioned blob images and neural
//! vectors that are a fixed linear map of the clean image embedding plus noise.

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::{check_disjoint_classes, load_embedding_bank, EmbeddingBank, Split, SyntheticEncoder};
use crate::image::Image;
use crate::linalg::Matrix;
use crate::rng::{derive_seed, seeded_rng, stream};
use crate::transforms::{build_views, View};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

pub const BANK_FILE: &str = "bank.bicp";
pub const IMAGE_DIR: &str = "images";

/// In-memory dataset. `neural` holds the same `f32` values as the bank.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image<f64>>,
    pub neural: Vec<Vec<f64>>,
    pub bank: EmbeddingBank,
}

impl Dataset {
    pub fn labels(&self) -> &[u32] {
        &self.bank.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.bank.splits
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Errors if this dataset cannot serve a run configured by `cfg`.
    pub fn check_compatible(&self, cfg: &RunConfig) -> Result<()> {
        let b = &self.bank;
        if b.dim != cfg.features.dim {
            return Err(Error::Config(format!(
                "dataset features have dim {} but the config asks for {}",
                b.dim, cfg.features.dim
            )));
        }
        if b.neural_dim != cfg.data.neural_dim {
            return Err(Error::Config(format!(
                "dataset neural vectors have dim {} but the config asks for {}",
                b.neural_dim, cfg.data.neural_dim
            )));
        }
        let size = cfg.data.image_size;
        if let Some(img) = self.images.first() {
            if img.height() != size || img.width() != size || img.channels() != cfg.data.channels {
                return Err(Error::Config(format!(
                    "dataset images are {}x{}x{} but the config asks for {}x{size}x{size}",
                    img.channels(),
                    img.height(),
                    img.width(),
                    cfg.data.channels
                )));
            }
        }
        Ok(())
    }
}

struct Blob {
    shape: u8,
    center: (f64, f64),
    radius: f64,
    color: [f64; 3],
}

struct ClassPrototype {
    background: [f64; 3],
    blobs: Vec<Blob>,
}

fn prototype(seed: u64, class: u32, size: f64) -> ClassPrototype {
    let mut rng = seeded_rng(derive_seed(seed, &[stream::RENDER, class as u64]));
    let color = |rng: &mut crate::rng::Rng| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
    let background = color(&mut rng).map(|c| 0.1 + 0.4 * c);
    let count = rng.random_range(2..=4);
    let blobs = (0..count)
        .map(|_| Blob {
            shape: rng.random_range(0..3),
            center: (
                size * rng.random_range(0.15..0.85),
                size * rng.random_range(0.15..0.85),
            ),
            radius: size * rng.random_range(0.08..0.3),
            color: color(&mut rng),
        })
        .collect();
    ClassPrototype { background, blobs }
}

/// Signed distance-like coverage in `[0, 1]` with a soft edge.
fn coverage(blob: &Blob, r: f64, c: f64) -> f64 {
    let (dy, dx) = (r - blob.center.0, c - blob.center.1);
    let d = match blob.shape {
        0 => (dy * dy + dx * dx).sqrt() - blob.radius,
        1 => dy.abs().max(dx.abs()) - blob.radius,
        _ => ((dy * dy + dx * dx).sqrt() - 0.7 * blob.radius).abs() - 0.3 * blob.radius,
    };
    1.0 / (1.0 + (d / 0.75).exp())
}

/// Renders one sample of `class`, jittering blob positions, sizes and colours.
pub fn render_sample(seed: u64, class: u32, sample: u64, size: usize, channels: usize) -> Image<f64> {
    let proto = prototype(seed, class, size as f64);
    let mut rng = seeded_rng(derive_seed(seed, &[stream::RENDER, class as u64, sample]));
    let mut normal = |s: f64| rng.sample::<f64, _>(StandardNormal) * s;
    let blobs: Vec<Blob> = proto
        .blobs
        .iter()
        .map(|b| Blob {
            shape: b.shape,
            center: (b.center.0 + normal(1.0), b.center.1 + normal(1.0)),
            radius: b.radius * (1.0 + normal(0.06)),
            color: b.color.map(|v| (v + normal(0.04)).clamp(0.0, 1.0)),
        })
        .collect();
    let mut img = Image::from_fn(channels, size, size, |ch, r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let ch = ch.min(2);
        blobs.iter().fold(proto.background[ch], |acc, b| {
            let a = coverage(b, y, x);
            acc * (1.0 - a) + b.color[ch] * a
        })
    });
    img.clamp_unit();
    img
}

/// Passes an image through 8-bit PPM encoding so in-memory pixels match disk.
fn quantize(img: &Image<f64>, channels: usize) -> Result<Image<f64>> {
    let rgb = Image::<f64>::from_ppm_bytes(&img.to_ppm_bytes())?;
    if channels == 3 {
        return Ok(rgb);
    }
    Image::new(1, rgb.height(), rgb.width(), rgb.plane(0).to_vec())
}

/// Labels and split tags: class ids shuffled by the run seed, the first
/// `test_classes` held out.
pub fn class_layout(cfg: &RunConfig) -> (Vec<u32>, Vec<Split>) {
    let d = &cfg.data;
    let mut classes: Vec<u32> = (0..d.classes as u32).collect();
    classes.shuffle(&mut seeded_rng(derive_seed(cfg.seed, &[stream::SPLIT])));
    let mut test = vec![false; d.classes];
    for &c in &classes[..d.test_classes] {
        test[c as usize] = true;
    }
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for class in 0..d.classes {
        let (split, count) = if test[class] {
            (Split::Test, d.test_per_class)
        } else {
            (Split::Train, d.train_per_class)
        };
        labels.extend(std::iter::repeat_n(class as u32, count));
        splits.extend(std::iter::repeat_n(split, count));
    }
    (labels, splits)
}

/// Builds the whole dataset in memory.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    cfg.validate()?;
    let d = &cfg.data;
    let (labels, splits) = class_layout(cfg);
    check_disjoint_classes(&labels, &splits)?;
    let encoder = SyntheticEncoder::<f64>::new(cfg.features.dim, d.channels, cfg.features.encoder_seed)?;
    let levels = cfg.bank_levels();
    let fov = cfg.transforms.foveation::<f64>();

    let mut map_rng = seeded_rng(derive_seed(cfg.seed, &[stream::NEURAL]));
    let scale = 1.0 / (cfg.features.dim as f64).sqrt();
    let neural_map = Matrix::from_vec(
        d.neural_dim,
        cfg.features.dim,
        (0..d.neural_dim * cfg.features.dim)
            .map(|_| map_rng.sample::<f64, _>(StandardNormal) * scale)
            .collect(),
    );

    let mut seen = vec![0u64; d.classes];
    let ids: Vec<(u32, u64)> = labels
        .iter()
        .map(|&l| {
            let k = seen[l as usize];
            seen[l as usize] += 1;
            (l, k)
        })
        .collect();

    let per_sample: Vec<(Image<f64>, Vec<f32>, Vec<f32>)> = ids
        .par_iter()
        .enumerate()
        .map(|(i, &(class, k))| {
            let img = quantize(
                &render_sample(cfg.seed, class, k, d.image_size, d.channels),
                d.channels,
            )?;
            let clean = encoder.encode_image(&img);
            let mut noise_rng = seeded_rng(derive_seed(cfg.seed, &[stream::NEURAL, i as u64]));
            let neural: Vec<f32> = neural_map
                .matvec(&clean)
                .into_iter()
                .map(|v| (v + noise_rng.sample::<f64, _>(StandardNormal) * d.neural_noise) as f32)
                .collect();
            let vp = cfg
                .transforms
                .view_params::<f64>(derive_seed(cfg.seed, &[stream::NOISE, i as u64, 0]));
            let mut feats = Vec::with_capacity(levels.len() * View::ALL.len() * cfg.features.dim);
            for &level in &levels {
                let views = build_views(&img, &View::ALL, &fov.with_kernel(level), &vp)?;
                for view in &views {
                    feats.extend(encoder.encode_image(view).into_iter().map(|v| v as f32));
                }
            }
            Ok((img, feats, neural))
        })
        .collect::<Result<_>>()?;

    let mut images = Vec::with_capacity(per_sample.len());
    let mut features = Vec::new();
    let mut neural_flat = Vec::new();
    for (img, f, n) in per_sample {
        images.push(img);
        features.extend(f);
        neural_flat.extend(n);
    }
    let bank = EmbeddingBank {
        views: View::ALL.len(),
        dim: cfg.features.dim,
        kernel_levels: levels,
        neural_dim: d.neural_dim,
        labels,
        splits,
        features,
        neural: neural_flat,
    };
    bank.validate()?;
    Ok(Dataset {
        neural: neural_from_bank(&bank),
        images,
        bank,
    })
}

fn neural_from_bank(bank: &EmbeddingBank) -> Vec<Vec<f64>> {
    (0..bank.sample_count())
        .map(|i| bank.neural_vector(i).iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(IMAGE_DIR).join(format!("{index:05}.ppm"))
}

/// Writes the bank and every image; returns the paths written.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir.join(IMAGE_DIR)).map_err(|e| Error::io(dir, e))?;
    let bank_path = dir.join(BANK_FILE);
    dataset.bank.save(&bank_path)?;
    let mut written = vec![bank_path];
    for (i, img) in dataset.images.iter().enumerate() {
        let p = image_path(dir, i);
        img.write_ppm(&p)?;
        written.push(p);
    }
    Ok(written)
}

pub fn load_dataset(dir: &Path, channels: usize) -> Result<Dataset> {
    let bank = load_embedding_bank(&dir.join(BANK_FILE))?;
    let images = (0..bank.sample_count())
        .into_par_iter()
        .map(|i| {
            let rgb = Image::<f64>::read_ppm(&image_path(dir, i))?;
            if channels == 3 {
                Ok(rgb)
            } else {
                Image::new(1, rgb.height(), rgb.width(), rgb.plane(0).to_vec())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        neural: neural_from_bank(&bank),
        images,
        bank,
    })
}
