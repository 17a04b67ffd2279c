//! Feature providers: turn view stacks into per-view feature matrices.
//!
//! Two providers exist. The synthetic encoder is a fixed random projection of
//! pooled pixels and works on images directly. Embedding banks hold features
//! computed elsewhere at a discrete set of blur kernel sizes.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::linalg::{l2_norm, Matrix};
use crate::rng::seeded_rng;
use crate::scalar::Scalar;
use crate::transforms::{build_views, FoveationParams, View, ViewParams};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

/// `V × d_v` matrix, one row per view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatureSet<T>(pub Matrix<T>);

impl<T: Scalar> ViewFeatureSet<T> {
    pub fn new(rows: Matrix<T>) -> Result<Self> {
        if rows.rows() == 0 || rows.cols() == 0 {
            return Err(Error::Contract(
                "feature set needs at least one view and one dimension".into(),
            ));
        }
        if rows.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                message: "non-finite view feature".into(),
                dump: None,
            });
        }
        Ok(Self(rows))
    }

    pub fn views(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, v: usize) -> &[T] {
        self.0.row(v)
    }
}

/// Side length of the pooling grid used by the synthetic encoder.
pub const POOL_GRID: usize = 16;

/// Average-pools each view to a 16×16×C grid, centres the pooled values at ½,
/// projects with a fixed Gaussian matrix and L2-normalizes.
#[derive(Clone, Debug)]
pub struct SyntheticEncoder<T> {
    projection: Matrix<T>,
    channels: usize,
}

impl<T: Scalar> SyntheticEncoder<T> {
    pub fn new(dim: usize, channels: usize, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!(
                "encoder dimension must be >= 2, got {dim}"
            )));
        }
        let inputs = POOL_GRID * POOL_GRID * channels;
        let mut rng = seeded_rng(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let data = (0..dim * inputs)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal) * scale))
            .collect();
        Ok(Self {
            projection: Matrix::from_vec(dim, inputs, data),
            channels,
        })
    }

    pub fn dim(&self) -> usize {
        self.projection.rows()
    }

    pub fn projection(&self) -> &Matrix<T> {
        &self.projection
    }

    /// Centred pooled grid, flattened channel-major.
    pub fn pool(&self, image: &Image<T>) -> Vec<T> {
        assert_eq!(image.channels(), self.channels, "channel count mismatch");
        let (h, w) = (image.height(), image.width());
        let rows = cell_bounds(h);
        let cols = cell_bounds(w);
        let half = T::lit(0.5);
        let mut out = Vec::with_capacity(POOL_GRID * POOL_GRID * self.channels);
        for c in 0..self.channels {
            let plane = image.plane(c);
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut acc = T::zero();
                    for r in r0..r1 {
                        for x in c0..c1 {
                            acc += plane[r * w + x];
                        }
                    }
                    let area = T::from_usize((r1 - r0) * (c1 - c0)).unwrap();
                    out.push(acc / area - half);
                }
            }
        }
        out
    }

    pub fn encode_image(&self, image: &Image<T>) -> Vec<T> {
        let raw = self.projection.matvec(&self.pool(image));
        let norm = l2_norm(&raw).max(T::lit(1e-12));
        raw.into_iter().map(|v| v / norm).collect()
    }

    pub fn encode(&self, views: &[Image<T>]) -> Result<ViewFeatureSet<T>> {
        let rows: Vec<Vec<T>> = views.iter().map(|v| self.encode_image(v)).collect();
        ViewFeatureSet::new(Matrix::from_rows(&rows))
    }
}

/// Pixel ranges covered by each pooling cell; every cell holds at least one pixel.
fn cell_bounds(n: usize) -> Vec<(usize, usize)> {
    (0..POOL_GRID)
        .map(|i| {
            let start = (i * n / POOL_GRID).min(n - 1);
            let end = ((i + 1) * n / POOL_GRID).max(start + 1).min(n);
            (start, end)
        })
        .collect()
}

/// One-shot form of [`SyntheticEncoder::encode`].
pub fn synthetic_encode<T: Scalar>(views: &[Image<T>], dim: usize, seed: u64) -> Result<ViewFeatureSet<T>> {
    let channels = views
        .first()
        .ok_or_else(|| Error::Contract("no views to encode".into()))?
        .channels();
    SyntheticEncoder::new(dim, channels, seed)?.encode(views)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Precomputed view features at several kernel levels, plus the paired
/// neural vectors, labels and split tags.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBank {
    pub views: usize,
    pub dim: usize,
    pub kernel_levels: Vec<u32>,
    pub neural_dim: usize,
    pub labels: Vec<u32>,
    pub splits: Vec<Split>,
    /// `[sample][level][view][dim]`, flattened.
    pub features: Vec<f32>,
    /// `[sample][neural_dim]`, flattened.
    pub neural: Vec<f32>,
}

pub const BANK_MAGIC: &[u8; 4] = b"BICP";
pub const BANK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BankHeader {
    sample_count: usize,
    views: usize,
    dim: usize,
    kernel_levels: Vec<u32>,
    neural_dim: usize,
    labels: Vec<u32>,
    splits: Vec<Split>,
}

impl EmbeddingBank {
    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    fn block(&self) -> usize {
        self.views * self.dim
    }

    /// `V × d_v` features of `sample` at level index `level`.
    pub fn level_features(&self, sample: usize, level: usize) -> &[f32] {
        let n = self.block();
        let start = (sample * self.kernel_levels.len() + level) * n;
        &self.features[start..start + n]
    }

    pub fn neural_vector(&self, sample: usize) -> &[f32] {
        &self.neural[sample * self.neural_dim..(sample + 1) * self.neural_dim]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.sample_count())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    /// Checks shapes, finiteness, level ordering and zero-shot disjointness.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if self.splits.len() != n {
            return Err(Error::Format(format!(
                "{} labels but {} split tags",
                n,
                self.splits.len()
            )));
        }
        if self.views == 0 || self.dim == 0 || self.neural_dim == 0 {
            return Err(Error::Format("bank dimensions must be positive".into()));
        }
        if self.kernel_levels.is_empty() {
            return Err(Error::Format("bank declares no kernel levels".into()));
        }
        if self.kernel_levels.windows(2).any(|w| w[0] >= w[1])
            || self.kernel_levels.iter().any(|k| k % 2 == 0)
        {
            return Err(Error::Format(format!(
                "kernel levels must be strictly increasing odd integers, got {:?}",
                self.kernel_levels
            )));
        }
        let want = n * self.kernel_levels.len() * self.block();
        if self.features.len() != want {
            return Err(Error::Format(format!(
                "feature payload has {} values, expected {want}: missing kernel level data",
                self.features.len()
            )));
        }
        if self.neural.len() != n * self.neural_dim {
            return Err(Error::Format("neural payload length mismatch".into()));
        }
        if self.features.iter().chain(&self.neural).any(|v| !v.is_finite()) {
            return Err(Error::Format("bank contains NaN or infinite values".into()));
        }
        check_disjoint_classes(&self.labels, &self.splits)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = BankHeader {
            sample_count: self.labels.len(),
            views: self.views,
            dim: self.dim,
            kernel_levels: self.kernel_levels.clone(),
            neural_dim: self.neural_dim,
            labels: self.labels.clone(),
            splits: self.splits.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(12 + text.len() + 4 * (self.features.len() + self.neural.len()));
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let block = self.block() * self.kernel_levels.len();
        for s in 0..self.labels.len() {
            for v in &self.features[s * block..(s + 1) * block] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in self.neural_vector(s) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut reader = ByteReader::new(bytes);
        if reader.take(4)? != BANK_MAGIC {
            return Err(Error::Format("bad embedding bank magic".into()));
        }
        let version = reader.u32()?;
        if version != BANK_VERSION {
            return Err(Error::Format(format!("unsupported bank version {version}")));
        }
        let len = reader.u32()? as usize;
        let text = std::str::from_utf8(reader.take(len)?)
            .map_err(|_| Error::Format("bank header is not UTF-8".into()))?;
        let header: BankHeader =
            toml::from_str(text).map_err(|e| Error::Format(format!("bank header: {e}")))?;
        if header.labels.len() != header.sample_count {
            return Err(Error::Format(format!(
                "header declares {} samples but lists {} labels",
                header.sample_count,
                header.labels.len()
            )));
        }
        let block = header.views * header.dim * header.kernel_levels.len();
        let mut features = Vec::with_capacity(header.sample_count * block);
        let mut neural = Vec::with_capacity(header.sample_count * header.neural_dim);
        for _ in 0..header.sample_count {
            for _ in 0..block {
                features.push(
                    reader
                        .f32()
                        .map_err(|_| Error::Format("truncated payload: missing kernel level data".into()))?,
                );
            }
            for _ in 0..header.neural_dim {
                neural.push(reader.f32()?);
            }
        }
        if !reader.is_empty() {
            return Err(Error::Format("trailing bytes after bank payload".into()));
        }
        let bank = EmbeddingBank {
            views: header.views,
            dim: header.dim,
            kernel_levels: header.kernel_levels,
            neural_dim: header.neural_dim,
            labels: header.labels,
            splits: header.splits,
            features,
            neural,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads and fully validates an embedding bank file.
pub fn load_embedding_bank(path: &Path) -> Result<EmbeddingBank> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingBank::from_bytes(&bytes)
}

/// Zero-shot rule: no class may appear in both splits.
pub fn check_disjoint_classes(labels: &[u32], splits: &[Split]) -> Result<()> {
    let train: BTreeSet<u32> = labels
        .iter()
        .zip(splits)
        .filter(|(_, s)| **s == Split::Train)
        .map(|(l, _)| *l)
        .collect();
    let overlap: Vec<u32> = labels
        .iter()
        .zip(splits)
        .filter(|(l, s)| **s == Split::Test && train.contains(l))
        .map(|(l, _)| *l)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(Error::Protocol(format!(
            "classes {overlap:?} appear in both train and test splits"
        )))
    }
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format("unexpected end of file".into())),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Index into `levels` nearest to `k`, ties going to the larger level.
/// Also reports whether `k` fell outside `[min, max]`.
pub fn nearest_level(levels: &[u32], k: u32) -> (usize, bool) {
    let out_of_range = k < levels[0] || k > levels[levels.len() - 1];
    let mut best = 0;
    for (i, &l) in levels.iter().enumerate() {
        let d = l.abs_diff(k);
        let bd = levels[best].abs_diff(k);
        if d < bd || (d == bd && l > levels[best]) {
            best = i;
        }
    }
    (best, out_of_range)
}

/// What the trainer asks a provider for.
#[derive(Clone, Copy, Debug)]
pub struct SampleRequest {
    pub index: usize,
    pub kernel_size: u32,
    /// Seed for the noise view.
    pub noise_seed: u64,
}

pub enum FeatureProvider<'a, T> {
    Synthetic {
        encoder: SyntheticEncoder<T>,
        images: &'a [Image<T>],
        foveation: FoveationParams<T>,
        view_params: ViewParams<T>,
    },
    Bank {
        bank: &'a EmbeddingBank,
        out_of_range: AtomicUsize,
    },
}

impl<'a, T: Scalar> FeatureProvider<'a, T> {
    pub fn bank(bank: &'a EmbeddingBank) -> Self {
        FeatureProvider::Bank {
            bank,
            out_of_range: AtomicUsize::new(0),
        }
    }

    /// Number of requests whose kernel size had to be clamped to the bank range.
    pub fn clamp_warnings(&self) -> usize {
        match self {
            FeatureProvider::Bank { out_of_range, .. } => out_of_range.load(Ordering::Relaxed),
            FeatureProvider::Synthetic { .. } => 0,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureProvider::Synthetic { encoder, .. } => encoder.dim(),
            FeatureProvider::Bank { bank, .. } => bank.dim,
        }
    }
}

/// Features for the requested views of one sample.
pub fn encode_views<T: Scalar>(
    provider: &FeatureProvider<'_, T>,
    views: &[View],
    sample: SampleRequest,
) -> Result<ViewFeatureSet<T>> {
    match provider {
        FeatureProvider::Synthetic {
            encoder,
            images,
            foveation,
            view_params,
        } => {
            let image = images
                .get(sample.index)
                .ok_or_else(|| Error::Contract(format!("sample {} has no image", sample.index)))?;
            let vp = ViewParams {
                noise_seed: sample.noise_seed,
                ..view_params.clone()
            };
            let stack = build_views(image, views, &foveation.with_kernel(sample.kernel_size), &vp)?;
            encoder.encode(&stack)
        }
        FeatureProvider::Bank { bank, out_of_range } => {
            if sample.index >= bank.sample_count() {
                return Err(Error::Contract(format!("sample {} not in bank", sample.index)));
            }
            if views.iter().any(|v| v.index() >= bank.views) {
                return Err(Error::Config(format!(
                    "bank holds {} views, cannot serve {views:?}",
                    bank.views
                )));
            }
            let (level, clamped) = nearest_level(&bank.kernel_levels, sample.kernel_size);
            if clamped {
                out_of_range.fetch_add(1, Ordering::Relaxed);
            }
            let block = bank.level_features(sample.index, level);
            let rows: Vec<Vec<T>> = views
                .iter()
                .map(|v| {
                    block[v.index() * bank.dim..(v.index() + 1) * bank.dim]
                        .iter()
                        .map(|&x| T::lit(x as f64))
                        .collect()
                })
                .collect();
            ViewFeatureSet::new(Matrix::from_rows(&rows))
        }
    }
}
