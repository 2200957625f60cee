//! Source tensors to token sequences: band standardization, bilinear resize
//! to the common grid, patchify and a per-source linear embedding.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::region::{SourceProfile, SourceTensor, TensorData};
use crate::{Error, Result, IMAGE_SIZE, NUM_PATCHES, PATCH_SIZE};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Bilinear resize of a `(c, h, w)` image to `(c, out, out)` with
/// corner-aligned sampling.
pub fn resize_bilinear(image: ArrayView3<'_, f32>, out: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    if h == out && w == out {
        return image.to_owned();
    }
    let coords = |n_in: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let src = if out > 1 && n_in > 1 {
                    i as f64 * (n_in - 1) as f64 / (out - 1) as f64
                } else {
                    0.0
                };
                let lo = (src.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = coords(h);
    let xs = coords(w);
    let mut result = Array3::zeros((c, out, out));
    for b in 0..c {
        let src = image.index_axis(Axis(0), b);
        let mut dst = result.index_axis_mut(Axis(0), b);
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[[y0, x0]] + (src[[y0, x1]] - src[[y0, x0]]) * fx;
                let bottom = src[[y1, x0]] + (src[[y1, x1]] - src[[y1, x0]]) * fx;
                dst[[i, j]] = top + (bottom - top) * fy;
            }
        }
    }
    result
}

/// Per-band mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub epsilon: f64,
}

impl BandStats {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    /// Identity statistics (mean 0, std 1).
    pub fn identity(bands: usize, epsilon: f64) -> Self {
        Self {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
            epsilon,
        }
    }

    /// The same statistics rounded to `f32` precision, so that they survive a
    /// round trip through `f32` storage unchanged.
    pub fn rounded_to_f32(&self) -> Self {
        let r = |v: &Vec<f64>| v.iter().map(|&x| x as f32 as f64).collect();
        Self {
            mean: r(&self.mean),
            std: r(&self.std),
            epsilon: self.epsilon,
        }
    }
}

/// Running count/mean/M2 per band, merged chunk-wise.
#[derive(Debug, Clone)]
struct Moments {
    n: Vec<f64>,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(bands: usize) -> Self {
        Self {
            n: vec![0.0; bands],
            mean: vec![0.0; bands],
            m2: vec![0.0; bands],
        }
    }

    fn merge_chunk(&mut self, b: usize, values: &[f64]) {
        if values.is_empty() {
            return;
        }
        let nb = values.len() as f64;
        let mb = values.iter().sum::<f64>() / nb;
        let m2b: f64 = values.iter().map(|v| (v - mb) * (v - mb)).sum();
        let na = self.n[b];
        let n = na + nb;
        let delta = mb - self.mean[b];
        self.mean[b] += delta * nb / n;
        self.m2[b] += m2b + delta * delta * na * nb / n;
        self.n[b] = n;
    }
}

/// Band statistics over every pixel and timestep of a stream of tensors.
pub fn compute_band_stats<'a, I>(stream: I, epsilon: f64) -> Result<BandStats>
where
    I: IntoIterator<Item = &'a SourceTensor>,
{
    let mut moments: Option<Moments> = None;
    let mut buf = Vec::new();
    for tensor in stream {
        let bands = tensor.data.shape()[1];
        let m = moments.get_or_insert_with(|| Moments::new(bands));
        if m.n.len() != bands {
            return Err(Error::Shape(format!("stream mixes {} and {bands} bands", m.n.len())));
        }
        tensor.data.for_each_band(|b, values| {
            buf.clear();
            buf.extend(values);
            m.merge_chunk(b, &buf);
        });
    }
    let m = moments.ok_or(Error::Empty("tensor stream"))?;
    Ok(BandStats {
        std: m.m2.iter().zip(&m.n).map(|(m2, n)| (m2 / n).max(0.0).sqrt()).collect(),
        mean: m.mean,
        epsilon,
    })
}

/// `(x - mean_b) / (std_b + epsilon)` per band.
pub fn standardize(tensor: &SourceTensor, stats: &BandStats) -> Result<Array4<f32>> {
    let [t, c, h, w] = tensor.data.shape();
    if c != stats.bands() {
        return Err(Error::Shape(format!("tensor has {c} bands, stats have {}", stats.bands())));
    }
    let mut out = Array4::zeros((t, c, h, w));
    for k in 0..t {
        let frame = tensor.data.frame_f32(k);
        for b in 0..c {
            let (mean, scale) = (stats.mean[b], 1.0 / (stats.std[b] + stats.epsilon));
            out.slice_mut(s![k, b, .., ..])
                .zip_mut_with(&frame.index_axis(Axis(0), b), |o, &x| {
                    *o = ((x as f64 - mean) * scale) as f32;
                });
        }
    }
    Ok(out)
}

/// Split a `(c, H, W)` image into `(H/patch)·(W/patch)` rows of length
/// `c·patch²`; patches are row-major over the grid, each flattened band-major
/// then row-major over pixels.
pub fn patchify(image: ArrayView3<'_, f32>, patch: usize) -> Result<Array2<f32>> {
    let (c, h, w) = image.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::NonDivisible(format!("{h}x{w} by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let mut out = Array2::zeros((gh * gw, dim));
    for gi in 0..gh {
        for gj in 0..gw {
            let mut row = out.row_mut(gi * gw + gj);
            let mut k = 0;
            for b in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        row[k] = image[[b, gi * patch + py, gj * patch + px]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] for a square `grid x grid` patch layout.
pub fn unpatchify(patches: ArrayView2<'_, f32>, bands: usize, patch: usize) -> Result<Array3<f32>> {
    let (p, dim) = patches.dim();
    let grid = (p as f64).sqrt().round() as usize;
    if grid * grid != p {
        return Err(Error::Shape(format!("{p} patches do not form a square grid")));
    }
    if dim != bands * patch * patch {
        return Err(Error::Shape(format!("row length {dim} != {bands}·{patch}²")));
    }
    let side = grid * patch;
    let mut img = Array3::zeros((bands, side, side));
    for gi in 0..grid {
        for gj in 0..grid {
            let row = patches.row(gi * grid + gj);
            let mut k = 0;
            for b in 0..bands {
                for py in 0..patch {
                    for px in 0..patch {
                        img[[b, gi * patch + py, gj * patch + px]] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Patch rows of every timestep: standardize (or cast, in raw mode), resize
/// to the common grid and patchify. Output `(t, NUM_PATCHES, c·PATCH_SIZE²)`.
pub fn prepare_patches(tensor: &SourceTensor, stats: Option<&BandStats>) -> Result<Array3<f32>> {
    let [t, c, _, _] = tensor.data.shape();
    let frames = match stats {
        Some(st) => standardize(tensor, st)?,
        None => tensor.data.to_f32(),
    };
    let dim = c * PATCH_SIZE * PATCH_SIZE;
    let mut out = Array3::zeros((t, NUM_PATCHES, dim));
    for k in 0..t {
        let resized = resize_bilinear(frames.index_axis(Axis(0), k), IMAGE_SIZE);
        out.index_axis_mut(Axis(0), k).assign(&patchify(resized.view(), PATCH_SIZE)?);
    }
    Ok(out)
}

/// Linear patch embedding of one source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceWeights {
    /// `(bands·PATCH_SIZE², width)`
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

/// One linear patch embedding per source name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenizerWeights {
    pub sources: BTreeMap<String, SourceWeights>,
}

impl TokenizerWeights {
    pub fn insert(&mut self, name: &str, weights: SourceWeights) -> Result<()> {
        if weights.weight.ncols() != weights.bias.len() {
            return Err(Error::Shape("bias length differs from output width".into()));
        }
        if weights.weight.iter().chain(weights.bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tokenizer weights for {name}")));
        }
        self.sources.insert(name.to_string(), weights);
        Ok(())
    }

    pub fn zeros(profiles: &[SourceProfile], width: usize) -> Self {
        let sources = profiles
            .iter()
            .map(|p| {
                let w = SourceWeights {
                    weight: Array2::zeros((p.bands * PATCH_SIZE * PATCH_SIZE, width)),
                    bias: Array1::zeros(width),
                };
                (p.name.clone(), w)
            })
            .collect();
        Self { sources }
    }
}

fn embed(patches: Array3<f32>, weights: &SourceWeights) -> Result<Array3<f32>> {
    let (t, p, dim) = patches.dim();
    if dim != weights.weight.nrows() {
        return Err(Error::Shape(format!(
            "patch length {dim} != tokenizer input {}",
            weights.weight.nrows()
        )));
    }
    let flat = patches.into_shape_with_order((t * p, dim)).expect("contiguous");
    let tokens = flat.dot(&weights.weight) + &weights.bias;
    Ok(tokens
        .into_shape_with_order((t, p, weights.weight.ncols()))
        .expect("contiguous"))
}

/// Tokens `(t, NUM_PATCHES, width)` for one source.
pub fn tokenize_source(tensor: &SourceTensor, weights: &TokenizerWeights, stats: &BandStats) -> Result<Array3<f32>> {
    let w = weights
        .sources
        .get(&tensor.profile.name)
        .ok_or_else(|| Error::UnknownSource(tensor.profile.name.clone()))?;
    embed(prepare_patches(tensor, Some(stats))?, w)
}

/// [`tokenize_source`] without standardization.
pub fn tokenize_source_raw(tensor: &SourceTensor, weights: &TokenizerWeights) -> Result<Array3<f32>> {
    let w = weights
        .sources
        .get(&tensor.profile.name)
        .ok_or_else(|| Error::UnknownSource(tensor.profile.name.clone()))?;
    embed(prepare_patches(tensor, None)?, w)
}

/// Split a source into band groups, each becoming a source named
/// `"{name}:{group}"`. Groups must be disjoint, nonempty and in range.
pub fn split_band_groups(tensor: &SourceTensor, groups: &[(&str, &[usize])]) -> Result<Vec<SourceTensor>> {
    let bands = tensor.profile.bands;
    let mut used = vec![false; bands];
    let mut out = Vec::with_capacity(groups.len());
    for &(label, idx) in groups {
        if idx.is_empty() || idx.iter().any(|&b| b >= bands) {
            return Err(Error::InvalidArgument(format!("band group {label} {idx:?} of {bands} bands")));
        }
        for &b in idx {
            if std::mem::replace(&mut used[b], true) {
                return Err(Error::InvalidArgument(format!("band {b} in several groups")));
            }
        }
        let data = match &tensor.data {
            TensorData::U8(a) => TensorData::U8(a.select(Axis(1), idx)),
            TensorData::U16(a) => TensorData::U16(a.select(Axis(1), idx)),
            TensorData::F32(a) => TensorData::F32(a.select(Axis(1), idx)),
        };
        let profile = SourceProfile {
            name: format!("{}:{label}", tensor.profile.name),
            bands: idx.len(),
            ..tensor.profile.clone()
        };
        out.push(SourceTensor {
            profile,
            data,
            timestamps: tensor.timestamps.clone(),
        });
    }
    Ok(out)
}

/// Sentinel-2 band indices grouped by native resolution, for the band order
/// B1, B2, B3, B4, B5, B6, B7, B8, B8A, B9, B10, B11, B12.
pub const SENTINEL2_RESOLUTION_GROUPS: [(&str, &[usize]); 3] = [
    ("10m", &[1, 2, 3, 7]),
    ("20m", &[4, 5, 6, 8, 11, 12]),
    ("60m", &[0, 9, 10]),
];
