//! Deterministic synthetic regions shaped like the reference sensor catalog.
//!
//! A region is a scene of land-cover classes laid out by a spatial pattern in
//! normalized `[0, 1]²` coordinates, so every source of the region observes
//! the same scene at its own resolution. Each class carries a spectral
//! signature per source that is shared by all regions of a seed. Timestep `k`
//! of a band is `signature · brightness · (1 + k · drift) + noise`.
//!
//! All randomness comes from [`crate::rng::keyed_rng`]: scene layout is keyed
//! by `(seed, region_id)`, signatures by `(seed, source, class)` and pixel
//! noise by `(seed, region_id, source, timestep)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::key;
use crate::region::{catalog_profile, Bounds, Dtype, Region, SourceProfile, SourceTensor, TensorData, Timestamp};
use crate::rng::keyed_rng;
use crate::shard::write_shard;
use crate::{Error, Result};

/// Number of scene-classification labels in the `sentinel2-scl` label band.
pub const SCL_CLASSES: usize = 11;
/// Label values used for clouds in the label band.
pub const SCL_CLOUD_LABELS: [u16; 3] = [8, 9, 10];
const LAND_LABELS: [u16; 6] = [2, 3, 4, 5, 6, 7];
const NOISE_STD: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialPattern {
    SmoothField,
    Blobs,
    Checker,
}

/// Revisit bounds `(min, max)` per catalog source.
pub fn catalog_revisits(name: &str) -> Option<(usize, usize)> {
    Some(match name {
        "satellogic" => (1, 5),
        "sentinel1" => (3, 9),
        "sentinel2" | "sentinel2-scl" => (10, 10),
        "neon-rgb" | "neon-hyper" | "neon-elev" => (3, 3),
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub profiles: Vec<SourceProfile>,
    /// Inclusive revisit range per source name.
    pub revisits: BTreeMap<String, (usize, usize)>,
    pub spatial_pattern: SpatialPattern,
}

impl SynthConfig {
    /// Catalog profiles by name, each with its catalog revisit range.
    pub fn new(seed: u64, profile_names: &[&str]) -> Result<Self> {
        let mut profiles = Vec::new();
        let mut revisits = BTreeMap::new();
        for &name in profile_names {
            let p = catalog_profile(name)?;
            revisits.insert(name.to_string(), catalog_revisits(name).unwrap_or((1, 1)));
            profiles.push(p);
        }
        let cfg = Self {
            seed,
            profiles,
            revisits,
            spatial_pattern: SpatialPattern::Blobs,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Override the revisit range of one source.
    pub fn with_revisits(mut self, name: &str, min: usize, max: usize) -> Result<Self> {
        if !self.profiles.iter().any(|p| p.name == name) {
            return Err(Error::UnknownProfile(name.to_string()));
        }
        self.revisits.insert(name.to_string(), (min, max));
        self.validate()?;
        Ok(self)
    }

    pub fn with_pattern(mut self, pattern: SpatialPattern) -> Self {
        self.spatial_pattern = pattern;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.profiles.is_empty() {
            return Err(Error::InvalidArgument("no profiles".into()));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if let Some(v) = p.violations().into_iter().next() {
                return Err(Error::InvalidArgument(v));
            }
            if self.profiles[..i].iter().any(|q| q.name == p.name) {
                return Err(Error::InvalidArgument(format!("duplicate profile {}", p.name)));
            }
            let (lo, hi) = *self
                .revisits
                .get(&p.name)
                .ok_or_else(|| Error::InvalidArgument(format!("no revisit range for {}", p.name)))?;
            let cap = catalog_revisits(&p.name).map_or(usize::MAX, |(_, hi)| hi);
            if lo == 0 || lo > hi || hi > cap {
                return Err(Error::InvalidArgument(format!(
                    "revisit range {lo}..={hi} for {} outside 1..={cap}",
                    p.name
                )));
            }
        }
        Ok(())
    }
}

/// Spatial scene shared by every source of a region.
struct Scene {
    pattern: SpatialPattern,
    centers: Vec<(f64, f64, usize)>,
    cell: f64,
    checker_salt: u64,
    waves: Vec<(f64, f64, f64)>,
    brightness: Vec<(f64, f64, f64)>,
}

impl Scene {
    fn new(seed: u64, region_id: &str, pattern: SpatialPattern) -> Self {
        let mut rng = keyed_rng(key![seed, "scene", region_id]);
        let n_land = LAND_LABELS.len();
        let centers = (0..3)
            .map(|_| (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen_range(0..n_land)))
            .collect();
        let cell = 1.0 / rng.gen_range(3..8) as f64;
        let checker_salt = rng.gen();
        let mut wave = || {
            let theta = rng.gen::<f64>() * 2.0 * PI;
            let freq = rng.gen_range(1.0..4.0) * 2.0 * PI;
            (freq * theta.cos(), freq * theta.sin(), rng.gen::<f64>() * 2.0 * PI)
        };
        let waves = (0..3).map(|_| wave()).collect();
        let brightness = (0..2).map(|_| wave()).collect();
        Self {
            pattern,
            centers,
            cell,
            checker_salt,
            waves,
            brightness,
        }
    }

    fn wave_sum(waves: &[(f64, f64, f64)], x: f64, y: f64) -> f64 {
        waves.iter().map(|&(kx, ky, ph)| (kx * x + ky * y + ph).sin()).sum::<f64>() / waves.len() as f64
    }

    /// Land class index in `0..LAND_LABELS.len()`.
    fn class_at(&self, x: f64, y: f64) -> usize {
        let n = LAND_LABELS.len();
        match self.pattern {
            SpatialPattern::Blobs => {
                let mut best = (f64::INFINITY, 0);
                for &(cx, cy, c) in &self.centers {
                    let d = (x - cx).powi(2) + (y - cy).powi(2);
                    if d < best.0 {
                        best = (d, c);
                    }
                }
                best.1
            }
            SpatialPattern::Checker => {
                let i = (x / self.cell).floor() as u64;
                let j = (y / self.cell).floor() as u64;
                let h = crate::rng::derive_key(key![self.checker_salt, i, j]);
                (h % n as u64) as usize
            }
            SpatialPattern::SmoothField => {
                let v = Self::wave_sum(&self.waves, x, y);
                (((v + 1.0) * 0.5 * n as f64).floor() as usize).min(n - 1)
            }
        }
    }

    fn brightness_at(&self, x: f64, y: f64) -> f64 {
        1.0 + 0.15 * Self::wave_sum(&self.brightness, x, y)
    }
}

/// Per-class spectral signature in `[0.05, 0.95]` for every band of `profile`.
fn signatures(seed: u64, profile: &SourceProfile) -> Array2<f64> {
    let n = LAND_LABELS.len();
    let mut sig = Array2::zeros((n, profile.bands));
    for c in 0..n {
        let mut rng = keyed_rng(key![seed, "signature", profile.name.as_str(), c]);
        let level = rng.gen_range(0.25..0.75);
        let amp = rng.gen_range(0.1..0.3);
        let freq = rng.gen_range(0.5..2.5);
        let phase = rng.gen::<f64>() * 2.0 * PI;
        for b in 0..profile.bands {
            let u = b as f64 / profile.bands as f64;
            sig[[c, b]] = (level + amp * (2.0 * PI * freq * u + phase).sin()).clamp(0.05, 0.95);
        }
    }
    sig
}

fn timestamps(seed: u64, region_id: &str, source: &str, t: usize) -> Vec<Timestamp> {
    let mut rng = keyed_rng(key![seed, "dates", region_id, source]);
    let start = chrono::NaiveDate::from_ymd_opt(2017, 1, 1).unwrap();
    let end = chrono::NaiveDate::from_ymd_opt(2022, 12, 31).unwrap();
    let mut day = start + chrono::Days::new(rng.gen_range(0..4 * 365));
    let mut out = Vec::with_capacity(t);
    for _ in 0..t {
        use chrono::Datelike;
        out.push(Timestamp::with_hour(
            day.year() as u16,
            day.month() as u8,
            day.day() as u8,
            rng.gen_range(8..15),
        ));
        day = (day + chrono::Days::new(rng.gen_range(5..60))).min(end);
    }
    out
}

fn quantize(v: f64, dtype: Dtype) -> f64 {
    match dtype {
        Dtype::U8 => (v * 255.0).round().clamp(0.0, 255.0),
        Dtype::U16 => (v * 10_000.0).round().clamp(0.0, 65_535.0),
        Dtype::F32 => v,
    }
}

fn synth_source(config: &SynthConfig, scene: &Scene, region_id: &str, profile: &SourceProfile) -> SourceTensor {
    let seed = config.seed;
    let (lo, hi) = config.revisits[&profile.name];
    let t = keyed_rng(key![seed, "revisits", region_id, profile.name.as_str()]).gen_range(lo..=hi);
    let (h, w) = (profile.height, profile.width);
    let with_labels = profile.name == "sentinel2-scl";
    let spectral = if with_labels { profile.bands - 1 } else { profile.bands };
    let sig = signatures(seed, &SourceProfile { bands: spectral.max(1), ..profile.clone() });

    let mut class = Array2::<usize>::zeros((h, w));
    let mut bright = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        let y = (i as f64 + 0.5) / h as f64;
        for j in 0..w {
            let x = (j as f64 + 0.5) / w as f64;
            class[[i, j]] = scene.class_at(x, y);
            bright[[i, j]] = scene.brightness_at(x, y);
        }
    }
    let mut drift_rng = keyed_rng(key![seed, "drift", region_id, profile.name.as_str()]);
    let drift: Vec<f64> = (0..spectral).map(|_| drift_rng.gen_range(-0.05..0.05)).collect();

    let mut values = Array4::<f64>::zeros((t, profile.bands, h, w));
    for k in 0..t {
        let mut rng = keyed_rng(key![seed, "pixels", region_id, profile.name.as_str(), k]);
        let clouds: Vec<(f64, f64, f64)> = if with_labels {
            (0..rng.gen_range(0..3))
                .map(|_| (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen_range(0.05..0.3)))
                .collect()
        } else {
            Vec::new()
        };
        let cloud_label = |i: usize, j: usize| -> Option<u16> {
            let (y, x) = ((i as f64 + 0.5) / h as f64, (j as f64 + 0.5) / w as f64);
            clouds.iter().enumerate().find_map(|(n, &(cx, cy, r))| {
                ((x - cx).powi(2) + (y - cy).powi(2) < r * r).then_some(SCL_CLOUD_LABELS[n % 3])
            })
        };
        for b in 0..spectral {
            let gain = 1.0 + k as f64 * drift[b];
            for i in 0..h {
                for j in 0..w {
                    let noise: f64 = rng.sample::<f64, _>(StandardNormal) * NOISE_STD;
                    let clear = sig[[class[[i, j]], b]] * bright[[i, j]] * gain;
                    let v = if with_labels && cloud_label(i, j).is_some() { 0.9 } else { clear };
                    values[[k, b, i, j]] = quantize((v + noise).clamp(0.0, 1.0), profile.dtype);
                }
            }
        }
        if with_labels {
            for i in 0..h {
                for j in 0..w {
                    let label = cloud_label(i, j).unwrap_or(LAND_LABELS[class[[i, j]]]);
                    values[[k, spectral, i, j]] = label as f64;
                }
            }
        }
    }
    let data = match profile.dtype {
        Dtype::U8 => TensorData::U8(values.mapv(|v| v as u8)),
        Dtype::U16 => TensorData::U16(values.mapv(|v| v as u16)),
        Dtype::F32 => TensorData::F32(values.mapv(|v| v as f32)),
    };
    SourceTensor {
        profile: profile.clone(),
        data,
        timestamps: timestamps(seed, region_id, &profile.name, t),
    }
}

/// Generate the region `region_id`; a pure function of `(config, region_id)`.
pub fn synth_region(config: &SynthConfig, region_id: &str) -> Result<Region> {
    config.validate()?;
    let scene = Scene::new(config.seed, region_id, config.spatial_pattern);
    let mut rng = keyed_rng(key![config.seed, "bounds", region_id]);
    let lon_min = rng.gen_range(-179.0..179.0);
    let lat_min = rng.gen_range(-60.0..60.0);
    let extent_m = config
        .profiles
        .iter()
        .map(|p| p.gsd_m * p.height.max(p.width) as f64)
        .fold(0.0f64, f64::max)
        .max(1.0);
    let extent_deg = extent_m / 111_320.0;
    let bounds = Bounds {
        lon_min,
        lat_min,
        lon_max: lon_min + extent_deg,
        lat_max: lat_min + extent_deg,
    };
    let sources = config
        .profiles
        .iter()
        .map(|p| (p.name.clone(), synth_source(config, &scene, region_id, p)))
        .collect();
    Ok(Region {
        region_id: region_id.to_string(),
        bounds,
        sources,
    })
}

pub fn region_id(index: usize) -> String {
    format!("region-{index:06}")
}

/// Generate `n_regions` regions into `ceil(n_regions / shard_size)` shard files.
pub fn synth_dataset(
    config: &SynthConfig,
    n_regions: usize,
    out_dir: impl AsRef<Path>,
    shard_size: usize,
) -> Result<Vec<PathBuf>> {
    if n_regions == 0 || shard_size == 0 {
        return Err(Error::InvalidArgument("n_regions and shard_size must be >= 1".into()));
    }
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let n_shards = n_regions.div_ceil(shard_size);
    let mut paths = Vec::with_capacity(n_shards);
    for s in 0..n_shards {
        let ids: Vec<usize> = (s * shard_size..((s + 1) * shard_size).min(n_regions)).collect();
        let regions = ids
            .par_iter()
            .map(|&i| synth_region(config, &region_id(i)))
            .collect::<Result<Vec<_>>>()?;
        let path = out_dir.join(format!("shard-{s:05}.evsh"));
        write_shard(&regions, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Shard files (`*.evsh`) in `dir`, sorted by name. A file path is returned as is.
pub fn shard_paths(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if dir.is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "evsh"))
        .collect();
    out.sort();
    Ok(out)
}

/// Read every region of every shard in `dir`.
pub fn load_regions(dir: impl AsRef<Path>) -> Result<Vec<Region>> {
    let mut out = Vec::new();
    for p in shard_paths(dir)? {
        out.extend(crate::shard::read_shard(&p)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::region::validate_region;

    #[test]
    fn toy_profile_region_is_valid_and_deterministic() {
        let cfg = SynthConfig::new(3, &["neon-elev", "neon-rgb"]).unwrap();
        let a = synth_region(&cfg, "x").unwrap();
        let b = synth_region(&cfg, "x").unwrap();
        assert!(validate_region(&a).is_empty());
        assert_eq!(a, b);
        assert_eq!(a.source("neon-elev").unwrap().data.shape(), [3, 1, 64, 64]);
        assert_eq!(a.source("neon-rgb").unwrap().data.shape(), [3, 3, 640, 640]);
    }

    #[test]
    fn different_ids_differ() {
        let cfg = SynthConfig::new(3, &["neon-elev"]).unwrap();
        assert_ne!(synth_region(&cfg, "a").unwrap().sources, synth_region(&cfg, "b").unwrap().sources);
    }

    #[test]
    fn revisit_bounds_are_enforced() {
        let cfg = SynthConfig::new(0, &["satellogic"]).unwrap();
        assert!(cfg.clone().with_revisits("satellogic", 1, 5).is_ok());
        assert!(cfg.clone().with_revisits("satellogic", 1, 6).is_err());
        assert!(cfg.clone().with_revisits("satellogic", 0, 2).is_err());
        assert!(cfg.with_revisits("sentinel2", 1, 2).is_err());
        assert!(matches!(SynthConfig::new(0, &["landsat"]), Err(Error::UnknownProfile(_))));
    }

    #[test]
    fn timestamps_nondecreasing_in_range() {
        let cfg = SynthConfig::new(11, &["sentinel1"]).unwrap();
        for id in ["a", "b", "c", "d"] {
            let r = synth_region(&cfg, id).unwrap();
            let ts = &r.source("sentinel1").unwrap().timestamps;
            assert!(ts.windows(2).all(|w| w[0] <= w[1]));
            assert!(ts.iter().all(|t| (2017..=2022).contains(&t.year)));
        }
    }

    #[test]
    fn label_band_holds_scl_classes() {
        let cfg = SynthConfig::new(5, &["sentinel2-scl"]).unwrap().with_revisits("sentinel2-scl", 2, 2).unwrap();
        let r = synth_region(&cfg, "scl").unwrap();
        let TensorData::U16(a) = &r.source("sentinel2-scl").unwrap().data else { panic!() };
        assert!(a.slice(ndarray::s![.., 13, .., ..]).iter().all(|&v| (v as usize) < SCL_CLASSES && v >= 2));
    }

    #[test]
    fn patterns_all_generate() {
        for pat in [SpatialPattern::SmoothField, SpatialPattern::Blobs, SpatialPattern::Checker] {
            let cfg = SynthConfig::new(1, &["neon-elev"]).unwrap().with_pattern(pat);
            assert!(validate_region(&synth_region(&cfg, "p").unwrap()).is_empty());
        }
    }
}
