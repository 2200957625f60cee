//! Multi-source region data model.

use std::collections::BTreeMap;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Storage type of a source's pixel values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    U8,
    U16,
    F32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::U8 => 0,
            Dtype::U16 => 1,
            Dtype::F32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::U8),
            1 => Ok(Dtype::U16),
            2 => Ok(Dtype::F32),
            c => Err(Error::DtypeCode(c)),
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::U16 => 2,
            Dtype::F32 => 4,
        }
    }
}

/// Static description of a sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceProfile {
    pub name: String,
    pub bands: usize,
    pub gsd_m: f64,
    pub height: usize,
    pub width: usize,
    pub dtype: Dtype,
}

impl SourceProfile {
    pub fn new(name: &str, bands: usize, gsd_m: f64, side: usize, dtype: Dtype) -> Self {
        Self {
            name: name.to_string(),
            bands,
            gsd_m,
            height: side,
            width: side,
            dtype,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.is_empty() {
            out.push("profile name is empty".to_string());
        }
        if self.bands == 0 {
            out.push(format!("profile {}: bands must be >= 1", self.name));
        }
        if self.height == 0 || self.width == 0 {
            out.push(format!("profile {}: height and width must be >= 1", self.name));
        }
        out
    }
}

/// Sensor profiles of the reference catalog, by name.
///
/// `sentinel2-scl` is Sentinel-2 with a 14th band holding scene
/// classification labels; it exists for exercising the curation heuristics.
pub fn catalog() -> Vec<SourceProfile> {
    vec![
        SourceProfile::new("satellogic", 4, 1.0, 384, Dtype::U8),
        SourceProfile::new("sentinel1", 2, 10.0, 384, Dtype::U16),
        SourceProfile::new("sentinel2", 13, 10.0, 384, Dtype::U16),
        SourceProfile::new("sentinel2-scl", 14, 10.0, 384, Dtype::U16),
        SourceProfile::new("neon-rgb", 3, 0.1, 640, Dtype::U8),
        SourceProfile::new("neon-hyper", 369, 1.0, 64, Dtype::U16),
        SourceProfile::new("neon-elev", 1, 1.0, 64, Dtype::F32),
    ]
}

pub fn catalog_profile(name: &str) -> Result<SourceProfile> {
    catalog()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownProfile(name.to_string()))
}

/// Acquisition time split into calendar components.
///
/// A zero component is unknown. `hour` holds the encoded hour: 0 for unknown,
/// `h + 1` for an observation at hour-of-day `h` (0..=23).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Timestamp {
    pub year: u16,
    pub month: u8,
    pub day: u8,
    pub hour: u8,
}

impl Timestamp {
    pub const UNKNOWN: Timestamp = Timestamp {
        year: 0,
        month: 0,
        day: 0,
        hour: 0,
    };

    /// A date without hour information.
    pub fn date(year: u16, month: u8, day: u8) -> Self {
        Self {
            year,
            month,
            day,
            hour: 0,
        }
    }

    /// A date observed at `hour_of_day` (0..=23).
    pub fn with_hour(year: u16, month: u8, day: u8, hour_of_day: u8) -> Self {
        Self {
            year,
            month,
            day,
            hour: hour_of_day.saturating_add(1),
        }
    }

    pub fn hour_of_day(&self) -> Option<u8> {
        (1..=24).contains(&self.hour).then(|| self.hour - 1)
    }

    pub fn is_unknown(&self) -> bool {
        *self == Self::UNKNOWN
    }

    /// Stored components `[year, month, day, encoded hour]`.
    pub fn to_array(&self) -> [u16; 4] {
        [self.year, self.month as u16, self.day as u16, self.hour as u16]
    }

    pub fn from_array(a: [u16; 4]) -> Result<Self> {
        let narrow = |v: u16, what: &str| {
            u8::try_from(v).map_err(|_| Error::Metadata(format!("{what} component {v} out of range")))
        };
        Ok(Self {
            year: a[0],
            month: narrow(a[1], "month")?,
            day: narrow(a[2], "day")?,
            hour: narrow(a[3], "hour")?,
        })
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.year != 0 && !(2017..=2022).contains(&self.year) {
            out.push(format!("year {} outside 2017..=2022", self.year));
        }
        if self.month > 12 {
            out.push(format!("month {} > 12", self.month));
        }
        if self.day > 31 {
            out.push(format!("day {} > 31", self.day));
        }
        if self.hour > 24 {
            out.push(format!("encoded hour {} > 24", self.hour));
        }
        out
    }
}

/// Pixel storage for one source, shaped `(time, bands, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Array4<u8>),
    U16(Array4<u16>),
    F32(Array4<f32>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::U8(_) => Dtype::U8,
            TensorData::U16(_) => Dtype::U16,
            TensorData::F32(_) => Dtype::F32,
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        let s = match self {
            TensorData::U8(a) => a.shape(),
            TensorData::U16(a) => a.shape(),
            TensorData::F32(a) => a.shape(),
        };
        [s[0], s[1], s[2], s[3]]
    }

    pub fn len(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values as `f32`, in row-major order.
    pub fn to_f32(&self) -> Array4<f32> {
        match self {
            TensorData::U8(a) => a.mapv(f32::from),
            TensorData::U16(a) => a.mapv(f32::from),
            TensorData::F32(a) => a.clone(),
        }
    }

    /// One timestep as `(bands, height, width)` in `f32`.
    pub fn frame_f32(&self, t: usize) -> ndarray::Array3<f32> {
        match self {
            TensorData::U8(a) => a.index_axis(Axis(0), t).mapv(f32::from),
            TensorData::U16(a) => a.index_axis(Axis(0), t).mapv(f32::from),
            TensorData::F32(a) => a.index_axis(Axis(0), t).to_owned(),
        }
    }

    /// Visit every band's values of every timestep as `f64`.
    pub fn for_each_band<Fn_: FnMut(usize, &mut dyn Iterator<Item = f64>)>(&self, mut f: Fn_) {
        fn visit<T: Copy + Into<f64>>(
            a: &Array4<T>,
            f: &mut dyn FnMut(usize, &mut dyn Iterator<Item = f64>),
        ) {
            for frame in a.axis_iter(Axis(0)) {
                for (b, band) in frame.axis_iter(Axis(0)).enumerate() {
                    f(b, &mut band.iter().map(|&v| v.into()));
                }
            }
        }
        match self {
            TensorData::U8(a) => visit(a, &mut f),
            TensorData::U16(a) => visit(a, &mut f),
            TensorData::F32(a) => visit(a, &mut f),
        }
    }
}

/// One source's observations of a region.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTensor {
    pub profile: SourceProfile,
    pub data: TensorData,
    pub timestamps: Vec<Timestamp>,
}

impl SourceTensor {
    pub fn timesteps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn violations(&self) -> Vec<String> {
        let name = &self.profile.name;
        let mut out = self.profile.violations();
        let [t, c, h, w] = self.data.shape();
        if t == 0 {
            out.push(format!("source {name}: no timesteps"));
        }
        if c != self.profile.bands {
            out.push(format!("source {name}: {c} bands, profile says {}", self.profile.bands));
        }
        if (h, w) != (self.profile.height, self.profile.width) {
            out.push(format!(
                "source {name}: spatial dims {h}x{w}, profile says {}x{}",
                self.profile.height, self.profile.width
            ));
        }
        if self.data.dtype() != self.profile.dtype {
            out.push(format!(
                "source {name}: dtype {:?}, profile says {:?}",
                self.data.dtype(),
                self.profile.dtype
            ));
        }
        if self.timestamps.len() != t {
            out.push(format!(
                "source {name}: {} timestamps for {t} timesteps",
                self.timestamps.len()
            ));
        }
        for ts in &self.timestamps {
            for v in ts.violations() {
                out.push(format!("source {name}: {v}"));
            }
        }
        out
    }
}

/// Longitude/latitude box in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
}

impl Bounds {
    pub fn to_array(self) -> [f64; 4] {
        [self.lon_min, self.lat_min, self.lon_max, self.lat_max]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            lon_min: a[0],
            lat_min: a[1],
            lon_max: a[2],
            lat_max: a[3],
        }
    }
}

/// One geographic location with per-source observations.
///
/// Sources are keyed by name; iteration order is lexicographic.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub region_id: String,
    pub bounds: Bounds,
    pub sources: BTreeMap<String, SourceTensor>,
}

impl Region {
    pub fn source(&self, name: &str) -> Result<&SourceTensor> {
        self.sources
            .get(name)
            .ok_or_else(|| Error::UnknownSource(name.to_string()))
    }
}

/// Every invariant breach of `region`; empty iff the region is valid.
pub fn validate_region(region: &Region) -> Vec<String> {
    let mut out = Vec::new();
    if region.region_id.is_empty() {
        out.push("region_id is empty".to_string());
    }
    let b = region.bounds;
    if !(b.lon_min < b.lon_max) {
        out.push(format!("lon_min {} must be < lon_max {}", b.lon_min, b.lon_max));
    }
    if !(b.lat_min < b.lat_max) {
        out.push(format!("lat_min {} must be < lat_max {}", b.lat_min, b.lat_max));
    }
    if region.sources.is_empty() {
        out.push("no sources".to_string());
    }
    for (key, src) in &region.sources {
        if *key != src.profile.name {
            out.push(format!("source key {key:?} differs from profile name {:?}", src.profile.name));
        }
        if key.len() > u8::MAX as usize {
            out.push(format!("source name {key:?} longer than 255 bytes"));
        }
        out.extend(src.violations());
    }
    out
}

/// `Err` naming the region when it has any violation.
pub fn ensure_valid(region: &Region) -> Result<()> {
    let violations = validate_region(region);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidRegion {
            region_id: region.region_id.clone(),
            violations,
        })
    }
}
