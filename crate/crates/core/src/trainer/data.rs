//! Training data prepared once: standardized, resized and patchified.

use std::collections::BTreeMap;

use ndarray::{s, Array3};

use crate::model::{SampleView, SourceInput, SourceSpec};
use crate::tokenizer::{compute_band_stats, prepare_patches, BandStats, DEFAULT_EPSILON};
use crate::{Error, Region, Result, Timestamp};

/// Patches and timestamps of one source of one region.
#[derive(Debug, Clone)]
pub struct SourcePatches {
    /// `(t, NUM_PATCHES, bands·256)`
    pub patches: Array3<f32>,
    pub timestamps: Vec<Timestamp>,
}

#[derive(Debug, Clone)]
pub struct RegionPatches {
    pub region_id: String,
    /// Keyed by index into [`TrainData::sources`].
    pub sources: BTreeMap<usize, SourcePatches>,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    /// Registered sources, sorted by name.
    pub sources: Vec<SourceSpec>,
    /// Band statistics per source, at `f32` precision.
    pub stats: BTreeMap<String, BandStats>,
    pub regions: Vec<RegionPatches>,
}

impl TrainData {
    /// Prepare `regions`. Statistics are computed over all regions unless
    /// given (e.g. from a checkpoint being resumed).
    pub fn from_regions(regions: &[Region], stats: Option<&BTreeMap<String, BandStats>>) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::Empty("training regions"));
        }
        let mut bands: BTreeMap<String, usize> = BTreeMap::new();
        for r in regions {
            for (name, t) in &r.sources {
                let b = t.profile.bands;
                if *bands.entry(name.clone()).or_insert(b) != b {
                    return Err(Error::Shape(format!("source {name} appears with different band counts")));
                }
            }
        }
        let sources: Vec<SourceSpec> = bands.iter().map(|(n, &b)| SourceSpec::new(n.clone(), b)).collect();
        let stats = match stats {
            Some(given) => {
                for s in &sources {
                    let st = given.get(&s.name).ok_or_else(|| Error::UnknownSource(format!("no statistics for {}", s.name)))?;
                    if st.bands() != s.bands {
                        return Err(Error::Shape(format!("statistics for {} have {} bands", s.name, st.bands())));
                    }
                }
                given.clone()
            }
            None => {
                let mut out = BTreeMap::new();
                for s in &sources {
                    let stream = regions.iter().filter_map(|r| r.sources.get(&s.name));
                    out.insert(s.name.clone(), compute_band_stats(stream, DEFAULT_EPSILON)?.rounded_to_f32());
                }
                out
            }
        };
        let mut prepared = Vec::with_capacity(regions.len());
        for r in regions {
            let mut per_source = BTreeMap::new();
            for (name, t) in &r.sources {
                let idx = sources.iter().position(|s| &s.name == name).expect("registered above");
                per_source.insert(
                    idx,
                    SourcePatches {
                        patches: prepare_patches(t, Some(&stats[name]))?,
                        timestamps: t.timestamps.clone(),
                    },
                );
            }
            prepared.push(RegionPatches { region_id: r.region_id.clone(), sources: per_source });
        }
        Ok(Self { sources, stats, regions: prepared })
    }

    pub fn source_names(&self) -> Vec<String> {
        self.sources.iter().map(|s| s.name.clone()).collect()
    }

    /// Regions that carry every source in `sources`.
    pub fn eligible(&self, sources: &[usize]) -> Vec<usize> {
        (0..self.regions.len())
            .filter(|&i| sources.iter().all(|s| self.regions[i].sources.contains_key(s)))
            .collect()
    }

    /// Number of timesteps a sample of `region` over `sources` uses: the
    /// shortest source sequence, optionally capped.
    pub fn sample_timesteps(&self, region: usize, sources: &[usize], cap: Option<usize>) -> usize {
        let t = sources
            .iter()
            .map(|s| self.regions[region].sources[s].timestamps.len())
            .min()
            .unwrap_or(0);
        cap.map_or(t, |c| t.min(c))
    }

    /// A model sample over `sources` of `region` truncated to `t` timesteps;
    /// `timestamps` supplies the (possibly dropped-out) timestamps.
    pub fn sample<'a>(&'a self, region: usize, sources: &[usize], timestamps: &'a [Timestamp]) -> SampleView<'a> {
        let t = timestamps.len();
        SampleView {
            timestamps,
            sources: sources
                .iter()
                .map(|&s| SourceInput {
                    source: s,
                    patches: self.regions[region].sources[&s].patches.slice(s![..t, .., ..]),
                })
                .collect(),
        }
    }
}
