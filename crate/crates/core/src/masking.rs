//! Random, tube and combined masks over the `(timestep, source, patch)`
//! token lattice.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, NdFloat};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::key;
use crate::rng::keyed_rng;
use crate::{Error, Result};

/// Number of items masked out of `n` at `ratio`, rounded down.
///
/// A tolerance of 1e-9 absorbs binary representation error, so that e.g.
/// `0.29 · 100` counts as 29.
pub fn masked_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64 + 1e-9).floor() as usize).min(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum MaskScheme {
    Random { ratio: f64 },
    Tube { ratio: f64 },
    Combined { tube_ratio: f64, rand_ratio: f64 },
}

impl MaskScheme {
    /// Combined scheme with 75% tube and 25% of the remainder at random.
    pub const COMBINED_DEFAULT: MaskScheme = MaskScheme::Combined {
        tube_ratio: 0.75,
        rand_ratio: 0.25,
    };

    /// Parse a scheme name, applying `ratio` to random/tube masks.
    pub fn from_name(name: &str, ratio: f64) -> Result<Self> {
        let scheme = match name {
            "random" => MaskScheme::Random { ratio },
            "tube" => MaskScheme::Tube { ratio },
            "combined" => MaskScheme::COMBINED_DEFAULT,
            other => return Err(Error::InvalidArgument(format!("unknown mask scheme {other:?}"))),
        };
        scheme.validate()?;
        Ok(scheme)
    }

    pub fn name(&self) -> &'static str {
        match self {
            MaskScheme::Random { .. } => "random",
            MaskScheme::Tube { .. } => "tube",
            MaskScheme::Combined { .. } => "combined",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ratios: &[f64] = match self {
            MaskScheme::Random { ratio } | MaskScheme::Tube { ratio } => &[*ratio],
            MaskScheme::Combined { tube_ratio, rand_ratio } => &[*tube_ratio, *rand_ratio],
        };
        for &r in ratios {
            check_ratio(r)?;
        }
        Ok(())
    }

    pub fn generate(&self, t: usize, s: usize, p: usize, seed: u64) -> Result<Mask> {
        match *self {
            MaskScheme::Random { ratio } => random_mask(t, s, p, ratio, seed),
            MaskScheme::Tube { ratio } => tube_mask(t, s, p, ratio, seed),
            MaskScheme::Combined { tube_ratio, rand_ratio } => combined_mask(t, s, p, tube_ratio, rand_ratio, seed),
        }
    }
}

impl fmt::Display for MaskScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskScheme::Random { ratio } | MaskScheme::Tube { ratio } => write!(f, "{}:{ratio}", self.name()),
            MaskScheme::Combined { tube_ratio, rand_ratio } => write!(f, "combined:{tube_ratio}+{rand_ratio}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    Random,
    Tube,
    Combined,
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SchemeKind::Random),
            "tube" => Ok(SchemeKind::Tube),
            "combined" => Ok(SchemeKind::Combined),
            other => Err(Error::InvalidArgument(format!("unknown mask scheme {other:?}"))),
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("mask ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Boolean lattice `(t, s, p)`, `true` = masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    t: usize,
    s: usize,
    p: usize,
    bits: Vec<bool>,
    masked_count: usize,
    scheme: SchemeKind,
    seed: u64,
}

impl Mask {
    fn from_bits(t: usize, s: usize, p: usize, bits: Vec<bool>, scheme: SchemeKind, seed: u64) -> Self {
        let masked_count = bits.iter().filter(|&&b| b).count();
        Self { t, s, p, bits, masked_count, scheme, seed }
    }

    /// A mask from explicit bits; `bits.len()` must be `t·s·p`.
    pub fn from_vec(t: usize, s: usize, p: usize, bits: Vec<bool>, scheme: SchemeKind) -> Result<Self> {
        if bits.len() != t * s * p {
            return Err(Error::Shape(format!("{} bits for lattice {t}x{s}x{p}", bits.len())));
        }
        Ok(Self::from_bits(t, s, p, bits, scheme, 0))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.t, self.s, self.p)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.masked_count
    }

    pub fn visible_count(&self) -> usize {
        self.bits.len() - self.masked_count
    }

    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn index(&self, ti: usize, si: usize, pi: usize) -> usize {
        (ti * self.s + si) * self.p + pi
    }

    pub fn get(&self, ti: usize, si: usize, pi: usize) -> bool {
        self.bits[self.index(ti, si, pi)]
    }

    pub fn slice(&self, ti: usize, si: usize) -> &[bool] {
        let start = self.index(ti, si, 0);
        &self.bits[start..start + self.p]
    }

    pub fn slice_masked_count(&self, ti: usize, si: usize) -> usize {
        self.slice(ti, si).iter().filter(|&&b| b).count()
    }

    /// Lattice indices of unmasked positions, ascending.
    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| !self.bits[i]).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Keep only the first `t` timesteps.
    pub fn truncate_time(&self, t: usize) -> Mask {
        let t = t.min(self.t);
        let bits = self.bits[..t * self.s * self.p].to_vec();
        Self::from_bits(t, self.s, self.p, bits, self.scheme, self.seed)
    }

    /// Row-major text grid of slice `(ti, si)` with `#` for masked patches.
    pub fn render_slice(&self, ti: usize, si: usize, width: usize) -> String {
        let mut out = String::new();
        for (i, &b) in self.slice(ti, si).iter().enumerate() {
            out.push(if b { '#' } else { '.' });
            if (i + 1) % width.max(1) == 0 {
                out.push('\n');
            }
        }
        out
    }
}

/// Exactly `floor(ratio·t·s·p)` positions, uniformly without replacement.
pub fn random_mask(t: usize, s: usize, p: usize, ratio: f64, seed: u64) -> Result<Mask> {
    check_ratio(ratio)?;
    let n = t * s * p;
    let k = masked_count(ratio, n);
    let mut bits = vec![false; n];
    let mut rng = keyed_rng(key![seed, "mask-random"]);
    for i in sample(&mut rng, n, k) {
        bits[i] = true;
    }
    Ok(Mask::from_bits(t, s, p, bits, SchemeKind::Random, seed))
}

fn tube_set(p: usize, ratio: f64, seed: u64) -> Vec<bool> {
    let mut set = vec![false; p];
    let mut rng = keyed_rng(key![seed, "mask-tube"]);
    for i in sample(&mut rng, p, masked_count(ratio, p)) {
        set[i] = true;
    }
    set
}

/// One set of `floor(ratio·p)` patches masked in every `(timestep, source)`.
pub fn tube_mask(t: usize, s: usize, p: usize, ratio: f64, seed: u64) -> Result<Mask> {
    check_ratio(ratio)?;
    let set = tube_set(p, ratio, seed);
    let bits = (0..t * s).flat_map(|_| set.iter().copied()).collect();
    Ok(Mask::from_bits(t, s, p, bits, SchemeKind::Tube, seed))
}

/// Tube mask of `floor(tube_ratio·p)` patches, then in each slice
/// independently `floor(rand_ratio·r)` of the `r` remaining patches.
pub fn combined_mask(t: usize, s: usize, p: usize, tube_ratio: f64, rand_ratio: f64, seed: u64) -> Result<Mask> {
    check_ratio(tube_ratio)?;
    check_ratio(rand_ratio)?;
    let set = tube_set(p, tube_ratio, seed);
    let remaining: Vec<usize> = (0..p).filter(|&i| !set[i]).collect();
    let extra = masked_count(rand_ratio, remaining.len());
    let mut bits = Vec::with_capacity(t * s * p);
    for ti in 0..t {
        for si in 0..s {
            let mut slice = set.clone();
            let mut rng = keyed_rng(key![seed, "mask-combined", ti, si]);
            for j in sample(&mut rng, remaining.len(), extra) {
                slice[remaining[j]] = true;
            }
            bits.extend(slice);
        }
    }
    Ok(Mask::from_bits(t, s, p, bits, SchemeKind::Combined, seed))
}

/// Visible rows of a flattened `(t·s·p, W)` token lattice and their lattice
/// indices, in lattice order.
pub fn gather_visible<F: NdFloat>(tokens: ArrayView2<'_, F>, mask: &Mask) -> Result<(Array2<F>, Vec<usize>)> {
    if tokens.nrows() != mask.len() {
        return Err(Error::Shape(format!("{} tokens for a mask of {}", tokens.nrows(), mask.len())));
    }
    let index = mask.visible_indices();
    if index.is_empty() {
        return Err(Error::NoVisibleTokens);
    }
    Ok((tokens.select(ndarray::Axis(0), &index), index))
}

/// Write `visible` rows back to their lattice positions in `out`.
pub fn scatter_visible<F: NdFloat>(visible: ArrayView2<'_, F>, index: &[usize], out: &mut Array2<F>) -> Result<()> {
    if visible.nrows() != index.len() || visible.ncols() != out.ncols() {
        return Err(Error::Shape("visible rows do not match index map".into()));
    }
    for (row, &i) in visible.rows().into_iter().zip(index) {
        out.row_mut(i).assign(&row);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_examples() {
        assert_eq!(random_mask(2, 2, 196, 0.95, 1).unwrap().masked_count(), 744);
        assert_eq!(random_mask(2, 2, 196, 1.0, 1).unwrap().masked_count(), 784);
        assert_eq!(random_mask(2, 2, 196, 0.0, 1).unwrap().masked_count(), 0);
        assert!(random_mask(1, 1, 4, 1.1, 0).is_err());
    }

    #[test]
    fn tube_examples() {
        let m = tube_mask(3, 2, 4, 0.75, 5).unwrap();
        for ti in 0..3 {
            for si in 0..2 {
                assert_eq!(m.slice(ti, si), m.slice(0, 0));
                assert_eq!(m.slice_masked_count(ti, si), 3);
            }
        }
        let m = tube_mask(2, 1, 196, 0.90, 5).unwrap();
        assert_eq!(m.slice_masked_count(1, 0), 176);
        assert_eq!(tube_mask(2, 2, 196, 0.0, 1).unwrap().masked_count(), 0);
    }

    #[test]
    fn combined_examples() {
        let m = combined_mask(2, 2, 196, 0.75, 0.25, 3).unwrap();
        let tube = tube_set(196, 0.75, 3);
        for ti in 0..2 {
            for si in 0..2 {
                assert_eq!(m.slice_masked_count(ti, si), 159);
                assert!(tube.iter().zip(m.slice(ti, si)).all(|(&t, &b)| !t || b));
            }
        }
        assert_eq!(combined_mask(2, 2, 196, 0.0, 0.0, 3).unwrap().masked_count(), 0);
        assert_eq!(combined_mask(1, 1, 4, 0.75, 0.25, 3).unwrap().masked_count(), 3);
    }

    #[test]
    fn count_rounding() {
        assert_eq!(masked_count(0.29, 100), 29);
        assert_eq!(masked_count(0.75, 196), 147);
        assert_eq!(masked_count(0.25, 49), 12);
        assert_eq!(masked_count(0.90, 196), 176);
    }

    #[test]
    fn gather_and_scatter() {
        let tokens = Array2::from_shape_fn((2 * 196, 3), |(i, j)| (i * 3 + j) as f64);
        let empty = tube_mask(2, 1, 196, 0.0, 0).unwrap();
        let (vis, idx) = gather_visible(tokens.view(), &empty).unwrap();
        assert_eq!(vis, tokens);
        assert_eq!(idx, (0..392).collect::<Vec<_>>());

        let m = tube_mask(2, 1, 196, 0.75, 0).unwrap();
        let (vis, idx) = gather_visible(tokens.view(), &m).unwrap();
        assert_eq!(vis.nrows(), 98);
        let mut back = Array2::zeros(tokens.dim());
        scatter_visible(vis.view(), &idx, &mut back).unwrap();
        for i in m.visible_indices() {
            assert_eq!(back.row(i), tokens.row(i));
        }

        let all = tube_mask(2, 1, 196, 1.0, 0).unwrap();
        assert!(matches!(gather_visible(tokens.view(), &all), Err(Error::NoVisibleTokens)));
    }

    #[test]
    fn scheme_names() {
        assert_eq!(MaskScheme::from_name("tube", 0.9).unwrap(), MaskScheme::Tube { ratio: 0.9 });
        assert!(MaskScheme::from_name("wave", 0.9).is_err());
        assert!(MaskScheme::from_name("random", -0.1).is_err());
        assert_eq!(MaskScheme::from_name("combined", 0.1).unwrap(), MaskScheme::COMBINED_DEFAULT);
    }
}
