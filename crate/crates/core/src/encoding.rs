//! Composite token encodings: a fixed 2-D sin-cos positional code, a learned
//! source embedding and a learned time embedding, concatenated per token.

use ndarray::{s, Array2, Array4, ArrayView2, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::region::Timestamp;
use crate::{Error, Result};

pub const YEAR_VOCAB: usize = 7;
pub const MONTH_VOCAB: usize = 13;
pub const DAY_VOCAB: usize = 32;
pub const HOUR_VOCAB: usize = 25;
/// Width of each time-component embedding.
pub const TIME_COMPONENT_DIM: usize = 16;
pub const TIME_DIM: usize = 4 * TIME_COMPONENT_DIM;
pub const SOURCE_DIM: usize = 64;
/// Years 2017..=2022 map to indices 1..=6.
pub const YEAR_BASE: u16 = 2016;
pub const DEFAULT_TIMESTEP_DROPOUT: f64 = 0.10;

/// Width of the composite encoding for positional width `pos_dim`.
pub const fn composite_dim(pos_dim: usize) -> usize {
    pos_dim + SOURCE_DIM + TIME_DIM
}

fn sincos_1d<F: NdFloat>(pos: f64, dim: usize, out: &mut [F]) {
    let half = dim / 2;
    for k in 0..half {
        let omega = 1.0 / 10_000f64.powf(k as f64 / half as f64);
        out[k] = F::from(pos * omega).unwrap().sin();
        out[half + k] = F::from(pos * omega).unwrap().cos();
    }
}

/// Fixed `(grid², dim)` table; the row of cell `(r, c)` is the 1-D sin-cos
/// code of `r` followed by that of `c`, each `dim / 2` wide.
pub fn positional_grid<F: NdFloat>(dim: usize, grid: usize) -> Result<Array2<F>> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::InvalidArgument(format!("positional width {dim} not divisible by 4")));
    }
    let mut table = Array2::zeros((grid * grid, dim));
    for r in 0..grid {
        for c in 0..grid {
            let mut row = table.row_mut(r * grid + c);
            let row = row.as_slice_mut().expect("standard layout");
            sincos_1d(r as f64, dim / 2, &mut row[..dim / 2]);
            sincos_1d(c as f64, dim / 2, &mut row[dim / 2..]);
        }
    }
    Ok(table)
}

/// Lookup indices of a timestamp; 0 is the unknown index of every table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeIndex {
    pub year: usize,
    pub month: usize,
    pub day: usize,
    pub hour: usize,
}

impl TimeIndex {
    pub fn as_array(&self) -> [usize; 4] {
        [self.year, self.month, self.day, self.hour]
    }
}

/// Map each component to its table index; out-of-range values become unknown.
pub fn time_index(ts: &Timestamp) -> TimeIndex {
    let year = if (2017..=2022).contains(&ts.year) { (ts.year - YEAR_BASE) as usize } else { 0 };
    let month = if (1..=12).contains(&ts.month) { ts.month as usize } else { 0 };
    let day = if (1..=31).contains(&ts.day) { ts.day as usize } else { 0 };
    // the stored hour is already hour-of-day + 1
    let hour = if (1..=24).contains(&ts.hour) { ts.hour as usize } else { 0 };
    TimeIndex { year, month, day, hour }
}

/// Borrowed time tables, each `(vocab, TIME_COMPONENT_DIM)`.
#[derive(Debug, Clone, Copy)]
pub struct TimeTablesView<'a, F> {
    pub year: ArrayView2<'a, F>,
    pub month: ArrayView2<'a, F>,
    pub day: ArrayView2<'a, F>,
    pub hour: ArrayView2<'a, F>,
}

impl<'a, F> TimeTablesView<'a, F> {
    pub fn tables(&self) -> [&ArrayView2<'a, F>; 4] {
        [&self.year, &self.month, &self.day, &self.hour]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeEmbeddingTables<F> {
    pub year: Array2<F>,
    pub month: Array2<F>,
    pub day: Array2<F>,
    pub hour: Array2<F>,
}

pub const TIME_VOCABS: [usize; 4] = [YEAR_VOCAB, MONTH_VOCAB, DAY_VOCAB, HOUR_VOCAB];

impl<F: NdFloat> TimeEmbeddingTables<F> {
    /// Accepts only tables of shape 7/13/32/25 x 16.
    pub fn from_tables(year: Array2<F>, month: Array2<F>, day: Array2<F>, hour: Array2<F>) -> Result<Self> {
        for (name, t, vocab) in [("year", &year, YEAR_VOCAB), ("month", &month, MONTH_VOCAB), ("day", &day, DAY_VOCAB), ("hour", &hour, HOUR_VOCAB)] {
            if t.dim() != (vocab, TIME_COMPONENT_DIM) {
                return Err(Error::Shape(format!(
                    "{name} table {:?}, expected ({vocab}, {TIME_COMPONENT_DIM})",
                    t.dim()
                )));
            }
        }
        Ok(Self { year, month, day, hour })
    }

    /// Standard-normal initialization.
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut table = |vocab| Array2::from_shape_simple_fn((vocab, TIME_COMPONENT_DIM), || {
            F::from(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).unwrap()
        });
        let year = table(YEAR_VOCAB);
        let month = table(MONTH_VOCAB);
        let day = table(DAY_VOCAB);
        let hour = table(HOUR_VOCAB);
        Self { year, month, day, hour }
    }

    pub fn view(&self) -> TimeTablesView<'_, F> {
        TimeTablesView {
            year: self.year.view(),
            month: self.month.view(),
            day: self.day.view(),
            hour: self.hour.view(),
        }
    }
}

/// `(t, 64)`: per timestep the concatenated year, month, day and hour rows.
pub fn embed_time<F: NdFloat>(timesteps: &[Timestamp], tables: TimeTablesView<'_, F>) -> Array2<F> {
    let mut out = Array2::zeros((timesteps.len(), TIME_DIM));
    for (ti, ts) in timesteps.iter().enumerate() {
        for (k, (&idx, table)) in time_index(ts).as_array().iter().zip(tables.tables()).enumerate() {
            out.slice_mut(s![ti, k * TIME_COMPONENT_DIM..(k + 1) * TIME_COMPONENT_DIM])
                .assign(&table.row(idx));
        }
    }
    out
}

/// `(s, SOURCE_DIM)`: the table row of each source id.
pub fn embed_source<F: NdFloat>(source_ids: &[usize], table: ArrayView2<'_, F>) -> Result<Array2<F>> {
    if table.ncols() != SOURCE_DIM {
        return Err(Error::Shape(format!("source table width {} != {SOURCE_DIM}", table.ncols())));
    }
    let mut out = Array2::zeros((source_ids.len(), SOURCE_DIM));
    for (si, &id) in source_ids.iter().enumerate() {
        if id >= table.nrows() {
            return Err(Error::UnknownSource(format!("source id {id}")));
        }
        out.row_mut(si).assign(&table.row(id));
    }
    Ok(out)
}

fn check_compose_dims<F>(src: &ArrayView2<'_, F>, time: &ArrayView2<'_, F>) -> Result<()> {
    if src.ncols() != SOURCE_DIM || time.ncols() != TIME_DIM {
        return Err(Error::Shape(format!(
            "source width {} / time width {}, expected {SOURCE_DIM} / {TIME_DIM}",
            src.ncols(),
            time.ncols()
        )));
    }
    Ok(())
}

/// `(t, s, p, D + 128)` with `out[ti, si, pi] = pos[pi] ++ src[si] ++ time[ti]`.
pub fn compose_encoding<F: NdFloat>(pos: ArrayView2<'_, F>, src: ArrayView2<'_, F>, time: ArrayView2<'_, F>) -> Result<Array4<F>> {
    let flat = compose_encoding_flat(pos, src, time)?;
    let (t, s_, p) = (time.nrows(), src.nrows(), pos.nrows());
    let width = flat.ncols();
    Ok(flat.into_shape_with_order((t, s_, p, width)).expect("contiguous"))
}

/// [`compose_encoding`] flattened to `(t·s·p, D + 128)` rows in `(t, s, p)`
/// row-major order.
pub fn compose_encoding_flat<F: NdFloat>(pos: ArrayView2<'_, F>, src: ArrayView2<'_, F>, time: ArrayView2<'_, F>) -> Result<Array2<F>> {
    check_compose_dims(&src, &time)?;
    let (t, s_, p, d) = (time.nrows(), src.nrows(), pos.nrows(), pos.ncols());
    let width = composite_dim(d);
    let mut out = Array2::zeros((t * s_ * p, width));
    for ti in 0..t {
        for si in 0..s_ {
            let base = (ti * s_ + si) * p;
            let mut block = out.slice_mut(s![base..base + p, ..]);
            block.slice_mut(s![.., ..d]).assign(&pos);
            block.slice_mut(s![.., d..d + SOURCE_DIM]).assign(&src.row(si));
            block.slice_mut(s![.., d + SOURCE_DIM..]).assign(&time.row(ti));
        }
    }
    Ok(out)
}

/// With probability `prob`, replace every timestamp of the sample with the
/// unknown timestamp. One draw per call; returns whether it fired.
pub fn timestep_dropout<R: Rng>(timesteps: &[Timestamp], prob: f64, rng: &mut R) -> Result<(Vec<Timestamp>, bool)> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!("dropout probability {prob} outside [0, 1]")));
    }
    let fire = rng.gen::<f64>() < prob;
    let out = if fire {
        vec![Timestamp::UNKNOWN; timesteps.len()]
    } else {
        timesteps.to_vec()
    };
    Ok((out, fire))
}
