//! Flat parameter storage.
//!
//! All model tensors live in one contiguous buffer; a [`ParamLayout`] maps
//! names to `(offset, shape)`. Gradients and optimizer moments use the same
//! layout, which keeps averaging, clipping and serialization to plain slice
//! arithmetic.

use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], decay: bool) -> ParamId {
        let entry = ParamEntry {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.len,
            decay,
        };
        self.len += entry.numel();
        self.entries.push(entry);
        ParamId(self.entries.len() - 1)
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn dims2(&self, id: ParamId) -> (usize, usize) {
        match self.entries[id.0].shape[..] {
            [r, c] => (r, c),
            [n] => (1, n),
            ref s => panic!("parameter {} has shape {s:?}", self.entries[id.0].name),
        }
    }

    pub fn mat<'a, F>(&self, buf: &'a [F], id: ParamId) -> ArrayView2<'a, F> {
        let e = &self.entries[id.0];
        ArrayView2::from_shape(self.dims2(id), &buf[e.range()]).expect("layout matches buffer")
    }

    pub fn vec<'a, F>(&self, buf: &'a [F], id: ParamId) -> ArrayView1<'a, F> {
        ArrayView1::from(&buf[self.entries[id.0].range()])
    }

    pub fn mat_mut<'a, F>(&self, buf: &'a mut [F], id: ParamId) -> ArrayViewMut2<'a, F> {
        let dims = self.dims2(id);
        let range = self.entries[id.0].range();
        ArrayViewMut2::from_shape(dims, &mut buf[range]).expect("layout matches buffer")
    }

    pub fn vec_mut<'a, F>(&self, buf: &'a mut [F], id: ParamId) -> ArrayViewMut1<'a, F> {
        ArrayViewMut1::from(&mut buf[self.entries[id.0].range()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets_are_contiguous() {
        let mut l = ParamLayout::default();
        let a = l.push("a", &[2, 3], true);
        let b = l.push("b", &[4], false);
        assert_eq!(l.len(), 10);
        assert_eq!(l.entry(b).offset, 6);
        let buf: Vec<f32> = (0..10).map(|i| i as f32).collect();
        assert_eq!(l.mat(&buf, a)[[1, 2]], 5.0);
        assert_eq!(l.vec(&buf, b)[0], 6.0);
        assert_eq!(l.mat(&buf, b).dim(), (1, 4));
    }
}
