//! Head addressing shared by traces, scores, plans and caches.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// One attention head, addressed by layer and head index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Model shape `(layers, heads per layer)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub layers: usize,
    pub heads: usize,
}

impl Shape {
    pub fn new(layers: usize, heads: usize) -> Self {
        Self { layers, heads }
    }

    pub fn n_heads(&self) -> usize {
        self.layers * self.heads
    }

    pub fn contains(&self, id: HeadId) -> bool {
        id.layer < self.layers && id.head < self.heads
    }

    pub fn flat(&self, id: HeadId) -> usize {
        id.layer * self.heads + id.head
    }

    pub fn id(&self, flat: usize) -> HeadId {
        HeadId::new(flat / self.heads, flat % self.heads)
    }

    /// All heads in `(layer, head)` order.
    pub fn iter(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.n_heads()).map(|i| self.id(i))
    }
}

/// Dense per-head map stored in `(layer, head)` order.
///
/// Serializes as a nested `layers × heads` array.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrid<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T> HeadGrid<T> {
    pub fn from_fn(shape: Shape, mut f: impl FnMut(HeadId) -> T) -> Self {
        let data = shape.iter().map(&mut f).collect();
        Self { shape, data }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.n_heads() {
            return Err(Error::shape(format!(
                "{} values for {}x{} heads",
                data.len(),
                shape.layers,
                shape.heads
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, id: HeadId) -> Option<&T> {
        self.shape
            .contains(id)
            .then(|| &self.data[self.shape.flat(id)])
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeadId, &T)> + '_ {
        self.data
            .iter()
            .enumerate()
            .map(|(i, v)| (self.shape.id(i), v))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> HeadGrid<U> {
        HeadGrid {
            shape: self.shape,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Values of one layer, in head order.
    pub fn layer(&self, layer: usize) -> &[T] {
        let h = self.shape.heads;
        &self.data[layer * h..(layer + 1) * h]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [T] {
        let h = self.shape.heads;
        &mut self.data[layer * h..(layer + 1) * h]
    }
}

impl<T> Index<HeadId> for HeadGrid<T> {
    type Output = T;

    fn index(&self, id: HeadId) -> &T {
        assert!(self.shape.contains(id), "{id} outside {:?}", self.shape);
        &self.data[self.shape.flat(id)]
    }
}

impl<T> IndexMut<HeadId> for HeadGrid<T> {
    fn index_mut(&mut self, id: HeadId) -> &mut T {
        assert!(self.shape.contains(id), "{id} outside {:?}", self.shape);
        let i = self.shape.flat(id);
        &mut self.data[i]
    }
}

impl<T: Serialize> Serialize for HeadGrid<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<&[T]> = (0..self.shape.layers).map(|l| self.layer(l)).collect();
        rows.serialize(serializer)
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for HeadGrid<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<T>> = Vec::deserialize(deserializer)?;
        let layers = rows.len();
        let heads = rows.first().map_or(0, Vec::len);
        if layers == 0 || heads == 0 || rows.iter().any(|r| r.len() != heads) {
            return Err(serde::de::Error::custom(
                "head grid must be a non-empty rectangular array",
            ));
        }
        Ok(Self {
            shape: Shape::new(layers, heads),
            data: rows.into_iter().flatten().collect(),
        })
    }
}
