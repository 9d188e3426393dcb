//! Flat parameter storage with a named block layout.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered list of blocks. Offsets follow declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<ParamBlock>,
}

impl Layout {
    pub fn new(blocks: Vec<ParamBlock>) -> Result<Self> {
        for (i, b) in blocks.iter().enumerate() {
            if blocks[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::Config(format!("duplicate parameter block `{}`", b.name)));
            }
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn numel(&self) -> usize {
        self.blocks.iter().map(ParamBlock::numel).sum()
    }

    /// Offset and block for `name`.
    pub fn locate(&self, name: &str) -> Option<(usize, &ParamBlock)> {
        let mut off = 0;
        for b in &self.blocks {
            if b.name == name {
                return Some((off, b));
            }
            off += b.numel();
        }
        None
    }

    /// Concatenation of two layouts; names must stay unique.
    pub fn extend(&self, more: &[ParamBlock]) -> Result<Self> {
        let mut blocks = self.blocks.clone();
        blocks.extend_from_slice(more);
        Self::new(blocks)
    }
}

/// A tensor view produced by [`ParameterVector::unflatten`].
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Immutable flat parameter vector. Updates produce new vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParameterVector {
    pub fn new(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        check_dim("parameter vector", layout.numel(), values.len())?;
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.numel();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .locate(name)
            .map(|(off, b)| &self.values[off..off + b.numel()])
    }

    pub fn unflatten(&self) -> Vec<NamedTensor> {
        let mut off = 0;
        self.layout
            .blocks()
            .iter()
            .map(|b| {
                let n = b.numel();
                let t = NamedTensor {
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                    values: self.values[off..off + n].to_vec(),
                };
                off += n;
                t
            })
            .collect()
    }

    /// Inverse of [`unflatten`](Self::unflatten). Tensors must match the layout in order.
    pub fn flatten(layout: Arc<Layout>, tensors: &[NamedTensor]) -> Result<Self> {
        check_dim("tensor count", layout.blocks().len(), tensors.len())?;
        let mut values = Vec::with_capacity(layout.numel());
        for (b, t) in layout.blocks().iter().zip(tensors) {
            if b.name != t.name || b.shape != t.shape {
                return Err(Error::Config(format!(
                    "tensor `{}` {:?} does not match block `{}` {:?}",
                    t.name, t.shape, b.name, b.shape
                )));
            }
            check_dim("tensor values", b.numel(), t.values.len())?;
            values.extend_from_slice(&t.values);
        }
        Self::new(layout, values)
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    /// `self + scale * dir`.
    pub fn axpy(&self, scale: f64, dir: &ParameterVector) -> Result<Self> {
        check_dim("axpy direction", self.len(), dir.len())?;
        let values = self
            .values
            .iter()
            .zip(&dir.values)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(Self {
            values,
            layout: self.layout.clone(),
        })
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|x| x * s).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn dot(&self, other: &ParameterVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }

    /// Copy with the named block replaced by `map(old)`.
    pub fn map_block(&self, name: &str, map: impl Fn(f64) -> f64) -> Result<Self> {
        let (off, b) = self
            .layout
            .locate(name)
            .ok_or_else(|| Error::Config(format!("no parameter block `{name}`")))?;
        let mut values = self.values.clone();
        for v in &mut values[off..off + b.numel()] {
            *v = map(*v);
        }
        self.with_values(values)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
