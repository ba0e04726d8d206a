//! Flat cochain vectors and the block layouts that index them.

use std::ops::{Deref, DerefMut, Range};

use nalgebra::DVector;

use crate::Real;

/// Offsets of consecutive blocks inside a flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    offsets: Vec<usize>,
}

impl BlockLayout {
    pub fn from_dims(dims: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(dims.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &d in dims {
            acc += d;
            offsets.push(acc);
        }
        Self { offsets }
    }

    pub fn block_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn dim(&self, block: usize) -> usize {
        self.offsets[block + 1] - self.offsets[block]
    }

    pub fn offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    pub fn range(&self, block: usize) -> Range<usize> {
        self.offsets[block]..self.offsets[block + 1]
    }

    pub fn dims(&self) -> Vec<usize> {
        (0..self.block_count()).map(|b| self.dim(b)).collect()
    }
}

macro_rules! cochain_type {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T: Real>(pub DVector<T>);

        impl<T: Real> $name<T> {
            pub fn zeros(len: usize) -> Self {
                Self(DVector::zeros(len))
            }

            pub fn from_slice(values: &[T]) -> Self {
                Self(DVector::from_column_slice(values))
            }

            pub fn from_vec(values: Vec<T>) -> Self {
                Self(DVector::from_vec(values))
            }

            pub fn block<'a>(&'a self, layout: &BlockLayout, index: usize) -> &'a [T] {
                &self.0.as_slice()[layout.range(index)]
            }

            pub fn block_mut<'a>(&'a mut self, layout: &BlockLayout, index: usize) -> &'a mut [T] {
                &mut self.0.as_mut_slice()[layout.range(index)]
            }

            pub fn into_inner(self) -> DVector<T> {
                self.0
            }
        }

        impl<T: Real> Deref for $name<T> {
            type Target = DVector<T>;
            fn deref(&self) -> &DVector<T> {
                &self.0
            }
        }

        impl<T: Real> DerefMut for $name<T> {
            fn deref_mut(&mut self) -> &mut DVector<T> {
                &mut self.0
            }
        }

        impl<T: Real> From<DVector<T>> for $name<T> {
            fn from(v: DVector<T>) -> Self {
                Self(v)
            }
        }
    };
}

cochain_type!(
    Cochain0,
    "A 0-cochain: one block per vertex stalk, concatenated in vertex order."
);
cochain_type!(
    Cochain1,
    "A 1-cochain: one block per edge stalk, concatenated in edge order."
);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_ranges() {
        let l = BlockLayout::from_dims(&[2, 0, 3]);
        assert_eq!(l.total(), 5);
        assert_eq!(l.range(1), 2..2);
        assert_eq!(l.range(2), 2..5);
        let c = Cochain0::<f64>::from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(c.block(&l, 2), &[3.0, 4.0, 5.0]);
    }
}
