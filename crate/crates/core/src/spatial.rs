//! Spatial activation maps and instruction masks.
//!
//! A spatial activation map is one condition key's attention column laid out
//! on the g×g noise grid; an instruction mask is the thresholded
//! region-of-interest derived from such a map.

use crate::error::{Error, Result};

/// What a spatial map describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapSubject {
    /// A single condition key token (absolute sequence index).
    KeyToken(usize),
    /// A sub-instruction aggregate (index into the layout's span list).
    Instruction(usize),
    /// The input-image aggregate.
    InputImage,
}

/// A g×g grid of non-negative activations for one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialActivationMap {
    grid_side: usize,
    values: Vec<f64>,
    subject: MapSubject,
}

impl SpatialActivationMap {
    /// Wrap a flattened row-major grid. Errors on a length mismatch.
    pub fn from_values(grid_side: usize, values: Vec<f64>, subject: MapSubject) -> Result<Self> {
        if values.len() != grid_side * grid_side {
            return Err(Error::DimensionMismatch(format!(
                "map has {} values, expected {}",
                values.len(),
                grid_side * grid_side
            )));
        }
        Ok(Self {
            grid_side,
            values,
            subject,
        })
    }

    pub fn constant(grid_side: usize, value: f64, subject: MapSubject) -> Self {
        Self {
            grid_side,
            values: vec![value; grid_side * grid_side],
            subject,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn subject(&self) -> MapSubject {
        self.subject
    }

    pub fn with_subject(mut self, subject: MapSubject) -> Self {
        self.subject = subject;
        self
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_side + col]
    }

    /// Flattened row-major view; the inverse of [`Self::from_values`].
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Binary region-of-interest for one sub-instruction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionMask {
    grid_side: usize,
    cells: Vec<bool>,
    instruction: usize,
    source_step: usize,
}

impl InstructionMask {
    pub fn from_cells(
        grid_side: usize,
        cells: Vec<bool>,
        instruction: usize,
        source_step: usize,
    ) -> Result<Self> {
        if cells.len() != grid_side * grid_side {
            return Err(Error::DimensionMismatch(format!(
                "mask has {} cells, expected {}",
                cells.len(),
                grid_side * grid_side
            )));
        }
        Ok(Self {
            grid_side,
            cells,
            instruction,
            source_step,
        })
    }

    pub fn all_ones(grid_side: usize, instruction: usize, source_step: usize) -> Self {
        Self {
            grid_side,
            cells: vec![true; grid_side * grid_side],
            instruction,
            source_step,
        }
    }

    pub fn all_zeros(grid_side: usize, instruction: usize, source_step: usize) -> Self {
        Self {
            grid_side,
            cells: vec![false; grid_side * grid_side],
            instruction,
            source_step,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn instruction(&self) -> usize {
        self.instruction
    }

    pub fn source_step(&self) -> usize {
        self.source_step
    }

    #[inline]
    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.grid_side + col]
    }

    /// Flat row-major cell index lookup, matching the noise-token order.
    #[inline]
    pub fn is_set_flat(&self, cell: usize) -> bool {
        self.cells[cell]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count_set(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_set() == 0
    }

    /// True when every set cell of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &InstructionMask) -> bool {
        self.grid_side == other.grid_side
            && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_length_checked() {
        assert!(
            SpatialActivationMap::from_values(2, vec![0.0; 3], MapSubject::InputImage).is_err()
        );
        let m =
            SpatialActivationMap::from_values(2, vec![1.0, 2.0, 3.0, 4.0], MapSubject::InputImage)
                .unwrap();
        assert_eq!(m.get(1, 0), 3.0);
        assert_eq!(m.min(), 1.0);
        assert_eq!(m.max(), 4.0);
    }

    #[test]
    fn mask_subset() {
        let small = InstructionMask::from_cells(2, vec![true, false, false, false], 0, 0).unwrap();
        let big = InstructionMask::from_cells(2, vec![true, true, false, false], 0, 0).unwrap();
        assert!(small.is_subset_of(&big));
        assert!(!big.is_subset_of(&small));
    }
}
