use crate::error::{Error, Result};

/// Dense row-major 2-D array of `f64`.
///
/// Rows run along depth (or wavenumber) and columns along the lateral
/// A-scan index, so a single A-scan is one column.
#[derive(Debug, Clone, PartialEq)]
pub struct Array2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} elements cannot fill a {rows}x{cols} array",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds an array whose columns are the given equal-length vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(Error::shape("columns have different lengths"));
        }
        Ok(Self::from_fn(rows, cols, |r, c| columns[c][r]))
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self.set(r, c, v);
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Returns `(min, max)`, or `None` for an empty array.
    pub fn min_max(&self) -> Option<(f64, f64)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    /// Rows `[top, top + height)`.
    pub fn row_slice(&self, top: usize, height: usize) -> Result<Self> {
        if top + height > self.rows {
            return Err(Error::shape(format!(
                "rows [{top}, {}) exceed height {}",
                top + height,
                self.rows
            )));
        }
        let start = top * self.cols;
        Ok(Self {
            rows: height,
            cols: self.cols,
            data: self.data[start..start + height * self.cols].to_vec(),
        })
    }

    /// Columns `[left, left + width)`.
    pub fn col_slice(&self, left: usize, width: usize) -> Result<Self> {
        if left + width > self.cols {
            return Err(Error::shape(format!(
                "columns [{left}, {}) exceed width {}",
                left + width,
                self.cols
            )));
        }
        Ok(Self::from_fn(self.rows, width, |r, c| self.get(r, left + c)))
    }

    /// Horizontal concatenation.
    pub fn hconcat(parts: &[Array2]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::shape("cannot concatenate arrays of different heights"));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| self.get(r, self.cols - 1 - c))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |r, c| self.get(self.rows - 1 - r, c))
    }
}
