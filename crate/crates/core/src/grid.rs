//! Row-major 2-D grids of f64 and the probability-mask newtype built on them.

use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure(rows > 0 && cols > 0, || format!("grid dims must be positive, got {rows}x{cols}"))?;
        ensure(data.len() == rows * cols, || {
            format!("grid {rows}x{cols} needs {} values, got {}", rows * cols, data.len())
        })?;
        Ok(Grid { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "grid dims must be positive");
        Grid { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows > 0 && cols > 0, "grid dims must be positive");
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Grid { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        ensure(self.dims() == other.dims(), || format!("grid dims differ: {:?} vs {:?}", self.dims(), other.dims()))?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Ok(Grid { rows: self.rows, cols: self.cols, data })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn in_bounds(&self, r: usize, c: usize) -> bool {
        r < self.rows && c < self.cols
    }
}

/// Per-pixel foreground probability in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask(Grid);

impl ProbMask {
    pub fn new(grid: Grid) -> Result<Self> {
        ensure(grid.data().iter().all(|v| (0.0..=1.0).contains(v)), || {
            "probability mask values must lie in [0, 1]".to_string()
        })?;
        Ok(ProbMask(grid))
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Grid::new(rows, cols, data)?)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::new(Grid::filled(rows, cols, value))
    }

    pub fn grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.get(r, c)
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn is_binary(&self) -> bool {
        self.0.data().iter().all(|v| *v == 0.0 || *v == 1.0)
    }

    /// `1` where the probability exceeds `threshold`, else `0`.
    pub fn binarize(&self, threshold: f64) -> ProbMask {
        ProbMask(self.0.map(|v| if v > threshold { 1.0 } else { 0.0 }))
    }

    pub fn foreground_count(&self) -> usize {
        self.0.data().iter().filter(|v| **v > 0.5).count()
    }
}

impl AsRef<Grid> for ProbMask {
    fn as_ref(&self) -> &Grid {
        &self.0
    }
}
