//! Geometric augmentations with exact inverses.
//!
//! A spec is applied in the fixed order flip, rotate, scale; the inverse
//! undoes them in reverse. Rotations are quarter turns in the (row, col)
//! index frame: one turn maps pixel `(r, c)` of an `h x w` grid to
//! `(c, h - 1 - r)` of the resulting `w x h` grid, so `[[a, b], [c, d]]`
//! becomes `[[c, a], [d, b]]`. Scaling by 2 duplicates each pixel into a 2x2
//! block; scaling by 0.5 either takes the top-left pixel of each block
//! (nearest) or its average (bilinear, exact at half-pixel centres).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::grid::{Grid, ProbMask};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    None,
    Horizontal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rotation {
    #[serde(rename = "0")]
    R0,
    #[serde(rename = "90")]
    R90,
    #[serde(rename = "180")]
    R180,
    #[serde(rename = "270")]
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarter_turns(self) -> usize {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn degrees(self) -> u32 {
        self.quarter_turns() as u32 * 90
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "0.5")]
    Half,
    #[serde(rename = "1.0")]
    One,
    #[serde(rename = "2.0")]
    Double,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Half, Scale::One, Scale::Double];

    pub fn factor(self) -> f64 {
        match self {
            Scale::Half => 0.5,
            Scale::One => 1.0,
            Scale::Double => 2.0,
        }
    }

    fn apply_dim(self, n: usize) -> usize {
        match self {
            Scale::Half => n / 2,
            Scale::One => n,
            Scale::Double => n * 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AugSpec {
    pub flip: Flip,
    pub rotation: Rotation,
    pub scale: Scale,
}

impl AugSpec {
    pub const IDENTITY: AugSpec = AugSpec { flip: Flip::None, rotation: Rotation::R0, scale: Scale::One };

    /// All 24 specs, flip-major.
    pub fn all() -> Vec<AugSpec> {
        let mut out = Vec::with_capacity(24);
        for flip in [Flip::None, Flip::Horizontal] {
            for rotation in Rotation::ALL {
                for scale in Scale::ALL {
                    out.push(AugSpec { flip, rotation, scale });
                }
            }
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Dims of a `rows x cols` grid after applying this spec.
    pub fn output_dims(&self, rows: usize, cols: usize) -> (usize, usize) {
        let (r, c) = if self.rotation.quarter_turns() % 2 == 1 { (cols, rows) } else { (rows, cols) };
        (self.scale.apply_dim(r), self.scale.apply_dim(c))
    }
}

/// Draws flip, rotation and scale independently and uniformly.
pub fn sample_augspec(rng: &mut Rng) -> AugSpec {
    let flip = if rng.random_bool(0.5) { Flip::Horizontal } else { Flip::None };
    let rotation = Rotation::ALL[rng.random_range(0..4)];
    let scale = Scale::ALL[rng.random_range(0..3)];
    AugSpec { flip, rotation, scale }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Foreground,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub row: usize,
    pub col: usize,
    pub label: PointLabel,
}

impl LabeledPoint {
    pub fn new(row: usize, col: usize, label: PointLabel) -> Self {
        LabeledPoint { row, col, label }
    }

    pub fn is_foreground(&self) -> bool {
        self.label == PointLabel::Foreground
    }
}

fn flip_h(g: &Grid) -> Grid {
    let cols = g.cols();
    Grid::from_fn(g.rows(), cols, |r, c| g.get(r, cols - 1 - c))
}

/// One quarter turn: out[i][j] = in[h - 1 - j][i].
fn rotate_once(g: &Grid) -> Grid {
    let h = g.rows();
    Grid::from_fn(g.cols(), h, |i, j| g.get(h - 1 - j, i))
}

/// Inverse quarter turn: out[r][c] = in[c][h - 1 - r].
fn unrotate_once(g: &Grid) -> Grid {
    // g is w x h (rows = original cols); output is h x w.
    let h = g.cols();
    Grid::from_fn(h, g.rows(), |r, c| g.get(c, h - 1 - r))
}

fn upscale2(g: &Grid, interp: Interpolation) -> Grid {
    match interp {
        Interpolation::Nearest => Grid::from_fn(g.rows() * 2, g.cols() * 2, |r, c| g.get(r / 2, c / 2)),
        Interpolation::Bilinear => {
            // half-pixel centres with edge clamping
            let (h, w) = g.dims();
            let coord = |o: usize, n: usize| -> (usize, usize, f64) {
                let x = (o as f64 + 0.5) / 2.0 - 0.5;
                let x = x.clamp(0.0, (n - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(n - 1);
                (x0, x1, x - x0 as f64)
            };
            Grid::from_fn(h * 2, w * 2, |r, c| {
                let (r0, r1, fr) = coord(r, h);
                let (c0, c1, fc) = coord(c, w);
                let top = g.get(r0, c0) * (1.0 - fc) + g.get(r0, c1) * fc;
                let bot = g.get(r1, c0) * (1.0 - fc) + g.get(r1, c1) * fc;
                top * (1.0 - fr) + bot * fr
            })
        }
    }
}

fn downscale2(g: &Grid, interp: Interpolation) -> Result<Grid> {
    ensure(g.rows().is_multiple_of(2) && g.cols().is_multiple_of(2), || {
        format!("scale 0.5 needs even dims, got {}x{}", g.rows(), g.cols())
    })?;
    Ok(match interp {
        Interpolation::Nearest => Grid::from_fn(g.rows() / 2, g.cols() / 2, |r, c| g.get(2 * r, 2 * c)),
        Interpolation::Bilinear => Grid::from_fn(g.rows() / 2, g.cols() / 2, |r, c| {
            (g.get(2 * r, 2 * c) + g.get(2 * r, 2 * c + 1) + g.get(2 * r + 1, 2 * c) + g.get(2 * r + 1, 2 * c + 1))
                / 4.0
        }),
    })
}

/// Applies `spec` to a grid. Flips and rotations are pure index permutations.
pub fn apply_grid(grid: &Grid, spec: &AugSpec, interp: Interpolation) -> Result<Grid> {
    let mut g = match spec.flip {
        Flip::None => grid.clone(),
        Flip::Horizontal => flip_h(grid),
    };
    for _ in 0..spec.rotation.quarter_turns() {
        g = rotate_once(&g);
    }
    match spec.scale {
        Scale::One => Ok(g),
        Scale::Double => Ok(upscale2(&g, interp)),
        Scale::Half => downscale2(&g, interp),
    }
}

/// Maps prompt points into the augmented frame of a `dims` grid. At scale 2 a
/// point goes to the top-left pixel of its block; at scale 0.5 to the block
/// containing it.
pub fn transform_points(points: &[LabeledPoint], spec: &AugSpec, dims: (usize, usize)) -> Result<Vec<LabeledPoint>> {
    let (rows, cols) = dims;
    points
        .iter()
        .map(|p| {
            ensure(p.row < rows && p.col < cols, || format!("point ({}, {}) outside {rows}x{cols}", p.row, p.col))?;
            let (mut r, mut c) = (p.row, p.col);
            let (mut h, mut w) = (rows, cols);
            if spec.flip == Flip::Horizontal {
                c = w - 1 - c;
            }
            for _ in 0..spec.rotation.quarter_turns() {
                let (nr, nc) = (c, h - 1 - r);
                r = nr;
                c = nc;
                std::mem::swap(&mut h, &mut w);
            }
            match spec.scale {
                Scale::One => {}
                Scale::Double => {
                    r *= 2;
                    c *= 2;
                }
                Scale::Half => {
                    ensure(h % 2 == 0 && w % 2 == 0, || format!("scale 0.5 needs even dims, got {h}x{w}"))?;
                    r /= 2;
                    c /= 2;
                }
            }
            Ok(LabeledPoint { row: r, col: c, label: p.label })
        })
        .collect()
}

/// Maps a mask produced in the augmented frame back onto the original frame
/// using nearest interpolation.
pub fn invert_grid(grid: &Grid, spec: &AugSpec) -> Result<Grid> {
    let mut g = match spec.scale {
        Scale::One => grid.clone(),
        Scale::Double => downscale2(grid, Interpolation::Nearest)?,
        Scale::Half => upscale2(grid, Interpolation::Nearest),
    };
    for _ in 0..spec.rotation.quarter_turns() {
        g = unrotate_once(&g);
    }
    Ok(match spec.flip {
        Flip::None => g,
        Flip::Horizontal => flip_h(&g),
    })
}

/// Inverse-transforms a provider mask; `original` are the dims of the
/// un-augmented image.
pub fn invert_mask(mask: &ProbMask, spec: &AugSpec, original: (usize, usize)) -> Result<ProbMask> {
    let expected = spec.output_dims(original.0, original.1);
    ensure(mask.dims() == expected, || {
        format!(
            "mask dims {:?} inconsistent with spec {:?} applied to {:?} (expected {:?})",
            mask.dims(),
            spec,
            original,
            expected
        )
    })?;
    let g = invert_grid(mask.grid(), spec)?;
    ensure(g.dims() == original, || format!("inverse produced {:?}, expected {:?}", g.dims(), original))?;
    ProbMask::new(g)
}
