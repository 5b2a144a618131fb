use rand::Rng as _;

use super::ScribbleGrid;
use crate::augment::{LabeledPoint, PointLabel};
use crate::error::{ensure, Result};
use crate::rng::Rng;

/// Converts the scribble pixels carrying `label` into at most nine point
/// prompts: the bounding box is split into a 3x3 grid of cells and one
/// scribble pixel is drawn uniformly from each non-empty cell.
pub fn nine_box_points(scribble: &ScribbleGrid, label: PointLabel, rng: &mut Rng) -> Result<Vec<LabeledPoint>> {
    let (rows, cols) = scribble.dims();
    let pixels: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|&(r, c)| scribble.get(r, c).label() == Some(label))
        .collect();
    ensure(!pixels.is_empty(), || format!("scribble has no {label:?} pixels"))?;
    let r0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
    let r1 = pixels.iter().map(|p| p.0).max().unwrap_or(0);
    let c0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
    let c1 = pixels.iter().map(|p| p.1).max().unwrap_or(0);
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut cells: [Vec<(usize, usize)>; 9] = Default::default();
    for &(r, c) in &pixels {
        let cy = (r - r0) * 3 / h;
        let cx = (c - c0) * 3 / w;
        cells[cy * 3 + cx].push((r, c));
    }
    Ok(cells
        .iter()
        .filter(|cell| !cell.is_empty())
        .map(|cell| {
            let (r, c) = cell[rng.random_range(0..cell.len())];
            LabeledPoint::new(r, c, label)
        })
        .collect())
}
