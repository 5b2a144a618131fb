//! Binary morphology and connected-component labelling on grids.
//! Foreground is any value above 0.5; components use 4-connectivity.

use std::collections::VecDeque;

use crate::grid::Grid;

/// Labels 4-connected foreground components. Returns per-pixel labels
/// (`0` = background, components numbered from 1) and the component count.
pub fn label_components(g: &Grid) -> (Vec<u32>, usize) {
    let (rows, cols) = g.dims();
    let mut labels = vec![0u32; rows * cols];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..rows * cols {
        if labels[start] != 0 || g.data()[start] <= 0.5 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / cols, i % cols);
            let mut visit = |j: usize| {
                if labels[j] == 0 && g.data()[j] > 0.5 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - cols);
            }
            if r + 1 < rows {
                visit(i + cols);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < cols {
                visit(i + 1);
            }
        }
    }
    (labels, next as usize)
}

pub fn count_components(g: &Grid) -> usize {
    label_components(g).1
}

fn square_filter(g: &Grid, radius: usize, dilate: bool) -> Grid {
    if radius == 0 {
        return g.clone();
    }
    let (rows, cols) = g.dims();
    let fg = |r: usize, c: usize| g.get(r, c) > 0.5;
    Grid::from_fn(rows, cols, |r, c| {
        let r0 = r.saturating_sub(radius);
        let r1 = (r + radius).min(rows - 1);
        let c0 = c.saturating_sub(radius);
        let c1 = (c + radius).min(cols - 1);
        let hit = if dilate {
            (r0..=r1).any(|y| (c0..=c1).any(|x| fg(y, x)))
        } else {
            // pixels outside the image count as background
            let inside = r >= radius && c >= radius && r + radius < rows && c + radius < cols;
            inside && (r0..=r1).all(|y| (c0..=c1).all(|x| fg(y, x)))
        };
        if hit {
            1.0
        } else {
            0.0
        }
    })
}

/// Dilation with a `(2r+1) x (2r+1)` square structuring element.
pub fn dilate(g: &Grid, radius: usize) -> Grid {
    square_filter(g, radius, true)
}

/// Erosion with a `(2r+1) x (2r+1)` square structuring element.
pub fn erode(g: &Grid, radius: usize) -> Grid {
    square_filter(g, radius, false)
}
