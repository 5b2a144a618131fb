//! The promptable mask-provider contract.
//!
//! A provider turns one augmented view of an image plus point prompts into a
//! probability mask in that view's frame. Three implementations ship here:
//! [`OracleProvider`] perturbs known ground truth, [`MaskStore`] reads masks
//! precomputed offline by an external segmenter, and [`ConstantProvider`]
//! returns a fixed value everywhere.

mod oracle;
mod store;

pub use oracle::{oracle_segment, OracleConfig, OracleProvider};
pub use store::{file_lookup, MaskStore, StoreEntry, StoreManifest};

use crate::augment::{AugSpec, LabeledPoint};
use crate::error::{ensure, Result};
use crate::grid::{Grid, ProbMask};

/// One augmented view submitted to a provider.
#[derive(Debug, Clone, Copy)]
pub struct ViewRequest<'a> {
    pub image_id: &'a str,
    pub view_index: usize,
    pub image: &'a Grid,
    pub prompts: &'a [LabeledPoint],
    pub spec: AugSpec,
}

pub trait MaskProvider: Send + Sync {
    /// Segments one view. The returned mask has the dims of `req.image`.
    fn segment(&self, req: &ViewRequest<'_>) -> Result<ProbMask>;
}

/// Prompts must be non-empty, inside the image, and include a foreground cue.
pub fn check_prompts(dims: (usize, usize), prompts: &[LabeledPoint]) -> Result<()> {
    ensure(!prompts.is_empty(), || "no prompts supplied".to_string())?;
    for p in prompts {
        ensure(p.row < dims.0 && p.col < dims.1, || {
            format!("prompt ({}, {}) outside {}x{}", p.row, p.col, dims.0, dims.1)
        })?;
    }
    ensure(prompts.iter().any(LabeledPoint::is_foreground), || "no foreground prompt".to_string())
}

/// Returns the same probability at every pixel.
#[derive(Debug, Clone, Copy)]
pub struct ConstantProvider(pub f64);

impl MaskProvider for ConstantProvider {
    fn segment(&self, req: &ViewRequest<'_>) -> Result<ProbMask> {
        check_prompts(req.image.dims(), req.prompts)?;
        ProbMask::filled(req.image.rows(), req.image.cols(), self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::PointLabel;

    #[test]
    fn prompt_validation() {
        let fg = LabeledPoint::new(1, 1, PointLabel::Foreground);
        let bg = LabeledPoint::new(0, 0, PointLabel::Background);
        assert!(check_prompts((4, 4), &[fg, bg]).is_ok());
        assert!(check_prompts((4, 4), &[]).unwrap_err().is_contract());
        assert!(check_prompts((4, 4), &[bg]).unwrap_err().is_contract());
        assert!(check_prompts((1, 1), &[fg]).unwrap_err().is_contract());
    }
}
