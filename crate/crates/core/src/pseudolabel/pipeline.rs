use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    entropy_map, fuse, nine_box_points, refine, select_image, uncertainty_stats, PipelineConfig, PseudoLabel,
    SparseAnnotation, UncertaintyStats,
};
use crate::augment::{
    apply_grid, invert_mask, sample_augspec, transform_points, AugSpec, Interpolation, LabeledPoint, PointLabel,
};
use crate::error::{Error, Result};
use crate::grid::{Grid, ProbMask};
use crate::pgm;
use crate::provider::{MaskProvider, ViewRequest};
use crate::rng::{self, Rng};

/// One augmented view ready to be submitted to a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPlan {
    pub index: usize,
    pub spec: AugSpec,
    #[serde(skip)]
    pub image: Option<Grid>,
    pub prompts: Vec<LabeledPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub image_id: String,
    pub label: PseudoLabel,
    pub stats: UncertaintyStats,
    /// Views whose masks entered the fusion.
    pub k_effective: usize,
    pub augspecs: Vec<AugSpec>,
    /// Views skipped because the provider failed, with the reason.
    pub failed: Vec<(usize, String)>,
}

/// Contents of `meta.json` next to a stored pseudo-label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelMeta {
    pub kept: bool,
    #[serde(rename = "U_a")]
    pub u_a: f64,
    #[serde(rename = "U_r")]
    pub u_r: f64,
    #[serde(rename = "K_effective")]
    pub k_effective: usize,
    pub augspecs: Vec<AugSpec>,
}

fn image_rng(image_id: &str, cfg: &PipelineConfig) -> Rng {
    rng::seeded(rng::derive(cfg.seed, rng::hash_str(image_id)))
}

/// Prompts in the original frame: the annotation's points followed by the
/// nine-box points of its scribble, if any.
fn original_prompts(annotation: &SparseAnnotation, rng: &mut Rng) -> Result<Vec<LabeledPoint>> {
    let mut prompts = annotation.points.clone();
    if let Some(s) = &annotation.scribble {
        for label in [PointLabel::Foreground, PointLabel::Background] {
            if s.count(label) > 0 {
                prompts.extend(nine_box_points(s, label, rng)?);
            }
        }
    }
    Ok(prompts)
}

fn view_specs(cfg: &PipelineConfig, rng: &mut Rng) -> Vec<AugSpec> {
    if cfg.stages.fusion {
        (0..cfg.k).map(|_| sample_augspec(rng)).collect()
    } else {
        vec![AugSpec::IDENTITY]
    }
}

fn build_view(index: usize, spec: AugSpec, image: &Grid, prompts: &[LabeledPoint]) -> Result<ViewPlan> {
    Ok(ViewPlan {
        index,
        spec,
        image: Some(apply_grid(image, &spec, Interpolation::Bilinear)?),
        prompts: transform_points(prompts, &spec, image.dims())?,
    })
}

/// The views the pipeline will request for one image. Deterministic in
/// `(cfg.seed, image_id, annotation)`, so views exported for an offline
/// segmenter line up with the masks read back later.
pub fn plan_views(
    image_id: &str,
    image: &Grid,
    annotation: &SparseAnnotation,
    cfg: &PipelineConfig,
) -> Result<Vec<ViewPlan>> {
    cfg.validate()?;
    annotation.validate(image.dims())?;
    let mut rng = image_rng(image_id, cfg);
    let prompts = original_prompts(annotation, &mut rng)?;
    view_specs(cfg, &mut rng).into_iter().enumerate().map(|(k, spec)| build_view(k, spec, image, &prompts)).collect()
}

/// Writes `<dir>/<id>/view_<k>.pgm` and `<dir>/<id>/views.json` so an external
/// segmenter can produce the matching `aug_<k>.pgm` masks.
pub fn export_views(
    dir: &Path,
    image_id: &str,
    image: &Grid,
    annotation: &SparseAnnotation,
    cfg: &PipelineConfig,
) -> Result<()> {
    let views = plan_views(image_id, image, annotation, cfg)?;
    let out = dir.join(image_id);
    for v in &views {
        if let Some(img) = &v.image {
            pgm::write(&out.join(format!("view_{}.pgm", v.index)), img)?;
        }
    }
    fs::write(out.join("views.json"), serde_json::to_string_pretty(&views)?)?;
    Ok(())
}

/// Runs the refinement pipeline on one image. Views whose transform or
/// provider call fails are skipped; if every view fails the image fails.
pub fn generate_pseudo_label(
    image_id: &str,
    image: &Grid,
    annotation: &SparseAnnotation,
    provider: &dyn MaskProvider,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    annotation.validate(image.dims())?;
    let mut rng = image_rng(image_id, cfg);
    let prompts = original_prompts(annotation, &mut rng)?;
    let specs = view_specs(cfg, &mut rng);

    let mut masks = Vec::with_capacity(specs.len());
    let mut used = Vec::with_capacity(specs.len());
    let mut failed = Vec::new();
    for (k, spec) in specs.into_iter().enumerate() {
        let attempt = build_view(k, spec, image, &prompts).and_then(|view| {
            let view_image = view.image.as_ref().expect("built views carry their image");
            let req = ViewRequest { image_id, view_index: k, image: view_image, prompts: &view.prompts, spec };
            let mask = provider.segment(&req)?;
            invert_mask(&mask, &spec, image.dims())
        });
        match attempt {
            Ok(m) => {
                masks.push(m);
                used.push(spec);
            }
            Err(e) => failed.push((k, e.to_string())),
        }
    }
    if masks.is_empty() {
        let reasons: Vec<&str> = failed.iter().map(|(_, r)| r.as_str()).collect();
        return Err(Error::Pipeline(format!("every view of {image_id:?} failed: {}", reasons.join("; "))));
    }

    let fused = fuse(&masks)?;
    let entropy = entropy_map(&fused);
    let stats = uncertainty_stats(&entropy, &fused, cfg.theta_h)?;
    let kept = !cfg.stages.image_selection || select_image(&stats, cfg);
    let mut label = refine(&fused, &entropy, kept)?;
    if !cfg.stages.pixel_weighting {
        label.weighted_mask = fused;
    }
    Ok(PipelineOutput {
        image_id: image_id.to_string(),
        label,
        stats,
        k_effective: masks.len(),
        augspecs: used,
        failed,
    })
}

/// Refines many images on a pool of `threads` workers. Results keep the input
/// order and do not depend on the thread count.
pub fn generate_all(
    jobs: &[(&str, &Grid, &SparseAnnotation)],
    provider: &dyn MaskProvider,
    cfg: &PipelineConfig,
    threads: usize,
) -> Result<Vec<Result<PipelineOutput>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Pipeline(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter().map(|(id, image, ann)| generate_pseudo_label(id, image, ann, provider, cfg)).collect()
    }))
}

/// Writes `pseudo.pgm`, `fused.pgm`, `entropy.pgm` and `meta.json` under
/// `<dir>/<image_id>/`.
pub fn write_label(dir: &Path, out: &PipelineOutput) -> Result<()> {
    let d = dir.join(&out.image_id);
    pgm::write(&d.join("pseudo.pgm"), out.label.weighted_mask.grid())?;
    pgm::write(&d.join("fused.pgm"), out.label.fused.grid())?;
    pgm::write(&d.join("entropy.pgm"), &out.label.entropy)?;
    let meta = LabelMeta {
        kept: out.label.kept,
        u_a: out.stats.u_a,
        u_r: out.stats.u_r,
        k_effective: out.k_effective,
        augspecs: out.augspecs.clone(),
    };
    fs::write(d.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Reads a label stored by [`write_label`]. Masks come back quantised to
/// 8 bits.
pub fn read_label(dir: &Path, image_id: &str) -> Result<(PseudoLabel, LabelMeta)> {
    let d = dir.join(image_id);
    let meta_path = d.join("meta.json");
    let meta: LabelMeta = match fs::read_to_string(&meta_path) {
        Ok(s) => serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::NotFound(format!("pseudo-label for {image_id:?} in {}", dir.display())))
        }
        Err(e) => return Err(e.into()),
    };
    let label = PseudoLabel {
        weighted_mask: ProbMask::new(pgm::read(&d.join("pseudo.pgm"))?)?,
        fused: ProbMask::new(pgm::read(&d.join("fused.pgm"))?)?,
        entropy: pgm::read(&d.join("entropy.pgm"))?,
        kept: meta.kept,
    };
    Ok((label, meta))
}
