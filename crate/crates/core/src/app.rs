//! Run configuration and the commands behind the `cosseg` binary.
//!
//! A run is described by one TOML file with a section per stage. Unknown keys
//! are rejected, and any key can be overridden on the command line with a
//! dotted path (`pipeline.k=6`). Every stage seed is derived from the master
//! `seed` and the section's own `seed`, so changing the master seed reseeds
//! the whole run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_dataset, read_dataset, sample_annotation, write_dataset, AnnotationKind, Dataset, DatasetConfig, Split,
};
use crate::error::{ensure, Error, Result};
use crate::evalkit::{image_metrics, iou_score, MetricReport};
use crate::grid::ProbMask;
use crate::model::{
    load_checkpoint, predict, save_checkpoint, train, SegmenterConfig, SegmenterParams, TrainConfig, TrainHistory,
    TrainItem,
};
use crate::pgm;
use crate::provider::{ConstantProvider, MaskProvider, MaskStore, OracleConfig, OracleProvider};
use crate::pseudolabel::{
    export_views, generate_all, read_label, write_label, PipelineConfig, PipelineOutput, SparseAnnotation, Stages,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Perturbed ground truth.
    Oracle,
    /// Masks precomputed offline under `store_dir`.
    Store,
    /// The same probability everywhere.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub oracle: OracleConfig,
    pub store_dir: Option<PathBuf>,
    pub constant: f64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig { kind: ProviderKind::Oracle, oracle: OracleConfig::default(), store_dir: None, constant: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfgSection {
    pub enabled: bool,
    pub channels: usize,
    pub n1: usize,
    pub n2: usize,
    pub iterations: usize,
}

impl Default for MfgSection {
    fn default() -> Self {
        let d = SegmenterConfig::default();
        MfgSection { enabled: true, channels: d.channels, n1: d.n1, n2: d.n2, iterations: d.iterations }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    /// Also write each prediction as a PGM.
    pub save_predictions: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { split: Split::Test, save_predictions: true }
    }
}

/// One row of an ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// One un-augmented view, no weighting, no selection.
    Baseline,
    /// Adds multi-view fusion.
    Fusion,
    /// Adds entropy pixel weighting.
    PixelWeighting,
    /// Adds image selection: the full pipeline.
    ImageSelection,
    /// The full pipeline with the grouping block removed.
    NoMfg,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Baseline, Arm::Fusion, Arm::PixelWeighting, Arm::ImageSelection, Arm::NoMfg];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Fusion => "fusion",
            Arm::PixelWeighting => "pixel_weighting",
            Arm::ImageSelection => "image_selection",
            Arm::NoMfg => "no_mfg",
        }
    }

    pub fn stages(self) -> Stages {
        match self {
            Arm::Baseline => Stages { fusion: false, pixel_weighting: false, image_selection: false },
            Arm::Fusion => Stages { fusion: true, pixel_weighting: false, image_selection: false },
            Arm::PixelWeighting => Stages { fusion: true, pixel_weighting: true, image_selection: false },
            Arm::ImageSelection | Arm::NoMfg => Stages::default(),
        }
    }

    pub fn uses_mfg(self) -> bool {
        self != Arm::NoMfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub arms: Vec<Arm>,
    /// Extra full-pipeline runs at these view counts.
    pub k_values: Vec<usize>,
    pub repeat: usize,
    /// Redraw the point annotations for every repeat.
    pub vary_points: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection { arms: Arm::ALL.to_vec(), k_values: Vec::new(), repeat: 1, vary_points: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub dataset: DatasetConfig,
    pub provider: ProviderConfig,
    pub pipeline: PipelineConfig,
    pub mfg: MfgSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 1,
            dataset: DatasetConfig::default(),
            provider: ProviderConfig::default(),
            pipeline: PipelineConfig::default(),
            mfg: MfgSection::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("config {}", path.display())),
            _ => e.into(),
        })?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Applies `key.path=value` overrides in order.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root: toml::Table = toml::from_str(&self.to_toml()?).map_err(config_err)?;
        for o in overrides {
            let (key, raw) =
                o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let parts: Vec<&str> = key.trim().split('.').collect();
            ensure(parts.iter().all(|p| !p.is_empty()), || format!("bad override key {key:?}")).map_err(config_err)?;
            let mut table = &mut root;
            for p in &parts[..parts.len() - 1] {
                let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a section")))?;
            }
            table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(root).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        ensure(self.jobs >= 1, || "jobs must be at least 1".to_string()).map_err(config_err)?;
        wrap(self.dataset.validate())?;
        wrap(self.provider.oracle.validate())?;
        wrap(self.pipeline.validate())?;
        wrap(self.train.validate())?;
        wrap(self.arch().validate())?;
        ensure(self.ablation.repeat >= 1, || "ablation.repeat must be at least 1".to_string()).map_err(config_err)?;
        Ok(())
    }

    fn stage_seed(&self, section: &str, own: u64) -> u64 {
        rng::derive(self.seed, rng::hash_str(section) ^ own)
    }

    /// Section configs with their effective seeds filled in.
    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig { seed: self.stage_seed("dataset", self.dataset.seed), ..self.dataset }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig { seed: self.stage_seed("pipeline", self.pipeline.seed), ..self.pipeline }
    }

    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig { seed: self.stage_seed("oracle", self.provider.oracle.seed), ..self.provider.oracle }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.stage_seed("train", self.train.seed), ..self.train }
    }

    pub fn arch(&self) -> SegmenterConfig {
        SegmenterConfig {
            rows: self.dataset.rows,
            cols: self.dataset.cols,
            channels: self.mfg.channels,
            mfg: self.mfg.enabled,
            n1: self.mfg.n1,
            n2: self.mfg.n2,
            iterations: self.mfg.iterations,
        }
    }
}

/// Writes `config.toml` (the resolved config) and `run.json` into `dir`.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let info = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "seeds": {
            "master": cfg.seed,
            "dataset": cfg.dataset_config().seed,
            "pipeline": cfg.pipeline_config().seed,
            "oracle": cfg.oracle_config().seed,
            "train": cfg.train_config().seed,
        },
    });
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub train: usize,
    pub test: usize,
    pub rows: usize,
    pub cols: usize,
    pub seed: u64,
}

fn is_non_empty_dir(dir: &Path) -> Result<bool> {
    match fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(e.into()),
    }
}

/// Generates the synthetic dataset into `out`. A non-empty `out` is refused
/// unless `force` is set, in which case it is replaced.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenSummary> {
    if is_non_empty_dir(out)? {
        if !force {
            return Err(Error::Config(format!("{} exists and is not empty (use --force)", out.display())));
        }
        fs::remove_dir_all(out)?;
    }
    let dc = cfg.dataset_config();
    let ds = generate_dataset(&dc)?;
    write_dataset(out, &ds)?;
    Ok(GenSummary { train: dc.train, test: dc.test, rows: dc.rows, cols: dc.cols, seed: dc.seed })
}

/// Builds the provider described by the config; the oracle is given the
/// ground truth of every sample in `ds`.
pub fn build_provider(cfg: &RunConfig, ds: &Dataset) -> Result<Box<dyn MaskProvider>> {
    Ok(match cfg.provider.kind {
        ProviderKind::Oracle => {
            let mut p = OracleProvider::new(cfg.oracle_config())?;
            for s in &ds.samples {
                p.insert(s.id.clone(), s.gt.clone());
            }
            Box::new(p)
        }
        ProviderKind::Store => {
            let dir = cfg
                .provider
                .store_dir
                .as_ref()
                .ok_or_else(|| Error::Config("provider.store_dir is required for the store provider".into()))?;
            Box::new(MaskStore::open(dir.clone())?)
        }
        ProviderKind::Constant => {
            ensure((0.0..=1.0).contains(&cfg.provider.constant), || "provider.constant outside [0, 1]".to_string())
                .map_err(config_err)?;
            Box::new(ConstantProvider(cfg.provider.constant))
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub images: usize,
    pub kept: usize,
    pub rejected: usize,
    /// Images for which every view failed, with the reason.
    pub failed: Vec<(String, String)>,
    pub mean_u_a: f64,
    pub mean_u_r: f64,
    /// Mean IoU of the fused masks against ground truth.
    pub pseudo_iou: f64,
}

fn summarise(outputs: &[(String, Result<PipelineOutput>)], ds: &Dataset) -> Result<RefineSummary> {
    let ok: Vec<&PipelineOutput> = outputs.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
    let failed = outputs.iter().filter_map(|(id, r)| r.as_ref().err().map(|e| (id.clone(), e.to_string()))).collect();
    let n = ok.len().max(1) as f64;
    let mut pseudo_iou = 0.0;
    for o in &ok {
        let gt = &ds.get(&o.image_id).expect("outputs come from the dataset").gt;
        pseudo_iou += iou_score(&o.label.fused, gt, 0.5)?;
    }
    let kept = ok.iter().filter(|o| o.label.kept).count();
    Ok(RefineSummary {
        images: outputs.len(),
        kept,
        rejected: ok.len() - kept,
        failed,
        mean_u_a: ok.iter().map(|o| o.stats.u_a).sum::<f64>() / n,
        mean_u_r: ok.iter().map(|o| o.stats.u_r).sum::<f64>() / n,
        pseudo_iou: pseudo_iou / n,
    })
}

/// Runs the refinement pipeline over the training split.
pub fn refine_dataset(
    ds: &Dataset,
    provider: &dyn MaskProvider,
    pipeline: &PipelineConfig,
    jobs: usize,
) -> Result<Vec<(String, Result<PipelineOutput>)>> {
    let train: Vec<_> = ds.split(Split::Train).collect();
    let job_list: Vec<(&str, &crate::grid::Grid, &SparseAnnotation)> =
        train.iter().map(|s| (s.id.as_str(), &s.image, &s.annotation)).collect();
    let results = generate_all(&job_list, provider, pipeline, jobs)?;
    Ok(train.iter().map(|s| s.id.clone()).zip(results).collect())
}

/// Refines the training split of the dataset in `data` and stores the labels
/// in `out`, with `summary.json`.
pub fn cmd_refine(cfg: &RunConfig, data: &Path, out: &Path) -> Result<RefineSummary> {
    let ds = read_dataset(data)?;
    let provider = build_provider(cfg, &ds)?;
    let outputs = refine_dataset(&ds, provider.as_ref(), &cfg.pipeline_config(), cfg.jobs)?;
    fs::create_dir_all(out)?;
    for o in outputs.iter().filter_map(|(_, r)| r.as_ref().ok()) {
        write_label(out, o)?;
    }
    let summary = summarise(&outputs, &ds)?;
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Writes the augmented views of every training image so an external
/// segmenter can fill a mask store.
pub fn cmd_export_views(cfg: &RunConfig, data: &Path, out: &Path) -> Result<usize> {
    let ds = read_dataset(data)?;
    let pc = cfg.pipeline_config();
    let mut n = 0;
    for s in ds.split(Split::Train) {
        export_views(out, &s.id, &s.image, &s.annotation, &pc)?;
        n += 1;
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub images: usize,
    pub with_target: usize,
    pub parameters: usize,
    pub final_loss: f64,
}

/// Training items for the train split; images with a kept label in `labels`
/// get a dense target.
pub fn train_items(ds: &Dataset, labels: Option<&Path>) -> Result<Vec<TrainItem>> {
    ds.split(Split::Train)
        .map(|s| {
            let target = match labels {
                Some(dir) => match read_label(dir, &s.id) {
                    Ok((l, _)) => l.target().cloned(),
                    Err(Error::NotFound(_)) => None,
                    Err(e) => return Err(e),
                },
                None => None,
            };
            Ok(TrainItem { id: s.id.clone(), image: s.image.clone(), annotation: s.annotation.clone(), target })
        })
        .collect()
}

/// Trains on the dataset in `data` with labels from `labels` (sparse
/// annotations only when absent) and saves the model into `out`.
pub fn cmd_train(cfg: &RunConfig, data: &Path, labels: Option<&Path>, out: &Path) -> Result<TrainSummary> {
    let ds = read_dataset(data)?;
    let items = train_items(&ds, labels)?;
    let (params, history) = train(&items, arch_for(cfg, &ds), &cfg.train_config())?;
    save_checkpoint(out, &params)?;
    fs::write(out.join("history.json"), serde_json::to_string_pretty(&history)?)?;
    Ok(TrainSummary {
        images: items.len(),
        with_target: items.iter().filter(|i| i.target.is_some()).count(),
        parameters: params.parameter_count(),
        final_loss: history.epoch_loss.last().copied().unwrap_or(f64::NAN),
    })
}

fn arch_for(cfg: &RunConfig, ds: &Dataset) -> SegmenterConfig {
    SegmenterConfig { rows: ds.config.rows, cols: ds.config.cols, ..cfg.arch() }
}

/// Metrics of `params` over one split.
pub fn evaluate(
    params: &SegmenterParams,
    ds: &Dataset,
    split: Split,
) -> Result<(MetricReport, Vec<(String, ProbMask)>)> {
    let mut per_image = Vec::new();
    let mut preds = Vec::new();
    for s in ds.split(split) {
        let pred = predict(params, &s.image)?;
        per_image.push((s.id.clone(), image_metrics(&pred, &s.gt)?));
        preds.push((s.id.clone(), pred));
    }
    Ok((MetricReport::from_images(per_image)?, preds))
}

/// Evaluates the model in `model` on the configured split and writes
/// `metrics.json` and `metrics.txt` into `out`.
pub fn cmd_eval(cfg: &RunConfig, data: &Path, model: &Path, out: &Path) -> Result<MetricReport> {
    let ds = read_dataset(data)?;
    let params = load_checkpoint(model)?;
    let (report, preds) = evaluate(&params, &ds, cfg.eval.split)?;
    report.write(out)?;
    if cfg.eval.save_predictions {
        for (id, p) in &preds {
            pgm::write(&out.join("pred").join(format!("{id}.pgm")), p.grid())?;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub report: MetricReport,
    pub kept_fraction: f64,
    pub pseudo_iou: f64,
    pub history: TrainHistory,
}

/// Refine, train and evaluate in memory.
pub fn run_experiment(
    ds: &Dataset,
    provider: &dyn MaskProvider,
    pipeline: &PipelineConfig,
    arch: SegmenterConfig,
    train_cfg: &TrainConfig,
    jobs: usize,
) -> Result<ExperimentResult> {
    let outputs = refine_dataset(ds, provider, pipeline, jobs)?;
    let summary = summarise(&outputs, ds)?;
    let items: Vec<TrainItem> = ds
        .split(Split::Train)
        .zip(&outputs)
        .map(|(s, (_, o))| TrainItem {
            id: s.id.clone(),
            image: s.image.clone(),
            annotation: s.annotation.clone(),
            target: o.as_ref().ok().and_then(|o| o.label.target().cloned()),
        })
        .collect();
    let (params, history) = train(&items, arch, train_cfg)?;
    let (report, _) = evaluate(&params, ds, Split::Test)?;
    let n = outputs.len().max(1) as f64;
    Ok(ExperimentResult { report, kept_fraction: summary.kept as f64 / n, pseudo_iou: summary.pseudo_iou, history })
}

/// Replaces every training annotation with a fresh draw.
pub fn redraw_annotations(ds: &Dataset, annotation_seed: u64) -> Result<Dataset> {
    let mut out = ds.clone();
    for s in out.samples.iter_mut().filter(|s| s.split == Split::Train) {
        s.annotation =
            sample_annotation(&s.gt, &s.id, ds.config.annotation, ds.config.scribble_length, annotation_seed)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub runs: Vec<crate::evalkit::ImageMetrics>,
    pub mean: crate::evalkit::ImageMetrics,
    pub std: crate::evalkit::ImageMetrics,
}

fn mean_std(runs: &[crate::evalkit::ImageMetrics]) -> (crate::evalkit::ImageMetrics, crate::evalkit::ImageMetrics) {
    use crate::evalkit::ImageMetrics;
    let n = runs.len() as f64;
    let field = |f: fn(&ImageMetrics) -> f64| {
        let m = runs.iter().map(f).sum::<f64>() / n;
        let v = runs.iter().map(|r| (f(r) - m) * (f(r) - m)).sum::<f64>() / n;
        (m, v.sqrt())
    };
    let (mae, mae_s) = field(|m| m.mae);
    let (fb, fb_s) = field(|m| m.f_beta);
    let (iou, iou_s) = field(|m| m.iou);
    (ImageMetrics { mae, f_beta: fb, iou }, ImageMetrics { mae: mae_s, f_beta: fb_s, iou: iou_s })
}

/// Runs every configured arm (and view count) `repeat` times on the dataset
/// in `data` and writes `ablation.json` into `out`.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<ArmResult>> {
    let base = read_dataset(data)?;
    let mut rows: Vec<(String, PipelineConfig, bool)> = cfg
        .ablation
        .arms
        .iter()
        .map(|a| (a.name().to_string(), PipelineConfig { stages: a.stages(), ..cfg.pipeline }, a.uses_mfg()))
        .collect();
    for &k in &cfg.ablation.k_values {
        rows.push((format!("k={k}"), PipelineConfig { k, stages: Stages::default(), ..cfg.pipeline }, true));
    }
    let mut results = Vec::with_capacity(rows.len());
    for (name, pipeline, mfg) in rows {
        let mut runs = Vec::with_capacity(cfg.ablation.repeat);
        for r in 0..cfg.ablation.repeat {
            let rep = RunConfig { seed: rng::derive(cfg.seed, r as u64), ..cfg.clone() };
            let ds = if cfg.ablation.vary_points && base.config.annotation == AnnotationKind::Points {
                redraw_annotations(&base, rep.stage_seed("annotation", 0))?
            } else {
                base.clone()
            };
            let provider = build_provider(&rep, &ds)?;
            let pipeline = PipelineConfig { seed: rep.pipeline_config().seed, ..pipeline };
            let arch = SegmenterConfig { mfg, ..arch_for(&rep, &ds) };
            let res = run_experiment(&ds, provider.as_ref(), &pipeline, arch, &rep.train_config(), cfg.jobs)?;
            runs.push(crate::evalkit::ImageMetrics {
                mae: res.report.mae,
                f_beta: res.report.f_beta,
                iou: res.report.iou,
            });
        }
        let (mean, std) = mean_std(&runs);
        results.push(ArmResult { name, runs, mean, std });
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&results)?)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[pipeline]\nkk = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = RunConfig::default().with_overrides(&["pipeline.nope=1".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::default()
            .with_overrides(&[
                "pipeline.k=6".into(),
                "pipeline.stages.fusion=false".into(),
                "provider.kind=constant".into(),
                "dataset.objects=2".into(),
                "pipeline.k=7".into(),
            ])
            .unwrap();
        assert_eq!(cfg.pipeline.k, 7);
        assert!(!cfg.pipeline.stages.fusion);
        assert_eq!(cfg.provider.kind, ProviderKind::Constant);
        assert_eq!(cfg.dataset.objects, Some(2));
        assert!(RunConfig::default().with_overrides(&["pipeline.k".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["pipeline.k=0".into()]).is_err());
    }

    #[test]
    fn master_seed_reseeds_every_stage() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..RunConfig::default() };
        assert_ne!(a.dataset_config().seed, b.dataset_config().seed);
        assert_ne!(a.train_config().seed, b.train_config().seed);
        assert_ne!(a.pipeline_config().seed, a.train_config().seed);
    }
}
