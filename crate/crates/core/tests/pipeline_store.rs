// Refinement fed by a mask store that an external segmenter filled offline.

use cosseg::app::{cmd_refine, cmd_train, write_run_dir, ProviderKind, RunConfig};
use cosseg::augment::{apply_grid, Interpolation};
use cosseg::dataset::{generate_dataset, write_dataset, DatasetConfig, Split};
use cosseg::provider::MaskStore;
use cosseg::pseudolabel::{generate_pseudo_label, plan_views, read_label, PipelineConfig};
use cosseg::{Error, ProbMask};

fn small() -> DatasetConfig {
    DatasetConfig { rows: 32, cols: 32, train: 3, test: 1, seed: 7, ..DatasetConfig::default() }
}

/// Stores the exact ground truth of every planned view except `skip`.
fn fill_store(store: &mut MaskStore, id: &str, gt: &ProbMask, plans: &[cosseg::pseudolabel::ViewPlan], skip: &[usize]) {
    for v in plans.iter().filter(|v| !skip.contains(&v.index)) {
        let view = ProbMask::new(apply_grid(gt.grid(), &v.spec, Interpolation::Nearest).unwrap()).unwrap();
        store.put(id, gt.dims(), v.index, &view).unwrap();
    }
}

#[test]
fn missing_view_is_skipped_and_the_rest_fused() {
    let ds = generate_dataset(&small()).unwrap();
    let s = ds.split(Split::Train).next().unwrap();
    let cfg = PipelineConfig { k: 4, seed: 3, ..PipelineConfig::default() };
    let plans = plan_views(&s.id, &s.image, &s.annotation, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut store = MaskStore::create(dir.path()).unwrap();
    fill_store(&mut store, &s.id, &s.gt, &plans, &[3]);
    store.save_manifest().unwrap();

    let store = MaskStore::open(dir.path()).unwrap();
    let out = generate_pseudo_label(&s.id, &s.image, &s.annotation, &store, &cfg).unwrap();
    assert_eq!(out.k_effective, 3);
    assert_eq!(out.failed.iter().map(|f| f.0).collect::<Vec<_>>(), vec![3]);
    assert_eq!(out.label.fused, s.gt);
    assert!(out.label.kept);
}

#[test]
fn image_without_masks_is_reported_and_trained_on_sparse_labels() {
    let work = tempfile::tempdir().unwrap();
    let (data, store_dir, labels, model) =
        (work.path().join("data"), work.path().join("store"), work.path().join("labels"), work.path().join("model"));
    let mut cfg = RunConfig { dataset: small(), ..RunConfig::default() };
    cfg.provider.kind = ProviderKind::Store;
    cfg.provider.store_dir = Some(store_dir.clone());
    cfg.pipeline.k = 3;
    cfg.train.epochs = 1;
    cfg.mfg.channels = 8;

    let ds = generate_dataset(&cfg.dataset_config()).unwrap();
    write_dataset(&data, &ds).unwrap();
    let pc = cfg.pipeline_config();
    let mut store = MaskStore::create(&store_dir).unwrap();
    let train: Vec<_> = ds.split(Split::Train).collect();
    for s in &train[1..] {
        let plans = plan_views(&s.id, &s.image, &s.annotation, &pc).unwrap();
        fill_store(&mut store, &s.id, &s.gt, &plans, &[]);
    }
    store.save_manifest().unwrap();

    let summary = cmd_refine(&cfg, &data, &labels).unwrap();
    assert_eq!(summary.images, 3);
    assert_eq!(summary.kept, 2);
    assert_eq!(summary.failed.len(), 1);
    assert_eq!(summary.failed[0].0, train[0].id);
    assert!(matches!(read_label(&labels, &train[0].id).unwrap_err(), Error::NotFound(_)));
    assert_eq!(summary.pseudo_iou, 1.0);

    let t = cmd_train(&cfg, &data, Some(&labels), &model).unwrap();
    assert_eq!((t.images, t.with_target), (3, 2));
    assert!(t.final_loss.is_finite());
}

#[test]
fn echoed_config_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::default()
        .with_overrides(&["seed=42".into(), "pipeline.tau_r=0.4".into(), "ablation.arms=[\"baseline\"]".into()])
        .unwrap();
    write_run_dir(dir.path(), &cfg, "test").unwrap();
    let back = RunConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(back, cfg);
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seeds"]["master"], 42);
}
