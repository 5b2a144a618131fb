use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cosseg::app::{self, RunConfig};
use cosseg::Error;

#[derive(Parser)]
#[command(name = "cosseg", version, about = "Weakly-supervised concealed object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set pipeline.k=6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for refinement.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Where the config echo goes. Defaults to runs/<timestamp>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Objects per image (random 1..=3 by default).
        #[arg(long)]
        objects: Option<usize>,
        /// Replace a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Build refined pseudo-labels for the training split.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Read provider masks from this store instead of the oracle.
        #[arg(long)]
        mask_store: Option<PathBuf>,
        #[arg(long)]
        no_fusion: bool,
        #[arg(long)]
        no_plw: bool,
        #[arg(long)]
        no_ils: bool,
        /// Only write the augmented views (for an external segmenter) and stop.
        #[arg(long)]
        export_views: Option<PathBuf>,
    },
    /// Train the segmenter.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Pseudo-labels from `refine`; sparse supervision only when absent.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum)]
        mfg: Option<Switch>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a trained model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation arms end to end.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        repeat: Option<usize>,
        /// Redraw point annotations on every repeat.
        #[arg(long)]
        vary_points: bool,
    },
}

impl Common {
    fn resolve(&self, extra: &[String]) -> Result<(RunConfig, PathBuf), Error> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut sets = self.set.clone();
        if let Some(s) = self.seed {
            sets.push(format!("seed={s}"));
        }
        if let Some(j) = self.jobs {
            sets.push(format!("jobs={j}"));
        }
        sets.extend_from_slice(extra);
        let cfg = base.with_overrides(&sets)?;
        let run_dir = self
            .run_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(chrono::Local::now().format("%Y%m%d-%H%M%S").to_string()));
        Ok((cfg, run_dir))
    }
}

fn or_run(out: &Option<PathBuf>, run_dir: &Path, name: &str) -> PathBuf {
    out.clone().unwrap_or_else(|| run_dir.join(name))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Gen { common, out, objects, force } => {
            let extra: Vec<String> = objects.map(|n| format!("dataset.objects={n}")).into_iter().collect();
            let (cfg, run_dir) = common.resolve(&extra)?;
            let out = or_run(&out, &run_dir, "data");
            let s = app::cmd_gen(&cfg, &out, force)?;
            app::write_run_dir(&run_dir, &cfg, "gen")?;
            println!(
                "generated {} train + {} test images ({}x{}) in {}",
                s.train,
                s.test,
                s.rows,
                s.cols,
                out.display()
            );
        }
        Command::Refine { common, data, out, mask_store, no_fusion, no_plw, no_ils, export_views } => {
            let mut extra = Vec::new();
            if let Some(dir) = &mask_store {
                extra.push("provider.kind=store".to_string());
                extra.push(format!("provider.store_dir={:?}", dir.display().to_string()));
            }
            for (flag, key) in [(no_fusion, "fusion"), (no_plw, "pixel_weighting"), (no_ils, "image_selection")] {
                if flag {
                    extra.push(format!("pipeline.stages.{key}=false"));
                }
            }
            let (cfg, run_dir) = common.resolve(&extra)?;
            if let Some(dir) = export_views {
                let n = app::cmd_export_views(&cfg, &data, &dir)?;
                println!("exported views of {n} images to {}", dir.display());
                return Ok(());
            }
            let out = or_run(&out, &run_dir, "labels");
            let s = app::cmd_refine(&cfg, &data, &out)?;
            app::write_run_dir(&run_dir, &cfg, "refine")?;
            println!(
                "kept {}/{} images, rejected {}, failed {}; mean U_a {:.4}, mean U_r {:.4}, pseudo-label IoU {:.4}",
                s.kept,
                s.images,
                s.rejected,
                s.failed.len(),
                s.mean_u_a,
                s.mean_u_r,
                s.pseudo_iou
            );
            for (id, why) in &s.failed {
                eprintln!("skipped {id}: {why}");
            }
        }
        Command::Train { common, data, labels, mfg, out } => {
            let extra: Vec<String> =
                mfg.map(|m| format!("mfg.enabled={}", matches!(m, Switch::On))).into_iter().collect();
            let (cfg, run_dir) = common.resolve(&extra)?;
            let out = or_run(&out, &run_dir, "model");
            let s = app::cmd_train(&cfg, &data, labels.as_deref(), &out)?;
            app::write_run_dir(&run_dir, &cfg, "train")?;
            println!(
                "trained on {} images ({} with pseudo-labels), {} parameters, final loss {:.5}; saved to {}",
                s.images,
                s.with_target,
                s.parameters,
                s.final_loss,
                out.display()
            );
        }
        Command::Eval { common, data, model, out } => {
            let (cfg, run_dir) = common.resolve(&[])?;
            let out = or_run(&out, &run_dir, "eval");
            let report = app::cmd_eval(&cfg, &data, &model, &out)?;
            app::write_run_dir(&run_dir, &cfg, "eval")?;
            print!("{}", report.table());
        }
        Command::Ablate { common, data, out, repeat, vary_points } => {
            let mut extra: Vec<String> = repeat.map(|r| format!("ablation.repeat={r}")).into_iter().collect();
            if vary_points {
                extra.push("ablation.vary_points=true".into());
            }
            let (cfg, run_dir) = common.resolve(&extra)?;
            let out = or_run(&out, &run_dir, "ablation");
            let rows = app::cmd_ablate(&cfg, &data, &out)?;
            app::write_run_dir(&run_dir, &cfg, "ablate")?;
            println!("{:<18} {:>14} {:>14} {:>14}", "arm", "MAE", "F_beta", "IoU");
            for r in rows {
                println!(
                    "{:<18} {:>6.4}±{:<7.4} {:>6.4}±{:<7.4} {:>6.4}±{:<7.4}",
                    r.name, r.mean.mae, r.std.mae, r.mean.f_beta, r.std.f_beta, r.mean.iou, r.std.iou
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(if e.is_contract() { 3 } else { 1 })
        }
    }
}
