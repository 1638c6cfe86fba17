use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lumbarseg::localizer::{self, LocalizerModel};
use lumbarseg::metrics;
use lumbarseg::phantom::{self, Manifest, Split, SuiteConfig};
use lumbarseg::pipeline::{self, Case, PipelineConfig};
use lumbarseg::segmenter::{self, SegModel};
use lumbarseg::volume::{self, BoundingBox};
use lumbarseg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lumbarseg",
    version,
    about = "Localise and segment lumbar vertebrae in CT-like volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set seg_lr=1e-3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Use the reduced profile (3 mm phantoms, small networks).
    #[arg(long, global = true)]
    toy: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = if self.toy {
            PipelineConfig::toy()
        } else {
            PipelineConfig::default()
        };
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            c.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {kv}` needs KEY=VALUE")))?;
            c.set(k, v)?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom suite and its manifest.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Bounding-box localisation.
    #[command(subcommand)]
    Localize(LocalizeCmd),
    /// Sagittal-slice segmentation.
    #[command(subcommand)]
    Segment(SegmentCmd),
    /// Dice evaluation of predicted label volumes.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Directory holding `<case>_pred.mhd` files.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run every stage end to end.
    Pipeline {
        /// Existing manifest; a phantom suite is generated when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Segment inside ground-truth boxes instead of predicted ones.
        #[arg(long)]
        use_gt_boxes: bool,
        /// Skip binary pretraining.
        #[arg(long)]
        scratch: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum LocalizeCmd {
    /// Train on the manifest's train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Predict boxes for the test split.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Output boxes CSV.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sensitivity of predicted boxes against the ground truth.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        boxes: PathBuf,
        /// Output sensitivity CSV.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SegmentCmd {
    /// Binary bone/background pretraining.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Six-class training from a pretrained model or from scratch.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Binary checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        scratch: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Segment the test split; uses ground-truth boxes unless `--boxes` is given.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        boxes: Option<PathBuf>,
        /// Output directory for `<case>_pred.mhd`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn cases(manifest: &Path, split: Split) -> Result<Vec<Case>> {
    let m = Manifest::load(manifest)?;
    let all = pipeline::load_cases(&m)?;
    let picked: Vec<Case> = all.into_iter().filter(|c| c.split == split).collect();
    if picked.is_empty() {
        return Err(Error::Config(format!("manifest has no {} cases", split.as_str())));
    }
    Ok(picked)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::Config(format!("{}: {e}", d.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_boxes(path: &Path) -> Result<BTreeMap<String, BoundingBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    pipeline::parse_boxes_csv(&text)
}

fn box_for(boxes: &BTreeMap<String, BoundingBox>, id: &str) -> Result<BoundingBox> {
    boxes
        .get(id)
        .copied()
        .ok_or_else(|| Error::Config(format!("no box for case {id}")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom {
            out,
            train,
            test,
            common,
        } => {
            let cfg = common.config()?;
            let suite = SuiteConfig::new(
                train.unwrap_or(cfg.phantom_train),
                test.unwrap_or(cfg.phantom_test),
                cfg.seed,
                cfg.phantom_base(),
            );
            let path = phantom::gen_suite(&suite, &out)?;
            println!("wrote {}", path.display());
        }
        Command::Localize(LocalizeCmd::Train { manifest, out, common }) => {
            let cfg = common.config()?;
            let train = cases(&manifest, Split::Train)?;
            let refs: Vec<&Case> = train.iter().collect();
            let (model, trace) = pipeline::train_localizer_stage(&cfg, &refs)?;
            model.save(&out)?;
            println!(
                "final loss {:.6}, wrote {}",
                trace.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Localize(LocalizeCmd::Predict {
            manifest,
            model,
            out,
            common,
        }) => {
            let cfg = common.config()?;
            let model = LocalizerModel::load(&model)?;
            let test = cases(&manifest, Split::Test)?;
            let refs: Vec<&Case> = test.iter().collect();
            let boxes = pipeline::predict_boxes(&cfg, &model, &refs)?;
            let rows: Vec<_> = test.iter().map(|c| c.id.clone()).zip(boxes).collect();
            write(&out, &pipeline::boxes_csv(&rows))?;
            println!("wrote {}", out.display());
        }
        Command::Localize(LocalizeCmd::Eval { manifest, boxes, out }) => {
            let boxes = read_boxes(&boxes)?;
            let test = cases(&manifest, Split::Test)?;
            let rows = test
                .iter()
                .map(|c| {
                    Ok((
                        c.id.clone(),
                        localizer::sensitivity(&c.labels, &box_for(&boxes, &c.id)?)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            write(&out, &metrics::sensitivity_csv(&rows))?;
            let mean = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
            println!("mean sensitivity {mean:.4}");
        }
        Command::Segment(SegmentCmd::Pretrain { manifest, out, common }) => {
            let cfg = common.config()?;
            let train = cases(&manifest, Split::Train)?;
            let refs: Vec<&Case> = train.iter().collect();
            let (model, trace) = pipeline::pretrain_segmenter_stage(&cfg, &refs)?;
            model.save(&out)?;
            write(&out.with_extension("loss.csv"), &segmenter::loss_trace_csv(&trace))?;
            println!(
                "final loss {:.6}, wrote {}",
                trace.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Segment(SegmentCmd::Train {
            manifest,
            out,
            init,
            scratch,
            common,
        }) => {
            let mut cfg = common.config()?;
            cfg.scratch |= scratch;
            let binary = match &init {
                Some(p) => Some(SegModel::load(p)?),
                None => None,
            };
            let train = cases(&manifest, Split::Train)?;
            let refs: Vec<&Case> = train.iter().collect();
            let (model, trace) = pipeline::train_segmenter_stage(&cfg, &refs, binary.as_ref())?;
            model.save(&out)?;
            write(&out.with_extension("loss.csv"), &segmenter::loss_trace_csv(&trace))?;
            println!(
                "final loss {:.6}, wrote {}",
                trace.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Segment(SegmentCmd::Predict {
            manifest,
            model,
            boxes,
            out,
            common,
        }) => {
            let cfg = common.config()?;
            let model = SegModel::load(&model)?;
            let test = cases(&manifest, Split::Test)?;
            let boxes = boxes.as_deref().map(read_boxes).transpose()?;
            let pairs = test
                .iter()
                .map(|c| {
                    let b = match &boxes {
                        Some(m) => box_for(m, &c.id)?,
                        None => c.gt_box(cfg.gt_tolerance)?,
                    };
                    Ok((c, b))
                })
                .collect::<Result<Vec<_>>>()?;
            let preds = pipeline::segment_cases(&cfg, &model, &pairs)?;
            fs::create_dir_all(&out).map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
            for (c, p) in test.iter().zip(&preds) {
                volume::save_labels(p, out.join(format!("{}_pred.mhd", c.id)))?;
            }
            println!("wrote {} predictions to {}", preds.len(), out.display());
        }
        Command::Eval {
            manifest,
            predictions,
            out,
            common,
        } => {
            let mut cfg = common.config()?;
            cfg.out_dir = out;
            fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::Config(format!("{}: {e}", cfg.out_dir.display())))?;
            let test = cases(&manifest, Split::Test)?;
            let preds = test
                .iter()
                .map(|c| volume::load_labels(predictions.join(format!("{}_pred.mhd", c.id))))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Case> = test.iter().collect();
            let report = pipeline::evaluate(&cfg, &refs, &preds)?;
            println!(
                "mean lumbar Dice {:.2}, mean per-label Dice {:.2}",
                report.mean_lumbar_dice(),
                report.mean_label_dice()
            );
        }
        Command::Pipeline {
            manifest,
            out,
            use_gt_boxes,
            scratch,
            common,
        } => {
            let mut cfg = common.config()?;
            if manifest.is_some() {
                cfg.manifest = manifest;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.use_gt_boxes |= use_gt_boxes;
            cfg.scratch |= scratch;
            let summary = pipeline::run_pipeline(&cfg)?;
            println!("{summary}");
        }
    }
    Ok(())
}

/// Tag for errors of the standalone subcommands; `pipeline` tags its own.
fn stage(cmd: &Command) -> Option<&'static str> {
    Some(match cmd {
        Command::Phantom { .. } => "phantom",
        Command::Localize(LocalizeCmd::Train { .. }) => "localize train",
        Command::Localize(LocalizeCmd::Predict { .. }) => "localize predict",
        Command::Localize(LocalizeCmd::Eval { .. }) => "localize eval",
        Command::Segment(SegmentCmd::Pretrain { .. }) => "segment pretrain",
        Command::Segment(SegmentCmd::Train { .. }) => "segment train",
        Command::Segment(SegmentCmd::Predict { .. }) => "segment predict",
        Command::Eval { .. } => "eval",
        Command::Pipeline { .. } => return None,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let tag = stage(&cli.command);
    match run(cli).map_err(|e| match tag {
        Some(s) => e.in_stage(s),
        None => e,
    }) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
