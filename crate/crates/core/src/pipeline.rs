//! End-to-end orchestration: configuration, per-stage runners and the run
//! directory layout used by the command-line tool.
//!
//! Run directory contents:
//!
//! ```text
//! run_record.txt            config snapshot and seeds
//! phantoms/manifest.txt     generated data (when no manifest is given)
//! localizer.ckpt            stage-one model
//! boxes.csv                 case,x_min,x_max,y_min,y_max,z_min,z_max
//! sensitivity.csv           case,sensitivity + mean row
//! seg_binary.ckpt / seg_binary_loss.csv
//! seg_multiclass.ckpt / seg_multiclass_loss.csv
//! predictions/<case>_pred.mhd
//! dice.csv                  case,label,dice + per-label mean,std footer
//! dice_table.csv            case,L1..L5,Lumbar + mean/std rows
//! overlays/<case>_<plane>.ppm
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::localizer::{self, CannyParams, FeatureSpec, LocalizerHyper, LocalizerModel};
use crate::metrics::{self, DiceReport};
use crate::phantom::{self, Manifest, PhantomConfig, PhantomFlags, Split, SuiteConfig};
use crate::postprocess;
use crate::rng;
use crate::segmenter::{self, AugmentConfig, SegInit, SegMode, SegModel, SegTrainConfig, UNetConfig};
use crate::volume::{self, Axis, BoundingBox, LabelVolume, Volume, Window};

/// Environment variable holding the worker count for per-case inference.
pub const THREADS_ENV: &str = "LUMBARSEG_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub toy: bool,
    pub phantom_train: usize,
    pub phantom_test: usize,

    pub loc_features: usize,
    pub loc_epochs: usize,
    pub loc_lr: f64,
    pub loc_momentum: f64,
    pub loc_batch: usize,
    pub loc_samples_per_volume: usize,
    pub loc_target_scale: f64,
    pub loc_augment_copies: usize,
    pub loc_max_voxels: usize,
    /// Voxels added around predicted boxes.
    pub tolerance: i64,
    /// Voxels added around the tight label box to form the ground-truth box.
    pub gt_tolerance: i64,

    pub seg_levels: usize,
    pub seg_base_channels: usize,
    pub seg_epochs_binary: usize,
    pub seg_epochs_multiclass: usize,
    pub seg_lr: f64,
    pub seg_final_lr_ratio: f64,
    pub seg_batch: usize,
    /// Sagittal slices drawn per crop and epoch in binary pretraining; 0 uses
    /// every slice.
    pub seg_slices_per_crop: usize,
    /// Same for multiclass training.
    pub seg_slices_per_crop_multiclass: usize,
    pub seg_deltas: Vec<usize>,
    pub seg_augment: bool,
    pub close_radius: usize,

    pub window_lo: f64,
    pub window_hi: f64,
    pub use_gt_boxes: bool,
    pub scratch: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out_dir: PathBuf::from("run"),
            seed: 0,
            toy: false,
            phantom_train: 20,
            phantom_test: 10,
            loc_features: 500,
            loc_epochs: 1000,
            loc_lr: 1e-3,
            loc_momentum: 0.9,
            loc_batch: 64,
            loc_samples_per_volume: 2000,
            loc_target_scale: 50.0,
            loc_augment_copies: 1,
            loc_max_voxels: localizer::DEFAULT_MAX_VOXELS,
            tolerance: localizer::DEFAULT_TOLERANCE,
            gt_tolerance: 15,
            seg_levels: 5,
            seg_base_channels: 32,
            seg_epochs_binary: 3000,
            seg_epochs_multiclass: 2000,
            seg_lr: 1e-4,
            seg_final_lr_ratio: 1.0,
            seg_batch: 8,
            seg_slices_per_crop: 0,
            seg_slices_per_crop_multiclass: 0,
            seg_deltas: vec![5, 10, 15, 20, 25],
            seg_augment: true,
            close_radius: postprocess::CLOSE_RADIUS,
            window_lo: 0.0,
            window_hi: 1000.0,
            use_gt_boxes: false,
            scratch: false,
        }
    }
}

impl PipelineConfig {
    /// Reduced profile: 3 mm phantoms, small U-Net, short schedules.
    pub fn toy() -> Self {
        Self {
            toy: true,
            loc_epochs: 300,
            loc_samples_per_volume: 200,
            loc_max_voxels: 4000,
            seg_levels: 3,
            seg_base_channels: 8,
            seg_epochs_binary: 300,
            seg_epochs_multiclass: 200,
            seg_lr: 1e-3,
            seg_batch: 1,
            seg_slices_per_crop: 1,
            seg_slices_per_crop_multiclass: 5,
            // the default deltas scaled from 1 mm to 3 mm voxels
            seg_deltas: vec![2, 3, 5, 7, 8],
            ..Self::default()
        }
    }

    pub fn window(&self) -> Window {
        Window {
            lo: self.window_lo,
            hi: self.window_hi,
        }
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            levels: self.seg_levels,
            base_channels: self.seg_base_channels,
            in_channels: 1,
            out_classes: 6,
        }
    }

    pub fn phantom_base(&self) -> PhantomConfig {
        let base = if self.toy {
            PhantomConfig::toy()
        } else {
            PhantomConfig::default()
        };
        PhantomConfig {
            gt_margin: self.gt_tolerance,
            ..base
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            deltas: self.seg_deltas.clone(),
            roi: self.seg_augment,
            geometric: self.seg_augment,
            ..AugmentConfig::default()
        }
    }

    pub fn localizer_hyper(&self) -> LocalizerHyper {
        LocalizerHyper {
            epochs: self.loc_epochs,
            lr: self.loc_lr,
            momentum: self.loc_momentum,
            batch: self.loc_batch,
            samples_per_volume: self.loc_samples_per_volume,
            target_scale: self.loc_target_scale,
            augment_copies: self.loc_augment_copies,
            canny: CannyParams::default(),
            window: self.window(),
            seed: rng::derive(self.seed, 10),
            ..LocalizerHyper::default()
        }
    }

    pub fn seg_train(&self, mode: SegMode, epochs: usize, stream: u64) -> SegTrainConfig {
        let slices = match mode {
            SegMode::Binary => self.seg_slices_per_crop,
            SegMode::Multiclass => self.seg_slices_per_crop_multiclass,
        };
        SegTrainConfig {
            epochs,
            lr: self.seg_lr,
            final_lr_ratio: self.seg_final_lr_ratio,
            batch: self.seg_batch,
            slices_per_crop: (slices > 0).then_some(slices),
            window: self.window(),
            seed: rng::derive(self.seed, stream),
        }
    }

    /// Sets one documented key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
            }
        }
        let v = value.trim();
        match key.trim() {
            "manifest" => self.manifest = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = p(key, v)?,
            "toy" => {
                // switching profile resets every profile-dependent value
                let keep = (self.manifest.clone(), self.out_dir.clone(), self.seed);
                *self = if flag(key, v)? { Self::toy() } else { Self::default() };
                (self.manifest, self.out_dir, self.seed) = keep;
            }
            "phantom_train" => self.phantom_train = p(key, v)?,
            "phantom_test" => self.phantom_test = p(key, v)?,
            "loc_features" => self.loc_features = p(key, v)?,
            "loc_epochs" => self.loc_epochs = p(key, v)?,
            "loc_lr" => self.loc_lr = p(key, v)?,
            "loc_momentum" => self.loc_momentum = p(key, v)?,
            "loc_batch" => self.loc_batch = p(key, v)?,
            "loc_samples_per_volume" => self.loc_samples_per_volume = p(key, v)?,
            "loc_target_scale" => self.loc_target_scale = p(key, v)?,
            "loc_augment_copies" => self.loc_augment_copies = p(key, v)?,
            "loc_max_voxels" => self.loc_max_voxels = p(key, v)?,
            "tolerance" => self.tolerance = p(key, v)?,
            "gt_tolerance" => self.gt_tolerance = p(key, v)?,
            "seg_levels" => self.seg_levels = p(key, v)?,
            "seg_base_channels" => self.seg_base_channels = p(key, v)?,
            "seg_epochs_binary" => self.seg_epochs_binary = p(key, v)?,
            "seg_epochs_multiclass" => self.seg_epochs_multiclass = p(key, v)?,
            "seg_lr" => self.seg_lr = p(key, v)?,
            "seg_final_lr_ratio" => self.seg_final_lr_ratio = p(key, v)?,
            "seg_batch" => self.seg_batch = p(key, v)?,
            "seg_slices_per_crop" => self.seg_slices_per_crop = p(key, v)?,
            "seg_slices_per_crop_multiclass" => self.seg_slices_per_crop_multiclass = p(key, v)?,
            "seg_deltas" => self.seg_deltas = v.split(',').map(|d| p(key, d.trim())).collect::<Result<_>>()?,
            "seg_augment" => self.seg_augment = flag(key, v)?,
            "close_radius" => self.close_radius = p(key, v)?,
            "window_lo" => self.window_lo = p(key, v)?,
            "window_hi" => self.window_hi = p(key, v)?,
            "use_gt_boxes" => self.use_gt_boxes = flag(key, v)?,
            "scratch" => self.scratch = flag(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment. A `toy` key is
    /// applied first so the remaining keys refine the chosen profile.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        pairs.sort_by_key(|(k, _)| k != "toy");
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = Self::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Text form that [`PipelineConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        let mut m = BTreeMap::new();
        m.insert(
            "manifest",
            self.manifest
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        m.insert("out_dir", self.out_dir.display().to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("toy", self.toy.to_string());
        m.insert("phantom_train", self.phantom_train.to_string());
        m.insert("phantom_test", self.phantom_test.to_string());
        m.insert("loc_features", self.loc_features.to_string());
        m.insert("loc_epochs", self.loc_epochs.to_string());
        m.insert("loc_lr", self.loc_lr.to_string());
        m.insert("loc_momentum", self.loc_momentum.to_string());
        m.insert("loc_batch", self.loc_batch.to_string());
        m.insert("loc_samples_per_volume", self.loc_samples_per_volume.to_string());
        m.insert("loc_target_scale", self.loc_target_scale.to_string());
        m.insert("loc_augment_copies", self.loc_augment_copies.to_string());
        m.insert("loc_max_voxels", self.loc_max_voxels.to_string());
        m.insert("tolerance", self.tolerance.to_string());
        m.insert("gt_tolerance", self.gt_tolerance.to_string());
        m.insert("seg_levels", self.seg_levels.to_string());
        m.insert("seg_base_channels", self.seg_base_channels.to_string());
        m.insert("seg_epochs_binary", self.seg_epochs_binary.to_string());
        m.insert("seg_epochs_multiclass", self.seg_epochs_multiclass.to_string());
        m.insert("seg_lr", self.seg_lr.to_string());
        m.insert("seg_final_lr_ratio", self.seg_final_lr_ratio.to_string());
        m.insert("seg_batch", self.seg_batch.to_string());
        m.insert("seg_slices_per_crop", self.seg_slices_per_crop.to_string());
        m.insert(
            "seg_slices_per_crop_multiclass",
            self.seg_slices_per_crop_multiclass.to_string(),
        );
        m.insert("seg_deltas", join(&self.seg_deltas));
        m.insert("seg_augment", self.seg_augment.to_string());
        m.insert("close_radius", self.close_radius.to_string());
        m.insert("window_lo", self.window_lo.to_string());
        m.insert("window_hi", self.window_hi.to_string());
        m.insert("use_gt_boxes", self.use_gt_boxes.to_string());
        m.insert("scratch", self.scratch.to_string());
        let mut s = String::new();
        for (k, v) in m {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.loc_features == 0 || self.loc_batch == 0 || self.seg_batch == 0 {
            return Err(Error::Config("feature count and batch sizes must be positive".into()));
        }
        if !(self.loc_lr > 0.0 && self.seg_lr > 0.0) || !(0.0..1.0).contains(&self.loc_momentum) {
            return Err(Error::Config(
                "learning rates must be positive and momentum in [0, 1)".into(),
            ));
        }
        if !(self.seg_final_lr_ratio > 0.0 && self.seg_final_lr_ratio <= 1.0) {
            return Err(Error::Config("seg_final_lr_ratio must lie in (0, 1]".into()));
        }
        if self.tolerance < 0 || self.gt_tolerance < 0 {
            return Err(Error::Config("tolerances must be non-negative".into()));
        }
        if !(self.window_hi > self.window_lo) {
            return Err(Error::Config("window_hi must exceed window_lo".into()));
        }
        if self.close_radius == 0 {
            return Err(Error::Config("close_radius must be at least 1".into()));
        }
        self.unet().validate()?;
        self.augment().validate()
    }
}

/// One loaded case.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub split: Split,
    pub image: Volume,
    pub labels: LabelVolume,
    pub flags: PhantomFlags,
}

impl Case {
    /// Tight lumbar box grown by `tol` voxels.
    pub fn gt_box(&self, tol: i64) -> Result<BoundingBox> {
        Ok(BoundingBox::of_labels(&self.labels)
            .ok_or(Error::EmptyGroundTruth)?
            .expand(tol, self.labels.dims()))
    }
}

pub fn load_cases(manifest: &Manifest) -> Result<Vec<Case>> {
    manifest
        .cases
        .iter()
        .map(|c| {
            let image = volume::load_volume(&c.image_path)?;
            let labels = volume::load_labels(&c.label_path)?;
            if image.dims() != labels.dims() {
                return Err(Error::Shape(format!("case {}: image and label dims differ", c.case_id)));
            }
            Ok(Case {
                id: c.case_id.clone(),
                split: c.split,
                image,
                labels,
                flags: c.flags,
            })
        })
        .collect()
}

/// Worker count for per-case inference (defaults to 1).
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Order-preserving map over cases on up to `threads` scoped workers.
fn par_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let results: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

pub fn train_localizer_stage(cfg: &PipelineConfig, train: &[&Case]) -> Result<(LocalizerModel, Vec<f64>)> {
    let spec = FeatureSpec::with_defaults(cfg.loc_features, rng::derive(cfg.seed, 11))?;
    let data = train
        .iter()
        .map(|c| Ok((c.image.clone(), c.gt_box(cfg.gt_tolerance)?)))
        .collect::<Result<Vec<_>>>()?;
    localizer::train_localizer(&data, &spec, &cfg.localizer_hyper())
}

pub fn predict_boxes(cfg: &PipelineConfig, model: &LocalizerModel, cases: &[&Case]) -> Result<Vec<BoundingBox>> {
    par_map(cases, thread_count(), |c| {
        localizer::localize(model, &c.image, cfg.loc_max_voxels, cfg.tolerance)
    })
}

fn crops(cfg: &PipelineConfig, train: &[&Case]) -> Result<Vec<(Volume, LabelVolume)>> {
    train
        .iter()
        .map(|c| {
            let b = c.gt_box(cfg.gt_tolerance)?;
            Ok((c.image.crop(&b)?, c.labels.crop(&b)?))
        })
        .collect()
}

pub fn pretrain_segmenter_stage(cfg: &PipelineConfig, train: &[&Case]) -> Result<(SegModel, Vec<f64>)> {
    segmenter::train_segmenter(
        &crops(cfg, train)?,
        &cfg.unet(),
        &cfg.augment(),
        SegMode::Binary,
        SegInit::Scratch {
            seed: rng::derive(cfg.seed, 20),
        },
        &cfg.seg_train(SegMode::Binary, cfg.seg_epochs_binary, 21),
    )
}

/// Multiclass training, initialised from a binary model or from scratch.
pub fn train_segmenter_stage(
    cfg: &PipelineConfig,
    train: &[&Case],
    binary: Option<&SegModel>,
) -> Result<(SegModel, Vec<f64>)> {
    let init = match (binary, cfg.scratch) {
        (Some(b), false) => SegInit::From(segmenter::transfer_weights(b, 6, rng::derive(cfg.seed, 22))?),
        (_, true) => SegInit::Scratch {
            seed: rng::derive(cfg.seed, 23),
        },
        (None, false) => {
            return Err(Error::Config(
                "multiclass training needs a pretrained binary model or the scratch option".into(),
            ))
        }
    };
    segmenter::train_segmenter(
        &crops(cfg, train)?,
        &cfg.unet(),
        &cfg.augment(),
        SegMode::Multiclass,
        init,
        &cfg.seg_train(SegMode::Multiclass, cfg.seg_epochs_multiclass, 24),
    )
}

/// Full-resolution, post-processed labels of one volume inside a box.
pub fn segment_volume(model: &SegModel, image: &Volume, b: &BoundingBox, close_radius: usize) -> Result<LabelVolume> {
    let b = b.clamp_to(image.dims()).ok_or(Error::EmptyBox)?;
    let raw = segmenter::segment_crop(model, &image.crop(&b)?)?;
    let full = segmenter::reinstate(&raw, &b, image.dims())?;
    Ok(postprocess::largest_components(&postprocess::coronal_close(
        &full,
        close_radius,
    )))
}

pub fn segment_cases(
    cfg: &PipelineConfig,
    model: &SegModel,
    cases: &[(&Case, BoundingBox)],
) -> Result<Vec<LabelVolume>> {
    par_map(cases, thread_count(), |(c, b)| {
        segment_volume(model, &c.image, b, cfg.close_radius)
    })
}

pub fn boxes_csv(rows: &[(String, BoundingBox)]) -> String {
    let mut s = String::from("case,x_min,x_max,y_min,y_max,z_min,z_max\n");
    for (id, b) in rows {
        let p = b.planes();
        let _ = writeln!(s, "{id},{},{},{},{},{},{}", p[0], p[1], p[2], p[3], p[4], p[5]);
    }
    s
}

pub fn parse_boxes_csv(text: &str) -> Result<BTreeMap<String, BoundingBox>> {
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(Error::Header(format!("boxes row needs 7 fields: `{line}`")));
        }
        let mut p = [0i64; 6];
        for (i, v) in f[1..].iter().enumerate() {
            p[i] = v.parse().map_err(|_| Error::Header(format!("bad plane `{v}`")))?;
        }
        out.insert(f[0].to_string(), BoundingBox::from_planes(p));
    }
    Ok(out)
}

/// Overlay colours of L1..L5.
pub const PALETTE: [[u8; 3]; 5] = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0], [255, 0, 255]];

/// Binary PPM of a slice with labels blended over the windowed intensity.
/// The superior end is drawn at the top.
pub fn overlay_ppm(image: &Volume, labels: &LabelVolume, axis: Axis, index: usize, window: Window) -> Result<Vec<u8>> {
    let img = image.extract_slice(axis, index)?;
    let lab = labels.extract_slice(axis, index)?;
    let flip = axis != Axis::Axial;
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    for r in 0..img.height {
        let row = if flip { img.height - 1 - r } else { r };
        for c in 0..img.width {
            let g = (window.apply(img.get(c, row)) * 255.0).round();
            let px = match lab.get(c, row) {
                0 => [g as u8; 3],
                l => {
                    let col = PALETTE[l as usize - 1];
                    std::array::from_fn(|i| (0.5 * g + 0.5 * col[i] as f64).round() as u8)
                }
            };
            out.extend_from_slice(&px);
        }
    }
    Ok(out)
}

/// Writes mid-sagittal, mid-coronal and mid-axial overlays for one case.
pub fn write_overlays(
    dir: &Path,
    id: &str,
    image: &Volume,
    labels: &LabelVolume,
    window: Window,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for axis in Axis::ALL {
        let idx = image.dims()[axis.fixed()] / 2;
        let path = dir.join(format!("{id}_{}.ppm", axis.name()));
        fs::write(&path, overlay_ppm(image, labels, axis, idx, window)?).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub mean_sensitivity: Option<f64>,
    pub mean_lumbar_dice: f64,
    pub mean_label_dice: f64,
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.mean_sensitivity {
            Some(s) => write!(f, "mean sensitivity {s:.4}, ")?,
            None => write!(f, "mean sensitivity n/a (ground-truth boxes), ")?,
        }
        write!(
            f,
            "mean lumbar Dice {:.2}, mean per-label Dice {:.2}",
            self.mean_lumbar_dice, self.mean_label_dice
        )
    }
}

/// Writes the reproducibility record of a run.
pub fn write_run_record(cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut s = format!("# lumbarseg {}\n", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(
        s,
        "# derived seeds: localizer {}, features {}, segmenter {}",
        rng::derive(cfg.seed, 10),
        rng::derive(cfg.seed, 11),
        rng::derive(cfg.seed, 20)
    );
    s.push_str(&cfg.to_text());
    write(&cfg.out_dir.join("run_record.txt"), &s)
}

/// Generates the phantom suite when no manifest is configured.
pub fn ensure_manifest(cfg: &PipelineConfig) -> Result<PathBuf> {
    if let Some(m) = &cfg.manifest {
        return Ok(m.clone());
    }
    let suite = SuiteConfig::new(cfg.phantom_train, cfg.phantom_test, cfg.seed, cfg.phantom_base());
    phantom::gen_suite(&suite, cfg.out_dir.join("phantoms"))
}

/// Evaluates predictions of the test cases and writes CSVs and overlays.
pub fn evaluate(cfg: &PipelineConfig, test: &[&Case], preds: &[LabelVolume]) -> Result<DiceReport> {
    let ids: Vec<String> = test.iter().map(|c| c.id.clone()).collect();
    let gts: Vec<LabelVolume> = test.iter().map(|c| c.labels.clone()).collect();
    let report = metrics::report(preds, &gts, &ids)?;
    write(&cfg.out_dir.join("dice.csv"), &report.csv_long())?;
    write(&cfg.out_dir.join("dice_table.csv"), &report.csv_table())?;
    let dir = cfg.out_dir.join("overlays");
    for (c, p) in test.iter().zip(preds) {
        write_overlays(&dir, &c.id, &c.image, p, cfg.window())?;
    }
    Ok(report)
}

/// Runs every stage and writes all artifacts under `cfg.out_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Summary> {
    cfg.validate()?;
    write_run_record(cfg)?;
    let out = &cfg.out_dir;
    let manifest_path = ensure_manifest(cfg).map_err(|e| e.in_stage("phantom"))?;
    let manifest = Manifest::load(&manifest_path).map_err(|e| e.in_stage("load"))?;
    let cases = load_cases(&manifest).map_err(|e| e.in_stage("load"))?;
    let train: Vec<&Case> = cases.iter().filter(|c| c.split == Split::Train).collect();
    let test: Vec<&Case> = cases.iter().filter(|c| c.split == Split::Test).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("manifest needs train and test cases".into()).in_stage("load"));
    }

    let (boxes, mean_sensitivity) = if cfg.use_gt_boxes {
        let b = test
            .iter()
            .map(|c| c.gt_box(cfg.gt_tolerance))
            .collect::<Result<Vec<_>>>();
        (b.map_err(|e| e.in_stage("localize"))?, None)
    } else {
        let stage = |e: Error| e.in_stage("localize");
        let (model, _) = train_localizer_stage(cfg, &train).map_err(stage)?;
        model.save(out.join("localizer.ckpt")).map_err(stage)?;
        let boxes = predict_boxes(cfg, &model, &test).map_err(stage)?;
        let rows: Vec<(String, BoundingBox)> = test.iter().map(|c| c.id.clone()).zip(boxes.iter().copied()).collect();
        write(&out.join("boxes.csv"), &boxes_csv(&rows)).map_err(stage)?;
        let sens = test
            .iter()
            .zip(&boxes)
            .map(|(c, b)| Ok((c.id.clone(), localizer::sensitivity(&c.labels, b)?)))
            .collect::<Result<Vec<_>>>()
            .map_err(stage)?;
        write(&out.join("sensitivity.csv"), &metrics::sensitivity_csv(&sens)).map_err(stage)?;
        let mean = sens.iter().map(|s| s.1).sum::<f64>() / sens.len() as f64;
        (boxes, Some(mean))
    };

    let stage = |e: Error| e.in_stage("segment");
    let binary = if cfg.scratch {
        None
    } else {
        let (m, trace) = pretrain_segmenter_stage(cfg, &train).map_err(stage)?;
        m.save(out.join("seg_binary.ckpt")).map_err(stage)?;
        write(&out.join("seg_binary_loss.csv"), &segmenter::loss_trace_csv(&trace)).map_err(stage)?;
        Some(m)
    };
    let (model, trace) = train_segmenter_stage(cfg, &train, binary.as_ref()).map_err(stage)?;
    model.save(out.join("seg_multiclass.ckpt")).map_err(stage)?;
    write(&out.join("seg_multiclass_loss.csv"), &segmenter::loss_trace_csv(&trace)).map_err(stage)?;
    let pairs: Vec<(&Case, BoundingBox)> = test.iter().copied().zip(boxes).collect();
    let preds = segment_cases(cfg, &model, &pairs).map_err(stage)?;
    let pred_dir = out.join("predictions");
    fs::create_dir_all(&pred_dir).map_err(|e| stage(Error::io(&pred_dir, e)))?;
    for (c, p) in test.iter().zip(&preds) {
        volume::save_labels(p, pred_dir.join(format!("{}_pred.mhd", c.id))).map_err(stage)?;
    }

    let report = evaluate(cfg, &test, &preds).map_err(|e| e.in_stage("eval"))?;
    Ok(Summary {
        mean_sensitivity,
        mean_lumbar_dice: report.mean_lumbar_dice(),
        mean_label_dice: report.mean_label_dice(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let mut c = PipelineConfig::toy();
        c.seed = 42;
        c.seg_deltas = vec![3, 6];
        c.manifest = Some(PathBuf::from("data/manifest.txt"));
        let mut back = PipelineConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_errors_and_comments() {
        let mut c = PipelineConfig::default();
        c.apply_text("# comment\nseed = 5 # trailing\n\nloc_epochs=7\n")
            .unwrap();
        assert_eq!((c.seed, c.loc_epochs), (5, 7));
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("seed = x").is_err());
        assert!(c.apply_text("no equals sign").is_err());
        // profile switch keeps identity keys, later keys refine the profile
        c.apply_text("seg_levels = 2\ntoy = true").unwrap();
        assert_eq!((c.seed, c.seg_levels, c.seg_base_channels), (5, 2, 8));
    }

    #[test]
    fn boxes_csv_round_trip() {
        let rows = vec![
            ("a".to_string(), BoundingBox::new((1, 2), (3, 4), (5, 6))),
            ("b".to_string(), BoundingBox::new((0, 9), (0, 9), (0, 9))),
        ];
        let back = parse_boxes_csv(&boxes_csv(&rows)).unwrap();
        assert_eq!(back["a"], rows[0].1);
        assert_eq!(back["b"], rows[1].1);
    }

    #[test]
    fn overlay_dimensions_and_palette() {
        let img = Volume::filled([4, 6, 8], [1.0; 3], 1000.0).unwrap();
        let lab = LabelVolume::from_fn([4, 6, 8], [1.0; 3], |i, _, _| (i % 2) as u8).unwrap();
        let ppm = overlay_ppm(&img, &lab, Axis::Coronal, 2, Window::default()).unwrap();
        let header = b"P6\n4 8\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        assert_eq!(ppm.len(), header.len() + 4 * 8 * 3);
        assert_eq!(&ppm[header.len()..header.len() + 6], &[255, 255, 255, 255, 128, 128]);
    }

    #[test]
    fn missing_init_is_an_error() {
        let cfg = PipelineConfig::toy();
        assert!(matches!(train_segmenter_stage(&cfg, &[], None), Err(Error::Config(_))));
    }
}
