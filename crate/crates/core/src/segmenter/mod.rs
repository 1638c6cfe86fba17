//! Stage two: sagittal-slice segmentation with a U-Net style network.

mod augment;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index::sample, SliceRandom};

pub use augment::{apply_geo, geo_augment, roi_augment, roi_crop, AugmentConfig, GeoDraw};

use crate::error::{Error, Result};
use crate::nn::{
    self, accumulate, init_layer, meta_value, scale_grads, zero_grads, LayerSpec, ModelParams, OptimKind, OptimState,
    Tensor,
};
use crate::rng;
use crate::volume::{Axis, BoundingBox, Image2, LabelVolume, Volume, Window};

pub const MAX_CHANNELS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    /// Number of pooling stages.
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            base_channels: 32,
            in_channels: 1,
            out_classes: 6,
        }
    }
}

impl UNetConfig {
    pub fn toy() -> Self {
        Self {
            levels: 3,
            base_channels: 8,
            ..Self::default()
        }
    }

    pub fn with_classes(self, out_classes: usize) -> Self {
        Self { out_classes, ..self }
    }

    /// Channels of encoder level `l`; `l == levels` is the bottleneck.
    pub fn channels(&self, l: usize) -> usize {
        (self.base_channels << l.min(20)).min(MAX_CHANNELS)
    }

    pub fn pad_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 10 {
            return Err(Error::Config(format!("levels must lie in 1..=10, got {}", self.levels)));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.out_classes < 2 {
            return Err(Error::Config("at least two output classes are needed".into()));
        }
        Ok(())
    }

    pub fn specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let conv = |in_ch, out_ch| LayerSpec::Conv2d {
            in_ch,
            out_ch,
            k: 3,
            pad: 1,
        };
        let mut s = Vec::new();
        let mut skips = Vec::new();
        let mut prev = self.in_channels;
        for l in 0..self.levels {
            let c = self.channels(l);
            s.extend([conv(prev, c), LayerSpec::Relu, conv(c, c), LayerSpec::Relu]);
            skips.push(s.len() - 1);
            s.push(LayerSpec::MaxPool2);
            prev = c;
        }
        let b = self.channels(self.levels);
        s.extend([conv(prev, b), LayerSpec::Relu, conv(b, b), LayerSpec::Relu]);
        prev = b;
        for l in (0..self.levels).rev() {
            let c = self.channels(l);
            s.push(LayerSpec::UpConv2 { in_ch: prev, out_ch: c });
            s.push(LayerSpec::Concat { skip: skips[l] });
            s.extend([conv(2 * c, c), LayerSpec::Relu, conv(c, c), LayerSpec::Relu]);
            prev = c;
        }
        s.push(LayerSpec::Conv2d {
            in_ch: prev,
            out_ch: self.out_classes,
            k: 1,
            pad: 0,
        });
        Ok(s)
    }
}

/// Receptive field (pixels) of the bottleneck output.
pub fn receptive_field(cfg: &UNetConfig) -> usize {
    let (mut rf, mut jump) = (1usize, 1usize);
    for _ in 0..cfg.levels {
        rf += 2 * 2 * jump; // two 3x3 convs
        rf += jump; // 2x2 pool
        jump *= 2;
    }
    rf + 2 * 2 * jump
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Scratch,
    PretrainedBinary,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Scratch => "scratch",
            Provenance::PretrainedBinary => "pretrained-binary",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: UNetConfig,
    pub params: ModelParams,
    pub provenance: Provenance,
    pub window: Window,
}

pub fn build_unet(cfg: &UNetConfig, seed: u64) -> Result<SegModel> {
    Ok(SegModel {
        config: *cfg,
        params: ModelParams::build(cfg.specs()?, seed)?,
        provenance: Provenance::Scratch,
        window: Window::default(),
    })
}

/// Copies a binary model into a wider classifier; only the final 1x1 layer
/// is re-initialised.
pub fn transfer_weights(binary: &SegModel, target_classes: usize, seed: u64) -> Result<SegModel> {
    if binary.config.out_classes != 2 {
        return Err(Error::Config(format!(
            "transfer needs a binary source model, got {} classes",
            binary.config.out_classes
        )));
    }
    let config = binary.config.with_classes(target_classes);
    let specs = config.specs()?;
    if specs[..specs.len() - 1] != binary.params.specs[..binary.params.specs.len() - 1] {
        return Err(Error::Config(
            "source layers do not match the target configuration".into(),
        ));
    }
    let mut params = binary.params.clone();
    let last = specs.len() - 1;
    params.specs = specs;
    params.params[last] = init_layer(&params.specs[last], seed);
    params.seed = seed;
    params.epochs = 0;
    Ok(SegModel {
        config,
        params,
        provenance: Provenance::PretrainedBinary,
        window: binary.window,
    })
}

impl SegModel {
    fn to_params(&self) -> ModelParams {
        let mut p = self.params.clone();
        let m = &mut p.meta;
        m.insert("kind".into(), "segmenter".into());
        m.insert("levels".into(), self.config.levels.to_string());
        m.insert("base_channels".into(), self.config.base_channels.to_string());
        m.insert("in_channels".into(), self.config.in_channels.to_string());
        m.insert("out_classes".into(), self.config.out_classes.to_string());
        m.insert("provenance".into(), self.provenance.as_str().into());
        m.insert("window_lo".into(), self.window.lo.to_string());
        m.insert("window_hi".into(), self.window.hi.to_string());
        p
    }

    fn from_params(p: ModelParams) -> Result<Self> {
        if p.meta.get("kind").map(String::as_str) != Some("segmenter") {
            return Err(Error::CorruptCheckpoint("not a segmenter checkpoint".into()));
        }
        let config = UNetConfig {
            levels: meta_value(&p, "levels")?,
            base_channels: meta_value(&p, "base_channels")?,
            in_channels: meta_value(&p, "in_channels")?,
            out_classes: meta_value(&p, "out_classes")?,
        };
        if p.specs != config.specs()? {
            return Err(Error::Shape(
                "segmenter layers do not match the stored configuration".into(),
            ));
        }
        let provenance = match p.meta.get("provenance").map(String::as_str) {
            Some("scratch") => Provenance::Scratch,
            Some("pretrained-binary") => Provenance::PretrainedBinary,
            _ => return Err(Error::CorruptCheckpoint("unknown provenance".into())),
        };
        Ok(Self {
            config,
            provenance,
            window: Window {
                lo: meta_value(&p, "window_lo")?,
                hi: meta_value(&p, "window_hi")?,
            },
            params: p,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::save_checkpoint(&self.to_params(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(nn::load_checkpoint(path)?)
    }

    /// Per-pixel class of a normalised slice of any size.
    pub fn segment_slice(&self, img: &Image2<f64>) -> Result<Image2<u8>> {
        let m = self.config.pad_multiple();
        let padded = mirror_pad(img, m);
        let input = Tensor::new(vec![1, padded.height, padded.width], padded.data)?;
        let logits = self.params.infer(&input)?;
        let (c, ph, pw) = logits.chw()?;
        let hw = ph * pw;
        let x = logits.data();
        let mut out = Image2::filled(img.width, img.height, 0u8);
        for r in 0..img.height {
            for col in 0..img.width {
                let p = r * pw + col;
                let mut best = 0;
                for k in 1..c {
                    if x[k * hw + p] > x[best * hw + p] {
                        best = k;
                    }
                }
                out.set(col, r, best as u8);
            }
        }
        Ok(out)
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Extends an image to the next multiple of `m` on the bottom/right edges by
/// mirroring.
pub fn mirror_pad<T: Copy>(img: &Image2<T>, m: usize) -> Image2<T> {
    let up = |v: usize| v.div_ceil(m) * m;
    let (w, h) = (up(img.width), up(img.height));
    let mut data = Vec::with_capacity(w * h);
    for r in 0..h {
        let sr = reflect(r, img.height);
        for c in 0..w {
            data.push(img.get(reflect(c, img.width), sr));
        }
    }
    Image2 {
        width: w,
        height: h,
        data,
    }
}

/// Labels every sagittal slice of a raw (unnormalised) crop.
pub fn segment_crop(model: &SegModel, crop: &Volume) -> Result<LabelVolume> {
    let norm = crop.normalized(model.window);
    let mut out = LabelVolume::filled(crop.dims(), crop.spacing(), 0)?;
    for x in 0..crop.dims()[0] {
        let s = norm.extract_slice(Axis::Sagittal, x)?;
        let mut lab = model.segment_slice(&s)?;
        // a binary model maps foreground to label 1, already a valid label
        lab.data.iter_mut().for_each(|v| *v = (*v).min(5));
        out.insert_slice(Axis::Sagittal, x, &lab)?;
    }
    Ok(out)
}

/// Places a label crop back into a full-size, otherwise background volume.
pub fn reinstate(label_crop: &LabelVolume, b: &BoundingBox, full_dims: [usize; 3]) -> Result<LabelVolume> {
    let b = b.clamp_to(full_dims).ok_or(Error::EmptyBox)?;
    if b.extent() != label_crop.dims() {
        return Err(Error::Shape(format!(
            "crop dims {:?} do not match box extent {:?}",
            label_crop.dims(),
            b.extent()
        )));
    }
    let [x0, y0, z0] = b.min();
    let [ex, ey, ez] = b.extent();
    LabelVolume::from_fn(full_dims, label_crop.spacing(), |i, j, k| {
        if i >= x0 && j >= y0 && k >= z0 && i < x0 + ex && j < y0 + ey && k < z0 + ez {
            label_crop.get(i - x0, j - y0, k - z0)
        } else {
            0
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegMode {
    /// Labels collapsed to background / any vertebra.
    Binary,
    Multiclass,
}

#[derive(Clone, Debug)]
pub enum SegInit {
    Scratch { seed: u64 },
    From(SegModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// The learning rate follows a cosine from `lr` down to
    /// `lr * final_lr_ratio` over the epochs; 1 keeps it constant.
    pub final_lr_ratio: f64,
    /// Slices per optimiser step.
    pub batch: usize,
    /// Sagittal slices drawn per crop and epoch; `None` uses every slice.
    pub slices_per_crop: Option<usize>,
    pub window: Window,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            lr: 1e-4,
            final_lr_ratio: 1.0,
            batch: 8,
            slices_per_crop: None,
            window: Window::default(),
            seed: 0,
        }
    }
}

/// Cross-entropy over the top-left `h x w` region of padded logits; the
/// gradient is zero on the padding.
fn cropped_ce(logits: &Tensor, labels: &Image2<u8>, classes: usize) -> Result<(f64, Tensor)> {
    let (c, ph, pw) = logits.chw()?;
    let (h, w) = (labels.height, labels.width);
    let x = logits.data();
    let mut sub = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for r in 0..h {
            let start = k * ph * pw + r * pw;
            sub.extend_from_slice(&x[start..start + w]);
        }
    }
    let (loss, g) = nn::loss_softmax_ce(&Tensor::new(vec![c, h, w], sub)?, &labels.data, classes)?;
    let mut full = Tensor::zeros(logits.shape());
    let fd = full.data_mut();
    for k in 0..c {
        for r in 0..h {
            let dst = k * ph * pw + r * pw;
            let src = k * h * w + r * w;
            fd[dst..dst + w].copy_from_slice(&g.data()[src..src + w]);
        }
    }
    Ok((loss, full))
}

/// Trains on sagittal slices of (raw crop, label crop) pairs. Returns the
/// model and the mean per-slice loss of every epoch.
pub fn train_segmenter(
    crops: &[(Volume, LabelVolume)],
    cfg: &UNetConfig,
    aug: &AugmentConfig,
    mode: SegMode,
    init: SegInit,
    train: &SegTrainConfig,
) -> Result<(SegModel, Vec<f64>)> {
    if crops.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if train.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(train.final_lr_ratio > 0.0 && train.final_lr_ratio <= 1.0) {
        return Err(Error::Config("final_lr_ratio must lie in (0, 1]".into()));
    }
    aug.validate()?;
    let classes = match mode {
        SegMode::Binary => 2,
        SegMode::Multiclass => cfg.out_classes,
    };
    let mut model = match init {
        SegInit::Scratch { seed } => build_unet(&cfg.with_classes(classes), seed)?,
        SegInit::From(m) => {
            if m.config != cfg.with_classes(classes) {
                return Err(Error::Config("initial model does not match the configuration".into()));
            }
            m
        }
    };
    model.window = train.window;

    let slices: Vec<Vec<(Image2<f64>, Image2<u8>)>> = crops
        .iter()
        .map(|(v, l)| {
            if v.dims() != l.dims() {
                return Err(Error::Shape("crop and label dims differ".into()));
            }
            let norm = v.normalized(train.window);
            (0..v.dims()[0])
                .map(|x| {
                    let img = norm.extract_slice(Axis::Sagittal, x)?;
                    let mut lab = l.extract_slice(Axis::Sagittal, x)?;
                    if mode == SegMode::Binary {
                        lab.data.iter_mut().for_each(|v| *v = u8::from(*v != 0));
                    }
                    Ok((img, lab))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if aug.roi {
        if let Some((i, _)) = slices.iter().flatten().find(|(i, _)| i.height <= 2 * aug.max_delta()) {
            return Err(Error::Config(format!(
                "crop height {} too small for ROI deltas up to {}",
                i.height,
                aug.max_delta()
            )));
        }
    }
    let pixel_mm = crops[0].0.spacing()[1];

    let mut r = rng::seeded(rng::derive(train.seed, 0x5e6));
    let mut opt = OptimState::new(OptimKind::adam(train.lr), &model.params);
    let mut trace = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        opt.kind
            .set_lr(cosine_lr(train.lr, train.final_lr_ratio, epoch, train.epochs));
        let mut order: Vec<(usize, usize)> = Vec::new();
        for (ci, s) in slices.iter().enumerate() {
            match train.slices_per_crop {
                Some(n) if n < s.len() => order.extend(sample(&mut r, s.len(), n).into_iter().map(|x| (ci, x))),
                _ => order.extend((0..s.len()).map(|x| (ci, x))),
            }
        }
        order.shuffle(&mut r);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch) {
            let mut acc = zero_grads(&model.params);
            for &(ci, x) in chunk {
                let (img, lab) = &slices[ci][x];
                let (mut img, mut lab) = (img.clone(), lab.clone());
                if aug.roi {
                    (img, lab) = roi_augment(&img, &lab, aug, &mut r)?;
                }
                if aug.geometric {
                    (img, lab) = geo_augment(&img, &lab, pixel_mm, aug, &mut r);
                }
                let padded = mirror_pad(&img, model.config.pad_multiple());
                let input = Tensor::new(vec![1, padded.height, padded.width], padded.data)?;
                let (out, cache) = model.params.forward(&input)?;
                let (loss, grad) = cropped_ce(&out, &lab, classes)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                let (g, _) = model.params.backward(&cache, &grad)?;
                accumulate(&mut acc, &g);
                total += loss;
            }
            scale_grads(&mut acc, 1.0 / chunk.len() as f64);
            opt.step(&mut model.params, &acc)?;
        }
        let mean = total / order.len().max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        trace.push(mean);
        model.params.epochs += 1;
    }
    Ok((model, trace))
}

/// Cosine schedule from `lr` at epoch 0 to `lr * ratio` at the last epoch.
pub fn cosine_lr(lr: f64, ratio: f64, epoch: usize, epochs: usize) -> f64 {
    let t = if epochs > 1 {
        epoch as f64 / (epochs - 1) as f64
    } else {
        0.0
    };
    let end = lr * ratio;
    end + 0.5 * (lr - end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// `epoch,loss` rows.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in trace.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.8}", e + 1);
    }
    s
}
