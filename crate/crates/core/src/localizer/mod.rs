//! Stage one: lumbar bounding-box localisation.
//!
//! Edge voxels of a scan are described by cuboid-mean context features; an
//! MLP regresses each voxel's signed distances to the six planes of the
//! lumbar box, every voxel votes for a box, and each plane is settled by the
//! mode of a kernel density estimate over its votes.

mod canny;
mod features;
mod kde;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;

pub use canny::{canny_edges, smooth, CannyParams};
pub use features::{extract_features, extract_features_from, invert_targets, make_targets, FeatureSpec, Probe};
pub use kde::{aggregate_planes, botev_bandwidth, kde_mode, plane_mode, round_plane, silverman, MIN_SAMPLES};

use crate::error::{Error, Result};
use crate::nn::{self, meta_value, LayerSpec, ModelParams, OptimKind, OptimState, Tensor};
use crate::rng::{self, Rng};
use crate::volume::{BoundingBox, IntegralVolume, LabelVolume, Volume, Window};

pub const HIDDEN: [usize; 4] = [350, 250, 150, 50];
pub const DEFAULT_MAX_VOXELS: usize = 10_000;
pub const DEFAULT_TOLERANCE: i64 = 15;

/// Layer list of the offset regressor: ReLU hidden layers, linear output.
pub fn mlp_specs(input: usize, hidden: &[usize], output: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut prev = input;
    for &h in hidden {
        specs.push(LayerSpec::Dense { input: prev, output: h });
        specs.push(LayerSpec::Relu);
        prev = h;
    }
    specs.push(LayerSpec::Dense { input: prev, output });
    specs
}

/// Mini-batch SGD settings shared by every regressor fit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optim: OptimKind,
    pub seed: u64,
}

/// Fits a regressor with mean squared error. `epoch_data` supplies the
/// (inputs, targets) rows of each epoch; rows are shuffled and split into
/// mini-batches. Returns the mean batch loss of every epoch.
pub fn fit_regressor(
    model: &mut ModelParams,
    cfg: &SgdConfig,
    mut epoch_data: impl FnMut(usize, &mut Rng) -> Result<(Tensor, Tensor)>,
) -> Result<Vec<f64>> {
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut r = rng::seeded(cfg.seed);
    let mut opt = OptimState::new(cfg.optim, model);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (x, y) = epoch_data(epoch, &mut r)?;
        let (rows, width) = (x.shape()[0], x.shape()[1]);
        let outw = y.shape()[1];
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut r);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let mut bx = Vec::with_capacity(chunk.len() * width);
            let mut by = Vec::with_capacity(chunk.len() * outw);
            for &i in chunk {
                bx.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
                by.extend_from_slice(&y.data()[i * outw..(i + 1) * outw]);
            }
            let bx = Tensor::new(vec![chunk.len(), width], bx)?;
            let by = Tensor::new(vec![chunk.len(), outw], by)?;
            let (out, cache) = model.forward(&bx)?;
            let (loss, grad) = nn::loss_mse(&out, &by)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let (grads, _) = model.backward(&cache, &grad)?;
            opt.step(model, &grads)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches.max(1) as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        trace.push(mean);
        model.epochs += 1;
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizerHyper {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    /// Edge voxels drawn from each volume per epoch.
    pub samples_per_volume: usize,
    /// Targets are divided by this many voxels before the loss.
    pub target_scale: f64,
    /// Extra randomly translated copies of every training volume.
    pub augment_copies: usize,
    /// Largest translation of an augmented copy, voxels per axis.
    pub max_shift: i64,
    pub hidden: Vec<usize>,
    pub canny: CannyParams,
    pub window: Window,
    pub seed: u64,
}

impl Default for LocalizerHyper {
    fn default() -> Self {
        Self {
            epochs: 1000,
            lr: 1e-3,
            momentum: 0.9,
            batch: 64,
            samples_per_volume: 2000,
            target_scale: 50.0,
            augment_copies: 1,
            max_shift: 10,
            hidden: HIDDEN.to_vec(),
            canny: CannyParams::default(),
            window: Window::default(),
            seed: 0,
        }
    }
}

/// Trained regressor plus everything inference needs.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalizerModel {
    pub params: ModelParams,
    pub spec: FeatureSpec,
    pub window: Window,
    pub target_scale: f64,
    pub canny: CannyParams,
}

impl LocalizerModel {
    pub fn new(spec: FeatureSpec, hidden: &[usize], seed: u64) -> Result<Self> {
        Ok(Self {
            params: ModelParams::build(mlp_specs(spec.n(), hidden, 6), seed)?,
            spec,
            window: Window::default(),
            target_scale: 1.0,
            canny: CannyParams::default(),
        })
    }

    /// Offsets (in voxels) predicted for a `[rows, n]` feature matrix.
    pub fn predict_offsets(&self, features: &Tensor) -> Result<Vec<[f64; 6]>> {
        let out = self.params.infer(features)?;
        Ok(out
            .data()
            .chunks(6)
            .map(|c| std::array::from_fn(|i| c[i] * self.target_scale))
            .collect())
    }

    fn to_params(&self) -> ModelParams {
        let mut p = self.params.clone();
        let m = &mut p.meta;
        m.insert("kind".into(), "localizer".into());
        m.insert("feature_seed".into(), self.spec.seed.to_string());
        m.insert("feature_offset_range_mm".into(), self.spec.offset_range_mm.to_string());
        m.insert("feature_size_min_mm".into(), self.spec.size_range_mm.0.to_string());
        m.insert("feature_size_max_mm".into(), self.spec.size_range_mm.1.to_string());
        m.insert("feature_probes".into(), self.spec.encode_probes());
        m.insert("window_lo".into(), self.window.lo.to_string());
        m.insert("window_hi".into(), self.window.hi.to_string());
        m.insert("target_scale".into(), self.target_scale.to_string());
        m.insert("canny_sigma_mm".into(), self.canny.sigma_mm.to_string());
        m.insert("canny_low".into(), self.canny.low.to_string());
        m.insert("canny_high".into(), self.canny.high.to_string());
        p
    }

    fn from_params(p: ModelParams) -> Result<Self> {
        if p.meta.get("kind").map(String::as_str) != Some("localizer") {
            return Err(Error::CorruptCheckpoint("not a localizer checkpoint".into()));
        }
        let probes = FeatureSpec::decode_probes(p.meta.get("feature_probes").map_or("", String::as_str))?;
        let spec = FeatureSpec {
            probes,
            seed: meta_value(&p, "feature_seed")?,
            offset_range_mm: meta_value(&p, "feature_offset_range_mm")?,
            size_range_mm: (
                meta_value(&p, "feature_size_min_mm")?,
                meta_value(&p, "feature_size_max_mm")?,
            ),
        };
        let expected = mlp_specs(spec.n(), &hidden_of(&p.specs), 6);
        if p.specs != expected {
            return Err(Error::Shape("localizer layers do not match its feature count".into()));
        }
        Ok(Self {
            window: Window {
                lo: meta_value(&p, "window_lo")?,
                hi: meta_value(&p, "window_hi")?,
            },
            target_scale: meta_value(&p, "target_scale")?,
            canny: CannyParams {
                sigma_mm: meta_value(&p, "canny_sigma_mm")?,
                low: meta_value(&p, "canny_low")?,
                high: meta_value(&p, "canny_high")?,
            },
            spec,
            params: p,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::save_checkpoint(&self.to_params(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(nn::load_checkpoint(path)?)
    }
}

fn hidden_of(specs: &[LayerSpec]) -> Vec<usize> {
    let dense: Vec<usize> = specs
        .iter()
        .filter_map(|s| match *s {
            LayerSpec::Dense { output, .. } => Some(output),
            _ => None,
        })
        .collect();
    dense[..dense.len().saturating_sub(1)].to_vec()
}

/// Translates volume content by whole voxels, filling with `fill`.
pub fn shift_volume(v: &Volume, t: [i64; 3], fill: f64) -> Volume {
    let d = v.dims();
    Volume::from_fn(d, v.spacing(), |i, j, k| {
        let s = [i as i64 - t[0], j as i64 - t[1], k as i64 - t[2]];
        if (0..3).all(|a| s[a] >= 0 && s[a] < d[a] as i64) {
            v.get(s[0] as usize, s[1] as usize, s[2] as usize)
        } else {
            fill
        }
    })
    .expect("shifted copy of a valid volume")
}

struct Prepared {
    iv: IntegralVolume,
    spacing: [f64; 3],
    edges: Vec<[usize; 3]>,
    gt: BoundingBox,
}

fn prepare(v: &Volume, gt: BoundingBox, hyper: &LocalizerHyper) -> Result<Prepared> {
    let norm = v.normalized(hyper.window);
    Ok(Prepared {
        edges: canny_edges(&norm, hyper.canny)?,
        iv: IntegralVolume::new(&norm),
        spacing: v.spacing(),
        gt,
    })
}

/// Trains the offset regressor on (volume, ground-truth box) pairs. Returns
/// the model and the per-epoch loss on scaled targets.
pub fn train_localizer(
    dataset: &[(Volume, BoundingBox)],
    spec: &FeatureSpec,
    hyper: &LocalizerHyper,
) -> Result<(LocalizerModel, Vec<f64>)> {
    if dataset.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: dataset.len(),
        });
    }
    if !(hyper.target_scale > 0.0) || hyper.samples_per_volume == 0 {
        return Err(Error::Config(
            "target_scale and samples_per_volume must be positive".into(),
        ));
    }
    let mut aug_rng = rng::seeded(rng::derive(hyper.seed, 1));
    let mut prepared = Vec::new();
    for (v, gt) in dataset {
        prepared.push(prepare(v, *gt, hyper)?);
        for _ in 0..hyper.augment_copies {
            use rand::Rng as _;
            let t: [i64; 3] = std::array::from_fn(|_| aug_rng.gen_range(-hyper.max_shift..=hyper.max_shift));
            let shifted = shift_volume(v, t, hyper.window.lo);
            let moved = gt.translate(t);
            // keep the copy only if the box survives inside the grid
            if moved.clamp_to(v.dims()) == Some(moved) {
                prepared.push(prepare(&shifted, moved, hyper)?);
            }
        }
    }

    let mut model = LocalizerModel::new(spec.clone(), &hyper.hidden, rng::derive(hyper.seed, 2))?;
    model.window = hyper.window;
    model.target_scale = hyper.target_scale;
    model.canny = hyper.canny;
    let cfg = SgdConfig {
        epochs: hyper.epochs,
        batch: hyper.batch,
        optim: OptimKind::sgd(hyper.lr, hyper.momentum),
        seed: rng::derive(hyper.seed, 3),
    };
    let n = spec.n();
    let trace = fit_regressor(&mut model.params, &cfg, |_, r| {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut rows = 0;
        for p in &prepared {
            let take = hyper.samples_per_volume.min(p.edges.len());
            let voxels: Vec<[usize; 3]> = sample(r, p.edges.len(), take).into_iter().map(|i| p.edges[i]).collect();
            x.extend(extract_features(&p.iv, p.spacing, &voxels, spec).into_data());
            for v in &voxels {
                y.extend(make_targets(*v, &p.gt).iter().map(|t| t / hyper.target_scale));
            }
            rows += take;
        }
        Ok((Tensor::new(vec![rows, n], x)?, Tensor::new(vec![rows, 6], y)?))
    })?;
    model.params.seed = hyper.seed;
    Ok((model, trace))
}

/// Per-plane vote lists; entry `r` of every list comes from the same voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct VoteSet {
    pub planes: [Vec<f64>; 6],
    pub dims: [usize; 3],
}

impl VoteSet {
    pub fn len(&self) -> usize {
        self.planes[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds votes from voxels and predicted offsets.
    pub fn from_offsets(voxels: &[[usize; 3]], offsets: &[[f64; 6]], dims: [usize; 3]) -> Self {
        let mut planes: [Vec<f64>; 6] = Default::default();
        for (v, o) in voxels.iter().zip(offsets) {
            for (c, p) in invert_targets(o, *v).iter().enumerate() {
                planes[c].push(*p);
            }
        }
        Self { planes, dims }
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        let mut out = self.clone();
        for (c, p) in out.planes.iter_mut().enumerate() {
            p.iter_mut().for_each(|v| *v += t[c / 2]);
        }
        out
    }

    /// `plane,value` rows for debugging.
    pub fn to_csv(&self) -> String {
        const NAMES: [&str; 6] = ["x_min", "x_max", "y_min", "y_max", "z_min", "z_max"];
        let mut s = String::from("plane,value\n");
        for (name, p) in NAMES.iter().zip(&self.planes) {
            for v in p {
                let _ = writeln!(s, "{name},{v}");
            }
        }
        s
    }
}

/// Votes of (at most `max_voxels`) edge voxels of a raw volume.
pub fn predict_votes(model: &LocalizerModel, v: &Volume, max_voxels: usize) -> Result<VoteSet> {
    let norm = v.normalized(model.window);
    let mut edges = canny_edges(&norm, model.canny)?;
    if edges.len() > max_voxels {
        let mut r = rng::seeded(rng::derive(model.spec.seed, 0x766f7465));
        let mut idx = sample(&mut r, edges.len(), max_voxels).into_vec();
        idx.sort_unstable();
        edges = idx.into_iter().map(|i| edges[i]).collect();
    }
    let iv = IntegralVolume::new(&norm);
    let mut offsets = Vec::with_capacity(edges.len());
    for chunk in edges.chunks(1024) {
        let f = extract_features(&iv, v.spacing(), chunk, &model.spec);
        offsets.extend(model.predict_offsets(&f)?);
    }
    Ok(VoteSet::from_offsets(&edges, &offsets, v.dims()))
}

/// Most representative box, clamped to the volume the votes came from.
/// Crossed or out-of-volume planes from a poor model still give a valid
/// (possibly thin) box: each axis is ordered, then clamped.
pub fn aggregate_votes(votes: &VoteSet) -> Result<BoundingBox> {
    let p = aggregate_planes(&votes.planes)?;
    let mut out = [0i64; 6];
    for a in 0..3 {
        let n = votes.dims[a] as i64 - 1;
        out[2 * a] = p[2 * a].min(p[2 * a + 1]).clamp(0, n);
        out[2 * a + 1] = p[2 * a].max(p[2 * a + 1]).clamp(0, n);
    }
    Ok(BoundingBox::from_planes(out))
}

pub fn expand_box(b: &BoundingBox, tol: i64, dims: [usize; 3]) -> BoundingBox {
    b.expand(tol.max(0), dims)
}

/// Predicted and tolerance-expanded lumbar box of a raw volume.
pub fn localize(model: &LocalizerModel, v: &Volume, max_voxels: usize, tol: i64) -> Result<BoundingBox> {
    let b = aggregate_votes(&predict_votes(model, v, max_voxels)?)?;
    Ok(expand_box(&b, tol, v.dims()))
}

/// Fraction of labelled voxels inside the box.
pub fn sensitivity(gt: &LabelVolume, b: &BoundingBox) -> Result<f64> {
    let (mut total, mut inside) = (0usize, 0usize);
    for (idx, &l) in gt.data().iter().enumerate() {
        if l != 0 {
            total += 1;
            let [i, j, k] = gt.coords(idx);
            inside += b.contains(i as i64, j as i64, k as i64) as usize;
        }
    }
    if total == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(inside as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn expand_examples() {
        let b = BoundingBox::new((20, 30), (20, 30), (20, 30));
        assert_eq!(expand_box(&b, 0, [100; 3]), b);
        assert_eq!(
            expand_box(&b, 15, [100; 3]),
            BoundingBox::new((5, 45), (5, 45), (5, 45))
        );
        let c = BoundingBox::new((5, 95), (5, 95), (5, 95));
        assert_eq!(
            expand_box(&c, 15, [100; 3]),
            BoundingBox::new((0, 99), (0, 99), (0, 99))
        );
    }

    #[test]
    fn sensitivity_examples() {
        let l = LabelVolume::from_fn([10, 10, 1], [1.0; 3], |_, _, _| 1).unwrap();
        assert_eq!(sensitivity(&l, &BoundingBox::whole([10, 10, 1])).unwrap(), 1.0);
        assert_eq!(
            sensitivity(&l, &BoundingBox::new((20, 30), (0, 9), (0, 0))).unwrap(),
            0.0
        );
        let row = LabelVolume::from_fn([120, 1, 1], [1.0; 3], |i, _, _| u8::from(i >= 10 && i < 110)).unwrap();
        let b = BoundingBox::new((0, 82), (0, 0), (0, 0));
        assert_eq!(sensitivity(&row, &b).unwrap(), 0.73);
        let empty = LabelVolume::filled([3, 3, 3], [1.0; 3], 0).unwrap();
        assert!(matches!(sensitivity(&empty, &b), Err(Error::EmptyGroundTruth)));
    }

    #[test]
    fn hand_set_votes() {
        let votes = VoteSet::from_offsets(
            &[[10, 20, 30], [4, 5, 6]],
            &[[2.0, -3.0, 0.5, -1.0, 10.0, -10.0], [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]],
            [64; 3],
        );
        assert_eq!(votes.planes[0], vec![8.0, 4.0]);
        assert_eq!(votes.planes[1], vec![13.0, 4.0]);
        assert_eq!(votes.planes[2], vec![19.5, 5.0]);
        assert_eq!(votes.planes[5], vec![40.0, 6.0]);
        assert_eq!(votes.len(), 2);
        assert!(votes.to_csv().starts_with("plane,value\nx_min,8\nx_min,4\n"));
    }

    #[test]
    fn exact_offsets_vote_for_ground_truth() {
        let gt = BoundingBox::new((3, 40), (10, 22), (5, 60));
        let mut r = crate::rng::seeded(2);
        let voxels: Vec<[usize; 3]> = (0..300)
            .map(|_| [r.gen_range(0..64), r.gen_range(0..64), r.gen_range(0..64)])
            .collect();
        let offsets: Vec<[f64; 6]> = voxels.iter().map(|v| make_targets(*v, &gt)).collect();
        let votes = VoteSet::from_offsets(&voxels, &offsets, [64; 3]);
        assert_eq!(aggregate_votes(&votes).unwrap(), gt);
    }

    #[test]
    fn crossed_or_outside_planes_still_give_a_box() {
        // x planes crossed, y entirely below the grid, z beyond it on both sides
        let around = |c: f64| (0..40).map(|i| c + (i % 7) as f64 * 0.1).collect::<Vec<_>>();
        let votes = VoteSet {
            planes: [
                around(25.0),
                around(15.0),
                around(-100.0),
                around(-90.0),
                around(-50.0),
                around(80.0),
            ],
            dims: [32; 3],
        };
        let b = aggregate_votes(&votes).unwrap();
        let p = b.planes();
        assert!((15..=16).contains(&p[0]) && (25..=26).contains(&p[1]), "{p:?}");
        assert_eq!(&p[2..], &[0, 0, 0, 31]);
    }

    #[test]
    fn mlp_layout() {
        let specs = mlp_specs(500, &HIDDEN, 6);
        assert_eq!(specs.len(), 9);
        assert_eq!(
            specs[0],
            LayerSpec::Dense {
                input: 500,
                output: 350
            }
        );
        assert_eq!(specs[8], LayerSpec::Dense { input: 50, output: 6 });
        assert_eq!(hidden_of(&specs), HIDDEN.to_vec());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = FeatureSpec::with_defaults(20, 5).unwrap();
        let mut m = LocalizerModel::new(spec, &[8, 4], 1).unwrap();
        m.target_scale = 25.0;
        m.window = Window { lo: -100.0, hi: 900.0 };
        let path = dir.path().join("loc.ckpt");
        m.save(&path).unwrap();
        let back = LocalizerModel::load(&path).unwrap();
        assert_eq!(back.spec, m.spec);
        assert_eq!(back.window, m.window);
        assert_eq!(back.target_scale, 25.0);
        assert_eq!(back.params.params, m.params.params);
    }

    #[test]
    fn constant_targets_are_fitted() {
        let mut r = crate::rng::seeded(8);
        let x = Tensor::new(vec![2048, 20], (0..2048 * 20).map(|_| r.gen::<f64>()).collect()).unwrap();
        let y = Tensor::zeros(&[2048, 6]);
        let mut m = ModelParams::build(mlp_specs(20, &[16, 8], 6), 3).unwrap();
        let cfg = SgdConfig {
            epochs: 300,
            batch: 64,
            optim: OptimKind::sgd(1e-3, 0.9),
            seed: 1,
        };
        let trace = fit_regressor(&mut m, &cfg, |_, _| Ok((x.clone(), y.clone()))).unwrap();
        assert!(*trace.last().unwrap() < 1e-4, "{:?}", &trace[trace.len() - 3..]);
    }
}
