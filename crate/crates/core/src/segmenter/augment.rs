//! Slice-level augmentation: random ROI height crops and rigid + elastic warps.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng as ChaRng;
use crate::volume::Image2;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Candidate row trims δ; an augmented slice keeps h - 2δ rows.
    pub deltas: Vec<usize>,
    pub elastic_grid_mm: f64,
    pub elastic_sigma_mm: f64,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub roi: bool,
    pub geometric: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            deltas: vec![5, 10, 15, 20, 25],
            elastic_grid_mm: 32.0,
            elastic_sigma_mm: 4.0,
            max_rotation_deg: 10.0,
            max_translation: 10.0,
            roi: true,
            geometric: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            roi: false,
            geometric: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.roi && (self.deltas.is_empty() || self.deltas.contains(&0)) {
            return Err(Error::Config("ROI deltas must be positive".into()));
        }
        if !(self.elastic_grid_mm > 0.0) || self.elastic_sigma_mm < 0.0 {
            return Err(Error::Config("elastic grid spacing must be positive".into()));
        }
        Ok(())
    }

    pub fn max_delta(&self) -> usize {
        self.deltas.iter().copied().max().unwrap_or(0)
    }
}

/// Keeps rows `[t, t + h - 2δ)` for a random δ from the set and t in [0, 2δ].
pub fn roi_augment(
    img: &Image2<f64>,
    lab: &Image2<u8>,
    cfg: &AugmentConfig,
    rng: &mut ChaRng,
) -> Result<(Image2<f64>, Image2<u8>)> {
    let h = img.height;
    if h <= 2 * cfg.max_delta() {
        return Err(Error::Config(format!(
            "slice height {h} must exceed twice the largest ROI delta {}",
            cfg.max_delta()
        )));
    }
    let &delta = cfg
        .deltas
        .choose(rng)
        .ok_or_else(|| Error::Config("empty ROI delta set".into()))?;
    let t = rng.gen_range(0..=2 * delta);
    Ok(roi_crop(img, lab, delta, t))
}

pub fn roi_crop(img: &Image2<f64>, lab: &Image2<u8>, delta: usize, t: usize) -> (Image2<f64>, Image2<u8>) {
    let end = t + img.height - 2 * delta;
    (img.rows(t, end), lab.rows(t, end))
}

/// A drawn geometric transform: rotation about the slice centre, then a
/// translation, plus a coarse displacement field (pixels) on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoDraw {
    pub rotation_rad: f64,
    pub translation: [f64; 2],
    /// Grid spacing in pixels.
    pub grid_step: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    /// (dx, dy) per grid node, row-major.
    pub displacement: Vec<[f64; 2]>,
}

impl GeoDraw {
    pub fn identity(width: usize, height: usize) -> Self {
        Self::rigid(width, height, 0.0, [0.0, 0.0])
    }

    pub fn rigid(width: usize, height: usize, rotation_rad: f64, translation: [f64; 2]) -> Self {
        let step = width.max(height).max(1) as f64;
        let (gw, gh) = grid_dims(width, height, step);
        Self {
            rotation_rad,
            translation,
            grid_step: step,
            grid_w: gw,
            grid_h: gh,
            displacement: vec![[0.0; 2]; gw * gh],
        }
    }

    pub fn sample(width: usize, height: usize, pixel_mm: f64, cfg: &AugmentConfig, rng: &mut ChaRng) -> Self {
        let rot = cfg.max_rotation_deg.to_radians();
        let rotation_rad = if rot > 0.0 { rng.gen_range(-rot..=rot) } else { 0.0 };
        let tr = cfg.max_translation;
        let translation = if tr > 0.0 {
            [rng.gen_range(-tr..=tr), rng.gen_range(-tr..=tr)]
        } else {
            [0.0, 0.0]
        };
        let step = (cfg.elastic_grid_mm / pixel_mm).max(1.0);
        let (gw, gh) = grid_dims(width, height, step);
        let sigma = cfg.elastic_sigma_mm / pixel_mm;
        let displacement = match Normal::new(0.0, sigma) {
            Ok(n) if sigma > 0.0 => (0..gw * gh).map(|_| [n.sample(rng), n.sample(rng)]).collect(),
            _ => vec![[0.0; 2]; gw * gh],
        };
        Self {
            rotation_rad,
            translation,
            grid_step: step,
            grid_w: gw,
            grid_h: gh,
            displacement,
        }
    }

    fn displacement_at(&self, x: f64, y: f64) -> [f64; 2] {
        let gx = (x / self.grid_step).clamp(0.0, (self.grid_w - 1) as f64);
        let gy = (y / self.grid_step).clamp(0.0, (self.grid_h - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.grid_w - 1), (y0 + 1).min(self.grid_h - 1));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let d = |i: usize, j: usize| self.displacement[j * self.grid_w + i];
        std::array::from_fn(|c| {
            (1.0 - fy) * ((1.0 - fx) * d(x0, y0)[c] + fx * d(x1, y0)[c])
                + fy * ((1.0 - fx) * d(x0, y1)[c] + fx * d(x1, y1)[c])
        })
    }

    /// Source position sampled for output pixel (x, y).
    pub fn source(&self, x: f64, y: f64, center: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.rotation_rad.sin_cos();
        let px = x - center[0] - self.translation[0];
        let py = y - center[1] - self.translation[1];
        let d = self.displacement_at(x, y);
        [c * px + s * py + center[0] + d[0], -s * px + c * py + center[1] + d[1]]
    }
}

fn grid_dims(width: usize, height: usize, step: f64) -> (usize, usize) {
    (
        (width as f64 / step).ceil() as usize + 2,
        (height as f64 / step).ceil() as usize + 2,
    )
}

/// Warps image (bilinear) and labels (nearest neighbour) with the same
/// transform; samples outside the slice replicate the border.
pub fn apply_geo(img: &Image2<f64>, lab: &Image2<u8>, draw: &GeoDraw) -> (Image2<f64>, Image2<u8>) {
    let (w, h) = (img.width, img.height);
    let center = [(w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0];
    let mut oi = Image2::filled(w, h, 0.0);
    let mut ol = Image2::filled(w, h, 0u8);
    let cx = |v: f64| v.clamp(0.0, (w - 1) as f64);
    let cy = |v: f64| v.clamp(0.0, (h - 1) as f64);
    for r in 0..h {
        for c in 0..w {
            let [sx, sy] = draw.source(c as f64, r as f64, center);
            let (sx, sy) = (cx(sx), cy(sy));
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let v = (1.0 - fy) * ((1.0 - fx) * img.get(x0, y0) + fx * img.get(x1, y0))
                + fy * ((1.0 - fx) * img.get(x0, y1) + fx * img.get(x1, y1));
            oi.set(c, r, v);
            ol.set(c, r, lab.get(sx.round() as usize, sy.round() as usize));
        }
    }
    (oi, ol)
}

/// Draws and applies a random rigid + elastic warp.
pub fn geo_augment(
    img: &Image2<f64>,
    lab: &Image2<u8>,
    pixel_mm: f64,
    cfg: &AugmentConfig,
    rng: &mut ChaRng,
) -> (Image2<f64>, Image2<u8>) {
    let draw = GeoDraw::sample(img.width, img.height, pixel_mm, cfg, rng);
    apply_geo(img, lab, &draw)
}
