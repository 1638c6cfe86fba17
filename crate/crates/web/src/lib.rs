//! Browser demo over the `lumbarseg` core.
//!
//! Three operations: render phantom slices with label overlays, overlay Canny
//! edge voxels on the same slices, and explore the KDE bandwidth and mode on a
//! two-component sample. The plain functions are usable natively; the
//! `#[wasm_bindgen]` types wrap them for the page in `www/`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use wasm_bindgen::prelude::*;

use lumbarseg::localizer::{botev_bandwidth, canny_edges, kde_mode, silverman, CannyParams};
use lumbarseg::phantom::{gen_phantom, PhantomConfig};
use lumbarseg::pipeline::PALETTE;
use lumbarseg::rng;
use lumbarseg::volume::{Axis, LabelVolume, Volume, Window};
use lumbarseg::Result;

pub const EDGE_COLOUR: [u8; 3] = [0, 255, 255];

pub fn axis_from_index(a: u8) -> Option<Axis> {
    Axis::ALL.get(a as usize).copied()
}

/// Slice size (width, height) for an axis.
pub fn slice_size(dims: [usize; 3], axis: Axis) -> (usize, usize) {
    let (c, r) = axis.plane();
    (dims[c], dims[r])
}

/// RGBA pixels of one slice, superior side up for sagittal and coronal views.
pub fn slice_rgba(
    image: &Volume,
    labels: Option<&LabelVolume>,
    edges: Option<&[bool]>,
    axis: Axis,
    index: usize,
    window: Window,
) -> Result<Vec<u8>> {
    let img = image.extract_slice(axis, index)?;
    let lab = labels.map(|l| l.extract_slice(axis, index)).transpose()?;
    let (ca, ra) = axis.plane();
    let flip = axis != Axis::Axial;
    let mut out = Vec::with_capacity(img.width * img.height * 4);
    for r in 0..img.height {
        let row = if flip { img.height - 1 - r } else { r };
        for c in 0..img.width {
            let g = window.apply(img.get(c, row)) * 255.0;
            let mut px = [g; 3];
            if let Some(l) = lab.as_ref().map(|l| l.get(c, row)).filter(|&l| l > 0) {
                let col = PALETTE[l as usize - 1];
                px = std::array::from_fn(|i| 0.5 * g + 0.5 * col[i] as f64);
            }
            if let Some(e) = edges {
                let mut p = [0usize; 3];
                p[axis.fixed()] = index;
                p[ca] = c;
                p[ra] = row;
                if e[image.index(p[0], p[1], p[2])] {
                    px = EDGE_COLOUR.map(f64::from);
                }
            }
            out.extend(px.map(|v| v.round() as u8));
            out.push(255);
        }
    }
    Ok(out)
}

/// Edge mask over the volume, flattened like its voxels.
pub fn edge_mask(image: &Volume, window: Window, params: CannyParams) -> Result<Vec<bool>> {
    let mut mask = vec![false; image.len()];
    for [i, j, k] in canny_edges(&image.normalized(window), params)? {
        mask[image.index(i, j, k)] = true;
    }
    Ok(mask)
}

/// `n` draws from `(1 - w) N(0, 1) + w N(sep, 1)`.
pub fn mixture_samples(n: usize, w: f64, sep: f64, seed: u64) -> Vec<f64> {
    let mut r = rng::seeded(seed);
    let (a, b) = (Normal::new(0.0, 1.0).unwrap(), Normal::new(sep, 1.0).unwrap());
    (0..n)
        .map(|_| {
            if r.gen_bool(w.clamp(0.0, 1.0)) {
                b.sample(&mut r)
            } else {
                a.sample(&mut r)
            }
        })
        .collect()
}

/// Gaussian KDE evaluated on `points` grid positions spanning the samples.
pub fn kde_curve(samples: &[f64], h: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let xs: Vec<f64> = (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1).max(1) as f64)
        .collect();
    let ys = xs
        .iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| (-0.5 * ((x - s) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    (xs, ys)
}

fn js(e: lumbarseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A generated phantom with optional edge overlay.
#[wasm_bindgen]
pub struct PhantomView {
    image: Volume,
    labels: LabelVolume,
    edges: Option<Vec<bool>>,
    window: Window,
}

#[wasm_bindgen]
impl PhantomView {
    /// Toy-profile phantom; `fracture` is the per-vertebra crush probability.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, fracture: f64, scoliosis_mm: f64, extra_sacrum: bool) -> Result<PhantomView, JsError> {
        let cfg = PhantomConfig {
            seed: seed as u64,
            fracture_prob: fracture.clamp(0.0, 1.0),
            curvature_mm: scoliosis_mm,
            extra_sacrum,
            ..PhantomConfig::toy()
        };
        let p = gen_phantom(&cfg).map_err(js)?;
        Ok(PhantomView {
            image: p.image,
            labels: p.labels,
            edges: None,
            window: Window::default(),
        })
    }

    /// Voxel counts along x, y and z.
    pub fn dims(&self) -> Vec<u32> {
        self.image.dims().iter().map(|&d| d as u32).collect()
    }

    pub fn width(&self, axis: u8) -> u32 {
        axis_from_index(axis).map_or(0, |a| slice_size(self.image.dims(), a).0 as u32)
    }

    pub fn height(&self, axis: u8) -> u32 {
        axis_from_index(axis).map_or(0, |a| slice_size(self.image.dims(), a).1 as u32)
    }

    /// Runs the edge detector; returns the number of edge voxels.
    pub fn detect_edges(&mut self, sigma_mm: f64, low: f64, high: f64) -> Result<u32, JsError> {
        let mask = edge_mask(&self.image, self.window, CannyParams { sigma_mm, low, high }).map_err(js)?;
        let n = mask.iter().filter(|&&e| e).count() as u32;
        self.edges = Some(mask);
        Ok(n)
    }

    /// RGBA pixels for a canvas `ImageData`; axis 0 sagittal, 1 coronal, 2 axial.
    pub fn render(&self, axis: u8, index: u32, show_labels: bool, show_edges: bool) -> Result<Vec<u8>, JsError> {
        let axis = axis_from_index(axis).ok_or_else(|| JsError::new("axis must be 0, 1 or 2"))?;
        slice_rgba(
            &self.image,
            show_labels.then_some(&self.labels),
            self.edges.as_deref().filter(|_| show_edges),
            axis,
            index as usize,
            self.window,
        )
        .map_err(js)
    }
}

/// Bandwidths, mode and density curve of one sample.
#[wasm_bindgen]
pub struct KdeView {
    botev: f64,
    silverman: f64,
    mode: f64,
    xs: Vec<f64>,
    density: Vec<f64>,
    samples: Vec<f64>,
}

#[wasm_bindgen]
impl KdeView {
    /// Draws a two-component sample and estimates its density; `scale`
    /// multiplies the diffusion bandwidth used for the curve and the mode.
    #[wasm_bindgen(constructor)]
    pub fn new(n: u32, weight: f64, separation: f64, scale: f64, seed: u32) -> Result<KdeView, JsError> {
        let samples = mixture_samples(n as usize, weight, separation, seed as u64);
        let botev = botev_bandwidth(&samples).map_err(js)?;
        let h = botev * scale.max(1e-3);
        let mode = kde_mode(&samples, h).map_err(js)?;
        let (xs, density) = kde_curve(&samples, h, 400);
        Ok(KdeView {
            botev,
            silverman: silverman(&samples),
            mode,
            xs,
            density,
            samples,
        })
    }

    pub fn botev(&self) -> f64 {
        self.botev
    }

    pub fn silverman(&self) -> f64 {
        self.silverman
    }

    pub fn mode(&self) -> f64 {
        self.mode
    }

    pub fn xs(&self) -> Vec<f64> {
        self.xs.clone()
    }

    pub fn density(&self) -> Vec<f64> {
        self.density.clone()
    }

    pub fn samples(&self) -> Vec<f64> {
        self.samples.clone()
    }
}
