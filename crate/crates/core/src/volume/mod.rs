//! Scalar and label volumes, bounding boxes, slicing and cropping.
//!
//! Axis convention: x is left-right (sagittal index), y is anterior-posterior
//! (coronal index) and z is inferior-superior (axial index). Data is stored
//! x-fastest.

mod integral;
mod io;

pub use integral::IntegralVolume;
pub use io::{load_labels, load_volume, read_mhd, save_labels, save_volume, ElementType, MhdHeader};

use crate::error::{Error, Result};

/// Number of classes carried by a [`LabelVolume`]: background plus L1..L5.
pub const NUM_LABELS: u8 = 6;

/// Voxel types that can live in a [`Grid`].
pub trait Voxel: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    fn is_valid(&self) -> bool;
}

impl Voxel for f64 {
    fn is_valid(&self) -> bool {
        self.is_finite()
    }
}

impl Voxel for u8 {
    fn is_valid(&self) -> bool {
        *self < NUM_LABELS
    }
}

/// A dense 3D grid with physical spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

/// Scalar intensity volume.
pub type Volume = Grid<f64>;
/// Label volume, 0 = background and k = L_k.
pub type LabelVolume = Grid<u8>;

impl<T: Voxel> Grid<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidVolume(format!("zero dimension in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidVolume(format!("non-positive spacing {spacing:?}")));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !v.is_valid()) {
            return Err(Error::InvalidVolume(format!("invalid voxel value {bad:?}")));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn from_fn(dims: [usize; 3], spacing: [f64; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.index(i, j, k)]
    }

    /// Inverse of [`Grid::index`].
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    /// Applies `f` to every voxel. The caller is responsible for the output
    /// satisfying the voxel invariants.
    pub fn map<U: Voxel>(&self, f: impl Fn(T) -> U) -> Result<Grid<U>> {
        Grid::new(self.dims, self.spacing, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Extracts a 2D slice. Sagittal slices are (y, z) images, coronal (x, z)
    /// and axial (x, y); the second-named axis runs along the rows.
    pub fn extract_slice(&self, axis: Axis, index: usize) -> Result<Image2<T>> {
        let len = self.dims[axis.fixed()];
        if index >= len {
            return Err(Error::IndexOutOfRange { index, len });
        }
        let (ca, ra) = axis.plane();
        let (w, h) = (self.dims[ca], self.dims[ra]);
        let mut data = Vec::with_capacity(w * h);
        let mut p = [0usize; 3];
        p[axis.fixed()] = index;
        for r in 0..h {
            p[ra] = r;
            for c in 0..w {
                p[ca] = c;
                data.push(self.get(p[0], p[1], p[2]));
            }
        }
        Ok(Image2 {
            width: w,
            height: h,
            data,
        })
    }

    /// Writes a slice back; the inverse of [`Grid::extract_slice`].
    pub fn insert_slice(&mut self, axis: Axis, index: usize, img: &Image2<T>) -> Result<()> {
        let len = self.dims[axis.fixed()];
        if index >= len {
            return Err(Error::IndexOutOfRange { index, len });
        }
        let (ca, ra) = axis.plane();
        if img.width != self.dims[ca] || img.height != self.dims[ra] {
            return Err(Error::Shape(format!(
                "slice {}x{} does not fit plane {}x{}",
                img.width, img.height, self.dims[ca], self.dims[ra]
            )));
        }
        if let Some(bad) = img.data.iter().find(|v| !v.is_valid()) {
            return Err(Error::InvalidVolume(format!("invalid voxel value {bad:?}")));
        }
        let mut p = [0usize; 3];
        p[axis.fixed()] = index;
        for r in 0..img.height {
            p[ra] = r;
            for c in 0..img.width {
                p[ca] = c;
                let idx = self.index(p[0], p[1], p[2]);
                self.data[idx] = img.data[r * img.width + c];
            }
        }
        Ok(())
    }

    /// Sub-volume spanning the inclusive box, after clamping it to the grid.
    pub fn crop(&self, b: &BoundingBox) -> Result<Self> {
        let b = b.clamp_to(self.dims).ok_or(Error::EmptyBox)?;
        let [x0, y0, z0] = b.min();
        let ext = b.extent();
        let mut data = Vec::with_capacity(ext.iter().product());
        for k in 0..ext[2] {
            for j in 0..ext[1] {
                let start = self.index(x0, y0 + j, z0 + k);
                data.extend_from_slice(&self.data[start..start + ext[0]]);
            }
        }
        Ok(Self {
            dims: ext,
            spacing: self.spacing,
            data,
        })
    }
}

impl Volume {
    /// Clamps intensities to the window and maps them affinely to [0, 1].
    pub fn normalized(&self, window: Window) -> Volume {
        let data = self.data.iter().map(|&v| window.apply(v)).collect();
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Trilinear resampling onto an isotropic grid of `target` mm.
    /// Voxel centres are aligned so both grids cover the same physical extent.
    pub fn resample_isotropic(&self, target: f64) -> Result<Volume> {
        if !(target > 0.0 && target.is_finite()) {
            return Err(Error::Config(format!("resampling target {target} must be positive")));
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = ((self.dims[a] as f64 * self.spacing[a] / target).round() as usize).max(1);
        }
        let src_pos = |a: usize, n: usize| -> Vec<(usize, usize, f64)> {
            (0..n)
                .map(|o| {
                    let s = ((o as f64 + 0.5) * target / self.spacing[a] - 0.5).clamp(0.0, (self.dims[a] - 1) as f64);
                    let lo = s.floor() as usize;
                    let hi = (lo + 1).min(self.dims[a] - 1);
                    (lo, hi, s - lo as f64)
                })
                .collect()
        };
        let (px, py, pz) = (src_pos(0, dims[0]), src_pos(1, dims[1]), src_pos(2, dims[2]));
        Volume::from_fn(dims, [target; 3], |i, j, k| {
            let (x0, x1, fx) = px[i];
            let (y0, y1, fy) = py[j];
            let (z0, z1, fz) = pz[k];
            let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
            let c00 = lerp(self.get(x0, y0, z0), self.get(x1, y0, z0), fx);
            let c10 = lerp(self.get(x0, y1, z0), self.get(x1, y1, z0), fx);
            let c01 = lerp(self.get(x0, y0, z1), self.get(x1, y0, z1), fx);
            let c11 = lerp(self.get(x0, y1, z1), self.get(x1, y1, z1), fx);
            lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
        })
    }
}

impl LabelVolume {
    /// Number of voxels carrying any nonzero label.
    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }

    /// Builds a label volume from raw labels, validating the alphabet.
    pub fn from_labels(dims: [usize; 3], spacing: [f64; 3], labels: Vec<u8>) -> Result<Self> {
        Self::new(dims, spacing, labels)
    }
}

/// Slice orientation under the crate's axis convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    /// Fixed x; a (y, z) image.
    Sagittal,
    /// Fixed y; an (x, z) image.
    Coronal,
    /// Fixed z; an (x, y) image.
    Axial,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Sagittal, Axis::Coronal, Axis::Axial];

    /// The grid axis held fixed by this orientation.
    pub fn fixed(self) -> usize {
        match self {
            Axis::Sagittal => 0,
            Axis::Coronal => 1,
            Axis::Axial => 2,
        }
    }

    /// (column axis, row axis) of the slice image.
    pub fn plane(self) -> (usize, usize) {
        match self {
            Axis::Sagittal => (1, 2),
            Axis::Coronal => (0, 2),
            Axis::Axial => (0, 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Sagittal => "sagittal",
            Axis::Coronal => "coronal",
            Axis::Axial => "axial",
        }
    }
}

/// Row-major 2D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image2<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image2<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::SizeMismatch {
                expected: width * height,
                found: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, v: T) {
        self.data[row * self.width + col] = v;
    }

    /// Rows `[start, end)`.
    pub fn rows(&self, start: usize, end: usize) -> Self {
        Self {
            width: self.width,
            height: end - start,
            data: self.data[start * self.width..end * self.width].to_vec(),
        }
    }
}

/// Intensity window used for normalisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Window {
    fn default() -> Self {
        Self { lo: 0.0, hi: 1000.0 }
    }
}

impl Window {
    pub fn apply(&self, v: f64) -> f64 {
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

/// Axis-aligned box given by six inclusive planes in voxel indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x_min: i64,
    pub x_max: i64,
    pub y_min: i64,
    pub y_max: i64,
    pub z_min: i64,
    pub z_max: i64,
}

impl BoundingBox {
    /// Builds a box from `[min, max]` pairs, swapping any reversed pair.
    pub fn new(x: (i64, i64), y: (i64, i64), z: (i64, i64)) -> Self {
        let o = |(a, b): (i64, i64)| if a <= b { (a, b) } else { (b, a) };
        let (x, y, z) = (o(x), o(y), o(z));
        Self {
            x_min: x.0,
            x_max: x.1,
            y_min: y.0,
            y_max: y.1,
            z_min: z.0,
            z_max: z.1,
        }
    }

    pub fn whole(dims: [usize; 3]) -> Self {
        Self::new(
            (0, dims[0] as i64 - 1),
            (0, dims[1] as i64 - 1),
            (0, dims[2] as i64 - 1),
        )
    }

    /// Planes in the order x_min, x_max, y_min, y_max, z_min, z_max.
    pub fn planes(&self) -> [i64; 6] {
        [self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max]
    }

    pub fn from_planes(p: [i64; 6]) -> Self {
        Self::new((p[0], p[1]), (p[2], p[3]), (p[4], p[5]))
    }

    /// Tight box around every nonzero label, or `None` for an empty volume.
    pub fn of_labels(labels: &LabelVolume) -> Option<Self> {
        Self::of_mask(labels, |l| l != 0)
    }

    pub fn of_mask(labels: &LabelVolume, pred: impl Fn(u8) -> bool) -> Option<Self> {
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (idx, &l) in labels.data().iter().enumerate() {
            if pred(l) {
                let c = labels.coords(idx);
                for a in 0..3 {
                    lo[a] = lo[a].min(c[a] as i64);
                    hi[a] = hi[a].max(c[a] as i64);
                }
            }
        }
        (lo[0] != i64::MAX).then(|| Self::new((lo[0], hi[0]), (lo[1], hi[1]), (lo[2], hi[2])))
    }

    /// Intersects the box with a grid; `None` when nothing survives.
    pub fn clamp_to(&self, dims: [usize; 3]) -> Option<Self> {
        let p = self.planes();
        let mut out = [0i64; 6];
        for a in 0..3 {
            let n = dims[a] as i64;
            let lo = p[2 * a].max(0);
            let hi = p[2 * a + 1].min(n - 1);
            if lo > hi {
                return None;
            }
            out[2 * a] = lo;
            out[2 * a + 1] = hi;
        }
        Some(Self::from_planes(out))
    }

    /// Grows every side by `tol` voxels and clamps to `[0, dim - 1]`.
    pub fn expand(&self, tol: i64, dims: [usize; 3]) -> Self {
        let p = self.planes();
        let mut out = [0i64; 6];
        for a in 0..3 {
            let n = dims[a] as i64 - 1;
            out[2 * a] = (p[2 * a] - tol).clamp(0, n);
            out[2 * a + 1] = (p[2 * a + 1] + tol).clamp(0, n);
        }
        Self::from_planes(out)
    }

    pub fn translate(&self, t: [i64; 3]) -> Self {
        let p = self.planes();
        Self::from_planes([
            p[0] + t[0],
            p[1] + t[0],
            p[2] + t[1],
            p[3] + t[1],
            p[4] + t[2],
            p[5] + t[2],
        ])
    }

    /// Lower corner; only meaningful for a clamped (non-negative) box.
    pub fn min(&self) -> [usize; 3] {
        [self.x_min as usize, self.y_min as usize, self.z_min as usize]
    }

    /// Voxel count along each axis.
    pub fn extent(&self) -> [usize; 3] {
        [
            (self.x_max - self.x_min + 1) as usize,
            (self.y_max - self.y_min + 1) as usize,
            (self.z_max - self.z_min + 1) as usize,
        ]
    }

    #[inline]
    pub fn contains(&self, i: i64, j: i64, k: i64) -> bool {
        (self.x_min..=self.x_max).contains(&i)
            && (self.y_min..=self.y_max).contains(&j)
            && (self.z_min..=self.z_max).contains(&k)
    }

    pub fn contains_box(&self, other: &BoundingBox) -> bool {
        self.x_min <= other.x_min
            && other.x_max <= self.x_max
            && self.y_min <= other.y_min
            && other.y_max <= self.y_max
            && self.z_min <= other.z_min
            && other.z_max <= self.z_max
    }
}

impl std::fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "x[{}..{}] y[{}..{}] z[{}..{}]",
            self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max
        )
    }
}
