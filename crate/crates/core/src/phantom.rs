//! Deterministic synthetic spine phantoms.
//!
//! A phantom is a soft-tissue cylinder holding a stack of vertebrae built from
//! an elliptic-cylinder body and ellipsoid posterior elements. The five lumbar
//! vertebrae carry labels 1..5 with L1 the most superior; optional thoracic
//! vertebrae (with ribs) above and sacral segments below are rendered as bone
//! but labelled background. Lumbar bodies grow inferiorly, as real ones do.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::volume::{save_labels, save_volume, BoundingBox, ElementType, LabelVolume, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub seed: u64,
    pub dims: [usize; 3],
    /// Isotropic voxel size in mm.
    pub spacing: f64,
    /// Mean distance between consecutive vertebra centres, mm.
    pub pitch_mm: f64,
    /// Lateral / anterior-posterior body radii of L1, mm.
    pub body_radii_mm: (f64, f64),
    /// Per-level radius growth from L1 down to L5, mm.
    pub radius_growth_mm: f64,
    /// Global size scale drawn uniformly from this range.
    pub scale_range: (f64, f64),
    /// Lateral bow amplitude (scoliosis), mm; 0 disables.
    pub curvature_mm: f64,
    pub fracture_prob: f64,
    /// Height factor applied to a fractured body.
    pub crush_factor: f64,
    /// Thoracic vertebrae rendered above L1 are drawn from
    /// `min_thoracic..=max_thoracic`.
    pub min_thoracic: usize,
    pub max_thoracic: usize,
    pub s1_prob: f64,
    /// Render the full sacrum (S1-S3) below L5.
    pub extra_sacrum: bool,
    pub noise_sigma: f64,
    pub bone_intensity: f64,
    pub tissue_intensity: f64,
    pub disc_intensity: f64,
    /// Voxels added on every side of the tight lumbar box for the ground truth.
    pub gt_margin: i64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [96, 96, 160],
            spacing: 1.0,
            pitch_mm: 22.0,
            body_radii_mm: (15.0, 12.0),
            radius_growth_mm: 1.5,
            scale_range: (0.93, 1.07),
            curvature_mm: 0.0,
            fracture_prob: 0.0,
            crush_factor: 0.6,
            min_thoracic: 1,
            max_thoracic: 4,
            s1_prob: 1.0,
            extra_sacrum: false,
            noise_sigma: 20.0,
            bone_intensity: 700.0,
            tissue_intensity: 200.0,
            disc_intensity: 260.0,
            gt_margin: 15,
        }
    }
}

impl PhantomConfig {
    /// Coarse variant (3 mm voxels) used by the fast profile.
    pub fn toy() -> Self {
        Self {
            dims: [40, 40, 110],
            spacing: 3.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("fracture_prob", self.fracture_prob), ("s1_prob", self.s1_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.spacing > 0.0) || self.dims.contains(&0) {
            return Err(Error::Config("phantom dims and spacing must be positive".into()));
        }
        if self.min_thoracic > self.max_thoracic {
            return Err(Error::Config("min_thoracic exceeds max_thoracic".into()));
        }
        if !(self.crush_factor > 0.0 && self.crush_factor <= 1.0) {
            return Err(Error::Config("crush_factor must lie in (0, 1]".into()));
        }
        let need = self.lumbar_span_mm(self.scale_range.1) + 2.0 * self.gt_margin as f64 * self.spacing;
        let have = self.dims[2] as f64 * self.spacing;
        if need > have {
            return Err(Error::Config(format!(
                "lumbar stack plus margin needs {need:.0} mm but the field of view is {have:.0} mm"
            )));
        }
        Ok(())
    }

    fn lumbar_span_mm(&self, scale: f64) -> f64 {
        // five bodies: four full pitches between the outer centres plus two half heights
        (4.0 + 2.0 * HALF_HEIGHT) * self.pitch_mm * scale * 1.05
    }
}

/// Body half-height as a fraction of the pitch.
const HALF_HEIGHT: f64 = 0.36;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Lumbar,
    Thoracic,
    Sacral,
}

#[derive(Clone, Copy, Debug)]
struct Vertebra {
    label: u8,
    kind: Kind,
    /// Body centre in mm.
    center: [f64; 3],
    half_height: f64,
    rx: f64,
    ry: f64,
}

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.c[a]) / self.r[a];
            s += d * d;
        }
        s <= 1.0
    }
}

impl Vertebra {
    fn parts(&self) -> Vec<Ellipsoid> {
        let [cx, cy, cz] = self.center;
        let (rx, ry, hh) = (self.rx, self.ry, self.half_height);
        let mut v = vec![
            // arch behind the body
            Ellipsoid {
                c: [cx, cy + ry + 4.0, cz],
                r: [0.55 * rx, 7.0, 0.75 * hh],
            },
        ];
        match self.kind {
            // thoracic spinous processes are long and slope steeply downwards
            Kind::Thoracic => v.extend((0..5).map(|i| {
                let t = i as f64 / 4.0;
                Ellipsoid {
                    c: [cx, cy + ry + 9.0 + 14.0 * t, cz - 0.3 * hh - 2.2 * hh * t],
                    r: [3.0, 4.5, 4.5],
                }
            })),
            _ => v.push(Ellipsoid {
                c: [cx, cy + ry + 16.0, cz - 0.2 * hh],
                r: [2.5, 8.0, 0.45 * hh],
            }),
        }
        for side in [-1.0, 1.0] {
            v.push(Ellipsoid {
                c: [cx + side * (0.55 * rx + 5.0), cy + ry + 5.0, cz],
                r: [9.0, 3.5, 0.35 * hh],
            });
            match self.kind {
                Kind::Thoracic => v.extend([
                    Ellipsoid {
                        c: [cx + side * (rx + 18.0), cy + ry + 2.0, cz],
                        r: [20.0, 4.0, 3.0],
                    },
                    // rib head against the back corner of the body
                    Ellipsoid {
                        c: [cx + side * 0.7 * rx, cy + 0.8 * ry, cz + 0.6 * hh],
                        r: [5.0, 5.0, 4.0],
                    },
                ]),
                Kind::Sacral => v.push(Ellipsoid {
                    c: [cx + side * (rx + 10.0), cy + 0.5 * ry, cz],
                    r: [14.0, 10.0, hh],
                }),
                Kind::Lumbar => {}
            }
        }
        v
    }

    #[inline]
    fn body_contains(&self, p: [f64; 3]) -> bool {
        let dx = (p[0] - self.center[0]) / self.rx;
        let dy = (p[1] - self.center[1]) / self.ry;
        dx * dx + dy * dy <= 1.0 && (p[2] - self.center[2]).abs() <= self.half_height
    }
}

/// Flags describing which deformities a phantom carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PhantomFlags {
    pub fracture: bool,
    pub scoliosis: bool,
    pub extra_sacrum: bool,
}

impl PhantomFlags {
    pub fn render(&self) -> String {
        let mut v = Vec::new();
        if self.fracture {
            v.push("fracture");
        }
        if self.scoliosis {
            v.push("scoliosis");
        }
        if self.extra_sacrum {
            v.push("extra_sacrum");
        }
        if v.is_empty() {
            "none".into()
        } else {
            v.join("|")
        }
    }

    pub fn parse(s: &str) -> Self {
        let mut f = Self::default();
        for t in s.split('|').map(str::trim) {
            match t {
                "fracture" => f.fracture = true,
                "scoliosis" => f.scoliosis = true,
                "extra_sacrum" => f.extra_sacrum = true,
                _ => {}
            }
        }
        f
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Volume,
    pub labels: LabelVolume,
    pub gt_box: BoundingBox,
    pub flags: PhantomFlags,
}

/// Renders one phantom.
pub fn gen_phantom(cfg: &PhantomConfig) -> Result<Phantom> {
    cfg.validate()?;
    let mut r = rng::seeded(cfg.seed);
    let s = cfg.spacing;
    let fov = [cfg.dims[0] as f64 * s, cfg.dims[1] as f64 * s, cfg.dims[2] as f64 * s];
    let scale = r.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
    let pitch = cfg.pitch_mm * scale;
    let margin_mm = cfg.gt_margin as f64 * s;

    // lumbar centres, L5 first
    let mut offsets = vec![0.0];
    for _ in 0..4 {
        let last = *offsets.last().unwrap();
        offsets.push(last + pitch * r.gen_range(0.97..1.03));
    }
    let hh = HALF_HEIGHT * pitch;
    let span = offsets[4] + 2.0 * hh;
    let lo = margin_mm + s;
    let hi = (fov[2] - margin_mm - span - s).max(lo);
    let bottom = if cfg.extra_sacrum { hi } else { r.gen_range(lo..=hi) };
    let z_l5 = bottom + hh;

    let cx = 0.5 * fov[0] + r.gen_range(-4.0..4.0);
    let cy = 0.45 * fov[1] + r.gen_range(-3.0..3.0);
    let bow = if cfg.curvature_mm > 0.0 {
        cfg.curvature_mm * r.gen_range(0.6..1.0) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }
    } else {
        0.0
    };
    let axis_x = |z: f64| cx + bow * (std::f64::consts::PI * ((z - z_l5) / (offsets[4] + 1e-9))).sin();

    let fractured = if r.gen_bool(cfg.fracture_prob) {
        Some(r.gen_range(0..5usize))
    } else {
        None
    };

    let mut verts = Vec::new();
    for (v, &off) in offsets.iter().enumerate() {
        let z = z_l5 + off;
        let level = 4 - v; // 0 = L1
        let grow = cfg.radius_growth_mm * level as f64;
        let crush = if fractured == Some(v) { cfg.crush_factor } else { 1.0 };
        verts.push(Vertebra {
            label: (level + 1) as u8,
            kind: Kind::Lumbar,
            center: [axis_x(z), cy, z],
            half_height: hh * crush,
            rx: (cfg.body_radii_mm.0 + grow) * scale,
            ry: (cfg.body_radii_mm.1 + grow * 0.6) * scale,
        });
    }
    let n_thoracic = r.gen_range(cfg.min_thoracic..=cfg.max_thoracic);
    for t in 0..n_thoracic {
        let z = z_l5 + offsets[4] + pitch * 0.95 * (t + 1) as f64;
        verts.push(Vertebra {
            label: 0,
            kind: Kind::Thoracic,
            center: [axis_x(z), cy, z],
            half_height: hh * 0.92,
            rx: (cfg.body_radii_mm.0 - 2.5 - t as f64) * scale,
            ry: (cfg.body_radii_mm.1 - 2.0 - 0.5 * t as f64) * scale,
        });
    }
    let n_sacral = if cfg.extra_sacrum {
        3
    } else if r.gen_bool(cfg.s1_prob) {
        1
    } else {
        0
    };
    // fused sacral segments: contiguous bodies tilting backwards, no discs
    let l5 = verts[0];
    let sacral_pitch = 0.8 * pitch;
    for k in 0..n_sacral {
        let z = z_l5 - hh - 0.25 * pitch - sacral_pitch * (k as f64 + 0.5);
        let shrink = 1.0 - 0.15 * k as f64;
        verts.push(Vertebra {
            label: 0,
            kind: Kind::Sacral,
            center: [l5.center[0], cy + 4.0 * (k + 1) as f64, z],
            half_height: 0.5 * sacral_pitch,
            rx: l5.rx * 1.25 * shrink,
            ry: l5.ry * 0.95 * shrink,
        });
    }

    let tissue = Ellipsoid {
        c: [0.5 * fov[0], 0.5 * fov[1], 0.0],
        r: [0.46 * fov[0], 0.44 * fov[1], f64::INFINITY],
    };
    let discs = disc_pairs(&verts);
    // parts thinner than a voxel would sample into disconnected fragments
    let parts: Vec<(usize, Vec<Ellipsoid>)> = verts
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let mut p = v.parts();
            for e in &mut p {
                e.r = e.r.map(|r| r.max(s));
            }
            (i, p)
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let n = cfg.dims.iter().product();
    let mut image = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for k in 0..cfg.dims[2] {
        let z = (k as f64 + 0.5) * s;
        // only vertebrae near this plane can contribute
        let near: Vec<usize> = verts
            .iter()
            .enumerate()
            .filter(|(_, v)| (v.center[2] - z).abs() <= pitch)
            .map(|(i, _)| i)
            .collect();
        for j in 0..cfg.dims[1] {
            let y = (j as f64 + 0.5) * s;
            for i in 0..cfg.dims[0] {
                let x = (i as f64 + 0.5) * s;
                let p = [x, y, z];
                let inside_body = {
                    let dx = (x - tissue.c[0]) / tissue.r[0];
                    let dy = (y - tissue.c[1]) / tissue.r[1];
                    dx * dx + dy * dy <= 1.0
                };
                let mut value = if inside_body { cfg.tissue_intensity } else { 0.0 };
                let mut label = 0u8;
                let mut bone = false;
                for &vi in &near {
                    let v = &verts[vi];
                    if v.body_contains(p) || parts[vi].1.iter().any(|e| e.contains(p)) {
                        bone = true;
                        label = v.label;
                        break;
                    }
                }
                if !bone && inside_body && is_disc(&discs, p) {
                    value = cfg.disc_intensity;
                }
                if bone {
                    value = cfg.bone_intensity;
                }
                if cfg.noise_sigma > 0.0 {
                    value += noise.sample(&mut r);
                }
                image.push(value);
                labels.push(label);
            }
        }
    }
    let spacing = [s; 3];
    let image = Volume::new(cfg.dims, spacing, image)?;
    let labels = LabelVolume::new(cfg.dims, spacing, labels)?;
    let tight = BoundingBox::of_labels(&labels).ok_or_else(|| Error::Config("phantom has no lumbar voxels".into()))?;
    Ok(Phantom {
        image,
        labels,
        gt_box: tight.expand(cfg.gt_margin, cfg.dims),
        flags: PhantomFlags {
            fracture: fractured.is_some(),
            scoliosis: bow != 0.0,
            extra_sacrum: cfg.extra_sacrum,
        },
    })
}

/// Vertically adjacent bodies separated by a soft-tissue disc; fused sacral
/// segments have none.
fn disc_pairs(verts: &[Vertebra]) -> Vec<(Vertebra, Vertebra)> {
    let mut order = verts.to_vec();
    order.sort_by(|a, b| a.center[2].total_cmp(&b.center[2]));
    order
        .windows(2)
        .filter(|w| !(w[0].kind == Kind::Sacral && w[1].kind == Kind::Sacral))
        .map(|w| (w[0], w[1]))
        .collect()
}

fn is_disc(pairs: &[(Vertebra, Vertebra)], p: [f64; 3]) -> bool {
    pairs.iter().any(|&(a, b)| {
        let z0 = a.center[2] + a.half_height;
        let z1 = b.center[2] - b.half_height;
        if p[2] < z0 || p[2] > z1 {
            return false;
        }
        let t = (p[2] - z0) / (z1 - z0).max(1e-9);
        let cx = a.center[0] + t * (b.center[0] - a.center[0]);
        let cy = a.center[1] + t * (b.center[1] - a.center[1]);
        let rx = 0.95 * a.rx.min(b.rx);
        let ry = 0.95 * a.ry.min(b.ry);
        let dx = (p[0] - cx) / rx;
        let dy = (p[1] - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
}

/// One entry of a suite manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseEntry {
    pub case_id: String,
    pub split: Split,
    pub image_path: PathBuf,
    pub label_path: PathBuf,
    pub flags: PhantomFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub const FILE_NAME: &'static str = "manifest.txt";

    pub fn render(&self) -> String {
        let mut out = String::from("# case_id, split, image_path, label_path, flags\n");
        out.push_str("# labels: 0 background, 1..5 = L1..L5, z increases superiorly\n");
        for c in &self.cases {
            let _ = writeln!(
                out,
                "{}, {}, {}, {}, {}",
                c.case_id,
                c.split.as_str(),
                c.image_path.display(),
                c.label_path.display(),
                c.flags.render()
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cases = Vec::new();
        for line in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(Error::Header(format!("manifest line needs 5 fields: `{line}`")));
            }
            let split = match f[1] {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Error::Header(format!("unknown split `{other}`"))),
            };
            cases.push(CaseEntry {
                case_id: f[0].to_string(),
                split,
                image_path: PathBuf::from(f[2]),
                label_path: PathBuf::from(f[3]),
                flags: PhantomFlags::parse(f[4]),
            });
        }
        Ok(Self { cases })
    }

    /// Reads a manifest; relative case paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for c in &mut m.cases {
            for p in [&mut c.image_path, &mut c.label_path] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(m)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }
}

/// Deformity mix of a generated suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub base: PhantomConfig,
    pub fracture_fraction: f64,
    pub scoliosis_fraction: f64,
    /// Lateral bow for scoliotic cases, mm.
    pub scoliosis_mm: f64,
    /// Adds exactly one extra-sacrum case to the test split.
    pub extra_sacrum_test_case: bool,
}

impl SuiteConfig {
    pub fn new(n_train: usize, n_test: usize, seed: u64, base: PhantomConfig) -> Self {
        Self {
            n_train,
            n_test,
            seed,
            base,
            fracture_fraction: 0.4,
            scoliosis_fraction: 0.3,
            scoliosis_mm: 10.0,
            extra_sacrum_test_case: true,
        }
    }

    /// Per-case configurations, in manifest order (train cases first).
    pub fn case_configs(&self) -> Result<Vec<(String, Split, PhantomConfig)>> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config(
                "a suite needs at least one train and one test case".into(),
            ));
        }
        let mut r = rng::seeded(rng::derive(self.seed, 0xC0FFEE));
        let sacrum_case = r.gen_range(0..self.n_test);
        let mut out = Vec::new();
        for idx in 0..self.n_train + self.n_test {
            let (split, local) = if idx < self.n_train {
                (Split::Train, idx)
            } else {
                (Split::Test, idx - self.n_train)
            };
            let mut cfg = self.base.clone();
            cfg.seed = rng::derive(self.seed, idx as u64 + 1);
            let mut cr = rng::seeded(cfg.seed ^ 0x5EED);
            cfg.fracture_prob = if cr.gen_bool(self.fracture_fraction) { 1.0 } else { 0.0 };
            cfg.curvature_mm = if cr.gen_bool(self.scoliosis_fraction) {
                self.scoliosis_mm
            } else {
                0.0
            };
            cfg.extra_sacrum = self.extra_sacrum_test_case && split == Split::Test && local == sacrum_case;
            out.push((format!("case{:03}", idx + 1), split, cfg));
        }
        Ok(out)
    }
}

/// Renders a suite in memory.
pub fn gen_suite_in_memory(suite: &SuiteConfig) -> Result<Vec<(String, Split, Phantom)>> {
    suite
        .case_configs()?
        .into_iter()
        .map(|(id, split, cfg)| Ok((id, split, gen_phantom(&cfg)?)))
        .collect()
}

/// Writes every case as MHD/RAW pairs plus a manifest under `out_dir` and
/// returns the manifest path.
pub fn gen_suite(suite: &SuiteConfig, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut cases = Vec::new();
    for (id, split, cfg) in suite.case_configs()? {
        let ph = gen_phantom(&cfg)?;
        let image_rel = PathBuf::from(format!("{id}_image.mhd"));
        let label_rel = PathBuf::from(format!("{id}_labels.mhd"));
        save_volume(&ph.image, out_dir.join(&image_rel), ElementType::Float)?;
        save_labels(&ph.labels, out_dir.join(&label_rel))?;
        cases.push(CaseEntry {
            case_id: id,
            split,
            image_path: image_rel,
            label_path: label_rel,
            flags: ph.flags,
        });
    }
    let path = out_dir.join(Manifest::FILE_NAME);
    fs::write(&path, Manifest { cases }.render()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
