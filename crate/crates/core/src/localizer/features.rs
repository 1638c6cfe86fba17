//! Long-range context features: mean intensities of randomly placed cuboids
//! relative to a voxel, and the plane-offset regression targets.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;
use crate::volume::{BoundingBox, IntegralVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Probe {
    pub offset_mm: [f64; 3],
    pub halfsize_mm: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpec {
    pub probes: Vec<Probe>,
    pub seed: u64,
    /// Offsets are drawn from `[-offset_range, offset_range]` per axis.
    pub offset_range_mm: f64,
    /// Half-sizes are drawn from this range per axis.
    pub size_range_mm: (f64, f64),
}

impl FeatureSpec {
    pub const DEFAULT_N: usize = 500;

    pub fn generate(n: usize, seed: u64, offset_range_mm: f64, size_range_mm: (f64, f64)) -> Result<Self> {
        if n == 0 || !(offset_range_mm >= 0.0) || !(size_range_mm.0 >= 0.0 && size_range_mm.1 >= size_range_mm.0) {
            return Err(Error::Config("invalid feature probe ranges".into()));
        }
        let mut r = rng::seeded(seed);
        let probes = (0..n)
            .map(|_| Probe {
                offset_mm: std::array::from_fn(|_| r.gen_range(-offset_range_mm..=offset_range_mm)),
                halfsize_mm: std::array::from_fn(|_| r.gen_range(size_range_mm.0..=size_range_mm.1)),
            })
            .collect();
        Ok(Self {
            probes,
            seed,
            offset_range_mm,
            size_range_mm,
        })
    }

    pub fn with_defaults(n: usize, seed: u64) -> Result<Self> {
        Self::generate(n, seed, 100.0, (2.5, 25.0))
    }

    pub fn n(&self) -> usize {
        self.probes.len()
    }

    /// Probes in voxel units for a grid spacing.
    pub fn to_voxels(&self, spacing: [f64; 3]) -> Vec<([i64; 3], [i64; 3])> {
        self.probes
            .iter()
            .map(|p| {
                (
                    std::array::from_fn(|a| (p.offset_mm[a] / spacing[a]).round() as i64),
                    std::array::from_fn(|a| (p.halfsize_mm[a] / spacing[a]).round().max(0.0) as i64),
                )
            })
            .collect()
    }

    /// Lossless text form of the probe list (shortest round-trip floats).
    pub fn encode_probes(&self) -> String {
        self.probes
            .iter()
            .map(|p| {
                p.offset_mm
                    .iter()
                    .chain(&p.halfsize_mm)
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn decode_probes(s: &str) -> Result<Vec<Probe>> {
        s.split(';')
            .map(|p| {
                let v: Vec<f64> = p
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|e| Error::CorruptCheckpoint(format!("probe value: {e}")))
                    })
                    .collect::<Result<_>>()?;
                if v.len() != 6 {
                    return Err(Error::CorruptCheckpoint("probe needs six values".into()));
                }
                Ok(Probe {
                    offset_mm: [v[0], v[1], v[2]],
                    halfsize_mm: [v[3], v[4], v[5]],
                })
            })
            .collect()
    }
}

/// `[voxels.len(), n]` matrix of cuboid means around each voxel of a
/// normalised volume.
pub fn extract_features(iv: &IntegralVolume, spacing: [f64; 3], voxels: &[[usize; 3]], spec: &FeatureSpec) -> Tensor {
    let probes = spec.to_voxels(spacing);
    let mut data = Vec::with_capacity(voxels.len() * probes.len());
    for v in voxels {
        let c = [v[0] as i64, v[1] as i64, v[2] as i64];
        for (off, half) in &probes {
            data.push(iv.cuboid_mean(c, *off, *half));
        }
    }
    Tensor::new(vec![voxels.len(), probes.len()], data).expect("shape matches data")
}

/// Convenience wrapper building the integral volume first.
pub fn extract_features_from(v: &Volume, voxels: &[[usize; 3]], spec: &FeatureSpec) -> Tensor {
    extract_features(&IntegralVolume::new(v), v.spacing(), voxels, spec)
}

/// Signed distances from a voxel to the six planes of a box.
pub fn make_targets(voxel: [usize; 3], gt: &BoundingBox) -> [f64; 6] {
    let p = gt.planes();
    std::array::from_fn(|c| voxel[c / 2] as f64 - p[c] as f64)
}

/// Plane positions implied by offsets predicted at a voxel.
pub fn invert_targets(offsets: &[f64; 6], voxel: [usize; 3]) -> [f64; 6] {
    std::array::from_fn(|c| voxel[c / 2] as f64 - offsets[c])
}
