use super::Volume;

/// Summed-volume table with one extra zero plane per axis, so any
/// axis-aligned cuboid sum takes eight lookups.
#[derive(Clone, Debug)]
pub struct IntegralVolume {
    dims: [usize; 3],
    sums: Vec<f64>,
}

impl IntegralVolume {
    pub fn new(v: &Volume) -> Self {
        let [nx, ny, nz] = v.dims();
        let (sx, sy) = (nx + 1, ny + 1);
        let mut sums = vec![0.0; sx * sy * (nz + 1)];
        let at = |i: usize, j: usize, k: usize| i + sx * (j + sy * k);
        for k in 0..nz {
            for j in 0..ny {
                let mut row = 0.0;
                for i in 0..nx {
                    row += v.get(i, j, k);
                    sums[at(i + 1, j + 1, k + 1)] =
                        row + sums[at(i + 1, j, k + 1)] + sums[at(i + 1, j + 1, k)] - sums[at(i + 1, j, k)];
                }
            }
        }
        Self { dims: v.dims(), sums }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.sums[i + (self.dims[0] + 1) * (j + (self.dims[1] + 1) * k)]
    }

    /// Sum over the inclusive cuboid `lo..=hi`, which must lie inside the volume.
    #[inline]
    pub fn cuboid_sum(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let (x0, y0, z0) = (lo[0], lo[1], lo[2]);
        let (x1, y1, z1) = (hi[0] + 1, hi[1] + 1, hi[2] + 1);
        self.at(x1, y1, z1) - self.at(x0, y1, z1) - self.at(x1, y0, z1) - self.at(x1, y1, z0)
            + self.at(x0, y0, z1)
            + self.at(x0, y1, z0)
            + self.at(x1, y0, z0)
            - self.at(x0, y0, z0)
    }

    /// Mean over the cuboid centred at `center + offset` with extents
    /// `±halfsize`, clamped to the volume. Returns 0 when nothing survives the
    /// clamp.
    #[inline]
    pub fn cuboid_mean(&self, center: [i64; 3], offset: [i64; 3], halfsize: [i64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        let mut count = 1usize;
        for a in 0..3 {
            let c = center[a] + offset[a];
            let h = halfsize[a].abs();
            let l = (c - h).max(0);
            let u = (c + h).min(self.dims[a] as i64 - 1);
            if l > u {
                return 0.0;
            }
            lo[a] = l as usize;
            hi[a] = u as usize;
            count *= (u - l + 1) as usize;
        }
        self.cuboid_sum(lo, hi) / count as f64
    }
}
