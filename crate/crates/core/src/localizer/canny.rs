//! Three-dimensional Canny edge detection.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CannyParams {
    /// Gaussian smoothing scale in mm.
    pub sigma_mm: f64,
    /// Hysteresis thresholds as quantiles of the gradient magnitude.
    pub low: f64,
    pub high: f64,
}

impl Default for CannyParams {
    fn default() -> Self {
        Self {
            sigma_mm: 1.5,
            low: 0.7,
            high: 0.9,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders; `sigma` in voxels per axis.
pub fn smooth(v: &Volume, sigma: [f64; 3]) -> Vec<f64> {
    let dims = v.dims();
    let mut cur = v.data().to_vec();
    let stride = [1, dims[0], dims[0] * dims[1]];
    for a in 0..3 {
        let k = gaussian_kernel(sigma[a]);
        if k.len() == 1 {
            continue;
        }
        let r = (k.len() / 2) as i64;
        let n = dims[a] as i64;
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = ((idx / stride[a]) % dims[a]) as i64;
            let base = idx - pos as usize * stride[a];
            let mut acc = 0.0;
            for (t, &w) in k.iter().enumerate() {
                let p = (pos + t as i64 - r).clamp(0, n - 1) as usize;
                acc += w * cur[base + p * stride[a]];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Value of the `q` quantile (nearest rank on the sorted values).
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    let idx = ((q * (v.len() - 1) as f64).floor() as usize).min(v.len() - 1);
    let (_, x, _) = v.select_nth_unstable_by(idx, f64::total_cmp);
    *x
}

/// Edge voxels in raster order (x fastest).
pub fn canny_edges(v: &Volume, params: CannyParams) -> Result<Vec<[usize; 3]>> {
    if !(params.high > params.low && params.low > 0.0 && params.high < 1.0) {
        return Err(Error::Config(format!(
            "canny thresholds need 0 < low < high < 1, got {} / {}",
            params.low, params.high
        )));
    }
    let dims = v.dims();
    let sp = v.spacing();
    let s = smooth(v, std::array::from_fn(|a| params.sigma_mm / sp[a]));
    let stride = [1usize, dims[0], dims[0] * dims[1]];
    let n = s.len();

    let mut grad = vec![[0.0f64; 3]; n];
    let mut mag = vec![0.0f64; n];
    for idx in 0..n {
        let c = v.coords(idx);
        let mut g = [0.0; 3];
        for a in 0..3 {
            let lo = if c[a] > 0 { idx - stride[a] } else { idx };
            let hi = if c[a] + 1 < dims[a] { idx + stride[a] } else { idx };
            g[a] = 0.5 * (s[hi] - s[lo]);
        }
        mag[idx] = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        grad[idx] = g;
    }
    let low = quantile(&mag, params.low);
    let high = quantile(&mag, params.high);

    let neighbour = |idx: usize, d: [i64; 3]| -> Option<usize> {
        let c = v.coords(idx);
        let mut out = 0;
        for a in 0..3 {
            let p = c[a] as i64 + d[a];
            if p < 0 || p >= dims[a] as i64 {
                return None;
            }
            out += p as usize * stride[a];
        }
        Some(out)
    };

    // non-maximum suppression along the quantised gradient direction; the
    // strict/non-strict pair keeps exactly one voxel across a plateau
    let mut state = vec![0u8; n]; // 0 none, 1 weak, 2 strong
    for idx in 0..n {
        let m = mag[idx];
        if m <= 0.0 || m < low {
            continue;
        }
        let d: [i64; 3] = std::array::from_fn(|a| (grad[idx][a] / m).round() as i64);
        let fwd = neighbour(idx, d).map_or(0.0, |j| mag[j]);
        let back = neighbour(idx, [-d[0], -d[1], -d[2]]).map_or(0.0, |j| mag[j]);
        if m >= fwd && m > back {
            state[idx] = if m >= high { 2 } else { 1 };
        }
    }

    let mut keep = vec![false; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| state[i] == 2).collect();
    for &i in &queue {
        keep[i] = true;
    }
    while let Some(idx) = queue.pop_front() {
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    if let Some(j) = neighbour(idx, [dx, dy, dz]) {
                        if state[j] == 1 && !keep[j] {
                            keep[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    let edges: Vec<[usize; 3]> = (0..n).filter(|&i| keep[i]).map(|i| v.coords(i)).collect();
    if edges.is_empty() {
        return Err(Error::NoEdges);
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_volume_has_no_edges() {
        let v = Volume::filled([12, 12, 12], [1.0; 3], 300.0).unwrap();
        assert!(matches!(canny_edges(&v, CannyParams::default()), Err(Error::NoEdges)));
    }

    #[test]
    fn step_edge_is_localised() {
        let v = Volume::from_fn([16, 16, 16], [1.0; 3], |i, _, _| if i < 8 { 0.0 } else { 1000.0 }).unwrap();
        let e = canny_edges(&v, CannyParams::default()).unwrap();
        assert!(!e.is_empty());
        assert!(e.iter().all(|c| (c[0] as i64 - 8).abs() <= 1), "{e:?}");
        // the whole plane is found
        assert!(e.len() >= 16 * 16);
    }

    #[test]
    fn sphere_edges_lie_on_surface() {
        let (c, r) = (15.5, 9.0);
        let v = Volume::from_fn([32, 32, 32], [1.0; 3], |i, j, k| {
            let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt();
            if d <= r {
                800.0
            } else {
                100.0
            }
        })
        .unwrap();
        let e = canny_edges(&v, CannyParams::default()).unwrap();
        assert!(e.len() > 300);
        for p in e {
            let d = ((p[0] as f64 - c).powi(2) + (p[1] as f64 - c).powi(2) + (p[2] as f64 - c).powi(2)).sqrt();
            assert!((d - r).abs() <= 2.0, "{p:?} at distance {d}");
        }
    }

    #[test]
    fn smoothing_preserves_constants_and_mass() {
        let v = Volume::filled([5, 6, 7], [1.0; 3], 2.5).unwrap();
        assert!(smooth(&v, [1.5; 3]).iter().all(|x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_thresholds() {
        let v = Volume::filled([4, 4, 4], [1.0; 3], 0.0).unwrap();
        let p = CannyParams {
            low: 0.9,
            high: 0.7,
            ..CannyParams::default()
        };
        assert!(matches!(canny_edges(&v, p), Err(Error::Config(_))));
    }
}
