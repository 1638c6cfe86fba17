//! One-dimensional kernel density estimation with the diffusion (Botev)
//! bandwidth selector, and plane-vote aggregation built on it.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Minimum sample count for a data-driven bandwidth.
pub const MIN_SAMPLES: usize = 16;
const HIST_BINS: usize = 1 << 14;
const GRID_POINTS: usize = 1024;

/// Silverman's rule of thumb, 1.06 σ n^(-1/5) with the population σ.
pub fn silverman(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    1.06 * var.sqrt() * n.powf(-0.2)
}

/// Type-II DCT up to scaling, computed with one complex FFT of the
/// even/odd-reordered input.
fn dct(data: &[f64]) -> Vec<f64> {
    let n = data.len();
    let mut buf: Vec<Complex<f64>> = data
        .iter()
        .step_by(2)
        .chain(data.iter().skip(1).step_by(2).rev())
        .map(|&v| Complex::new(v, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf.iter()
        .enumerate()
        .map(|(k, c)| {
            let w = if k == 0 {
                Complex::new(1.0, 0.0)
            } else {
                Complex::from_polar(2.0, -(k as f64) * PI / (2.0 * n as f64))
            };
            (w * c).re
        })
        .collect()
}

struct FixedPoint {
    /// Squared frequencies 1..n-1.
    i: Vec<f64>,
    a2: Vec<f64>,
    n: f64,
}

impl FixedPoint {
    fn functional(&self, s: i32, t: f64) -> f64 {
        let sum: f64 = self
            .i
            .iter()
            .zip(&self.a2)
            .map(|(&i, &a)| i.powi(s) * a * (-i * PI * PI * t).exp())
            .sum();
        2.0 * PI.powi(2 * s) * sum
    }

    /// t minus the bandwidth implied by plugging t into the functional chain.
    fn eval(&self, t: f64) -> f64 {
        let l = 7;
        let mut f = self.functional(l, t);
        for s in (2..l).rev() {
            let k0 = (1..=s).map(|j| (2 * j - 1) as f64).product::<f64>() / (2.0 * PI).sqrt();
            let c = (1.0 + 0.5f64.powf(s as f64 + 0.5)) / 3.0;
            let time = (2.0 * c * k0 / self.n / f).powf(2.0 / (3.0 + 2.0 * s as f64));
            f = self.functional(s, time);
        }
        t - (2.0 * self.n * PI.sqrt() * f).powf(-0.4)
    }
}

/// Bisection on a sign-changing bracket.
fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> Option<f64> {
    let (mut flo, fhi) = (f(lo), f(hi));
    if !(flo.is_finite() && fhi.is_finite()) || flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if !fm.is_finite() {
            return None;
        }
        if fm == 0.0 || hi - lo <= 1e-15 * hi.abs().max(1e-300) {
            return Some(mid);
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Gaussian-kernel bandwidth from the diffusion fixed point on a 2^14-bin
/// histogram, falling back to Silverman's rule when no root is bracketed.
pub fn botev_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidVolume("non-finite sample".into()));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Err(Error::ZeroSpread);
    }
    let range = hi - lo;
    let (min, max) = (lo - range / 10.0, hi + range / 10.0);
    let r = max - min;
    let dx = r / (HIST_BINS - 1) as f64;

    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let unique = sorted.len() as f64;

    let mut hist = vec![0.0; HIST_BINS];
    for &x in samples {
        let b = (((x - min) / dx).floor() as usize).min(HIST_BINS - 1);
        hist[b] += 1.0;
    }
    let total: f64 = hist.iter().sum();
    hist.iter_mut().for_each(|h| *h /= total);

    let a = dct(&hist);
    let fp = FixedPoint {
        i: (1..HIST_BINS).map(|k| (k * k) as f64).collect(),
        a2: a[1..].iter().map(|v| (v / 2.0) * (v / 2.0)).collect(),
        n: unique,
    };
    let n = unique.clamp(50.0, 1050.0);
    let mut tol = 1e-12 + 0.01 * (n - 50.0) / 1000.0;
    loop {
        if let Some(t) = bisect(|t| fp.eval(t), 0.0, tol) {
            if t > 0.0 {
                return Ok(t.sqrt() * r);
            }
        }
        if tol >= 0.1 {
            return Ok(silverman(samples));
        }
        tol = (tol * 2.0).min(0.1);
    }
}

fn density(samples: &[f64], h: f64, x: f64) -> f64 {
    let inv = 1.0 / (2.0 * h * h);
    samples.iter().map(|&s| (-(x - s) * (x - s) * inv).exp()).sum()
}

/// Location of the highest Gaussian-KDE density: grid argmax then a
/// golden-section refinement between the neighbouring grid points.
pub fn kde_mode(samples: &[f64], h: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if !(h > 0.0) {
        return Err(Error::Config(format!("bandwidth must be positive, got {h}")));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let mut best = (0, f64::NEG_INFINITY);
    for g in 0..GRID_POINTS {
        let d = density(samples, h, lo + g as f64 * step);
        if d > best.1 {
            best = (g, d);
        }
    }
    let mut a = lo + best.0.saturating_sub(1) as f64 * step;
    let mut b = lo + (best.0 + 1).min(GRID_POINTS - 1) as f64 * step;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (density(samples, h, c), density(samples, h, d));
    for _ in 0..80 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = density(samples, h, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = density(samples, h, d);
        }
    }
    let refined = 0.5 * (a + b);
    // never return a point worse than the grid winner
    Ok(if density(samples, h, refined) >= best.1 {
        refined
    } else {
        lo + best.0 as f64 * step
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Representative value of one plane's votes as `(anchor, offset)` with an
/// integer anchor: KDE mode, or the median when there are too few votes.
/// Working relative to the anchor keeps integer shifts of the votes exact.
fn plane_mode_parts(votes: &[f64]) -> Result<(f64, f64)> {
    if votes.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let anchor = votes.iter().copied().fold(f64::INFINITY, f64::min).floor();
    let mut rel: Vec<f64> = votes.iter().map(|v| v - anchor).collect();
    rel.sort_by(f64::total_cmp);
    if rel[0] == rel[rel.len() - 1] {
        return Ok((anchor, rel[0]));
    }
    if rel.len() < MIN_SAMPLES {
        return Ok((anchor, median(&rel)));
    }
    let h = botev_bandwidth(&rel)?;
    Ok((anchor, kde_mode(&rel, h)?))
}

pub fn plane_mode(votes: &[f64]) -> Result<f64> {
    let (a, r) = plane_mode_parts(votes)?;
    Ok(a + r)
}

/// Rounds a plane position to an index; exact halves move the plane outward.
pub fn round_plane(value: f64, is_min: bool) -> i64 {
    let anchor = value.floor();
    let frac = value - anchor;
    let up = if is_min { frac > 0.5 } else { frac >= 0.5 };
    anchor as i64 + i64::from(up)
}

/// Six independent plane estimates, rounded and reordered so min <= max.
pub fn aggregate_planes(votes: &[Vec<f64>; 6]) -> Result<[i64; 6]> {
    let mut p = [0i64; 6];
    for (c, v) in votes.iter().enumerate() {
        let (anchor, rel) = plane_mode_parts(v)?;
        p[c] = anchor as i64 + round_plane(rel, c % 2 == 0);
    }
    for a in 0..3 {
        if p[2 * a] > p[2 * a + 1] {
            p.swap(2 * a, 2 * a + 1);
        }
    }
    Ok(p)
}
