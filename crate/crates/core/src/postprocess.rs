//! Label clean-up: per-slice coronal closing and 3D largest-component filtering.

use std::collections::VecDeque;

use crate::volume::{Axis, Image2, LabelVolume, NUM_LABELS};

/// Default closing radius in voxels.
pub const CLOSE_RADIUS: usize = 2;

/// Offsets of a digital disk of the given radius.
fn disk(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                v.push((dx, dy));
            }
        }
    }
    v
}

/// Binary dilation; pixels outside the image never contribute.
pub fn dilate(mask: &Image2<bool>, radius: usize) -> Image2<bool> {
    let se = disk(radius);
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut out = Image2::filled(mask.width, mask.height, false);
    for r in 0..h {
        for c in 0..w {
            if !mask.get(c as usize, r as usize) {
                continue;
            }
            for &(dx, dy) in &se {
                let (x, y) = (c + dx, r + dy);
                if x >= 0 && y >= 0 && x < w && y < h {
                    out.set(x as usize, y as usize, true);
                }
            }
        }
    }
    out
}

/// Binary erosion; only in-image neighbours are required to be set, so the
/// closing built from it never shrinks a mask touching the border.
pub fn erode(mask: &Image2<bool>, radius: usize) -> Image2<bool> {
    let se = disk(radius);
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut out = Image2::filled(mask.width, mask.height, false);
    for r in 0..h {
        for c in 0..w {
            let keep = se.iter().all(|&(dx, dy)| {
                let (x, y) = (c + dx, r + dy);
                x < 0 || y < 0 || x >= w || y >= h || mask.get(x as usize, y as usize)
            });
            out.set(c as usize, r as usize, keep);
        }
    }
    out
}

pub fn close(mask: &Image2<bool>, radius: usize) -> Image2<bool> {
    erode(&dilate(mask, radius), radius)
}

/// Closes every lumbar label independently in each coronal slice. Where the
/// closed masks overlap the smaller label wins.
pub fn coronal_close(l: &LabelVolume, radius: usize) -> LabelVolume {
    let radius = radius.max(1);
    let mut out = l.clone();
    let [_, ny, _] = l.dims();
    for y in 0..ny {
        let slice = l.extract_slice(Axis::Coronal, y).expect("index in range");
        let mut merged = Image2::filled(slice.width, slice.height, 0u8);
        for k in (1..NUM_LABELS).rev() {
            if !slice.data.contains(&k) {
                continue;
            }
            let mask = Image2 {
                width: slice.width,
                height: slice.height,
                data: slice.data.iter().map(|&v| v == k).collect(),
            };
            for (m, &set) in merged.data.iter_mut().zip(&close(&mask, radius).data) {
                if set {
                    *m = k;
                }
            }
        }
        out.insert_slice(Axis::Coronal, y, &merged).expect("same shape");
    }
    out
}

const N26: [[i64; 3]; 26] = {
    let mut n = [[0i64; 3]; 26];
    let mut idx = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if dx != 0 || dy != 0 || dz != 0 {
                    n[idx] = [dx, dy, dz];
                    idx += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    n
};

/// 26-connected components of one label, each as a list of linear indices,
/// in order of their lowest index.
pub fn components(l: &LabelVolume, label: u8) -> Vec<Vec<usize>> {
    let [nx, ny, nz] = l.dims();
    let data = l.data();
    let mut seen = vec![false; data.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..data.len() {
        if data[seed] != label || seen[seed] {
            continue;
        }
        seen[seed] = true;
        queue.push_back(seed);
        let mut comp = Vec::new();
        while let Some(idx) = queue.pop_front() {
            comp.push(idx);
            let [i, j, k] = l.coords(idx);
            for d in N26 {
                let (x, y, z) = (i as i64 + d[0], j as i64 + d[1], k as i64 + d[2]);
                if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                    continue;
                }
                let n = l.index(x as usize, y as usize, z as usize);
                if data[n] == label && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        out.push(comp);
    }
    out
}

pub fn component_sizes(l: &LabelVolume, label: u8) -> Vec<usize> {
    components(l, label).iter().map(Vec::len).collect()
}

/// Keeps only the largest 26-connected component of every nonzero label;
/// ties go to the component with the lowest seed index.
pub fn largest_components(l: &LabelVolume) -> LabelVolume {
    let mut data = l.data().to_vec();
    for k in 1..NUM_LABELS {
        let comps = components(l, k);
        let mut best = 0;
        for (i, c) in comps.iter().enumerate() {
            if c.len() > comps[best].len() {
                best = i;
            }
        }
        for (i, c) in comps.iter().enumerate() {
            if i != best {
                for &idx in c {
                    data[idx] = 0;
                }
            }
        }
    }
    LabelVolume::new(l.dims(), l.spacing(), data).expect("labels copied from a valid volume")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(w: usize, h: usize, mut f: impl FnMut(i64, i64) -> bool) -> Image2<bool> {
        let mut m = Image2::filled(w, h, false);
        for r in 0..h {
            for c in 0..w {
                m.set(c, r, f(c as i64, r as i64));
            }
        }
        m
    }

    // direct set-theoretic closing on an unbounded plane restricted to the image
    fn brute_close(m: &Image2<bool>, r: i64) -> Image2<bool> {
        let (w, h) = (m.width as i64, m.height as i64);
        let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w && y < h;
        let dil = |x: i64, y: i64| {
            (-r..=r).any(|dy| {
                (-r..=r).any(|dx| {
                    dx * dx + dy * dy <= r * r && inside(x - dx, y - dy) && m.get((x - dx) as usize, (y - dy) as usize)
                })
            })
        };
        mask_from(m.width, m.height, |x, y| {
            (-r..=r).all(|dy| {
                (-r..=r).all(|dx| dx * dx + dy * dy > r * r || !inside(x + dx, y + dy) || dil(x + dx, y + dy))
            })
        })
    }

    #[test]
    fn hole_in_disk_is_filled() {
        let m = mask_from(16, 16, |x, y| {
            (x - 8).pow(2) + (y - 8).pow(2) <= 25 && !(x == 8 && y == 8)
        });
        let c = close(&m, 2);
        assert!(c.get(8, 8));
        assert_eq!(c, brute_close(&m, 2));
        let solid = mask_from(16, 16, |x, y| (x - 8).pow(2) + (y - 8).pow(2) <= 25);
        assert_eq!(close(&solid, 2), solid);
    }

    #[test]
    fn closing_matches_brute_force_on_random_masks() {
        use rand::Rng;
        let mut r = crate::rng::seeded(3);
        for _ in 0..20 {
            let m = mask_from(16, 16, |_, _| r.gen_bool(0.4));
            let c = close(&m, 2);
            assert_eq!(c, brute_close(&m, 2));
            assert_eq!(close(&c, 2), c);
        }
    }

    #[test]
    fn coronal_close_background_and_alphabet() {
        let empty = LabelVolume::filled([8, 8, 8], [1.0; 3], 0).unwrap();
        assert_eq!(coronal_close(&empty, 2), empty);
        let l = LabelVolume::from_fn([12, 4, 12], [1.0; 3], |i, _, k| {
            if (3..9).contains(&i) && (2..5).contains(&k) && !(i == 5 && k == 3) {
                2
            } else {
                0
            }
        })
        .unwrap();
        let c = coronal_close(&l, 2);
        assert_eq!(c.get(5, 0, 3), 2);
        assert!(c.data().iter().all(|&v| v == 0 || v == 2));
        assert_eq!(coronal_close(&c, 2), c);
    }

    #[test]
    fn small_blob_is_erased() {
        let l = LabelVolume::from_fn([16, 16, 16], [1.0; 3], |i, j, k| {
            if i < 5 && j < 5 && k < 4 {
                3 // 100 voxels
            } else if i >= 12 && j >= 12 && k >= 12 && i < 13 && k < 13 {
                3 // 4 voxels
            } else {
                0
            }
        })
        .unwrap();
        assert_eq!(component_sizes(&l, 3), vec![100, 4]);
        let c = largest_components(&l);
        assert_eq!(component_sizes(&c, 3), vec![100]);
        assert_eq!(largest_components(&c), c);
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let l = LabelVolume::from_fn([4, 4, 4], [1.0; 3], |i, j, k| u8::from(i == j && j == k)).unwrap();
        assert_eq!(component_sizes(&l, 1), vec![4]);
    }

    #[test]
    fn ties_keep_lowest_seed() {
        let l = LabelVolume::from_fn([9, 1, 1], [1.0; 3], |i, _, _| if i == 1 || i == 7 { 4 } else { 0 }).unwrap();
        let c = largest_components(&l);
        assert_eq!(c.get(1, 0, 0), 4);
        assert_eq!(c.get(7, 0, 0), 0);
    }
}
