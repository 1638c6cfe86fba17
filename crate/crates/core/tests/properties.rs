//! Randomised invariants over the volume, metric and post-processing ops.

use proptest::prelude::*;

use lumbarseg::localizer::{invert_targets, make_targets};
use lumbarseg::metrics::{dice, DiceTarget};
use lumbarseg::postprocess::{close, component_sizes, dilate, erode, largest_components};
use lumbarseg::volume::{load_labels, save_labels, Axis, BoundingBox, Image2, IntegralVolume, LabelVolume, Volume};

fn dims() -> impl Strategy<Value = [usize; 3]> {
    (1usize..9, 1usize..9, 1usize..9).prop_map(|(a, b, c)| [a, b, c])
}

fn volume() -> impl Strategy<Value = Volume> {
    dims().prop_flat_map(|d| {
        prop::collection::vec(-100.0f64..100.0, d.iter().product::<usize>())
            .prop_map(move |data| Volume::new(d, [1.0, 1.5, 2.0], data).unwrap())
    })
}

fn labels() -> impl Strategy<Value = LabelVolume> {
    dims().prop_flat_map(|d| {
        prop::collection::vec(prop_oneof![4 => Just(0u8), 1 => 1u8..6], d.iter().product::<usize>())
            .prop_map(move |data| LabelVolume::new(d, [1.0; 3], data).unwrap())
    })
}

fn mask() -> impl Strategy<Value = Image2<bool>> {
    (1usize..14, 1usize..14).prop_flat_map(|(w, h)| {
        prop::collection::vec(prop::bool::weighted(0.3), w * h).prop_map(move |d| Image2::new(w, h, d).unwrap())
    })
}

fn subset(a: &Image2<bool>, b: &Image2<bool>) -> bool {
    a.data.iter().zip(&b.data).all(|(&x, &y)| !x || y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cuboid_sum_matches_direct_sum(v in volume(), a in any::<[u16; 3]>(), b in any::<[u16; 3]>()) {
        let d = v.dims();
        let lo: [usize; 3] = std::array::from_fn(|i| (a[i] as usize % d[i]).min(b[i] as usize % d[i]));
        let hi: [usize; 3] = std::array::from_fn(|i| (a[i] as usize % d[i]).max(b[i] as usize % d[i]));
        let mut want = 0.0;
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    want += v.get(i, j, k);
                }
            }
        }
        let got = IntegralVolume::new(&v).cuboid_sum(lo, hi);
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
    }

    #[test]
    fn slice_extract_insert_round_trip(v in volume(), axis in 0usize..3, at in any::<u16>()) {
        let axis = Axis::ALL[axis];
        let index = at as usize % v.dims()[axis.fixed()];
        let img = v.extract_slice(axis, index).unwrap();
        let mut w = Volume::filled(v.dims(), v.spacing(), 0.0).unwrap();
        w.insert_slice(axis, index, &img).unwrap();
        prop_assert_eq!(w.extract_slice(axis, index).unwrap(), img);
    }

    #[test]
    fn targets_round_trip(voxel in any::<[u8; 3]>(), planes in any::<[i8; 6]>()) {
        let p = planes.map(i64::from);
        let b = BoundingBox::new((p[0].min(p[1]), p[0].max(p[1])), (p[2].min(p[3]), p[2].max(p[3])), (p[4].min(p[5]), p[4].max(p[5])));
        let voxel = voxel.map(usize::from);
        let back = invert_targets(&make_targets(voxel, &b), voxel);
        for (got, want) in back.iter().zip(b.planes()) {
            prop_assert!((got - want as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn expanded_box_contains_original(p in any::<[u8; 6]>(), tol in 0i64..20) {
        let d = [40usize, 40, 40];
        let c = |a: u8, b: u8| ((a % 40) as i64, (b % 40) as i64);
        let (x, y, z) = (c(p[0], p[1]), c(p[2], p[3]), c(p[4], p[5]));
        let b = BoundingBox::new((x.0.min(x.1), x.0.max(x.1)), (y.0.min(y.1), y.0.max(y.1)), (z.0.min(z.1), z.0.max(z.1)));
        let e = b.expand(tol, d);
        prop_assert!(e.contains_box(&b));
        prop_assert!(BoundingBox::whole(d).contains_box(&e));
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in labels(), seed in any::<u64>()) {
        // second volume: same shape, labels permuted by the seed
        let b = a.map(|v| if v == 0 { (seed % 6) as u8 } else { (v + (seed % 5) as u8) % 6 }).unwrap();
        for t in [DiceTarget::Lumbar, DiceTarget::Label(1), DiceTarget::Label(5)] {
            let (ab, ba) = (dice(&a, &b, t).unwrap(), dice(&b, &a, t).unwrap());
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=100.0).contains(&ab));
            prop_assert_eq!(dice(&a, &a, t).unwrap(), 100.0);
        }
    }

    #[test]
    fn largest_components_is_idempotent_subset(l in labels()) {
        let once = largest_components(&l);
        for (&o, &i) in once.data().iter().zip(l.data()) {
            prop_assert!(o == 0 || o == i);
        }
        for label in 1..=5u8 {
            prop_assert!(component_sizes(&once, label).len() <= 1);
        }
        prop_assert_eq!(largest_components(&once), once);
    }

    #[test]
    fn morphology_orders(m in mask(), r in 1usize..4) {
        let c = close(&m, r);
        prop_assert!(subset(&erode(&m, r), &m));
        prop_assert!(subset(&m, &dilate(&m, r)));
        prop_assert!(subset(&m, &c));
        prop_assert_eq!(close(&c, r), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn label_files_round_trip(l in labels()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.mhd");
        save_labels(&l, &path).unwrap();
        prop_assert_eq!(load_labels(&path).unwrap(), l);
    }
}
