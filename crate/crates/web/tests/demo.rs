use lumbarseg::localizer::CannyParams;
use lumbarseg::phantom::{gen_phantom, PhantomConfig};
use lumbarseg::volume::{Axis, Window};
use lumbarseg_web::*;

#[test]
fn slices_have_rgba_layout_and_overlays() {
    let p = gen_phantom(&PhantomConfig::toy()).unwrap();
    let dims = p.image.dims();
    let x = dims[0] / 2;
    let plain = slice_rgba(&p.image, None, None, Axis::Sagittal, x, Window::default()).unwrap();
    let (w, h) = slice_size(dims, Axis::Sagittal);
    assert_eq!((w, h), (dims[1], dims[2]));
    assert_eq!(plain.len(), w * h * 4);
    assert!(plain
        .chunks(4)
        .all(|px| px[3] == 255 && px[0] == px[1] && px[1] == px[2]));
    let labelled = slice_rgba(&p.image, Some(&p.labels), None, Axis::Sagittal, x, Window::default()).unwrap();
    assert!(labelled.chunks(4).any(|px| px[0] != px[1] || px[1] != px[2]));
}

#[test]
fn slice_is_drawn_superior_side_up() {
    let p = gen_phantom(&PhantomConfig::toy()).unwrap();
    let dims = p.image.dims();
    let x = dims[0] / 2;
    let rgba = slice_rgba(&p.image, None, None, Axis::Sagittal, x, Window::default()).unwrap();
    let (w, h) = slice_size(dims, Axis::Sagittal);
    for (j, k) in [(0, 0), (5, 7), (w - 1, h - 1)] {
        let expected = (Window::default().apply(p.image.get(x, j, k)) * 255.0).round() as u8;
        assert_eq!(rgba[4 * ((h - 1 - k) * w + j)], expected);
    }
}

#[test]
fn edges_are_found_and_drawn() {
    let p = gen_phantom(&PhantomConfig::toy()).unwrap();
    let mask = edge_mask(&p.image, Window::default(), CannyParams::default()).unwrap();
    assert!(mask.iter().filter(|&&e| e).count() > 100);
    let x = p.image.dims()[0] / 2;
    let rgba = slice_rgba(&p.image, None, Some(&mask), Axis::Sagittal, x, Window::default()).unwrap();
    assert!(rgba.chunks(4).any(|px| px[..3] == EDGE_COLOUR));
}

#[test]
fn kde_curve_integrates_to_one() {
    let s = mixture_samples(500, 0.2, 8.0, 3);
    let (xs, ys) = kde_curve(&s, 0.4, 2000);
    let area: f64 = xs
        .windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum();
    assert!((area - 1.0).abs() < 1e-3, "{area}");
}

#[test]
fn mixture_is_seeded() {
    assert_eq!(mixture_samples(50, 0.3, 5.0, 9), mixture_samples(50, 0.3, 5.0, 9));
    assert_ne!(mixture_samples(50, 0.3, 5.0, 9), mixture_samples(50, 0.3, 5.0, 10));
    let far = mixture_samples(2000, 0.25, 40.0, 1)
        .iter()
        .filter(|&&v| v > 20.0)
        .count();
    assert!((400..600).contains(&far), "{far}");
}

#[test]
fn views_work_natively() {
    let mut v = PhantomView::new(4, 0.0, 0.0, false).unwrap();
    let d = v.dims();
    assert_eq!(d.len(), 3);
    assert_eq!((v.width(1), v.height(1)), (d[0], d[2]));
    assert!(v.detect_edges(1.5, 0.7, 0.9).unwrap() > 0);
    let px = v.render(2, d[2] / 2, true, true).unwrap();
    assert_eq!(px.len() as u32, d[0] * d[1] * 4);

    let k = KdeView::new(1000, 0.2, 10.0, 1.0, 5).unwrap();
    assert!(k.mode().abs() < 0.3);
    assert!(k.botev() > 0.0 && k.silverman() > 0.0);
    assert_eq!(k.xs().len(), k.density().len());
}
