use slidestitch::imagecore::{warp, ImageBuffer, Interp, Rect, Transform2D, TransformModel};
use slidestitch::registration::{register_images, RansacParams};
use slidestitch::synthgen::render_slide;

fn view(slide: &ImageBuffer, t: &Transform2D) -> ImageBuffer {
    warp(slide, &t.invert().unwrap(), Rect::new(0, 0, 400, 300), Interp::Bilinear)
        .unwrap()
        .image
}

/// Frames related by a known similarity: `b = a` moved by `(dx, dy)` and rotated by `theta`.
fn pair(seed: u64, dx: f64, dy: f64, theta: f64) -> (ImageBuffer, ImageBuffer, Transform2D) {
    let slide = render_slide(900, 700, seed);
    let ta = Transform2D::translation(150.0, 120.0);
    let tb = ta.compose(&Transform2D::similarity(1.0, theta, dx, dy));
    (view(&slide, &ta), view(&slide, &tb), tb)
}

#[test]
fn forward_and_backward_estimates_compose_to_identity() {
    let params = RansacParams::default();
    for k in 0..10u64 {
        let (dx, dy) = (40.0 + 9.0 * k as f64, -25.0 + 6.0 * k as f64);
        let (a, b, _) = pair(200 + k, dx, dy, 0.01 * (k as f64 - 5.0));
        let ab = register_images(&a, &b, TransformModel::Similarity, 1500, &params).unwrap();
        let ba = register_images(&b, &a, TransformModel::Similarity, 1500, &params).unwrap();
        let round = ab.transform.compose(&ba.transform);
        let mut total = 0.0;
        let mut n = 0.0;
        for y in (0..300).step_by(30) {
            for x in (0..400).step_by(40) {
                let (u, v) = round.apply(x as f64, y as f64);
                total += ((u - x as f64).powi(2) + (v - y as f64).powi(2)).sqrt();
                n += 1.0;
            }
        }
        assert!(total / n < 0.5, "pair {k}: mean round-trip error {:.3} px", total / n);
    }
}

#[test]
fn known_similarity_is_recovered() {
    let (a, b, tb) = pair(7, 60.0, 35.0, 0.03);
    let ta = Transform2D::translation(150.0, 120.0);
    // b's pixels into a's frame
    let truth = ta.invert().unwrap().compose(&tb);
    let r = register_images(&a, &b, TransformModel::Similarity, 1500, &RansacParams::default()).unwrap();
    for (x, y) in [(0.0, 0.0), (399.0, 0.0), (0.0, 299.0), (399.0, 299.0)] {
        let (p, q) = (r.transform.apply(x, y), truth.apply(x, y));
        assert!(((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() < 1.0, "corner ({x}, {y})");
    }
    assert!(r.inliers <= r.total_matches);
    assert!(r.rms_error <= RansacParams::default().inlier_threshold);
}
