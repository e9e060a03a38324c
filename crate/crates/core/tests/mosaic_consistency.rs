// Mosaic composition: quadrant geometry, pixel provenance, annotation
// remapping, and determinism.

use sim2real_core::rng::Rng;
use sim2real_core::synth::{
    self, generate_scene, mosaic, mosaic_with_pivot, quadrant_affines, DomainProfile, Scene,
};
use sim2real_core::tensor::Tensor;

fn uniform_scene(r: f32, g: f32, b: f32, size: usize) -> Scene {
    let mut image = Tensor::zeros(&[size, size, 3]);
    for px in image.data.chunks_mut(3) {
        px[0] = r;
        px[1] = g;
        px[2] = b;
    }
    Scene {
        image,
        annotations: Vec::new(),
        seed: 0,
    }
}

#[test]
fn quadrant_affines_tile_the_unit_square() {
    let a = quadrant_affines(0.4, 0.65);
    // Rows: top-left, top-right, bottom-left, bottom-right.
    assert_eq!(a[0].scale_x + a[1].scale_x, 1.0);
    assert_eq!(a[2].scale_x + a[3].scale_x, 1.0);
    assert_eq!(a[0].scale_y + a[2].scale_y, 1.0);
    assert_eq!(a[1].scale_y + a[3].scale_y, 1.0);
    assert_eq!((a[1].offset_x, a[1].offset_y), (0.4, 0.0));
    assert_eq!((a[2].offset_x, a[2].offset_y), (0.0, 0.65));
    assert_eq!((a[3].offset_x, a[3].offset_y), (0.4, 0.65));
    for q in &a {
        assert!(q.scale_x > 0.0 && q.scale_y > 0.0);
    }
}

#[test]
fn uniform_scenes_color_their_exact_quadrants() {
    let size = 40;
    let scenes = [
        uniform_scene(0.1, 0.0, 0.0, 24),
        uniform_scene(0.0, 0.2, 0.0, 24),
        uniform_scene(0.0, 0.0, 0.3, 24),
        uniform_scene(0.4, 0.4, 0.0, 24),
    ];
    // Pivot 0.39 puts the cut between pixel centers: columns 0..=15 are
    // left of it, 16..=39 right; rows split at 23/24 for 0.61.
    let composed = mosaic_with_pivot(&scenes, 0.39, 0.61, size, 1);
    for y in 0..size {
        for x in 0..size {
            let q = match (x <= 15, y <= 23) {
                (true, true) => 0,
                (false, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
            };
            let want = [
                scenes[q].image.data[0],
                scenes[q].image.data[1],
                scenes[q].image.data[2],
            ];
            for (c, &w) in want.iter().enumerate() {
                let got = composed.image.data[composed.image.idx3(y, x, c)];
                assert_eq!(got, w, "pixel ({x},{y}) channel {c}");
            }
        }
    }
}

#[test]
fn mosaic_is_deterministic() {
    let profile = DomainProfile::neutral();
    let scenes = [
        generate_scene(120, &profile, 3, 3, 32).unwrap(),
        generate_scene(121, &profile, 3, 3, 32).unwrap(),
        generate_scene(122, &profile, 3, 3, 32).unwrap(),
        generate_scene(123, &profile, 3, 3, 32).unwrap(),
    ];
    let a = mosaic(&scenes, 55, 48);
    let b = mosaic(&scenes, 55, 48);
    assert_eq!(a.image.data, b.image.data);
    assert_eq!(a.annotations, b.annotations);
    let c = mosaic(&scenes, 56, 48);
    assert!(
        a.image.data != c.image.data || a.annotations != c.annotations,
        "different seed should move the pivot"
    );
}

#[test]
fn surviving_annotations_invert_onto_their_sources() {
    let profile = DomainProfile::neutral();
    for m in 0..30u64 {
        let scene = |i: u64| generate_scene(500 + m * 4 + i, &profile, 3, 3, 32).unwrap();
        let scenes = [scene(0), scene(1), scene(2), scene(3)];
        let seed = 4400 + m;
        let composed = mosaic(&scenes, seed, 32);
        // The pivot draw is the first thing the mosaic seed feeds, so it can
        // be replayed here.
        let mut r = Rng::new(seed);
        let px = r.uniform_range(0.25, 0.75);
        let py = r.uniform_range(0.25, 0.75);
        let affines = quadrant_affines(px, py);
        let mut at = 0usize;
        for (q, src_scene) in scenes.iter().enumerate() {
            let a = &affines[q];
            for &(class, src) in &src_scene.annotations {
                let x1 = a.offset_x + src.x1() * a.scale_x;
                let x2 = a.offset_x + src.x2() * a.scale_x;
                let y1 = a.offset_y + src.y1() * a.scale_y;
                let y2 = a.offset_y + src.y2() * a.scale_y;
                let cx1 = x1.max(a.offset_x);
                let cx2 = x2.min(a.offset_x + a.scale_x);
                let cy1 = y1.max(a.offset_y);
                let cy2 = y2.min(a.offset_y + a.scale_y);
                if cx2 <= cx1 || cy2 <= cy1 {
                    continue;
                }
                if (cx2 - cx1) * (cy2 - cy1) < 0.2 * (x2 - x1) * (y2 - y1) {
                    continue;
                }
                let (got_class, got) = composed.annotations[at];
                at += 1;
                assert_eq!(got_class, class);
                assert!(got.w > 0.0 && got.h > 0.0);
                let inv_x1 = (got.x1() - a.offset_x) / a.scale_x;
                let inv_x2 = (got.x2() - a.offset_x) / a.scale_x;
                let inv_y1 = (got.y1() - a.offset_y) / a.scale_y;
                let inv_y2 = (got.y2() - a.offset_y) / a.scale_y;
                let err = (inv_x1 - src.x1().max(0.0))
                    .abs()
                    .max((inv_x2 - src.x2().min(1.0)).abs())
                    .max((inv_y1 - src.y1().max(0.0)).abs())
                    .max((inv_y2 - src.y2().min(1.0)).abs());
                assert!(err < 1e-6, "mosaic {m} quadrant {q}: drift {err:.2e}");
            }
        }
        assert_eq!(at, composed.annotations.len());
    }
}

#[test]
fn pivot_distribution_stays_in_band() {
    let scenes = [
        uniform_scene(0.5, 0.5, 0.5, 16),
        uniform_scene(0.5, 0.5, 0.5, 16),
        uniform_scene(0.5, 0.5, 0.5, 16),
        uniform_scene(0.5, 0.5, 0.5, 16),
    ];
    for seed in 0..50 {
        let _ = synth::mosaic(&scenes, seed, 16);
        let mut r = Rng::new(seed);
        let px = r.uniform_range(0.25, 0.75);
        let py = r.uniform_range(0.25, 0.75);
        assert!((0.25..0.75).contains(&px));
        assert!((0.25..0.75).contains(&py));
    }
}
