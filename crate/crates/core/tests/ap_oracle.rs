// Average precision against a brute-force recount that enumerates every
// confidence cutoff, plus a hand-derived multi-class example.

use sim2real_core::eval::{average_precision, mean_average_precision, ClassMatches};
use sim2real_core::geometry::BBox;
use sim2real_core::loss::Detection;
use sim2real_core::rng::Rng;
use sim2real_testkit::brute_force_ap;

fn random_matches(rng: &mut Rng) -> ClassMatches {
    let gt_count = rng.below(5) as usize;
    let n = rng.below(7) as usize;
    let mut tp_left = gt_count;
    let detections = (0..n)
        .map(|_| {
            // Quantized confidences provoke ties, the worst case for
            // sort-order agreement between the two implementations.
            let conf = (1 + rng.below(10)) as f64 / 10.0;
            let tp = tp_left > 0 && rng.uniform() < 0.5;
            if tp {
                tp_left -= 1;
            }
            (conf, tp)
        })
        .collect();
    ClassMatches {
        gt_count,
        detections,
    }
}

#[test]
fn ap_is_bit_identical_to_cutoff_enumeration() {
    let mut rng = Rng::new(0xAC);
    for round in 0..500 {
        let m = random_matches(&mut rng);
        let fast = average_precision(&m);
        let slow = brute_force_ap(m.gt_count, &m.detections);
        assert!(
            fast == slow || (fast.is_nan() && slow.is_nan()),
            "round {round}: fast {fast} vs brute force {slow} on {m:?}"
        );
    }
}

#[test]
fn relabeling_a_fp_as_tp_never_decreases_ap() {
    let mut rng = Rng::new(0xAD);
    let mut flips = 0;
    while flips < 200 {
        let mut m = random_matches(&mut rng);
        let tp_used = m.detections.iter().filter(|d| d.1).count();
        let fp_at = m.detections.iter().position(|d| !d.1);
        let (Some(at), true) = (fp_at, tp_used < m.gt_count) else {
            continue;
        };
        let before = average_precision(&m);
        m.detections[at].1 = true;
        let after = average_precision(&m);
        assert!(
            after >= before - 1e-12,
            "AP fell from {before} to {after} on {m:?}"
        );
        flips += 1;
    }
}

#[test]
fn three_class_toy_matches_hand_derivation() {
    let at = |cx: f64, cy: f64| BBox {
        cx,
        cy,
        w: 0.2,
        h: 0.2,
    };
    let det = |class: usize, bbox: BBox, confidence: f64| Detection {
        class,
        bbox,
        confidence,
    };
    let gts = vec![
        vec![(0usize, at(0.3, 0.3)), (1, at(0.7, 0.7))],
        vec![(0, at(0.5, 0.5))],
    ];
    let dets = vec![
        vec![
            det(0, at(0.3, 0.3), 0.9),
            det(0, at(0.85, 0.15), 0.6),
            det(1, at(0.7, 0.7), 0.8),
        ],
        vec![det(0, at(0.1, 0.9), 0.7), det(2, at(0.4, 0.4), 0.5)],
    ];
    let report = mean_average_precision(&dets, &gts, 0.5, 3).unwrap();
    // Class 0: TP at 0.9, then two FPs; 2 gts -> envelope 1.0 up to recall
    // 0.5, nothing beyond -> AP 0.5. Class 1: single TP -> AP 1. Class 2 has
    // no ground truth and stays out of the mean.
    assert!((report.per_class_ap[0].unwrap() - 0.5).abs() < 1e-12);
    assert!((report.per_class_ap[1].unwrap() - 1.0).abs() < 1e-12);
    assert!(report.per_class_ap[2].is_none());
    assert!((report.map - 0.75).abs() < 1e-12);
}

#[test]
fn pooled_evaluation_is_invariant_to_image_partitioning() {
    // Splitting the same detections across images differently must not move
    // the report: matching is per image, but AP pools per class.
    let b = |cx: f64| BBox {
        cx,
        cy: 0.5,
        w: 0.2,
        h: 0.2,
    };
    let d = |cx: f64, conf: f64| Detection {
        class: 0,
        bbox: b(cx),
        confidence: conf,
    };
    let one_image = mean_average_precision(
        &[vec![d(0.2, 0.9), d(0.8, 0.7)]],
        &[vec![(0usize, b(0.2)), (0, b(0.8))]],
        0.5,
        1,
    )
    .unwrap();
    let two_images = mean_average_precision(
        &[vec![d(0.2, 0.9)], vec![d(0.8, 0.7)]],
        &[vec![(0usize, b(0.2))], vec![(0, b(0.8))]],
        0.5,
        1,
    )
    .unwrap();
    assert_eq!(one_image.map, two_images.map);
    assert_eq!(one_image.per_class_ap, two_images.per_class_ap);
}
