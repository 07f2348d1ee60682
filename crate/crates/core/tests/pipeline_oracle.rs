//! Coordinate-map oracle: the implementation must agree with a from-scratch
//! reference evaluation to 1e-12, and the map invariants must hold for
//! arbitrary crops.

use proptest::prelude::*;
use stereoface::facegen::IRect;
use stereoface::pipeline::{coord_map, normalize_coord};
use stereoface::rng::stream_rng;

/// Straightforward reference: for each crop pixel, compute the source
/// position the bilinear resampling convention uses, then normalize by the
/// scene diagonal. Written independently of the implementation.
fn reference_map(bbox: IRect, frame: usize, w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let diag = ((w * w + h * h) as f64).sqrt();
    let mut xs = Vec::with_capacity(frame * frame);
    let mut ys = Vec::with_capacity(frame * frame);
    for v in 0..frame {
        for u in 0..frame {
            let i = bbox.x as f64 + (u as f64 + 0.5) * (bbox.side as f64 / frame as f64) - 0.5;
            let j = bbox.y as f64 + (v as f64 + 0.5) * (bbox.side as f64 / frame as f64) - 0.5;
            xs.push((i - w as f64 / 2.0) / diag);
            ys.push((j - h as f64 / 2.0) / diag);
        }
    }
    (xs, ys)
}

#[test]
fn coord_map_matches_reference_on_1000_random_cases() {
    use rand::Rng;
    let started = std::time::Instant::now();
    let mut rng = stream_rng(2024, 0, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let w = rng.random_range(32..2048usize);
        let h = rng.random_range(32..2048usize);
        let side = rng.random_range(4..=w.min(h));
        let x = rng.random_range(0..=w - side);
        let y = rng.random_range(0..=h - side);
        let frame = rng.random_range(4..64usize);
        let bbox = IRect { x, y, side };
        let got = coord_map(bbox, frame, w, h);
        let (rx, ry) = reference_map(bbox, frame, w, h);
        for (a, b) in got.x.iter().zip(&rx).chain(got.y.iter().zip(&ry)) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-12, "worst deviation {worst:e}");
    assert!(started.elapsed().as_secs_f64() < 1.0, "oracle ran in {:?}", started.elapsed());
}

#[test]
fn zero_centering_case_is_exact() {
    let (i, j) = normalize_coord(960.0, 540.0, 1920, 1080);
    assert_eq!(i, 0.0);
    assert_eq!(j, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coord_map_invariants_hold_for_arbitrary_crops(
        w in 16usize..1024,
        h in 16usize..1024,
        frame in 4usize..48,
        seed in 0u64..1000,
    ) {
        use rand::Rng;
        let mut rng = stream_rng(seed, 7, 7);
        let side = rng.random_range(4..=w.min(h));
        let x = rng.random_range(0..=w - side);
        let y = rng.random_range(0..=h - side);
        let bbox = IRect { x, y, side };
        let m = coord_map(bbox, frame, w, h);
        let diag = ((w * w + h * h) as f64).sqrt();

        // Open range (-0.5, 0.5).
        prop_assert!(m.x.iter().chain(&m.y).all(|v| v.abs() < 0.5));

        // Constant per-pixel step side/frame/diag along rows.
        let step = (side as f64 / frame as f64) / diag;
        for v in 0..frame {
            for u in 0..frame - 1 {
                let idx = v * frame + u;
                prop_assert!((m.x[idx + 1] - m.x[idx] - step).abs() < 1e-12);
                prop_assert!((m.y[idx + 1] - m.y[idx]).abs() < 1e-15);
            }
        }

        // Inversion lands within half a source pixel of the resampling point.
        for &(u, v) in &[(0usize, 0usize), (frame - 1, frame - 1), (frame / 2, 1)] {
            let i = m.x[v * frame + u] * diag + w as f64 / 2.0;
            let expected = bbox.x as f64 + (u as f64 + 0.5) * side as f64 / frame as f64 - 0.5;
            prop_assert!((i - expected).abs() <= 0.5);
        }

        // Agrees with the reference everywhere.
        let (rx, ry) = reference_map(bbox, frame, w, h);
        for (a, b) in m.x.iter().zip(&rx).chain(m.y.iter().zip(&ry)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
