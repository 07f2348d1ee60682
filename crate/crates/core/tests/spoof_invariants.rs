//! Flatness separation: flat projections admit a near-exact stereo
//! homography, rendered faces do not (at distances where the rig resolves
//! the surface curvature).

use stereoface::facegen::surface::build_surface;
use stereoface::facegen::{sample_identity, CameraRig, IRect, Pose};
use stereoface::rng::stream_rng;
use stereoface::spoof::{flat_correspondences, flatness_residual, SpoofPlane};

#[test]
fn flat_projection_residuals_stay_under_half_pixel() {
    use rand::Rng;
    let rig = CameraRig::desk();
    let mut rng = stream_rng(800, 0, 0);
    for case in 0..10 {
        let plane = SpoofPlane {
            pitch: rng.random_range(0.0..=20.0),
            yaw: rng.random_range(0.0..=20.0),
            distance: rng.random_range(0.35..=0.9),
            scale: 0.0,
        };
        let plane = SpoofPlane { scale: plane.distance / rig.focal, ..plane };
        let region = IRect {
            x: rng.random_range(20..100),
            y: rng.random_range(10..40),
            side: rng.random_range(30..60),
        };
        let matches = flat_correspondences(region, &plane, &rig, 6);
        assert!(matches.len() >= 20);
        let r = flatness_residual(&matches).unwrap();
        assert!(r <= 0.5, "case {case}: flat residual {r}");
    }
}

#[test]
fn genuine_renders_violate_the_homography() {
    use rand::Rng;
    let rig = CameraRig::desk();
    let mut rng = stream_rng(801, 0, 0);
    for case in 0..10u64 {
        let surface = build_surface(&sample_identity(&mut stream_rng(801, case, 1)));
        // Close-range poses, where the rig resolves the facial curvature.
        let pose = Pose {
            pitch: rng.random_range(-20.0..=20.0),
            yaw: rng.random_range(-20.0..=20.0),
            roll: rng.random_range(-8.0..=8.0),
            distance: rng.random_range(0.25..=0.35),
            offset_x: 0.0,
            offset_y: 0.0,
        };
        let matches = stereoface::spoof::genuine_correspondences(&surface, &pose, &rig, 6);
        assert!(matches.len() >= 20);
        let r = flatness_residual(&matches).unwrap();
        assert!(r > 1.0, "case {case}: genuine residual {r} should exceed 1 px");
    }
}
