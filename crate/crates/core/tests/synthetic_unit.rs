use edge_odometry::synthetic::*;
use edge_odometry::geometry::{CameraIntrinsics, Pose};
use edge_odometry::Error;
use nalgebra::Vector3;

#[test]
fn cube_has_twelve_segments() {
    let s = SyntheticScene::cube(Vector3::new(0.0, 0.0, 2.0), 1.0);
    assert_eq!(s.segments.len(), 12);
    for seg in &s.segments {
        assert!(((seg.a - seg.b).norm() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn empty_scene_is_signalled() {
    let r = render_frame(&SyntheticScene::empty(), &Pose::identity(), &CameraIntrinsics::tum_default());
    assert!(matches!(r, Err(Error::EmptyFrame)));
}

#[test]
fn random_scene_is_deterministic() {
    let c = Vector3::new(0.0, 0.0, 2.0);
    assert_eq!(SyntheticScene::random(3, c, 0.6), SyntheticScene::random(3, c, 0.6));
    assert_ne!(SyntheticScene::random(3, c, 0.6), SyntheticScene::random(4, c, 0.6));
}
