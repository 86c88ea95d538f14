use nalgebra::Point3;
use rand::seq::index;

use super::finger::FingerParams;
use super::sdf::ShapeSdf;
use crate::error::{Error, Result};
use crate::posegen::GraspPose;
use crate::seed;

/// Surface samples drawn before cropping to the gripper box.
const CANDIDATE_SAMPLES: usize = 4096;

/// Axis-aligned box around both fingers in the gripper frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperBounds {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl GripperBounds {
    pub fn new(params: &FingerParams, s1: f64, s2: f64) -> Self {
        let top = params.base_body_height();
        let hw = 0.5 * params.width;
        Self {
            min: Point3::new(-s1 - top, -params.length, -hw),
            max: Point3::new(s2 + top, 0.0, hw),
        }
    }

    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }
}

/// Object surface points inside the gripper bounding box, expressed in the
/// gripper frame.
///
/// Exactly `n_points` are returned: a uniform subset when more qualify,
/// cyclic repetition when fewer do.
pub fn extract_partial_pointcloud(
    object: &ShapeSdf,
    pose: &GraspPose,
    params: &FingerParams,
    n_points: usize,
    seed: u64,
) -> Result<Vec<Point3<f64>>> {
    if n_points == 0 {
        return Err(Error::validation("n_points", "must be positive"));
    }
    let bounds = GripperBounds::new(params, pose.s1, pose.s2);
    let to_gripper = pose.isometry().inverse() * object.pose;
    let mut rng = seed::rng(seed);
    let inside: Vec<Point3<f64>> = object
        .sample_surface_local(CANDIDATE_SAMPLES, &mut rng)
        .into_iter()
        .map(|p| to_gripper * p)
        .filter(|p| bounds.contains(p))
        .collect();
    if inside.is_empty() {
        return Err(Error::NoOverlap);
    }
    if inside.len() >= n_points {
        let mut picks = index::sample(&mut rng, inside.len(), n_points).into_vec();
        picks.sort_unstable();
        Ok(picks.into_iter().map(|i| inside[i]).collect())
    } else {
        Ok((0..n_points).map(|i| inside[i % inside.len()]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Shape;
    use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};

    fn centered_pose() -> GraspPose {
        GraspPose::new([0.0, 0.08, 0.0], [0.0, 0.0, 0.0], 0.03, 0.03)
    }

    #[test]
    fn small_sphere_inside_box_yields_surface_points() {
        let params = FingerParams::default();
        // Gripper palm at y = 0.08, so the box spans y in [-0.02, 0.08] world.
        let sphere = ShapeSdf::new(
            Shape::Sphere { radius: 0.008 },
            Isometry3::translation(0.0, 0.04, 0.0),
            8.0,
        )
        .unwrap();
        let pts = extract_partial_pointcloud(&sphere, &centered_pose(), &params, 256, 1).unwrap();
        assert_eq!(pts.len(), 256);
        let iso = centered_pose().isometry();
        for p in &pts {
            assert!(sphere.distance(&(iso * p)).abs() < 1e-12);
        }
    }

    #[test]
    fn far_pose_has_no_overlap() {
        let params = FingerParams::default();
        let sphere = ShapeSdf::new(Shape::Sphere { radius: 0.02 }, Isometry3::identity(), 8.0).unwrap();
        let pose = GraspPose::new([1.0, 1.0, 1.0], [0.0; 3], 0.0, 0.0);
        assert!(matches!(
            extract_partial_pointcloud(&sphere, &pose, &params, 16, 0),
            Err(Error::NoOverlap)
        ));
    }

    #[test]
    fn embedded_box_points_lie_in_bounds() {
        let params = FingerParams::default();
        let cube = ShapeSdf::new(
            Shape::Box { half_extents: Vector3::repeat(0.03) },
            Isometry3::from_parts(
                Translation3::new(0.01, 0.02, 0.0),
                UnitQuaternion::from_euler_angles(0.0, 0.4, 0.0),
            ),
            8.0,
        )
        .unwrap();
        let pose = GraspPose::new([0.0, 0.07, 0.0], [0.0, 0.0, 0.2], 0.02, 0.02);
        let pts = extract_partial_pointcloud(&cube, &pose, &params, 256, 9).unwrap();
        let top = params.base_body_height();
        for p in pts {
            assert!(p.x >= -0.02 - top && p.x <= 0.02 + top);
            assert!(p.y >= -params.length && p.y <= 0.0);
            assert!(p.z.abs() <= params.width / 2.0);
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let params = FingerParams::default();
        let s = ShapeSdf::new(Shape::Sphere { radius: 0.025 }, Isometry3::translation(0.0, 0.025, 0.0), 2.0).unwrap();
        let pose = GraspPose::new([0.0, 0.09, 0.0], [0.0; 3], 0.01, 0.01);
        let a = extract_partial_pointcloud(&s, &pose, &params, 64, 4).unwrap();
        let b = extract_partial_pointcloud(&s, &pose, &params, 64, 4).unwrap();
        assert_eq!(a, b);
    }
}
