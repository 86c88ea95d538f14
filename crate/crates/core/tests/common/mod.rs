//! Oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{Isometry3, Matrix3, Translation3, Vector3};
use softgrip::femsim::{map_stiffness, Controls, Scene, SimParams, Simulator, StableNeoHookean, StiffnessVector};
use softgrip::geometry::{build_finger_mesh, FingerParams, Shape, ShapeSdf};
use softgrip::posegen::GraspPose;

/// Drop height of an object released at rest after `t` seconds.
pub fn free_fall_drop(t: f64) -> f64 {
    let mesh = Arc::new(build_finger_mesh(&FingerParams::default()).unwrap());
    let ball = ShapeSdf::new(
        Shape::Sphere { radius: 0.02 },
        Isometry3::from_parts(Translation3::new(0.0, 1.0, 0.0), Default::default()),
        8.0,
    )
    .unwrap();
    let params = SimParams::default();
    let scene = Scene::new(mesh.clone(), ball, params).unwrap();
    let materials = map_stiffness(&StiffnessVector::uniform(4e6), &mesh, params.poisson, params.density).unwrap();
    // Gripper parked well away from the ball.
    let pose = GraspPose::new([1.0, 0.5, 0.0], [0.0; 3], 0.0, 0.0);
    let (sim, mut st) = Simulator::new(&scene, &materials, &pose).unwrap();
    let y0 = st.object_pose.translation.vector.y;
    let frames = (t / params.frame_dt).round() as usize;
    for _ in 0..frames {
        sim.step(&mut st, &Controls::default(), params.frame_dt).unwrap();
    }
    y0 - st.object_pose.translation.vector.y
}

/// Axial first Piola stress of a tet stretched by `eps` along x with the
/// lateral stretch chosen so the lateral stress vanishes.
pub fn uniaxial_stress(e: f64, nu: f64, eps: f64) -> (f64, f64) {
    let law = StableNeoHookean::new(e, nu);
    let p_at = |lat: f64| law.first_piola(&Matrix3::from_diagonal(&Vector3::new(1.0 + eps, lat, lat)));
    let (mut lo, mut hi) = (1.0 - eps, 1.0 + eps);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p_at(mid)[(1, 1)] > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let p = p_at(0.5 * (lo + hi));
    (p[(0, 0)], p[(1, 1)])
}

