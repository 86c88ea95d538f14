mod common;

use std::sync::Arc;

use common::{free_fall_drop, uniaxial_stress};
use softgrip::femsim::{plate_press, PressParams, SimParams, StiffnessVector};
use softgrip::geometry::{build_finger_mesh, FingerParams};

#[test]
fn free_fall_matches_half_g_t_squared() {
    let t = 0.1;
    let drop = free_fall_drop(t);
    let exact = 0.5 * 9.81 * t * t;
    assert!((drop - exact).abs() <= 0.01 * exact, "drop {drop} vs {exact}");
}

#[test]
fn single_tet_uniaxial_matches_hooke() {
    for e in [0.7e6, 4e6, 24e6] {
        let eps = 0.005;
        let (axial, lateral) = uniaxial_stress(e, 0.45, eps);
        assert!((axial - e * eps).abs() <= 0.05 * e * eps, "E {e}: {axial} vs {}", e * eps);
        assert!(lateral.abs() < 1e-6 * axial);
    }
}

#[test]
fn plate_press_favours_uniform_pressure_routing() {
    let k = StiffnessVector::uniform(4e6);
    let press = PressParams::default();
    let up = plate_press(Arc::new(build_finger_mesh(&FingerParams::default()).unwrap()), SimParams::default(), &k, &press).unwrap();
    let ch = plate_press(Arc::new(build_finger_mesh(&FingerParams::constant_height()).unwrap()), SimParams::default(), &k, &press)
        .unwrap();
    // Constant height pushes with the tip alone.
    let tip = *ch.segment_forces.last().unwrap();
    assert!(ch.segment_forces[..ch.segment_forces.len() - 1].iter().all(|&f| f < 0.05 * tip));
    assert!(up.segment_forces.iter().all(|&f| f > 0.0));
    assert!(up.cv_from(0) <= 0.5 * ch.cv_from(0));
}
