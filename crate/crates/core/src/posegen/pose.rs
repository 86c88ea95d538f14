use std::f64::consts::PI;

use nalgebra::{Isometry3, Rotation3, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mechanical travel of each prismatic finger joint (m).
pub const S_MAX: f64 = 0.06;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Gripper free-joint pose plus the two finger offsets.
///
/// The rotation is roll-pitch-yaw in the convention of
/// [`Rotation3::from_euler_angles`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspPose {
    pub translation: [f64; 3],
    pub rotation: [f64; 3],
    pub s1: f64,
    pub s2: f64,
}

impl GraspPose {
    pub fn new(translation: [f64; 3], rotation: [f64; 3], s1: f64, s2: f64) -> Self {
        Self {
            translation,
            rotation: rotation.map(wrap_angle),
            s1,
            s2,
        }
    }

    pub fn from_isometry(iso: &Isometry3<f64>, s1: f64, s2: f64) -> Self {
        let (r, p, y) = iso.rotation.euler_angles();
        let t = iso.translation.vector;
        Self::new([t.x, t.y, t.z], [r, p, y], s1, s2)
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        let [r, p, y] = self.rotation;
        let rot = Rotation3::from_euler_angles(r, p, y);
        let [x, yy, z] = self.translation;
        Isometry3::from_parts(Translation3::new(x, yy, z), UnitQuaternion::from_rotation_matrix(&rot))
    }

    /// `[t_x, t_y, t_z, r_r, r_p, r_y, s_1, s_2]`.
    pub fn to_array(&self) -> [f64; 8] {
        let [tx, ty, tz] = self.translation;
        let [rr, rp, ry] = self.rotation;
        [tx, ty, tz, rr, rp, ry, self.s1, self.s2]
    }

    pub fn from_array(a: [f64; 8]) -> Self {
        Self::new([a[0], a[1], a[2]], [a[3], a[4], a[5]], a[6], a[7])
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_array().iter().all(|v| v.is_finite()) {
            return Err(Error::validation("pose", "non-finite coordinate"));
        }
        for (name, s) in [("s1", self.s1), ("s2", self.s2)] {
            if !(0.0..=S_MAX).contains(&s) {
                return Err(Error::validation(name, format!("{s} outside travel [0, {S_MAX}]")));
            }
        }
        Ok(())
    }
}
