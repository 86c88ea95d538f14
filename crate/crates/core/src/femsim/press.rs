use std::sync::Arc;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};

use super::material::{map_stiffness, StiffnessVector};
use super::sim::{Controls, Scene, SimParams, Simulator};
use crate::error::{Error, Result};
use crate::geometry::{BlockKind, Shape, ShapeSdf, TetMesh};
use crate::posegen::GraspPose;

/// Settings of a flat-plate press with finger 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PressParams {
    pub tension: f64,
    pub ramp: f64,
    pub hold: f64,
    /// Trailing window over which contact forces are averaged (s).
    pub window: f64,
}

impl Default for PressParams {
    fn default() -> Self {
        Self { tension: 10.0, ramp: 0.05, hold: 0.05, window: 0.02 }
    }
}

/// Mean normal contact force on each segment of finger 0, base to tip.
#[derive(Debug, Clone, PartialEq)]
pub struct PressResult {
    pub segment_forces: Vec<f64>,
}

impl PressResult {
    /// Coefficient of variation over the segments from `first` on.
    pub fn cv_from(&self, first: usize) -> f64 {
        let f = &self.segment_forces[first.min(self.segment_forces.len())..];
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let var = f.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() / mean
    }
}

/// Actuates finger 0 against an immovable plate lying on its object-facing
/// cut plane and records the per-segment contact forces. Finger 1 is idle and
/// moved out of the way.
pub fn plate_press(mesh: Arc<TetMesh>, params: SimParams, k: &StiffnessVector, press: &PressParams) -> Result<PressResult> {
    if !(press.tension >= 0.0 && press.ramp > 0.0 && press.hold >= press.window && press.window > 0.0) {
        return Err(Error::validation("press", "need ramp > 0 and hold >= window > 0"));
    }
    let fp = *mesh.params();
    let palm = Vector3::new(0.0, 0.5, 0.0);
    // The cut face of finger 0 passes through the palm origin along
    // (-sin c, -cos c); its outward normal is (cos c, -sin c).
    let c = fp.cut_angle;
    let along = Vector3::new(-c.sin(), -c.cos(), 0.0);
    let normal = Vector3::new(c.cos(), -c.sin(), 0.0);
    let half = Vector3::new(0.005, 0.6 * fp.length, fp.width);
    let centre = palm + along * (0.5 * fp.length) + normal * half.x;
    let plate_pose = Isometry3::from_parts(
        Translation3::from(centre),
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), -c),
    );
    let plate = ShapeSdf::new(Shape::Box { half_extents: half }, plate_pose, 1000.0)?;
    let params = SimParams { active_fingers: [true, false], ..params };
    let mut scene = Scene::new(mesh.clone(), plate, params)?;
    scene.object_fixed = true;

    let materials = map_stiffness(k, &mesh, params.poisson, params.density)?;
    let pose = GraspPose::new([palm.x, palm.y, palm.z], [0.0; 3], 0.0, 0.1);
    let (sim, mut st) = Simulator::new(&scene, &materials, &pose)?;

    // Vertex -> segment index on finger 0.
    let extents = fp.block_extents();
    let mut segment_of = vec![None; mesh.num_vertices()];
    for (t, tet) in mesh.tets().iter().enumerate() {
        let b = mesh.block_ids()[t] as usize;
        if b >= extents.len() || extents[b].kind != BlockKind::Segment {
            continue;
        }
        for &v in tet {
            segment_of[v] = Some(b / 2);
        }
    }

    let dt = params.frame_dt;
    let frames = ((press.ramp + press.hold) / dt).round() as usize;
    let window = (press.window / dt).round().max(1.0) as usize;
    let mut sums = vec![0.0; fp.segments];
    for frame in 0..frames {
        let t = (frame as f64 + 0.5) * dt;
        let ctl = Controls { tension: press.tension * (t / press.ramp).min(1.0), ..Default::default() };
        sim.step(&mut st, &ctl, dt)?;
        if st.x.iter().any(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::Divergence { quantity: "gripper vertex position".into(), phase: "press".into(), frame });
        }
        if frame + window >= frames {
            for (v, f) in sim.object_contact_forces(&st).iter().enumerate() {
                if let Some(s) = segment_of[v] {
                    sums[s] += f.norm() / window as f64;
                }
            }
        }
    }
    Ok(PressResult { segment_forces: sums })
}
