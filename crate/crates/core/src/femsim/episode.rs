use std::fmt;
use std::fmt::Write as _;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::material::{map_stiffness, StiffnessVector};
use super::sim::{Controls, Scene, SimState, Simulator};
use crate::error::{Error, Result};
use crate::posegen::GraspPose;

/// The grasp protocol: tighten, hold, lift, then push the object down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionScript {
    /// Tendon tension reached at the end of the ramp (N).
    pub tension: f64,
    pub ramp_duration: f64,
    pub hold_duration: f64,
    pub lift_distance: f64,
    pub lift_duration: f64,
    /// Downward force on the object during the last phase (N).
    pub disturbance: f64,
    pub disturbance_duration: f64,
    /// Time after lift start before ground contact counts against success (s).
    pub liftoff_allowance: f64,
    /// Trailing span over which the ending wrench is averaged and ground
    /// contact is collected (s); filters penalty-contact chatter.
    pub outcome_window: f64,
}

impl Default for MotionScript {
    fn default() -> Self {
        Self {
            tension: 5.0,
            ramp_duration: 0.05,
            hold_duration: 0.0125,
            lift_distance: 0.10,
            lift_duration: 0.10,
            disturbance: 500.0,
            disturbance_duration: 0.05,
            liftoff_allowance: 0.025,
            outcome_window: 0.05,
        }
    }
}

impl MotionScript {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("ramp_duration", self.ramp_duration),
            ("hold_duration", self.hold_duration),
            ("lift_distance", self.lift_distance),
            ("lift_duration", self.lift_duration),
            ("disturbance_duration", self.disturbance_duration),
            ("outcome_window", self.outcome_window),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        for (name, v) in [
            ("tension", self.tension),
            ("disturbance", self.disturbance),
            ("liftoff_allowance", self.liftoff_allowance),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, "must be non-negative"));
            }
        }
        Ok(())
    }

    fn frames(d: f64, frame_dt: f64) -> usize {
        (d / frame_dt).round().max(1.0) as usize
    }

    /// Frame counts of the four phases.
    pub fn phase_frames(&self, frame_dt: f64) -> [usize; 4] {
        [
            Self::frames(self.ramp_duration, frame_dt),
            Self::frames(self.hold_duration, frame_dt),
            Self::frames(self.lift_duration, frame_dt),
            Self::frames(self.disturbance_duration, frame_dt),
        ]
    }

    pub fn tension_at(&self, t: f64) -> f64 {
        self.tension * (t / self.ramp_duration).clamp(0.0, 1.0)
    }

    /// Palm rise and its rate at time `t` since lift start (smoothstep).
    pub fn lift_at(&self, t: f64) -> (f64, f64) {
        let s = (t / self.lift_duration).clamp(0.0, 1.0);
        let y = self.lift_distance * s * s * (3.0 - 2.0 * s);
        let v = if t > 0.0 && t < self.lift_duration {
            self.lift_distance * 6.0 * s * (1.0 - s) / self.lift_duration
        } else {
            0.0
        };
        (y, v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ramp,
    Hold,
    Lift,
    Disturbance,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Ramp => "ramp",
            Phase::Hold => "hold",
            Phase::Lift => "lift",
            Phase::Disturbance => "disturbance",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub time: f64,
    pub phase: Phase,
    /// Gripper contact wrench on the object, averaged over the frame.
    pub wrench: [f64; 6],
    /// Object displacement relative to the palm since the start.
    pub dq: [f64; 3],
    pub gripper_contact: bool,
    pub ground_contact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub frames: Vec<FrameRecord>,
    pub lift_start: usize,
    /// Frames after lift start exempt from the ground-contact check.
    pub liftoff_frames: usize,
    pub substeps: usize,
    pub max_mass_scale: f64,
}

impl EpisodeTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "frame,time,phase,fx,fy,fz,tx,ty,tz,dqx,dqy,dqz,gripper_contact,ground_contact\n",
        );
        for r in &self.frames {
            let _ = write!(s, "{},{:.6},{}", r.frame, r.time, r.phase);
            for v in r.wrench.iter().chain(&r.dq) {
                let _ = write!(s, ",{v:e}");
            }
            let _ = writeln!(s, ",{},{}", r.gripper_contact as u8, r.ground_contact as u8);
        }
        s
    }
}

/// Ending wrench, relative displacement and ground-contact flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspOutcome {
    pub wrench: [f64; 6],
    pub dq: [f64; 3],
    pub ground_contact: bool,
}

impl GraspOutcome {
    /// `f`, `dq` and `c_g` as one 10-vector.
    pub fn to_array(&self) -> [f64; 10] {
        let mut a = [0.0; 10];
        a[..6].copy_from_slice(&self.wrench);
        a[6..9].copy_from_slice(&self.dq);
        a[9] = if self.ground_contact { 1.0 } else { 0.0 };
        a
    }
}

fn check_finite(st: &SimState, phase: Phase, frame: usize) -> Result<()> {
    let bad = |q: &str| Error::Divergence { quantity: q.into(), phase: phase.to_string(), frame };
    const LIMIT: f64 = 1e3;
    if !st.x.iter().all(|p| p.coords.iter().all(|c| c.is_finite() && c.abs() < LIMIT)) {
        return Err(bad("gripper vertex position"));
    }
    if !st.v.iter().all(|v| v.iter().all(|c| c.is_finite())) {
        return Err(bad("gripper vertex velocity"));
    }
    let t = st.object_pose.translation.vector;
    if !(t.iter().all(|c| c.is_finite() && c.abs() < LIMIT) && st.object_pose.rotation.coords.iter().all(|c| c.is_finite())) {
        return Err(bad("object pose"));
    }
    if !(st.object_velocity.iter().chain(st.object_angular.iter()).all(|c| c.is_finite())) {
        return Err(bad("object velocity"));
    }
    if !st.wrench.iter().all(|c| c.is_finite()) {
        return Err(bad("contact wrench"));
    }
    Ok(())
}

/// Runs the grasp protocol once and records every frame.
pub fn run_episode(
    scene: &Scene,
    k: &StiffnessVector,
    pose: &GraspPose,
    script: &MotionScript,
) -> Result<(GraspOutcome, EpisodeTrace)> {
    script.validate()?;
    pose.validate()?;
    let params = &scene.params;
    let materials = map_stiffness(k, &scene.mesh, params.poisson, params.density)?;
    let (sim, mut st) = Simulator::new(scene, &materials, pose)?;
    let frame_dt = params.frame_dt;
    let [n_ramp, n_hold, n_lift, n_dist] = script.phase_frames(frame_dt);
    let lift_start = n_ramp + n_hold;
    let dist_start = lift_start + n_lift;
    let total = dist_start + n_dist;
    let t_lift = lift_start as f64 * frame_dt;
    let t_dist = dist_start as f64 * frame_dt;
    let substeps = sim.substeps();
    let h = frame_dt / substeps as f64;

    let palm0 = Point3::from(pose.isometry().translation.vector);
    let rel0 = Point3::from(st.object_pose.translation.vector) - palm0;
    let mut frames = Vec::with_capacity(total);
    for frame in 0..total {
        let phase = if frame < n_ramp {
            Phase::Ramp
        } else if frame < lift_start {
            Phase::Hold
        } else if frame < dist_start {
            Phase::Lift
        } else {
            Phase::Disturbance
        };
        let mut wrench = [0.0; 6];
        let mut gripper_contact = false;
        let mut ground_contact = false;
        for s in 0..substeps {
            let t0 = frame as f64 * frame_dt + s as f64 * h;
            let t_mid = t0 + 0.5 * h;
            let (rise, _) = script.lift_at(t0 + h - t_lift);
            let (_, rate) = script.lift_at(t_mid - t_lift);
            let ctl = Controls {
                tension: script.tension_at(t_mid),
                base_offset: Vector3::new(0.0, rise, 0.0),
                base_velocity: Vector3::new(0.0, rate, 0.0),
                disturbance: if t_mid >= t_dist {
                    Vector3::new(0.0, -script.disturbance, 0.0)
                } else {
                    Vector3::zeros()
                },
            };
            sim.substep(&mut st, &ctl, h).map_err(|e| match e {
                Error::DegenerateRoute { .. } => Error::Divergence {
                    quantity: "tendon route".into(),
                    phase: phase.to_string(),
                    frame,
                },
                other => other,
            })?;
            for (w, x) in wrench.iter_mut().zip(st.wrench) {
                *w += x / substeps as f64;
            }
            gripper_contact |= st.gripper_contact;
            ground_contact |= st.ground_contact;
        }
        check_finite(&st, phase, frame)?;
        let (rise, _) = script.lift_at((frame + 1) as f64 * frame_dt - t_lift);
        let palm = palm0 + Vector3::new(0.0, rise, 0.0);
        let rel = Point3::from(st.object_pose.translation.vector) - palm;
        let dq = rel - rel0;
        frames.push(FrameRecord {
            frame,
            time: (frame + 1) as f64 * frame_dt,
            phase,
            wrench,
            dq: [dq.x, dq.y, dq.z],
            gripper_contact,
            ground_contact,
        });
    }
    let last = frames.last().copied().expect("episode has frames");
    let window = MotionScript::frames(script.outcome_window, frame_dt).min(n_dist);
    let tail = &frames[total - window..];
    let mut wrench = [0.0; 6];
    for r in tail {
        for (w, x) in wrench.iter_mut().zip(r.wrench) {
            *w += x / window as f64;
        }
    }
    let outcome = GraspOutcome { wrench, dq: last.dq, ground_contact: tail.iter().any(|r| r.ground_contact) };
    let trace = EpisodeTrace {
        frames,
        lift_start,
        liftoff_frames: (script.liftoff_allowance / frame_dt).round() as usize,
        substeps,
        max_mass_scale: sim.max_mass_scale(),
    };
    Ok((outcome, trace))
}

/// Success over the frames after lift begins: the object never touches the
/// ground (after the lift-off allowance), stays in contact with the gripper,
/// and feels a non-zero wrench.
pub fn evaluate_success(trace: &EpisodeTrace) -> bool {
    let after: Vec<&FrameRecord> = trace.frames.iter().filter(|r| r.frame >= trace.lift_start).collect();
    if after.is_empty() {
        return false;
    }
    after.iter().all(|r| {
        let norm = r.wrench.iter().map(|w| w * w).sum::<f64>().sqrt();
        let grounded = r.ground_contact && r.frame >= trace.lift_start + trace.liftoff_frames;
        r.gripper_contact && norm > 0.0 && !grounded
    })
}
