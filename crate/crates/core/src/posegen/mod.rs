//! Grasp pose sampling, noise, and SDF-based refinement.

mod pose;

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use pose::{wrap_angle, GraspPose, S_MAX};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::geometry::{FingerParams, ShapeSdf, TetMesh, GROUND_HEIGHT};
use crate::seed;

/// Gaussian noise added to the translation and rotation of a pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseNoiseParams {
    pub mu_t: f64,
    pub sigma_t: f64,
    pub mu_r: f64,
    pub sigma_r: f64,
}

impl Default for PoseNoiseParams {
    fn default() -> Self {
        Self { mu_t: 0.0, sigma_t: 0.01, mu_r: 0.0, sigma_r: 0.1 }
    }
}

impl PoseNoiseParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_t", self.sigma_t), ("sigma_r", self.sigma_r)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, "must be non-negative"));
            }
        }
        if !(self.mu_t.is_finite() && self.mu_r.is_finite()) {
            return Err(Error::validation("mu", "must be finite"));
        }
        Ok(())
    }
}

/// Weights of the distance and penetration hinges in the initialisation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitWeights {
    pub w_d: f64,
    pub w_p: f64,
}

impl Default for InitWeights {
    fn default() -> Self {
        Self { w_d: 1.0, w_p: 100.0 }
    }
}

impl InitWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_d > 0.0 && self.w_d < self.w_p && self.w_p.is_finite()) {
            return Err(Error::validation("init_weights", "need 0 < w_d < w_p"));
        }
        Ok(())
    }
}

/// Settings of the heuristic candidate sampler and the refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerParams {
    /// Standard deviation of the approach tilt from vertical (rad).
    pub tilt_sigma: f64,
    pub max_tilt: f64,
    /// Depth of the object centre below the palm, as a fraction of finger length.
    pub depth_fraction: f64,
    /// Gap left between each finger and the object (m).
    pub clearance: f64,
    pub refine_iterations: usize,
    pub refine_step: f64,
    /// Largest residual penetration accepted after refinement (m).
    pub penetration_tol: f64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            tilt_sigma: 0.35,
            max_tilt: 1.0,
            depth_fraction: 0.55,
            clearance: 0.003,
            refine_iterations: 200,
            refine_step: 1e-3,
            penetration_tol: 1e-3,
        }
    }
}

const SUPPORT_SAMPLES: usize = 2048;

/// Samples `n` candidate poses around `object`.
///
/// Approach directions come from a top-down biased distribution over the
/// upper hemisphere with a random roll about the approach axis. The palm is
/// placed so the object's centre of mass sits on the gripper axis, and the
/// finger offsets are opened to the object's extent plus a clearance.
pub fn sample_candidate_poses(
    object: &ShapeSdf,
    params: &FingerParams,
    sampler: &SamplerParams,
    n: usize,
    seed: u64,
) -> Result<Vec<GraspPose>> {
    if n == 0 {
        return Err(Error::validation("n", "must be positive"));
    }
    let mut rng = seed::rng(seed);
    let support: Vec<Point3<f64>> = object
        .sample_surface_local(SUPPORT_SAMPLES, &mut seed::rng(seed::derive(seed, "support", 0)))
        .into_iter()
        .map(|p| object.pose * p)
        .collect();
    let tilt = Normal::new(0.0, sampler.tilt_sigma)
        .map_err(|e| Error::validation("tilt_sigma", e.to_string()))?;
    let com = object.center_of_mass();
    let depth = sampler.depth_fraction * params.length;
    let tan_cut = params.cut_angle.tan();

    let mut out = Vec::with_capacity(n);
    let max_attempts = 200 * n;
    for _ in 0..max_attempts {
        if out.len() == n {
            break;
        }
        let theta: f64 = tilt.sample(&mut rng);
        let theta = theta.abs();
        let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
        let roll = rng.gen_range(0.0..std::f64::consts::TAU);
        if theta > sampler.max_tilt {
            continue;
        }
        let axis = Vector3::new(azimuth.cos(), 0.0, azimuth.sin());
        let rot = UnitQuaternion::from_scaled_axis(axis * theta)
            * UnitQuaternion::from_scaled_axis(Vector3::y() * roll);
        let palm = com + rot * Vector3::new(0.0, depth, 0.0);
        let iso = Isometry3::from_parts(Translation3::from(palm.coords), rot);
        let inv = iso.inverse();

        // Finger faces sit at x = -s1 - l tan(cut) and x = s2 + l tan(cut),
        // with l the depth below the palm.
        let (mut s1, mut s2) = (0.0f64, 0.0f64);
        let mut any = false;
        for p in &support {
            let g = inv * p;
            if g.y > 0.0 || g.y < -params.length || g.z.abs() > 0.5 * params.width {
                continue;
            }
            any = true;
            let slope = -g.y * tan_cut;
            s1 = s1.max(-g.x - slope);
            s2 = s2.max(g.x - slope);
        }
        if !any {
            continue;
        }
        let s1 = s1 + sampler.clearance;
        let s2 = s2 + sampler.clearance;
        if s1 > S_MAX || s2 > S_MAX {
            continue;
        }
        out.push(GraspPose::from_isometry(&iso, s1, s2));
    }
    if out.len() < n {
        return Err(Error::Ungraspable);
    }
    Ok(out)
}

/// Adds independent normal noise to the translation and rotation.
pub fn perturb_pose(pose: &GraspPose, noise: &PoseNoiseParams, seed: u64) -> Result<GraspPose> {
    noise.validate()?;
    let mut rng = seed::rng(seed);
    let nt = Normal::new(noise.mu_t, noise.sigma_t).map_err(|e| Error::validation("sigma_t", e.to_string()))?;
    let nr = Normal::new(noise.mu_r, noise.sigma_r).map_err(|e| Error::validation("sigma_r", e.to_string()))?;
    let mut t = pose.translation;
    let mut r = pose.rotation;
    for v in t.iter_mut() {
        *v += nt.sample(&mut rng);
    }
    for v in r.iter_mut() {
        *v += nr.sample(&mut rng);
    }
    Ok(GraspPose::new(t, r, pose.s1, pose.s2))
}

/// Hinge loss over paired object and ground distances.
pub fn hinge_loss(d_object: &[f64], d_ground: &[f64], w: &InitWeights) -> f64 {
    let mut pos = 0.0;
    let mut neg = 0.0;
    for &d in d_object.iter().chain(d_ground) {
        pos += d.max(0.0);
        neg += (-d).max(0.0);
    }
    w.w_d * pos + w.w_p * neg
}

/// Signed distances of every gripper surface vertex to the object and to the
/// ground for a pose.
pub fn surface_distances(pose: &GraspPose, object: &ShapeSdf, gripper: &TetMesh) -> (Vec<f64>, Vec<f64>) {
    let placed = gripper.placed(pose);
    let verts = gripper.surface_vertices();
    let d_obj = verts.iter().map(|&v| object.distance(&placed[v])).collect();
    let d_ground = verts.iter().map(|&v| placed[v].y - GROUND_HEIGHT).collect();
    (d_obj, d_ground)
}

/// Initialisation loss of a pose.
pub fn l_init(pose: &GraspPose, object: &ShapeSdf, gripper: &TetMesh, w: &InitWeights) -> f64 {
    let (a, b) = surface_distances(pose, object, gripper);
    hinge_loss(&a, &b, w)
}

/// Deepest penetration of any gripper surface vertex into object or ground.
pub fn max_penetration(pose: &GraspPose, object: &ShapeSdf, gripper: &TetMesh) -> f64 {
    let (a, b) = surface_distances(pose, object, gripper);
    a.iter().chain(&b).fold(0.0f64, |m, &d| m.max(-d))
}

fn with_free(pose: &GraspPose, x: [f64; 3]) -> GraspPose {
    let mut p = *pose;
    p.translation[1] = x[0];
    p.s1 = x[1].clamp(0.0, S_MAX);
    p.s2 = x[2].clamp(0.0, S_MAX);
    p
}

/// Minimises [`l_init`] over `(t_y, s1, s2)` by finite-difference gradient
/// descent with an adaptive step, keeping the other coordinates untouched.
///
/// Fails with [`Error::InitializationFailed`] when the refined pose still
/// penetrates deeper than the tolerance.
pub fn refine_pose(
    pose: &GraspPose,
    object: &ShapeSdf,
    gripper: &TetMesh,
    w: &InitWeights,
    sampler: &SamplerParams,
) -> Result<GraspPose> {
    pose.validate()?;
    w.validate()?;
    let loss = |x: [f64; 3]| l_init(&with_free(pose, x), object, gripper, w);
    let mut x = [pose.translation[1], pose.s1, pose.s2];
    let mut fx = loss(x);
    let mut step = sampler.refine_step;
    let h = 1e-6;
    for _ in 0..sampler.refine_iterations {
        let mut g = [0.0; 3];
        for k in 0..3 {
            let mut a = x;
            let mut b = x;
            a[k] += h;
            b[k] -= h;
            g[k] = (loss(a) - loss(b)) / (2.0 * h);
        }
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if !(norm > 0.0) {
            break;
        }
        let trial = [
            x[0] - step * g[0] / norm,
            (x[1] - step * g[1] / norm).clamp(0.0, S_MAX),
            (x[2] - step * g[2] / norm).clamp(0.0, S_MAX),
        ];
        let ft = loss(trial);
        if ft < fx {
            x = trial;
            fx = ft;
            step *= 1.5;
        } else {
            step *= 0.5;
            if step < 1e-9 {
                break;
            }
        }
    }
    let refined = if x == [pose.translation[1], pose.s1, pose.s2] { *pose } else { with_free(pose, x) };
    let pen = max_penetration(&refined, object, gripper);
    if pen > sampler.penetration_tol {
        return Err(Error::InitializationFailed { penetration: pen });
    }
    Ok(refined)
}

/// A pose together with whether refinement accepted it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseEntry {
    pub pose: [f64; 8],
    pub valid: bool,
}

/// Samples, perturbs and refines candidates until `n_valid` poses pass, and
/// reports how many failed initialisation.
///
/// Candidates are processed in batches with `mode`; acceptance order follows
/// candidate index, so the result does not depend on the execution mode.
#[allow(clippy::too_many_arguments)]
pub fn sample_refined_poses(
    object: &ShapeSdf,
    gripper: &TetMesh,
    sampler: &SamplerParams,
    noise: &PoseNoiseParams,
    w: &InitWeights,
    n_valid: usize,
    max_candidates: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<(Vec<GraspPose>, Vec<PoseEntry>)> {
    sample_refined_poses_with(object, gripper, sampler, noise, w, n_valid, max_candidates, seed, mode, |_| true)
}

/// As [`sample_refined_poses`], with an extra acceptance test applied to
/// refined poses; rejected ones are logged as invalid.
#[allow(clippy::too_many_arguments)]
pub fn sample_refined_poses_with<F>(
    object: &ShapeSdf,
    gripper: &TetMesh,
    sampler: &SamplerParams,
    noise: &PoseNoiseParams,
    w: &InitWeights,
    n_valid: usize,
    max_candidates: usize,
    seed: u64,
    mode: ExecMode,
    accept: F,
) -> Result<(Vec<GraspPose>, Vec<PoseEntry>)>
where
    F: Fn(&GraspPose) -> bool + Sync + Send,
{
    let candidates = sample_candidate_poses(object, gripper.params(), sampler, max_candidates, seed)?;
    let mut valid = Vec::new();
    let mut log = Vec::new();
    let batch = n_valid.max(1);
    let mut start = 0;
    while valid.len() < n_valid && start < candidates.len() {
        let end = (start + batch).min(candidates.len());
        let results = map_indexed(end - start, mode, |j| -> Result<(GraspPose, bool)> {
            let i = start + j;
            let noisy = perturb_pose(&candidates[i], noise, seed::derive(seed, "noise", i as u64))?;
            match refine_pose(&noisy, object, gripper, w, sampler) {
                Ok(p) => Ok((p, accept(&p))),
                Err(Error::InitializationFailed { .. }) => Ok((noisy, false)),
                Err(e) => Err(e),
            }
        });
        for r in results {
            let (p, ok) = r?;
            if valid.len() == n_valid {
                break;
            }
            log.push(PoseEntry { pose: p.to_array(), valid: ok });
            if ok {
                valid.push(p);
            }
        }
        start = end;
    }
    Ok((valid, log))
}

pub fn write_pose_set(path: &Path, entries: &[PoseEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_pose_set(path: &Path) -> Result<Vec<PoseEntry>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: PoseEntry = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
        out.push(e);
    }
    Ok(out)
}
