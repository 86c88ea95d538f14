//! Bulk episode generation and the JSON-lines dataset format.

use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use log::warn;
use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::femsim::{run_episode, GraspOutcome, MotionScript, Scene, SimParams, StiffnessVector};
use crate::geometry::{extract_partial_pointcloud, Shape, ShapeSdf, TetMesh, TriMesh};
use crate::posegen::{self, GraspPose, InitWeights, PoseEntry, PoseNoiseParams, SamplerParams};
use crate::{seed, E_MAX, E_MIN, NUM_BLOCKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StiffnessDistribution {
    #[default]
    LogUniform,
    Uniform,
}

/// Draws 22 independent block moduli within `[E_MIN, E_MAX]`.
pub fn sample_stiffness(seed: u64, dist: StiffnessDistribution) -> StiffnessVector {
    let mut rng = seed::rng(seed);
    let mut k = [0.0; NUM_BLOCKS];
    for e in k.iter_mut() {
        let u: f64 = rng.gen();
        *e = match dist {
            StiffnessDistribution::LogUniform => (E_MIN.ln() + u * (E_MAX / E_MIN).ln()).exp(),
            StiffnessDistribution::Uniform => E_MIN + u * (E_MAX - E_MIN),
        }
        .clamp(E_MIN, E_MAX);
    }
    StiffnessVector(k)
}

/// Serializable object geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSpec {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
    Capsule { radius: f64, half_height: f64 },
    Mesh { path: std::path::PathBuf },
}

impl ShapeSpec {
    pub fn to_shape(&self) -> Result<Shape> {
        Ok(match self {
            ShapeSpec::Sphere { radius } => Shape::Sphere { radius: *radius },
            ShapeSpec::Box { half_extents } => Shape::Box { half_extents: Vector3::from(*half_extents) },
            ShapeSpec::Cylinder { radius, half_height } => Shape::Cylinder { radius: *radius, half_height: *half_height },
            ShapeSpec::Capsule { radius, half_height } => Shape::Capsule { radius: *radius, half_height: *half_height },
            ShapeSpec::Mesh { path } => Shape::Mesh(Arc::new(TriMesh::from_obj_file(path)?)),
        })
    }
}

/// An object resting on the ground at a given place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub name: String,
    pub shape: ShapeSpec,
    pub density: f64,
    #[serde(default)]
    pub yaw: f64,
}

impl ObjectSpec {
    pub fn build(&self) -> Result<ShapeSdf> {
        ShapeSdf::resting(self.shape.to_shape()?, 0.0, 0.0, self.yaw, self.density)
    }

    /// Object id used in records: name and density.
    pub fn id(&self) -> String {
        format!("{}@{}", self.name, self.density)
    }
}

/// The three desk-scale primitives.
pub fn default_primitives() -> Vec<(String, ShapeSpec)> {
    vec![
        ("sphere".into(), ShapeSpec::Sphere { radius: 0.025 }),
        ("box".into(), ShapeSpec::Box { half_extents: [0.02, 0.02, 0.02] }),
        ("cylinder".into(), ShapeSpec::Cylinder { radius: 0.02, half_height: 0.03 }),
    ]
}

/// Every primitive at every density.
pub fn object_set(primitives: &[(String, ShapeSpec)], densities: &[f64]) -> Vec<ObjectSpec> {
    let mut out = Vec::new();
    for (name, shape) in primitives {
        for &density in densities {
            out.push(ObjectSpec { name: name.clone(), shape: shape.clone(), density, yaw: 0.0 });
        }
    }
    out
}

/// One supervised example.
///
/// `points` are in the gripper frame; `com` is the world-frame centre of
/// mass at the start of the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub object_id: String,
    pub points: Vec<[f64; 3]>,
    pub com: [f64; 3],
    pub density: f64,
    pub k: StiffnessVector,
    pub pose: [f64; 8],
    pub wrench: [f64; 6],
    pub dq: [f64; 3],
    pub c_g: u8,
}

impl DatasetRecord {
    pub fn validate(&self) -> Result<()> {
        self.k.validate()?;
        if self.points.is_empty() {
            return Err(Error::validation("points", "empty point cloud"));
        }
        let finite = self.points.iter().flatten().chain(&self.com).chain(&self.pose).chain(&self.wrench).chain(&self.dq);
        if !finite.copied().chain([self.density]).all(f64::is_finite) {
            return Err(Error::validation("record", "non-finite field"));
        }
        if !(self.density > 0.0) {
            return Err(Error::validation("density", "must be positive"));
        }
        if self.c_g > 1 {
            return Err(Error::validation("c_g", "must be 0 or 1"));
        }
        Ok(())
    }

    pub fn grasp_pose(&self) -> GraspPose {
        GraspPose::from_array(self.pose)
    }

    pub fn outcome(&self) -> GraspOutcome {
        GraspOutcome { wrench: self.wrench, dq: self.dq, ground_contact: self.c_g == 1 }
    }

    /// The 10 regression targets.
    pub fn targets(&self) -> [f64; 10] {
        self.outcome().to_array()
    }
}

/// Counts and settings of a generation run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenConfig {
    pub n_poses: usize,
    pub n_stiffness: usize,
    pub n_points: usize,
    /// Candidates sampled per object to find `n_poses` valid ones.
    pub max_candidates: usize,
    pub distribution: StiffnessDistribution,
    pub sampler: SamplerParams,
    pub noise: PoseNoiseParams,
    pub init_weights: InitWeights,
    pub exec: ExecMode,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        Self {
            n_poses: 10,
            n_stiffness: 10,
            n_points: 256,
            max_candidates: 120,
            distribution: StiffnessDistribution::LogUniform,
            sampler: SamplerParams::default(),
            noise: PoseNoiseParams::default(),
            init_weights: InitWeights::default(),
            exec: ExecMode::Parallel,
        }
    }
}

/// Per-object bookkeeping of a generation run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectSummary {
    pub object_id: String,
    pub valid_poses: usize,
    pub failed_poses: usize,
    pub episodes: usize,
    pub diverged: usize,
    pub poses: Vec<PoseEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub episodes_run: usize,
    pub records: usize,
    pub objects: Vec<ObjectSummary>,
}

/// A valid pose with its partial point cloud.
#[derive(Debug, Clone)]
pub struct PreparedPose {
    pub pose: GraspPose,
    pub points: Vec<[f64; 3]>,
}

/// Samples and refines poses for one object, keeping those whose point
/// cloud is non-empty.
pub fn prepare_poses(
    object: &ShapeSdf,
    mesh: &TetMesh,
    cfg: &DataGenConfig,
    seed: u64,
) -> Result<(Vec<PreparedPose>, Vec<PoseEntry>)> {
    let cloud_seed = seed::derive(seed, "cloud", 0);
    let cloud = |p: &GraspPose| extract_partial_pointcloud(object, p, mesh.params(), cfg.n_points, cloud_seed);
    let (poses, log) = match posegen::sample_refined_poses_with(
        object,
        mesh,
        &cfg.sampler,
        &cfg.noise,
        &cfg.init_weights,
        cfg.n_poses,
        cfg.max_candidates,
        seed,
        cfg.exec,
        |p| cloud(p).is_ok(),
    ) {
        Ok(r) => r,
        Err(Error::Ungraspable) => (Vec::new(), Vec::new()),
        Err(e) => return Err(e),
    };
    let prepared = poses
        .into_iter()
        .map(|pose| {
            let points = cloud(&pose)?.iter().map(|p| [p.x, p.y, p.z]).collect();
            Ok(PreparedPose { pose, points })
        })
        .collect::<Result<_>>()?;
    Ok((prepared, log))
}

/// Runs `n_stiffness` episodes for each valid pose of each object.
///
/// Diverged episodes are counted and skipped. Records come out in
/// (object, pose, stiffness) order whatever the execution mode.
pub fn generate_dataset(
    objects: &[ObjectSpec],
    mesh: Arc<TetMesh>,
    sim: &SimParams,
    script: &MotionScript,
    cfg: &DataGenConfig,
    root_seed: u64,
) -> Result<(Vec<DatasetRecord>, GenerationSummary)> {
    if cfg.n_poses == 0 || cfg.n_stiffness == 0 || cfg.n_points == 0 {
        return Err(Error::validation("datagen", "counts must be positive"));
    }
    script.validate()?;
    let mut records = Vec::new();
    let mut summary = GenerationSummary::default();
    for (oi, spec) in objects.iter().enumerate() {
        let object = spec.build()?;
        let pose_seed = seed::derive(root_seed, "poses", oi as u64);
        let (poses, log) = prepare_poses(&object, &mesh, cfg, pose_seed)?;
        let failed = log.iter().filter(|e| !e.valid).count();
        if poses.is_empty() {
            warn!("{}: no valid grasp poses ({failed} failed initialisations)", spec.id());
        }
        let scene = Scene::new(mesh.clone(), object.clone(), *sim)?;
        let jobs: Vec<(usize, StiffnessVector)> = (0..poses.len())
            .flat_map(|pi| {
                (0..cfg.n_stiffness).map(move |j| {
                    let s = seed::derive(root_seed, &format!("stiffness/{oi}/{pi}"), j as u64);
                    (pi, sample_stiffness(s, cfg.distribution))
                })
            })
            .collect();
        let results = map_indexed(jobs.len(), cfg.exec, |i| {
            let (pi, k) = &jobs[i];
            run_episode(&scene, k, &poses[*pi].pose, script).map(|(o, _)| o)
        });
        let mut diverged = 0;
        for ((pi, k), res) in jobs.iter().zip(results) {
            match res {
                Ok(o) => records.push(DatasetRecord {
                    object_id: spec.id(),
                    points: poses[*pi].points.clone(),
                    com: object.center_of_mass().coords.into(),
                    density: spec.density,
                    k: *k,
                    pose: poses[*pi].pose.to_array(),
                    wrench: o.wrench,
                    dq: o.dq,
                    c_g: o.ground_contact as u8,
                }),
                Err(e @ Error::Divergence { .. }) => {
                    warn!("{}: episode skipped: {e}", spec.id());
                    diverged += 1;
                }
                Err(e) => return Err(e),
            }
        }
        summary.episodes_run += jobs.len();
        summary.objects.push(ObjectSummary {
            object_id: spec.id(),
            valid_poses: poses.len(),
            failed_poses: failed,
            episodes: jobs.len(),
            diverged,
            poses: log,
        });
    }
    summary.records = records.len();
    Ok((records, summary))
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Reads and validates a JSON-lines dataset. All records must share one
/// point-cloud size.
pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out: Vec<DatasetRecord> = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |m: String| Error::Parse { line: i + 1, message: m };
        let r: DatasetRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        r.validate().map_err(|e| parse_err(e.to_string()))?;
        if let Some(first) = out.first() {
            if first.points.len() != r.points.len() {
                return Err(parse_err(format!(
                    "point cloud has {} points, expected {}",
                    r.points.len(),
                    first.points.len()
                )));
            }
        }
        out.push(r);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Reproducibility record written next to a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root_seed: u64,
    pub config_sha256: String,
    pub dataset_sha256: String,
    pub objects: usize,
    pub n_poses: usize,
    pub n_stiffness: usize,
    pub n_points: usize,
    pub summary: GenerationSummary,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_finger_mesh, FingerParams};

    #[test]
    fn stiffness_range_and_median() {
        let n = 10_000;
        let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(n); NUM_BLOCKS];
        for i in 0..n {
            let k = sample_stiffness(seed::derive(1, "k", i as u64), StiffnessDistribution::LogUniform);
            k.validate().unwrap();
            for (c, e) in cols.iter_mut().zip(k.0) {
                c.push(e);
            }
        }
        let target = (E_MIN * E_MAX).sqrt();
        for mut c in cols {
            c.sort_by(f64::total_cmp);
            let med = 0.5 * (c[n / 2 - 1] + c[n / 2]);
            // standard error of a sample median: 1 / (2 f(m) sqrt(n)), f = 1 / ln(range)
            let tol = 4.0 * (E_MAX / E_MIN).ln() / (2.0 * (n as f64).sqrt());
            assert!((med / target).ln().abs() < tol, "median {med}");
        }
    }

    #[test]
    fn stiffness_is_deterministic() {
        assert_eq!(
            sample_stiffness(42, StiffnessDistribution::LogUniform),
            sample_stiffness(42, StiffnessDistribution::LogUniform)
        );
        let u = sample_stiffness(3, StiffnessDistribution::Uniform);
        u.validate().unwrap();
    }

    fn record(i: usize) -> DatasetRecord {
        DatasetRecord {
            object_id: format!("obj{i}"),
            points: (0..4).map(|j| [0.001 * (i + j) as f64, -0.02, 0.1 / 3.0]).collect(),
            com: [0.0, 0.025, 1e-17],
            density: 8.0,
            k: sample_stiffness(i as u64, StiffnessDistribution::LogUniform),
            pose: [0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.01, 0.02],
            wrench: [1.0 / 7.0, -2.0, 0.0, 1e-9, 0.0, 3.0],
            dq: [0.0, -0.1, 1e-300],
            c_g: (i % 2) as u8,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let recs: Vec<_> = (0..100).map(record).collect();
        write_records(&path, &recs).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_records(&path, &[record(0), record(1), record(2)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[1][..lines[1].len() / 2].to_string();
        lines[1] = cut;
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_records(&path).unwrap().is_empty());
    }

    #[test]
    fn invalid_record_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut r = record(0);
        r.k.0[3] = 1.0;
        write_records(&path, &[record(1), r]).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn unreachable_object_gives_empty_dataset() {
        let mesh = Arc::new(build_finger_mesh(&FingerParams::default()).unwrap());
        let huge = ObjectSpec {
            name: "slab".into(),
            shape: ShapeSpec::Box { half_extents: [0.3, 0.05, 0.3] },
            density: 8.0,
            yaw: 0.0,
        };
        let cfg = DataGenConfig { n_poses: 2, n_stiffness: 2, max_candidates: 4, ..Default::default() };
        let (recs, summary) =
            generate_dataset(&[huge], mesh, &SimParams::default(), &MotionScript::default(), &cfg, 1).unwrap();
        assert!(recs.is_empty());
        assert_eq!(summary.episodes_run, 0);
    }
}
