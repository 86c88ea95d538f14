//! Stage orchestration: configuration, artifact layout and the run manifest.
//!
//! Every stage reads its upstream artifacts from the run directory and writes
//! its own, then records their hashes in `run_manifest.json`. All randomness
//! is derived from `PipelineConfig::seed`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::codesign::{joint_optimize, select_pose, Candidate, CodesignConfig, OptResult, SurrogateObjective};
use crate::datagen::{
    default_primitives, file_sha256, generate_dataset, object_set, prepare_poses, read_records, sha256_hex,
    write_records, DataGenConfig, DatasetManifest, ObjectSpec, ShapeSpec,
};
use crate::error::{Error, Result};
use crate::exec::map_indexed;
use crate::femsim::{evaluate_success, plate_press, PressParams, run_episode, MotionScript, Scene, SimParams, StiffnessVector};
use crate::geometry::{build_finger_mesh, FingerParams, TendonLaw, TetMesh};
use crate::posegen::{write_pose_set, GraspPose};
use crate::report::{csv_table, parse_numeric_csv, BarChart, LineChart, Series};
use crate::surrogate::{context_features, timing_ratio, train, SurrogateInput, SurrogateModel, TimingReport, TrainConfig};
use crate::tendon::{bending_moment_profile, place_waypoints, uniform_pressure_height};
use crate::{seed, E_MAX, E_MIN};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub name: String,
    pub shape: ShapeSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectsConfig {
    pub primitives: Vec<Primitive>,
    /// Densities the dataset covers (kg/m^3).
    pub train_densities: Vec<f64>,
    /// Density of the objects used for co-design and evaluation.
    pub eval_density: f64,
}

impl Default for ObjectsConfig {
    fn default() -> Self {
        Self {
            primitives: default_primitives().into_iter().map(|(name, shape)| Primitive { name, shape }).collect(),
            train_densities: vec![2.0, 8.0],
            eval_density: 8.0,
        }
    }
}

/// Artifact locations, relative to the run directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub model: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { dataset: "dataset.jsonl".into(), model: "model.bin".into(), reports: "reports".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Candidate sets per object; the first is the co-design set.
    pub trials: usize,
    pub fem_timing_reps: usize,
    pub surrogate_timing_reps: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { trials: 3, fem_timing_reps: 3, surrogate_timing_reps: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub paths: Paths,
    pub finger: FingerParams,
    pub sim: SimParams,
    pub script: MotionScript,
    pub objects: ObjectsConfig,
    pub datagen: DataGenConfig,
    pub train: TrainConfig,
    pub codesign: CodesignConfig,
    /// Uniform starting modulus of the co-design (Pa).
    pub k0: f64,
    pub evaluate: EvaluateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            paths: Paths::default(),
            finger: FingerParams::default(),
            sim: SimParams::default(),
            script: MotionScript { disturbance: 0.05, ..Default::default() },
            objects: ObjectsConfig::default(),
            datagen: DataGenConfig::default(),
            train: TrainConfig::default(),
            codesign: CodesignConfig::default(),
            k0: (E_MIN * E_MAX).sqrt(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads TOML (by extension) or JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            ));
        }
        self.finger.validate()?;
        self.sim.validate()?;
        self.script.validate()?;
        self.train.validate()?;
        self.codesign.validate()?;
        if self.objects.primitives.is_empty() {
            return Err(Error::validation("objects.primitives", "empty"));
        }
        for &d in self.objects.train_densities.iter().chain([&self.objects.eval_density]) {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::validation("objects.density", format!("must be positive, got {d}")));
            }
        }
        if self.objects.train_densities.is_empty() {
            return Err(Error::validation("objects.train_densities", "empty"));
        }
        if !(self.k0 >= self.codesign.k_min && self.k0 <= self.codesign.k_max) {
            return Err(Error::validation("k0", "outside the stiffness bounds"));
        }
        if self.evaluate.trials == 0 {
            return Err(Error::validation("evaluate.trials", "must be at least 1"));
        }
        if self.datagen.n_poses == 0 || self.datagen.n_stiffness == 0 || self.datagen.n_points == 0 {
            return Err(Error::validation("datagen", "counts must be positive"));
        }
        for (name, p) in [("paths.dataset", &self.paths.dataset), ("paths.model", &self.paths.model), ("paths.reports", &self.paths.reports)] {
            if p.as_os_str().is_empty() {
                return Err(Error::validation(name, "empty path"));
            }
        }
        Ok(())
    }

    pub fn train_objects(&self) -> Vec<ObjectSpec> {
        object_set(&self.primitive_list(), &self.objects.train_densities)
    }

    pub fn eval_objects(&self) -> Vec<ObjectSpec> {
        object_set(&self.primitive_list(), &[self.objects.eval_density])
    }

    fn primitive_list(&self) -> Vec<(String, ShapeSpec)> {
        self.objects.primitives.iter().map(|p| (p.name.clone(), p.shape.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Mesh,
    Route,
    Simulate,
    Poses,
    GenData,
    Train,
    Codesign,
    Select,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Mesh,
        Stage::Route,
        Stage::Simulate,
        Stage::Poses,
        Stage::GenData,
        Stage::Train,
        Stage::Codesign,
        Stage::Select,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mesh => "mesh",
            Stage::Route => "route",
            Stage::Simulate => "simulate",
            Stage::Poses => "poses",
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Codesign => "codesign",
            Stage::Select => "select",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::validation("stage", format!("unknown stage {s:?}")))
    }
}

/// Hashes of every artifact, grouped by the stage that wrote it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config_sha256: String,
    pub stages: BTreeMap<String, BTreeMap<String, String>>,
    /// Artifacts holding wall-clock measurements; they differ between runs.
    pub nondeterministic: Vec<String>,
}

/// Candidate poses of one object with their point clouds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub object_id: String,
    pub com: [f64; 3],
    pub density: f64,
    pub poses: Vec<[f64; 8]>,
    pub points: Vec<Vec<[f64; 3]>>,
}

impl CandidateSet {
    pub fn candidates(&self) -> Vec<Candidate> {
        self.poses
            .iter()
            .zip(&self.points)
            .map(|(p, pts)| Candidate {
                points: pts.clone(),
                globals: context_features(self.com, self.density, &GraspPose::from_array(*p)),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodesignSummary {
    pub k0: f64,
    pub result: OptResult,
    pub iterations: usize,
    pub all_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub object_id: String,
    pub index: usize,
    pub pose: [f64; 8],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub trial: usize,
    pub object_id: String,
    pub design: String,
    pub pose_index: usize,
    pub success: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignRate {
    pub design: String,
    pub successes: usize,
    pub episodes: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rates: Vec<DesignRate>,
    pub episodes: Vec<EvalEpisode>,
}

impl Evaluation {
    pub fn rate(&self, design: &str) -> Option<f64> {
        self.rates.iter().find(|r| r.design == design).map(|r| r.rate)
    }
}

pub const DESIGN_CODESIGN: &str = "codesign";
pub const DESIGN_SOFT: &str = "all_soft";
pub const DESIGN_STIFF: &str = "all_stiff";
pub const DESIGN_FIRST_POSE: &str = "codesign_first_pose";

/// A run directory plus the configuration driving it.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(serde_json::from_str(&text)?)
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

impl Run {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        std::fs::create_dir_all(&out)?;
        Ok(Self { cfg, out })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    fn dataset_path(&self) -> PathBuf {
        self.path(&self.cfg.paths.dataset)
    }

    fn model_path(&self) -> PathBuf {
        self.path(&self.cfg.paths.model)
    }

    fn reports_dir(&self) -> PathBuf {
        self.path(&self.cfg.paths.reports)
    }

    fn config_sha(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(&self.cfg)?.as_bytes()))
    }

    fn mesh(&self) -> Result<Arc<TetMesh>> {
        Ok(Arc::new(build_finger_mesh(&self.cfg.finger)?))
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let p = self.path(MANIFEST);
        if p.is_file() {
            read_json(&p)
        } else {
            Ok(RunManifest { schema_version: SCHEMA_VERSION, seed: self.cfg.seed, ..Default::default() })
        }
    }

    /// Runs one stage and records the hashes of what it wrote.
    pub fn run_stage(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        info!("stage {}", stage.name());
        let outputs = match stage {
            Stage::Mesh => self.stage_mesh()?,
            Stage::Route => self.stage_route()?,
            Stage::Simulate => self.stage_simulate()?,
            Stage::Poses => self.stage_poses()?,
            Stage::GenData => self.stage_gen_data()?,
            Stage::Train => self.stage_train()?,
            Stage::Codesign => self.stage_codesign()?,
            Stage::Select => self.stage_select()?,
            Stage::Evaluate => self.stage_evaluate()?,
            Stage::Report => self.stage_report()?,
        };
        let mut manifest = self.manifest()?;
        manifest.seed = self.cfg.seed;
        manifest.config_sha256 = self.config_sha()?;
        let mut hashes = BTreeMap::new();
        for p in &outputs {
            require(p)?;
            let rel = p.strip_prefix(&self.out).unwrap_or(p).to_string_lossy().replace('\\', "/");
            hashes.insert(rel, file_sha256(p)?);
        }
        manifest.stages.insert(stage.name().to_string(), hashes);
        let timing = self.reports_dir().join("timing.svg");
        let mut nondet = vec!["timing.json".to_string()];
        if let Ok(rel) = timing.strip_prefix(&self.out) {
            nondet.push(rel.to_string_lossy().replace('\\', "/"));
        }
        manifest.nondeterministic = nondet;
        write_json(&self.path(MANIFEST), &manifest)?;
        Ok(outputs)
    }

    pub fn run_all(&self) -> Result<()> {
        for s in Stage::ALL {
            self.run_stage(s)?;
        }
        Ok(())
    }

    fn stage_mesh(&self) -> Result<Vec<PathBuf>> {
        let mesh = self.mesh()?;
        let obj = self.path("mesh.obj");
        std::fs::write(&obj, mesh.to_obj())?;
        #[derive(Serialize)]
        struct Blocks<'a> {
            vertices: usize,
            tets: usize,
            volume: f64,
            watertight: bool,
            block_ids: &'a [u8],
            block_volumes: Vec<f64>,
            block_tet_counts: Vec<usize>,
        }
        mesh.check_positive_volumes()?;
        let blocks = self.path("blocks.json");
        write_json(
            &blocks,
            &Blocks {
                vertices: mesh.num_vertices(),
                tets: mesh.tets().len(),
                volume: mesh.volume(),
                watertight: mesh.is_watertight(),
                block_ids: mesh.block_ids(),
                block_volumes: mesh.block_volumes().to_vec(),
                block_tet_counts: mesh.block_tet_counts().to_vec(),
            },
        )?;
        Ok(vec![obj, blocks])
    }

    fn stage_route(&self) -> Result<Vec<PathBuf>> {
        let fp = self.cfg.finger;
        let n = fp.segments + 1;
        let route = place_waypoints(&fp, n)?;
        let route_path = self.path("route.json");
        std::fs::write(&route_path, route.to_json()? + "\n")?;

        let uniform = place_waypoints(&FingerParams { law: TendonLaw::UniformPressure, ..fp }, n)?;
        let constant = place_waypoints(&FingerParams { law: TendonLaw::ConstantHeight, ..fp }, n)?;
        let f_t = self.cfg.script.tension;
        let mu = bending_moment_profile(&uniform, f_t);
        let mc = bending_moment_profile(&constant, f_t);
        let m0 = fp.base_height * f_t;
        let rows: Vec<Vec<String>> = uniform
            .waypoints
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let ideal = uniform_pressure_height(w.arc, fp.length, fp.base_height) * f_t;
                vec![
                    format!("{:e}", w.arc / fp.length),
                    format!("{:e}", mu[i] / m0),
                    format!("{:e}", mc[i] / m0),
                    format!("{:e}", ideal / m0),
                ]
            })
            .collect();
        let profile = self.path("route_profile.csv");
        std::fs::write(&profile, csv_table(&["arc", "uniform_pressure", "constant_height", "quadratic"], &rows))?;

        // Flat-plate press with each routing; the constant-height finger has
        // no cut face, since that tendon would leave a tapered body.
        let k = StiffnessVector::uniform(self.cfg.k0);
        let press = PressParams::default();
        let up = plate_press(Arc::new(build_finger_mesh(&fp)?), self.cfg.sim, &k, &press)?;
        let ch = plate_press(Arc::new(build_finger_mesh(&FingerParams::constant_height())?), self.cfg.sim, &k, &press)?;
        let rows: Vec<Vec<String>> = (0..fp.segments)
            .map(|i| vec![i.to_string(), format!("{:e}", up.segment_forces[i]), format!("{:e}", ch.segment_forces[i])])
            .collect();
        let press_path = self.path("press_profile.csv");
        std::fs::write(&press_path, csv_table(&["segment", "uniform_pressure", "constant_height"], &rows))?;
        Ok(vec![route_path, profile, press_path])
    }

    fn stage_simulate(&self) -> Result<Vec<PathBuf>> {
        let mesh = self.mesh()?;
        let spec = self.cfg.eval_objects().remove(0);
        let object = spec.build()?;
        let (poses, _) = prepare_poses(&object, &mesh, &self.cfg.datagen, seed::derive(self.cfg.seed, "simulate", 0))?;
        let pose = poses.first().ok_or(Error::Ungraspable)?.pose;
        let scene = Scene::new(mesh, object, self.cfg.sim)?;
        let k = StiffnessVector::uniform(self.cfg.k0);
        let (outcome, trace) = run_episode(&scene, &k, &pose, &self.cfg.script)?;
        let trace_path = self.path("trace.csv");
        std::fs::write(&trace_path, trace.to_csv())?;
        let success = evaluate_success(&trace);
        let outcome_path = self.path("outcome.json");
        write_json(
            &outcome_path,
            &serde_json::json!({
                "object_id": spec.id(),
                "pose": pose.to_array(),
                "k": k,
                "outcome": outcome,
                "success": success,
                "substeps": trace.substeps,
                "max_mass_scale": trace.max_mass_scale,
            }),
        )?;
        Ok(vec![trace_path, outcome_path])
    }

    fn candidate_sets(&self, label: &str) -> Result<Vec<CandidateSet>> {
        let mesh = self.mesh()?;
        let mut sets = Vec::new();
        for (oi, spec) in self.cfg.eval_objects().iter().enumerate() {
            let object = spec.build()?;
            let (poses, _) = prepare_poses(&object, &mesh, &self.cfg.datagen, seed::derive(self.cfg.seed, label, oi as u64))?;
            sets.push(CandidateSet {
                object_id: spec.id(),
                com: object.center_of_mass().coords.into(),
                density: spec.density,
                poses: poses.iter().map(|p| p.pose.to_array()).collect(),
                points: poses.into_iter().map(|p| p.points).collect(),
            });
        }
        Ok(sets)
    }

    fn stage_poses(&self) -> Result<Vec<PathBuf>> {
        let mesh = self.mesh()?;
        let dir = self.path("poses");
        std::fs::create_dir_all(&dir)?;
        let mut outputs = Vec::new();
        let mut rows = Vec::new();
        for (oi, spec) in self.cfg.train_objects().iter().enumerate() {
            let object = spec.build()?;
            // Same seed as the dataset generator, so these are the training poses.
            let (valid, log) = prepare_poses(&object, &mesh, &self.cfg.datagen, seed::derive(self.cfg.seed, "poses", oi as u64))?;
            let p = dir.join(format!("{}.jsonl", spec.id()));
            write_pose_set(&p, &log)?;
            outputs.push(p);
            rows.push(vec![
                spec.id(),
                log.len().to_string(),
                valid.len().to_string(),
                (log.len() - log.iter().filter(|e| e.valid).count()).to_string(),
            ]);
        }
        let summary = dir.join("summary.csv");
        std::fs::write(&summary, csv_table(&["object", "candidates", "valid", "flagged"], &rows))?;
        outputs.push(summary);
        let cands = self.path("candidates.json");
        write_json(&cands, &self.candidate_sets("candidates")?)?;
        outputs.push(cands);
        Ok(outputs)
    }

    fn stage_gen_data(&self) -> Result<Vec<PathBuf>> {
        let mesh = self.mesh()?;
        let (records, summary) =
            generate_dataset(&self.cfg.train_objects(), mesh, &self.cfg.sim, &self.cfg.script, &self.cfg.datagen, self.cfg.seed)?;
        if records.is_empty() {
            return Err(Error::validation("dataset", "no records were generated"));
        }
        let data = self.dataset_path();
        if let Some(parent) = data.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_records(&data, &records)?;
        let manifest = DatasetManifest {
            root_seed: self.cfg.seed,
            config_sha256: self.config_sha()?,
            dataset_sha256: file_sha256(&data)?,
            objects: summary.objects.len(),
            n_poses: self.cfg.datagen.n_poses,
            n_stiffness: self.cfg.datagen.n_stiffness,
            n_points: self.cfg.datagen.n_points,
            summary,
        };
        let mpath = self.path("dataset_manifest.json");
        write_json(&mpath, &manifest)?;
        Ok(vec![data, mpath])
    }

    fn stage_train(&self) -> Result<Vec<PathBuf>> {
        let data = self.dataset_path();
        require(&data)?;
        let records = read_records(&data)?;
        let cfg = TrainConfig { seed: seed::derive(self.cfg.seed, "train", self.cfg.train.seed), ..self.cfg.train };
        let (model, report) = train(&records, &cfg)?;
        let mp = self.model_path();
        if let Some(parent) = mp.parent() {
            std::fs::create_dir_all(parent)?;
        }
        model.save(&mp)?;
        let csv = self.path("train.csv");
        std::fs::write(&csv, report.to_csv())?;
        Ok(vec![mp.clone(), SurrogateModel::sidecar_path(&mp), csv])
    }

    fn load_model(&self) -> Result<SurrogateModel> {
        let mp = self.model_path();
        require(&mp)?;
        require(&SurrogateModel::sidecar_path(&mp))?;
        SurrogateModel::load(&mp)
    }

    fn load_candidates(&self) -> Result<Vec<CandidateSet>> {
        read_json(&self.path("candidates.json"))
    }

    fn stage_codesign(&self) -> Result<Vec<PathBuf>> {
        let model = self.load_model()?;
        let sets = self.load_candidates()?;
        let cands: Vec<Vec<Candidate>> = sets.iter().filter(|s| !s.poses.is_empty()).map(|s| s.candidates()).collect();
        if cands.is_empty() {
            return Err(Error::EmptyCandidates);
        }
        let objective = SurrogateObjective::new(&model, self.cfg.codesign.weights, &cands, self.cfg.codesign.exec)?;
        let result = joint_optimize(&objective, &StiffnessVector::uniform(self.cfg.k0), &self.cfg.codesign)?;
        let log = self.path("codesign.csv");
        std::fs::write(&log, result.log_csv())?;
        let summary = CodesignSummary {
            k0: self.cfg.k0,
            iterations: result.history.len(),
            all_converged: result.objects.iter().all(|o| o.converged),
            result,
        };
        let json = self.path("codesign.json");
        write_json(&json, &summary)?;
        Ok(vec![log, json])
    }

    fn load_codesign(&self) -> Result<CodesignSummary> {
        read_json(&self.path("codesign.json"))
    }

    fn stage_select(&self) -> Result<Vec<PathBuf>> {
        let model = self.load_model()?;
        let sets = self.load_candidates()?;
        let k = self.load_codesign()?.result.k;
        let mut out = Vec::new();
        for s in sets.iter().filter(|s| !s.poses.is_empty()) {
            let index = select_pose(&model, &s.candidates(), &k, &self.cfg.codesign.weights)?;
            out.push(Selection { object_id: s.object_id.clone(), index, pose: s.poses[index] });
        }
        let p = self.path("selection.json");
        write_json(&p, &out)?;
        Ok(vec![p])
    }

    /// Success rates of the co-designed, all-soft and all-stiff stiffness with
    /// surrogate pose selection, and of the co-designed stiffness with the
    /// first candidate pose.
    pub fn evaluate(&self, model: &SurrogateModel, k_star: &StiffnessVector) -> Result<Evaluation> {
        let mesh = self.mesh()?;
        let w = self.cfg.codesign.weights;
        let mut trial_sets = vec![self.load_candidates()?];
        for t in 1..self.cfg.evaluate.trials {
            trial_sets.push(self.candidate_sets(&format!("eval/{t}"))?);
        }
        let designs = [
            (DESIGN_CODESIGN, *k_star, true),
            (DESIGN_SOFT, StiffnessVector::uniform(self.cfg.codesign.k_min), true),
            (DESIGN_STIFF, StiffnessVector::uniform(self.cfg.codesign.k_max), true),
            (DESIGN_FIRST_POSE, *k_star, false),
        ];
        let objects = self.cfg.eval_objects();
        let mut scenes = BTreeMap::new();
        for spec in &objects {
            scenes.insert(spec.id(), Scene::new(mesh.clone(), spec.build()?, self.cfg.sim)?);
        }
        let mut jobs = Vec::new();
        for (t, sets) in trial_sets.iter().enumerate() {
            for s in sets {
                if s.poses.is_empty() {
                    // No graspable pose: every design fails this object.
                    for (name, _, _) in &designs {
                        jobs.push((t, s.object_id.clone(), name.to_string(), None, StiffnessVector::uniform(self.cfg.k0)));
                    }
                    continue;
                }
                let cands = s.candidates();
                for (name, k, select) in &designs {
                    let idx = if *select { select_pose(model, &cands, k, &w)? } else { 0 };
                    jobs.push((t, s.object_id.clone(), name.to_string(), Some((idx, s.poses[idx])), *k));
                }
            }
        }
        let results = map_indexed(jobs.len(), self.cfg.datagen.exec, |i| -> Result<(bool, bool)> {
            let (_, id, _, pose, k) = &jobs[i];
            let Some((_, pose)) = pose else { return Ok((false, false)) };
            match run_episode(&scenes[id], k, &GraspPose::from_array(*pose), &self.cfg.script) {
                Ok((_, trace)) => Ok((evaluate_success(&trace), false)),
                Err(Error::Divergence { .. }) => Ok((false, true)),
                Err(e) => Err(e),
            }
        });
        let mut episodes = Vec::new();
        for ((t, id, design, pose, _), r) in jobs.into_iter().zip(results) {
            let (success, diverged) = r?;
            episodes.push(EvalEpisode {
                trial: t,
                object_id: id,
                design,
                pose_index: pose.map_or(usize::MAX, |p| p.0),
                success,
                diverged,
            });
        }
        let rates = designs
            .iter()
            .map(|(name, _, _)| {
                let mine: Vec<&EvalEpisode> = episodes.iter().filter(|e| e.design == *name).collect();
                let successes = mine.iter().filter(|e| e.success).count();
                DesignRate {
                    design: name.to_string(),
                    successes,
                    episodes: mine.len(),
                    rate: if mine.is_empty() { 0.0 } else { successes as f64 / mine.len() as f64 },
                }
            })
            .collect();
        Ok(Evaluation { rates, episodes })
    }

    fn stage_evaluate(&self) -> Result<Vec<PathBuf>> {
        let model = self.load_model()?;
        require(&self.path("selection.json"))?;
        let k_star = self.load_codesign()?.result.k;
        let eval = self.evaluate(&model, &k_star)?;
        let json = self.path("evaluation.json");
        write_json(&json, &eval)?;
        let rows: Vec<Vec<String>> = eval
            .rates
            .iter()
            .map(|r| vec![r.design.clone(), r.successes.to_string(), r.episodes.to_string(), format!("{:.4}", r.rate)])
            .collect();
        let csv = self.path("success.csv");
        std::fs::write(&csv, csv_table(&["design", "successes", "episodes", "rate"], &rows))?;

        let mut outputs = vec![json, csv];
        if let Some(timing) = self.measure_timing(&model, &k_star)? {
            let p = self.path("timing.json");
            write_json(&p, &timing)?;
            outputs.push(p);
        }
        Ok(outputs)
    }

    fn measure_timing(&self, model: &SurrogateModel, k: &StiffnessVector) -> Result<Option<TimingReport>> {
        let sets = self.load_candidates()?;
        let Some((set, spec)) = sets.iter().zip(self.cfg.eval_objects()).find(|(s, _)| !s.poses.is_empty()) else {
            return Ok(None);
        };
        let scene = Scene::new(self.mesh()?, spec.build()?, self.cfg.sim)?;
        let pose = GraspPose::from_array(set.poses[0]);
        let input = SurrogateInput { points: set.points[0].clone(), globals: set.candidates()[0].globals, stiffness: *k };
        let reps = self.cfg.evaluate;
        match timing_ratio(model, &scene, k, &pose, &self.cfg.script, &input, reps.fem_timing_reps, reps.surrogate_timing_reps) {
            Ok(t) => Ok(Some(t)),
            Err(Error::Divergence { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn stage_report(&self) -> Result<Vec<PathBuf>> {
        let inputs = ["train.csv", "codesign.csv", "route_profile.csv", "press_profile.csv", "success.csv"].map(|f| self.path(f));
        for p in &inputs {
            require(p)?;
        }
        let [train_csv, codesign_csv, profile_csv, press_csv, success_csv] = inputs;
        let dir = self.reports_dir();
        std::fs::create_dir_all(&dir)?;
        let mut outputs = Vec::new();
        let mut emit = |name: &str, body: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            outputs.push(p);
            Ok(())
        };

        let (_, train_rows) = parse_numeric_csv(&std::fs::read_to_string(&train_csv)?)?;
        let col = |rows: &[Vec<f64>], c: usize| -> Vec<(f64, f64)> {
            rows.iter().filter(|r| r.len() > c && r[c].is_finite()).map(|r| (r[0], r[c])).collect()
        };
        emit(
            "loss_curves.svg",
            LineChart {
                title: "Surrogate training".into(),
                x_label: "epoch".into(),
                y_label: "L1 (normalised)".into(),
                series: vec![
                    Series { label: "train".into(), points: col(&train_rows, 1) },
                    Series { label: "validation".into(), points: col(&train_rows, 2) },
                ],
                log_y: true,
            }
            .to_svg(),
        )?;

        let (header, cd_rows) = parse_numeric_csv(&std::fs::read_to_string(&codesign_csv)?)?;
        let grad_col = header.iter().position(|h| h == "grad_norm").unwrap_or(header.len().saturating_sub(2));
        let mut best_series = vec![Series { label: "total".into(), points: col(&cd_rows, 1) }];
        for (c, h) in header.iter().enumerate().filter(|(_, h)| h.starts_with("best_")) {
            best_series.push(Series { label: h.replace("best_", "object "), points: col(&cd_rows, c) });
        }
        emit(
            "codesign_loss.svg",
            LineChart {
                title: "Co-design loss".into(),
                x_label: "iteration".into(),
                y_label: "loss".into(),
                series: best_series,
                log_y: false,
            }
            .to_svg(),
        )?;
        emit(
            "grad_norm.svg",
            LineChart {
                title: "Stiffness gradient norm".into(),
                x_label: "iteration".into(),
                y_label: "|grad|".into(),
                series: vec![Series { label: "|grad u|".into(), points: col(&cd_rows, grad_col) }],
                log_y: true,
            }
            .to_svg(),
        )?;

        let (_, prof) = parse_numeric_csv(&std::fs::read_to_string(&profile_csv)?)?;
        emit(
            "pressure_profile.svg",
            LineChart {
                title: "Bending moment along the finger".into(),
                x_label: "l / L".into(),
                y_label: "M / M(0)".into(),
                series: vec![
                    Series { label: "uniform pressure".into(), points: col(&prof, 1) },
                    Series { label: "constant height".into(), points: col(&prof, 2) },
                    Series { label: "(1 - l/L)^2".into(), points: col(&prof, 3) },
                ],
                log_y: false,
            }
            .to_svg(),
        )?;

        let (_, press) = parse_numeric_csv(&std::fs::read_to_string(&press_csv)?)?;
        emit(
            "contact_force.svg",
            LineChart {
                title: format!("Plate press, f_T = {} N", PressParams::default().tension),
                x_label: "segment (base to tip)".into(),
                y_label: "contact force (N)".into(),
                series: vec![
                    Series { label: "uniform pressure".into(), points: col(&press, 1) },
                    Series { label: "constant height".into(), points: col(&press, 2) },
                ],
                log_y: false,
            }
            .to_svg(),
        )?;

        let success_text = std::fs::read_to_string(&success_csv)?;
        let bars: Vec<(String, f64)> = success_text
            .lines()
            .skip(1)
            .filter_map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                Some((f.first()?.to_string(), f.get(3)?.parse().ok()?))
            })
            .collect();
        emit("success.svg", BarChart { title: "Grasp success".into(), y_label: "success rate".into(), bars }.to_svg())?;
        emit("success.csv", success_text)?;

        let kept = train_rows.iter().find(|r| r.get(3) == Some(&1.0)).or(train_rows.last());
        let kept_col = |c: usize| kept.and_then(|r| r.get(c).copied()).unwrap_or(f64::NAN);
        let first_val = train_rows.first().and_then(|r| r.get(2).copied()).unwrap_or(f64::NAN);
        let codesign = self.load_codesign()?;
        let mut rows = vec![
            vec!["returned_epoch".into(), format!("{}", kept_col(0))],
            vec!["final_train_l1".into(), format!("{:e}", kept_col(1))],
            vec!["final_val_l1".into(), format!("{:e}", kept_col(2))],
            vec!["val_l1_ratio".into(), format!("{:.6}", kept_col(2) / first_val)],
            vec!["codesign_iterations".into(), codesign.iterations.to_string()],
            vec!["codesign_converged".into(), codesign.all_converged.to_string()],
        ];
        for (i, e) in codesign.result.k.0.iter().enumerate() {
            rows.push(vec![format!("k_{i}"), format!("{e:e}")]);
        }
        emit("summary.csv", csv_table(&["key", "value"], &rows))?;

        let timing_path = self.path("timing.json");
        if timing_path.is_file() {
            let t: TimingReport = read_json(&timing_path)?;
            emit(
                "timing.svg",
                BarChart {
                    title: format!("Time per evaluation (ratio {:.0}x)", t.ratio),
                    y_label: "seconds".into(),
                    bars: vec![("FEM episode".into(), t.fem_median), ("surrogate".into(), t.surrogate_median)],
                }
                .to_svg(),
            )?;
        }
        Ok(outputs)
    }
}

pub fn config_json(cfg: &PipelineConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(cfg)?)
}

/// Every deterministic artifact of a run with its hash, for comparing runs.
pub fn deterministic_hashes(manifest: &RunManifest) -> BTreeMap<String, String> {
    manifest
        .stages
        .values()
        .flatten()
        .filter(|(p, _)| !manifest.nondeterministic.contains(p))
        .map(|(p, h)| (p.clone(), h.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
        let toml_text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<PipelineConfig>(&toml_text).unwrap(), cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"seed": 9, "evaluate": {"trials": 1}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.evaluate.trials, 1);
        assert_eq!(cfg.evaluate.surrogate_timing_reps, 200);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sede": 9}"#).is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = PipelineConfig { schema_version: 7, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Validation { field, .. }) if field == "schema_version"));
        cfg.schema_version = SCHEMA_VERSION;
        cfg.k0 = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Validation { field, .. }) if field == "k0"));
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("fly".parse::<Stage>().is_err());
    }

    #[test]
    fn report_on_empty_dir_is_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(PipelineConfig::default(), dir.path()).unwrap();
        match run.run_stage(Stage::Report) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with("train.csv")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mesh_and_route_stages_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(PipelineConfig::default(), dir.path()).unwrap();
        run.run_stage(Stage::Mesh).unwrap();
        run.run_stage(Stage::Route).unwrap();
        let a = run.manifest().unwrap();
        run.run_stage(Stage::Mesh).unwrap();
        run.run_stage(Stage::Route).unwrap();
        assert_eq!(a, run.manifest().unwrap());
        assert_eq!(a.stages["mesh"].len(), 2);
        let (_, rows) = parse_numeric_csv(&std::fs::read_to_string(dir.path().join("route_profile.csv")).unwrap()).unwrap();
        for r in rows {
            assert!((r[1] - r[3]).abs() < 1e-12);
        }
    }
}
