//! Acceptance checks, one line per criterion. Run with
//! `cargo test -p softgrip-core --test acceptance`.
//! Verdicts are printed; set `SOFTGRIP_ACCEPTANCE_STRICT=1` to also exit
//! non-zero when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use softgrip::codesign::{joint_optimize, l_opt, CodesignConfig, LossWeights, QuadraticObjective};
use softgrip::datagen::{default_primitives, prepare_poses, read_records, sample_stiffness, DataGenConfig, DatasetManifest, StiffnessDistribution};
use softgrip::femsim::{plate_press, PressParams, Scene, SimParams, StiffnessVector};
use softgrip::geometry::{build_finger_mesh, FingerParams, ShapeSdf};
use softgrip::pipeline::{
    deterministic_hashes, CodesignSummary, Evaluation, PipelineConfig, Run, Stage, DESIGN_CODESIGN, DESIGN_FIRST_POSE,
    DESIGN_SOFT, DESIGN_STIFF,
};
use softgrip::posegen::{l_init, max_penetration, perturb_pose, refine_pose, sample_candidate_poses};
use softgrip::surrogate::{timing_ratio, Architecture, SurrogateInput, SurrogateModel, GLOBAL_FEATURES};
use softgrip::tendon::{bending_moment_profile, place_waypoints};
use softgrip::{seed, Error, E_MAX, E_MIN, NUM_BLOCKS};

type Check = Result<(bool, String), Error>;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn run(lines: &mut Vec<Line>, id: usize, name: &'static str, limit_s: f64, f: impl FnOnce() -> Check) {
    let t = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f));
    let secs = t.elapsed().as_secs_f64();
    let (pass, mut detail) = match r {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(_) => (false, "panicked".into()),
    };
    let in_time = secs <= limit_s;
    if !in_time {
        detail.push_str(&format!("; over the {limit_s:.0} s limit"));
    }
    detail.push_str(&format!(" ({secs:.1} s)"));
    let line = Line { id, name, pass: pass && in_time, detail };
    print_line(&line);
    lines.push(line);
}

fn print_line(l: &Line) {
    println!("criterion {:>2} {} {}: {}", l.id, if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
}

fn waypoint_law() -> Check {
    let mut rng = seed::rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let length = rng.gen_range(0.06..0.14);
        let base_height = rng.gen_range(0.01..0.03);
        let fp = FingerParams { length, base_height, cut_angle: (base_height / length).atan(), ..Default::default() };
        for n in [7, 10] {
            let route = place_waypoints(&fp, n)?;
            for w in &route.waypoints {
                let r = 1.0 - w.arc / length;
                worst = worst.max((w.height - base_height * r * r).abs());
            }
        }
    }
    Ok((worst <= 1e-12, format!("max |h - H(1 - l/L)^2| = {worst:.2e} m")))
}

fn tip_conditions() -> Check {
    let fp = FingerParams::default();
    let f_t = 10.0;
    let route = place_waypoints(&fp, fp.segments + 1)?;
    let m = bending_moment_profile(&route, f_t);
    let m_tip = *m.last().unwrap();
    let delta = 1e-7 * fp.length;
    let slope = (m_tip - f_t * fp.tendon_height(fp.length - delta)) / delta;
    let bound = 1e-6 * m[0] / fp.length;
    Ok((m_tip == 0.0 && slope.abs() <= bound, format!("M(L) = {m_tip:e}, |dM/dl| = {:.2e} <= {bound:.2e}", slope.abs())))
}

fn uniform_pressure() -> Check {
    let k = StiffnessVector::uniform((E_MIN * E_MAX).sqrt());
    let press = PressParams { tension: 10.0, ..Default::default() };
    let up = plate_press(Arc::new(build_finger_mesh(&FingerParams::default())?), SimParams::default(), &k, &press)?;
    let ch = plate_press(Arc::new(build_finger_mesh(&FingerParams::constant_height())?), SimParams::default(), &k, &press)?;
    let (a, b) = (up.cv_from(0), ch.cv_from(0));
    Ok((a <= 0.5 * b, format!("contact-force CV {a:.3} (uniform pressure) vs {b:.3} (constant height), ratio {:.2}", a / b)))
}

fn simulator_sanity() -> Check {
    let t = 0.1;
    let drop = common::free_fall_drop(t);
    let exact = 0.5 * 9.81 * t * t;
    let fall_err = (drop - exact).abs() / exact;
    let (e, eps) = (4e6, 0.005);
    let (axial, _) = common::uniaxial_stress(e, 0.45, eps);
    let tet_err = (axial - e * eps).abs() / (e * eps);
    Ok((fall_err <= 0.01 && tet_err <= 0.05, format!("free fall error {:.3}%, uniaxial stress error {:.2}%", 100.0 * fall_err, 100.0 * tet_err)))
}

fn gradient_check() -> Check {
    let model = SurrogateModel::new(Architecture::default(), 7);
    let w = LossWeights::default();
    let mut rng = seed::rng(202);
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let points: Vec<[f64; 3]> =
            (0..64).map(|_| [rng.gen_range(-0.03..0.03), rng.gen_range(-0.12..-0.02), rng.gen_range(-0.02..0.02)]).collect();
        let globals: [f64; GLOBAL_FEATURES] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let u: [f64; NUM_BLOCKS] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
        let input = |u: &[f64; NUM_BLOCKS]| SurrogateInput { points: points.clone(), globals, stiffness: StiffnessVector::from_unit(u) };
        let g = model.grad_wrt_stiffness(&input(&u), &w)?;
        let floor = 1e-3 * g.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        for i in 0..NUM_BLOCKS {
            let (mut a, mut b) = (u, u);
            a[i] += eps;
            b[i] -= eps;
            let fd = (l_opt(&model.forward(&input(&a))?, &w) - l_opt(&model.forward(&input(&b))?, &w)) / (2.0 * eps);
            worst = worst.max((g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(floor));
        }
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e} over 10 points x 22 coordinates")))
}

fn speedup() -> Check {
    let mesh = Arc::new(build_finger_mesh(&FingerParams::default())?);
    let (name, shape) = default_primitives().into_iter().find(|(n, _)| n == "box").unwrap();
    let object = ShapeSdf::resting(shape.to_shape()?, 0.0, 0.0, 0.0, 8.0)?;
    let cfg = DataGenConfig::default();
    let (poses, _) = prepare_poses(&object, &mesh, &cfg, 5)?;
    let pose = poses.first().ok_or(Error::Ungraspable)?;
    let k = sample_stiffness(1, StiffnessDistribution::LogUniform);
    let script = PipelineConfig::default().script;
    let scene = Scene::new(mesh, object.clone(), SimParams::default())?;
    let model = SurrogateModel::new(Architecture::default(), 1);
    let input = SurrogateInput {
        points: pose.points.clone(),
        globals: softgrip::surrogate::context_features(object.center_of_mass().coords.into(), 8.0, &pose.pose),
        stiffness: k,
    };
    let t = timing_ratio(&model, &scene, &k, &pose.pose, &script, &input, 3, 200)?;
    Ok((
        t.ratio >= 100.0,
        format!("{name}: FEM episode {:.3} s, surrogate {:.2e} s, ratio {:.0}x", t.fem_median, t.surrogate_median, t.ratio),
    ))
}

fn quadratic_oracle() -> Check {
    let mut rng = seed::rng(303);
    let target: [f64; NUM_BLOCKS] = std::array::from_fn(|_| rng.gen_range(0.1..0.9));
    let objective = QuadraticObjective {
        targets: vec![target; 3],
        offsets: (0..3).map(|_| (0..10).map(|_| rng.gen_range(0.0..2.0)).collect()).collect(),
    };
    let r = joint_optimize(&objective, &StiffnessVector::uniform(E_MIN), &CodesignConfig::default())?;
    let err = r.u.iter().zip(target).fold(0.0f64, |a, (x, t)| a.max((x - t).abs()));
    let converged = r.objects.iter().all(|o| o.converged);
    let monotone = r.history.windows(2).skip(1).all(|w| w[1].total <= w[0].total);
    Ok((
        err <= 1e-3 && converged && monotone,
        format!(
            "max |u - u_hat| = {err:.2e}, all converged: {converged}, non-increasing: {monotone}, {} iterations",
            r.history.len()
        ),
    ))
}

fn pose_refinement() -> Check {
    let mesh = build_finger_mesh(&FingerParams::default())?;
    let cfg = DataGenConfig::default();
    let (mut total, mut ok, mut flagged, mut increased) = (0, 0, 0, 0);
    for (oi, (_, shape)) in default_primitives().into_iter().enumerate() {
        let object = ShapeSdf::resting(shape.to_shape()?, 0.0, 0.0, 0.0, 8.0)?;
        let s = seed::derive(404, "refine", oi as u64);
        let candidates = sample_candidate_poses(&object, mesh.params(), &cfg.sampler, 40, s)?;
        for (i, c) in candidates.iter().enumerate() {
            total += 1;
            let noisy = perturb_pose(c, &cfg.noise, seed::derive(s, "noise", i as u64))?;
            match refine_pose(&noisy, &object, &mesh, &cfg.init_weights, &cfg.sampler) {
                Ok(p) => {
                    if max_penetration(&p, &object, &mesh) <= 1e-3 {
                        ok += 1;
                    }
                    if l_init(&p, &object, &mesh, &cfg.init_weights) > l_init(&noisy, &object, &mesh, &cfg.init_weights) {
                        increased += 1;
                    }
                }
                Err(Error::InitializationFailed { .. }) => flagged += 1,
                Err(e) => return Err(e),
            }
        }
    }
    let frac = (ok + flagged) as f64 / total as f64;
    Ok((
        frac >= 0.9 && increased == 0,
        format!("{total} poses: {ok} within 1 mm, {flagged} flagged, {:.0}% accounted, L_init increased {increased} times", 100.0 * frac),
    ))
}

struct PipelineRun {
    run: Run,
    secs: f64,
    datagen_train_secs: f64,
}

fn pipeline(dir: &std::path::Path) -> Result<PipelineRun, Error> {
    let run = Run::new(PipelineConfig::default(), dir)?;
    let start = Instant::now();
    let mut datagen_train_secs = 0.0;
    for stage in Stage::ALL {
        let t = Instant::now();
        run.run_stage(stage)?;
        let s = t.elapsed().as_secs_f64();
        eprintln!("  {:<9} {s:7.1} s", stage.name());
        if matches!(stage, Stage::GenData | Stage::Train) {
            datagen_train_secs += s;
        }
    }
    Ok(PipelineRun { run, secs: start.elapsed().as_secs_f64(), datagen_train_secs })
}

fn learning(p: &PipelineRun) -> Check {
    let records = read_records(&p.run.path("dataset.jsonl"))?;
    let manifest: DatasetManifest = serde_json::from_str(&std::fs::read_to_string(p.run.path("dataset_manifest.json"))?)?;
    let failed: usize = manifest.summary.objects.iter().map(|o| o.failed_poses).sum();
    let csv = std::fs::read_to_string(p.run.path("train.csv"))?;
    let (_, rows) = softgrip::report::parse_numeric_csv(&csv)?;
    let returned = rows.iter().find(|r| r[3] == 1.0).unwrap_or(rows.last().unwrap());
    let (v0, vn) = (rows[0][2], returned[2]);
    let ratio = vn / v0;
    let in_time = p.datagen_train_secs <= 900.0;
    Ok((
        records.len() >= 600 && ratio <= 0.5 && in_time,
        format!(
            "{} records ({} failed initialisations excluded), validation L1 {v0:.4} -> {vn:.4} at epoch {} (ratio {ratio:.3}), gen-data + train {:.0} s",
            records.len(),
            failed,
            returned[0],
            p.datagen_train_secs
        ),
    ))
}

fn ordering(p: &PipelineRun) -> Check {
    let eval: Evaluation = serde_json::from_str(&std::fs::read_to_string(p.run.path("evaluation.json"))?)?;
    let rate = |d| eval.rate(d).unwrap_or(f64::NAN);
    let (cd, soft, stiff, first) = (rate(DESIGN_CODESIGN), rate(DESIGN_SOFT), rate(DESIGN_STIFF), rate(DESIGN_FIRST_POSE));
    let n = eval.rates[0].episodes;
    Ok((
        cd >= soft && cd >= stiff && cd >= first && p.secs <= 3600.0,
        format!(
            "success over {n} grasps: co-designed {cd:.2}, all-soft {soft:.2}, all-stiff {stiff:.2}; co-designed with first pose {first:.2}; pipeline {:.0} s",
            p.secs
        ),
    ))
}

fn reproducible(a: &PipelineRun, b: &PipelineRun) -> Check {
    let ma = a.run.manifest()?;
    let mb = b.run.manifest()?;
    let (ha, hb) = (deterministic_hashes(&ma), deterministic_hashes(&mb));
    let differing: Vec<&String> = ha.keys().chain(hb.keys()).filter(|k| ha.get(*k) != hb.get(*k)).collect();
    let ka: CodesignSummary = serde_json::from_str(&std::fs::read_to_string(a.run.path("codesign.json"))?)?;
    let kb: CodesignSummary = serde_json::from_str(&std::fs::read_to_string(b.run.path("codesign.json"))?)?;
    let same_k = ka.result.k.0.iter().zip(kb.result.k.0).all(|(x, y)| x.to_bits() == y.to_bits());
    let reports = ha.keys().filter(|k| k.starts_with("reports/")).count();
    Ok((
        differing.is_empty() && same_k && ha.contains_key("dataset.jsonl"),
        format!(
            "{} artifacts compared ({reports} reports), dataset sha256 {}, identical k*: {same_k}, differing: {differing:?}",
            ha.len(),
            ha.get("dataset.jsonl").map_or("-", |s| &s[..12])
        ),
    ))
}

fn main() {
    let mut lines = Vec::new();
    run(&mut lines, 1, "waypoint law", 1.0, waypoint_law);
    run(&mut lines, 2, "tip boundary conditions", 1.0, tip_conditions);
    run(&mut lines, 3, "uniform pressure", 120.0, uniform_pressure);
    run(&mut lines, 4, "simulator sanity", 30.0, simulator_sanity);
    run(&mut lines, 5, "surrogate gradient", 30.0, gradient_check);
    run(&mut lines, 7, "speedup", 300.0, speedup);
    run(&mut lines, 8, "co-design on analytic oracle", 10.0, quadratic_oracle);
    run(&mut lines, 10, "pose refinement", 300.0, pose_refinement);

    let dir_a = tempfile::tempdir().expect("temp dir");
    let dir_b = tempfile::tempdir().expect("temp dir");
    eprintln!("pipeline run 1 in {}", dir_a.path().display());
    let first = pipeline(dir_a.path());
    let second = match &first {
        Ok(_) => {
            eprintln!("pipeline run 2 in {}", dir_b.path().display());
            Some(pipeline(dir_b.path()))
        }
        Err(_) => None,
    };
    match &first {
        Ok(p) => {
            run(&mut lines, 6, "surrogate learning", f64::INFINITY, || learning(p));
            run(&mut lines, 9, "design ordering", f64::INFINITY, || ordering(p));
        }
        Err(e) => {
            for (id, name) in [(6, "surrogate learning"), (9, "design ordering")] {
                run(&mut lines, id, name, f64::INFINITY, || Ok((false, format!("pipeline failed: {e}"))));
            }
        }
    }
    match (&first, &second) {
        (Ok(a), Some(Ok(b))) => run(&mut lines, 11, "reproducibility", f64::INFINITY, || reproducible(a, b)),
        (_, Some(Err(e))) | (Err(e), _) => {
            let msg = format!("pipeline failed: {e}");
            run(&mut lines, 11, "reproducibility", f64::INFINITY, || Ok((false, msg)))
        }
        _ => unreachable!(),
    }

    lines.sort_by_key(|l| l.id);
    println!("\nacceptance summary");
    for l in &lines {
        print_line(l);
    }
    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| l.id.to_string()).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        println!("FAILED: {}", failed.join(", "));
        if std::env::var_os("SOFTGRIP_ACCEPTANCE_STRICT").is_some() {
            std::process::exit(1);
        }
    }
}
