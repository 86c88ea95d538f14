use std::sync::Arc;

use nalgebra::{Isometry3, Matrix3, Matrix6, Point3, Translation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::material::{MaterialMap, StableNeoHookean};
use crate::error::{Error, Result};
use crate::geometry::{ShapeSdf, TetMesh, GROUND_HEIGHT};
use crate::posegen::GraspPose;
use crate::tendon::{self, TendonRoute};

/// Numerical and physical settings of the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    pub poisson: f64,
    /// Gripper material density (kg/m^3).
    pub density: f64,
    pub gravity: f64,
    /// Mass-proportional damping coefficient (1/s), relative to the palm motion.
    pub damping: f64,
    /// Penalty stiffness per contact point (N/m).
    pub contact_stiffness: f64,
    /// Normal contact damping as a fraction of critical for the contact pair.
    pub contact_damping_ratio: f64,
    pub friction: f64,
    /// Tangential viscosity of the Coulomb-capped friction (N s/m).
    pub friction_viscosity: f64,
    /// Recording interval; one frame of the motion script.
    pub frame_dt: f64,
    pub cfl_safety: f64,
    /// Substeps per frame above which element masses are scaled instead.
    pub max_substeps: usize,
    pub mass_scaling: bool,
    pub max_object_subcycles: usize,
    /// Pin the finger base faces to the palm.
    pub fix_base: bool,
    /// Fingers whose tendon is actuated.
    pub active_fingers: [bool; 2],
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            poisson: 0.45,
            density: 1150.0,
            gravity: 9.81,
            damping: 20.0,
            contact_stiffness: 1e5,
            contact_damping_ratio: 0.5,
            friction: 0.6,
            friction_viscosity: 2.0,
            frame_dt: 1.0 / 4000.0,
            cfl_safety: 0.5,
            max_substeps: 12,
            mass_scaling: true,
            max_object_subcycles: 64,
            fix_base: true,
            active_fingers: [true, true],
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("density", self.density),
            ("contact_stiffness", self.contact_stiffness),
            ("frame_dt", self.frame_dt),
            ("cfl_safety", self.cfl_safety),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        let non_negative = [
            ("gravity", self.gravity),
            ("damping", self.damping),
            ("contact_damping_ratio", self.contact_damping_ratio),
            ("friction", self.friction),
            ("friction_viscosity", self.friction_viscosity),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(name, "must be non-negative"));
            }
        }
        if !(0.0..0.5).contains(&self.poisson) {
            return Err(Error::validation("poisson", "must lie in [0, 0.5)"));
        }
        if self.max_substeps == 0 || self.max_object_subcycles == 0 {
            return Err(Error::validation("max_substeps", "must be at least 1"));
        }
        Ok(())
    }
}

/// Gripper mesh, bound tendon routes, and the object.
#[derive(Debug, Clone)]
pub struct Scene {
    pub mesh: Arc<TetMesh>,
    pub routes: [TendonRoute; 2],
    pub object: ShapeSdf,
    /// Treat the object as immovable (a fixture such as a plate).
    pub object_fixed: bool,
    pub params: SimParams,
}

impl Scene {
    pub fn new(mesh: Arc<TetMesh>, object: ShapeSdf, params: SimParams) -> Result<Self> {
        params.validate()?;
        let fp = mesh.params();
        let mut routes = [
            tendon::place_waypoints(fp, fp.segments + 1)?,
            tendon::place_waypoints(fp, fp.segments + 1)?,
        ];
        for (f, r) in routes.iter_mut().enumerate() {
            r.bind(&mesh, f)?;
        }
        Ok(Self { mesh, routes, object, object_fixed: false, params })
    }
}

/// Inputs held constant over one substep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Controls {
    pub tension: f64,
    /// Palm displacement from its starting position (world).
    pub base_offset: Vector3<f64>,
    pub base_velocity: Vector3<f64>,
    /// External force on the object's centre of mass (world).
    pub disturbance: Vector3<f64>,
}

impl Default for Controls {
    fn default() -> Self {
        Self {
            tension: 0.0,
            base_offset: Vector3::zeros(),
            base_velocity: Vector3::zeros(),
            disturbance: Vector3::zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub x: Vec<Point3<f64>>,
    pub v: Vec<Vector3<f64>>,
    pub object_pose: Isometry3<f64>,
    pub object_velocity: Vector3<f64>,
    /// Angular velocity in world axes.
    pub object_angular: Vector3<f64>,
    pub time: f64,
    /// Gripper contact wrench on the object over the last substep: force,
    /// then torque about the centre of mass.
    pub wrench: [f64; 6],
    pub gripper_contact: bool,
    pub ground_contact: bool,
    contacts: usize,
}

#[derive(Debug, Clone, Copy)]
struct Tet {
    v: [usize; 4],
    dm_inv: Matrix3<f64>,
    volume: f64,
    law: StableNeoHookean,
}

/// One object contact point prepared for the implicit velocity solve.
#[derive(Debug, Clone, Copy)]
struct Contact {
    point: Point3<f64>,
    /// Direction the normal force pushes the object.
    dir: Vector3<f64>,
    spring: f64,
    damping: f64,
    other_velocity: Vector3<f64>,
    /// Gripper vertex, `None` for the ground.
    vertex: Option<usize>,
    normal_damped: bool,
    /// Tangential viscosity while sticking.
    viscosity: f64,
    /// Explicit capped friction force, or `None` while sticking viscously.
    slip: Option<Vector3<f64>>,
}

/// Precomputed element data and masses for one scene, material and pose.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    scene: &'a Scene,
    tets: Vec<Tet>,
    mass: Vec<f64>,
    gravity_mass: Vec<f64>,
    base: Vec<bool>,
    rest: Vec<Point3<f64>>,
    finger_axis: [Vector3<f64>; 2],
    route_vertices: [Vec<usize>; 2],
    object_mass: f64,
    object_inertia: Matrix3<f64>,
    object_inertia_min: f64,
    object_radius: f64,
    substeps: usize,
    dt: f64,
    max_mass_scale: f64,
}

fn skew(r: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -r.z, r.y, r.z, 0.0, -r.x, -r.y, r.x, 0.0)
}

impl<'a> Simulator<'a> {
    /// Prepares a simulation of `scene` with the gripper placed at `pose`.
    pub fn new(scene: &'a Scene, materials: &MaterialMap, pose: &GraspPose) -> Result<(Self, SimState)> {
        let p = &scene.params;
        let mesh = &*scene.mesh;
        if materials.youngs.len() != mesh.tets().len() {
            return Err(Error::ShapeMismatch {
                role: "material map".into(),
                expected: mesh.tets().len(),
                actual: materials.youngs.len(),
            });
        }
        let rest = mesh.placed(pose);
        let n = rest.len();

        // Stable explicit step per element from its smallest altitude and
        // dilatational wave speed.
        let mut tets = Vec::with_capacity(mesh.tets().len());
        let mut altitude = Vec::with_capacity(mesh.tets().len());
        let mut modulus = Vec::with_capacity(mesh.tets().len());
        let mut dt_phys = f64::INFINITY;
        for (t, &idx) in mesh.tets().iter().enumerate() {
            let [a, b, c, d] = idx.map(|i| rest[i]);
            let dm = Matrix3::from_columns(&[b - a, c - a, d - a]);
            let volume = dm.determinant() / 6.0;
            let dm_inv = dm
                .try_inverse()
                .ok_or_else(|| Error::Mesh(format!("tet {t} is degenerate")))?;
            let faces = [(a, b, c), (a, b, d), (a, c, d), (b, c, d)];
            let max_area = faces
                .iter()
                .map(|(p, q, r)| 0.5 * (q - p).cross(&(r - p)).norm())
                .fold(0.0, f64::max);
            let h = 3.0 * volume / max_area;
            let e = materials.youngs[t];
            let nu = materials.poisson;
            let m = e * (1.0 - nu) / ((1.0 + nu) * (1.0 - 2.0 * nu));
            dt_phys = dt_phys.min(p.cfl_safety * h / (m / materials.density).sqrt());
            altitude.push(h);
            modulus.push(m);
            tets.push(Tet { v: idx, dm_inv, volume, law: StableNeoHookean::new(e, nu) });
        }
        let required = (p.frame_dt / dt_phys).ceil().max(1.0) as usize;
        let substeps = if p.mass_scaling { p.max_substeps } else { required };
        let dt = p.frame_dt / substeps as f64;

        let mut mass = vec![0.0; n];
        let mut gravity_mass = vec![0.0; n];
        let mut max_mass_scale = 1.0f64;
        for (t, tet) in tets.iter().enumerate() {
            let rho_needed = modulus[t] * (dt / (p.cfl_safety * altitude[t])).powi(2);
            let rho = materials.density.max(rho_needed);
            max_mass_scale = max_mass_scale.max(rho / materials.density);
            for &v in &tet.v {
                mass[v] += rho * tet.volume / 4.0;
                gravity_mass[v] += materials.density * tet.volume / 4.0;
            }
        }
        if p.mass_scaling {
            // Keep single penalty contacts stable at this step.
            let floor = p.contact_stiffness * dt * dt;
            for m in mass.iter_mut() {
                *m = m.max(floor);
            }
        }

        let base_local = mesh.base_vertices();
        let mut base = vec![false; n];
        if p.fix_base {
            for v in base_local {
                base[v] = true;
            }
        }
        let rot = pose.isometry().rotation;
        let fp = mesh.params();
        let finger_axis = [
            rot * fp.local_axis_to_gripper(0, &Vector3::x()),
            rot * fp.local_axis_to_gripper(1, &Vector3::x()),
        ];
        let route_vertices = [scene.routes[0].vertices.clone(), scene.routes[1].vertices.clone()];
        if route_vertices.iter().any(|r| r.is_empty()) {
            return Err(Error::Mesh("tendon routes are not bound to the mesh".into()));
        }

        let object_inertia = scene.object.local_inertia();
        let object_inertia_min = object_inertia.symmetric_eigenvalues().min();
        let sim = Self {
            scene,
            tets,
            mass,
            gravity_mass,
            base,
            rest: rest.clone(),
            finger_axis,
            route_vertices,
            object_mass: scene.object.mass(),
            object_inertia,
            object_inertia_min,
            object_radius: scene.object.bounding_radius(),
            substeps,
            dt,
            max_mass_scale,
        };
        let state = SimState {
            x: rest,
            v: vec![Vector3::zeros(); n],
            object_pose: scene.object.pose,
            object_velocity: Vector3::zeros(),
            object_angular: Vector3::zeros(),
            time: 0.0,
            wrench: [0.0; 6],
            gripper_contact: false,
            ground_contact: false,
            contacts: 0,
        };
        Ok((sim, state))
    }

    /// Substeps per recorded frame.
    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Internal time step.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Largest ratio of inertial to physical element density.
    pub fn max_mass_scale(&self) -> f64 {
        self.max_mass_scale
    }

    /// Inertial vertex masses (including any scaling).
    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn object_mass(&self) -> f64 {
        self.object_mass
    }

    /// Elastic nodal forces of the current configuration.
    pub fn elastic_forces(&self, x: &[Point3<f64>], out: &mut [Vector3<f64>]) {
        for t in &self.tets {
            let [a, b, c, d] = t.v;
            let x0 = x[a];
            let ds = Matrix3::from_columns(&[x[b] - x0, x[c] - x0, x[d] - x0]);
            let f = ds * t.dm_inv;
            let pk = t.law.first_piola(&f);
            let h = pk * t.dm_inv.transpose() * (-t.volume);
            let f1 = h.column(0).into_owned();
            let f2 = h.column(1).into_owned();
            let f3 = h.column(2).into_owned();
            out[b] += f1;
            out[c] += f2;
            out[d] += f3;
            out[a] -= f1 + f2 + f3;
        }
    }

    /// Tendon point forces at the current configuration as `(vertex, force)`.
    pub fn tendon_nodal_forces(&self, x: &[Point3<f64>], tension: f64) -> Result<Vec<(usize, Vector3<f64>)>> {
        let mut out = Vec::new();
        for f in 0..2 {
            if !self.scene.params.active_fingers[f] || tension == 0.0 {
                continue;
            }
            let verts = &self.route_vertices[f];
            let pos: Vec<Point3<f64>> = verts.iter().map(|&v| x[v]).collect();
            let normals = tendon::incoming_normals(&pos, &self.finger_axis[f])?;
            let forces = tendon::point_forces(&pos, &normals, tension)?;
            out.extend(verts.iter().copied().zip(forces));
        }
        Ok(out)
    }

    /// Normal penalty forces the object currently exerts on each gripper
    /// vertex (zero where there is no contact).
    pub fn object_contact_forces(&self, st: &SimState) -> Vec<Vector3<f64>> {
        let k = self.scene.params.contact_stiffness;
        st.x.iter()
            .map(|p| {
                let (d, n) = self.scene.object.distance_normal_at(&st.object_pose, p);
                if d < 0.0 {
                    n * (-d * k)
                } else {
                    Vector3::zeros()
                }
            })
            .collect()
    }

    /// Advances by `dt`, split into internal substeps, with fixed controls.
    pub fn step(&self, st: &mut SimState, ctl: &Controls, dt: f64) -> Result<()> {
        if !(dt > 0.0) {
            return Err(Error::validation("dt", "must be positive"));
        }
        let n = ((dt / self.dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let h = dt / n as f64;
        for _ in 0..n {
            self.substep(st, ctl, h)?;
        }
        Ok(())
    }

    /// One semi-implicit update of length `h`.
    pub fn substep(&self, st: &mut SimState, ctl: &Controls, h: f64) -> Result<()> {
        let p = &self.scene.params;
        let n = st.x.len();
        let mut force = vec![Vector3::zeros(); n];
        self.elastic_forces(&st.x, &mut force);

        let g = Vector3::new(0.0, -p.gravity, 0.0);
        for v in 0..n {
            force[v] += g * self.gravity_mass[v] - (st.v[v] - ctl.base_velocity) * (p.damping * self.mass[v]);
        }
        for (v, f) in self.tendon_nodal_forces(&st.x, ctl.tension)? {
            force[v] += f;
        }

        // Gripper against the ground.
        let k = p.contact_stiffness;
        for &v in self.scene.mesh.surface_vertices() {
            let d = st.x[v].y - GROUND_HEIGHT;
            if d < 0.0 {
                let c = 2.0 * p.contact_damping_ratio * (k * self.mass[v]).sqrt();
                let fn_ = (-d * k - c * st.v[v].y).max(0.0);
                let vt = Vector3::new(st.v[v].x, 0.0, st.v[v].z);
                force[v] += Vector3::y() * fn_ + friction(&vt, fn_, p);
            }
        }

        self.object_update(st, ctl, h, &mut force);

        for v in 0..n {
            if self.base[v] {
                st.v[v] = ctl.base_velocity;
                st.x[v] = self.rest[v] + ctl.base_offset;
            } else {
                st.v[v] += force[v] * (h / self.mass[v]);
                st.x[v] += st.v[v] * h;
            }
        }
        st.time += h;
        Ok(())
    }

    fn object_update(&self, st: &mut SimState, ctl: &Controls, h: f64, force: &mut [Vector3<f64>]) {
        let p = &self.scene.params;
        let k = p.contact_stiffness;
        let obj = &self.scene.object;
        let margin = 0.005 + self.object_radius;
        let centre = Point3::from(st.object_pose.translation.vector);
        let candidates: Vec<usize> = self
            .scene
            .mesh
            .surface_vertices()
            .iter()
            .copied()
            .filter(|&v| (st.x[v] - centre).norm() < margin + st.v[v].norm() * h)
            .collect();

        let m = self.object_mass;
        let lever = self.object_radius * self.object_radius / self.object_inertia_min;
        let n_c = (st.contacts + 2) as f64;
        let omega = (k * n_c * (1.0 / m + lever)).sqrt();
        let subcycles = if self.scene.object_fixed {
            1
        } else {
            ((h * omega / 0.5).ceil() as usize).clamp(1, p.max_object_subcycles)
        };
        let tau = h / subcycles as f64;

        let mut wrench = Vector6::zeros();
        let mut reaction = vec![Vector3::zeros(); candidates.len()];
        let mut gripper_contact = false;
        let mut ground_contact = false;
        let mut contacts_seen = 0;

        for j in 0..subcycles {
            let pose = st.object_pose;
            let c = Point3::from(pose.translation.vector);
            let mut contacts: Vec<Contact> = Vec::new();
            if !self.scene.object_fixed {
                for q in obj.ground_probes(&pose) {
                    let d = q.y - GROUND_HEIGHT;
                    if d < 0.0 {
                        contacts.push(Contact {
                            point: q,
                            dir: Vector3::y(),
                            spring: -d * k,
                            damping: 2.0 * p.contact_damping_ratio * (k * m).sqrt(),
                            other_velocity: Vector3::zeros(),
                            vertex: None,
                            normal_damped: true,
                            viscosity: p.friction_viscosity,
                            slip: None,
                        });
                    }
                }
            }
            let ground_count = contacts.len();
            for (ci, &v) in candidates.iter().enumerate() {
                let xv = st.x[v] + st.v[v] * (j as f64 * tau);
                let (d, n) = obj.distance_normal_at(&pose, &xv);
                if d < 0.0 {
                    let m_red = if self.scene.object_fixed {
                        self.mass[v]
                    } else {
                        m * self.mass[v] / (m + self.mass[v])
                    };
                    contacts.push(Contact {
                        point: xv,
                        dir: -n,
                        spring: -d * k,
                        damping: 2.0 * p.contact_damping_ratio * (k * m_red).sqrt(),
                        other_velocity: st.v[v],
                        vertex: Some(ci),
                        normal_damped: true,
                        viscosity: p.friction_viscosity,
                        slip: None,
                    });
                }
            }
            ground_contact |= ground_count > 0;
            gripper_contact |= contacts.len() > ground_count;
            contacts_seen = contacts_seen.max(contacts.len());

            let (vel, ang) = if self.scene.object_fixed {
                (Vector3::zeros(), Vector3::zeros())
            } else {
                self.solve_object_velocity(st, ctl, &mut contacts, tau)
            };
            for ct in &contacts {
                let f = contact_force(ct, &c, &vel, &ang);
                if let Some(ci) = ct.vertex {
                    reaction[ci] -= f / subcycles as f64;
                    let r = ct.point - c;
                    let tq = r.cross(&f);
                    wrench += Vector6::new(f.x, f.y, f.z, tq.x, tq.y, tq.z) / subcycles as f64;
                }
            }
            if !self.scene.object_fixed {
                st.object_velocity = vel;
                st.object_angular = ang;
                let t = pose.translation.vector + vel * tau;
                let rot = UnitQuaternion::from_scaled_axis(ang * tau) * pose.rotation;
                st.object_pose = Isometry3::from_parts(Translation3::from(t), rot);
            }
        }
        for (ci, &v) in candidates.iter().enumerate() {
            force[v] += reaction[ci];
        }
        st.wrench = [wrench[0], wrench[1], wrench[2], wrench[3], wrench[4], wrench[5]];
        st.gripper_contact = gripper_contact;
        st.ground_contact = ground_contact;
        st.contacts = contacts_seen;
    }

    /// Solves for the object's velocity after one subcycle, with contact
    /// damping and sticking friction treated implicitly.
    fn solve_object_velocity(
        &self,
        st: &SimState,
        ctl: &Controls,
        contacts: &mut [Contact],
        tau: f64,
    ) -> (Vector3<f64>, Vector3<f64>) {
        let p = &self.scene.params;
        let m = self.object_mass;
        let rot = st.object_pose.rotation.to_rotation_matrix();
        let inertia = rot.matrix() * self.object_inertia * rot.matrix().transpose();
        let c = Point3::from(st.object_pose.translation.vector);
        let w = st.object_angular;
        let ext_f = Vector3::new(0.0, -p.gravity * m, 0.0) + ctl.disturbance;
        let ext_t = -w.cross(&(inertia * w));

        // Decide friction regime from the current velocities.
        for ct in contacts.iter_mut() {
            let u = st.object_velocity + w.cross(&(ct.point - c)) - ct.other_velocity;
            let un = u.dot(&ct.dir);
            let fn_ = ct.spring - ct.damping * un;
            if fn_ <= 0.0 {
                ct.normal_damped = false;
            }
            let fn_ = fn_.max(ct.spring);
            let ut = u - ct.dir * un;
            if p.friction_viscosity * ut.norm() > p.friction * fn_ {
                ct.slip = Some(-ut.normalize() * (p.friction * fn_));
            }
        }

        let mut sol = (st.object_velocity, w);
        for _ in 0..4 {
            let mut a = Matrix6::zeros();
            a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * m));
            a.fixed_view_mut::<3, 3>(3, 3).copy_from(&inertia);
            let mut rhs = Vector6::zeros();
            let lin = st.object_velocity * m + ext_f * tau;
            let angm = inertia * w + ext_t * tau;
            rhs.fixed_rows_mut::<3>(0).copy_from(&lin);
            rhs.fixed_rows_mut::<3>(3).copy_from(&angm);
            for ct in contacts.iter() {
                let r = ct.point - c;
                let cm = damping_matrix(ct);
                let mut j = nalgebra::Matrix3x6::zeros();
                j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
                j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&r)));
                a += j.transpose() * cm * j * tau;
                let explicit = ct.dir * ct.spring + ct.slip.unwrap_or_else(Vector3::zeros) + cm * ct.other_velocity;
                rhs += j.transpose() * explicit * tau;
            }
            let x = a.cholesky().map(|ch| ch.solve(&rhs)).unwrap_or(rhs);
            sol = (x.fixed_rows::<3>(0).into_owned(), x.fixed_rows::<3>(3).into_owned());

            // Drop damping on contacts that would pull and cap friction that
            // exceeds the cone, then resolve.
            let mut changed = false;
            for ct in contacts.iter_mut() {
                let f = contact_force(ct, &c, &sol.0, &sol.1);
                let fn_ = f.dot(&ct.dir);
                if ct.normal_damped && fn_ < 0.0 {
                    ct.normal_damped = false;
                    changed = true;
                }
                if ct.slip.is_none() {
                    let ft = f - ct.dir * fn_;
                    let cap = p.friction * fn_.max(0.0);
                    if ft.norm() > cap * (1.0 + 1e-9) + 1e-15 {
                        let dir = if ft.norm() > 0.0 { ft.normalize() } else { Vector3::zeros() };
                        ct.slip = Some(dir * cap);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        sol
    }
}

fn damping_matrix(ct: &Contact) -> Matrix3<f64> {
    let nn = ct.dir * ct.dir.transpose();
    let mut c = Matrix3::zeros();
    if ct.normal_damped {
        c += nn * ct.damping;
    }
    if ct.slip.is_none() {
        c += (Matrix3::identity() - nn) * ct.viscosity;
    }
    c
}

/// Force on the object from one contact for object velocity `(vel, ang)`.
fn contact_force(ct: &Contact, c: &Point3<f64>, vel: &Vector3<f64>, ang: &Vector3<f64>) -> Vector3<f64> {
    let u = vel + ang.cross(&(ct.point - c)) - ct.other_velocity;
    let un = u.dot(&ct.dir);
    let damp_n = if ct.normal_damped { ct.damping * un } else { 0.0 };
    let mut f = ct.dir * (ct.spring - damp_n).max(0.0);
    match ct.slip {
        Some(s) => f += s,
        None => f -= (u - ct.dir * un) * ct.viscosity,
    }
    f
}

/// Coulomb-capped viscous friction against a static surface.
fn friction(vt: &Vector3<f64>, normal: f64, p: &SimParams) -> Vector3<f64> {
    let speed = vt.norm();
    if speed == 0.0 {
        return Vector3::zeros();
    }
    -vt / speed * (p.friction_viscosity * speed).min(p.friction * normal)
}
