use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Isometry3, Matrix3, Point3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;

use super::trimesh::TriMesh;
use crate::error::{Error, Result};

/// The ground is the plane `y = GROUND_HEIGHT`, normal `+y`.
pub const GROUND_HEIGHT: f64 = 0.0;

/// Object geometry in its local frame, centred on the centre of mass.
/// Cylinders and capsules are aligned with the local `y` axis.
#[derive(Debug, Clone)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: Vector3<f64> },
    Cylinder { radius: f64, half_height: f64 },
    Capsule { radius: f64, half_height: f64 },
    Mesh(Arc<TriMesh>),
}

/// A rigid object: shape, world pose and density.
#[derive(Debug, Clone)]
pub struct ShapeSdf {
    pub shape: Shape,
    pub pose: Isometry3<f64>,
    pub density: f64,
}

impl ShapeSdf {
    pub fn new(shape: Shape, pose: Isometry3<f64>, density: f64) -> Result<Self> {
        if !(density.is_finite() && density > 0.0) {
            return Err(Error::validation("density", format!("must be positive, got {density}")));
        }
        let dims_ok = match &shape {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Box { half_extents } => half_extents.iter().all(|&h| h > 0.0),
            Shape::Cylinder { radius, half_height } | Shape::Capsule { radius, half_height } => {
                *radius > 0.0 && *half_height > 0.0
            }
            Shape::Mesh(_) => true,
        };
        if !dims_ok {
            return Err(Error::validation("shape", "dimensions must be positive"));
        }
        Ok(Self { shape, pose, density })
    }

    /// Places `shape` resting on the ground at horizontal position `(x, z)`,
    /// rotated by `yaw` about the vertical.
    pub fn resting(shape: Shape, x: f64, z: f64, yaw: f64, density: f64) -> Result<Self> {
        let lowest = match &shape {
            Shape::Sphere { radius } => -radius,
            Shape::Box { half_extents } => -half_extents.y,
            Shape::Cylinder { half_height, .. } => -half_height,
            Shape::Capsule { radius, half_height } => -(half_height + radius),
            Shape::Mesh(m) => m.vertices().iter().map(|v| v.y).fold(f64::INFINITY, f64::min),
        };
        let pose = Isometry3::from_parts(
            Translation3::new(x, GROUND_HEIGHT - lowest, z),
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw),
        );
        Self::new(shape, pose, density)
    }

    /// Signed distance from a point in the object frame.
    pub fn local_distance(&self, p: &Point3<f64>) -> f64 {
        match &self.shape {
            Shape::Sphere { radius } => p.coords.norm() - radius,
            Shape::Box { half_extents } => {
                let q = p.coords.abs() - half_extents;
                let outside = q.map(|v| v.max(0.0)).norm();
                outside + q.max().min(0.0)
            }
            Shape::Cylinder { radius, half_height } => {
                let dx = (p.x * p.x + p.z * p.z).sqrt() - radius;
                let dy = p.y.abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
            Shape::Capsule { radius, half_height } => {
                let y = p.y.clamp(-half_height, *half_height);
                (p - Point3::new(0.0, y, 0.0)).norm() - radius
            }
            Shape::Mesh(m) => m.distance(p),
        }
    }

    /// Signed distance from a world point: negative inside, zero on the surface.
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        self.local_distance(&self.pose.inverse_transform_point(p))
    }

    /// Signed distance and unit outward normal (distance gradient) at a
    /// point in the object frame.
    pub fn local_distance_normal(&self, p: &Point3<f64>) -> (f64, Vector3<f64>) {
        let unit = |v: Vector3<f64>, fallback: Vector3<f64>| {
            let n = v.norm();
            if n > 1e-15 {
                v / n
            } else {
                fallback
            }
        };
        match &self.shape {
            Shape::Sphere { radius } => (p.coords.norm() - radius, unit(p.coords, Vector3::y())),
            Shape::Box { half_extents } => {
                let q = p.coords.abs() - half_extents;
                if q.max() > 0.0 {
                    let out = Vector3::new(
                        q.x.max(0.0).copysign(p.x),
                        q.y.max(0.0).copysign(p.y),
                        q.z.max(0.0).copysign(p.z),
                    );
                    (out.norm(), unit(out, Vector3::y()))
                } else {
                    let k = q.imax();
                    let mut n = Vector3::zeros();
                    n[k] = 1.0f64.copysign(p[k]);
                    (q[k], n)
                }
            }
            Shape::Cylinder { radius, half_height } => {
                let rho = (p.x * p.x + p.z * p.z).sqrt();
                let radial = if rho > 1e-15 { Vector3::new(p.x / rho, 0.0, p.z / rho) } else { Vector3::x() };
                let axial = Vector3::new(0.0, 1.0f64.copysign(p.y), 0.0);
                let dx = rho - radius;
                let dy = p.y.abs() - half_height;
                if dx > 0.0 && dy > 0.0 {
                    let v = radial * dx + axial * dy;
                    (v.norm(), unit(v, axial))
                } else if dx > dy {
                    (dx, radial)
                } else {
                    (dy, axial)
                }
            }
            Shape::Capsule { radius, half_height } => {
                let y = p.y.clamp(-half_height, *half_height);
                let v = p - Point3::new(0.0, y, 0.0);
                (v.norm() - radius, unit(v, Vector3::x()))
            }
            Shape::Mesh(m) => {
                let d = m.distance(p);
                let h = 1e-7 * m.bounding_radius().max(1e-3);
                let mut g = Vector3::zeros();
                for k in 0..3 {
                    let mut e = Vector3::zeros();
                    e[k] = h;
                    g[k] = (m.distance(&(p + e)) - m.distance(&(p - e))) / (2.0 * h);
                }
                (d, unit(g, Vector3::y()))
            }
        }
    }

    /// Unit outward normal at a local point.
    pub fn local_normal(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.local_distance_normal(p).1
    }

    /// Signed distance and outward normal at a world point, for the object
    /// placed at `pose` instead of its stored pose.
    pub fn distance_normal_at(&self, pose: &Isometry3<f64>, p: &Point3<f64>) -> (f64, Vector3<f64>) {
        let (d, n) = self.local_distance_normal(&pose.inverse_transform_point(p));
        (d, pose.rotation * n)
    }

    pub fn normal(&self, p: &Point3<f64>) -> Vector3<f64> {
        self.pose.rotation * self.local_normal(&self.pose.inverse_transform_point(p))
    }

    pub fn volume(&self) -> f64 {
        match &self.shape {
            Shape::Sphere { radius } => 4.0 / 3.0 * PI * radius.powi(3),
            Shape::Box { half_extents } => 8.0 * half_extents.product(),
            Shape::Cylinder { radius, half_height } => PI * radius * radius * 2.0 * half_height,
            Shape::Capsule { radius, half_height } => {
                PI * radius * radius * 2.0 * half_height + 4.0 / 3.0 * PI * radius.powi(3)
            }
            Shape::Mesh(m) => m.volume(),
        }
    }

    pub fn mass(&self) -> f64 {
        self.density * self.volume()
    }

    /// World-frame centre of mass.
    pub fn center_of_mass(&self) -> Point3<f64> {
        Point3::from(self.pose.translation.vector)
    }

    /// Inertia tensor about the centre of mass in the object frame.
    pub fn local_inertia(&self) -> Matrix3<f64> {
        let m = self.mass();
        match &self.shape {
            Shape::Sphere { radius } => Matrix3::identity() * (0.4 * m * radius * radius),
            Shape::Box { half_extents: b } => Matrix3::from_diagonal(&Vector3::new(
                m / 3.0 * (b.y * b.y + b.z * b.z),
                m / 3.0 * (b.x * b.x + b.z * b.z),
                m / 3.0 * (b.x * b.x + b.y * b.y),
            )),
            Shape::Cylinder { radius: r, half_height } => {
                let h = 2.0 * half_height;
                let side = m * (3.0 * r * r + h * h) / 12.0;
                Matrix3::from_diagonal(&Vector3::new(side, 0.5 * m * r * r, side))
            }
            Shape::Capsule { radius: r, half_height } => {
                let h = 2.0 * half_height;
                let mc = self.density * PI * r * r * h;
                let ms = self.density * 4.0 / 3.0 * PI * r.powi(3);
                let axial = mc * r * r / 2.0 + ms * 0.4 * r * r;
                let side = mc * (h * h / 12.0 + r * r / 4.0) + ms * (0.4 * r * r + h * h / 4.0 + 3.0 * h * r / 8.0);
                Matrix3::from_diagonal(&Vector3::new(side, axial, side))
            }
            Shape::Mesh(mesh) => mesh.unit_inertia() * self.density,
        }
    }

    /// Radius of a sphere about the centre of mass enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match &self.shape {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half_extents } => half_extents.norm(),
            Shape::Cylinder { radius, half_height } => (radius * radius + half_height * half_height).sqrt(),
            Shape::Capsule { radius, half_height } => radius + half_height,
            Shape::Mesh(m) => m.bounding_radius(),
        }
    }

    /// Points of the object that can touch the ground, in world coordinates
    /// for the object at `pose`.
    pub fn ground_probes(&self, pose: &Isometry3<f64>) -> Vec<Point3<f64>> {
        match &self.shape {
            Shape::Sphere { radius } => {
                vec![Point3::from(pose.translation.vector) - Vector3::y() * *radius]
            }
            Shape::Capsule { radius, half_height } => [-half_height, *half_height]
                .iter()
                .map(|&y| pose * Point3::new(0.0, y, 0.0) - Vector3::y() * *radius)
                .collect(),
            Shape::Box { half_extents: b } => (0..8)
                .map(|i| {
                    let s = |bit: usize| if i & bit != 0 { 1.0 } else { -1.0 };
                    pose * Point3::new(s(1) * b.x, s(2) * b.y, s(4) * b.z)
                })
                .collect(),
            Shape::Cylinder { radius, half_height } => {
                let n = 16;
                let mut out = Vec::with_capacity(2 * n);
                for &y in &[-half_height, *half_height] {
                    for k in 0..n {
                        let a = 2.0 * PI * k as f64 / n as f64;
                        out.push(pose * Point3::new(radius * a.cos(), y, radius * a.sin()));
                    }
                }
                out
            }
            Shape::Mesh(m) => m.vertices().iter().map(|v| pose * v).collect(),
        }
    }

    /// Area-uniform random points on the surface, in the object frame.
    pub fn sample_surface_local<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Point3<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    fn sample_one<R: Rng>(&self, rng: &mut R) -> Point3<f64> {
        let unit_dir = |rng: &mut R| -> Vector3<f64> {
            loop {
                let v = Vector3::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                );
                let n = v.norm();
                if n > 1e-9 {
                    return v / n;
                }
            }
        };
        match &self.shape {
            Shape::Sphere { radius } => Point3::from(unit_dir(rng) * *radius),
            Shape::Box { half_extents: b } => {
                let areas = [b.y * b.z, b.x * b.z, b.x * b.y];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut axis = 2;
                for (k, a) in areas.iter().enumerate() {
                    if pick < *a {
                        axis = k;
                        break;
                    }
                    pick -= a;
                }
                let mut p = Vector3::new(
                    rng.gen_range(-b.x..=b.x),
                    rng.gen_range(-b.y..=b.y),
                    rng.gen_range(-b.z..=b.z),
                );
                p[axis] = if rng.gen::<bool>() { b[axis] } else { -b[axis] };
                Point3::from(p)
            }
            Shape::Cylinder { radius: r, half_height: hh } => {
                let side = 2.0 * PI * r * 2.0 * hh;
                let caps = 2.0 * PI * r * r;
                if rng.gen::<f64>() * (side + caps) < side {
                    let a = rng.gen_range(0.0..2.0 * PI);
                    Point3::new(r * a.cos(), rng.gen_range(-hh..=*hh), r * a.sin())
                } else {
                    let a = rng.gen_range(0.0..2.0 * PI);
                    let rr = r * rng.gen::<f64>().sqrt();
                    let y = if rng.gen::<bool>() { *hh } else { -hh };
                    Point3::new(rr * a.cos(), y, rr * a.sin())
                }
            }
            Shape::Capsule { radius: r, half_height: hh } => {
                let side = 2.0 * PI * r * 2.0 * hh;
                let ends = 4.0 * PI * r * r;
                if rng.gen::<f64>() * (side + ends) < side {
                    let a = rng.gen_range(0.0..2.0 * PI);
                    Point3::new(r * a.cos(), rng.gen_range(-hh..=*hh), r * a.sin())
                } else {
                    let d = unit_dir(rng) * *r;
                    let y = if d.y >= 0.0 { *hh } else { -hh };
                    Point3::new(d.x, d.y + y, d.z)
                }
            }
            Shape::Mesh(m) => {
                let total: f64 = (0..m.triangles().len()).map(|t| m.triangle_area(t)).sum();
                let mut pick = rng.gen::<f64>() * total;
                let mut tri = m.triangles().len() - 1;
                for t in 0..m.triangles().len() {
                    let a = m.triangle_area(t);
                    if pick < a {
                        tri = t;
                        break;
                    }
                    pick -= a;
                }
                let [a, b, c] = m.triangles()[tri];
                let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
                if u + v > 1.0 {
                    u = 1.0 - u;
                    v = 1.0 - v;
                }
                let (pa, pb, pc) = (m.vertices()[a], m.vertices()[b], m.vertices()[c]);
                pa + (pb - pa) * u + (pc - pa) * v
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn at_origin(shape: Shape) -> ShapeSdf {
        ShapeSdf::new(shape, Isometry3::identity(), 8.0).unwrap()
    }

    fn primitives() -> Vec<ShapeSdf> {
        let pose = Isometry3::from_parts(
            Translation3::new(0.1, 0.2, -0.05),
            UnitQuaternion::from_euler_angles(0.3, -0.2, 0.7),
        );
        vec![
            ShapeSdf::new(Shape::Sphere { radius: 0.03 }, pose, 2.0).unwrap(),
            ShapeSdf::new(Shape::Box { half_extents: Vector3::new(0.02, 0.03, 0.015) }, pose, 2.0).unwrap(),
            ShapeSdf::new(Shape::Cylinder { radius: 0.02, half_height: 0.035 }, pose, 2.0).unwrap(),
            ShapeSdf::new(Shape::Capsule { radius: 0.015, half_height: 0.02 }, pose, 2.0).unwrap(),
        ]
    }

    #[test]
    fn sphere_examples() {
        let s = at_origin(Shape::Sphere { radius: 1.0 });
        assert_eq!(s.distance(&Point3::new(2.0, 0.0, 0.0)), 1.0);
        assert_eq!(s.distance(&Point3::origin()), -1.0);
    }

    #[test]
    fn cube_corner_distance_matches_brute_force() {
        let cube = at_origin(Shape::Box { half_extents: Vector3::repeat(0.5) });
        let p = Point3::new(1.0, 1.0, 1.0);
        // Dense grid over the six faces.
        let n = 200;
        let mut best = f64::INFINITY;
        for axis in 0..3 {
            for sign in [-0.5, 0.5] {
                for i in 0..=n {
                    for j in 0..=n {
                        let u = -0.5 + i as f64 / n as f64;
                        let v = -0.5 + j as f64 / n as f64;
                        let mut q = [0.0; 3];
                        q[axis] = sign;
                        q[(axis + 1) % 3] = u;
                        q[(axis + 2) % 3] = v;
                        best = best.min((p - Point3::from(q)).norm());
                    }
                }
            }
        }
        assert!((cube.distance(&p) - best).abs() < 1e-12);
        assert!((cube.distance(&p) - 0.75f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn surface_samples_have_zero_distance() {
        let mut rng = seed::rng(3);
        for s in primitives() {
            let size = s.bounding_radius();
            for p in s.sample_surface_local(1000, &mut rng) {
                let world = s.pose * p;
                assert!(s.distance(&world).abs() <= 1e-9 * size, "{:?}", s.shape);
            }
        }
    }

    #[test]
    fn sign_convention() {
        for s in primitives() {
            assert!(s.distance(&s.center_of_mass()) < 0.0);
            let far = s.center_of_mass() + Vector3::new(1.0, 0.0, 0.0);
            assert!(s.distance(&far) > 0.0);
        }
    }

    #[test]
    fn mesh_cube_agrees_with_box() {
        let mesh = TriMesh::from_obj_str(super::super::trimesh::tests::CUBE_OBJ).unwrap();
        let a = at_origin(Shape::Mesh(Arc::new(mesh)));
        let b = at_origin(Shape::Box { half_extents: Vector3::repeat(0.5) });
        let mut rng = seed::rng(11);
        for _ in 0..500 {
            let p = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            assert!((a.distance(&p) - b.distance(&p)).abs() < 1e-12);
        }
        assert!((a.mass() - b.mass()).abs() < 1e-12);
        assert!((a.local_inertia() - b.local_inertia()).norm() < 1e-12);
    }

    #[test]
    fn normals_point_outward() {
        let mut rng = seed::rng(5);
        for s in primitives() {
            for p in s.sample_surface_local(50, &mut rng) {
                let n = s.local_normal(&p);
                let out = p + n * 1e-4;
                assert!(s.local_distance(&out) > 0.0);
            }
        }
    }

    #[test]
    fn analytic_normals_match_finite_differences() {
        let mut rng = seed::rng(8);
        for s in primitives() {
            for _ in 0..200 {
                let p = Point3::new(
                    rng.gen_range(-0.06..0.06),
                    rng.gen_range(-0.06..0.06),
                    rng.gen_range(-0.06..0.06),
                );
                let (d, n) = s.local_distance_normal(&p);
                assert!((d - s.local_distance(&p)).abs() < 1e-15);
                let h = 1e-7;
                let mut g = Vector3::zeros();
                for k in 0..3 {
                    let mut e = Vector3::zeros();
                    e[k] = h;
                    g[k] = (s.local_distance(&(p + e)) - s.local_distance(&(p - e))) / (2.0 * h);
                }
                // Skip points sitting on a medial ridge where the gradient jumps.
                if (g.norm() - 1.0).abs() < 1e-4 {
                    assert!((g - n).norm() < 1e-4, "{:?} at {p:?}", s.shape);
                }
            }
        }
    }

    #[test]
    fn resting_objects_touch_ground() {
        for shape in [
            Shape::Sphere { radius: 0.03 },
            Shape::Box { half_extents: Vector3::new(0.02, 0.025, 0.02) },
            Shape::Cylinder { radius: 0.02, half_height: 0.03 },
            Shape::Capsule { radius: 0.015, half_height: 0.02 },
        ] {
            let s = ShapeSdf::resting(shape, 0.0, 0.0, 0.4, 8.0).unwrap();
            let lowest = s.ground_probes(&s.pose).iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
            assert!(lowest.abs() < 1e-12, "{:?}", s.shape);
        }
    }

    #[test]
    fn rejects_non_positive_density() {
        assert!(ShapeSdf::new(Shape::Sphere { radius: 1.0 }, Isometry3::identity(), 0.0).is_err());
    }
}
