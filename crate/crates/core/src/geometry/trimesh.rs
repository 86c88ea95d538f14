use std::collections::HashMap;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};

/// Closed triangle mesh used as an object shape.
///
/// Construction rejects meshes that are not watertight and consistently
/// oriented, so the winding-number sign used by [`TriMesh::distance`] is
/// always meaningful. Vertices are recentred on the solid's centre of mass.
#[derive(Debug, Clone)]
pub struct TriMesh {
    vertices: Vec<Point3<f64>>,
    triangles: Vec<[usize; 3]>,
    volume: f64,
    /// Second moment `∫ x xᵀ dV` about the centre of mass, unit density.
    covariance: Matrix3<f64>,
    radius: f64,
}

impl TriMesh {
    pub fn new(mut vertices: Vec<Point3<f64>>, mut triangles: Vec<[usize; 3]>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::Mesh("triangle mesh has no faces".into()));
        }
        if triangles.iter().flatten().any(|&i| i >= vertices.len()) {
            return Err(Error::Mesh("face references a missing vertex".into()));
        }
        check_closed(&triangles)?;

        let (mut volume, mut centroid) = (0.0, Vector3::zeros());
        for &[a, b, c] in &triangles {
            let (pa, pb, pc) = (vertices[a].coords, vertices[b].coords, vertices[c].coords);
            let v = pa.dot(&pb.cross(&pc)) / 6.0;
            volume += v;
            centroid += v * (pa + pb + pc) / 4.0;
        }
        if volume.abs() < 1e-18 {
            return Err(Error::Mesh("triangle mesh encloses no volume".into()));
        }
        centroid /= volume;
        if volume < 0.0 {
            for t in triangles.iter_mut() {
                t.swap(1, 2);
            }
            volume = -volume;
        }
        for v in vertices.iter_mut() {
            *v -= centroid;
        }
        let mut covariance = Matrix3::zeros();
        for &[a, b, c] in &triangles {
            let (pa, pb, pc) = (vertices[a].coords, vertices[b].coords, vertices[c].coords);
            let det = pa.dot(&pb.cross(&pc));
            let s = pa + pb + pc;
            covariance += det / 120.0
                * (pa * pa.transpose() + pb * pb.transpose() + pc * pc.transpose() + s * s.transpose());
        }
        let radius = vertices.iter().map(|p| p.coords.norm()).fold(0.0, f64::max);
        Ok(Self { vertices, triangles, volume, covariance, radius })
    }

    /// Parses ASCII OBJ with `v` and triangular `f` records. Other records are
    /// ignored; polygons with more than three corners are an error.
    pub fn from_obj_str(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
                    if c.len() != 3 {
                        return Err(Error::Parse { line: i + 1, message: "vertex needs 3 coordinates".into() });
                    }
                    vertices.push(Point3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let idx: Vec<&str> = it.collect();
                    if idx.len() != 3 {
                        return Err(Error::Parse { line: i + 1, message: "only triangular faces are supported".into() });
                    }
                    let mut tri = [0usize; 3];
                    for (k, tok) in idx.iter().enumerate() {
                        let first = tok.split('/').next().unwrap_or("");
                        let n: i64 = first
                            .parse()
                            .map_err(|_| Error::Parse { line: i + 1, message: format!("bad index {tok}") })?;
                        let resolved = if n < 0 { vertices.len() as i64 + n } else { n - 1 };
                        if resolved < 0 {
                            return Err(Error::Parse { line: i + 1, message: format!("bad index {tok}") });
                        }
                        tri[k] = resolved as usize;
                    }
                    triangles.push(tri);
                }
                _ => {}
            }
        }
        Self::new(vertices, triangles)
    }

    pub fn from_obj_file(path: &Path) -> Result<Self> {
        Self::from_obj_str(&std::fs::read_to_string(path)?)
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn bounding_radius(&self) -> f64 {
        self.radius
    }

    /// Inertia tensor about the centre of mass for unit density.
    pub fn unit_inertia(&self) -> Matrix3<f64> {
        Matrix3::identity() * self.covariance.trace() - self.covariance
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        0.5 * (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a])).norm()
    }

    /// Generalised winding number: ~1 inside, ~0 outside.
    pub fn winding_number(&self, p: &Point3<f64>) -> f64 {
        let mut total = 0.0;
        for &[i, j, k] in &self.triangles {
            let a = self.vertices[i] - p;
            let b = self.vertices[j] - p;
            let c = self.vertices[k] - p;
            let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
            let num = a.dot(&b.cross(&c));
            let den = la * lb * lc + a.dot(&b) * lc + a.dot(&c) * lb + b.dot(&c) * la;
            total += 2.0 * num.atan2(den);
        }
        total / (4.0 * std::f64::consts::PI)
    }

    pub fn unsigned_distance(&self, p: &Point3<f64>) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| {
                let q = closest_point_on_triangle(p, &self.vertices[a], &self.vertices[b], &self.vertices[c]);
                (p - q).norm_squared()
            })
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    /// Exact distance to the surface, negative inside.
    pub fn distance(&self, p: &Point3<f64>) -> f64 {
        let d = self.unsigned_distance(p);
        if self.winding_number(p) > 0.5 {
            -d
        } else {
            d
        }
    }
}

fn check_closed(triangles: &[[usize; 3]]) -> Result<()> {
    let mut directed: HashMap<(usize, usize), u32> = HashMap::new();
    for &[a, b, c] in triangles {
        if a == b || b == c || a == c {
            return Err(Error::Mesh("degenerate triangle".into()));
        }
        for e in [(a, b), (b, c), (c, a)] {
            *directed.entry(e).or_default() += 1;
        }
    }
    for (&(u, v), &n) in &directed {
        if n != 1 || directed.get(&(v, u)) != Some(&1) {
            return Err(Error::Mesh(format!(
                "triangle mesh is not watertight or not consistently oriented at edge ({u}, {v})"
            )));
        }
    }
    Ok(())
}

/// Closest point on triangle `abc` to `p` (Ericson, Real-Time Collision Detection 5.1.5).
pub(crate) fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const CUBE_OBJ: &str = "\
v -0.5 -0.5 -0.5
v 0.5 -0.5 -0.5
v 0.5 0.5 -0.5
v -0.5 0.5 -0.5
v -0.5 -0.5 0.5
v 0.5 -0.5 0.5
v 0.5 0.5 0.5
v -0.5 0.5 0.5
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 4 8 7
f 4 7 3
f 1 5 8
f 1 8 4
f 2 3 7
f 2 7 6
";

    #[test]
    fn cube_obj_loads_with_unit_volume() {
        let m = TriMesh::from_obj_str(CUBE_OBJ).unwrap();
        assert!((m.volume() - 1.0).abs() < 1e-12);
        // solid unit cube: I = 1/6 on the diagonal
        let i = m.unit_inertia();
        assert!((i[(0, 0)] - 1.0 / 6.0).abs() < 1e-12);
        assert!(i[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn winding_number_classifies() {
        let m = TriMesh::from_obj_str(CUBE_OBJ).unwrap();
        assert!((m.winding_number(&Point3::origin()) - 1.0).abs() < 1e-9);
        assert!(m.winding_number(&Point3::new(2.0, 0.1, 0.0)).abs() < 1e-9);
        assert!((m.distance(&Point3::origin()) + 0.5).abs() < 1e-12);
        assert!((m.distance(&Point3::new(1.0, 1.0, 1.0)) - 0.75f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_open_mesh() {
        let open: String = CUBE_OBJ.lines().take(CUBE_OBJ.lines().count() - 1).collect::<Vec<_>>().join("\n");
        assert!(matches!(TriMesh::from_obj_str(&open), Err(Error::Mesh(_))));
    }

    #[test]
    fn rejects_quads_with_line_number() {
        let err = TriMesh::from_obj_str("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }));
    }

    #[test]
    fn inverted_mesh_is_flipped() {
        let flipped: String = CUBE_OBJ
            .lines()
            .map(|l| {
                if let Some(rest) = l.strip_prefix("f ") {
                    let v: Vec<&str> = rest.split_whitespace().collect();
                    format!("f {} {} {}", v[0], v[2], v[1])
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
        let m = TriMesh::from_obj_str(&flipped).unwrap();
        assert!((m.volume() - 1.0).abs() < 1e-12);
        assert!(m.distance(&Point3::origin()) < 0.0);
    }
}
