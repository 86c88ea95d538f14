use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{Point3, Vector3};

use super::finger::FingerParams;
use crate::error::{Error, Result};
use crate::posegen::GraspPose;
use crate::NUM_BLOCKS;

pub fn tet_signed_volume(a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>, d: &Point3<f64>) -> f64 {
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

/// Tetrahedral mesh of both fingers.
///
/// Positions are stored in the gripper frame with both prismatic finger
/// offsets at zero; [`TetMesh::placed`] applies a grasp pose.
#[derive(Debug, Clone)]
pub struct TetMesh {
    params: FingerParams,
    local: Vec<Point3<f64>>,
    positions: Vec<Point3<f64>>,
    finger: Vec<u8>,
    tets: Vec<[usize; 4]>,
    block_ids: Vec<u8>,
    surface: Vec<[usize; 3]>,
    surface_vertices: Vec<usize>,
}

impl TetMesh {
    pub(crate) fn from_parts(
        local: Vec<Point3<f64>>,
        finger: Vec<u8>,
        tets: Vec<[usize; 4]>,
        block_ids: Vec<u8>,
        params: FingerParams,
    ) -> Result<Self> {
        let n = local.len();
        if finger.len() != n || block_ids.len() != tets.len() {
            return Err(Error::Mesh("inconsistent mesh arrays".into()));
        }
        if let Some(t) = tets.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::Mesh(format!("tet {t:?} references a missing vertex")));
        }
        let positions = local
            .iter()
            .zip(&finger)
            .map(|(p, &f)| params.local_to_gripper(f as usize, p))
            .collect();
        let surface = boundary_faces(&tets);
        let mut on_surface = vec![false; n];
        for tri in &surface {
            for &v in tri {
                on_surface[v] = true;
            }
        }
        let surface_vertices = (0..n).filter(|&v| on_surface[v]).collect();
        Ok(Self {
            params,
            local,
            positions,
            finger,
            tets,
            block_ids,
            surface,
            surface_vertices,
        })
    }

    pub fn params(&self) -> &FingerParams {
        &self.params
    }

    pub fn num_vertices(&self) -> usize {
        self.positions.len()
    }

    /// Vertex positions in the gripper frame (finger offsets zero).
    pub fn positions(&self) -> &[Point3<f64>] {
        &self.positions
    }

    /// Vertex positions in the owning finger's local frame.
    pub fn local_positions(&self) -> &[Point3<f64>] {
        &self.local
    }

    pub fn vertex_finger(&self, v: usize) -> usize {
        self.finger[v] as usize
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn block_ids(&self) -> &[u8] {
        &self.block_ids
    }

    pub fn surface_triangles(&self) -> &[[usize; 3]] {
        &self.surface
    }

    pub fn surface_vertices(&self) -> &[usize] {
        &self.surface_vertices
    }

    /// Vertices on the finger base faces, which are rigidly attached to the palm.
    pub fn base_vertices(&self) -> Vec<usize> {
        (0..self.local.len()).filter(|&v| self.local[v].x == 0.0).collect()
    }

    pub fn tet_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tets[t];
        tet_signed_volume(&self.positions[a], &self.positions[b], &self.positions[c], &self.positions[d])
    }

    /// Sum of signed tetrahedron volumes.
    pub fn volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.tet_volume(t)).sum()
    }

    /// Enclosed volume from the surface triangles (divergence theorem).
    pub fn surface_volume(&self) -> f64 {
        self.surface
            .iter()
            .map(|&[a, b, c]| {
                let (pa, pb, pc) = (self.positions[a], self.positions[b], self.positions[c]);
                pa.coords.dot(&pb.coords.cross(&pc.coords)) / 6.0
            })
            .sum()
    }

    pub fn block_volumes(&self) -> [f64; NUM_BLOCKS] {
        let mut out = [0.0; NUM_BLOCKS];
        for (t, &b) in self.block_ids.iter().enumerate() {
            out[b as usize] += self.tet_volume(t);
        }
        out
    }

    pub fn block_tet_counts(&self) -> [usize; NUM_BLOCKS] {
        let mut out = [0; NUM_BLOCKS];
        for &b in &self.block_ids {
            out[b as usize] += 1;
        }
        out
    }

    pub fn check_positive_volumes(&self) -> Result<()> {
        for t in 0..self.tets.len() {
            let v = self.tet_volume(t);
            if !(v > 0.0) {
                return Err(Error::Mesh(format!("tet {t} has non-positive volume {v:e}")));
            }
        }
        Ok(())
    }

    /// Every surface edge is shared by exactly two surface triangles, with
    /// opposite orientation.
    pub fn is_watertight(&self) -> bool {
        let mut directed: HashMap<(usize, usize), u32> = HashMap::new();
        for &[a, b, c] in &self.surface {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                *directed.entry((u, v)).or_default() += 1;
            }
        }
        directed
            .iter()
            .all(|(&(u, v), &n)| n == 1 && directed.get(&(v, u)) == Some(&1))
    }

    /// Moves the surface vertex of `finger` nearest to `target` (finger-local
    /// coordinates) onto it and returns its index.
    pub(crate) fn snap_surface_vertex(&mut self, finger: usize, target: &Point3<f64>) -> Result<usize> {
        let v = self
            .surface_vertices
            .iter()
            .copied()
            .filter(|&v| self.finger[v] as usize == finger)
            .min_by(|&a, &b| {
                let da = (self.local[a] - target).norm_squared();
                let db = (self.local[b] - target).norm_squared();
                da.total_cmp(&db)
            })
            .ok_or_else(|| Error::Mesh(format!("finger {finger} has no surface vertices")))?;
        self.local[v] = *target;
        self.positions[v] = self.params.local_to_gripper(finger, target);
        Ok(v)
    }

    /// Index of the vertex of `finger` located exactly at `target` (local).
    pub fn vertex_at(&self, finger: usize, target: &Point3<f64>) -> Option<usize> {
        (0..self.local.len())
            .find(|&v| self.finger[v] as usize == finger && (self.local[v] - target).norm() < 1e-12)
    }

    /// Translation applied to a finger for prismatic offsets `s1`, `s2`.
    pub fn finger_offset(finger: usize, s1: f64, s2: f64) -> Vector3<f64> {
        match finger {
            0 => Vector3::new(-s1, 0.0, 0.0),
            _ => Vector3::new(s2, 0.0, 0.0),
        }
    }

    /// World position of vertex `v` for a grasp pose.
    pub fn placed_vertex(&self, pose: &GraspPose, v: usize) -> Point3<f64> {
        let iso = pose.isometry();
        let off = Self::finger_offset(self.finger[v] as usize, pose.s1, pose.s2);
        iso * (self.positions[v] + off)
    }

    /// World positions of all vertices for a grasp pose.
    pub fn placed(&self, pose: &GraspPose) -> Vec<Point3<f64>> {
        let iso = pose.isometry();
        let offs = [
            Self::finger_offset(0, pose.s1, pose.s2),
            Self::finger_offset(1, pose.s1, pose.s2),
        ];
        self.positions
            .iter()
            .zip(&self.finger)
            .map(|(p, &f)| iso * (p + offs[f as usize]))
            .collect()
    }

    /// Wavefront OBJ of the surface, in the gripper frame.
    pub fn to_obj(&self) -> String {
        let mut s = String::from("# soft gripper surface (gripper frame)\n");
        for p in &self.positions {
            let _ = writeln!(s, "v {} {} {}", p.x, p.y, p.z);
        }
        for t in &self.surface {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }
}

/// Faces that belong to exactly one tetrahedron, oriented outward.
fn boundary_faces(tets: &[[usize; 4]]) -> Vec<[usize; 3]> {
    let mut count: HashMap<[usize; 3], (u32, [usize; 3])> = HashMap::new();
    let mut order = Vec::new();
    for &[a, b, c, d] in tets {
        for face in [[a, c, b], [a, b, d], [a, d, c], [b, c, d]] {
            let mut key = face;
            key.sort_unstable();
            let e = count.entry(key).or_insert_with(|| {
                order.push(key);
                (0, face)
            });
            e.0 += 1;
        }
    }
    order
        .into_iter()
        .filter_map(|k| {
            let (n, face) = count[&k];
            (n == 1).then_some(face)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_finger_mesh;

    fn mesh() -> TetMesh {
        build_finger_mesh(&FingerParams::default()).unwrap()
    }

    #[test]
    fn tets_are_positive_and_sum_to_enclosed_volume() {
        let m = mesh();
        m.check_positive_volumes().unwrap();
        let v = m.volume();
        assert!(v > 0.0);
        assert!((v - m.surface_volume()).abs() <= 1e-9 * v);
    }

    #[test]
    fn block_volumes_partition_the_mesh() {
        let m = mesh();
        let total: f64 = m.block_volumes().iter().sum();
        assert!((total - m.volume()).abs() <= 1e-9 * m.volume());
        assert!(m.block_tet_counts().iter().all(|&c| c >= 1));
    }

    #[test]
    fn surface_is_watertight() {
        let m = mesh();
        assert!(m.is_watertight());
        let m2 = build_finger_mesh(&FingerParams { subdivision: 2, ..FingerParams::default() }).unwrap();
        assert!(m2.is_watertight());
        m2.check_positive_volumes().unwrap();
    }

    #[test]
    fn default_mesh_is_desk_sized() {
        let m = mesh();
        assert!(m.tets().len() > 500 && m.tets().len() < 3000, "{} tets", m.tets().len());
    }

    #[test]
    fn one_vertex_at_each_waypoint() {
        let p = FingerParams::default();
        let m = build_finger_mesh(&p).unwrap();
        let route = crate::tendon::place_waypoints(&p, p.segments + 1).unwrap();
        for f in 0..2 {
            for wp in &route.waypoints {
                let hits = (0..m.num_vertices())
                    .filter(|&v| m.vertex_finger(v) == f && (m.local_positions()[v] - wp.position).norm() < 1e-12)
                    .count();
                assert_eq!(hits, 1);
                let v = m.vertex_at(f, &wp.position).unwrap();
                assert!(m.surface_vertices().contains(&v));
            }
        }
    }

    #[test]
    fn obj_export_lists_surface() {
        let m = mesh();
        let obj = m.to_obj();
        let faces = obj.lines().filter(|l| l.starts_with("f ")).count();
        assert_eq!(faces, m.surface_triangles().len());
    }
}
