use std::collections::HashMap;

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::mesh::{tet_signed_volume, TetMesh};
use crate::error::{Error, Result};
use crate::tendon;
use crate::NUM_BLOCKS;

/// How tendon waypoint heights vary along the finger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TendonLaw {
    /// `h = H (1 - l/L)^2`, which makes contact pressure uniform.
    UniformPressure,
    /// `h = H` everywhere. Curls the finger so only the tip touches.
    ConstantHeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Segment,
    Flexure,
}

/// Axial extent of one block in finger-local coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockExtent {
    pub kind: BlockKind,
    pub start: f64,
    pub end: f64,
}

/// Dimensions of one finger. Both fingers are identical.
///
/// Finger-local frame: `x` runs from base (0) to tip (`length`), `y` is the
/// height above the back face (the flexure layer occupies `0..flexure_thickness`),
/// and `z` spans the width centred on zero. The object-facing side is `+y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FingerParams {
    /// Finger length `L` (m).
    pub length: f64,
    /// Tendon height above the flexure axis at the base, `H` (m).
    pub base_height: f64,
    pub width: f64,
    /// Segment blocks per finger; flexures sit between consecutive segments.
    pub segments: usize,
    /// Flexure thickness (m); flexures are square in the `x`-`y` section.
    pub flexure_thickness: f64,
    /// Angle of the plane cutting the object-facing side of the segments (rad).
    pub cut_angle: f64,
    pub law: TendonLaw,
    /// Mesh refinement level; 1 is the default desk resolution.
    pub subdivision: usize,
}

impl Default for FingerParams {
    fn default() -> Self {
        let length = 0.10;
        let base_height = 0.02;
        let flexure_thickness = 0.002;
        Self {
            length,
            base_height,
            width: 0.02,
            segments: 6,
            flexure_thickness,
            cut_angle: (base_height / length).atan(),
            law: TendonLaw::UniformPressure,
            subdivision: 1,
        }
    }
}

impl FingerParams {
    /// Rectangular finger routed at constant height, the baseline the
    /// uniform-pressure law is compared against.
    pub fn constant_height() -> Self {
        Self {
            cut_angle: 0.0,
            law: TendonLaw::ConstantHeight,
            ..Self::default()
        }
    }

    pub fn segment_length(&self) -> f64 {
        (self.length - (self.segments as f64 - 1.0) * self.flexure_thickness) / self.segments as f64
    }

    pub fn blocks_per_finger(&self) -> usize {
        2 * self.segments - 1
    }

    /// Height of the back face above which the finger body ends at the base.
    pub fn base_body_height(&self) -> f64 {
        self.base_height + 2.0 * self.flexure_thickness
    }

    /// Height of the object-facing surface of a segment at axial position `x`.
    pub fn body_height(&self, x: f64) -> f64 {
        self.base_body_height() - x * self.cut_angle.tan()
    }

    /// Height of the bending (neutral) axis of the flexures.
    pub fn flexure_axis(&self) -> f64 {
        0.5 * self.flexure_thickness
    }

    /// Tendon height above the flexure axis at arc coordinate `l`.
    pub fn tendon_height(&self, l: f64) -> f64 {
        match self.law {
            TendonLaw::UniformPressure => {
                tendon::uniform_pressure_height(l, self.length, self.base_height)
            }
            TendonLaw::ConstantHeight => self.base_height,
        }
    }

    /// Blocks of one finger from base to tip.
    pub fn block_extents(&self) -> Vec<BlockExtent> {
        let seg = self.segment_length();
        let mut out = Vec::with_capacity(self.blocks_per_finger());
        let mut x = 0.0;
        for i in 0..self.segments {
            let end = if i + 1 == self.segments { self.length } else { x + seg };
            out.push(BlockExtent { kind: BlockKind::Segment, start: x, end });
            x = end;
            if i + 1 < self.segments {
                let end = x + self.flexure_thickness;
                out.push(BlockExtent { kind: BlockKind::Flexure, start: x, end });
                x = end;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("base_height", self.base_height),
            ("width", self.width),
            ("flexure_thickness", self.flexure_thickness),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::validation(name, format!("must be positive, got {v}")));
            }
        }
        if self.segments < 2 {
            return Err(Error::validation("segments", "need at least 2 segments per finger"));
        }
        if 2 * self.blocks_per_finger() != NUM_BLOCKS {
            return Err(Error::validation(
                "segments",
                format!(
                    "{} segments give {} blocks over two fingers, need {NUM_BLOCKS}",
                    self.segments,
                    2 * self.blocks_per_finger()
                ),
            ));
        }
        if self.flexure_thickness >= self.segment_length() {
            return Err(Error::validation(
                "flexure_thickness",
                format!(
                    "{} m is not below the segment length {} m",
                    self.flexure_thickness,
                    self.segment_length()
                ),
            ));
        }
        if self.subdivision == 0 {
            return Err(Error::validation("subdivision", "must be at least 1"));
        }
        if !(self.cut_angle.is_finite() && self.cut_angle >= 0.0) {
            return Err(Error::validation("cut_angle", "must be non-negative"));
        }
        if self.body_height(self.length) <= self.flexure_thickness + 1e-12 {
            return Err(Error::validation(
                "cut_angle",
                "cut plane reaches the flexure layer before the tip",
            ));
        }
        // The tendon has to run inside the body everywhere along the finger.
        let n = 200;
        for i in 0..=n {
            let x = self.length * i as f64 / n as f64;
            let y = self.flexure_axis() + self.tendon_height(x);
            if y > self.body_height(x) + 1e-12 {
                return Err(Error::validation(
                    "cut_angle",
                    format!("tendon leaves the finger body at x = {x:.4} m"),
                ));
            }
        }
        Ok(())
    }

    /// Maps finger-local coordinates of `finger` (0 or 1) into the gripper
    /// frame with both finger offsets at zero. The gripper frame has the palm
    /// at `y = 0`, fingers hanging along `-y`, and the fingers closing along `x`.
    pub fn local_to_gripper(&self, finger: usize, p: &Point3<f64>) -> Point3<f64> {
        let top = self.base_body_height();
        match finger {
            0 => Point3::new(p.y - top, -p.x, p.z),
            _ => Point3::new(top - p.y, -p.x, -p.z),
        }
    }

    /// Rotation part of [`local_to_gripper`](Self::local_to_gripper).
    pub fn local_axis_to_gripper(&self, finger: usize, v: &Vector3<f64>) -> Vector3<f64> {
        match finger {
            0 => Vector3::new(v.y, -v.x, v.z),
            _ => Vector3::new(-v.y, -v.x, -v.z),
        }
    }
}

/// Builds both fingers as one tetrahedral mesh in the gripper frame.
///
/// Each block is a stack of hexahedral cells split into six tetrahedra along
/// the cell diagonal. Block ids run base-to-tip on finger 0 (`0..11`) and then
/// on finger 1 (`11..22`). After meshing, the surface vertex nearest each
/// tendon waypoint is moved onto the waypoint.
pub fn build_finger_mesh(params: &FingerParams) -> Result<TetMesh> {
    params.validate()?;
    let sub = params.subdivision;
    let blocks = params.block_extents();

    // Axial grid lines with the block owning each cell.
    let mut xs = vec![0.0];
    let mut cell_block = Vec::new();
    for (b, ext) in blocks.iter().enumerate() {
        let cells = match ext.kind {
            BlockKind::Segment => 2 * sub,
            BlockKind::Flexure => sub,
        };
        for c in 1..=cells {
            let x = if c == cells {
                ext.end
            } else {
                ext.start + (ext.end - ext.start) * c as f64 / cells as f64
            };
            xs.push(x);
            cell_block.push(b);
        }
    }
    let flex_layers = sub;
    let upper_layers = 2 * sub;
    let nz = 2 * sub;

    let y_at = |ix: usize, iy: usize| -> f64 {
        if iy <= flex_layers {
            params.flexure_thickness * iy as f64 / flex_layers as f64
        } else {
            let top = params.body_height(xs[ix]);
            let t = (iy - flex_layers) as f64 / upper_layers as f64;
            params.flexure_thickness + (top - params.flexure_thickness) * t
        }
    };
    let z_at = |iz: usize| params.width * (iz as f64 / nz as f64 - 0.5);

    let mut local = Vec::new();
    let mut finger_of = Vec::new();
    let mut tets = Vec::new();
    let mut block_ids = Vec::new();

    for finger in 0..2 {
        let mut index: HashMap<(usize, usize, usize), usize> = HashMap::new();
        let mut vertex = |ix: usize, iy: usize, iz: usize, local: &mut Vec<Point3<f64>>| -> usize {
            *index.entry((ix, iy, iz)).or_insert_with(|| {
                local.push(Point3::new(xs[ix], y_at(ix, iy), z_at(iz)));
                finger_of.push(finger as u8);
                local.len() - 1
            })
        };
        for (ix, &b) in cell_block.iter().enumerate() {
            let layers = match blocks[b].kind {
                BlockKind::Segment => flex_layers + upper_layers,
                BlockKind::Flexure => flex_layers,
            };
            let block_id = (finger * blocks.len() + b) as u8;
            for iy in 0..layers {
                for iz in 0..nz {
                    let mut corner = [0usize; 8];
                    for (bit, c) in corner.iter_mut().enumerate() {
                        let (dx, dy, dz) = (bit & 1, (bit >> 1) & 1, (bit >> 2) & 1);
                        *c = vertex(ix + dx, iy + dy, iz + dz, &mut local);
                    }
                    for tet in kuhn_tets(&corner) {
                        tets.push(tet);
                        block_ids.push(block_id);
                    }
                }
            }
        }
    }

    // Orient every tet positively in the local frame (the finger placements are
    // proper rotations, so orientation survives the mapping).
    for tet in tets.iter_mut() {
        let v = tet_signed_volume(
            &local[tet[0]], &local[tet[1]], &local[tet[2]], &local[tet[3]],
        );
        if v < 0.0 {
            tet.swap(2, 3);
        }
    }

    let mut mesh = TetMesh::from_parts(local, finger_of, tets, block_ids, *params)?;
    for finger in 0..2 {
        let route = tendon::place_waypoints(params, params.segments + 1)?;
        for wp in &route.waypoints {
            mesh.snap_surface_vertex(finger, &wp.position)?;
        }
    }
    mesh.check_positive_volumes()?;
    Ok(mesh)
}

/// Six tetrahedra of a hex cell sharing the 000-111 diagonal. Corners are
/// indexed by `dx | dy << 1 | dz << 2`.
fn kuhn_tets(c: &[usize; 8]) -> [[usize; 4]; 6] {
    const PATHS: [[usize; 2]; 6] = [[1, 3], [1, 5], [2, 3], [2, 6], [4, 5], [4, 6]];
    let mut out = [[0; 4]; 6];
    for (t, p) in PATHS.iter().enumerate() {
        out[t] = [c[0], c[p[0]], c[p[1]], c[7]];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_params_give_22_blocks() {
        let p = FingerParams::default();
        p.validate().unwrap();
        assert_eq!(2 * p.blocks_per_finger(), 22);
        let mesh = build_finger_mesh(&p).unwrap();
        let mut seen = [false; NUM_BLOCKS];
        for &b in mesh.block_ids() {
            seen[b as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn blocks_alternate_starting_with_segment() {
        let ext = FingerParams::default().block_extents();
        assert_eq!(ext.len(), 11);
        for (i, e) in ext.iter().enumerate() {
            let want = if i % 2 == 0 { BlockKind::Segment } else { BlockKind::Flexure };
            assert_eq!(e.kind, want);
        }
    }

    #[test]
    fn block_extents_match_independent_partition() {
        let p = FingerParams { length: 0.1, ..FingerParams::default() };
        // Independent partition: 6 segments of equal length with 5 flexures of
        // fixed thickness between them.
        let t = p.flexure_thickness;
        let seg = (0.1 - 5.0 * t) / 6.0;
        let mut expected = Vec::new();
        for i in 0..6 {
            let s = i as f64 * (seg + t);
            expected.push((s, s + seg));
            if i < 5 {
                expected.push((s + seg, s + seg + t));
            }
        }
        let ext = p.block_extents();
        assert_eq!(ext.len(), expected.len());
        for (e, (a, b)) in ext.iter().zip(&expected) {
            assert!((e.start - a).abs() < 1e-12 && (e.end - b).abs() < 1e-12);
        }
        assert_eq!(ext[0].start, 0.0);
        assert_eq!(ext.last().unwrap().end, 0.1);
        for w in ext.windows(2) {
            assert_eq!(w[0].end, w[1].start, "gap between blocks");
        }
    }

    #[test]
    fn rejects_degenerate_flexures() {
        let p = FingerParams { flexure_thickness: 0.02, ..FingerParams::default() };
        assert!(matches!(p.validate(), Err(Error::Validation { .. })));
        assert!(build_finger_mesh(&p).is_err());
    }

    #[test]
    fn rejects_wrong_block_count() {
        let p = FingerParams { segments: 5, ..FingerParams::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn rejects_cut_through_tendon() {
        let p = FingerParams { cut_angle: 0.5, ..FingerParams::default() };
        assert!(p.validate().is_err());
        let p = FingerParams { cut_angle: 0.1, ..FingerParams::constant_height() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn constant_height_finger_builds() {
        let mesh = build_finger_mesh(&FingerParams::constant_height()).unwrap();
        mesh.check_positive_volumes().unwrap();
        assert!(mesh.is_watertight());
    }

    #[test]
    fn finger_frames_are_proper_rotations() {
        let p = FingerParams::default();
        for f in 0..2 {
            let ex = p.local_axis_to_gripper(f, &Vector3::x());
            let ey = p.local_axis_to_gripper(f, &Vector3::y());
            let ez = p.local_axis_to_gripper(f, &Vector3::z());
            assert!((ex.cross(&ey) - ez).norm() < 1e-15);
            // fingers hang down and face each other
            assert_eq!(ex, -Vector3::y());
            let inward = if f == 0 { Vector3::x() } else { -Vector3::x() };
            assert_eq!(ey, inward);
        }
    }
}
