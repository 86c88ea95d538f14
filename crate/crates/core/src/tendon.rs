//! Tendon routing and the point-force model.
//!
//! Positions and normals of a [`TendonRoute`] are in the finger-local frame
//! (see [`FingerParams`]) unless a caller maps them elsewhere.

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FingerParams, TetMesh};

/// Adjacent waypoints closer than this are degenerate.
pub const MIN_WAYPOINT_SPACING: f64 = 1e-9;

/// Waypoint height that makes the bending moment decay quadratically to the
/// tip: `h(l) = H (1 - l/L)^2`.
pub fn uniform_pressure_height(l: f64, length: f64, base_height: f64) -> f64 {
    let r = 1.0 - l / length;
    base_height * r * r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub position: Point3<f64>,
    /// Unit normal of the surface the tendon presses on.
    pub normal: Vector3<f64>,
    /// Arc coordinate along the finger axis.
    pub arc: f64,
    /// Height of the tendon above the flexure axis.
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TendonRoute {
    pub length: f64,
    pub base_height: f64,
    pub waypoints: Vec<Waypoint>,
    /// Mesh vertex carrying each waypoint, once bound to a mesh.
    pub vertices: Vec<usize>,
}

/// Tension carried uniformly along the tendon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TendonState {
    pub tension: f64,
}

impl TendonState {
    pub fn new(tension: f64) -> Result<Self> {
        if !(tension.is_finite() && tension >= 0.0) {
            return Err(Error::validation("tension", format!("must be non-negative, got {tension}")));
        }
        Ok(Self { tension })
    }
}

/// Places `n_waypoints` waypoints along one finger.
///
/// With one waypoint per segment plus one (the usual case) interior
/// waypoints sit on the base-facing face of each segment and the last one on
/// the tip face. Other counts are spread evenly along the finger. Heights
/// follow the finger's tendon law.
pub fn place_waypoints(params: &FingerParams, n_waypoints: usize) -> Result<TendonRoute> {
    if n_waypoints < 2 {
        return Err(Error::validation("n_waypoints", "need at least 2 waypoints"));
    }
    let arcs: Vec<f64> = if n_waypoints == params.segments + 1 {
        let mut a: Vec<f64> = params
            .block_extents()
            .iter()
            .filter(|b| b.kind == crate::geometry::BlockKind::Segment)
            .map(|b| b.start)
            .collect();
        a.push(params.length);
        a
    } else {
        (0..n_waypoints)
            .map(|i| {
                if i + 1 == n_waypoints {
                    params.length
                } else {
                    params.length * i as f64 / (n_waypoints - 1) as f64
                }
            })
            .collect()
    };
    let axis = params.flexure_axis();
    let mut waypoints: Vec<Waypoint> = arcs
        .iter()
        .map(|&l| {
            let h = params.tendon_height(l);
            Waypoint {
                position: Point3::new(l, axis + h, 0.0),
                normal: Vector3::x(),
                arc: l,
                height: h,
            }
        })
        .collect();
    let positions: Vec<Point3<f64>> = waypoints.iter().map(|w| w.position).collect();
    let normals = incoming_normals(&positions, &Vector3::x())?;
    for (w, n) in waypoints.iter_mut().zip(normals) {
        w.normal = n;
    }
    Ok(TendonRoute {
        length: params.length,
        base_height: params.base_height,
        waypoints,
        vertices: Vec::new(),
    })
}

/// Normals used for the point-force projection: the incoming tendon
/// direction at each waypoint, and `axis` at the first one.
pub fn incoming_normals(positions: &[Point3<f64>], axis: &Vector3<f64>) -> Result<Vec<Vector3<f64>>> {
    let mut out = Vec::with_capacity(positions.len());
    out.push(axis.normalize());
    for i in 1..positions.len() {
        let d = positions[i] - positions[i - 1];
        let n = d.norm();
        if n < MIN_WAYPOINT_SPACING {
            return Err(Error::DegenerateRoute { index: i - 1 });
        }
        out.push(d / n);
    }
    Ok(out)
}

impl TendonRoute {
    /// Builds a route from explicit waypoints, checking unit normals and
    /// monotone arc coordinates.
    pub fn from_waypoints(length: f64, base_height: f64, waypoints: Vec<Waypoint>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::validation("waypoints", "need at least 2 waypoints"));
        }
        for (i, w) in waypoints.iter().enumerate() {
            if (w.normal.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::validation("normal", format!("waypoint {i} normal is not unit length")));
            }
            if i > 0 && w.arc < waypoints[i - 1].arc {
                return Err(Error::validation("arc", format!("waypoint {i} arc coordinate decreases")));
            }
        }
        Ok(Self { length, base_height, waypoints, vertices: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn positions(&self) -> Vec<Point3<f64>> {
        self.waypoints.iter().map(|w| w.position).collect()
    }

    /// Finds the mesh vertex of `finger` sitting on each waypoint.
    pub fn bind(&mut self, mesh: &TetMesh, finger: usize) -> Result<()> {
        self.vertices = self
            .waypoints
            .iter()
            .map(|w| {
                mesh.vertex_at(finger, &w.position)
                    .ok_or_else(|| Error::Mesh(format!("no vertex at tendon waypoint {:?}", w.position)))
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Continuous bending moment at arc coordinate `l` for tension `f_t`,
    /// using the route's own height law between waypoints.
    pub fn moment_at(&self, params: &FingerParams, l: f64, f_t: f64) -> f64 {
        params.tendon_height(l) * f_t
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Projection of `v` onto the plane with unit normal `n`.
pub fn tangent_projection(n: &Vector3<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    (Matrix3::identity() - n * n.transpose()) * v
}

/// Point forces on the body at every waypoint for positions and normals
/// given in any common frame.
pub fn point_forces(
    positions: &[Point3<f64>],
    normals: &[Vector3<f64>],
    tension: f64,
) -> Result<Vec<Vector3<f64>>> {
    let n = positions.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i + 1 < n {
            let d = positions[i + 1] - positions[i];
            let len = d.norm();
            if len < MIN_WAYPOINT_SPACING {
                return Err(Error::DegenerateRoute { index: i });
            }
            out.push(tangent_projection(&normals[i], &(d * (tension / len))));
        } else {
            out.push(-normals[i] * tension);
        }
    }
    Ok(out)
}

/// Per-waypoint forces for a route under `state`.
pub fn tendon_forces(route: &TendonRoute, state: &TendonState) -> Result<Vec<Vector3<f64>>> {
    let positions = route.positions();
    let normals: Vec<Vector3<f64>> = route.waypoints.iter().map(|w| w.normal).collect();
    point_forces(&positions, &normals, state.tension)
}

/// Bending moment `M_i = h_i f_T` at each waypoint.
pub fn bending_moment_profile(route: &TendonRoute, f_t: f64) -> Vec<f64> {
    route.waypoints.iter().map(|w| w.height * f_t).collect()
}
