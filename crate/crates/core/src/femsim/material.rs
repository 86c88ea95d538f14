use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TetMesh;
use crate::{E_MAX, E_MIN, NUM_BLOCKS};

/// Per-block Young's moduli (Pa), the design variable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StiffnessVector(pub [f64; NUM_BLOCKS]);

impl StiffnessVector {
    pub fn uniform(e: f64) -> Self {
        Self([e; NUM_BLOCKS])
    }

    pub fn from_slice(k: &[f64]) -> Result<Self> {
        if k.len() != NUM_BLOCKS {
            return Err(Error::ShapeMismatch {
                role: "stiffness".into(),
                expected: NUM_BLOCKS,
                actual: k.len(),
            });
        }
        let mut a = [0.0; NUM_BLOCKS];
        a.copy_from_slice(k);
        let s = Self(a);
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &e) in self.0.iter().enumerate() {
            if !(E_MIN..=E_MAX).contains(&e) {
                return Err(Error::validation(
                    format!("k[{i}]"),
                    format!("{e} Pa outside [{E_MIN}, {E_MAX}]"),
                ));
            }
        }
        Ok(())
    }

    /// Normalised log-stiffness `u = ln(k / E_MIN) / ln(E_MAX / E_MIN)`, so
    /// the allowed range maps to `[0, 1]`.
    pub fn to_unit(&self) -> [f64; NUM_BLOCKS] {
        let span = (E_MAX / E_MIN).ln();
        self.0.map(|e| (e / E_MIN).ln() / span)
    }

    /// Inverse of [`to_unit`](Self::to_unit), clamping `u` to `[0, 1]`.
    pub fn from_unit(u: &[f64; NUM_BLOCKS]) -> Self {
        let span = (E_MAX / E_MIN).ln();
        Self(u.map(|x| (E_MIN * (x.clamp(0.0, 1.0) * span).exp()).clamp(E_MIN, E_MAX)))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Material of every tetrahedron.
#[derive(Debug, Clone, PartialEq)]
pub struct MaterialMap {
    pub youngs: Vec<f64>,
    pub poisson: f64,
    pub density: f64,
}

/// Assigns each tetrahedron the modulus of its block.
pub fn map_stiffness(k: &StiffnessVector, mesh: &TetMesh, poisson: f64, density: f64) -> Result<MaterialMap> {
    k.validate()?;
    if !(0.0..0.5).contains(&poisson) {
        return Err(Error::validation("poisson", format!("{poisson} outside [0, 0.5)")));
    }
    if !(density > 0.0) {
        return Err(Error::validation("density", "must be positive"));
    }
    Ok(MaterialMap {
        youngs: mesh.block_ids().iter().map(|&b| k.0[b as usize]).collect(),
        poisson,
        density,
    })
}

/// Lamé parameters from Young's modulus and Poisson ratio.
pub fn lame(e: f64, nu: f64) -> (f64, f64) {
    let mu = e / (2.0 * (1.0 + nu));
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    (mu, lambda)
}

/// Parameters of the stable Neo-Hookean energy
/// `mu/2 (Ic - 3) + lambda/2 (J - alpha)^2 - mu/2 log(Ic + 1)`,
/// remapped so the small-strain response matches linear elasticity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StableNeoHookean {
    pub mu: f64,
    pub lambda: f64,
    pub alpha: f64,
}

impl StableNeoHookean {
    pub fn new(e: f64, nu: f64) -> Self {
        let (mu_l, lambda_l) = lame(e, nu);
        let mu = 4.0 / 3.0 * mu_l;
        let lambda = lambda_l + 5.0 / 6.0 * mu_l;
        Self { mu, lambda, alpha: 1.0 + 0.75 * mu / lambda }
    }

    /// First Piola-Kirchhoff stress.
    #[inline]
    pub fn first_piola(&self, f: &Matrix3<f64>) -> Matrix3<f64> {
        let ic = f.norm_squared();
        let c0 = f.column(0).into_owned();
        let c1 = f.column(1).into_owned();
        let c2 = f.column(2).into_owned();
        let x12 = c1.cross(&c2);
        let j = c0.dot(&x12);
        let cof = Matrix3::from_columns(&[x12, c2.cross(&c0), c0.cross(&c1)]);
        f * (self.mu * (1.0 - 1.0 / (ic + 1.0))) + cof * (self.lambda * (j - self.alpha))
    }
}
