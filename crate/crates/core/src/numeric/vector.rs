//! Dense `f64` vectors and cosine similarity.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

/// A finite, non-empty dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Argument("vector must have positive dimension".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite entry at index {i}")));
        }
        Ok(Vector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn checked_norm(u: &[f64], which: &str) -> Result<f64> {
    let n = norm(u);
    if n < NORM_FLOOR {
        return Err(Error::Domain(format!(
            "{which} has norm {n:e}, below the {NORM_FLOOR:e} floor"
        )));
    }
    Ok(n)
}

/// `uᵀv / (‖u‖‖v‖)`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", u.len(), v.len()));
    }
    let nu = checked_norm(u, "left operand")?;
    let nv = checked_norm(v, "right operand")?;
    Ok(dot(u, v) / (nu * nv))
}

/// Cosine similarity together with its partial derivatives with respect to
/// both arguments.
///
/// `∂s/∂u = v/(‖u‖‖v‖) − s·u/‖u‖²`, symmetrically for `v`.
pub(crate) fn cosine_with_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if u.len() != v.len() {
        return Err(Error::shape("cosine_similarity", u.len(), v.len()));
    }
    let nu = checked_norm(u, "left operand")?;
    let nv = checked_norm(v, "right operand")?;
    let inv = 1.0 / (nu * nv);
    let s = dot(u, v) * inv;
    let su = s / (nu * nu);
    let sv = s / (nv * nv);
    let du = u.iter().zip(v).map(|(a, b)| b * inv - su * a).collect();
    let dv = u.iter().zip(v).map(|(a, b)| a * inv - sv * b).collect();
    Ok((s, du, dv))
}
