//! Rotations in SO(3) acting on row vectors (`v ↦ v·R`).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{precision, Precision, Tensor};

/// Rotation augmentation protocol: identity, about the z-axis, or uniform over SO(3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    None,
    Z,
    So3,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "i" => Ok(Protocol::None),
            "z" => Ok(Protocol::Z),
            "so3" | "so(3)" => Ok(Protocol::So3),
            other => Err(Error::Config(format!(
                "unknown rotation protocol {other:?} (expected none, z or so3)"
            ))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::None => "none",
            Protocol::Z => "z",
            Protocol::So3 => "so3",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    m: [[f64; 3]; 3],
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            m: [[1., 0., 0.], [0., 1., 0.], [0., 0., 1.]],
        }
    }

    /// Validates orthonormality and unit determinant.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let r = Self { m };
        let tol = Self::tolerance();
        let (orth, det) = r.defects();
        if orth > tol || (det - 1.0).abs() > tol {
            return Err(Error::Contract(format!(
                "not a rotation: ‖RᵀR − I‖∞ = {orth:e}, det = {det}"
            )));
        }
        Ok(r)
    }

    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            m: [[c, s, 0.], [-s, c, 0.], [0., 0., 1.]],
        }
    }

    /// Rotation of a unit quaternion `(w, x, y, z)`; the input is renormalized.
    pub fn from_quaternion(q: [f64; 4]) -> Self {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        // Column-vector matrix; transposed below for the row-vector convention.
        let a = [
            [1. - 2. * (y * y + z * z), 2. * (x * y - w * z), 2. * (x * z + w * y)],
            [2. * (x * y + w * z), 1. - 2. * (x * x + z * z), 2. * (y * z - w * x)],
            [2. * (x * z - w * y), 2. * (y * z + w * x), 1. - 2. * (x * x + y * y)],
        ];
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = a[j][i];
            }
        }
        Self { m }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn transpose(&self) -> Self {
        Self {
            m: std::array::from_fn(|i| std::array::from_fn(|j| self.m[j][i])),
        }
    }

    /// `self · other` (apply `self` first under the row-vector convention).
    pub fn then(&self, other: &Rotation) -> Self {
        Self {
            m: std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum())),
        }
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = v[0] * self.m[0][j] + v[1] * self.m[1][j] + v[2] * self.m[2][j];
        }
        out
    }

    /// Right-multiplies every 3-vector along the last axis of `t`.
    pub fn rotate(&self, t: &Tensor) -> Result<Tensor> {
        if t.shape().last() != Some(&3) {
            return Err(Error::shape("rotate", t.shape(), &[3]));
        }
        let mut data = Vec::with_capacity(t.numel());
        for v in t.data().chunks_exact(3) {
            data.extend_from_slice(&self.apply([v[0], v[1], v[2]]));
        }
        Ok(Tensor::from_op(t.shape().to_vec(), data))
    }

    /// `(‖RᵀR − I‖∞, det R)`.
    pub fn defects(&self) -> (f64, f64) {
        let m = &self.m;
        let mut orth: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                orth = orth.max((dot - target).abs());
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        (orth, det)
    }

    pub fn tolerance() -> f64 {
        match precision() {
            Precision::F64 => 1e-12,
            Precision::F32 => 1e-6,
        }
    }
}

/// Draws a rotation under `protocol`. SO(3) draws normalize a 4D Gaussian,
/// which is exactly uniform on unit quaternions and hence on SO(3).
pub fn sample_rotation(protocol: Protocol, rng: &mut Rng) -> Rotation {
    match protocol {
        Protocol::None => Rotation::identity(),
        Protocol::Z => Rotation::about_z(rng.random_range(0.0..2.0 * PI)),
        Protocol::So3 => loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            if q.iter().map(|v| v * v).sum::<f64>() > 1e-12 {
                break Rotation::from_quaternion(q);
            }
        },
    }
}
