//! Closed-form operations on the Poincaré ball `{z ∈ Rⁿ : c‖z‖² < 1}`.
//!
//! All functions are pure. Points are validated on construction; outputs
//! that round to (or past) the boundary are pulled back inside by
//! [`BallConfig::project`].

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::{self, dot};

/// Largest argument fed to `atanh`.
pub const ATANH_LIMIT: f64 = 1.0 - 1e-7;
/// Floor applied to norms that appear in denominators.
pub const NORM_FLOOR: f64 = 1e-15;

/// Curvature, dimension and boundary margin of a ball.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallConfig {
    c: f64,
    dim: usize,
    boundary_eps: f64,
}

/// A point strictly inside the ball.
#[derive(Clone, Debug, PartialEq)]
pub struct BallPoint(Vec<f64>);

/// A tangent vector attached to a base point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    pub base: BallPoint,
    pub vec: Vec<f64>,
}

/// Hyperbolic hyperplane with normal `a` through `b = exp₀(b̃)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gyroplane {
    normal: Vec<f64>,
    intercept_tangent: Vec<f64>,
}

impl BallPoint {
    pub fn origin(dim: usize) -> Self {
        BallPoint(alloc::vec![0.0; dim])
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn neg(&self) -> BallPoint {
        BallPoint(self.0.iter().map(|v| -v).collect())
    }
}

impl TangentVector {
    pub fn new(base: BallPoint, vec: Vec<f64>) -> Result<Self> {
        if vec.len() != base.dim() {
            return Err(invalid("tangent vector dimension does not match its base point"));
        }
        check_finite(&vec)?;
        Ok(TangentVector { base, vec })
    }

    pub fn at_origin(vec: Vec<f64>) -> Result<Self> {
        let dim = vec.len();
        Self::new(BallPoint::origin(dim), vec)
    }
}

impl Gyroplane {
    pub fn new(normal: Vec<f64>, intercept_tangent: Vec<f64>) -> Result<Self> {
        if normal.len() != intercept_tangent.len() {
            return Err(invalid("gyroplane normal and intercept differ in dimension"));
        }
        check_finite(&normal)?;
        check_finite(&intercept_tangent)?;
        if math::norm(&normal) == 0.0 {
            return Err(invalid("gyroplane normal must be nonzero"));
        }
        Ok(Gyroplane { normal, intercept_tangent })
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn intercept_tangent(&self) -> &[f64] {
        &self.intercept_tangent
    }
}

fn check_finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(invalid("non-finite coordinate"))
    }
}

impl BallConfig {
    pub const DEFAULT_BOUNDARY_EPS: f64 = 1e-5;

    pub fn new(c: f64, dim: usize) -> Result<Self> {
        Self::with_eps(c, dim, Self::DEFAULT_BOUNDARY_EPS)
    }

    pub fn with_eps(c: f64, dim: usize, boundary_eps: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid(format!("curvature must be positive, got {c}")));
        }
        if dim == 0 {
            return Err(invalid("dimension must be at least 1"));
        }
        if !(boundary_eps > 0.0 && boundary_eps < 1.0) {
            return Err(invalid(format!("boundary_eps must lie in (0, 1), got {boundary_eps}")));
        }
        Ok(BallConfig { c, dim, boundary_eps })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn boundary_eps(&self) -> f64 {
        self.boundary_eps
    }

    /// Largest Euclidean norm a projected point may have.
    pub fn max_norm(&self) -> f64 {
        (1.0 - self.boundary_eps) / math::sqrt(self.c)
    }

    /// Validates `coords` as a point strictly inside the ball.
    pub fn point(&self, coords: Vec<f64>) -> Result<BallPoint> {
        self.check_dim(&coords)?;
        check_finite(&coords)?;
        if self.c * dot(&coords, &coords) >= 1.0 {
            return Err(invalid("point lies outside the ball"));
        }
        Ok(BallPoint(coords))
    }

    pub fn origin(&self) -> BallPoint {
        BallPoint::origin(self.dim)
    }

    fn check_dim(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim {
            return Err(invalid(format!("expected dimension {}, got {}", self.dim, v.len())));
        }
        Ok(())
    }

    /// Radially rescales `x` to norm `(1 − eps)/√c` if it lies beyond it.
    pub fn project(&self, x: &[f64]) -> Result<BallPoint> {
        self.check_dim(x)?;
        check_finite(x)?;
        Ok(BallPoint(self.project_raw(x.to_vec())))
    }

    pub(crate) fn project_raw(&self, mut x: Vec<f64>) -> Vec<f64> {
        let n = math::norm(&x);
        let max = self.max_norm();
        if n > max {
            let k = max / n;
            for v in &mut x {
                *v *= k;
            }
        }
        x
    }

    /// `λ_z = 2 / (1 − c‖z‖²)`.
    pub fn conformal_factor(&self, z: &BallPoint) -> f64 {
        let z = self.project_raw(z.0.clone());
        lambda(self.c, &z)
    }

    pub fn mobius_add(&self, z: &BallPoint, w: &BallPoint) -> Result<BallPoint> {
        self.check_dim(&z.0)?;
        self.check_dim(&w.0)?;
        check_finite(&z.0)?;
        check_finite(&w.0)?;
        Ok(BallPoint(self.project_raw(mobius_add_raw(self.c, &z.0, &w.0))))
    }

    pub fn exp_map(&self, mu: &BallPoint, u: &TangentVector) -> Result<BallPoint> {
        self.check_dim(&mu.0)?;
        if u.base != *mu {
            return Err(invalid("tangent vector is not attached to the base point"));
        }
        check_finite(&u.vec)?;
        Ok(BallPoint(self.project_raw(exp_map_raw(self.c, &mu.0, &u.vec))))
    }

    pub fn log_map(&self, mu: &BallPoint, y: &BallPoint) -> Result<TangentVector> {
        self.check_dim(&mu.0)?;
        self.check_dim(&y.0)?;
        check_finite(&y.0)?;
        if mu == y {
            return Ok(TangentVector { base: mu.clone(), vec: alloc::vec![0.0; self.dim] });
        }
        Ok(TangentVector { base: mu.clone(), vec: log_map_raw(self.c, &mu.0, &y.0) })
    }

    /// `P₀→μ(v) = (λ₀/λ_μ) v`.
    pub fn transport_from_origin(&self, mu: &BallPoint, v: &TangentVector) -> Result<TangentVector> {
        self.check_dim(&mu.0)?;
        if v.base.0.iter().any(|&x| x != 0.0) {
            return Err(invalid("vector is not attached to the origin"));
        }
        let k = 2.0 / lambda(self.c, &mu.0);
        Ok(TangentVector { base: mu.clone(), vec: v.vec.iter().map(|x| k * x).collect() })
    }

    /// `Pμ→₀(u) = (λ_μ/λ₀) u`.
    pub fn transport_to_origin(&self, u: &TangentVector) -> Result<TangentVector> {
        self.check_dim(&u.base.0)?;
        let k = lambda(self.c, &u.base.0) / 2.0;
        Ok(TangentVector { base: self.origin(), vec: u.vec.iter().map(|x| k * x).collect() })
    }

    /// Geodesic distance `(2/√c)·atanh(√c‖(−z) ⊕ w‖)`.
    pub fn distance(&self, z: &BallPoint, w: &BallPoint) -> f64 {
        if z == w {
            return 0.0;
        }
        distance_raw(self.c, &z.0, &w.0)
    }

    /// Signed, scaled hyperbolic distance from `z` to the gyroplane.
    pub fn gyroplane_feature(&self, z: &BallPoint, plane: &Gyroplane) -> Result<f64> {
        self.check_dim(&z.0)?;
        self.check_dim(&plane.normal)?;
        let b = exp0_raw(self.c, &plane.intercept_tangent);
        let b = self.project_raw(b);
        Ok(gyroplane_raw(self.c, &z.0, &plane.normal, &b))
    }

    /// Point at fraction `t` of the geodesic from `z1` to `z2`.
    pub fn geodesic_interpolate(&self, z1: &BallPoint, z2: &BallPoint, t: f64) -> Result<BallPoint> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid(format!("interpolation parameter must be in [0, 1], got {t}")));
        }
        if t == 0.0 {
            return Ok(z1.clone());
        }
        if t == 1.0 {
            return Ok(z2.clone());
        }
        let u = self.log_map(z1, z2)?;
        let scaled = TangentVector { base: u.base, vec: u.vec.iter().map(|x| t * x).collect() };
        self.exp_map(z1, &scaled)
    }

    /// `exp₀(v)`.
    pub fn exp0(&self, v: &[f64]) -> Result<BallPoint> {
        self.check_dim(v)?;
        check_finite(v)?;
        Ok(BallPoint(self.project_raw(exp0_raw(self.c, v))))
    }

    /// `log₀(z)`.
    pub fn log0(&self, z: &BallPoint) -> Vec<f64> {
        log0_raw(self.c, &z.0)
    }
}

#[inline]
pub(crate) fn lambda(c: f64, z: &[f64]) -> f64 {
    2.0 / (1.0 - c * dot(z, z))
}

pub(crate) fn mobius_add_raw(c: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    let xy = dot(x, y);
    let x2 = dot(x, x);
    let y2 = dot(y, y);
    let a = 1.0 + 2.0 * c * xy + c * y2;
    let b = 1.0 - c * x2;
    let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
    x.iter().zip(y).map(|(xi, yi)| (a * xi + b * yi) / den).collect()
}

pub(crate) fn exp_map_raw(c: f64, mu: &[f64], u: &[f64]) -> Vec<f64> {
    let sc = math::sqrt(c);
    let un = math::norm(u).max(NORM_FLOOR);
    let k = math::tanh(sc * lambda(c, mu) * un / 2.0) / (sc * un);
    let step: Vec<f64> = u.iter().map(|x| k * x).collect();
    mobius_add_raw(c, mu, &step)
}

pub(crate) fn log_map_raw(c: f64, mu: &[f64], y: &[f64]) -> Vec<f64> {
    let sc = math::sqrt(c);
    let neg: Vec<f64> = mu.iter().map(|v| -v).collect();
    let kappa = mobius_add_raw(c, &neg, y);
    let kn = math::norm(&kappa).max(NORM_FLOOR);
    let k = 2.0 / (sc * lambda(c, mu)) * math::atanh((sc * kn).min(ATANH_LIMIT)) / kn;
    kappa.iter().map(|x| k * x).collect()
}

pub(crate) fn exp0_raw(c: f64, v: &[f64]) -> Vec<f64> {
    let sc = math::sqrt(c);
    let n = math::norm(v).max(NORM_FLOOR);
    let k = math::tanh(sc * n) / (sc * n);
    v.iter().map(|x| k * x).collect()
}

pub(crate) fn log0_raw(c: f64, z: &[f64]) -> Vec<f64> {
    let sc = math::sqrt(c);
    let n = math::norm(z).max(NORM_FLOOR);
    let k = math::atanh((sc * n).min(ATANH_LIMIT)) / (sc * n);
    z.iter().map(|x| k * x).collect()
}

pub(crate) fn distance_raw(c: f64, z: &[f64], w: &[f64]) -> f64 {
    let sc = math::sqrt(c);
    let neg: Vec<f64> = z.iter().map(|v| -v).collect();
    let k = mobius_add_raw(c, &neg, w);
    2.0 / sc * math::atanh((sc * math::norm(&k)).min(ATANH_LIMIT))
}

pub(crate) fn gyroplane_raw(c: f64, z: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let sc = math::sqrt(c);
    let neg: Vec<f64> = b.iter().map(|v| -v).collect();
    let kappa = mobius_add_raw(c, &neg, z);
    let an = math::norm(a);
    let k2 = dot(&kappa, &kappa);
    let arg = 2.0 * sc * dot(&kappa, a) / ((1.0 - c * k2).max(NORM_FLOOR) * an);
    lambda(c, b) * an / sc * math::asinh(arg)
}
