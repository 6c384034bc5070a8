//! Ball operations recorded on a [`Tape`], one point per row.
//!
//! These mirror the functions in [`crate::geometry`] and are checked against
//! them in tests; the tape versions are what the model trains through.

use alloc::vec::Vec;

use crate::geometry::{BallConfig, ATANH_LIMIT, NORM_FLOOR};
use crate::math;
use crate::tape::{Tape, Var};

/// Ball parameters as seen by the tape operations.
#[derive(Clone, Copy, Debug)]
pub struct TapeBall {
    pub c: f64,
    pub max_norm: f64,
}

impl From<&BallConfig> for TapeBall {
    fn from(cfg: &BallConfig) -> Self {
        TapeBall { c: cfg.c(), max_norm: cfg.max_norm() }
    }
}

impl TapeBall {
    fn sqrt_c(&self) -> f64 {
        math::sqrt(self.c)
    }

    /// Row norms with a floor, `m × n → m × 1`.
    pub fn norm(&self, t: &mut Tape, x: Var) -> Var {
        let s = t.row_sq_norm(x);
        let s = t.clamp_min(s, NORM_FLOOR * NORM_FLOOR);
        t.sqrt(s)
    }

    /// Conformal factor per row.
    pub fn lambda(&self, t: &mut Tape, x: Var) -> Var {
        let s = t.row_sq_norm(x);
        let s = t.scale(s, -self.c);
        let d = t.add_scalar(s, 1.0);
        let r = t.recip(d);
        t.scale(r, 2.0)
    }

    /// Rows beyond the projection radius are rescaled onto it.
    pub fn project(&self, t: &mut Tape, x: Var) -> Var {
        let n = self.norm(t, x);
        let r = t.recip(n);
        let k = t.scale(r, self.max_norm);
        let k = t.clamp_max(k, 1.0);
        t.mul(x, k)
    }

    /// `x ⊕ y`, rows broadcast (either side may be a single row).
    pub fn mobius_add(&self, t: &mut Tape, x: Var, y: Var) -> Var {
        let c = self.c;
        let xy = t.row_dot(x, y);
        let x2 = t.row_sq_norm(x);
        let y2 = t.row_sq_norm(y);
        let two_cxy = t.scale(xy, 2.0 * c);
        let cy2 = t.scale(y2, c);
        let a = t.add(two_cxy, cy2);
        let a = t.add_scalar(a, 1.0);
        let b = t.scale(x2, -c);
        let b = t.add_scalar(b, 1.0);
        let ax = t.mul(a, x);
        let by = t.mul(b, y);
        let num = t.add(ax, by);
        let xy2 = t.mul(x2, y2);
        let cc = t.scale(xy2, c * c);
        let den = t.add(two_cxy, cc);
        let den = t.add_scalar(den, 1.0);
        let out = t.div(num, den);
        self.project(t, out)
    }

    pub fn exp_map(&self, t: &mut Tape, mu: Var, u: Var) -> Var {
        let sc = self.sqrt_c();
        let lam = self.lambda(t, mu);
        let un = self.norm(t, u);
        let arg = t.mul(lam, un);
        let arg = t.scale(arg, sc / 2.0);
        let th = t.tanh(arg);
        let den = t.scale(un, sc);
        let k = t.div(th, den);
        let step = t.mul(u, k);
        self.mobius_add(t, mu, step)
    }

    pub fn log_map(&self, t: &mut Tape, mu: Var, y: Var) -> Var {
        let sc = self.sqrt_c();
        let neg = t.neg(mu);
        let kappa = self.mobius_add(t, neg, y);
        let kn = self.norm(t, kappa);
        let arg = t.scale(kn, sc);
        let at = t.atanh_clamped(arg, ATANH_LIMIT);
        let lam = self.lambda(t, mu);
        let den = t.mul(lam, kn);
        let den = t.scale(den, sc / 2.0);
        let k = t.div(at, den);
        t.mul(kappa, k)
    }

    pub fn exp0(&self, t: &mut Tape, v: Var) -> Var {
        let sc = self.sqrt_c();
        let n = self.norm(t, v);
        let arg = t.scale(n, sc);
        let th = t.tanh(arg);
        let k = t.div(th, arg);
        let out = t.mul(v, k);
        self.project(t, out)
    }

    pub fn log0(&self, t: &mut Tape, z: Var) -> Var {
        let sc = self.sqrt_c();
        let n = self.norm(t, z);
        let arg = t.scale(n, sc);
        let at = t.atanh_clamped(arg, ATANH_LIMIT);
        let k = t.div(at, arg);
        t.mul(z, k)
    }

    /// `(1 − c‖μ‖²) v`.
    pub fn transport_from_origin(&self, t: &mut Tape, mu: Var, v: Var) -> Var {
        let s = t.row_sq_norm(mu);
        let s = t.scale(s, -self.c);
        let k = t.add_scalar(s, 1.0);
        t.mul(v, k)
    }

    pub fn distance(&self, t: &mut Tape, z: Var, w: Var) -> Var {
        let sc = self.sqrt_c();
        let neg = t.neg(z);
        let k = self.mobius_add(t, neg, w);
        let n = self.norm(t, k);
        let arg = t.scale(n, sc);
        let at = t.atanh_clamped(arg, ATANH_LIMIT);
        t.scale(at, 2.0 / sc)
    }

    /// Wrapped-normal reparametrization: `exp_μ(P₀→μ(v))`.
    pub fn wrap(&self, t: &mut Tape, mu: Var, v: Var) -> Var {
        let u = self.transport_from_origin(t, mu, v);
        self.exp_map(t, mu, u)
    }

    /// Gyroplane features of every row of `z` (`m × n`) against every plane
    /// (`normals`, `intercepts_tangent`: `k × n`), giving `m × k`.
    pub fn gyroplane_features(&self, t: &mut Tape, z: Var, normals: Var, intercepts_tangent: Var) -> Var {
        let c = self.c;
        let sc = self.sqrt_c();
        let n = t.shape(z).1;
        let ones = t.constant(crate::tensor::Matrix::filled(1, n, 1.0));
        let b = self.exp0(t, intercepts_tangent);

        // per-plane scalars as 1 × k rows
        let bb = t.square(b);
        let b2 = t.matmul_t(ones, false, bb, true);
        let aa = t.square(normals);
        let a2 = t.matmul_t(ones, false, aa, true);
        let a2 = t.clamp_min(a2, NORM_FLOOR * NORM_FLOOR);
        let an = t.sqrt(a2);
        let abp = t.mul(normals, b);
        let ab = t.matmul_t(ones, false, abp, true);

        // pairwise terms, m × k
        let p = t.matmul_t(z, false, b, true);
        let za = t.matmul_t(z, false, normals, true);
        let z2 = t.row_sq_norm(z);

        // κ = (−b) ⊕ z written through α, β and the denominator D
        let m2cp = t.scale(p, -2.0 * c);
        let cz2 = t.scale(z2, c);
        let alpha = t.add(m2cp, cz2);
        let alpha = t.add_scalar(alpha, 1.0);
        let beta = t.scale(b2, -c);
        let beta = t.add_scalar(beta, 1.0);
        let bz = t.mul(b2, z2);
        let cbz = t.scale(bz, c * c);
        let den = t.add(m2cp, cbz);
        let den = t.add_scalar(den, 1.0);

        // ⟨κ, a⟩ = (−α⟨b,a⟩ + β⟨z,a⟩) / D
        let t1 = t.mul(alpha, ab);
        let t2 = t.mul(beta, za);
        let ka = t.sub(t2, t1);
        let ka = t.div(ka, den);

        // ‖κ‖² = (α²‖b‖² − 2αβ⟨b,z⟩ + β²‖z‖²) / D²
        let a_sq = t.square(alpha);
        let s1 = t.mul(a_sq, b2);
        let ab_ = t.mul(alpha, beta);
        let s2 = t.mul(ab_, p);
        let s2 = t.scale(s2, -2.0);
        let b_sq = t.square(beta);
        let s3 = t.mul(b_sq, z2);
        let k2 = t.add(s1, s2);
        let k2 = t.add(k2, s3);
        let d2 = t.square(den);
        let k2 = t.div(k2, d2);

        let ck2 = t.scale(k2, -c);
        let gap = t.add_scalar(ck2, 1.0);
        let gap = t.clamp_min(gap, NORM_FLOOR);
        let denom = t.mul(gap, an);
        let arg = t.div(ka, denom);
        let arg = t.scale(arg, 2.0 * sc);
        let dist = t.asinh(arg);

        let lam_b = {
            let cb = t.scale(b2, -c);
            let g = t.add_scalar(cb, 1.0);
            let r = t.recip(g);
            t.scale(r, 2.0 / sc)
        };
        let coef = t.mul(lam_b, an);
        t.mul(dist, coef)
    }

    /// Log density (Lebesgue measure on the ball) of `z` under the wrapped
    /// normal with location `mu` and diagonal scale `sigma`, per row.
    pub fn wrapped_log_prob(&self, t: &mut Tape, mu: Var, sigma: Var, z: Var) -> Var {
        let (_, n) = t.shape(z);
        let nf = n as f64;
        let sc = self.sqrt_c();
        let u = self.log_map(t, mu, z);
        let lam_mu = self.lambda(t, mu);
        let half = t.scale(lam_mu, 0.5);
        let v = t.mul(u, half);
        let vs = t.div(v, sigma);
        let quad = t.row_sq_norm(vs);
        let quad = t.scale(quad, -0.5);
        let ls = t.ln(sigma);
        let ls = t.sum_rows(ls);
        let gauss = t.sub(quad, ls);
        let gauss = t.add_scalar(gauss, -0.5 * nf * math::log(2.0 * core::f64::consts::PI));

        // log|det J| = n·ln(2/λ_z) + (n − 1)·ln(sinh(√c r)/(√c r)), r = λ_μ‖u‖
        let lam_z = self.lambda(t, z);
        let lz = t.ln(lam_z);
        let lz = t.add_scalar(lz, -math::log(2.0));
        let lz = t.scale(lz, -nf);
        let un = self.norm(t, u);
        let r = t.mul(lam_mu, un);
        let sr = t.scale(r, sc);
        let ls = t.log_sinhc(sr);
        let ls = t.scale(ls, nf - 1.0);
        let logdet = t.add(lz, ls);
        t.sub(gauss, logdet)
    }
}

/// Rows of a matrix value as owned vectors.
pub fn rows_of(t: &Tape, v: Var) -> Vec<Vec<f64>> {
    let m = t.value(v);
    (0..m.rows()).map(|r| m.row_slice(r).to_vec()).collect()
}
