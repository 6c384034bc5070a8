//! One-dimensional calibration problem for the dual KL estimator.
//!
//! `q` and `p` are normals in the tangent space at the origin of a nearly
//! flat ball, pushed onto the ball by `exp₀`. A small network `ν(z)` is
//! trained on `E_q ν − E_p e^ν` and the estimate is read off on fresh draws.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::geometry::BallConfig;
use crate::hyp::TapeBall;
use crate::optim::{Adam, AdamConfig};
use crate::tape::{Group, ParamStore, Tape};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    /// Mean of `q`; `p` is centred at zero. Both have unit variance.
    pub shift: f64,
    pub c: f64,
    pub hidden: usize,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            shift: 0.5,
            c: 1e-6,
            hidden: 16,
            iters: 3000,
            batch: 256,
            lr: 3e-3,
            eval_samples: 200_000,
            seed: 11,
        }
    }
}

/// Trains the toy dual function and returns the KL estimate.
pub fn tangent_toy_kl(cfg: &ToyConfig) -> Result<f64> {
    let ball = BallConfig::new(cfg.c, 1)?;
    let tb = TapeBall::from(&ball);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.hidden;
    let mut store = ParamStore::new();
    let init = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let w1 = store.add("w1", Group::Dual, init(&mut rng, 1, h));
    let b1 = store.add("b1", Group::Dual, init(&mut rng, 1, h));
    let w2 = store.add("w2", Group::Dual, Matrix::zeros(h, 1));
    let b2 = store.add("b2", Group::Dual, Matrix::zeros(1, 1));
    let ids = store.ids_in(&[Group::Dual]);
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, beta1: 0.5, beta2: 0.9, eps: 1e-8 }, &store, ids)?;

    let draw = |rng: &mut ChaCha8Rng, n: usize, mean: f64| -> Matrix {
        Matrix::column(&(0..n).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>())
    };
    let objective = |t: &mut Tape, store: &ParamStore, trainable: bool, zq: Matrix, zp: Matrix| {
        let bd = store.bind(t, |_| trainable);
        let n = zq.rows();
        let v = t.constant(zq);
        let vp = t.constant(zp);
        let v = t.concat_rows(&[v, vp]);
        let z = tb.exp0(t, v);
        let x = tb.log0(t, z);
        let a = t.matmul(x, bd.get(w1));
        let a = t.add(a, bd.get(b1));
        let a = t.tanh(a);
        let o = t.matmul(a, bd.get(w2));
        let nu = t.add(o, bd.get(b2));
        let nq = t.slice_rows(nu, 0, n);
        let np = t.slice_rows(nu, n, n);
        let m = t.mean(nq);
        let e = t.exp(np);
        let e = t.mean(e);
        t.sub(m, e)
    };

    for _ in 0..cfg.iters {
        let zq = draw(&mut rng, cfg.batch, cfg.shift);
        let zp = draw(&mut rng, cfg.batch, 0.0);
        let mut t = Tape::new();
        let l1 = objective(&mut t, &store, true, zq, zp);
        store.zero_grad();
        t.backward(l1, &mut store)?;
        for id in opt.ids().to_vec() {
            store.get_mut(id).grad.scale_assign(-1.0);
        }
        opt.step(&mut store);
    }

    let zq = draw(&mut rng, cfg.eval_samples, cfg.shift);
    let zp = draw(&mut rng, cfg.eval_samples, 0.0);
    let mut t = Tape::new();
    let l1 = objective(&mut t, &store, false, zq, zp);
    t.check_finite()?;
    Ok((t.scalar(l1) + 1.0).max(0.0))
}
