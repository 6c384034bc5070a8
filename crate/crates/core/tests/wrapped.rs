use apovae_core::geometry::{BallConfig, BallPoint};
use apovae_core::hyp::TapeBall;
use apovae_core::tape::{gradient_check, Tape};
use apovae_core::wrapped::{sample_prior, PriorSpec, WrappedNormalParams};
use apovae_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn wn(cfg: &BallConfig, mu: &[f64], sigma: &[f64]) -> WrappedNormalParams {
    WrappedNormalParams::new(cfg.point(mu.to_vec()).unwrap(), sigma.to_vec()).unwrap()
}

/// ∫ exp(log_prob) over the 2-D ball. The radius is parametrized as
/// `r = tanh(√c s)/√c`, which stretches the neighbourhood of the boundary.
fn quadrature(cfg: &BallConfig, q: &WrappedNormalParams) -> f64 {
    let sc = cfg.c().sqrt();
    let (ns, nt, s_max) = (3000, 256, 14.0 / sc);
    let hs = s_max / ns as f64;
    let ht = 2.0 * std::f64::consts::PI / nt as f64;
    let mut total = 0.0;
    for i in 0..=ns {
        let s = i as f64 * hs;
        let r = (sc * s).tanh() / sc;
        let dr = 1.0 / (sc * s).cosh().powi(2);
        let w = if i == 0 || i == ns {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let mut ring = 0.0;
        for j in 0..nt {
            let th = j as f64 * ht;
            let z = cfg.project(&[r * th.cos(), r * th.sin()]).unwrap();
            ring += q.log_prob(&z, cfg).unwrap().exp();
        }
        total += w * ring * ht * r * dr;
    }
    total * hs / 3.0
}

#[test]
fn density_integrates_to_one() {
    for c in [0.7, 1.0] {
        for s in [0.3, 1.0] {
            let cfg = BallConfig::new(c, 2).unwrap();
            for mu in [[0.0, 0.0], [0.3, -0.2]] {
                let mass = quadrature(&cfg, &wn(&cfg, &mu, &[s, s]));
                assert!((0.99..=1.01).contains(&mass), "c={c} σ={s} μ={mu:?}: {mass}");
            }
        }
    }
}

/// Numerical `ln|det ∂z/∂v|` of the sampling chain at `v`.
fn numeric_log_det(cfg: &BallConfig, q: &WrappedNormalParams, v: &[f64]) -> f64 {
    let n = v.len();
    let h = 1e-6;
    let sigma = q.sigma();
    let at = |x: &[f64]| -> Vec<f64> {
        let noise: Vec<f64> = x.iter().zip(sigma).map(|(a, s)| a / s).collect();
        q.sample_with_noise(&noise, cfg).unwrap().into_coords()
    };
    let mut jac = vec![vec![0.0; n]; n];
    for k in 0..n {
        let mut p = v.to_vec();
        p[k] += h;
        let up = at(&p);
        p[k] -= 2.0 * h;
        let dn = at(&p);
        for i in 0..n {
            jac[i][k] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    // Gaussian elimination with partial pivoting
    let mut logdet = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&a, &b| jac[a][col].abs().total_cmp(&jac[b][col].abs())).unwrap();
        jac.swap(col, piv);
        let d = jac[col][col];
        logdet += d.abs().ln();
        for r in col + 1..n {
            let f = jac[r][col] / d;
            for k in col..n {
                jac[r][k] -= f * jac[col][k];
            }
        }
    }
    logdet
}

#[test]
fn closed_form_jacobian_matches_numeric() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..100 {
        let n = 2 + trial % 2;
        let c = [0.7, 1.0][trial % 4 / 2];
        let cfg = BallConfig::new(c, n).unwrap();
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-0.4..0.4)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..1.2)).collect();
        let q = wn(&cfg, &mu, &sigma);
        let v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.8).collect();
        let noise: Vec<f64> = v.iter().zip(&sigma).map(|(a, s)| a / s).collect();
        let z = q.sample_with_noise(&noise, &cfg).unwrap();
        let closed = q.log_det_jacobian(&z, &cfg);
        let numeric = numeric_log_det(&cfg, &q, &v);
        let rel = ((closed.exp() - numeric.exp()) / numeric.exp()).abs();
        assert!(rel <= 1e-4, "trial {trial}: {closed} vs {numeric}");
    }
}

#[test]
fn sampling_examples() {
    let cfg = BallConfig::new(1.0, 2).unwrap();
    let tiny = wn(&cfg, &[0.2, -0.3], &[1e-12, 1e-12]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let mut e: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let norm = (e[0] * e[0] + e[1] * e[1]).sqrt();
        let k = rng.random_range(0.0..10.0) / norm;
        e.iter_mut().for_each(|x| *x *= k);
        let z = tiny.sample_with_noise(&e, &cfg).unwrap();
        assert!((z.coords()[0] - 0.2).abs() < 1e-9 && (z.coords()[1] + 0.3).abs() < 1e-9);
    }
    let z = WrappedNormalParams::standard(2).sample_with_noise(&[0.5, 0.0], &cfg).unwrap();
    assert!((z.coords()[0] - 0.5f64.tanh()).abs() < 1e-15 && z.coords()[1] == 0.0);
}

#[test]
fn tangent_mean_of_centred_samples() {
    let cfg = BallConfig::new(1.0, 2).unwrap();
    let q = wn(&cfg, &[0.0, 0.0], &[0.2, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mean = [0.0; 2];
    let mut std_mean = [0.0; 2];
    let count = 100_000;
    for _ in 0..count {
        let z = q.sample(&mut rng, &cfg).unwrap();
        let zs = sample_prior(PriorSpec::Standard, &[], &mut rng, &cfg).unwrap();
        for j in 0..2 {
            mean[j] += cfg.log0(&z)[j] / count as f64;
            std_mean[j] += cfg.log0(&zs)[j] / count as f64;
        }
    }
    assert!(mean.iter().all(|m| m.abs() < 0.01), "{mean:?}");
    assert!(std_mean.iter().all(|m| m.abs() < 0.01), "{std_mean:?}");
}

#[test]
fn density_examples() {
    let cfg = BallConfig::new(1.0, 2).unwrap();
    let lp = WrappedNormalParams::standard(2).log_prob(&cfg.origin(), &cfg).unwrap();
    assert!((lp - (1.0 / (2.0 * std::f64::consts::PI)).ln()).abs() < 1e-12);
    assert!((lp + 1.83788).abs() < 1e-5);

    let flat = BallConfig::new(1e-6, 3).unwrap();
    let (mu, sigma) = ([0.1, -0.2, 0.05], [0.5, 0.8, 1.3]);
    let q = wn(&flat, &mu, &sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let z: Vec<f64> = mu.iter().map(|m| m + rng.random_range(-1.0..1.0)).collect();
        let euclid: f64 = z
            .iter()
            .zip(&mu)
            .zip(&sigma)
            .map(|((x, m), s)| -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .sum();
        let got = q.log_prob(&flat.point(z).unwrap(), &flat).unwrap();
        assert!((got - euclid).abs() < 1e-3);
    }
}

#[test]
fn vamp_prior_examples() {
    let cfg = BallConfig::new(1.0, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bank = [wn(&cfg, &[0.3, 0.0], &[0.05, 0.05]), wn(&cfg, &[-0.3, 0.0], &[0.05, 0.05])];
    let draws = 100_000;
    let right = (0..draws)
        .filter(|_| sample_prior(PriorSpec::vamp(2).unwrap(), &bank, &mut rng, &cfg).unwrap().coords()[0] > 0.0)
        .count();
    let frac = right as f64 / draws as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    assert!(sample_prior(PriorSpec::vamp(2).unwrap(), &[], &mut rng, &cfg).is_err());
    assert!(PriorSpec::vamp(0).is_err());

    // K = 1: the mixture is the single component
    let one = [wn(&cfg, &[0.1, 0.2], &[0.3, 0.6])];
    let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
    let n = 50_000;
    for _ in 0..n {
        let x = cfg.log0(&sample_prior(PriorSpec::vamp(1).unwrap(), &one, &mut rng, &cfg).unwrap());
        let y = cfg.log0(&one[0].sample(&mut rng, &cfg).unwrap());
        for j in 0..2 {
            a[j] += x[j] / n as f64;
            a[j + 2] += x[j] * x[j] / n as f64;
            b[j] += y[j] / n as f64;
            b[j + 2] += y[j] * y[j] / n as f64;
        }
    }
    for j in 0..4 {
        assert!((a[j] - b[j]).abs() < 0.02, "moment {j}: {} vs {}", a[j], b[j]);
    }
}

#[test]
fn samples_never_leave_the_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1_000_000u32 {
        let n = 2 + (trial % 3) as usize;
        let c = [0.1, 0.7, 1.0][(trial / 3 % 3) as usize];
        let cfg = BallConfig::new(c, n).unwrap();
        let r = rng.random_range(0.0..0.999) / c.sqrt();
        let mu: Vec<f64> = (0..n).map(|j| if j == 0 { r } else { 0.0 }).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..5.0)).collect();
        let z = wn(&cfg, &mu, &sigma).sample(&mut rng, &cfg).unwrap();
        let s: f64 = z.coords().iter().map(|x| x * x).sum();
        assert!(z.coords().iter().all(|x| x.is_finite()) && c * s < 1.0);
    }
}

#[test]
fn reparametrization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let n = 2 + trial % 3;
        let cfg = BallConfig::new([0.7, 1.0][trial % 2], n).unwrap();
        let tb = TapeBall::from(&cfg);
        let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut packed: Vec<f64> = (0..n).map(|_| rng.random_range(-0.4..0.4)).collect();
        packed.extend((0..n).map(|_| rng.random_range(0.2..0.9)));
        let point = Matrix::row(&packed);

        let noise_m = Matrix::row(&noise);
        let w_m = Matrix::column(&weights);
        let f = |t: &mut Tape, x| {
            let mu = t.slice_cols(x, 0, n);
            let s = t.slice_cols(x, n, n);
            let e = t.constant(noise_m.clone());
            let v = t.mul(s, e);
            let z = tb.wrap(t, mu, v);
            let w = t.constant(w_m.clone());
            let y = t.matmul(z, w);
            let y = t.tanh(y);
            let d = tb.distance(t, mu, z);
            t.add(y, d)
        };
        let err = gradient_check(f, &point, 1e-5).unwrap();
        assert!(err <= 1e-5, "trial {trial}: {err}");

        // the tape chain agrees with the plain sampler
        let mut t = Tape::new();
        let mu = t.constant(Matrix::row(&packed[..n]));
        let v: Vec<f64> = noise.iter().zip(&packed[n..]).map(|(e, s)| e * s).collect();
        let v = t.constant(Matrix::row(&v));
        let z = tb.wrap(&mut t, mu, v);
        let q = wn(&cfg, &packed[..n], &packed[n..]);
        let plain = q.sample_with_noise(&noise, &cfg).unwrap();
        for (a, b) in t.value(z).as_slice().iter().zip(plain.coords()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn log_prob_gradients_and_agreement() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..100 {
        let n = 2 + trial % 3;
        let cfg = BallConfig::new([0.7, 1.0][trial % 2], n).unwrap();
        let tb = TapeBall::from(&cfg);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        let mut packed: Vec<f64> = (0..n).map(|_| rng.random_range(-0.4..0.4)).collect();
        packed.extend((0..n).map(|_| rng.random_range(0.3..1.5)));
        let zm = Matrix::row(&z);
        let f = |t: &mut Tape, x| {
            let mu = t.slice_cols(x, 0, n);
            let s = t.slice_cols(x, n, n);
            let zz = t.constant(zm.clone());
            let lp = tb.wrapped_log_prob(t, mu, s, zz);
            t.sum(lp)
        };
        let err = gradient_check(f, &Matrix::row(&packed), 1e-5).unwrap();
        assert!(err <= 1e-5, "trial {trial}: {err}");

        let mut t = Tape::new();
        let x = t.constant(Matrix::row(&packed));
        let lp = f(&mut t, x);
        let q = wn(&cfg, &packed[..n], &packed[n..]);
        let plain = q.log_prob(&cfg.point(z.clone()).unwrap(), &cfg).unwrap();
        assert!((t.scalar(lp) - plain).abs() < 1e-10);
    }
}

#[test]
fn rejects_bad_parameters() {
    let cfg = BallConfig::new(1.0, 2).unwrap();
    assert!(WrappedNormalParams::new(BallPoint::origin(2), vec![1.0, 0.0]).is_err());
    assert!(WrappedNormalParams::new(BallPoint::origin(2), vec![1.0]).is_err());
    assert!(WrappedNormalParams::standard(2).sample_with_noise(&[1.0], &cfg).is_err());
}
