//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Not part of the default test set because criterion 5 trains for
//! several minutes.
//!
//! `cargo test --release -p apovae --test acceptance [-- 1 4 8]`

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use apovae::config::load_config;
use apovae_core::corpus::{gen_tree_corpus, Batch, Sentence, TreeCorpusConfig, Vocab, BOS, EOS};
use apovae_core::geometry::{BallConfig, BallPoint, TangentVector};
use apovae_core::hyp::TapeBall;
use apovae_core::metrics;
use apovae_core::nn::{Encoded, Model, ModelConfig, PosteriorKind};
use apovae_core::tape::{gradient_check, Tape, Var};
use apovae_core::toy::{tangent_toy_kl, ToyConfig};
use apovae_core::trainer::Trainer;
use apovae_core::wrapped::{sample_prior, PriorKind, PriorSpec, WrappedNormalParams};
use apovae_core::Matrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<(bool, String), String>;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn main() {
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, Option<u64>, fn() -> Check); 8] = [
        (1, "geometry property suite", Some(30), geometry),
        (2, "gradient suite", Some(120), gradients),
        (3, "wrapped-normal density", None, density),
        (4, "dual-KL calibration", Some(120), calibration),
        (5, "end-to-end tree training", Some(600), tree_training),
        (6, "VampPrior behaviour", None, vamp),
        (7, "full-scale numbers documented as out of reach", None, documented),
        (8, "engineering determinism", None, determinism),
    ];
    let mut failed = 0;
    for (n, title, budget, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let (mut pass, mut detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        let took = t.elapsed();
        if let Some(b) = budget {
            if took > Duration::from_secs(b) {
                pass = false;
                detail.push_str(&format!("; over the {b} s budget"));
            }
        }
        println!("{} {n}. {title}: {detail} [{:.1} s]", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
        if !pass {
            failed += 1;
        }
    }
    std::process::exit(if failed == 0 { 0 } else { 1 });
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Uniform direction, `c‖x‖²` uniform in `[0, max_c_norm2]`.
fn random_point(rng: &mut ChaCha8Rng, c: f64, n: usize, max_c_norm2: f64) -> Vec<f64> {
    let d = gaussian(rng, n);
    let r = (rng.random_range(0.0..max_c_norm2) / c).sqrt();
    let k = r / dist(&d, &vec![0.0; n]);
    d.iter().map(|x| x * k).collect()
}

fn random_vector(rng: &mut ChaCha8Rng, n: usize, max_norm: f64) -> Vec<f64> {
    let d = gaussian(rng, n);
    let k = rng.random_range(0.0..max_norm) / dist(&d, &vec![0.0; n]);
    d.iter().map(|x| x * k).collect()
}

fn geometry() -> Check {
    const TRIALS: usize = 1000;
    let grid: Vec<(f64, usize)> = [0.1, 0.7, 1.0].iter().flat_map(|&c| [2, 8, 32].map(move |n| (c, n))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut gyro, mut inv, mut flat, mut lin) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for k in 0..TRIALS {
        let (c, n) = grid[k % grid.len()];
        let cfg = BallConfig::new(c, n).map_err(|e| e.to_string())?;
        let pt = |v: Vec<f64>| cfg.point(v).unwrap();
        let z = pt(random_point(&mut rng, c, n, 0.9));
        let w = pt(random_point(&mut rng, c, n, 0.9));
        let o = cfg.origin();
        let zw = cfg.mobius_add(&z, &w).unwrap();
        for (a, b) in [
            (cfg.mobius_add(&z, &o).unwrap(), z.clone()),
            (cfg.mobius_add(&o, &z).unwrap(), z.clone()),
            (cfg.mobius_add(&z.neg(), &z).unwrap(), o.clone()),
            (cfg.mobius_add(&z.neg(), &zw).unwrap(), w.clone()),
        ] {
            gyro = gyro.max(dist(a.coords(), b.coords()));
        }

        let mu = pt(random_point(&mut rng, c, n, 0.5));
        let u = random_vector(&mut rng, n, 3.0);
        let y = cfg.exp_map(&mu, &TangentVector::new(mu.clone(), u.clone()).unwrap()).unwrap();
        inv = inv.max(dist(&cfg.log_map(&mu, &y).unwrap().vec, &u));

        let v = random_vector(&mut rng, n, 1.0);
        let at = |t: f64| {
            let tv = TangentVector::new(mu.clone(), v.iter().map(|x| t * x).collect()).unwrap();
            cfg.distance(&mu, &cfg.exp_map(&mu, &tv).unwrap())
        };
        let full = at(1.0);
        for s in 1..10 {
            let t = s as f64 / 10.0;
            lin = lin.max((at(t) - t * full).abs());
        }

        let e = BallConfig::new(1e-6, n).unwrap();
        let (a, b) = (random_vector(&mut rng, n, 0.5), random_vector(&mut rng, n, 0.5));
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let diff: Vec<f64> = b.iter().zip(&a).map(|(x, y)| x - y).collect();
        let (ap, bp) = (e.point(a.clone()).unwrap(), e.point(b.clone()).unwrap());
        flat = flat
            .max(dist(e.mobius_add(&ap, &bp).unwrap().coords(), &sum))
            .max(dist(&e.log_map(&ap, &bp).unwrap().vec, &diff))
            .max(dist(e.exp_map(&ap, &TangentVector::new(ap.clone(), b.clone()).unwrap()).unwrap().coords(), &sum))
            .max((e.distance(&ap, &bp) - 2.0 * dist(&a, &b)).abs());
    }
    let pass = gyro <= 1e-9 && inv <= 1e-9 && flat <= 1e-4 && lin <= 1e-8;
    Ok((pass, format!("{TRIALS} trials each; max errors gyrogroup {gyro:.1e}, exp/log {inv:.1e}, c=1e-6 limit {flat:.1e}, geodesic {lin:.1e}")))
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

fn contract(t: &mut Tape, x: Var, seed: u64) -> Var {
    let (r, c) = t.shape(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(uniform(&mut rng, r, c, -1.0, 1.0));
    let y = t.mul(x, w);
    t.sum(y)
}

type TapeFn = Box<dyn Fn(&mut Tape, Var) -> Var>;

/// Every ball operation on the tape, reading `[x | y | u | b]` from a row.
fn ball_ops(tb: TapeBall, n: usize) -> Vec<(&'static str, TapeFn)> {
    let s = move |t: &mut Tape, x: Var, k: usize| t.slice_cols(x, k * n, n);
    vec![
        (
            "mobius_add",
            Box::new(move |t, x| {
                let (a, b) = (s(t, x, 0), s(t, x, 1));
                let y = tb.mobius_add(t, a, b);
                contract(t, y, 1)
            }),
        ),
        (
            "exp_map",
            Box::new(move |t, x| {
                let (a, u) = (s(t, x, 0), s(t, x, 2));
                let y = tb.exp_map(t, a, u);
                contract(t, y, 2)
            }),
        ),
        (
            "log_map",
            Box::new(move |t, x| {
                let (a, b) = (s(t, x, 0), s(t, x, 1));
                let y = tb.log_map(t, a, b);
                contract(t, y, 3)
            }),
        ),
        (
            "exp0",
            Box::new(move |t, x| {
                let u = s(t, x, 2);
                let y = tb.exp0(t, u);
                contract(t, y, 4)
            }),
        ),
        (
            "log0",
            Box::new(move |t, x| {
                let a = s(t, x, 0);
                let y = tb.log0(t, a);
                contract(t, y, 5)
            }),
        ),
        (
            "lambda",
            Box::new(move |t, x| {
                let a = s(t, x, 0);
                let y = tb.lambda(t, a);
                contract(t, y, 6)
            }),
        ),
        (
            "transport",
            Box::new(move |t, x| {
                let (a, u) = (s(t, x, 0), s(t, x, 2));
                let y = tb.transport_from_origin(t, a, u);
                contract(t, y, 7)
            }),
        ),
        (
            "distance",
            Box::new(move |t, x| {
                let (a, b) = (s(t, x, 0), s(t, x, 1));
                let y = tb.distance(t, a, b);
                contract(t, y, 8)
            }),
        ),
        (
            "wrap",
            Box::new(move |t, x| {
                let (a, u) = (s(t, x, 0), s(t, x, 2));
                let y = tb.wrap(t, a, u);
                contract(t, y, 9)
            }),
        ),
        (
            "gyroplane",
            Box::new(move |t, x| {
                let (z, a, b) = (s(t, x, 0), s(t, x, 2), s(t, x, 3));
                let y = tb.gyroplane_features(t, z, a, b);
                contract(t, y, 10)
            }),
        ),
    ]
}

fn model_config(posterior: PosteriorKind, prior: PriorKind) -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        emb_dim: 3,
        hidden: 4,
        latent_dim: 2,
        noise_dim: 2,
        gyroplanes: 3,
        dual_hidden: 3,
        nu_max: 10.0,
        posterior,
        prior,
        pseudo_inputs: 2,
        pseudo_len: 3,
        sigma_min: 1e-3,
        c: 0.7,
        boundary_eps: 1e-5,
    }
}

fn sentence(words: &[u32]) -> Sentence {
    let mut ids = vec![BOS];
    ids.extend_from_slice(words);
    ids.push(EOS);
    Sentence::new(ids, None).unwrap()
}

/// `mean(log p(x|z_q) − ν(x, z_q) − exp ν(x, z_p))`, touching every parameter.
fn full_objective(model: &Model, t: &mut Tape, batch: &Batch, xi_q: &Matrix, xi_p: &Matrix) -> Var {
    let bd = model.bind(t, |_| true);
    let enc = model.encode(t, &bd, batch).unwrap();
    let xq = t.constant(xi_q.clone());
    let zq = model.sample_posterior(t, &bd, &enc, xq);
    let rec = model.decode_logprob(t, &bd, zq, batch).unwrap();
    let xp = t.constant(xi_p.clone());
    let zp = if model.config().prior == PriorKind::Vamp {
        let pe = model.encode_pseudo(t, &bd).unwrap();
        model.sample_posterior(t, &bd, &pe, xp)
    } else {
        TapeBall::from(model.ball()).exp0(t, xp)
    };
    let s = model.dual_summary(t, &bd, batch).unwrap();
    let nq = model.dual_score(t, &bd, s, zq);
    let np = model.dual_score(t, &bd, s, zp);
    let ep = t.exp(np);
    let d = t.sub(rec, nq);
    let d = t.sub(d, ep);
    t.mean(d)
}

/// Worst per-tensor `‖g − fd‖ / ‖g‖` of the full objective.
fn model_gradient_error(model: &mut Model, batch: &Batch, xi_q: &Matrix, xi_p: &Matrix) -> f64 {
    let mut t = Tape::new();
    let obj = full_objective(model, &mut t, batch, xi_q, xi_p);
    model.store_mut().zero_grad();
    t.backward(obj, model.store_mut()).unwrap();
    let value = |m: &Model| {
        let mut t = Tape::new();
        let o = full_objective(m, &mut t, batch, xi_q, xi_p);
        t.scalar(o)
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    let ids: Vec<_> = model.store().iter().map(|(id, _)| id).collect();
    let mut probe = model.clone();
    for id in ids {
        let g = model.store().get(id).grad.clone();
        let mut sq = 0.0;
        for k in 0..g.len() {
            let x0 = model.store().get(id).value.as_slice()[k];
            probe.store_mut().get_mut(id).value.as_mut_slice()[k] = x0 + h;
            let up = value(&probe);
            probe.store_mut().get_mut(id).value.as_mut_slice()[k] = x0 - h;
            let dn = value(&probe);
            probe.store_mut().get_mut(id).value.as_mut_slice()[k] = x0;
            sq += (g.as_slice()[k] - (up - dn) / (2.0 * h)).powi(2);
        }
        let norm = g.sq_sum().sqrt();
        worst = worst.max(if norm > 0.0 { sq.sqrt() / norm } else { f64::INFINITY });
    }
    worst
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut geo = 0.0f64;
    let mut wrapped = 0.0f64;
    for trial in 0..100 {
        let n = 2 + trial % 3;
        let c = [0.1, 0.7, 1.0][trial % 3];
        let cfg = BallConfig::new(c, n).map_err(|e| e.to_string())?;
        let tb = TapeBall::from(&cfg);
        let mut packed = Vec::new();
        for _ in 0..2 {
            packed.extend(random_point(&mut rng, c, n, 0.6));
            packed.extend(random_point(&mut rng, c, n, 0.6));
            packed.extend((0..n).map(|_| rng.random_range(-1.0..1.0)));
            packed.extend((0..n).map(|_| rng.random_range(-0.5..0.5)));
        }
        let point = Matrix::from_vec(2, 4 * n, packed);
        for (_, f) in ball_ops(tb, n) {
            geo = geo.max(gradient_check(f, &point, 1e-5).map_err(|e| e.to_string())?);
        }

        // sampling chain and density in (μ, σ)
        let noise = Matrix::row(&gaussian(&mut rng, n));
        let z = Matrix::row(&random_point(&mut rng, c, n, 0.5));
        let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-0.4..0.4)).collect();
        p.extend((0..n).map(|_| rng.random_range(0.3..1.2)));
        let sample = |t: &mut Tape, x: Var| {
            let (mu, s) = (t.slice_cols(x, 0, n), t.slice_cols(x, n, n));
            let e = t.constant(noise.clone());
            let v = t.mul(s, e);
            let y = tb.wrap(t, mu, v);
            contract(t, y, 11)
        };
        let density = |t: &mut Tape, x: Var| {
            let (mu, s) = (t.slice_cols(x, 0, n), t.slice_cols(x, n, n));
            let zz = t.constant(z.clone());
            let lp = tb.wrapped_log_prob(t, mu, s, zz);
            t.sum(lp)
        };
        let at = Matrix::row(&p);
        wrapped = wrapped.max(gradient_check(sample, &at, 1e-5).map_err(|e| e.to_string())?);
        wrapped = wrapped.max(gradient_check(density, &at, 1e-5).map_err(|e| e.to_string())?);
    }

    let mut full = 0.0f64;
    let kinds = [
        (PosteriorKind::Implicit, PriorKind::Vamp),
        (PosteriorKind::Explicit, PriorKind::Vamp),
        (PosteriorKind::Implicit, PriorKind::Standard),
        (PosteriorKind::Explicit, PriorKind::Standard),
    ];
    for trial in 0..100u64 {
        let (posterior, prior) = kinds[trial as usize % 4];
        let mut model = Model::new(model_config(posterior, prior), trial).map_err(|e| e.to_string())?;
        let id = model.store().find("dual.l2.w").unwrap();
        let w = model.store_mut().get_mut(id);
        w.value.as_mut_slice().iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5));
        let words = |rng: &mut ChaCha8Rng| -> Vec<u32> {
            (0..rng.random_range(1..5)).map(|_| rng.random_range(4..9)).collect()
        };
        let (a, b) = (sentence(&words(&mut rng)), sentence(&words(&mut rng)));
        let batch = Batch::new(&[&a, &b]);
        let xi_q = Matrix::from_vec(2, 2, gaussian(&mut rng, 4));
        let xi_p = Matrix::from_vec(2, 2, gaussian(&mut rng, 4));
        full = full.max(model_gradient_error(&mut model, &batch, &xi_q, &xi_p));
    }
    let pass = geo <= 1e-5 && wrapped <= 1e-5 && full <= 1e-4;
    Ok((pass, format!("100 points each; worst relative error ball ops {geo:.1e}, wrapped normal {wrapped:.1e}, full model loss {full:.1e}")))
}

/// ∫ exp(log_prob) over the 2-D ball by Simpson's rule in `s`, `r = tanh(√c s)/√c`.
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
        let ring: f64 = (0..nt)
            .map(|j| {
                let th = j as f64 * ht;
                q.log_prob(&cfg.project(&[r * th.cos(), r * th.sin()]).unwrap(), cfg).unwrap().exp()
            })
            .sum();
        total += w * ring * ht * r * dr;
    }
    total * hs / 3.0
}

/// `ln|det ∂z/∂v|` of the sampling chain by central differences.
fn numeric_log_det(cfg: &BallConfig, q: &WrappedNormalParams, v: &[f64]) -> f64 {
    let n = v.len();
    let h = 1e-6;
    let at = |x: &[f64]| -> Vec<f64> {
        let noise: Vec<f64> = x.iter().zip(q.sigma()).map(|(a, s)| a / s).collect();
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

fn density() -> Check {
    let mut masses = Vec::new();
    for c in [0.7, 1.0] {
        for s in [0.3, 1.0] {
            let cfg = BallConfig::new(c, 2).map_err(|e| e.to_string())?;
            let q = WrappedNormalParams::new(cfg.origin(), vec![s, s]).map_err(|e| e.to_string())?;
            masses.push(quadrature(&cfg, &q));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let c = [0.7, 1.0][trial % 2];
        let cfg = BallConfig::new(c, 2).unwrap();
        let mu = cfg.point((0..2).map(|_| rng.random_range(-0.4..0.4)).collect()).unwrap();
        let sigma: Vec<f64> = (0..2).map(|_| rng.random_range(0.3..1.2)).collect();
        let q = WrappedNormalParams::new(mu, sigma.clone()).unwrap();
        let v: Vec<f64> = gaussian(&mut rng, 2).iter().map(|x| 0.8 * x).collect();
        let noise: Vec<f64> = v.iter().zip(&sigma).map(|(a, s)| a / s).collect();
        let z = q.sample_with_noise(&noise, &cfg).unwrap();
        let (closed, numeric) = (q.log_det_jacobian(&z, &cfg), numeric_log_det(&cfg, &q, &v));
        worst = worst.max(((closed.exp() - numeric.exp()) / numeric.exp()).abs());
    }
    let pass = masses.iter().all(|m| (0.99..=1.01).contains(m)) && worst <= 1e-4;
    let shown: Vec<String> = masses.iter().map(|m| format!("{m:.5}")).collect();
    Ok((
        pass,
        format!(
            "mass over (c, σ) grid [{}]; Jacobian determinant worst rel. error {worst:.1e} on 100 points",
            shown.join(", ")
        ),
    ))
}

fn calibration() -> Check {
    let kl = tangent_toy_kl(&ToyConfig { shift: 0.5, ..ToyConfig::default() }).map_err(|e| e.to_string())?;
    let same = tangent_toy_kl(&ToyConfig { shift: 0.0, ..ToyConfig::default() }).map_err(|e| e.to_string())?;
    let pass = (0.095..=0.155).contains(&kl) && same <= 0.02;
    Ok((pass, format!("estimate {kl:.4} against analytic 0.125; q = p gives {same:.4}")))
}

fn tree_training() -> Check {
    let cfg = load_config(Some(&repo().join("configs/desk.json")), &[]).map_err(|e| e.to_string())?;
    let tree = gen_tree_corpus(&TreeCorpusConfig::default()).map_err(|e| e.to_string())?;
    let texts: Vec<&str> = tree.iter().map(|s| s.text.as_str()).collect();
    let vocab = Vocab::build(&texts, cfg.vocab_cap).map_err(|e| e.to_string())?;
    let corpus: Vec<Sentence> = tree
        .iter()
        .map(|s| Sentence::new(vocab.encode(&s.text).unwrap().ids().to_vec(), Some(s.depth)).unwrap())
        .collect();
    let (vocab_len, n, h, c, iters) = (vocab.len(), cfg.latent_dim, cfg.hidden, cfg.c, cfg.max_iter);
    let mut tr = Trainer::new(cfg, vocab, corpus.clone()).map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    tr.train(&mut || t0.elapsed().as_secs_f64() * 1e3, &mut |r| {
        if (r.iter + 1) % 500 == 0 {
            eprintln!("  iter {} L1 {:.3} recon {:.3} ({:.0} s)", r.iter + 1, r.l1, r.recon, r.wall_ms / 1e3);
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;

    let mut kl = 0.0;
    let batches = 20;
    for i in 0..batches {
        let b = tr.batch_for(i);
        kl += tr.kl_dual_estimate(&b, 4).map_err(|e| e.to_string())? / batches as f64;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let au = metrics::active_units(tr.model(), &corpus, &mut rng).map_err(|e| e.to_string())?;
    let rho =
        metrics::norm_depth_correlation(tr.model(), &corpus, &mut rng).map_err(|e| e.to_string())?.unwrap_or(f64::NAN);
    let pass = kl >= 0.5 && au == n && rho >= 0.5;
    Ok((
        pass,
        format!(
            "{} sentences, vocab {vocab_len}, n={n}, H={h}, c={c}, {iters} iterations; KL estimate {kl:.3} (≥ 0.5), AU {au}/{n}, Spearman ρ(depth, norm) {rho:.3} (≥ 0.5)",
            corpus.len()
        ),
    ))
}

/// Σ d·w over a row of pair distances, in eight lanes so that it vectorizes.
fn weighted(d: &[f32], w: &[f32]) -> (f64, f64) {
    let (mut dw, mut dd) = ([0.0f32; 8], [0.0f32; 8]);
    let (dc, wc) = (d.chunks_exact(8), w.chunks_exact(8));
    let (dr, wr) = (dc.remainder(), wc.remainder());
    for (a, b) in dc.zip(wc) {
        for l in 0..8 {
            dw[l] += a[l] * b[l];
            dd[l] += a[l];
        }
    }
    let mut s = (dw.iter().map(|&x| x as f64).sum::<f64>(), dd.iter().map(|&x| x as f64).sum::<f64>());
    for (a, b) in dr.iter().zip(wr) {
        s.0 += (a * b) as f64;
        s.1 += *a as f64;
    }
    s
}

/// Energy statistic of two equal-sized samples from the pooled pair
/// distances, row `i` holding `d(i, j)` for `j > i`; `w` is 1 on the first sample.
fn energy(d: &[f32], m: usize, w: &[f32]) -> f64 {
    let (mut xx, mut yy, mut xy) = (0.0f64, 0.0f64, 0.0f64);
    let mut k = 0;
    for i in 0..m {
        let len = m - i - 1;
        let (to_x, total) = weighted(&d[k..k + len], &w[i + 1..]);
        k += len;
        if w[i] > 0.0 {
            xx += to_x;
            xy += total - to_x;
        } else {
            xy += to_x;
            yy += total - to_x;
        }
    }
    let n = (m / 2) as f64;
    2.0 * xy / (n * n) - 2.0 * (xx + yy) / (n * (n - 1.0))
}

/// Permutation p-value of the energy-distance two-sample test.
fn energy_test(x: &[Vec<f64>], y: &[Vec<f64>], permutations: usize, rng: &mut ChaCha8Rng) -> f64 {
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let m = pooled.len();
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(dist(pooled[i], pooled[j]) as f32);
        }
    }
    let mut label: Vec<f32> = (0..m).map(|i| if i < x.len() { 1.0 } else { 0.0 }).collect();
    let observed = energy(&d, m, &label);
    let mut above = 0;
    for _ in 0..permutations {
        label.shuffle(rng);
        if energy(&d, m, &label) >= observed {
            above += 1;
        }
    }
    (1 + above) as f64 / (1 + permutations) as f64
}

fn vamp() -> Check {
    let n = 5000;
    let cfg = ModelConfig { pseudo_inputs: 1, ..model_config(PosteriorKind::Implicit, PriorKind::Vamp) };
    let model = Model::new(cfg, 6).map_err(|e| e.to_string())?;
    let prior = model.eval().prior_samples(n, &mut ChaCha8Rng::seed_from_u64(61)).map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let noise = Matrix::from_vec(n, 2, gaussian(&mut rng, 2 * n));
    let mut t = Tape::new();
    let bd = model.bind(&mut t, |_| false);
    let enc = model.encode_pseudo(&mut t, &bd).map_err(|e| e.to_string())?;
    let idx = vec![0; n];
    let enc = Encoded { h: t.gather_rows(enc.h, idx.clone()), mu: t.gather_rows(enc.mu, idx), sigma: None };
    let xi = t.constant(noise);
    let z = model.sample_posterior(&mut t, &bd, &enc, xi);
    let posterior: Vec<Vec<f64>> = (0..n).map(|r| t.value(z).row_slice(r).to_vec()).collect();
    let p = energy_test(&prior, &posterior, 99, &mut rng);
    // the same test must notice a shift of a fifth of a standard deviation
    let mean = posterior.iter().map(|z| z[0]).sum::<f64>() / n as f64;
    let sd = (posterior.iter().map(|z| (z[0] - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let shifted: Vec<Vec<f64>> = posterior.iter().map(|z| vec![z[0] + 0.2 * sd, z[1]]).collect();
    let p_shift = energy_test(&prior, &shifted, 99, &mut rng);

    let ball = BallConfig::new(1.0, 2).unwrap();
    let comp = |x: f64| WrappedNormalParams::new(ball.point(vec![x, 0.0]).unwrap(), vec![0.05, 0.05]).unwrap();
    let bank = [comp(0.3), comp(-0.3)];
    let draws = 100_000;
    let spec = PriorSpec::vamp(2).map_err(|e| e.to_string())?;
    let mut right = 0;
    let mut middle = 0;
    for _ in 0..draws {
        let s: BallPoint = sample_prior(spec, &bank, &mut rng, &ball).map_err(|e| e.to_string())?;
        let x = s.coords()[0];
        right += usize::from(x > 0.0);
        middle += usize::from(x.abs() < 0.1);
    }
    let frac = right as f64 / draws as f64;
    let pass = p > 0.01 && p_shift <= 0.01 && (frac - 0.5).abs() <= 0.02 && middle == 0;
    Ok((pass, format!("K=1 energy test p = {p:.2} at N={n} (> 0.01), {p_shift:.2} after a 0.2 sd shift; K=2 right-mode fraction {frac:.4}, {middle} draws between the modes")))
}

fn documented() -> Check {
    let root = repo();
    let ptb = load_config(Some(&root.join("configs/ptb.json")), &[]).map_err(|e| e.to_string())?;
    let desk = load_config(Some(&root.join("configs/desk.json")), &[]).map_err(|e| e.to_string())?;
    let readme = fs::read_to_string(root.join("README.md")).map_err(|e| e.to_string())?;
    let noted = readme.contains("configs/ptb.json") && readme.contains("not reproduced");
    let pass = noted && ptb.latent_dim == 32 && ptb.c == 0.7 && desk.latent_dim == 8;
    Ok((
        pass,
        format!(
            "README states that full-scale results are not reproduced: {noted}; ptb config n={}, H={}, vocab cap {}",
            ptb.latent_dim, ptb.hidden, ptb.vocab_cap
        ),
    ))
}

fn apovae(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_apovae")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("apovae {}: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn determinism() -> Check {
    let dir = std::env::temp_dir().join(format!("apovae-acceptance-{}", std::process::id()));
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let config = repo().join("configs/desk.json").to_string_lossy().into_owned();
    apovae(&["gen-corpus", "--out", &p("tree")])?;
    let run = |out: &str, iters: &str| {
        apovae(&[
            "train",
            "--corpus",
            &p("tree.txt"),
            "--config",
            &config,
            "--seed",
            "5",
            "--max-iter",
            iters,
            "--out",
            &p(out),
            "--fixed-clock",
        ])
    };
    run("a.ckpt", "20")?;
    run("b.ckpt", "20")?;
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| e.to_string());
    let same_csv = read("a.ckpt.csv")? == read("b.ckpt.csv")?;

    run("half.ckpt", "10")?;
    apovae(&[
        "train",
        "--corpus",
        &p("tree.txt"),
        "--resume",
        &p("half.ckpt"),
        "--max-iter",
        "20",
        "--out",
        &p("resumed.ckpt"),
        "--metrics",
        &p("half.ckpt.csv"),
        "--fixed-clock",
    ])?;
    let rows = |name: &str| -> std::result::Result<Vec<String>, String> {
        Ok(String::from_utf8_lossy(&read(name)?).lines().skip(1).map(String::from).collect())
    };
    let replay = read("a.ckpt")? == read("resumed.ckpt")? && rows("a.ckpt.csv")? == rows("half.ckpt.csv")?;
    let _ = fs::remove_dir_all(&dir);
    Ok((same_csv && replay, format!("metrics CSV identical across two seeded runs: {same_csv}; 10 iterations after reload match bit for bit: {replay}")))
}
