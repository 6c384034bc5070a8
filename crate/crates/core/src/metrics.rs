//! ELBO, perplexity, dual KL, mutual information, active units and the
//! norm-depth rank correlation.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, Sentence};
use crate::error::{invalid, Error, Result};
use crate::geometry::{self, BallConfig};
use crate::math;
use crate::nn::Model;
use crate::tensor::Matrix;
use crate::wrapped::{vamp_log_prob, PriorKind, WrappedNormalParams};

/// Posterior draws per sentence for every Monte Carlo metric.
pub const SAMPLES: usize = 16;
/// Variance threshold of an active unit.
pub const AU_THRESHOLD: f64 = 0.01;
/// Sentences used by the mutual-information estimate.
pub const MI_SUBSAMPLE: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean negative ELBO per sentence.
    pub neg_elbo: f64,
    pub ppl: f64,
    pub kl_est: f64,
    pub mi: Option<f64>,
    pub au: usize,
    pub spearman_depth_norm: Option<f64>,
    pub tokens: usize,
    pub sentences: usize,
    pub recon: f64,
}

/// `exp(Σ neg_elbo / Σ tokens)`.
pub fn perplexity(neg_elbo: &[f64], tokens: &[usize]) -> f64 {
    let total: f64 = neg_elbo.iter().sum();
    let count: usize = tokens.iter().sum();
    math::exp(total / count as f64)
}

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman's rank correlation; `None` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / math::sqrt(sxx * syy))
}

/// Number of coordinates whose across-sentence variance of the given
/// per-sentence means exceeds `threshold`.
pub fn active_units_from_means(means: &[Vec<f64>], threshold: f64) -> usize {
    if means.len() < 2 {
        return 0;
    }
    let n = means[0].len();
    let count = means.len() as f64;
    (0..n)
        .filter(|&j| {
            let m = means.iter().map(|r| r[j]).sum::<f64>() / count;
            let var = means.iter().map(|r| (r[j] - m) * (r[j] - m)).sum::<f64>() / (count - 1.0);
            var > threshold
        })
        .count()
}

/// `E_x KL(q(z|x) ‖ q_agg(z))` with the aggregate posterior taken as the
/// uniform mixture of the given posteriors.
pub fn mutual_information_from_params<R: Rng + ?Sized>(
    posts: &[WrappedNormalParams],
    samples: usize,
    rng: &mut R,
    cfg: &BallConfig,
) -> Result<f64> {
    if posts.is_empty() || samples == 0 {
        return Err(invalid("mutual information needs posteriors and samples"));
    }
    let mut total = 0.0;
    for q in posts {
        for _ in 0..samples {
            let z = q.sample(rng, cfg)?;
            total += q.log_prob(&z, cfg)? - vamp_log_prob(posts, &z, cfg)?;
        }
    }
    Ok(total / (posts.len() * samples) as f64)
}

fn batches(corpus: &[Sentence], size: usize) -> impl Iterator<Item = Batch> + '_ {
    corpus.chunks(size).map(|c| Batch::new(&c.iter().collect::<Vec<_>>()))
}

fn noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

/// Mean of `log₀(z)` over [`SAMPLES`] posterior draws, per sentence.
pub fn tangent_means<R: Rng + ?Sized>(model: &Model, corpus: &[Sentence], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let c = model.ball().c();
    let mut out = Vec::with_capacity(corpus.len());
    for b in batches(corpus, 64) {
        let xs: Vec<Matrix> = (0..SAMPLES).map(|_| noise(rng, b.rows(), model.noise_dim())).collect();
        let draws = model.eval().posterior_draws(&b, &xs)?;
        for i in 0..b.rows() {
            let mut m = vec![0.0; model.latent_dim()];
            for d in &draws {
                for (mj, v) in m.iter_mut().zip(geometry::log0_raw(c, &d[i])) {
                    *mj += v / SAMPLES as f64;
                }
            }
            out.push(m);
        }
    }
    Ok(out)
}

/// Active units of the posterior in the origin tangent chart.
pub fn active_units<R: Rng + ?Sized>(model: &Model, corpus: &[Sentence], rng: &mut R) -> Result<usize> {
    if corpus.len() < 2 {
        return Err(invalid("active units need at least two sentences"));
    }
    Ok(active_units_from_means(&tangent_means(model, corpus, rng)?, AU_THRESHOLD))
}

/// `E[z]` in ball coordinates over [`SAMPLES`] posterior draws, per
/// sentence. The ball is convex, so the mean is a ball point.
pub fn posterior_means<R: Rng + ?Sized>(model: &Model, corpus: &[Sentence], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(corpus.len());
    for b in batches(corpus, 64) {
        let xs: Vec<Matrix> = (0..SAMPLES).map(|_| noise(rng, b.rows(), model.noise_dim())).collect();
        let draws = model.eval().posterior_draws(&b, &xs)?;
        for i in 0..b.rows() {
            let mut m = vec![0.0; model.latent_dim()];
            for d in &draws {
                for (mj, v) in m.iter_mut().zip(&d[i]) {
                    *mj += v / SAMPLES as f64;
                }
            }
            out.push(m);
        }
    }
    Ok(out)
}

/// Hyperbolic distance from the origin of each sentence's posterior mean.
pub fn posterior_mean_norms<R: Rng + ?Sized>(model: &Model, corpus: &[Sentence], rng: &mut R) -> Result<Vec<f64>> {
    let ball = model.ball();
    posterior_means(model, corpus, rng)?.iter().map(|m| Ok(ball.distance(&ball.origin(), &ball.project(m)?))).collect()
}

/// Spearman correlation between depth labels and posterior-mean norms.
/// `None` when labels are missing or all equal.
pub fn norm_depth_correlation<R: Rng + ?Sized>(model: &Model, corpus: &[Sentence], rng: &mut R) -> Result<Option<f64>> {
    let depths: Option<Vec<f64>> = corpus.iter().map(|s| s.depth().map(|d| d as f64)).collect();
    let Some(depths) = depths else { return Ok(None) };
    let norms = posterior_mean_norms(model, corpus, rng)?;
    Ok(spearman(&depths, &norms))
}

/// Mutual information of the explicit posterior over at most
/// [`MI_SUBSAMPLE`] sentences.
pub fn mutual_information<R: Rng + ?Sized>(model: &Model, corpus: &[Sentence], rng: &mut R) -> Result<f64> {
    if !model.has_density() {
        return Err(Error::UnsupportedMode("mutual information needs the explicit posterior".into()));
    }
    let stride = corpus.len().div_ceil(MI_SUBSAMPLE).max(1);
    let sub: Vec<Sentence> = corpus.iter().step_by(stride).cloned().collect();
    let mut posts = Vec::new();
    for b in batches(&sub, 64) {
        posts.extend(model.eval().posterior_params(&b)?);
    }
    mutual_information_from_params(&posts, SAMPLES, rng, model.ball())
}

/// Per-sentence ELBO terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboTerms {
    pub recon: Vec<f64>,
    pub kl: Vec<f64>,
    pub tokens: Vec<usize>,
}

impl ElboTerms {
    pub fn neg_elbo(&self) -> Vec<f64> {
        self.recon.iter().zip(&self.kl).map(|(r, k)| k - r).collect()
    }

    pub fn ppl(&self) -> f64 {
        perplexity(&self.neg_elbo(), &self.tokens)
    }
}

/// Reconstruction and KL per sentence with `samples` posterior draws. The KL
/// is the clamped dual estimate, or the Monte Carlo `log q − log p` when the
/// posterior has a density.
pub fn elbo_terms<R: Rng + ?Sized>(
    model: &Model,
    corpus: &[Sentence],
    samples: usize,
    rng: &mut R,
) -> Result<ElboTerms> {
    if samples == 0 {
        return Err(invalid("at least one sample is needed"));
    }
    let ev = model.eval();
    let cfg = model.ball();
    let pseudo =
        if model.has_density() && model.config().prior == PriorKind::Vamp { Some(ev.pseudo_params()?) } else { None };
    let mut out = ElboTerms { recon: Vec::new(), kl: Vec::new(), tokens: Vec::new() };
    for b in batches(corpus, 64) {
        let m = b.rows();
        let xs: Vec<Matrix> = (0..samples).map(|_| noise(rng, m, model.noise_dim())).collect();
        let draws = ev.posterior_draws(&b, &xs)?;
        let mut recon = vec![0.0; m];
        let mut kl = vec![0.0; m];
        for z in &draws {
            for (r, l) in recon.iter_mut().zip(ev.logprob(&b, z)?) {
                *r += l / samples as f64;
            }
        }
        if model.has_density() {
            let posts = ev.posterior_params(&b)?;
            let std = WrappedNormalParams::standard(cfg.dim());
            for z in &draws {
                for i in 0..m {
                    let zp = cfg.project(&z[i])?;
                    let lp = match &pseudo {
                        Some(bank) => vamp_log_prob(bank, &zp, cfg)?,
                        None => std.log_prob(&zp, cfg)?,
                    };
                    kl[i] += (posts[i].log_prob(&zp, cfg)? - lp) / samples as f64;
                }
            }
        } else {
            let mut eq = vec![0.0; m];
            let mut ep = vec![0.0; m];
            for z in &draws {
                for (e, nu) in eq.iter_mut().zip(ev.dual(&b, z)?) {
                    *e += nu / samples as f64;
                }
            }
            for _ in 0..samples {
                let zp = ev.prior_samples(m, rng)?;
                for (e, nu) in ep.iter_mut().zip(ev.dual(&b, &zp)?) {
                    *e += math::exp(nu) / samples as f64;
                }
            }
            for i in 0..m {
                kl[i] = (eq[i] - ep[i] + 1.0).max(0.0);
            }
        }
        out.recon.extend(recon);
        out.kl.extend(kl);
        out.tokens.extend(b.lengths().iter().map(|l| l - 1));
    }
    Ok(out)
}

/// Full evaluation report of a model on a corpus.
pub fn evaluate(model: &Model, corpus: &[Sentence], seed: u64) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(invalid("evaluation corpus is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let terms = elbo_terms(model, corpus, SAMPLES, &mut rng)?;
    let neg = terms.neg_elbo();
    let n = corpus.len() as f64;
    let mi = if model.has_density() { Some(mutual_information(model, corpus, &mut rng)?) } else { None };
    let au = if corpus.len() >= 2 { active_units(model, corpus, &mut rng)? } else { 0 };
    let rho = norm_depth_correlation(model, corpus, &mut rng)?;
    Ok(EvalReport {
        neg_elbo: neg.iter().sum::<f64>() / n,
        ppl: terms.ppl(),
        kl_est: terms.kl.iter().sum::<f64>() / n,
        mi,
        au,
        spearman_depth_norm: rho,
        tokens: terms.tokens.iter().sum(),
        sentences: corpus.len(),
        recon: terms.recon.iter().sum::<f64>() / n,
    })
}
