//! Encoder, gyroplane decoder and dual network.
//!
//! Recurrences run over whole batches in time-major order: row `t·M + i` of
//! any stacked matrix belongs to sentence `i` at step `t`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, BOS, EOS};
use crate::error::{invalid, Result};
use crate::geometry::{self, BallConfig, BallPoint};
use crate::hyp::TapeBall;
use crate::math;
use crate::tape::{Bound, Group, ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;
use crate::wrapped::{PriorKind, WrappedNormalParams};

/// How the encoder turns noise into a tangent vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorKind {
    /// `v = G(h, ξ)`; no density.
    Implicit,
    /// `v = σ(h) ⊙ ξ`; wrapped normal with a known density.
    Explicit,
}

/// Sizes and fixed hyper-parameters of the three networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub noise_dim: usize,
    pub gyroplanes: usize,
    pub dual_hidden: usize,
    pub nu_max: f64,
    pub posterior: PosteriorKind,
    pub prior: PriorKind,
    pub pseudo_inputs: usize,
    pub pseudo_len: usize,
    pub sigma_min: f64,
    pub c: f64,
    pub boundary_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("emb_dim", self.emb_dim),
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
            ("noise_dim", self.noise_dim),
            ("gyroplanes", self.gyroplanes),
            ("dual_hidden", self.dual_hidden),
            ("pseudo_inputs", self.pseudo_inputs),
            ("pseudo_len", self.pseudo_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be at least 1")));
        }
        if self.vocab_size <= EOS as usize {
            return Err(invalid("vocabulary must contain the reserved tokens"));
        }
        if self.posterior == PosteriorKind::Explicit && self.noise_dim != self.latent_dim {
            return Err(invalid("explicit posterior needs noise_dim == latent_dim"));
        }
        if !(self.nu_max > 0.0) || !(self.sigma_min > 0.0) {
            return Err(invalid("nu_max and sigma_min must be positive"));
        }
        BallConfig::with_eps(self.c, self.latent_dim, self.boundary_eps)?;
        Ok(())
    }

    pub fn ball(&self) -> Result<BallConfig> {
        BallConfig::with_eps(self.c, self.latent_dim, self.boundary_eps)
    }
}

/// Test switches. All off by default.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Hooks {
    /// Replace the gyroplane features by zeros, cutting `z` out of the decoder.
    pub zero_features: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let w = store.add(format!("{name}.w"), group, uniform(rng, fan_in, fan_out, 1.0 / math::sqrt(fan_in as f64)));
        let b = store.add(format!("{name}.b"), group, Matrix::zeros(1, fan_out));
        Linear { w, b }
    }

    fn zeroed(store: &mut ParamStore, name: &str, group: Group, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), group, Matrix::zeros(fan_in, fan_out));
        let b = store.add(format!("{name}.b"), group, Matrix::zeros(1, fan_out));
        Linear { w, b }
    }

    fn apply(&self, t: &mut Tape, bd: &Bound, x: Var) -> Var {
        let y = t.matmul(x, bd.get(self.w));
        t.add(y, bd.get(self.b))
    }

    fn apply_plain(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = &store.get(self.w).value;
        let mut y = store.get(self.b).value.as_slice().to_vec();
        for (i, xi) in x.iter().enumerate() {
            for (yj, wij) in y.iter_mut().zip(w.row_slice(i)) {
                *yj += xi * wij;
            }
        }
        y
    }
}

/// Gated recurrent cell with gate blocks laid out as `[reset | update | candidate]`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Gru {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    hidden: usize,
}

impl Gru {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: Group,
        input: usize,
        hidden: usize,
    ) -> Self {
        let k = 1.0 / math::sqrt(hidden as f64);
        let wx = store.add(format!("{name}.wx"), group, uniform(rng, input, 3 * hidden, k));
        let wh = store.add(format!("{name}.wh"), group, uniform(rng, hidden, 3 * hidden, k));
        let b = store.add(format!("{name}.b"), group, Matrix::zeros(1, 3 * hidden));
        Gru { wx, wh, b, hidden }
    }

    /// `x·Wx + b` for the token rows `ids` of an embedding table.
    fn project_tokens(&self, t: &mut Tape, bd: &Bound, emb: ParamId, ids: Vec<usize>) -> Var {
        let e = bd.get(emb);
        let xw = if t.shape(e).0 <= ids.len() {
            let all = t.matmul(e, bd.get(self.wx));
            t.gather_rows(all, ids)
        } else {
            let x = t.gather_rows(e, ids);
            t.matmul(x, bd.get(self.wx))
        };
        t.add(xw, bd.get(self.b))
    }

    fn project_inputs(&self, t: &mut Tape, bd: &Bound, x: Var) -> Var {
        let xw = t.matmul(x, bd.get(self.wx));
        t.add(xw, bd.get(self.b))
    }

    /// Runs `steps` steps over pre-projected inputs `xw` (`steps·rows × 3H`).
    /// `extra` is added to every step's input projection; `masks[t]` freezes
    /// rows whose sentence has ended. Returns every state when `collect`.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        t: &mut Tape,
        bd: &Bound,
        xw: Var,
        h0: Var,
        rows: usize,
        steps: usize,
        extra: Option<Var>,
        masks: Option<&[Var]>,
        collect: bool,
    ) -> (Var, Vec<Var>) {
        let hd = self.hidden;
        let wh = bd.get(self.wh);
        let mut h = h0;
        let mut states = Vec::new();
        for s in 0..steps {
            let mut x = t.slice_rows(xw, s * rows, rows);
            if let Some(e) = extra {
                x = t.add(x, e);
            }
            let hw = t.matmul(h, wh);
            let x_ru = t.slice_cols(x, 0, 2 * hd);
            let h_ru = t.slice_cols(hw, 0, 2 * hd);
            let ru = t.add(x_ru, h_ru);
            let ru = t.sigmoid(ru);
            let r = t.slice_cols(ru, 0, hd);
            let u = t.slice_cols(ru, hd, hd);
            let x_n = t.slice_cols(x, 2 * hd, hd);
            let h_n = t.slice_cols(hw, 2 * hd, hd);
            let rh = t.mul(r, h_n);
            let n = t.add(x_n, rh);
            let n = t.tanh(n);
            let d = t.sub(h, n);
            let ud = t.mul(u, d);
            let next = t.add(n, ud);
            h = match masks {
                Some(m) => {
                    let step = t.sub(next, h);
                    let step = t.mul(step, m[s]);
                    t.add(h, step)
                }
                None => next,
            };
            if collect {
                states.push(h);
            }
        }
        (h, states)
    }

    fn step_plain(&self, store: &ParamStore, xw: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = self.hidden;
        let wh = &store.get(self.wh).value;
        let mut hw = vec![0.0; 3 * hd];
        for (i, hi) in h.iter().enumerate() {
            for (o, w) in hw.iter_mut().zip(wh.row_slice(i)) {
                *o += hi * w;
            }
        }
        (0..hd)
            .map(|j| {
                let r = math::sigmoid(xw[j] + hw[j]);
                let u = math::sigmoid(xw[hd + j] + hw[hd + j]);
                let n = math::tanh(xw[2 * hd + j] + r * hw[2 * hd + j]);
                n + u * (h[j] - n)
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, k: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-k..k)).collect())
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    enc_emb: ParamId,
    enc_gru: Gru,
    enc_f: Linear,
    enc_g1: Option<Linear>,
    enc_g2: Option<Linear>,
    enc_sigma: Option<Linear>,
    dec_emb: ParamId,
    dec_gru: Gru,
    dec_feat: ParamId,
    dec_init: Linear,
    dec_normals: ParamId,
    dec_intercepts: ParamId,
    dec_out: Linear,
    dual_emb: ParamId,
    dual_gru: Gru,
    dual_1: Linear,
    dual_2: Linear,
    pseudo: Option<ParamId>,
}

/// Encoder outputs for a batch: summary `h`, location `μ` and, for the
/// explicit posterior, the scale `σ`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub h: Var,
    pub mu: Var,
    pub sigma: Option<Var>,
}

/// State of stepwise decoding for one latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeState {
    h: Vec<f64>,
    feat: Vec<f64>,
}

/// All four networks and their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    ball: BallConfig,
    ids: Ids,
    store: ParamStore,
    pub hooks: Hooks,
}

impl Model {
    /// Builds and initializes every parameter from `seed`. The dual network's
    /// output layer starts at zero so that `ν ≡ 0`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let ball = cfg.ball()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (v, d, h, n) = (cfg.vocab_size, cfg.emb_dim, cfg.hidden, cfg.latent_dim);
        let (m, hd) = (cfg.gyroplanes, cfg.dual_hidden);
        let r = &mut rng;

        let enc_emb = s.add("enc.emb", Group::Encoder, uniform(r, v, d, 0.1));
        let enc_gru = Gru::new(&mut s, r, "enc.gru", Group::Encoder, d, h);
        let enc_f = Linear::new(&mut s, r, "enc.f", Group::Encoder, h, n);
        let (enc_g1, enc_g2, enc_sigma) = match cfg.posterior {
            PosteriorKind::Implicit => (
                Some(Linear::new(&mut s, r, "enc.g1", Group::Encoder, h + cfg.noise_dim, h)),
                Some(Linear::new(&mut s, r, "enc.g2", Group::Encoder, h, n)),
                None,
            ),
            PosteriorKind::Explicit => (None, None, Some(Linear::new(&mut s, r, "enc.sigma", Group::Encoder, h, n))),
        };

        let dec_emb = s.add("dec.emb", Group::Decoder, uniform(r, v, d, 0.1));
        let dec_gru = Gru::new(&mut s, r, "dec.gru", Group::Decoder, d, h);
        let dec_feat = s.add("dec.feat", Group::Decoder, uniform(r, m, 3 * h, 1.0 / math::sqrt(m as f64)));
        let dec_init = Linear::new(&mut s, r, "dec.init", Group::Decoder, m, h);
        let dec_normals = s.add("dec.planes.a", Group::Decoder, uniform(r, m, n, 1.0 / math::sqrt(n as f64)));
        let dec_intercepts = s.add("dec.planes.b", Group::Decoder, uniform(r, m, n, 0.1));
        let dec_out = Linear::new(&mut s, r, "dec.out", Group::Decoder, h, v);

        let dual_emb = s.add("dual.emb", Group::Dual, uniform(r, v, d, 0.1));
        let dual_gru = Gru::new(&mut s, r, "dual.gru", Group::Dual, d, hd);
        let dual_1 = Linear::new(&mut s, r, "dual.l1", Group::Dual, hd + n, hd);
        let dual_2 = Linear::zeroed(&mut s, "dual.l2", Group::Dual, hd, 1);

        let pseudo = match cfg.prior {
            PriorKind::Vamp => {
                Some(s.add("pseudo", Group::Pseudo, uniform(r, cfg.pseudo_inputs * cfg.pseudo_len, d, 0.1)))
            }
            PriorKind::Standard => None,
        };

        let ids = Ids {
            enc_emb,
            enc_gru,
            enc_f,
            enc_g1,
            enc_g2,
            enc_sigma,
            dec_emb,
            dec_gru,
            dec_feat,
            dec_init,
            dec_normals,
            dec_intercepts,
            dec_out,
            dual_emb,
            dual_gru,
            dual_1,
            dual_2,
            pseudo,
        };
        Ok(Model { cfg, ball, ids, store: s, hooks: Hooks::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn ball(&self) -> &BallConfig {
        &self.ball
    }

    pub fn tape_ball(&self) -> TapeBall {
        TapeBall::from(&self.ball)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Puts all parameters on `t`; groups for which `trainable` is false get
    /// no gradient.
    pub fn bind(&self, t: &mut Tape, trainable: impl Fn(Group) -> bool) -> Bound {
        self.store.bind(t, trainable)
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.rows() == 0 {
            return Err(invalid("empty batch"));
        }
        for i in 0..batch.rows() {
            let row = batch.row(i);
            if row.len() < 2 {
                return Err(invalid("sentence too short"));
            }
            if let Some(&bad) = row.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
                return Err(invalid(format!("token id {bad} is outside the vocabulary")));
            }
        }
        Ok(())
    }

    fn heads(&self, t: &mut Tape, bd: &Bound, h: Var) -> Encoded {
        let tb = self.tape_ball();
        let f = self.ids.enc_f.apply(t, bd, h);
        let mu = tb.exp0(t, f);
        let sigma = self.ids.enc_sigma.map(|l| {
            let s = l.apply(t, bd, h);
            let s = t.softplus(s);
            t.add_scalar(s, self.cfg.sigma_min)
        });
        Encoded { h, mu, sigma }
    }

    /// Final encoder state and `μ = exp₀(F(h))` for every sentence.
    pub fn encode(&self, t: &mut Tape, bd: &Bound, batch: &Batch) -> Result<Encoded> {
        self.check_batch(batch)?;
        let h = self.run_sentence_encoder(t, bd, batch, self.ids.enc_emb, self.ids.enc_gru);
        Ok(self.heads(t, bd, h))
    }

    /// The encoder applied to the K soft pseudo-input sequences.
    pub fn encode_pseudo(&self, t: &mut Tape, bd: &Bound) -> Result<Encoded> {
        let p = self.ids.pseudo.ok_or_else(|| invalid("model has no pseudo-inputs"))?;
        let (k, len) = (self.cfg.pseudo_inputs, self.cfg.pseudo_len);
        let idx = (0..len).flat_map(|s| (0..k).map(move |i| i * len + s)).collect();
        let x = t.gather_rows(bd.get(p), idx);
        let gru = self.ids.enc_gru;
        let xw = gru.project_inputs(t, bd, x);
        let h0 = t.constant(Matrix::zeros(k, gru.hidden));
        let (h, _) = gru.run(t, bd, xw, h0, k, len, None, None, false);
        Ok(self.heads(t, bd, h))
    }

    fn run_sentence_encoder(&self, t: &mut Tape, bd: &Bound, batch: &Batch, emb: ParamId, gru: Gru) -> Var {
        let (rows, steps) = (batch.rows(), batch.max_len());
        let ids = (0..steps).flat_map(|s| (0..rows).map(move |i| batch.token(i, s) as usize)).collect();
        let xw = gru.project_tokens(t, bd, emb, ids);
        let masks: Vec<Var> = (0..steps)
            .map(|s| {
                let m = batch.lengths().iter().map(|&l| if s < l { 1.0 } else { 0.0 }).collect::<Vec<_>>();
                t.constant(Matrix::column(&m))
            })
            .collect();
        let h0 = t.constant(Matrix::zeros(rows, gru.hidden));
        gru.run(t, bd, xw, h0, rows, steps, None, Some(&masks), false).0
    }

    /// Tangent draw at the origin: `G([h ⊕ ξ])` or `σ ⊙ ξ`.
    pub fn posterior_tangent(&self, t: &mut Tape, bd: &Bound, enc: &Encoded, xi: Var) -> Var {
        match (enc.sigma, self.ids.enc_g1, self.ids.enc_g2) {
            (Some(sigma), _, _) => t.mul(sigma, xi),
            (None, Some(g1), Some(g2)) => {
                let hx = t.concat_cols(&[enc.h, xi]);
                let a = g1.apply(t, bd, hx);
                let a = t.tanh(a);
                g2.apply(t, bd, a)
            }
            _ => unreachable!("encoder heads match the posterior kind"),
        }
    }

    /// `z = exp_μ(P₀→μ(v))` with `v` from [`Model::posterior_tangent`].
    pub fn sample_posterior(&self, t: &mut Tape, bd: &Bound, enc: &Encoded, xi: Var) -> Var {
        let v = self.posterior_tangent(t, bd, enc, xi);
        self.tape_ball().wrap(t, enc.mu, v)
    }

    /// Gyroplane features `m × gyroplanes`, or zeros under the hook.
    pub fn features(&self, t: &mut Tape, bd: &Bound, z: Var) -> Var {
        if self.hooks.zero_features {
            let rows = t.shape(z).0;
            return t.constant(Matrix::zeros(rows, self.cfg.gyroplanes));
        }
        self.tape_ball().gyroplane_features(t, z, bd.get(self.ids.dec_normals), bd.get(self.ids.dec_intercepts))
    }

    /// Teacher-forced `log p(x | z)` per sentence (`rows × 1`).
    pub fn decode_logprob(&self, t: &mut Tape, bd: &Bound, z: Var, batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        let (rows, steps) = (batch.rows(), batch.max_len() - 1);
        if t.shape(z) != (rows, self.cfg.latent_dim) {
            return Err(invalid("latent batch does not match the sentence batch"));
        }
        let gru = self.ids.dec_gru;
        let g = self.features(t, bd, z);
        let gp = t.matmul(g, bd.get(self.ids.dec_feat));
        let h0 = self.ids.dec_init.apply(t, bd, g);
        let h0 = t.tanh(h0);
        let ids = (0..steps).flat_map(|s| (0..rows).map(move |i| batch.token(i, s) as usize)).collect();
        let xw = gru.project_tokens(t, bd, self.ids.dec_emb, ids);
        let (_, states) = gru.run(t, bd, xw, h0, rows, steps, Some(gp), None, true);
        let hs = t.concat_rows(&states);
        let logits = self.ids.dec_out.apply(t, bd, hs);
        let mut targets = Vec::with_capacity(steps * rows);
        let mut owner = Vec::with_capacity(steps * rows);
        for s in 0..steps {
            for i in 0..rows {
                let live = s + 1 < batch.lengths()[i];
                targets.push(live.then(|| batch.token(i, s + 1) as usize));
                owner.push(i);
            }
        }
        let lp = t.pick_log_softmax(logits, targets);
        Ok(t.scatter_add_rows(lp, owner, rows))
    }

    /// Sentence summaries of the dual network's own encoder.
    pub fn dual_summary(&self, t: &mut Tape, bd: &Bound, batch: &Batch) -> Result<Var> {
        self.check_batch(batch)?;
        Ok(self.run_sentence_encoder(t, bd, batch, self.ids.dual_emb, self.ids.dual_gru))
    }

    /// `ν(x, z)`, clamped to `±nu_max`, for paired rows of `summary` and `z`.
    pub fn dual_score(&self, t: &mut Tape, bd: &Bound, summary: Var, z: Var) -> Var {
        let lz = self.tape_ball().log0(t, z);
        let x = t.concat_cols(&[summary, lz]);
        let a = self.ids.dual_1.apply(t, bd, x);
        let a = t.tanh(a);
        let nu = self.ids.dual_2.apply(t, bd, a);
        t.clamp(nu, -self.cfg.nu_max, self.cfg.nu_max)
    }

    /// Decoder state after conditioning on `z`, before any token.
    pub fn decode_start(&self, z: &BallPoint) -> Result<DecodeState> {
        if z.dim() != self.cfg.latent_dim {
            return Err(invalid("latent dimension mismatch"));
        }
        let g: Vec<f64> = if self.hooks.zero_features {
            vec![0.0; self.cfg.gyroplanes]
        } else {
            let a = &self.store.get(self.ids.dec_normals).value;
            let b = &self.store.get(self.ids.dec_intercepts).value;
            let c = self.ball.c();
            (0..self.cfg.gyroplanes)
                .map(|j| {
                    let bj = self.ball.project_raw(geometry::exp0_raw(c, b.row_slice(j)));
                    geometry::gyroplane_raw(c, z.coords(), a.row_slice(j), &bj)
                })
                .collect()
        };
        let wf = &self.store.get(self.ids.dec_feat).value;
        let mut feat = vec![0.0; wf.cols()];
        for (j, gj) in g.iter().enumerate() {
            for (o, w) in feat.iter_mut().zip(wf.row_slice(j)) {
                *o += gj * w;
            }
        }
        let h = self.ids.dec_init.apply_plain(&self.store, &g).into_iter().map(math::tanh).collect();
        Ok(DecodeState { h, feat })
    }

    /// Feeds `token` and returns the log-probabilities of the next token.
    pub fn decode_step(&self, state: &mut DecodeState, token: u32) -> Result<Vec<f64>> {
        if token as usize >= self.cfg.vocab_size {
            return Err(invalid(format!("token id {token} is outside the vocabulary")));
        }
        let gru = self.ids.dec_gru;
        let emb = self.store.get(self.ids.dec_emb).value.row_slice(token as usize).to_vec();
        let mut xw = Linear { w: gru.wx, b: gru.b }.apply_plain(&self.store, &emb);
        for (x, f) in xw.iter_mut().zip(&state.feat) {
            *x += f;
        }
        state.h = gru.step_plain(&self.store, &xw, &state.h);
        let logits = self.ids.dec_out.apply_plain(&self.store, &state.h);
        let lse = math::log_sum_exp(&logits);
        Ok(logits.into_iter().map(|l| l - lse).collect())
    }

    /// Ancestral sampling from `<s>` until `</s>` or `max_len` tokens.
    /// `temperature == 0` decodes greedily. The markers are not returned.
    pub fn decode_sample<R: Rng + ?Sized>(
        &self,
        z: &BallPoint,
        max_len: usize,
        rng: &mut R,
        temperature: f64,
    ) -> Result<Vec<u32>> {
        if max_len == 0 || !(temperature >= 0.0) {
            return Err(invalid("max_len must be at least 1 and temperature nonnegative"));
        }
        let mut state = self.decode_start(z)?;
        let mut out = Vec::new();
        let mut tok = BOS;
        while out.len() < max_len {
            let lp = self.decode_step(&mut state, tok)?;
            tok = if temperature == 0.0 {
                argmax(&lp) as u32
            } else {
                let scaled: Vec<f64> = lp.iter().map(|l| l / temperature).collect();
                let lse = math::log_sum_exp(&scaled);
                let mut u: f64 = rng.random();
                let mut pick = scaled.len() - 1;
                for (i, s) in scaled.iter().enumerate() {
                    u -= math::exp(s - lse);
                    if u <= 0.0 {
                        pick = i;
                        break;
                    }
                }
                pick as u32
            };
            if tok == EOS {
                break;
            }
            out.push(tok);
        }
        Ok(out)
    }

    /// Forward-only helpers over plain values.
    pub fn eval(&self) -> Eval<'_> {
        Eval { model: self }
    }

    pub fn noise_dim(&self) -> usize {
        self.cfg.noise_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }

    /// True when the posterior has a closed-form density.
    pub fn has_density(&self) -> bool {
        self.cfg.posterior == PosteriorKind::Explicit
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| p.name.clone()).collect()
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Gradient-free evaluation of a [`Model`].
pub struct Eval<'a> {
    model: &'a Model,
}

fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row_slice(r).to_vec()).collect()
}

impl Eval<'_> {
    fn tape(&self) -> (Tape, Bound) {
        let mut t = Tape::new();
        let bd = self.model.bind(&mut t, |_| false);
        (t, bd)
    }

    /// `μ` per sentence.
    pub fn mu(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        let (mut t, bd) = self.tape();
        let enc = self.model.encode(&mut t, &bd, batch)?;
        t.check_finite()?;
        Ok(matrix_rows(t.value(enc.mu)))
    }

    /// One posterior draw per sentence for the given noise rows.
    pub fn posterior(&self, batch: &Batch, noise: &Matrix) -> Result<Vec<Vec<f64>>> {
        Ok(self.posterior_draws(batch, core::slice::from_ref(noise))?.remove(0))
    }

    /// Posterior draws for several noise matrices, encoding the batch once.
    /// Indexed `[draw][sentence]`.
    pub fn posterior_draws(&self, batch: &Batch, noise: &[Matrix]) -> Result<Vec<Vec<Vec<f64>>>> {
        let (mut t, bd) = self.tape();
        let enc = self.model.encode(&mut t, &bd, batch)?;
        let mut out = Vec::with_capacity(noise.len());
        for xi in noise {
            if xi.shape() != (batch.rows(), self.model.cfg.noise_dim) {
                return Err(invalid("noise shape does not match the batch"));
            }
            let xi = t.constant(xi.clone());
            let z = self.model.sample_posterior(&mut t, &bd, &enc, xi);
            out.push(matrix_rows(t.value(z)));
        }
        t.check_finite()?;
        Ok(out)
    }

    /// Explicit-mode posterior parameters of every pseudo-input.
    pub fn pseudo_params(&self) -> Result<Vec<WrappedNormalParams>> {
        if !self.model.has_density() {
            return Err(crate::Error::UnsupportedMode(String::from("implicit posterior has no density")));
        }
        let (mut t, bd) = self.tape();
        let enc = self.model.encode_pseudo(&mut t, &bd)?;
        t.check_finite()?;
        self.params_of(&t, &enc)
    }

    fn params_of(&self, t: &Tape, enc: &Encoded) -> Result<Vec<WrappedNormalParams>> {
        let sigma = enc.sigma.expect("explicit encoder has a scale head");
        let mus = matrix_rows(t.value(enc.mu));
        let sig = matrix_rows(t.value(sigma));
        mus.into_iter().zip(sig).map(|(m, s)| WrappedNormalParams::new(self.model.ball.project(&m)?, s)).collect()
    }

    /// Explicit-mode posterior parameters per sentence.
    pub fn posterior_params(&self, batch: &Batch) -> Result<Vec<WrappedNormalParams>> {
        if !self.model.has_density() {
            return Err(crate::Error::UnsupportedMode(String::from("implicit posterior has no density")));
        }
        let (mut t, bd) = self.tape();
        let enc = self.model.encode(&mut t, &bd, batch)?;
        t.check_finite()?;
        self.params_of(&t, &enc)
    }

    /// `log p(x | z)` per sentence.
    pub fn logprob(&self, batch: &Batch, z: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (mut t, bd) = self.tape();
        let zv = t.constant(Matrix::from_rows(z));
        let lp = self.model.decode_logprob(&mut t, &bd, zv, batch)?;
        t.check_finite()?;
        Ok(t.value(lp).as_slice().to_vec())
    }

    /// `ν(x, z)` per sentence.
    pub fn dual(&self, batch: &Batch, z: &[Vec<f64>]) -> Result<Vec<f64>> {
        let (mut t, bd) = self.tape();
        let s = self.model.dual_summary(&mut t, &bd, batch)?;
        let zv = t.constant(Matrix::from_rows(z));
        let nu = self.model.dual_score(&mut t, &bd, s, zv);
        t.check_finite()?;
        Ok(t.value(nu).as_slice().to_vec())
    }

    /// Draws from the prior: the standard wrapped normal, or a uniformly
    /// chosen pseudo-input's posterior.
    pub fn prior_samples<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        let n = self.model.cfg.latent_dim;
        match self.model.cfg.prior {
            PriorKind::Standard => {
                let noise: Vec<Vec<f64>> =
                    (0..count).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect();
                noise.iter().map(|v| Ok(self.model.ball.exp0(v)?.into_coords())).collect()
            }
            PriorKind::Vamp => {
                let k = self.model.cfg.pseudo_inputs;
                let pick: Vec<usize> = (0..count).map(|_| rng.random_range(0..k)).collect();
                let noise = Matrix::from_vec(
                    count,
                    self.model.cfg.noise_dim,
                    (0..count * self.model.cfg.noise_dim).map(|_| rng.sample(StandardNormal)).collect(),
                );
                let (mut t, bd) = self.tape();
                let enc = self.model.encode_pseudo(&mut t, &bd)?;
                let enc = Encoded {
                    h: t.gather_rows(enc.h, pick.clone()),
                    mu: t.gather_rows(enc.mu, pick.clone()),
                    sigma: enc.sigma.map(|s| t.gather_rows(s, pick)),
                };
                let xi = t.constant(noise);
                let z = self.model.sample_posterior(&mut t, &bd, &enc, xi);
                t.check_finite()?;
                Ok(matrix_rows(t.value(z)))
            }
        }
    }
}
