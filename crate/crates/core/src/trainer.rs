//! Alternating primal-dual training.
//!
//! Each iteration takes one minibatch, runs `k_dual` ascent steps on the dual
//! objective `L1 = E_q ν − E_p e^ν` over (ψ, δ), then one ascent step on
//! `L2 = E_q[log p(x|z) − ν]` over (θ, φ).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{epoch_order, Batch, Sentence, Vocab};
use crate::error::{invalid, Error, Result};
use crate::nn::{Encoded, Model, ModelConfig, PosteriorKind};
use crate::optim::{Adam, AdamConfig};
use crate::tape::{Bound, Group, ParamId, Tape, Var};
use crate::tensor::Matrix;
use crate::wrapped::PriorKind;

/// Every training and architecture setting. Unknown keys are rejected when
/// deserializing; missing keys take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub c: f64,
    pub latent_dim: usize,
    pub emb_dim: usize,
    pub hidden: usize,
    pub noise_dim: usize,
    /// Number of gyroplanes; 0 means "same as `hidden`".
    pub gyroplanes: usize,
    pub dual_hidden: usize,
    pub nu_max: f64,
    pub posterior: PosteriorKind,
    pub prior: PriorKind,
    pub pseudo_inputs: usize,
    pub pseudo_len: usize,
    pub sigma_min: f64,
    pub boundary_eps: f64,
    pub vocab_cap: usize,
    pub batch_size: usize,
    pub max_iter: u64,
    pub k_dual: usize,
    pub lr_model: f64,
    pub lr_dual: f64,
    /// Multiplier on `lr_model` for the encoder parameters.
    pub encoder_lr_scale: f64,
    pub model_beta1: f64,
    pub model_beta2: f64,
    pub dual_beta1: f64,
    pub dual_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c: 0.7,
            latent_dim: 8,
            emb_dim: 64,
            hidden: 128,
            noise_dim: 8,
            gyroplanes: 0,
            dual_hidden: 64,
            nu_max: 10.0,
            posterior: PosteriorKind::Implicit,
            prior: PriorKind::Vamp,
            pseudo_inputs: 16,
            pseudo_len: 8,
            sigma_min: 1e-3,
            boundary_eps: 1e-5,
            vocab_cap: 1000,
            batch_size: 32,
            max_iter: 2000,
            k_dual: 1,
            lr_model: 1e-3,
            lr_dual: 1e-3,
            encoder_lr_scale: 1.0,
            model_beta1: 0.9,
            model_beta2: 0.999,
            dual_beta1: 0.5,
            dual_beta2: 0.9,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.k_dual == 0 || self.vocab_cap < 4 {
            return Err(invalid("batch_size and k_dual must be at least 1, vocab_cap at least 4"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(invalid("clip_norm must be positive"));
        }
        self.model_adam().validate()?;
        self.dual_adam().validate()?;
        self.model_config(5).validate()
    }

    pub fn model_adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr_model, beta1: self.model_beta1, beta2: self.model_beta2, eps: self.adam_eps }
    }

    pub fn dual_adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr_dual, beta1: self.dual_beta1, beta2: self.dual_beta2, eps: self.adam_eps }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            emb_dim: self.emb_dim,
            hidden: self.hidden,
            latent_dim: self.latent_dim,
            noise_dim: self.noise_dim,
            gyroplanes: if self.gyroplanes == 0 { self.hidden } else { self.gyroplanes },
            dual_hidden: self.dual_hidden,
            nu_max: self.nu_max,
            posterior: self.posterior,
            prior: self.prior,
            pseudo_inputs: self.pseudo_inputs,
            pseudo_len: self.pseudo_len,
            sigma_min: self.sigma_min,
            c: self.c,
            boundary_eps: self.boundary_eps,
        }
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterLog {
    pub iter: u64,
    pub l1: f64,
    pub l2: f64,
    pub recon: f64,
    pub kl_est: f64,
    pub wall_ms: f64,
}

/// Test switches for the training objectives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainHooks {
    /// Draw `z_q` from the standard wrapped normal instead of the encoder.
    pub posterior_is_prior: bool,
}

/// Position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn rebuild(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// Adam step count and moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub steps: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

/// A named tensor of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: Group,
    pub value: Matrix,
}

/// Everything needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub iteration: u64,
    pub rng: RngState,
    pub params: Vec<NamedTensor>,
    pub model_opt: AdamState,
    pub dual_opt: AdamState,
}

/// Noise for one objective evaluation.
struct Draws {
    xi_q: Matrix,
    xi_p: Matrix,
    pick: Vec<usize>,
}

pub struct Trainer {
    cfg: TrainConfig,
    vocab: Vocab,
    model: Model,
    model_opt: Adam,
    dual_opt: Adam,
    rng: ChaCha8Rng,
    iteration: u64,
    corpus: Vec<Sentence>,
    order: Option<(u64, Vec<usize>)>,
    pub hooks: TrainHooks,
}

fn dual_groups(g: Group) -> bool {
    matches!(g, Group::Dual | Group::Pseudo)
}

fn model_groups(g: Group) -> bool {
    matches!(g, Group::Decoder | Group::Encoder)
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocab, corpus: Vec<Sentence>) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(invalid("training corpus is empty"));
        }
        let model = Model::new(cfg.model_config(vocab.len()), cfg.seed)?;
        for s in &corpus {
            if let Some(&bad) = s.ids().iter().find(|&&i| i as usize >= vocab.len()) {
                return Err(invalid(format!("token id {bad} is outside the vocabulary")));
            }
        }
        let store = model.store();
        let mut model_opt = Adam::new(cfg.model_adam(), store, store.ids_in(&[Group::Decoder, Group::Encoder]))?;
        for id in store.ids_in(&[Group::Encoder]) {
            model_opt.set_lr_scale(id, cfg.encoder_lr_scale)?;
        }
        let dual_opt = Adam::new(cfg.dual_adam(), store, store.ids_in(&[Group::Dual, Group::Pseudo]))?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
        Ok(Trainer {
            cfg,
            vocab,
            model,
            model_opt,
            dual_opt,
            rng,
            iteration: 0,
            corpus,
            order: None,
            hooks: TrainHooks::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn corpus(&self) -> &[Sentence] {
        &self.corpus
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// The minibatch of iteration `iter`: epochs are seeded shuffles of the
    /// corpus, cut into consecutive chunks.
    pub fn batch_for(&mut self, iter: u64) -> Batch {
        let n = self.corpus.len();
        let m = self.cfg.batch_size.min(n);
        let per_epoch = (n / m) as u64;
        let (epoch, k) = (iter / per_epoch, (iter % per_epoch) as usize);
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, epoch_order(n, self.cfg.seed, epoch)));
        }
        let order = &self.order.as_ref().expect("order was just set").1;
        let rows: Vec<&Sentence> = order[k * m..(k + 1) * m].iter().map(|&i| &self.corpus[i]).collect();
        Batch::new(&rows)
    }

    fn draw(&mut self, rows: usize) -> Draws {
        let mc = self.model.config();
        let (nq, k) = (mc.noise_dim, mc.pseudo_inputs);
        let np = match mc.prior {
            PriorKind::Standard => mc.latent_dim,
            PriorKind::Vamp => mc.noise_dim,
        };
        let rng = &mut self.rng;
        let mut normal = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        };
        let xi_q = if self.hooks.posterior_is_prior { normal(rows, self.cfg.latent_dim) } else { normal(rows, nq) };
        let xi_p = normal(rows, np);
        let pick = match mc.prior {
            PriorKind::Standard => Vec::new(),
            PriorKind::Vamp => (0..rows).map(|_| self.rng.random_range(0..k)).collect(),
        };
        Draws { xi_q, xi_p, pick }
    }

    fn z_q(&self, t: &mut Tape, bd: &Bound, batch: &Batch, xi: &Matrix) -> Result<Var> {
        let xi = t.constant(xi.clone());
        if self.hooks.posterior_is_prior {
            return Ok(self.model.tape_ball().exp0(t, xi));
        }
        let enc = self.model.encode(t, bd, batch)?;
        Ok(self.model.sample_posterior(t, bd, &enc, xi))
    }

    fn z_p(&self, t: &mut Tape, bd: &Bound, d: &Draws) -> Result<Var> {
        let xi = t.constant(d.xi_p.clone());
        match self.model.config().prior {
            PriorKind::Standard => Ok(self.model.tape_ball().exp0(t, xi)),
            PriorKind::Vamp => {
                let enc = self.model.encode_pseudo(t, bd)?;
                let enc = Encoded {
                    h: t.gather_rows(enc.h, d.pick.clone()),
                    mu: t.gather_rows(enc.mu, d.pick.clone()),
                    sigma: enc.sigma.map(|s| t.gather_rows(s, d.pick.clone())),
                };
                Ok(self.model.sample_posterior(t, bd, &enc, xi))
            }
        }
    }

    /// Builds `L1` on `t`; `shift` is added to every `ν(x, z_q)`.
    fn build_l1(&self, t: &mut Tape, bd: &Bound, batch: &Batch, d: &Draws, shift: Option<Var>) -> Result<Var> {
        let rows = batch.rows();
        let zq = self.z_q(t, bd, batch, &d.xi_q)?;
        let zp = self.z_p(t, bd, d)?;
        let s = self.model.dual_summary(t, bd, batch)?;
        let s2 = t.concat_rows(&[s, s]);
        let z = t.concat_rows(&[zq, zp]);
        let nu = self.model.dual_score(t, bd, s2, z);
        let mut nq = t.slice_rows(nu, 0, rows);
        if let Some(sh) = shift {
            nq = t.add(nq, sh);
        }
        let np = t.slice_rows(nu, rows, rows);
        let a = t.mean(nq);
        let e = t.exp(np);
        let b = t.mean(e);
        Ok(t.sub(a, b))
    }

    /// Builds `L2` and the mean reconstruction term on `t`.
    fn build_l2(&self, t: &mut Tape, bd: &Bound, batch: &Batch, d: &Draws, shift: Option<Var>) -> Result<(Var, Var)> {
        let zq = self.z_q(t, bd, batch, &d.xi_q)?;
        let rec = self.model.decode_logprob(t, bd, zq, batch)?;
        let s = self.model.dual_summary(t, bd, batch)?;
        let mut nu = self.model.dual_score(t, bd, s, zq);
        if let Some(sh) = shift {
            nu = t.add(nu, sh);
        }
        let diff = t.sub(rec, nu);
        let l2 = t.mean(diff);
        let recon = t.mean(rec);
        Ok((l2, recon))
    }

    fn ascend(&mut self, t: &Tape, objective: Var, dual: bool) -> Result<()> {
        let value = t.scalar(objective);
        if !value.is_finite() {
            return Err(Error::Divergence { iteration: self.iteration, reason: format!("objective is {value}") });
        }
        let store = self.model.store_mut();
        store.zero_grad();
        t.backward(objective, store)?;
        let opt = if dual { &mut self.dual_opt } else { &mut self.model_opt };
        let ids: Vec<ParamId> = opt.ids().to_vec();
        // ascent: flip the sign of the accumulated gradient
        for id in &ids {
            store.get_mut(*id).grad.scale_assign(-1.0);
        }
        store.clip_grad_norm(&ids, self.cfg.clip_norm);
        opt.step(store);
        Ok(())
    }

    /// One ascent step on `L1` over (ψ, δ). Returns `L1` before the update.
    pub fn dual_step(&mut self, batch: &Batch) -> Result<f64> {
        self.model.check_batch(batch)?;
        let d = self.draw(batch.rows());
        let mut t = Tape::new();
        let bd = self.model.bind(&mut t, dual_groups);
        let l1 = self.build_l1(&mut t, &bd, batch, &d, None)?;
        let value = t.scalar(l1);
        self.ascend(&t, l1, true)?;
        Ok(value)
    }

    /// One ascent step on `L2` over (θ, φ). Returns `(L2, mean recon)`
    /// before the update.
    pub fn model_step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        self.model.check_batch(batch)?;
        let d = self.draw(batch.rows());
        let mut t = Tape::new();
        let bd = self.model.bind(&mut t, model_groups);
        let (l2, recon) = self.build_l2(&mut t, &bd, batch, &d, None)?;
        let (value, rec) = (t.scalar(l2), t.scalar(recon));
        self.ascend(&t, l2, false)?;
        Ok((value, rec))
    }

    /// `max(0, E_q ν − E_p e^ν + 1)` over `repeats` fresh draws on `batch`.
    pub fn kl_dual_estimate(&mut self, batch: &Batch, repeats: usize) -> Result<f64> {
        self.model.check_batch(batch)?;
        let mut total = 0.0;
        for _ in 0..repeats.max(1) {
            let d = self.draw(batch.rows());
            let mut t = Tape::new();
            let bd = self.model.bind(&mut t, |_| false);
            let l1 = self.build_l1(&mut t, &bd, batch, &d, None)?;
            t.check_finite()?;
            total += t.scalar(l1);
        }
        Ok((total / repeats.max(1) as f64 + 1.0).max(0.0))
    }

    /// Derivatives of `L1` and `L2` with respect to a scalar added to
    /// `ν(x, z_q)`, at the current parameters.
    pub fn nu_shift_sensitivity(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let d = self.draw(batch.rows());
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let mut t = Tape::new();
            let bd = self.model.bind(&mut t, |_| false);
            let s = t.leaf(Matrix::scalar(0.0));
            let obj = if k == 0 {
                self.build_l1(&mut t, &bd, batch, &d, Some(s))?
            } else {
                self.build_l2(&mut t, &bd, batch, &d, Some(s))?.0
            };
            *o = t.gradients(obj)?.get(s).map(|g| g.item()).unwrap_or(0.0);
        }
        Ok((out[0], out[1]))
    }

    /// Runs one full iteration of the training loop.
    pub fn step(&mut self) -> Result<IterLog> {
        let batch = self.batch_for(self.iteration);
        let mut l1 = 0.0;
        for _ in 0..self.cfg.k_dual {
            l1 = self.dual_step(&batch)?;
        }
        let (l2, recon) = self.model_step(&batch)?;
        let log = IterLog { iter: self.iteration, l1, l2, recon, kl_est: (l1 + 1.0).max(0.0), wall_ms: 0.0 };
        self.iteration += 1;
        Ok(log)
    }

    /// Trains until `max_iter` iterations have run in total. `clock` returns
    /// milliseconds; `log` receives every iteration.
    pub fn train(&mut self, clock: &mut dyn FnMut() -> f64, log: &mut dyn FnMut(&IterLog) -> Result<()>) -> Result<()> {
        let start = clock();
        while self.iteration < self.cfg.max_iter {
            let mut entry = self.step()?;
            entry.wall_ms = clock() - start;
            log(&entry)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Checkpoint {
        let params = self
            .model
            .store()
            .iter()
            .map(|(_, p)| NamedTensor { name: p.name.clone(), group: p.group, value: p.value.clone() })
            .collect();
        let adam = |o: &Adam| {
            let (m, v) = o.moments();
            AdamState { steps: o.steps(), m: m.to_vec(), v: v.to_vec() }
        };
        Checkpoint {
            config: self.cfg.clone(),
            vocab: self.vocab.tokens().to_vec(),
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            params,
            model_opt: adam(&self.model_opt),
            dual_opt: adam(&self.dual_opt),
        }
    }

    /// Rebuilds a trainer from a checkpoint and the training corpus.
    pub fn restore(ckpt: &Checkpoint, corpus: Vec<Sentence>) -> Result<Self> {
        let vocab = Vocab::from_tokens(ckpt.vocab.clone())?;
        let mut tr = Trainer::new(ckpt.config.clone(), vocab, corpus)?;
        tr.model = restore_model(ckpt)?;
        tr.model_opt.restore(ckpt.model_opt.steps, ckpt.model_opt.m.clone(), ckpt.model_opt.v.clone())?;
        tr.dual_opt.restore(ckpt.dual_opt.steps, ckpt.dual_opt.m.clone(), ckpt.dual_opt.v.clone())?;
        tr.rng = ckpt.rng.rebuild();
        tr.iteration = ckpt.iteration;
        Ok(tr)
    }
}

/// The model stored in a checkpoint, without optimizer state.
pub fn restore_model(ckpt: &Checkpoint) -> Result<Model> {
    let mut model = Model::new(ckpt.config.model_config(ckpt.vocab.len()), ckpt.config.seed)?;
    let store = model.store_mut();
    if store.len() != ckpt.params.len() {
        return Err(Error::State(format!(
            "checkpoint has {} tensors, model expects {}",
            ckpt.params.len(),
            store.len()
        )));
    }
    for (i, p) in ckpt.params.iter().enumerate() {
        let slot = store.get_mut(ParamId(i));
        if slot.name != p.name || slot.group != p.group || slot.value.shape() != p.value.shape() {
            return Err(Error::State(format!(
                "checkpoint tensor {} does not match model tensor {}",
                p.name, slot.name
            )));
        }
        slot.value = p.value.clone();
    }
    Ok(model)
}
