//! The `apovae` command line.
//!
//! Exit status: 0 on success, 2 for usage and configuration errors, 3 for
//! data and model errors. Diagnostics go to standard error.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use apovae_core::corpus::{gen_tree_corpus, Batch, Sentence, TreeCorpusConfig, Vocab};
use apovae_core::geometry::BallConfig;
use apovae_core::metrics;
use apovae_core::nn::Model;
use apovae_core::trainer::{restore_model, Trainer};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config;
use crate::data::{self, Line};
use crate::error::{Error, Result};
use crate::log::MetricsLog;

#[derive(Parser, Debug)]
#[command(name = "apovae", version, about = "Adversarial Poincaré variational autoencoder for sentences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic phrase-tree corpus (`<out>.txt` and `<out>.tsv`).
    GenCorpus(GenCorpusArgs),
    /// Train a model; writes a checkpoint and a metrics CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus; prints one JSON line.
    Eval(EvalArgs),
    /// Posterior-mean embeddings as TSV: sentence, hyperbolic norm, coordinates.
    Embed(EvalArgs),
    /// Decode sentences from prior samples.
    Sample(SampleArgs),
    /// Greedy decodes along the geodesic between two sentences.
    Interpolate(InterpolateArgs),
    /// 2-D projection of the embeddings as CSV `x,y,depth_or_len`.
    Project(EvalArgs),
}

#[derive(Args, Debug)]
pub struct GenCorpusArgs {
    /// JSON tree-corpus config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output prefix.
    #[arg(long)]
    pub out: PathBuf,
    /// Config overrides, `key=value`.
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON training config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iter: Option<u64>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV; defaults to `<out>.csv`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Write 0 in the `wall_ms` column so that logs compare byte for byte.
    #[arg(long)]
    pub fixed_clock: bool,
    /// Config overrides, `key=value`.
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    /// 0 decodes greedily.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InterpolateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub from: String,
    #[arg(long)]
    pub to: String,
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    /// Accepted for uniformity; decoding is greedy.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Embed(a) => embed(a),
        Command::Sample(a) => sample(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Project(a) => project(a),
    }
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut so = io::stdout().lock();
            so.write_all(text.as_bytes()).and_then(|_| so.flush()).map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let mut cfg: TreeCorpusConfig = config::load(a.config.as_deref(), &a.overrides)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let sentences = gen_tree_corpus(&cfg).map_err(|e| Error::Usage(format!("invalid corpus config: {e}")))?;
    write_output(Some(&with_suffix(&a.out, ".txt")), &data::corpus_text(&sentences))?;
    write_output(Some(&with_suffix(&a.out, ".tsv")), &data::depth_tsv(&sentences))
}

fn train(a: TrainArgs) -> Result<()> {
    let lines = data::read_corpus(&a.corpus)?;
    let metrics_path = a.metrics.clone().unwrap_or_else(|| with_suffix(&a.out, ".csv"));
    let mut trainer = match &a.resume {
        Some(path) => {
            if a.config.is_some() || a.seed.is_some() || !a.overrides.is_empty() {
                return Err(Error::Usage(
                    "--resume takes its config from the checkpoint; only --max-iter may change".into(),
                ));
            }
            let mut ckpt = checkpoint::load(path)?;
            if let Some(m) = a.max_iter {
                ckpt.config.max_iter = m;
            }
            let vocab = Vocab::from_tokens(ckpt.vocab.clone())?;
            Trainer::restore(&ckpt, data::encode(&vocab, &lines)?)?
        }
        None => {
            let mut cfg = config::load_config(a.config.as_deref(), &a.overrides)?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            if let Some(m) = a.max_iter {
                cfg.max_iter = m;
            }
            let vocab = Vocab::build(&data::texts(&lines), cfg.vocab_cap)?;
            let corpus = data::encode(&vocab, &lines)?;
            Trainer::new(cfg, vocab, corpus)?
        }
    };

    let file = if a.resume.is_some() && metrics_path.exists() {
        OpenOptions::new().append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = if a.resume.is_some() && file.metadata().map(|m| m.len() > 0).unwrap_or(false) {
        MetricsLog::resume(BufWriter::new(file))
    } else {
        MetricsLog::create(BufWriter::new(file), trainer.config())?
    };

    let start = Instant::now();
    let fixed = a.fixed_clock;
    let mut clock = move || if fixed { 0.0 } else { start.elapsed().as_secs_f64() * 1e3 };
    let outcome =
        trainer.train(&mut clock, &mut |r| log.append(r).map_err(|e| apovae_core::Error::State(e.to_string())));
    log.finish()?;
    if let Err(e) = outcome {
        let failed = with_suffix(&a.out, ".failed");
        checkpoint::save(&failed, &trainer.snapshot())?;
        return Err(Error::Data(format!("{e}; state saved to {}", failed.display())));
    }
    checkpoint::save(&a.out, &trainer.snapshot())
}

/// Model, vocabulary and encoded corpus for the read-only commands.
fn load_for_eval(checkpoint: &Path, corpus: &Path) -> Result<(Model, Vocab, Vec<Line>, Vec<Sentence>)> {
    let ckpt = checkpoint::load(checkpoint)?;
    let model = restore_model(&ckpt)?;
    let vocab = Vocab::from_tokens(ckpt.vocab)?;
    let lines = data::read_corpus(corpus)?;
    let sentences = data::encode(&vocab, &lines)?;
    Ok((model, vocab, lines, sentences))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, _, _, sentences) = load_for_eval(&a.checkpoint, &a.corpus)?;
    let report = metrics::evaluate(&model, &sentences, a.seed)?;
    let json = serde_json::to_string(&report).map_err(|e| Error::Data(e.to_string()))?;
    write_output(a.out.as_deref(), &format!("{json}\n"))
}

fn embed(a: EvalArgs) -> Result<()> {
    let (model, _, lines, sentences) = load_for_eval(&a.checkpoint, &a.corpus)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let means = metrics::posterior_means(&model, &sentences, &mut rng)?;
    let ball = model.ball();
    let mut out = String::from("sentence\tnorm");
    for j in 1..=model.latent_dim() {
        out.push_str(&format!("\tz{j}"));
    }
    out.push('\n');
    for (line, m) in lines.iter().zip(&means) {
        let z = ball.project(m)?;
        out.push_str(&format!("{}\t{}", line.text, ball.distance(&ball.origin(), &z)));
        for x in z.coords() {
            out.push_str(&format!("\t{x}"));
        }
        out.push('\n');
    }
    write_output(a.out.as_deref(), &out)
}

/// Planar coordinates of a ball point: itself when `n = 2`, otherwise the
/// first two coordinates of `log₀ z` mapped back through `exp₀` in 2-D.
pub fn planar(ball: &BallConfig, z: &[f64]) -> Result<[f64; 2]> {
    let flat = BallConfig::with_eps(ball.c(), 2, ball.boundary_eps())?;
    let p = if z.len() == 2 {
        flat.project(z)?
    } else {
        let v = ball.log0(&ball.project(z)?);
        flat.exp0(&v[..2])?
    };
    Ok([p.coords()[0], p.coords()[1]])
}

fn project(a: EvalArgs) -> Result<()> {
    let (model, _, lines, sentences) = load_for_eval(&a.checkpoint, &a.corpus)?;
    if model.latent_dim() < 2 {
        return Err(Error::Usage("projection needs a latent dimension of at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let means = metrics::posterior_means(&model, &sentences, &mut rng)?;
    let mut out = String::from("x,y,depth_or_len\n");
    for ((line, s), m) in lines.iter().zip(&sentences).zip(&means) {
        let [x, y] = planar(model.ball(), m)?;
        let tag = line.depth.map(|d| d as usize).unwrap_or(s.len() - 2);
        out.push_str(&format!("{x},{y},{tag}\n"));
    }
    write_output(a.out.as_deref(), &out)
}

fn load_model(path: &Path) -> Result<(Model, Vocab)> {
    let ckpt = checkpoint::load(path)?;
    let model = restore_model(&ckpt)?;
    Ok((model, Vocab::from_tokens(ckpt.vocab)?))
}

fn sample(a: SampleArgs) -> Result<()> {
    let (model, vocab) = load_model(&a.checkpoint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let zs = model.eval().prior_samples(a.count, &mut rng)?;
    let mut out = String::new();
    for z in zs {
        let z = model.ball().project(&z)?;
        let ids = model.decode_sample(&z, a.max_len, &mut rng, a.temperature)?;
        out.push_str(&vocab.decode(&ids));
        out.push('\n');
    }
    write_output(a.out.as_deref(), &out)
}

fn interpolate(a: InterpolateArgs) -> Result<()> {
    let (model, vocab) = load_model(&a.checkpoint)?;
    let ends = [vocab.encode(&a.from)?, vocab.encode(&a.to)?];
    let mu = model.eval().mu(&Batch::new(&[&ends[0], &ends[1]]))?;
    let ball = model.ball();
    let (z1, z2) = (ball.project(&mu[0])?, ball.project(&mu[1])?);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut out = String::new();
    for k in 0..5 {
        let t = k as f64 / 4.0;
        let z = ball.geodesic_interpolate(&z1, &z2, t)?;
        let ids = model.decode_sample(&z, a.max_len, &mut rng, 0.0)?;
        out.push_str(&format!("{t}\t{}\n", vocab.decode(&ids)));
    }
    write_output(a.out.as_deref(), &out)
}
