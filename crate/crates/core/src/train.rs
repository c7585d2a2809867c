//! Training loops for the inpainter, the feedback critic and the evaluator.
//!
//! Every step draws one seed per batch element from the run's master RNG and
//! computes per-sample gradients independently (in parallel when enabled).
//! Gradients are reduced in batch order, so a fixed seed reproduces the loss
//! series bit for bit with or without the `parallel` feature.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{random_subset_mask, sample_fragment, sample_window, CorpusError, MaskRole, MaskVec, SchedulerDraw};
use crate::engine::{mask_tokens, sample_fill, EngineError};
use crate::models::{Evaluator, Feedback, Inpainter, ModelError, Network};
use crate::parallel;
use crate::remi::{transpose, Token, TokenSeq, MASK_ID, PAD_ID};
use crate::tensor::{clip_global_norm, lr_at, AdamW, AdamWConfig, CheckpointError, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossScope {
    /// Loss only over masked positions (M_s) or fragment positions (M_u).
    #[default]
    MaskedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub warmup: usize,
    pub peak_lr: f64,
    pub seed: u64,
    /// Random ±6 semitone transposition per sample.
    pub augment: bool,
    pub loss_scope: LossScope,
    pub window_len: usize,
    pub max_grad_norm: f64,
    pub adamw: AdamWConfig,
    /// Validate every this many steps; 0 validates only at the end.
    pub eval_every: usize,
    pub val_instances: usize,
    /// Stop after this many validations without improvement.
    pub patience: Option<usize>,
    pub checkpoint_every: Option<usize>,
    /// Receives `metrics.jsonl` and checkpoints when set.
    pub out_dir: Option<PathBuf>,
    /// Sampling temperature of the frozen inpainter in feedback training.
    pub sample_temperature: f64,
    /// Label regenerated tokens that equal the original as real.
    pub relabel_on_match: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            steps: 3000,
            warmup: 200,
            peak_lr: 3e-4,
            seed: 0,
            augment: true,
            loss_scope: LossScope::MaskedOnly,
            window_len: 128,
            max_grad_norm: 1.0,
            adamw: AdamWConfig::default(),
            eval_every: 0,
            val_instances: 64,
            patience: None,
            checkpoint_every: None,
            out_dir: None,
            sample_temperature: 1.0,
            relabel_on_match: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.warmup == 0 || self.steps <= self.warmup {
            return bad(format!("need 0 < warmup < steps, got warmup {} steps {}", self.warmup, self.steps));
        }
        if !(self.peak_lr > 0.0) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if self.window_len == 0 {
            return bad("window_len must be positive".into());
        }
        if !(self.sample_temperature > 0.0) {
            return bad(format!("sample_temperature {} must be positive", self.sample_temperature));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model_kind: String,
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
    pub validation: Vec<ValPoint>,
    pub final_val_loss: Option<f64>,
    pub checkpoint_path: Option<PathBuf>,
    /// Set when early stopping ended the run before `steps`.
    pub stopped_at: Option<usize>,
}

/// Training metrics line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// One masked training example drawn from a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub window: TokenSeq,
    pub m_u: MaskVec,
    pub m_s: MaskVec,
}

impl MaskedExample {
    pub fn masked_input(&self) -> TokenSeq {
        mask_tokens(&self.window, &self.m_s)
    }
}

/// Window of a random corpus sequence, optionally transposed.
pub fn draw_window<R: Rng + ?Sized>(
    corpus: &[TokenSeq],
    window_len: usize,
    augment: bool,
    rng: &mut R,
) -> Result<TokenSeq, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let seq = &corpus[rng.gen_range(0..corpus.len())];
    let window = if augment {
        let shift = rng.gen_range(-6..=6);
        sample_window(&transpose(seq, shift).expect("shift within range").seq, window_len, rng)?
    } else {
        sample_window(seq, window_len, rng)?
    };
    Ok(window.seq)
}

/// Number of leading non-Pad tokens.
pub fn content_len(window: &TokenSeq) -> usize {
    window.tokens.iter().position(|&t| t == Token::Pad).unwrap_or(window.len())
}

/// Fragment over the unpadded part of `window` of `round(t1·len)` tokens.
pub fn draw_fragment<R: Rng + ?Sized>(window: &TokenSeq, t1: f64, rng: &mut R) -> Result<MaskVec, TrainError> {
    let content = content_len(window);
    let inner = sample_fragment(content, t1, rng)?;
    let mut bits = inner.bits().to_vec();
    bits.resize(window.len(), false);
    Ok(MaskVec::new(bits, MaskRole::Fragment))
}

/// Fragment and subset masks of one training step. A draw whose subset
/// rounds to zero tokens is redrawn.
pub fn draw_masks<R: Rng + ?Sized>(window: &TokenSeq, rng: &mut R) -> Result<(MaskVec, MaskVec), TrainError> {
    loop {
        let draw = SchedulerDraw::sample(rng);
        let m_u = draw_fragment(window, draw.t1, rng)?;
        let m_s = random_subset_mask(&m_u, draw.ratio(), rng)?;
        assert!(m_s.is_subset_of(&m_u), "subset mask escapes the fragment");
        if m_s.count() > 0 {
            return Ok((m_u, m_s));
        }
    }
}

pub fn draw_example<R: Rng + ?Sized>(
    corpus: &[TokenSeq],
    window_len: usize,
    augment: bool,
    rng: &mut R,
) -> Result<MaskedExample, TrainError> {
    let window = draw_window(corpus, window_len, augment, rng)?;
    let (m_u, m_s) = draw_masks(&window, rng)?;
    Ok(MaskedExample { window, m_u, m_s })
}

/// Masked-position cross-entropy of the inpainter and its gradient graph.
pub fn inpainter_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Inpainter,
    ex: &MaskedExample,
    rng: &mut R,
) -> Result<crate::tensor::Var, TrainError> {
    let target = ex.window.ids();
    let x_masked = ex.masked_input().ids();
    debug_assert!(x_masked
        .iter()
        .zip(ex.m_s.bits())
        .all(|(&id, &m)| (id == MASK_ID) == m));
    let logits = model.forward(g, &x_masked, ex.m_s.bits(), &Inpainter::decoder_input(&target), rng)?;
    Ok(g.cross_entropy(logits, &target, ex.m_s.bits())?)
}

/// Realism labels: 0 at regenerated positions, 1 elsewhere in the fragment.
pub fn feedback_labels(m_s: &MaskVec, original: &TokenSeq, generated: &TokenSeq, relabel_on_match: bool) -> Vec<f64> {
    (0..m_s.len())
        .map(|i| {
            let fake = m_s.get(i) && !(relabel_on_match && original.tokens[i] == generated.tokens[i]);
            if fake {
                0.0
            } else {
                1.0
            }
        })
        .collect()
}

/// Next-token targets and their selection: row `i` predicts token `i + 1`,
/// Pad targets excluded.
pub fn next_token_targets(ids: &[u32]) -> (Vec<u32>, Vec<bool>) {
    let n = ids.len();
    let targets: Vec<u32> = (0..n).map(|i| if i + 1 < n { ids[i + 1] } else { PAD_ID }).collect();
    let select = (0..n).map(|i| i + 1 < n && ids[i + 1] != PAD_ID).collect();
    (targets, select)
}

type SampleResult = Result<(f64, Vec<Tensor>), TrainError>;

struct Loop<'a> {
    kind: &'static str,
    config: &'a TrainConfig,
}

impl Loop<'_> {
    fn run<M, S, V>(&self, model: &mut M, sample: S, validate: V) -> Result<TrainReport, TrainError>
    where
        M: Network + Sync,
        S: Fn(&M, &mut ChaCha8Rng) -> SampleResult + Sync,
        V: Fn(&M) -> Result<f64, TrainError>,
    {
        let cfg = self.config;
        cfg.validate()?;
        let mut metrics = match &cfg.out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let path = dir.join(format!("{}-metrics.jsonl", self.kind));
                Some((BufWriter::new(File::create(&path).map_err(io_err(&path))?), path))
            }
            None => None,
        };
        let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamW::new(model.params(), cfg.adamw);
        let mut report = TrainReport {
            model_kind: self.kind.to_string(),
            losses: Vec::with_capacity(cfg.steps),
            lrs: Vec::with_capacity(cfg.steps),
            validation: Vec::new(),
            final_val_loss: None,
            checkpoint_path: None,
            stopped_at: None,
        };
        let mut best = f64::INFINITY;
        let mut since_best = 0;
        for step in 0..cfg.steps {
            let seeds: Vec<u64> = (0..cfg.batch_size).map(|_| master.gen()).collect();
            let shared: &M = model;
            let results = parallel::map_indexed(cfg.batch_size, |b| {
                sample(shared, &mut ChaCha8Rng::seed_from_u64(seeds[b]))
            });
            let mut loss = 0.0;
            let mut grads: Option<Vec<Tensor>> = None;
            for r in results {
                let (l, g) = r?;
                loss += l;
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, g)| a.add_assign(g)),
                }
            }
            let scale = 1.0 / cfg.batch_size as f64;
            loss *= scale;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            let mut grads = grads.expect("batch_size >= 1");
            for g in grads.iter_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            clip_global_norm(&mut grads, cfg.max_grad_norm);
            let lr = lr_at(step as u64 + 1, cfg.warmup as u64, cfg.peak_lr, cfg.steps as u64)?;
            opt.step(model.params_mut(), &grads, lr)?;
            report.losses.push(loss);
            report.lrs.push(lr);
            if let Some((w, path)) = metrics.as_mut() {
                let line = serde_json::to_string(&StepMetrics { step, loss, lr }).expect("metrics serialize");
                writeln!(w, "{line}").map_err(io_err(path))?;
            }
            if (step + 1) % 100 == 0 {
                info!("{} step {}/{} loss {loss:.4} lr {lr:.2e}", self.kind, step + 1, cfg.steps);
            }
            if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &cfg.out_dir) {
                if every > 0 && (step + 1) % every == 0 && step + 1 < cfg.steps {
                    write_checkpoint(model, &dir.join(format!("{}-step{}.ckpt", self.kind, step + 1)))?;
                }
            }
            if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps {
                let val = validate(model)?;
                report.validation.push(ValPoint { step: step + 1, loss: val });
                info!("{} step {} validation loss {val:.4}", self.kind, step + 1);
                if val < best {
                    best = val;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if cfg.patience.is_some_and(|p| since_best >= p) {
                        report.stopped_at = Some(step + 1);
                        break;
                    }
                }
            }
        }
        if let Some((mut w, path)) = metrics {
            w.flush().map_err(io_err(&path))?;
        }
        let val = validate(model)?;
        report.validation.push(ValPoint {
            step: report.losses.len(),
            loss: val,
        });
        report.final_val_loss = Some(val);
        if let Some(dir) = &cfg.out_dir {
            let path = dir.join(format!("{}.ckpt", self.kind));
            write_checkpoint(model, &path)?;
            report.checkpoint_path = Some(path);
        }
        Ok(report)
    }
}

pub fn write_checkpoint<M: Network>(model: &M, path: &Path) -> Result<(), TrainError> {
    fs::write(path, model.save()).map_err(io_err(path))
}

pub fn read_checkpoint<M: Network>(path: &Path) -> Result<M, TrainError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(M::load(&bytes)?)
}

fn gradients(g: &mut Graph, loss: crate::tensor::Var, store: &crate::tensor::ParamStore) -> SampleResult {
    let value = g.value(loss).item();
    let grads = g.backward(loss)?.into_param_grads(store);
    Ok((value, grads))
}

/// Validation examples are drawn from a stream independent of training.
fn val_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7a1d);
    (0..n).map(|_| rng.gen()).collect()
}

/// Token-weighted masked-position NLL of the inpainter on `val`.
pub fn inpainter_val_nll(model: &Inpainter, val: &[TokenSeq], config: &TrainConfig) -> Result<f64, TrainError> {
    let per = parallel::map_slice(&val_seeds(config.seed, config.val_instances), |&s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let ex = draw_example(val, config.window_len, false, &mut rng)?;
        let mut g = Graph::inference();
        let loss = inpainter_loss(&mut g, model, &ex, &mut rng)?;
        Ok::<_, TrainError>((g.value(loss).item() * ex.m_s.count() as f64, ex.m_s.count()))
    });
    weighted_mean(per)
}

fn weighted_mean(per: Vec<Result<(f64, usize), TrainError>>) -> Result<f64, TrainError> {
    let (mut sum, mut count) = (0.0, 0);
    for r in per {
        let (s, c) = r?;
        sum += s;
        count += c;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Algorithm 1: masked inpainting with cosine-scheduled subset ratios.
pub fn train_inpainter(
    model: &mut Inpainter,
    train: &[TokenSeq],
    val: &[TokenSeq],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let val = if val.is_empty() { train } else { val };
    Loop {
        kind: Inpainter::KIND,
        config,
    }
    .run(
        model,
        |m, rng| {
            let ex = draw_example(train, config.window_len, config.augment, rng)?;
            let mut g = Graph::new();
            let loss = inpainter_loss(&mut g, m, &ex, rng)?;
            gradients(&mut g, loss, m.params())
        },
        |m| inpainter_val_nll(m, val, config),
    )
}

/// A feedback example: the inpainter's fill of a masked window plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackExample {
    pub example: MaskedExample,
    pub generated: TokenSeq,
    pub labels: Vec<f64>,
}

pub fn draw_feedback_example<R: Rng + ?Sized>(
    corpus: &[TokenSeq],
    inpainter: &Inpainter,
    config: &TrainConfig,
    augment: bool,
    rng: &mut R,
) -> Result<FeedbackExample, TrainError> {
    let example = draw_example(corpus, config.window_len, augment, rng)?;
    let generated = sample_fill(
        &example.masked_input(),
        &example.m_s,
        inpainter,
        config.sample_temperature,
        1.0,
        rng,
    )?;
    let labels = feedback_labels(&example.m_s, &example.window, &generated, config.relabel_on_match);
    Ok(FeedbackExample {
        example,
        generated,
        labels,
    })
}

/// Fragment-restricted BCE of the critic.
pub fn feedback_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Feedback,
    ex: &FeedbackExample,
    rng: &mut R,
) -> Result<crate::tensor::Var, TrainError> {
    let logits = model.forward(g, &ex.generated.ids(), ex.example.m_u.bits(), rng)?;
    Ok(g.bce_with_logits(logits, &ex.labels, ex.example.m_u.bits())?)
}

/// Algorithm 2: the critic learns to tell regenerated tokens from kept ones.
/// The inpainter is only read.
pub fn train_feedback(
    model: &mut Feedback,
    inpainter: &Inpainter,
    train: &[TokenSeq],
    val: &[TokenSeq],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let val = if val.is_empty() { train } else { val };
    Loop {
        kind: Feedback::KIND,
        config,
    }
    .run(
        model,
        |m, rng| {
            let ex = draw_feedback_example(train, inpainter, config, config.augment, rng)?;
            let mut g = Graph::new();
            let loss = feedback_loss(&mut g, m, &ex, rng)?;
            gradients(&mut g, loss, m.params())
        },
        |m| {
            let per = parallel::map_slice(&val_seeds(config.seed, config.val_instances), |&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let ex = draw_feedback_example(val, inpainter, config, false, &mut rng)?;
                let mut g = Graph::inference();
                let loss = feedback_loss(&mut g, m, &ex, &mut rng)?;
                let n = ex.example.m_u.count();
                Ok::<_, TrainError>((g.value(loss).item() * n as f64, n))
            });
            weighted_mean(per)
        },
    )
}

/// Next-token NLL of the evaluator over one window, Pad targets excluded.
pub fn evaluator_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Evaluator,
    window: &TokenSeq,
    rng: &mut R,
) -> Result<(crate::tensor::Var, usize), TrainError> {
    let ids = window.ids();
    let (targets, select) = next_token_targets(&ids);
    let logits = model.forward(g, &ids, rng)?;
    let n = select.iter().filter(|&&s| s).count();
    Ok((g.cross_entropy(logits, &targets, &select)?, n))
}

/// Plain next-token language modelling over whole windows.
pub fn train_evaluator(
    model: &mut Evaluator,
    train: &[TokenSeq],
    val: &[TokenSeq],
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    let val = if val.is_empty() { train } else { val };
    Loop {
        kind: Evaluator::KIND,
        config,
    }
    .run(
        model,
        |m, rng| {
            let window = draw_window(train, config.window_len, config.augment, rng)?;
            let mut g = Graph::new();
            let (loss, _) = evaluator_loss(&mut g, m, &window, rng)?;
            gradients(&mut g, loss, m.params())
        },
        |m| {
            let per = parallel::map_slice(&val_seeds(config.seed, config.val_instances), |&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let window = draw_window(val, config.window_len, false, &mut rng)?;
                let mut g = Graph::inference();
                let (loss, n) = evaluator_loss(&mut g, m, &window, &mut rng)?;
                Ok::<_, TrainError>((g.value(loss).item() * n as f64, n))
            });
            weighted_mean(per)
        },
    )
}

/// Trailing moving average of `window` values ending at each index.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, &v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
