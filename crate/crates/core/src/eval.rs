//! Desk-scale evaluation protocols: the masking-ratio sweep, critic ROC-AUC
//! and the single-pass versus iterative comparison.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::random_subset_mask;
use crate::engine::{refinpaint, EngineConfig, EngineError};
use crate::models::{Evaluator, Feedback, Inpainter, ModelError};
use crate::parallel;
use crate::remi::{Token, TokenSeq};
use crate::tensor::{kernels, Graph, Tensor};
use crate::train::{content_len, draw_feedback_example, draw_fragment, draw_window, inpainter_loss, MaskedExample, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("the test set is empty")]
    EmptyTestSet,
    #[error("sequence contains a Mask token at {0}")]
    MaskTokenPresent(usize),
    #[error("sequence needs at least two tokens")]
    TooShort,
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Reference numbers from the original large-scale experiments. Desk-scale
/// runs reproduce directions, not these magnitudes.
pub mod reference {
    /// (masking ratio, NLL)
    pub const MASKING_NLL: [(f64, f64); 8] = [
        (0.05, 0.56),
        (0.10, 0.58),
        (0.15, 0.58),
        (0.20, 0.58),
        (0.40, 0.64),
        (0.60, 0.70),
        (0.80, 0.77),
        (1.00, 0.86),
    ];
    /// (fragment %, baseline GFS, iterative GFS, baseline wins, iterative wins, ties)
    pub const GFS: [(u32, f64, f64, u32, u32, u32); 3] = [
        (50, 0.458, 0.696, 0, 870, 130),
        (30, 0.515, 0.730, 0, 886, 114),
        (10, 0.650, 0.803, 0, 891, 209),
    ];
    /// (fragment %, baseline NLL, iterative NLL, baseline wins, iterative wins, ties)
    pub const NLL: [(u32, f64, f64, u32, u32, u32); 3] = [
        (50, 2.01, 1.97, 330, 541, 129),
        (30, 1.68, 1.66, 347, 533, 120),
        (10, 1.63, 1.62, 321, 457, 222),
    ];
}

/// Mean next-token NLL over positions `1..L` given row-aligned logits.
pub fn nll_from_logits(logits: &Tensor, ids: &[u32]) -> Result<f64, EvalError> {
    if ids.len() < 2 {
        return Err(EvalError::TooShort);
    }
    let total: f64 = (1..ids.len())
        .map(|i| {
            let row = logits.row(i - 1);
            kernels::log_sum_exp(row) - row[ids[i] as usize]
        })
        .sum();
    Ok(total / (ids.len() - 1) as f64)
}

/// Evaluator NLL over the whole sequence.
pub fn nll_of_sequence(evaluator: &Evaluator, seq: &TokenSeq) -> Result<f64, EvalError> {
    if let Some(i) = seq.tokens.iter().position(|&t| t == Token::Mask) {
        return Err(EvalError::MaskTokenPresent(i));
    }
    if seq.len() < 2 {
        return Err(EvalError::TooShort);
    }
    let ids = seq.ids();
    nll_from_logits(&evaluator.logits(&ids)?, &ids)
}

fn unpadded(seq: &TokenSeq) -> TokenSeq {
    TokenSeq::new(seq.tokens[..content_len(seq)].to_vec())
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    pearson(&ranks(xs), &ranks(ys))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Probability that a random positive outscores a random negative, ties
/// counted half.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let r = ranks(scores);
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let rank_sum: f64 = r.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-instance seeds drawn from one stream.
fn instance_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    pub fragment_pct: f64,
    pub window_len: usize,
    pub n_instances: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
            fragment_pct: 0.30,
            window_len: 128,
            n_instances: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub masking_ratio: f64,
    /// Token-weighted mean over all masked positions.
    pub mean_nll: f64,
    /// exp of the mean per-token NLL.
    pub perplexity: f64,
    /// Spread of the per-instance means.
    pub std: f64,
    pub instances: usize,
}

/// Teacher-forced masked-position NLL for each masking ratio. Every ratio
/// sees the same windows and fragments.
pub fn masking_ratio_sweep(inpainter: &Inpainter, test_set: &[TokenSeq], config: &SweepConfig) -> Result<Vec<SweepRow>, EvalError> {
    if test_set.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if config.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
        return Err(EvalError::InvalidConfig("ratios must lie in (0, 1]".into()));
    }
    if !(config.fragment_pct > 0.0 && config.fragment_pct <= 1.0) || config.n_instances == 0 {
        return Err(EvalError::InvalidConfig("need fragment_pct in (0, 1] and n_instances >= 1".into()));
    }
    let seeds = instance_seeds(config.seed, config.n_instances);
    let per_instance: Vec<Result<Vec<(f64, usize)>, EvalError>> = parallel::map_slice(&seeds, |&s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let window = draw_window(test_set, config.window_len, false, &mut rng)?;
        let m_u = draw_fragment(&window, config.fragment_pct, &mut rng)?;
        config
            .ratios
            .iter()
            .map(|&ratio| {
                let mut m_s = random_subset_mask(&m_u, ratio, &mut rng).map_err(TrainError::from)?;
                if m_s.count() == 0 {
                    m_s.set(m_u.positions()[0], true);
                }
                let ex = MaskedExample {
                    window: window.clone(),
                    m_u: m_u.clone(),
                    m_s,
                };
                let mut g = Graph::inference();
                let loss = inpainter_loss(&mut g, inpainter, &ex, &mut rng)?;
                Ok((g.value(loss).item(), ex.m_s.count()))
            })
            .collect()
    });
    let per_instance = per_instance.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(config
        .ratios
        .iter()
        .enumerate()
        .map(|(k, &ratio)| {
            let values: Vec<f64> = per_instance.iter().map(|v| v[k].0).collect();
            let (_, std) = mean_std(&values);
            let tokens: usize = per_instance.iter().map(|v| v[k].1).sum();
            let mean = per_instance.iter().map(|v| v[k].0 * v[k].1 as f64).sum::<f64>() / tokens as f64;
            SweepRow {
                masking_ratio: ratio,
                mean_nll: mean,
                perplexity: mean.exp(),
                std,
                instances: values.len(),
            }
        })
        .collect())
}

pub fn sweep_spearman(rows: &[SweepRow]) -> f64 {
    let r: Vec<f64> = rows.iter().map(|r| r.masking_ratio).collect();
    let n: Vec<f64> = rows.iter().map(|r| r.mean_nll).collect();
    spearman(&r, &n)
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut s = String::from("masking ratio    NLL    PPL    std   | reference NLL\n");
    for r in rows {
        let reference = reference::MASKING_NLL
            .iter()
            .find(|(ratio, _)| (ratio - r.masking_ratio).abs() < 1e-9)
            .map_or("-".to_string(), |(_, nll)| format!("{nll:.2}"));
        let _ = writeln!(
            s,
            "{:>13.2} {:>6.3} {:>6.3} {:>6.3}   | {reference}",
            r.masking_ratio, r.mean_nll, r.perplexity, r.std
        );
    }
    s.push_str("Reference values come from a 512-token, paper-scale model and are not targets.\n");
    s
}

/// Token-level ROC-AUC of the critic on held-out training-style examples,
/// with Real as the positive class.
pub fn feedback_auc(
    inpainter: &Inpainter,
    feedback: &Feedback,
    test_set: &[TokenSeq],
    config: &TrainConfig,
    n_instances: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    if test_set.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let seeds = instance_seeds(seed, n_instances);
    let per: Vec<Result<(Vec<f64>, Vec<bool>), EvalError>> = parallel::map_slice(&seeds, |&s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let ex = draw_feedback_example(test_set, inpainter, config, false, &mut rng)?;
        let probs = feedback.probabilities(&ex.generated.ids(), ex.example.m_u.bits())?;
        let positions = ex.example.m_u.positions();
        Ok((
            positions.iter().map(|&p| probs[p]).collect(),
            positions.iter().map(|&p| ex.labels[p] == 1.0).collect(),
        ))
    });
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for r in per {
        let (s, l) = r?;
        scores.extend(s);
        labels.extend(l);
    }
    roc_auc(&scores, &labels).ok_or_else(|| EvalError::InvalidConfig("AUC needs both classes".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    pub fragment_pcts: Vec<f64>,
    pub n_instances: usize,
    pub iterations: usize,
    pub baseline_iterations: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub window_len: usize,
    pub seed: u64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            fragment_pcts: vec![0.5, 0.3, 0.1],
            n_instances: 100,
            iterations: 10,
            baseline_iterations: 1,
            temperature: 1.0,
            top_p: 1.0,
            window_len: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Gfs,
    Nll,
}

impl Metric {
    pub fn tie_tolerance(self) -> f64 {
        match self {
            Metric::Gfs => 1e-9,
            Metric::Nll => 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub fragment_pct: f64,
    pub metric: Metric,
    pub baseline_mean: f64,
    pub ours_mean: f64,
    pub wins_baseline: usize,
    pub wins_ours: usize,
    pub ties: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub fragment_pct: f64,
    pub instance: usize,
    pub fragment_len: usize,
    pub baseline_gfs: f64,
    pub ours_gfs: f64,
    pub iteration0_gfs: f64,
    pub selected_index: usize,
    pub baseline_nll: f64,
    pub ours_nll: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config: CompareConfig,
    pub rows: Vec<ComparisonRow>,
    pub per_instance: Vec<InstanceResult>,
}

impl CompareReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Outcome of one comparison: +1 ours wins, -1 baseline wins, 0 tie.
pub fn compare_outcome(metric: Metric, baseline: f64, ours: f64) -> i8 {
    let tol = metric.tie_tolerance();
    let (better_ours, better_base) = match metric {
        Metric::Gfs => (ours > baseline + tol, baseline > ours + tol),
        Metric::Nll => (ours < baseline - tol, baseline < ours - tol),
    };
    if better_ours {
        1
    } else if better_base {
        -1
    } else {
        0
    }
}

/// Single-pass inpainting against the full iterative loop. Both arms share
/// each instance's window, fragment and sampling seed.
pub fn compare_single_pass_vs_refinpaint(
    inpainter: &Inpainter,
    feedback: &Feedback,
    evaluator: &Evaluator,
    test_set: &[TokenSeq],
    config: &CompareConfig,
) -> Result<CompareReport, EvalError> {
    if test_set.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if config.n_instances == 0 {
        return Err(EvalError::InvalidConfig("n_instances must be at least 1".into()));
    }
    let mut per_instance = Vec::new();
    let mut rows = Vec::new();
    for (k, &pct) in config.fragment_pcts.iter().enumerate() {
        let seeds = instance_seeds(config.seed.wrapping_add(k as u64), config.n_instances);
        let results: Vec<Result<InstanceResult, EvalError>> = parallel::map_indexed(seeds.len(), |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
            let window = draw_window(test_set, config.window_len, false, &mut rng)?;
            let m_u = draw_fragment(&window, pct, &mut rng)?;
            let engine_seed: u64 = rng.gen();
            let arm = |iterations: usize| {
                let cfg = EngineConfig {
                    iterations,
                    temperature: config.temperature,
                    top_p: config.top_p,
                    seed: engine_seed,
                    ..EngineConfig::default()
                };
                refinpaint(&window, &m_u, inpainter, feedback, &cfg, None)
            };
            let base = arm(config.baseline_iterations)?;
            let ours = arm(config.iterations)?;
            let b = base.selected_record();
            let o = ours.selected_record();
            Ok(InstanceResult {
                fragment_pct: pct,
                instance: i,
                fragment_len: m_u.count(),
                baseline_gfs: b.gfs,
                ours_gfs: o.gfs,
                iteration0_gfs: ours.records[0].gfs,
                selected_index: ours.selected,
                baseline_nll: nll_of_sequence(evaluator, &unpadded(&b.tokens))?,
                ours_nll: nll_of_sequence(evaluator, &unpadded(&o.tokens))?,
            })
        });
        let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        for metric in [Metric::Gfs, Metric::Nll] {
            let pairs: Vec<(f64, f64)> = results
                .iter()
                .map(|r| match metric {
                    Metric::Gfs => (r.baseline_gfs, r.ours_gfs),
                    Metric::Nll => (r.baseline_nll, r.ours_nll),
                })
                .collect();
            let mut row = ComparisonRow {
                fragment_pct: pct,
                metric,
                baseline_mean: pairs.iter().map(|p| p.0).sum::<f64>() / pairs.len() as f64,
                ours_mean: pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64,
                wins_baseline: 0,
                wins_ours: 0,
                ties: 0,
            };
            for &(b, o) in &pairs {
                match compare_outcome(metric, b, o) {
                    1 => row.wins_ours += 1,
                    -1 => row.wins_baseline += 1,
                    _ => row.ties += 1,
                }
            }
            rows.push(row);
        }
        per_instance.extend(results);
    }
    Ok(CompareReport {
        config: config.clone(),
        rows,
        per_instance,
    })
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    for metric in [Metric::Gfs, Metric::Nll] {
        let (name, refs) = match metric {
            Metric::Gfs => ("GFS (higher is better)", &reference::GFS),
            Metric::Nll => ("NLL (lower is better)", &reference::NLL),
        };
        let _ = writeln!(s, "{name}");
        let _ = writeln!(s, "fragment  baseline    ours  | wins baseline  wins ours  ties | reference");
        for r in rows.iter().filter(|r| r.metric == metric) {
            let pct = (r.fragment_pct * 100.0).round() as u32;
            let reference = refs
                .iter()
                .find(|row| row.0 == pct)
                .map_or("-".to_string(), |row| {
                    format!("{:.3} vs {:.3}, {}/{}/{}", row.1, row.2, row.3, row.4, row.5)
                });
            let _ = writeln!(
                s,
                "{:>7}%  {:>8.4} {:>7.4}  | {:>13} {:>10} {:>5} | {reference}",
                pct, r.baseline_mean, r.ours_mean, r.wins_baseline, r.wins_ours, r.ties
            );
        }
    }
    s.push_str("Reference values come from paper-scale models and are not targets.\n");
    s
}
