//! Iterative generate, critique and re-mask loop.
//!
//! Iteration 0 regenerates the whole fragment. After each pass the feedback
//! model scores every fragment token, and the `⌈γ((i+1)/T)·N⌉` least
//! realistic ones are regenerated in the next pass. The output with the
//! highest global feedback score (GFS) is selected.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{gamma, MaskRole, MaskVec};
use crate::models::{Feedback, Inpainter, ModelError, Network};
use crate::remi::{Token, TokenSeq, BOS_ID, MASK_ID};
use crate::tensor::kernels;

/// Temperatures at or below this sample by argmax.
pub const ARGMAX_TEMPERATURE: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("position {0}: the Mask token and the regenerate mask disagree")]
    MaskMismatch(usize),
    #[error("{name} = {value} outside {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("the fragment is empty")]
    EmptyFragment,
    #[error("edit position {0} is outside the fragment")]
    PositionOutsideFragment(usize),
    #[error("invalid edit: {0}")]
    InvalidEdit(String),
    #[error("models were built for different vocabularies")]
    VocabMismatch,
    #[error("cancelled by the iteration callback")]
    CallbackAbort,
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn domain(name: &'static str, value: f64, domain: &'static str) -> EngineError {
    EngineError::Domain { name, value, domain }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Number of iterations T.
    pub iterations: usize,
    pub temperature: f64,
    pub top_p: f64,
    /// Fixed number of fragment tokens to keep, overriding the schedule.
    pub keep_override: Option<usize>,
    pub seed: u64,
    /// Scale of annealed uniform noise added to scores before re-mask
    /// selection; 0 disables it.
    pub selection_noise: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            iterations: 10,
            temperature: 1.0,
            top_p: 1.0,
            keep_override: None,
            seed: 0,
            selection_noise: 0.0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.iterations == 0 {
            return Err(domain("iterations", 0.0, ">= 1"));
        }
        check_sampling(self.temperature, self.top_p)?;
        if !(self.selection_noise >= 0.0) {
            return Err(domain("selection_noise", self.selection_noise, ">= 0"));
        }
        Ok(())
    }
}

fn check_sampling(temperature: f64, top_p: f64) -> Result<(), EngineError> {
    if !(temperature > 0.0) {
        return Err(domain("temperature", temperature, "> 0"));
    }
    if !(top_p > 0.0 && top_p <= 1.0) {
        return Err(domain("top_p", top_p, "(0, 1]"));
    }
    Ok(())
}

/// P(Real) per position, present exactly on fragment positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub probs: Vec<Option<f64>>,
}

impl Heatmap {
    pub fn from_probs(probs: &[f64], m_u: &MaskVec) -> Self {
        Self {
            probs: probs
                .iter()
                .zip(m_u.bits())
                .map(|(&p, &inside)| inside.then_some(p))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        self.probs.get(i).copied().flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Edit {
    ForceKeep { pos: usize },
    ForceRegenerate { pos: usize },
    ReplaceToken { pos: usize, token: Token },
    SetKeepCount { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: usize,
    /// The generated sequence x̂ of this iteration.
    pub tokens: TokenSeq,
    /// Positions regenerated to produce `tokens`.
    pub regenerated: MaskVec,
    pub heatmap: Heatmap,
    pub gfs: f64,
    /// Fragment positions kept going into the next iteration.
    pub mask_next: MaskVec,
    /// Size of the next regenerate set.
    pub regen_count: usize,
    pub human_edits: Vec<Edit>,
}

/// Regenerated count entering iteration `i + 1`: `⌈γ((i+1)/T)·N⌉`.
pub fn schedule_masked_count(i: usize, t: usize, n: usize) -> Result<usize, EngineError> {
    if t == 0 {
        return Err(domain("T", 0.0, ">= 1"));
    }
    if i >= t {
        return Err(domain("i", i as f64, "[0, T)"));
    }
    let g = gamma((i + 1) as f64 / t as f64).expect("argument in [0, 1]");
    // The small offset keeps products like cos(π/3)·N = 50.000000000000007
    // from rounding up past the exact value.
    Ok(((g * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n))
}

/// Mean P(Real) over the fragment.
pub fn gfs(heatmap: &Heatmap, m_u: &MaskVec) -> Result<f64, EngineError> {
    if m_u.count() == 0 {
        return Err(EngineError::EmptyFragment);
    }
    if heatmap.len() != m_u.len() {
        return Err(EngineError::LengthMismatch {
            expected: m_u.len(),
            found: heatmap.len(),
        });
    }
    let mut sum = 0.0;
    for i in m_u.positions() {
        sum += heatmap.get(i).ok_or(EngineError::LengthMismatch {
            expected: m_u.len(),
            found: i,
        })?;
    }
    Ok(sum / m_u.count() as f64)
}

/// Keep and regenerate sets of one re-mask step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CreatedMask {
    pub keep: MaskVec,
    pub regenerate: MaskVec,
}

/// Marks the `regen_count` fragment positions with the lowest P(Real) for
/// regeneration; ties go to the lower position.
pub fn create_mask(heatmap: &Heatmap, regen_count: usize) -> Result<CreatedMask, EngineError> {
    let scores: Vec<(usize, f64)> = heatmap
        .probs
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i, p)))
        .collect();
    select_lowest(heatmap.len(), &scores, regen_count)
}

fn select_lowest(len: usize, scores: &[(usize, f64)], regen_count: usize) -> Result<CreatedMask, EngineError> {
    if regen_count > scores.len() {
        return Err(domain("regen_count", regen_count as f64, "[0, |M_u|]"));
    }
    let mut order = scores.to_vec();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut regenerate = MaskVec::empty(len, MaskRole::Regenerate);
    let mut keep = MaskVec::empty(len, MaskRole::Keep);
    for (rank, &(i, _)) in order.iter().enumerate() {
        if rank < regen_count {
            regenerate.set(i, true);
        } else {
            keep.set(i, true);
        }
    }
    Ok(CreatedMask { keep, regenerate })
}

/// Input of the next iteration after edits.
#[derive(Debug, Clone, PartialEq)]
pub struct NextInput {
    pub tokens: TokenSeq,
    pub keep: MaskVec,
    pub regenerate: MaskVec,
    pub regen_count: usize,
}

/// Applies `edits` in order (last wins per position) on top of the scheduled
/// re-mask of `record`.
pub fn apply_edits(
    record: &IterationRecord,
    m_u: &MaskVec,
    scheduled_count: usize,
    edits: &[Edit],
) -> Result<NextInput, EngineError> {
    next_input(&record.tokens, &record.heatmap, m_u, scheduled_count, edits, &[])
}

fn next_input(
    tokens: &TokenSeq,
    heatmap: &Heatmap,
    m_u: &MaskVec,
    scheduled_count: usize,
    edits: &[Edit],
    noise: &[f64],
) -> Result<NextInput, EngineError> {
    let n = m_u.count();
    let mut tokens = tokens.clone();
    let mut count = scheduled_count.min(n);
    let mut forced: BTreeMap<usize, bool> = BTreeMap::new();
    let check = |pos: usize| {
        if pos < m_u.len() && m_u.get(pos) {
            Ok(())
        } else {
            Err(EngineError::PositionOutsideFragment(pos))
        }
    };
    for edit in edits {
        match *edit {
            Edit::ForceKeep { pos } => {
                check(pos)?;
                forced.insert(pos, false);
            }
            Edit::ForceRegenerate { pos } => {
                check(pos)?;
                forced.insert(pos, true);
            }
            Edit::ReplaceToken { pos, token } => {
                check(pos)?;
                if !token.is_valid() || token.is_special() {
                    return Err(EngineError::InvalidEdit(format!("cannot place {token}")));
                }
                tokens.tokens[pos] = token;
                forced.insert(pos, false);
            }
            Edit::SetKeepCount { k } => {
                if k > n {
                    return Err(EngineError::InvalidEdit(format!("keep count {k} exceeds fragment size {n}")));
                }
                count = n - k;
            }
        }
    }
    let forced_regen = forced.values().filter(|&&r| r).count();
    let free: Vec<(usize, f64)> = m_u
        .positions()
        .into_iter()
        .filter(|p| !forced.contains_key(p))
        .map(|p| (p, heatmap.get(p).unwrap_or(0.0) + noise.get(p).copied().unwrap_or(0.0)))
        .collect();
    let need = count.saturating_sub(forced_regen).min(free.len());
    let CreatedMask { mut keep, mut regenerate } = select_lowest(m_u.len(), &free, need)?;
    for (&p, &regen) in &forced {
        regenerate.set(p, regen);
        keep.set(p, !regen);
    }
    let regen_count = regenerate.count();
    Ok(NextInput {
        tokens,
        keep,
        regenerate,
        regen_count,
    })
}

/// Replaces every regenerate position with the Mask token.
pub fn mask_tokens(tokens: &TokenSeq, regenerate: &MaskVec) -> TokenSeq {
    TokenSeq::new(
        tokens
            .tokens
            .iter()
            .zip(regenerate.bits())
            .map(|(&t, &m)| if m { Token::Mask } else { t })
            .collect(),
    )
}

/// One left-to-right decoder pass: known tokens are teacher-forced, masked
/// positions are sampled.
pub fn sample_fill<R: Rng + ?Sized>(
    x_masked: &TokenSeq,
    m: &MaskVec,
    inpainter: &Inpainter,
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<TokenSeq, EngineError> {
    check_sampling(temperature, top_p)?;
    if x_masked.len() != m.len() {
        return Err(EngineError::LengthMismatch {
            expected: x_masked.len(),
            found: m.len(),
        });
    }
    let ids = x_masked.ids();
    if let Some(i) = (0..ids.len()).find(|&i| (ids[i] == MASK_ID) != m.get(i)) {
        return Err(EngineError::MaskMismatch(i));
    }
    let Some(last) = (0..ids.len()).rev().find(|&i| m.get(i)) else {
        return Ok(x_masked.clone());
    };
    let mut out = x_masked.tokens.clone();
    let mut dec = inpainter.begin_decode(&ids, m.bits())?;
    let mut prev = BOS_ID;
    for i in 0..=last {
        let logits = dec.step(prev)?;
        if m.get(i) {
            out[i] = Token::from_id(sample_token(&logits, temperature, top_p, rng)).expect("id in vocabulary");
        }
        prev = out[i].id();
    }
    Ok(TokenSeq::new(out))
}

/// Draws a non-special token id from temperature and nucleus filtered logits.
pub fn sample_token<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_p: f64, rng: &mut R) -> u32 {
    let candidates = (0..logits.len() as u32).filter(|&id| !Token::from_id(id).is_some_and(Token::is_special));
    if temperature <= ARGMAX_TEMPERATURE {
        return candidates
            .max_by(|&a, &b| logits[a as usize].total_cmp(&logits[b as usize]).then(b.cmp(&a)))
            .expect("vocabulary has regular tokens");
    }
    let mut ranked: Vec<(u32, f64)> = candidates.map(|id| (id, logits[id as usize] / temperature)).collect();
    let mut scaled: Vec<f64> = ranked.iter().map(|&(_, l)| l).collect();
    kernels::softmax_row(&mut scaled, None);
    for (r, p) in ranked.iter_mut().zip(scaled) {
        r.1 = p;
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut cut = ranked.len();
    for (i, &(_, p)) in ranked.iter().enumerate() {
        cum += p;
        if cum >= top_p {
            cut = i + 1;
            break;
        }
    }
    let kept = &ranked[..cut];
    let total: f64 = kept.iter().map(|&(_, p)| p).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(id, p) in kept {
        if u < p {
            return id;
        }
        u -= p;
    }
    kept[kept.len() - 1].0
}

/// Generates with `regenerate` masked, then scores the result.
#[allow(clippy::too_many_arguments)]
pub fn run_iteration<R: Rng + ?Sized>(
    index: usize,
    tokens: &TokenSeq,
    regenerate: &MaskVec,
    m_u: &MaskVec,
    inpainter: &Inpainter,
    feedback: &Feedback,
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<IterationRecord, EngineError> {
    if !regenerate.is_subset_of(m_u) {
        return Err(EngineError::InvalidEdit("regenerate set leaves the fragment".into()));
    }
    let x_masked = mask_tokens(tokens, regenerate);
    let x_hat = sample_fill(&x_masked, regenerate, inpainter, temperature, top_p, rng)?;
    let probs = feedback.probabilities(&x_hat.ids(), m_u.bits())?;
    let heatmap = Heatmap::from_probs(&probs, m_u);
    let score = gfs(&heatmap, m_u)?;
    Ok(IterationRecord {
        index,
        tokens: x_hat,
        regenerated: regenerate.clone().with_role(MaskRole::Regenerate),
        heatmap,
        gfs: score,
        mask_next: MaskVec::empty(m_u.len(), MaskRole::Keep),
        regen_count: 0,
        human_edits: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinpaintOutput {
    pub records: Vec<IterationRecord>,
    pub selected: usize,
}

impl RefinpaintOutput {
    pub fn selected_record(&self) -> &IterationRecord {
        &self.records[self.selected]
    }
}

/// Index of the highest GFS; ties go to the later iteration.
pub fn select_best(records: &[IterationRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if best.is_none_or(|b| r.gfs >= records[b].gfs) {
            best = Some(i);
        }
    }
    best
}

/// Edits returned by the callback, or `Err(())` to cancel the run.
pub type IterationCallback<'a> = dyn FnMut(&IterationRecord) -> Result<Vec<Edit>, ()> + 'a;

/// The full refinement loop over fragment `m_u` of `x`.
pub fn refinpaint(
    x: &TokenSeq,
    m_u: &MaskVec,
    inpainter: &Inpainter,
    feedback: &Feedback,
    config: &EngineConfig,
    mut on_iteration: Option<&mut IterationCallback<'_>>,
) -> Result<RefinpaintOutput, EngineError> {
    config.validate()?;
    if x.len() != m_u.len() {
        return Err(EngineError::LengthMismatch {
            expected: x.len(),
            found: m_u.len(),
        });
    }
    if m_u.count() == 0 {
        return Err(EngineError::EmptyFragment);
    }
    if inpainter.config().vocab_size != feedback.config().vocab_size {
        return Err(EngineError::VocabMismatch);
    }
    let n = m_u.count();
    let t = config.iterations;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tokens = x.clone();
    let mut regenerate = m_u.clone().with_role(MaskRole::Regenerate);
    let mut records = Vec::with_capacity(t);
    for i in 0..t {
        let mut record = run_iteration(
            i,
            &tokens,
            &regenerate,
            m_u,
            inpainter,
            feedback,
            config.temperature,
            config.top_p,
            &mut rng,
        )?;
        let edits = match on_iteration.as_mut() {
            Some(cb) => cb(&record).map_err(|()| EngineError::CallbackAbort)?,
            None => Vec::new(),
        };
        let scheduled = match config.keep_override {
            Some(k) => n.saturating_sub(k),
            None => schedule_masked_count(i, t, n)?,
        };
        let noise: Vec<f64> = if config.selection_noise > 0.0 {
            let scale = config.selection_noise * (1.0 - (i + 1) as f64 / t as f64);
            (0..x.len()).map(|_| scale * (rng.gen::<f64>() - 0.5)).collect()
        } else {
            Vec::new()
        };
        let next = next_input(&record.tokens, &record.heatmap, m_u, scheduled, &edits, &noise)?;
        record.mask_next = next.keep.clone();
        record.regen_count = next.regen_count;
        record.human_edits = edits;
        tokens = next.tokens;
        regenerate = next.regenerate;
        records.push(record);
    }
    let selected = select_best(&records).expect("at least one iteration");
    Ok(RefinpaintOutput { records, selected })
}

/// Run trace consumed by the evaluation harness and the UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub config: EngineConfig,
    pub fragment: Vec<usize>,
    pub iterations: Vec<TraceIteration>,
    pub selected_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceIteration {
    pub i: usize,
    pub gfs: f64,
    pub regen_count: usize,
    pub tokens: Vec<String>,
    pub heatmap: Vec<Option<f64>>,
}

impl Trace {
    pub fn new(config: &EngineConfig, m_u: &MaskVec, output: &RefinpaintOutput) -> Self {
        Self {
            config: config.clone(),
            fragment: m_u.positions(),
            iterations: output
                .records
                .iter()
                .map(|r| TraceIteration {
                    i: r.index,
                    gfs: r.gfs,
                    regen_count: r.regen_count,
                    tokens: r.tokens.tokens.iter().map(Token::to_string).collect(),
                    heatmap: r.heatmap.probs.clone(),
                })
                .collect(),
            selected_index: output.selected,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heat(values: &[f64]) -> Heatmap {
        Heatmap {
            probs: values.iter().map(|&v| Some(v)).collect(),
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_masked_count(0, 10, 100).unwrap(), 99);
        assert_eq!(schedule_masked_count(4, 10, 100).unwrap(), 71);
        assert_eq!(schedule_masked_count(9, 10, 100).unwrap(), 0);
        assert_eq!(schedule_masked_count(1, 3, 100).unwrap(), 50);
        assert!(schedule_masked_count(10, 10, 100).is_err());
        assert!(schedule_masked_count(0, 0, 100).is_err());
    }

    #[test]
    fn gfs_examples() {
        let m = MaskVec::new(vec![true; 3], MaskRole::Fragment);
        assert_eq!(gfs(&heat(&[1.0, 1.0, 1.0]), &m).unwrap(), 1.0);
        assert!((gfs(&heat(&[0.2, 0.4, 0.6]), &m).unwrap() - 0.4).abs() < 1e-15);
        let empty = MaskVec::empty(3, MaskRole::Fragment);
        assert_eq!(gfs(&heat(&[0.2, 0.4, 0.6]), &empty), Err(EngineError::EmptyFragment));
    }

    #[test]
    fn create_mask_examples() {
        let m = create_mask(&heat(&[0.9, 0.1, 0.5]), 2).unwrap();
        assert_eq!(m.regenerate.positions(), vec![1, 2]);
        assert_eq!(m.keep.positions(), vec![0]);
        let m = create_mask(&heat(&[0.9, 0.1, 0.5]), 0).unwrap();
        assert_eq!(m.keep.count(), 3);
        let m = create_mask(&heat(&[0.5, 0.5]), 1).unwrap();
        assert_eq!(m.regenerate.positions(), vec![0]);
        assert!(create_mask(&heat(&[0.5]), 2).is_err());
    }

    fn record(tokens: Vec<Token>, probs: &[f64]) -> IterationRecord {
        let len = tokens.len();
        IterationRecord {
            index: 0,
            tokens: TokenSeq::new(tokens),
            regenerated: MaskVec::empty(len, MaskRole::Regenerate),
            heatmap: heat(probs),
            gfs: 0.0,
            mask_next: MaskVec::empty(len, MaskRole::Keep),
            regen_count: 0,
            human_edits: vec![],
        }
    }

    #[test]
    fn edits_follow_their_rules() {
        let r = record(vec![Token::Bar, Token::Position(0), Token::Pitch(60), Token::Duration(4)], &[0.1, 0.2, 0.3, 0.4]);
        let m_u = MaskVec::new(vec![true; 4], MaskRole::Fragment);
        let next = apply_edits(&r, &m_u, 2, &[Edit::ForceKeep { pos: 0 }]).unwrap();
        assert_eq!(next.regenerate.positions(), vec![1, 2]);
        let next = apply_edits(
            &r,
            &m_u,
            2,
            &[Edit::ReplaceToken {
                pos: 1,
                token: Token::Pitch(72),
            }],
        )
        .unwrap();
        assert_eq!(next.tokens.tokens[1], Token::Pitch(72));
        assert!(next.keep.get(1) && !next.regenerate.get(1));
        let next = apply_edits(&r, &m_u, 2, &[Edit::SetKeepCount { k: 1 }]).unwrap();
        assert_eq!(next.regen_count, 3);
        let next = apply_edits(&r, &m_u, 2, &[Edit::ForceKeep { pos: 3 }, Edit::ForceRegenerate { pos: 3 }]).unwrap();
        assert!(next.regenerate.get(3));
        let small = MaskVec::from_range(4, 0, 2, MaskRole::Fragment);
        assert_eq!(
            apply_edits(&r, &small, 1, &[Edit::ForceKeep { pos: 3 }]),
            Err(EngineError::PositionOutsideFragment(3))
        );
        assert!(matches!(
            apply_edits(&r, &m_u, 1, &[Edit::ReplaceToken { pos: 0, token: Token::Mask }]),
            Err(EngineError::InvalidEdit(_))
        ));
    }

    #[test]
    fn sampling_skips_special_tokens_and_respects_top_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut logits = vec![0.0; crate::remi::VOCAB_SIZE];
        logits[1] = 100.0;
        logits[50] = 10.0;
        logits[51] = 9.0;
        assert_eq!(sample_token(&logits, 1e-4, 1.0, &mut rng), 50);
        for _ in 0..200 {
            assert_eq!(sample_token(&logits, 1.0, 0.5, &mut rng), 50);
        }
        let ids: std::collections::BTreeSet<u32> = (0..2000).map(|_| sample_token(&logits, 1.0, 1.0, &mut rng)).collect();
        assert!(ids.contains(&51) && !ids.contains(&1));
    }

    #[test]
    fn selection_prefers_later_ties() {
        let mut rs = vec![record(vec![Token::Bar], &[0.5]); 3];
        rs[0].gfs = 0.7;
        rs[1].gfs = 0.2;
        rs[2].gfs = 0.7;
        assert_eq!(select_best(&rs), Some(2));
    }

    #[test]
    fn edits_serialize_with_a_kind_tag() {
        let e = Edit::ReplaceToken {
            pos: 3,
            token: Token::Pitch(72),
        };
        let json = serde_json::to_string(&e).unwrap();
        assert_eq!(json, r#"{"kind":"ReplaceToken","pos":3,"token":{"Pitch":72}}"#);
        assert_eq!(serde_json::from_str::<Edit>(&json).unwrap(), e);
    }
}
