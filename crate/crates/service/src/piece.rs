//! A tokenized piece with a bar-aligned fragment: windowing for the model,
//! note-level views of generated tokens, and export.

use std::collections::BTreeMap;

use refinpaint_core::corpus::{MaskRole, MaskVec};
use refinpaint_core::engine::Heatmap;
use refinpaint_core::midi::{sort_notes, NoteEvent, Score};
use refinpaint_core::remi::{bar_token_range, decode_lossy, Token, TokenSeq, DECODE_PPQ, POSITIONS_PER_BAR, POSITIONS_PER_BEAT};
use serde::{Deserialize, Serialize};

pub const TICKS_PER_BAR: u64 = DECODE_PPQ as u64 * (POSITIONS_PER_BAR / POSITIONS_PER_BEAT) as u64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FragmentError {
    #[error("bars {from}..{to} are not in the piece ({bars} bars)")]
    OutOfRange { from: usize, to: usize, bars: usize },
    #[error("bars {from}..{to} span {tokens} tokens; the model reads at most {max}")]
    TooLong {
        from: usize,
        to: usize,
        tokens: usize,
        max: usize,
    },
}

/// Bars `bar_from..=bar_to` and the model window that contains them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fragment {
    pub bar_from: usize,
    pub bar_to: usize,
    /// Token span `[start, end)` in the full sequence.
    pub token_start: usize,
    pub token_end: usize,
    pub window_start: usize,
    pub window_len: usize,
}

impl Fragment {
    /// Places the fragment in a window of at most `max_len` tokens, centred
    /// when the piece is longer than the window.
    pub fn select(tokens: &[Token], bar_from: usize, bar_to: usize, max_len: usize) -> Result<Fragment, FragmentError> {
        let bars = count_bars(tokens);
        let (start, end) = bar_token_range(tokens, bar_from, bar_to).ok_or(FragmentError::OutOfRange {
            from: bar_from,
            to: bar_to,
            bars,
        })?;
        if end - start > max_len {
            return Err(FragmentError::TooLong {
                from: bar_from,
                to: bar_to,
                tokens: end - start,
                max: max_len,
            });
        }
        let window_len = tokens.len().min(max_len);
        let slack = window_len - (end - start);
        let window_start = start.saturating_sub(slack / 2).min(tokens.len() - window_len);
        Ok(Fragment {
            bar_from,
            bar_to,
            token_start: start,
            token_end: end,
            window_start,
            window_len,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.token_end - self.token_start
    }

    pub fn window(&self, tokens: &TokenSeq) -> TokenSeq {
        TokenSeq::new(tokens.tokens[self.window_start..self.window_start + self.window_len].to_vec())
    }

    /// M_u in window coordinates.
    pub fn mask(&self) -> MaskVec {
        MaskVec::from_range(
            self.window_len,
            self.token_start - self.window_start,
            self.token_end - self.window_start,
            MaskRole::Fragment,
        )
    }

    /// Window coordinate of a full-sequence token index.
    pub fn to_window(&self, index: usize) -> Option<usize> {
        (self.window_start..self.window_start + self.window_len)
            .contains(&index)
            .then(|| index - self.window_start)
    }

    pub fn contains_bar(&self, bar: u64) -> bool {
        (self.bar_from as u64..=self.bar_to as u64).contains(&bar)
    }
}

pub fn count_bars(tokens: &[Token]) -> usize {
    tokens.iter().filter(|t| **t == Token::Bar).count()
}

/// A decoded note and the tokens that spell it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenNote {
    pub note: NoteEvent,
    pub bar: u64,
    pub pitch_index: usize,
    pub duration_index: usize,
}

/// Decodes a fragment's tokens as bars `first_bar..`, skipping broken
/// pairs like the lossy decoder. A leading Bar token opens `first_bar`
/// itself; otherwise the tokens continue inside it.
pub fn fragment_notes(tokens: &[Token], first_bar: u64, offset: usize) -> Vec<TokenNote> {
    let unit = DECODE_PPQ as u64 / POSITIONS_PER_BEAT as u64;
    let (mut bar, mut next_bar) = match tokens.first() {
        Some(Token::Bar) => (None, first_bar),
        _ => (Some(first_bar), first_bar + 1),
    };
    let mut position: Option<u64> = None;
    let mut pending: Option<(u8, usize)> = None;
    let mut out = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        match t {
            Token::Bar => {
                bar = Some(next_bar);
                next_bar += 1;
                position = None;
                pending = None;
            }
            Token::Position(p) if bar.is_some() => {
                position = Some(p as u64);
                pending = None;
            }
            Token::Pitch(n) if position.is_some() => pending = Some((n, offset + i)),
            Token::Duration(d) => {
                if let (Some((pitch, pitch_index)), Some(b), Some(p)) = (pending.take(), bar, position) {
                    let grid = b * POSITIONS_PER_BAR as u64 + p;
                    out.push(TokenNote {
                        note: NoteEvent::new(pitch, grid * unit, d as u64 * unit),
                        bar: b,
                        pitch_index,
                        duration_index: offset + i,
                    });
                }
            }
            _ => pending = None,
        }
    }
    out
}

pub fn bar_of(note: &NoteEvent) -> u64 {
    note.onset / TICKS_PER_BAR
}

/// Quantized input notes whose onset lies outside the fragment's bars.
pub fn context_notes(tokens: &TokenSeq, fragment: &Fragment) -> Vec<NoteEvent> {
    decode_lossy(&tokens.tokens)
        .0
        .notes
        .into_iter()
        .filter(|n| !fragment.contains_bar(bar_of(n)))
        .collect()
}

/// Generated notes of the fragment, clipped to its bars so the context
/// never moves.
pub fn generated_notes(window_tokens: &TokenSeq, fragment: &Fragment) -> Vec<TokenNote> {
    let lo = fragment.token_start - fragment.window_start;
    let hi = fragment.token_end - fragment.window_start;
    fragment_notes(&window_tokens.tokens[lo..hi], fragment.bar_from as u64, fragment.token_start)
        .into_iter()
        .filter(|n| fragment.contains_bar(n.bar))
        .collect()
}

/// The whole piece with the fragment replaced by generated content.
pub fn render_score(tokens: &TokenSeq, fragment: &Fragment, window_tokens: &TokenSeq) -> Score {
    let mut notes = context_notes(tokens, fragment);
    notes.extend(generated_notes(window_tokens, fragment).iter().map(|n| n.note));
    Score::new(DECODE_PPQ, notes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteView {
    pub pitch: u8,
    pub onset: u64,
    pub duration: u64,
    pub bar: u64,
    pub in_fragment: bool,
    /// Full-sequence index of the note's Pitch token (fragment notes only).
    pub pitch_token: Option<usize>,
    pub duration_token: Option<usize>,
    /// Minimum P(Real) of the note's two tokens.
    pub p_real: Option<f64>,
    /// Not present among the previous version's fragment notes.
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenHeat {
    pub token_index: usize,
    pub token: String,
    pub p_real: f64,
    /// Index into the view's notes of the note this token spells.
    pub note: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlainNote {
    pub pitch: u8,
    pub onset: u64,
    pub duration: u64,
}

impl From<NoteEvent> for PlainNote {
    fn from(n: NoteEvent) -> Self {
        Self {
            pitch: n.pitch,
            onset: n.onset,
            duration: n.duration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteDiff {
    pub added: Vec<PlainNote>,
    pub removed: Vec<PlainNote>,
}

/// Multiset difference `a - b`.
fn minus(a: &[NoteEvent], b: &[NoteEvent]) -> Vec<NoteEvent> {
    let mut counts: BTreeMap<NoteEvent, usize> = BTreeMap::new();
    for n in b {
        *counts.entry(*n).or_default() += 1;
    }
    let mut out = Vec::new();
    for n in a {
        match counts.get_mut(n) {
            Some(c) if *c > 0 => *c -= 1,
            _ => out.push(*n),
        }
    }
    sort_notes(&mut out);
    out
}

/// Notes of the whole piece with generated ones annotated, the per-token
/// heatmap of the fragment and the diff against `previous` fragment notes.
pub fn note_views(
    tokens: &TokenSeq,
    fragment: &Fragment,
    window_tokens: &TokenSeq,
    heatmap: &Heatmap,
    previous: &[NoteEvent],
) -> (Vec<NoteView>, Vec<TokenHeat>, NoteDiff) {
    let generated = generated_notes(window_tokens, fragment);
    let heat = |full: usize| heatmap.get(full - fragment.window_start);
    let current: Vec<NoteEvent> = generated.iter().map(|n| n.note).collect();
    let added = minus(&current, previous);
    let mut views: Vec<NoteView> = context_notes(tokens, fragment)
        .into_iter()
        .map(|n| NoteView {
            pitch: n.pitch,
            onset: n.onset,
            duration: n.duration,
            bar: bar_of(&n),
            in_fragment: false,
            pitch_token: None,
            duration_token: None,
            p_real: None,
            changed: false,
        })
        .collect();
    let mut pending_changed = added.clone();
    for n in &generated {
        let changed = match pending_changed.iter().position(|a| a == &n.note) {
            Some(k) => {
                pending_changed.remove(k);
                true
            }
            None => false,
        };
        let p = match (heat(n.pitch_index), heat(n.duration_index)) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        views.push(NoteView {
            pitch: n.note.pitch,
            onset: n.note.onset,
            duration: n.note.duration,
            bar: n.bar,
            in_fragment: true,
            pitch_token: Some(n.pitch_index),
            duration_token: Some(n.duration_index),
            p_real: p,
            changed,
        });
    }
    views.sort_by_key(|v| (v.onset, v.pitch, v.duration, v.in_fragment));
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (k, v) in views.iter().enumerate() {
        if let (Some(p), Some(d)) = (v.pitch_token, v.duration_token) {
            owner.insert(p, k);
            owner.insert(d, k);
        }
    }
    let cells = (fragment.token_start..fragment.token_end)
        .map(|i| TokenHeat {
            token_index: i,
            token: window_tokens.tokens[i - fragment.window_start].to_string(),
            p_real: heat(i).unwrap_or(0.0),
            note: owner.get(&i).copied(),
        })
        .collect();
    let diff = NoteDiff {
        added: added.into_iter().map(PlainNote::from).collect(),
        removed: minus(previous, &current).into_iter().map(PlainNote::from).collect(),
    };
    (views, cells, diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Token::*;

    fn piece() -> TokenSeq {
        // Three bars with one note each.
        TokenSeq::new(vec![
            Bar,
            Position(0),
            Pitch(60),
            Duration(8),
            Bar,
            Position(4),
            Pitch(62),
            Duration(4),
            Bar,
            Position(0),
            Pitch(64),
            Duration(8),
        ])
    }

    #[test]
    fn fragment_selection_and_window() {
        let f = Fragment::select(&piece().tokens, 1, 1, 256).unwrap();
        assert_eq!((f.token_start, f.token_end, f.window_start, f.window_len), (4, 8, 0, 12));
        assert_eq!(f.mask().positions(), vec![4, 5, 6, 7]);
        let narrow = Fragment::select(&piece().tokens, 1, 1, 6).unwrap();
        assert_eq!((narrow.window_start, narrow.window_len), (3, 6));
        assert_eq!(narrow.to_window(4), Some(1));
        assert_eq!(narrow.to_window(2), None);
        assert!(matches!(Fragment::select(&piece().tokens, 2, 3, 256), Err(FragmentError::OutOfRange { .. })));
        assert!(matches!(Fragment::select(&piece().tokens, 0, 2, 8), Err(FragmentError::TooLong { .. })));
    }

    #[test]
    fn generated_bars_cannot_shift_the_context() {
        let tokens = piece();
        let f = Fragment::select(&tokens.tokens, 1, 1, 256).unwrap();
        let mut generated = tokens.clone();
        // An extra Bar inside the fragment pushes its second note to bar 2.
        generated.tokens[4..8].copy_from_slice(&[Position(8), Pitch(70), Duration(2), Bar]);
        let score = render_score(&tokens, &f, &generated);
        let notes: Vec<(u8, u64)> = score.notes.iter().map(|n| (n.pitch, n.onset)).collect();
        // The fragment continues bar 1 without its own Bar token.
        assert_eq!(notes, vec![(60, 0), (70, 1920 + 480), (64, 3840)]);
    }

    #[test]
    fn views_report_heat_by_minimum_and_diffs() {
        let tokens = piece();
        let f = Fragment::select(&tokens.tokens, 1, 1, 256).unwrap();
        let mut generated = tokens.clone();
        generated.tokens[6] = Pitch(65);
        let probs = [0.0, 0.0, 0.0, 0.0, 0.9, 0.8, 0.3, 0.6, 0.0, 0.0, 0.0, 0.0];
        let heat = Heatmap::from_probs(&probs, &f.mask());
        let previous = vec![NoteEvent::new(62, 1920 + 240, 240)];
        let (views, cells, diff) = note_views(&tokens, &f, &generated, &heat, &previous);
        assert_eq!(views.len(), 3);
        let g = views.iter().find(|v| v.in_fragment).unwrap();
        assert_eq!((g.pitch, g.p_real, g.changed), (65, Some(0.3), true));
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[2].note, Some(1));
        assert_eq!(diff.added.len(), 1);
        assert_eq!(diff.removed, vec![PlainNote { pitch: 62, onset: 2160, duration: 240 }]);
    }
}
