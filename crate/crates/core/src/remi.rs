//! REMI-style tokenization: Bar / Position / Pitch / Duration events.
//!
//! Fixed 4/4 grid with 32 positions per bar (8 per beat); durations are
//! counted in eighths of a beat and clipped to 1..=64. Velocity, tempo and
//! meter are not represented.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::midi::{sort_notes, NoteEvent, Score};

pub const POSITIONS_PER_BAR: u32 = 32;
pub const POSITIONS_PER_BEAT: u32 = 8;
pub const MIN_PITCH: u8 = 21;
pub const MAX_PITCH: u8 = 108;
pub const MAX_DURATION: u8 = 64;
/// PPQ of every decoded score.
pub const DECODE_PPQ: u16 = 480;
pub const VOCAB_SIZE: usize = 4 + 1 + 32 + 88 + 64;
pub const VOCAB_VERSION: u32 = 1;

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;
const BAR_ID: u32 = 4;
const POSITION_BASE: u32 = 5;
const PITCH_BASE: u32 = POSITION_BASE + POSITIONS_PER_BAR;
const DURATION_BASE: u32 = PITCH_BASE + (MAX_PITCH - MIN_PITCH + 1) as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Pad,
    Mask,
    Bos,
    Eos,
    Bar,
    Position(u8),
    Pitch(u8),
    Duration(u8),
}

impl Token {
    pub fn id(self) -> u32 {
        match self {
            Token::Pad => PAD_ID,
            Token::Mask => MASK_ID,
            Token::Bos => BOS_ID,
            Token::Eos => EOS_ID,
            Token::Bar => BAR_ID,
            Token::Position(p) => POSITION_BASE + p as u32,
            Token::Pitch(n) => PITCH_BASE + (n - MIN_PITCH) as u32,
            Token::Duration(d) => DURATION_BASE + (d - 1) as u32,
        }
    }

    pub fn from_id(id: u32) -> Option<Token> {
        Some(match id {
            PAD_ID => Token::Pad,
            MASK_ID => Token::Mask,
            BOS_ID => Token::Bos,
            EOS_ID => Token::Eos,
            BAR_ID => Token::Bar,
            i if i < PITCH_BASE => Token::Position((i - POSITION_BASE) as u8),
            i if i < DURATION_BASE => Token::Pitch((i - PITCH_BASE) as u8 + MIN_PITCH),
            i if (i as usize) < VOCAB_SIZE => Token::Duration((i - DURATION_BASE) as u8 + 1),
            _ => return None,
        })
    }

    pub fn is_valid(self) -> bool {
        match self {
            Token::Position(p) => (p as u32) < POSITIONS_PER_BAR,
            Token::Pitch(n) => (MIN_PITCH..=MAX_PITCH).contains(&n),
            Token::Duration(d) => (1..=MAX_DURATION).contains(&d),
            _ => true,
        }
    }

    pub fn kind(self) -> &'static str {
        match self {
            Token::Pad => "Pad",
            Token::Mask => "Mask",
            Token::Bos => "Bos",
            Token::Eos => "Eos",
            Token::Bar => "Bar",
            Token::Position(_) => "Position",
            Token::Pitch(_) => "Pitch",
            Token::Duration(_) => "Duration",
        }
    }

    pub fn value(self) -> Option<u8> {
        match self {
            Token::Position(v) | Token::Pitch(v) | Token::Duration(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_special(self) -> bool {
        matches!(self, Token::Pad | Token::Mask | Token::Bos | Token::Eos)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value() {
            Some(v) => write!(f, "{}({})", self.kind(), v),
            None => f.write_str(self.kind()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot parse token `{0}`")]
pub struct TokenParseError(pub String);

impl FromStr for Token {
    type Err = TokenParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || TokenParseError(s.to_string());
        let s = s.trim();
        let (kind, value) = match s.find('(') {
            Some(open) => {
                let inner = s[open + 1..].strip_suffix(')').ok_or_else(err)?;
                (&s[..open], Some(inner.parse::<u8>().map_err(|_| err())?))
            }
            None => (s, None),
        };
        let token = match (kind, value) {
            ("Pad", None) => Token::Pad,
            ("Mask", None) => Token::Mask,
            ("Bos", None) => Token::Bos,
            ("Eos", None) => Token::Eos,
            ("Bar", None) => Token::Bar,
            ("Position", Some(v)) => Token::Position(v),
            ("Pitch", Some(v)) => Token::Pitch(v),
            ("Duration", Some(v)) => Token::Duration(v),
            _ => return Err(err()),
        };
        if token.is_valid() {
            Ok(token)
        } else {
            Err(err())
        }
    }
}

/// Dense token ↔ id bijection with the special tokens at ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<Token>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub id: u32,
    pub kind: String,
    pub value: Option<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabManifest {
    pub version: u32,
    pub entries: Vec<VocabEntry>,
}

impl Vocab {
    pub fn remi() -> Self {
        let tokens: Vec<Token> = (0..VOCAB_SIZE as u32)
            .map(|id| Token::from_id(id).expect("dense id range"))
            .collect();
        assert_eq!(tokens.len(), 189, "REMI vocabulary must hold 189 ids");
        debug_assert!(tokens.iter().enumerate().all(|(i, t)| t.id() == i as u32));
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn id(&self, token: Token) -> u32 {
        token.id()
    }

    pub fn manifest(&self) -> VocabManifest {
        VocabManifest {
            version: VOCAB_VERSION,
            entries: self
                .tokens
                .iter()
                .map(|t| VocabEntry {
                    id: t.id(),
                    kind: t.kind().to_string(),
                    value: t.value(),
                })
                .collect(),
        }
    }

    /// Compact, key-ordered JSON; identical bytes on every platform.
    pub fn manifest_json(&self) -> String {
        serde_json::to_string(&self.manifest()).expect("manifest serializes")
    }

    /// Hex SHA-256 of [`Vocab::manifest_json`], stored in checkpoints.
    pub fn checksum(&self) -> String {
        hex_digest(Sha256::digest(self.manifest_json().as_bytes()).as_slice())
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::remi()
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A token sequence plus, for encoder output, the source note of each Pitch token.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<BTreeMap<usize, usize>>,
}

impl TokenSeq {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self {
            tokens,
            provenance: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id()).collect()
    }

    pub fn from_ids(ids: &[u32]) -> Option<Self> {
        ids.iter()
            .map(|&i| Token::from_id(i))
            .collect::<Option<Vec<_>>>()
            .map(Self::new)
    }

    /// One token per line, `KIND` or `KIND(value)`.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.tokens.len() * 10);
        for t in &self.tokens {
            out.push_str(&t.to_string());
            out.push('\n');
        }
        out
    }

    pub fn parse_dump(text: &str) -> Result<Self, TokenParseError> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()
            .map(Self::new)
    }
}

impl From<Vec<Token>> for TokenSeq {
    fn from(tokens: Vec<Token>) -> Self {
        Self::new(tokens)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RemiError {
    #[error("grammar violation at token index {index}: {reason}")]
    GrammarViolation { index: usize, reason: &'static str },
    #[error("transpose shift {0} outside [-6, 6]")]
    ShiftOutOfRange(i32),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeStats {
    /// Notes dropped because their pitch is outside 21..=108.
    pub pitch_out_of_range: usize,
    /// Notes merged into a same-position, same-pitch neighbour.
    pub merged_duplicates: usize,
}

/// Grid location in eighths of a beat, rounding half up.
pub fn quantize_ticks(ticks: u64, ppq: u16) -> u64 {
    let ppq = ppq as u64;
    (2 * ticks * POSITIONS_PER_BEAT as u64 + ppq) / (2 * ppq)
}

pub fn encode(score: &Score) -> TokenSeq {
    encode_with_stats(score).0
}

pub fn encode_with_stats(score: &Score) -> (TokenSeq, EncodeStats) {
    let mut stats = EncodeStats::default();
    // (grid, pitch) -> (duration, source note index); keeps the longer duplicate.
    let mut grid: BTreeMap<(u64, u8), (u8, usize)> = BTreeMap::new();
    for (index, note) in score.notes.iter().enumerate() {
        if !(MIN_PITCH..=MAX_PITCH).contains(&note.pitch) {
            stats.pitch_out_of_range += 1;
            continue;
        }
        let onset = quantize_ticks(note.onset, score.ppq);
        let duration = quantize_ticks(note.duration, score.ppq).clamp(1, MAX_DURATION as u64) as u8;
        match grid.entry((onset, note.pitch)) {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert((duration, index));
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                stats.merged_duplicates += 1;
                if duration > o.get().0 {
                    o.insert((duration, index));
                }
            }
        }
    }
    if stats.pitch_out_of_range > 0 {
        log::debug!("dropped {} notes outside the piano range", stats.pitch_out_of_range);
    }

    let mut tokens = Vec::new();
    let mut provenance = BTreeMap::new();
    let mut current_bar: Option<u64> = None;
    let mut current_position: Option<u64> = None;
    for (&(onset, pitch), &(duration, source)) in &grid {
        let bar = onset / POSITIONS_PER_BAR as u64;
        let position = onset % POSITIONS_PER_BAR as u64;
        let first_bar = current_bar.map_or(0, |b| b + 1);
        if current_bar != Some(bar) {
            for _ in first_bar..=bar {
                tokens.push(Token::Bar);
            }
            current_bar = Some(bar);
            current_position = None;
        }
        if current_position != Some(position) {
            tokens.push(Token::Position(position as u8));
            current_position = Some(position);
        }
        provenance.insert(tokens.len(), source);
        tokens.push(Token::Pitch(pitch));
        tokens.push(Token::Duration(duration));
    }
    (
        TokenSeq {
            tokens,
            provenance: Some(provenance),
        },
        stats,
    )
}

/// Parser state of the token grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrammarState {
    /// No bar opened yet.
    Start,
    /// Inside a bar, before any Position.
    InBar,
    /// After a Position or a completed Pitch/Duration pair.
    AtPosition,
    /// A Pitch awaiting its Duration.
    AfterPitch,
    /// Trailing padding.
    Padding,
}

impl GrammarState {
    pub fn step(self, token: Token) -> Result<GrammarState, &'static str> {
        use GrammarState::*;
        match (self, token) {
            (Padding, Token::Pad) => Ok(Padding),
            (Padding, _) => Err("content after padding"),
            (AfterPitch, Token::Duration(_)) => Ok(AtPosition),
            (AfterPitch, _) => Err("Pitch not followed by Duration"),
            (_, Token::Pad) => Ok(Padding),
            (_, Token::Bar) => Ok(InBar),
            (Start, Token::Position(_)) => Err("Position before any Bar"),
            (_, Token::Position(_)) => Ok(AtPosition),
            (AtPosition, Token::Pitch(_)) => Ok(AfterPitch),
            (_, Token::Pitch(_)) => Err("Pitch without a Position"),
            (_, Token::Duration(_)) => Err("Duration without a Pitch"),
            (_, Token::Mask) => Err("Mask token in content"),
            (_, Token::Bos) | (_, Token::Eos) => Err("sequence marker in content"),
        }
    }
}

/// Checks a complete sequence from its first token.
pub fn check_grammar(tokens: &[Token]) -> Result<(), RemiError> {
    check_grammar_from(tokens, GrammarState::Start, false)
}

/// Checks a window cut out of a longer sequence: it may open mid-bar or
/// mid-note and end on a dangling Pitch.
pub fn check_window_grammar(tokens: &[Token]) -> Result<(), RemiError> {
    let open = match tokens.first() {
        Some(Token::Pitch(_)) => GrammarState::AtPosition,
        Some(Token::Duration(_)) => GrammarState::AfterPitch,
        _ => GrammarState::InBar,
    };
    check_grammar_from(tokens, open, true)
}

fn check_grammar_from(
    tokens: &[Token],
    start: GrammarState,
    allow_open_end: bool,
) -> Result<(), RemiError> {
    let mut state = start;
    for (index, &token) in tokens.iter().enumerate() {
        if !token.is_valid() {
            return Err(RemiError::GrammarViolation {
                index,
                reason: "token payload out of range",
            });
        }
        state = state
            .step(token)
            .map_err(|reason| RemiError::GrammarViolation { index, reason })?;
    }
    if state == GrammarState::AfterPitch && !allow_open_end {
        return Err(RemiError::GrammarViolation {
            index: tokens.len(),
            reason: "sequence ends inside a Pitch/Duration pair",
        });
    }
    Ok(())
}

fn ticks_per_unit() -> u64 {
    DECODE_PPQ as u64 / POSITIONS_PER_BEAT as u64
}

pub fn decode(seq: &TokenSeq) -> Result<Score, RemiError> {
    check_grammar(&seq.tokens)?;
    Ok(decode_lossy(&seq.tokens).0)
}

/// Decodes whatever notes are well formed, skipping tokens that break the
/// grammar. Returns the score and the number of skipped tokens.
pub fn decode_lossy(tokens: &[Token]) -> (Score, usize) {
    let unit = ticks_per_unit();
    let mut notes = Vec::new();
    let mut skipped = 0;
    let mut bar: Option<u64> = None;
    let mut position: Option<u64> = None;
    let mut pending_pitch: Option<u8> = None;
    for &token in tokens {
        match token {
            Token::Bar => {
                skipped += pending_pitch.take().is_some() as usize;
                bar = Some(bar.map_or(0, |b| b + 1));
                position = None;
            }
            Token::Position(p) if bar.is_some() => {
                skipped += pending_pitch.take().is_some() as usize;
                position = Some(p as u64);
            }
            Token::Pitch(n) if position.is_some() => {
                skipped += pending_pitch.replace(n).is_some() as usize;
            }
            Token::Duration(d) if pending_pitch.is_some() => {
                let pitch = pending_pitch.take().unwrap();
                let grid = bar.unwrap() * POSITIONS_PER_BAR as u64 + position.unwrap();
                notes.push(NoteEvent::new(pitch, grid * unit, d as u64 * unit));
            }
            Token::Pad => {}
            _ => skipped += 1,
        }
    }
    skipped += pending_pitch.is_some() as usize;
    (Score::new(DECODE_PPQ, notes), skipped)
}

/// The score `decode(encode(score))` must reproduce.
pub fn quantize(score: &Score) -> Score {
    decode_lossy(&encode(score).tokens).0
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transposed {
    pub seq: TokenSeq,
    /// True when a shifted pitch would leave 21..=108 and the input was returned unchanged.
    pub skipped: bool,
}

pub fn transpose(seq: &TokenSeq, semitones: i32) -> Result<Transposed, RemiError> {
    if !(-6..=6).contains(&semitones) {
        return Err(RemiError::ShiftOutOfRange(semitones));
    }
    let in_range = seq.tokens.iter().all(|t| match t {
        Token::Pitch(n) => (MIN_PITCH as i32..=MAX_PITCH as i32).contains(&(*n as i32 + semitones)),
        _ => true,
    });
    if !in_range {
        return Ok(Transposed {
            seq: seq.clone(),
            skipped: true,
        });
    }
    let tokens = seq
        .tokens
        .iter()
        .map(|&t| match t {
            Token::Pitch(n) => Token::Pitch((n as i32 + semitones) as u8),
            other => other,
        })
        .collect();
    Ok(Transposed {
        seq: TokenSeq {
            tokens,
            provenance: seq.provenance.clone(),
        },
        skipped: false,
    })
}

/// Token index range `[start, end)` covered by bars `from..=to` (0-based),
/// running from the first selected Bar token to the token before the next
/// unselected Bar. `None` when the sequence has fewer bars.
pub fn bar_token_range(tokens: &[Token], from: usize, to: usize) -> Option<(usize, usize)> {
    if from > to {
        return None;
    }
    let bars: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| **t == Token::Bar)
        .map(|(i, _)| i)
        .collect();
    let start = *bars.get(from)?;
    bars.get(to)?;
    let end = bars.get(to + 1).copied().unwrap_or_else(|| {
        tokens
            .iter()
            .rposition(|t| *t != Token::Pad)
            .map_or(tokens.len(), |i| i + 1)
    });
    Some((start, end))
}

/// Sorted copy of the notes, for multiset comparisons.
pub fn note_multiset(score: &Score) -> Vec<NoteEvent> {
    let mut notes = score.notes.clone();
    sort_notes(&mut notes);
    notes
}

#[cfg(test)]
mod tests {
    use super::*;
    use Token::*;

    #[test]
    fn vocab_has_189_dense_ids() {
        let vocab = Vocab::remi();
        assert_eq!(vocab.len(), 189);
        for id in 0..189u32 {
            assert_eq!(vocab.token(id).unwrap().id(), id);
        }
        assert_eq!(Token::from_id(189), None);
        assert_eq!(Pad.id(), 0);
        assert_eq!(Mask.id(), 1);
        assert_eq!(Bos.id(), 2);
        assert_eq!(Eos.id(), 3);
    }

    #[test]
    fn manifest_is_stable() {
        let vocab = Vocab::remi();
        let json = vocab.manifest_json();
        assert!(json.starts_with(r#"{"version":1,"entries":[{"id":0,"kind":"Pad","value":null}"#));
        assert_eq!(vocab.checksum(), Vocab::remi().checksum());
        assert_eq!(vocab.checksum().len(), 64);
    }

    #[test]
    fn encodes_single_and_chord() {
        let s = Score::new(480, vec![NoteEvent::new(60, 0, 480)]);
        assert_eq!(encode(&s).tokens, vec![Bar, Position(0), Pitch(60), Duration(8)]);
        let s = Score::new(480, vec![NoteEvent::new(64, 0, 480), NoteEvent::new(60, 0, 480)]);
        assert_eq!(
            encode(&s).tokens,
            vec![Bar, Position(0), Pitch(60), Duration(8), Pitch(64), Duration(8)]
        );
        assert!(encode(&Score::empty(480)).is_empty());
    }

    #[test]
    fn empty_bars_are_emitted() {
        // Second note in bar 2 (0-based), at beat 1.
        let s = Score::new(480, vec![NoteEvent::new(60, 0, 10), NoteEvent::new(62, 2 * 1920 + 480, 480)]);
        assert_eq!(
            encode(&s).tokens,
            vec![Bar, Position(0), Pitch(60), Duration(1), Bar, Bar, Position(8), Pitch(62), Duration(8)]
        );
    }

    #[test]
    fn duplicates_merge_keeping_longer_and_long_notes_clip() {
        let s = Score::new(
            480,
            vec![
                NoteEvent::new(60, 0, 240),
                NoteEvent::new(60, 10, 960),
                NoteEvent::new(50, 0, 1920 * 9),
                NoteEvent::new(10, 0, 480),
            ],
        );
        let (seq, stats) = encode_with_stats(&s);
        assert_eq!(
            seq.tokens,
            vec![Bar, Position(0), Pitch(50), Duration(64), Pitch(60), Duration(16)]
        );
        assert_eq!(stats.pitch_out_of_range, 1);
        assert_eq!(stats.merged_duplicates, 1);
    }

    #[test]
    fn decode_examples() {
        let score = decode(&vec![Bar, Position(0), Pitch(60), Duration(8)].into()).unwrap();
        assert_eq!(score, Score::new(480, vec![NoteEvent::new(60, 0, 480)]));
        assert_eq!(decode(&TokenSeq::default()).unwrap(), Score::empty(480));
        assert_eq!(
            decode(&vec![Position(0), Pitch(60), Duration(8)].into()),
            Err(RemiError::GrammarViolation {
                index: 0,
                reason: "Position before any Bar"
            })
        );
    }

    #[test]
    fn grammar_rules() {
        assert!(check_grammar(&[Bar, Position(0), Pitch(60), Duration(8), Pad, Pad]).is_ok());
        let bad = |tokens: &[Token]| match check_grammar(tokens) {
            Err(RemiError::GrammarViolation { index, .. }) => index,
            Ok(()) => usize::MAX,
            Err(e) => panic!("{e}"),
        };
        assert_eq!(bad(&[Bar, Position(0), Pitch(60), Pitch(61)]), 3);
        assert_eq!(bad(&[Bar, Pitch(60), Duration(2)]), 1);
        assert_eq!(bad(&[Bar, Position(0), Duration(2)]), 2);
        assert_eq!(bad(&[Bar, Position(0), Pitch(60)]), 3);
        assert_eq!(bad(&[Bar, Pad, Bar]), 2);
        assert_eq!(bad(&[Bar, Mask]), 1);
        assert!(check_window_grammar(&[Position(3), Pitch(60), Duration(1), Bar, Position(0), Pitch(50)]).is_ok());
        assert!(check_window_grammar(&[Pitch(60), Duration(1), Pitch(62), Duration(2)]).is_ok());
        assert!(check_window_grammar(&[Duration(1), Position(4), Pitch(62), Duration(2)]).is_ok());
        assert!(check_window_grammar(&[Duration(1), Duration(2)]).is_err());
    }

    #[test]
    fn lossy_decode_skips_broken_pairs() {
        let (score, skipped) = decode_lossy(&[Bar, Position(0), Pitch(60), Bar, Position(4), Pitch(62), Duration(2), Duration(3)]);
        assert_eq!(score.notes, vec![NoteEvent::new(62, (32 + 4) * 60, 120)]);
        assert_eq!(skipped, 2);
    }

    #[test]
    fn transpose_examples() {
        let seq: TokenSeq = vec![Bar, Position(0), Pitch(60), Duration(8)].into();
        let up = transpose(&seq, 6).unwrap();
        assert!(!up.skipped);
        assert_eq!(up.seq.tokens[2], Pitch(66));
        assert_eq!(transpose(&seq, 0).unwrap().seq, seq);
        let top: TokenSeq = vec![Bar, Position(0), Pitch(108), Duration(8)].into();
        let t = transpose(&top, 1).unwrap();
        assert!(t.skipped);
        assert_eq!(t.seq, top);
        assert_eq!(transpose(&seq, 7), Err(RemiError::ShiftOutOfRange(7)));
    }

    #[test]
    fn dump_round_trips() {
        let seq: TokenSeq = vec![Bar, Position(0), Pitch(60), Duration(8), Pad, Mask].into();
        assert_eq!(seq.dump(), "Bar\nPosition(0)\nPitch(60)\nDuration(8)\nPad\nMask\n");
        assert_eq!(TokenSeq::parse_dump(&seq.dump()).unwrap(), seq);
        assert!("Pitch(200)".parse::<Token>().is_err());
        assert!("Position(32)".parse::<Token>().is_err());
        assert!("Bar(1)".parse::<Token>().is_err());
    }

    #[test]
    fn bar_ranges() {
        let tokens = [Bar, Position(0), Pitch(60), Duration(8), Bar, Bar, Position(3), Pitch(61), Duration(1), Pad];
        assert_eq!(bar_token_range(&tokens, 0, 0), Some((0, 4)));
        assert_eq!(bar_token_range(&tokens, 1, 2), Some((4, 9)));
        assert_eq!(bar_token_range(&tokens, 2, 3), None);
    }
}
