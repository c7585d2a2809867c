//! Dataset plumbing: hash splits, training windows, fragment and subset
//! masks, the cosine masking schedule and a procedural toy corpus.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use md5::{Digest, Md5};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::{NoteEvent, Score};
use crate::remi::{self, hex_digest, Token, TokenSeq};

/// Environment variable naming the default corpus directory.
pub const DATA_DIR_ENV: &str = "REFINPAINT_DATA_DIR";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{name} = {value} outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("cannot sample a window from an empty sequence")]
    EmptySequence,
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn domain(name: &'static str, value: f64, domain: &'static str) -> CorpusError {
    CorpusError::Domain {
        name,
        value,
        domain,
    }
}

/// Cosine schedule `cos(pi t / 2)`, 1 at t = 0 down to 0 at t = 1.
pub fn gamma(t: f64) -> Result<f64, CorpusError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(domain("t", t, "[0, 1]"));
    }
    if t == 1.0 {
        // cos(pi/2) is 6e-17 in floating point; the schedule needs an exact 0.
        return Ok(0.0);
    }
    Ok((PI * t / 2.0).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

pub fn md5_hex(bytes: &[u8]) -> String {
    hex_digest(Md5::digest(bytes).as_slice())
}

/// Leading hex digit of the MD5: `0`-`d` train, `e` validation, `f` test.
pub fn split_by_hash(file_bytes: &[u8]) -> Split {
    split_for_digit(Md5::digest(file_bytes)[0] >> 4)
}

fn split_for_digit(nibble: u8) -> Split {
    match nibble {
        0xE => Split::Val,
        0xF => Split::Test,
        _ => Split::Train,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskRole {
    /// The user-selected region (M_u).
    Fragment,
    /// Positions hidden and regenerated in one pass (M_s).
    Regenerate,
    /// Positions retained going into the next iteration.
    Keep,
}

/// Boolean mask aligned with a token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskVec {
    bits: Vec<bool>,
    role: MaskRole,
    count: usize,
}

impl MaskVec {
    pub fn new(bits: Vec<bool>, role: MaskRole) -> Self {
        let count = bits.iter().filter(|&&b| b).count();
        Self { bits, role, count }
    }

    pub fn empty(len: usize, role: MaskRole) -> Self {
        Self::new(vec![false; len], role)
    }

    pub fn from_range(len: usize, start: usize, end: usize, role: MaskRole) -> Self {
        Self::new((0..len).map(|i| (start..end).contains(&i)).collect(), role)
    }

    pub fn from_positions(len: usize, positions: &[usize], role: MaskRole) -> Self {
        let mut bits = vec![false; len];
        for &p in positions {
            bits[p] = true;
        }
        Self::new(bits, role)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn role(&self) -> MaskRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, value: bool) {
        if self.bits[i] != value {
            self.bits[i] = value;
            if value {
                self.count += 1;
            } else {
                self.count -= 1;
            }
        }
    }

    pub fn positions(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_subset_of(&self, other: &MaskVec) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn with_role(mut self, role: MaskRole) -> Self {
        self.role = role;
        self
    }

    /// Bits as 0/1, the layout of the binary embedding channel.
    pub fn as_channel(&self) -> Vec<u32> {
        self.bits.iter().map(|&b| b as u32).collect()
    }
}

/// One draw of the two training-time uniforms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerDraw {
    /// Fragment length as a fraction of the window, in [0.1, 0.6].
    pub t1: f64,
    /// Schedule input for the subset ratio, in [0, 1].
    pub t2: f64,
}

impl SchedulerDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            t1: rng.gen_range(0.1..=0.6),
            t2: rng.gen_range(0.0..=1.0),
        }
    }

    pub fn ratio(&self) -> f64 {
        gamma(self.t2).expect("t2 drawn from [0, 1]")
    }
}

/// A window together with where it starts in its source sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub seq: TokenSeq,
    pub start: usize,
}

/// Uniform window of exactly `len` tokens, preferring starts on Bar or
/// Position tokens. Short sequences are right-padded.
pub fn sample_window<R: Rng + ?Sized>(
    seq: &TokenSeq,
    len: usize,
    rng: &mut R,
) -> Result<Window, CorpusError> {
    if len == 0 {
        return Err(domain("len", 0.0, ">= 1"));
    }
    if seq.is_empty() {
        return Err(CorpusError::EmptySequence);
    }
    let n = seq.len();
    if n <= len {
        let mut tokens = seq.tokens.clone();
        tokens.resize(len, Token::Pad);
        return Ok(Window {
            seq: TokenSeq::new(tokens),
            start: 0,
        });
    }
    let boundaries: Vec<usize> = (0..=n - len)
        .filter(|&i| matches!(seq.tokens[i], Token::Bar | Token::Position(_)))
        .collect();
    let start = if boundaries.is_empty() {
        rng.gen_range(0..=n - len)
    } else {
        boundaries[rng.gen_range(0..boundaries.len())]
    };
    Ok(Window {
        seq: TokenSeq::new(seq.tokens[start..start + len].to_vec()),
        start,
    })
}

/// Contiguous fragment of `round(t1 * len)` positions at a uniform start.
pub fn sample_fragment<R: Rng + ?Sized>(
    len: usize,
    t1: f64,
    rng: &mut R,
) -> Result<MaskVec, CorpusError> {
    if !(t1 > 0.0 && t1 <= 1.0) {
        return Err(domain("t1", t1, "(0, 1]"));
    }
    let size = ((t1 * len as f64).round() as usize).min(len);
    let start = rng.gen_range(0..=len - size);
    Ok(MaskVec::from_range(len, start, start + size, MaskRole::Fragment))
}

/// Uniform subset of the fragment with `round(ratio * |fragment|)` members.
pub fn random_subset_mask<R: Rng + ?Sized>(
    fragment: &MaskVec,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskVec, CorpusError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(domain("ratio", ratio, "[0, 1]"));
    }
    let members = fragment.positions();
    let k = (ratio * members.len() as f64).round() as usize;
    let chosen: Vec<usize> = sample(rng, members.len(), k)
        .into_iter()
        .map(|i| members[i])
        .collect();
    Ok(MaskVec::from_positions(
        fragment.len(),
        &chosen,
        MaskRole::Regenerate,
    ))
}

const MAJOR: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];
const PROGRESSIONS: [[usize; 4]; 5] = [
    [0, 4, 5, 3],
    [0, 3, 4, 0],
    [0, 5, 3, 4],
    [5, 3, 0, 4],
    [0, 3, 1, 4],
];

#[derive(Clone, Copy)]
enum Texture {
    MelodyOverPad,
    ArpeggioOverBass,
    RunsOverBlocks,
}

/// Procedural piano pieces of 8 to 16 bars at 480 PPQ: scale runs,
/// arpeggios and chord pads over a four-chord progression in a random key.
pub fn generate_toy_corpus<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Score> {
    (0..n).map(|_| generate_toy_piece(rng)).collect()
}

pub fn generate_toy_piece<R: Rng + ?Sized>(rng: &mut R) -> Score {
    const PPQ: u64 = 480;
    const EIGHTH: u64 = PPQ / 2;
    const BAR: u64 = PPQ * 4;

    let tonic = 48 + rng.gen_range(0..12u8);
    let scale = if rng.gen_bool(0.5) { MAJOR } else { MINOR };
    let progression = PROGRESSIONS[rng.gen_range(0..PROGRESSIONS.len())];
    let texture = match rng.gen_range(0..3) {
        0 => Texture::MelodyOverPad,
        1 => Texture::ArpeggioOverBass,
        _ => Texture::RunsOverBlocks,
    };
    let n_bars = rng.gen_range(8..=16u64);
    // Scale degree -> MIDI pitch, allowing degrees beyond one octave.
    let pitch = |degree: i32| -> u8 {
        let octave = degree.div_euclid(7);
        let step = degree.rem_euclid(7) as usize;
        (tonic as i32 + 12 * octave + scale[step] as i32) as u8
    };

    let mut notes = Vec::new();
    let mut melody_degree: i32 = 7 + rng.gen_range(0..5);
    for bar in 0..n_bars {
        let t0 = bar * BAR;
        let root = progression[(bar % 4) as usize] as i32;
        let triad = [root, root + 2, root + 4];
        let last_bar = bar + 1 == n_bars;
        match texture {
            Texture::MelodyOverPad => {
                for d in triad {
                    notes.push(NoteEvent::new(pitch(d - 7), t0, BAR));
                }
                if last_bar {
                    notes.push(NoteEvent::new(pitch(root + 7), t0, BAR));
                    continue;
                }
                let mut t = t0;
                while t < t0 + BAR {
                    let long = rng.gen_bool(0.3);
                    let dur = if long { 2 * EIGHTH } else { EIGHTH };
                    // Chord tones on beats, stepwise motion in between.
                    if (t - t0) % PPQ == 0 && rng.gen_bool(0.6) {
                        let target = triad[rng.gen_range(0..3)] + 7;
                        melody_degree = if (melody_degree - target).abs() > 3 { target } else { melody_degree };
                    } else {
                        melody_degree += if rng.gen_bool(0.5) { 1 } else { -1 };
                    }
                    melody_degree = melody_degree.clamp(5, 14);
                    notes.push(NoteEvent::new(pitch(melody_degree), t, dur.min(t0 + BAR - t)));
                    t += dur;
                }
            }
            Texture::ArpeggioOverBass => {
                notes.push(NoteEvent::new(pitch(root - 7), t0, BAR / 2));
                notes.push(NoteEvent::new(pitch(root - 7), t0 + BAR / 2, BAR / 2));
                let pattern = [0, 1, 2, 3, 2, 1, 0, 1];
                let arp = [triad[0], triad[1], triad[2], triad[0] + 7];
                for (k, &idx) in pattern.iter().enumerate() {
                    if last_bar && k > 0 {
                        break;
                    }
                    let dur = if last_bar { BAR } else { EIGHTH };
                    notes.push(NoteEvent::new(pitch(arp[idx]), t0 + k as u64 * EIGHTH, dur));
                }
            }
            Texture::RunsOverBlocks => {
                for beat in 0..4u64 {
                    if last_bar && beat > 0 {
                        break;
                    }
                    for d in triad {
                        notes.push(NoteEvent::new(pitch(d - 7), t0 + beat * PPQ, PPQ));
                    }
                }
                let ascending = bar % 2 == 0;
                let start = root + if ascending { 7 } else { 14 };
                for k in 0..8i32 {
                    if last_bar && k > 0 {
                        break;
                    }
                    let degree = if ascending { start + k } else { start - k };
                    let dur = if last_bar { BAR } else { EIGHTH };
                    notes.push(NoteEvent::new(pitch(degree), t0 + k as u64 * EIGHTH, dur));
                }
            }
        }
    }
    Score::new(PPQ as u16, notes)
}

/// One line of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub md5: String,
    pub split: Split,
    pub n_tokens: usize,
}

/// Recursively collects `.mid`/`.midi` files below `root`, tokenizes them
/// and returns one record per parseable file, sorted by path.
pub fn build_manifest(root: &Path) -> Result<Vec<(ManifestRecord, TokenSeq)>, CorpusError> {
    let mut files = Vec::new();
    collect_midi_files(root, &mut files)?;
    files.sort();
    let mut records = Vec::new();
    for path in files {
        let bytes = std::fs::read(&path).map_err(|source| CorpusError::Io {
            path: path.clone(),
            source,
        })?;
        let score = match crate::midi::parse_smf(&bytes) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let seq = remi::encode(&score);
        let rel = path.strip_prefix(root).unwrap_or(&path);
        records.push((
            ManifestRecord {
                path: rel.to_string_lossy().replace('\\', "/"),
                md5: md5_hex(&bytes),
                split: split_by_hash(&bytes),
                n_tokens: seq.len(),
            },
            seq,
        ));
    }
    Ok(records)
}

fn collect_midi_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CorpusError> {
    let io = |source| CorpusError::Io {
        path: dir.to_path_buf(),
        source,
    };
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            collect_midi_files(&path, out)?;
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
        {
            out.push(path);
        }
    }
    Ok(())
}

pub fn manifest_to_jsonl(records: &[ManifestRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}
