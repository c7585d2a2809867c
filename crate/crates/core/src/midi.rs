//! Standard MIDI File reading and writing for single-voice piano scores.
//!
//! Only the subset needed by the tokenizer is modelled: note onsets,
//! durations and pitches on a metrical (PPQ) grid. Velocity, tempo, time
//! signatures, sysex and every other event are read past and dropped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Velocity used for every note-on the writer emits.
pub const WRITE_VELOCITY: u8 = 80;

/// Smallest and largest pulses-per-quarter accepted by the parser.
pub const MIN_PPQ: u16 = 24;
pub const MAX_PPQ: u16 = 960;

const PERCUSSION_CHANNEL: u8 = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: u64,
    pub duration: u64,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: u64, duration: u64) -> Self {
        Self {
            pitch,
            onset,
            duration,
        }
    }

    pub fn end(&self) -> u64 {
        self.onset + self.duration
    }

    pub fn is_valid(&self) -> bool {
        self.pitch <= 127 && self.duration >= 1
    }
}

/// A flat, time-sorted list of notes on a metrical grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub ppq: u16,
    pub notes: Vec<NoteEvent>,
}

impl Score {
    pub fn new(ppq: u16, mut notes: Vec<NoteEvent>) -> Self {
        sort_notes(&mut notes);
        Self { ppq, notes }
    }

    pub fn empty(ppq: u16) -> Self {
        Self {
            ppq,
            notes: Vec::new(),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.ppq > 0
            && self.notes.iter().all(NoteEvent::is_valid)
            && self
                .notes
                .windows(2)
                .all(|w| (w[0].onset, w[0].pitch) <= (w[1].onset, w[1].pitch))
    }
}

/// Sorts by (onset, pitch, duration) so equal multisets give equal vectors.
pub fn sort_notes(notes: &mut [NoteEvent]) {
    notes.sort_by_key(|n| (n.onset, n.pitch, n.duration));
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MThd header: {0}")]
    MalformedHeader(String),
    #[error("unsupported time division 0x{0:04x} (only metrical PPQ in 24..=960)")]
    UnsupportedTimeDivision(u16),
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("track {track} truncated at byte offset {offset}")]
    TruncatedTrack { track: usize, offset: usize },
}

/// Non-fatal observations collected while parsing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseStats {
    pub tracks: usize,
    pub dangling_note_offs: usize,
    pub unterminated_notes: usize,
    pub percussion_notes_skipped: usize,
}

pub fn parse_smf(bytes: &[u8]) -> Result<Score, MidiError> {
    parse_smf_with_stats(bytes).map(|(score, _)| score)
}

pub fn parse_smf_with_stats(bytes: &[u8]) -> Result<(Score, ParseStats), MidiError> {
    let mut cur = Cursor::new(bytes);
    let magic = cur
        .take(4)
        .ok_or_else(|| MidiError::MalformedHeader("file shorter than 4 bytes".into()))?;
    if magic != b"MThd" {
        return Err(MidiError::MalformedHeader("missing MThd magic".into()));
    }
    let header_len = cur
        .u32()
        .ok_or_else(|| MidiError::MalformedHeader("missing header length".into()))?
        as usize;
    if header_len < 6 {
        return Err(MidiError::MalformedHeader(format!(
            "header length {header_len} < 6"
        )));
    }
    let header = cur
        .take(header_len)
        .ok_or_else(|| MidiError::MalformedHeader("header shorter than declared".into()))?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let declared_tracks = u16::from_be_bytes([header[2], header[3]]) as usize;
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    if division & 0x8000 != 0 || !(MIN_PPQ..=MAX_PPQ).contains(&division) {
        return Err(MidiError::UnsupportedTimeDivision(division));
    }

    let mut stats = ParseStats::default();
    let mut notes = Vec::new();
    let mut track_index = 0;
    while track_index < declared_tracks && cur.remaining() > 0 {
        let chunk_start = cur.pos;
        let truncated = MidiError::TruncatedTrack {
            track: track_index,
            offset: chunk_start,
        };
        let id = cur.take(4).ok_or(truncated.clone())?;
        let len = cur.u32().ok_or(truncated.clone())? as usize;
        let body_offset = cur.pos;
        let body = cur.take(len).ok_or(truncated)?;
        if id != b"MTrk" {
            // Alien chunks are skipped per the SMF rules.
            continue;
        }
        parse_track(body, body_offset, track_index, &mut notes, &mut stats)?;
        track_index += 1;
    }
    stats.tracks = track_index;
    if stats.dangling_note_offs > 0 {
        log::warn!(
            "ignored {} note-off events without a matching note-on",
            stats.dangling_note_offs
        );
    }
    Ok((Score::new(division, notes), stats))
}

fn parse_track(
    body: &[u8],
    base_offset: usize,
    track: usize,
    notes: &mut Vec<NoteEvent>,
    stats: &mut ParseStats,
) -> Result<(), MidiError> {
    let mut cur = Cursor::new(body);
    let truncated = |pos: usize| MidiError::TruncatedTrack {
        track,
        offset: base_offset + pos,
    };
    // Open notes per (channel, pitch), closed oldest-first.
    let mut open: Vec<std::collections::VecDeque<u64>> =
        vec![std::collections::VecDeque::new(); 16 * 128];
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;

    while cur.remaining() > 0 {
        let delta = cur.vlq().ok_or_else(|| truncated(cur.pos))?;
        tick += delta as u64;
        let first = cur.u8().ok_or_else(|| truncated(cur.pos))?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                // A data byte with no running status has no meaning; skip it.
                None => continue,
            }
        };
        match status {
            0xFF => {
                running = None;
                let kind = cur.u8().ok_or_else(|| truncated(cur.pos))?;
                let len = cur.vlq().ok_or_else(|| truncated(cur.pos))? as usize;
                cur.take(len).ok_or_else(|| truncated(cur.pos))?;
                if kind == 0x2F {
                    break;
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = cur.vlq().ok_or_else(|| truncated(cur.pos))? as usize;
                cur.take(len).ok_or_else(|| truncated(cur.pos))?;
            }
            0xF1..=0xFE => {
                // System common / realtime messages never appear in valid
                // files; consume their fixed data lengths defensively.
                running = None;
                let n = match status {
                    0xF2 => 2,
                    0xF1 | 0xF3 => 1,
                    _ => 0,
                };
                cur.take(n).ok_or_else(|| truncated(cur.pos))?;
            }
            0x80..=0xEF => {
                running = Some(status);
                let kind = status & 0xF0;
                let channel = status & 0x0F;
                let n_data = if kind == 0xC0 || kind == 0xD0 { 1 } else { 2 };
                let mut data = [0u8; 2];
                let mut filled = 0;
                if let Some(b) = first_data {
                    data[0] = b;
                    filled = 1;
                }
                while filled < n_data {
                    data[filled] = cur.u8().ok_or_else(|| truncated(cur.pos))?;
                    filled += 1;
                }
                if kind != 0x80 && kind != 0x90 {
                    continue;
                }
                let pitch = data[0] & 0x7F;
                let velocity = data[1] & 0x7F;
                if channel == PERCUSSION_CHANNEL {
                    if kind == 0x90 && velocity > 0 {
                        stats.percussion_notes_skipped += 1;
                    }
                    continue;
                }
                let slot = &mut open[channel as usize * 128 + pitch as usize];
                if kind == 0x90 && velocity > 0 {
                    slot.push_back(tick);
                } else if let Some(onset) = slot.pop_front() {
                    notes.push(NoteEvent::new(pitch, onset, (tick - onset).max(1)));
                } else {
                    stats.dangling_note_offs += 1;
                }
            }
            _ => unreachable!("status bytes always have the high bit set"),
        }
    }

    for (slot_index, slot) in open.iter_mut().enumerate() {
        let pitch = (slot_index % 128) as u8;
        for onset in slot.drain(..) {
            stats.unterminated_notes += 1;
            notes.push(NoteEvent::new(pitch, onset, (tick - onset).max(1)));
        }
    }
    Ok(())
}

/// Emits a format-0 file. Overlapping notes of equal pitch are spread over
/// distinct channels so the on/off pairing survives a re-parse exactly.
pub fn write_smf(score: &Score) -> Vec<u8> {
    // (tick, order, status, pitch, velocity); offs sort before ons at a tick.
    let mut events: Vec<(u64, u8, u8, u8, u8)> = Vec::with_capacity(score.notes.len() * 2);
    let mut channel_free_at: Vec<[u64; 16]> = vec![[0; 16]; 128];
    let channels: Vec<u8> = (0u8..16).filter(|&c| c != PERCUSSION_CHANNEL).collect();

    let mut notes = score.notes.clone();
    sort_notes(&mut notes);
    for note in &notes {
        let free = &mut channel_free_at[note.pitch as usize & 0x7F];
        let channel = channels
            .iter()
            .copied()
            .find(|&c| free[c as usize] <= note.onset)
            // More than 15 stacked unisons: reuse channel 0 and accept the ambiguity.
            .unwrap_or(0);
        free[channel as usize] = free[channel as usize].max(note.end());
        events.push((note.onset, 1, 0x90 | channel, note.pitch, WRITE_VELOCITY));
        events.push((note.end(), 0, 0x80 | channel, note.pitch, 0));
    }
    events.sort();

    let mut track = Vec::with_capacity(events.len() * 5 + 4);
    let mut last_tick = 0u64;
    for (tick, _, status, pitch, velocity) in events {
        write_vlq(&mut track, (tick - last_tick) as u32);
        last_tick = tick;
        track.extend_from_slice(&[status, pitch, velocity]);
    }
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&score.ppq.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (value & 0x7F) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = ((value & 0x7F) as u8) | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if n > self.remaining() {
            return None;
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Some(slice)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Variable-length quantity, at most four bytes.
    fn vlq(&mut self) -> Option<u32> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7F) as u32;
            if b & 0x80 == 0 {
                return Some(value);
            }
        }
        Some(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_note_file() -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xE0");
        let track: &[u8] = &[
            0x00, 0x90, 60, 100, // on
            0x83, 0x60, 0x80, 60, 0, // off after 480 ticks
            0x00, 0xFF, 0x2F, 0x00,
        ];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(track);
        bytes
    }

    #[test]
    fn parses_hand_encoded_single_note() {
        let score = parse_smf(&one_note_file()).unwrap();
        assert_eq!(score.ppq, 480);
        assert_eq!(score.notes, vec![NoteEvent::new(60, 0, 480)]);
    }

    #[test]
    fn end_of_track_only_is_empty() {
        let mut bytes = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x00\x60MTrk\x00\x00\x00\x04".to_vec();
        bytes.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
        let score = parse_smf(&bytes).unwrap();
        assert_eq!(score.ppq, 96);
        assert!(score.notes.is_empty());
    }

    #[test]
    fn velocity_zero_note_on_closes_with_running_status() {
        let mut bytes = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xE0".to_vec();
        // Running status: second event omits the 0x90 status byte.
        let track: &[u8] = &[0x10, 0x90, 64, 100, 0x81, 0x70, 64, 0, 0x00, 0xFF, 0x2F, 0x00];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(track);
        let score = parse_smf(&bytes).unwrap();
        assert_eq!(score.notes, vec![NoteEvent::new(64, 16, 240)]);
    }

    #[test]
    fn header_errors() {
        assert!(matches!(parse_smf(b""), Err(MidiError::MalformedHeader(_))));
        assert!(matches!(parse_smf(b"RIFF\0\0\0\x06"), Err(MidiError::MalformedHeader(_))));
        assert!(matches!(
            parse_smf(b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\xE7\x28"),
            Err(MidiError::UnsupportedTimeDivision(_))
        ));
        assert!(matches!(
            parse_smf(b"MThd\x00\x00\x00\x06\x00\x02\x00\x01\x01\xE0"),
            Err(MidiError::UnsupportedFormat(2))
        ));
    }

    #[test]
    fn truncated_event_is_an_error() {
        let mut bytes = one_note_file();
        // Declare a longer track than the bytes provide.
        let len_at = 14 + 4;
        bytes[len_at..len_at + 4].copy_from_slice(&100u32.to_be_bytes());
        assert!(matches!(parse_smf(&bytes), Err(MidiError::TruncatedTrack { .. })));

        let mut bytes = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xE0MTrk\x00\x00\x00\x02".to_vec();
        bytes.extend_from_slice(&[0x00, 0x90]);
        assert!(matches!(parse_smf(&bytes), Err(MidiError::TruncatedTrack { .. })));
    }

    #[test]
    fn dangling_note_off_is_counted() {
        let mut bytes = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xE0".to_vec();
        let track: &[u8] = &[0x00, 0x80, 60, 0, 0x00, 0xFF, 0x2F, 0x00];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(track);
        let (score, stats) = parse_smf_with_stats(&bytes).unwrap();
        assert!(score.notes.is_empty());
        assert_eq!(stats.dangling_note_offs, 1);
    }

    #[test]
    fn unterminated_notes_close_at_end_of_track() {
        let mut bytes = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xE0".to_vec();
        let track: &[u8] = &[0x00, 0x90, 60, 90, 0x83, 0x60, 0xFF, 0x2F, 0x00];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(track);
        let (score, stats) = parse_smf_with_stats(&bytes).unwrap();
        assert_eq!(score.notes, vec![NoteEvent::new(60, 0, 480)]);
        assert_eq!(stats.unterminated_notes, 1);
    }

    #[test]
    fn percussion_channel_is_ignored() {
        let mut bytes = b"MThd\x00\x00\x00\x06\x00\x00\x00\x01\x01\xE0".to_vec();
        let track: &[u8] = &[0x00, 0x99, 36, 90, 0x10, 0x89, 36, 0, 0x00, 0xFF, 0x2F, 0x00];
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(track);
        assert!(parse_smf(&bytes).unwrap().notes.is_empty());
    }

    #[test]
    fn empty_score_writes_minimal_file() {
        let bytes = write_smf(&Score::empty(480));
        assert_eq!(&bytes[..4], b"MThd");
        assert_eq!(&bytes[14..18], b"MTrk");
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0xFF, 0x2F, 0x00]);
        assert_eq!(parse_smf(&bytes).unwrap(), Score::empty(480));
    }

    #[test]
    fn stacked_unisons_survive_round_trip() {
        let score = Score::new(
            480,
            vec![
                NoteEvent::new(60, 0, 480),
                NoteEvent::new(60, 0, 240),
                NoteEvent::new(60, 100, 100),
                NoteEvent::new(60, 120, 960),
            ],
        );
        assert_eq!(parse_smf(&write_smf(&score)).unwrap(), score);
    }

    #[test]
    fn vlq_encoding_matches_reference_values() {
        for (value, expect) in [
            (0u32, vec![0x00]),
            (0x40, vec![0x40]),
            (0x7F, vec![0x7F]),
            (0x80, vec![0x81, 0x00]),
            (0x2000, vec![0xC0, 0x00]),
            (0x0FFF_FFFF, vec![0xFF, 0xFF, 0xFF, 0x7F]),
        ] {
            let mut out = Vec::new();
            write_vlq(&mut out, value);
            assert_eq!(out, expect, "value {value:#x}");
            assert_eq!(Cursor::new(&out).vlq(), Some(value));
        }
    }
}
