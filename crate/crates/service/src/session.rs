//! Persistent editing sessions: state, on-disk store and the per-request
//! operations the HTTP API exposes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refinpaint_core::corpus::{MaskRole, MaskVec};
use refinpaint_core::engine::{
    apply_edits, run_iteration, schedule_masked_count, Edit, EngineConfig, EngineError, Heatmap, IterationRecord,
};
use refinpaint_core::midi::{NoteEvent, Score};
use refinpaint_core::models::{Feedback, Inpainter, Network};
use refinpaint_core::remi::{decode_lossy, encode, quantize, TokenSeq};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::piece::{self, count_bars, Fragment, FragmentError, NoteDiff, NoteView, PlainNote, TokenHeat};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("no fragment selected")]
    NoFragmentSelected,
    #[error("{0}")]
    InvalidEdit(String),
    #[error("{0}")]
    MalformedBody(String),
    #[error("session state {path} is unreadable: {message}")]
    CorruptState { path: PathBuf, message: String },
    #[error("{0}")]
    Internal(String),
}

impl From<std::io::Error> for SessionError {
    fn from(e: std::io::Error) -> Self {
        SessionError::Internal(e.to_string())
    }
}

impl From<FragmentError> for SessionError {
    fn from(e: FragmentError) -> Self {
        SessionError::InvalidEdit(e.to_string())
    }
}

impl From<EngineError> for SessionError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::PositionOutsideFragment(_) | EngineError::InvalidEdit(_) | EngineError::Domain { .. } => {
                SessionError::InvalidEdit(e.to_string())
            }
            other => SessionError::Internal(other.to_string()),
        }
    }
}

/// A response replayed for a repeated Idempotency-Key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub status: u16,
    pub body: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub seed: u64,
    /// Generator position after the last iteration.
    pub rng_word_pos: u128,
    pub tokens: TokenSeq,
    pub fragment: Option<Fragment>,
    pub records: Vec<IterationRecord>,
    pub accepted_index: Option<usize>,
    pub created: u64,
    pub updated: u64,
    pub idempotency: BTreeMap<String, StoredResponse>,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl SessionState {
    pub fn new(session_id: String, score: &Score, seed: u64) -> Self {
        let t = now();
        Self {
            session_id,
            seed,
            rng_word_pos: 0,
            tokens: encode(score),
            fragment: None,
            records: Vec::new(),
            accepted_index: None,
            created: t,
            updated: t,
            idempotency: BTreeMap::new(),
        }
    }

    pub fn n_bars(&self) -> usize {
        count_bars(&self.tokens.tokens)
    }

    /// Quantized input notes grouped by bar.
    pub fn bars(&self) -> Vec<BarView> {
        let notes = decode_lossy(&self.tokens.tokens).0.notes;
        (0..self.n_bars())
            .map(|b| BarView {
                index: b,
                notes: notes
                    .iter()
                    .filter(|n| piece::bar_of(n) == b as u64)
                    .map(|n| PlainNote::from(*n))
                    .collect(),
            })
            .collect()
    }

    pub fn select_fragment(&mut self, bar_from: usize, bar_to: usize, max_len: usize) -> Result<Fragment, SessionError> {
        if !self.records.is_empty() {
            return Err(SessionError::InvalidEdit(
                "the fragment is fixed once iterations exist".into(),
            ));
        }
        let f = Fragment::select(&self.tokens.tokens, bar_from, bar_to, max_len)?;
        self.fragment = Some(f);
        Ok(f)
    }

    /// Runs one refinement step. The first call regenerates the whole
    /// fragment; later calls re-mask the previous output by the schedule,
    /// then apply `edits` (full-sequence positions).
    pub fn iterate(
        &mut self,
        inpainter: &Inpainter,
        feedback: &Feedback,
        engine: &EngineConfig,
        edits: &[Edit],
        temperature: Option<f64>,
    ) -> Result<&IterationRecord, SessionError> {
        let fragment = self.fragment.ok_or(SessionError::NoFragmentSelected)?;
        let m_u = fragment.mask();
        let n = m_u.count();
        let mut local = Vec::with_capacity(edits.len());
        for e in edits {
            local.push(to_window(&fragment, e)?);
        }
        let index = self.records.len();
        let (base, scheduled) = match self.records.last() {
            None => (
                IterationRecord {
                    index: 0,
                    tokens: fragment.window(&self.tokens),
                    regenerated: MaskVec::empty(m_u.len(), MaskRole::Regenerate),
                    heatmap: Heatmap::from_probs(&vec![0.0; m_u.len()], &m_u),
                    gfs: 0.0,
                    mask_next: MaskVec::empty(m_u.len(), MaskRole::Keep),
                    regen_count: 0,
                    human_edits: Vec::new(),
                },
                n,
            ),
            Some(last) => {
                let t = engine.iterations.max(1);
                let scheduled = match engine.keep_override {
                    Some(k) => n.saturating_sub(k),
                    None => schedule_masked_count((index - 1).min(t - 1), t, n)?,
                };
                (last.clone(), scheduled)
            }
        };
        let next = apply_edits(&base, &m_u, scheduled, &local)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.rng_word_pos);
        let record = run_iteration(
            index,
            &next.tokens,
            &next.regenerate,
            &m_u,
            inpainter,
            feedback,
            temperature.unwrap_or(engine.temperature),
            engine.top_p,
            &mut rng,
        )?;
        self.rng_word_pos = rng.get_word_pos();
        if let Some(last) = self.records.last_mut() {
            last.mask_next = next.keep;
            last.regen_count = next.regen_count;
            last.human_edits = local;
        }
        self.records.push(record);
        self.updated = now();
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn accept(&mut self, index: usize) -> Result<(), SessionError> {
        if index >= self.records.len() {
            return Err(SessionError::InvalidEdit(format!(
                "iteration {index} does not exist ({} so far)",
                self.records.len()
            )));
        }
        self.accepted_index = Some(index);
        self.updated = now();
        Ok(())
    }

    fn fragment_notes(&self, index: usize) -> Vec<NoteEvent> {
        let f = self.fragment.expect("records imply a fragment");
        piece::generated_notes(&self.records[index].tokens, &f)
            .into_iter()
            .map(|n| n.note)
            .collect()
    }

    pub fn iteration_view(&self, index: usize) -> IterationView {
        let f = self.fragment.expect("records imply a fragment");
        let r = &self.records[index];
        let previous = if index == 0 {
            piece::generated_notes(&f.window(&self.tokens), &f)
                .into_iter()
                .map(|n| n.note)
                .collect()
        } else {
            self.fragment_notes(index - 1)
        };
        let (notes, heatmap, diff) = piece::note_views(&self.tokens, &f, &r.tokens, &r.heatmap, &previous);
        IterationView {
            index,
            gfs: r.gfs,
            regenerated: r.regenerated.positions().into_iter().map(|p| p + f.window_start).collect(),
            human_edits: r.human_edits.clone(),
            notes,
            heatmap,
            diff,
        }
    }

    /// The accepted (or latest) version of the piece, or the quantized
    /// input before any iteration.
    pub fn export_score(&self) -> Score {
        let chosen = self.accepted_index.or(self.records.len().checked_sub(1));
        match (chosen, self.fragment) {
            (Some(i), Some(f)) => piece::render_score(&self.tokens, &f, &self.records[i].tokens),
            _ => quantize(&decode_lossy(&self.tokens.tokens).0),
        }
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.session_id.clone(),
            n_bars: self.n_bars(),
            bars: self.bars(),
            fragment: self.fragment.map(FragmentView::from),
            accepted_index: self.accepted_index,
            created: self.created,
            updated: self.updated,
            iterations: (0..self.records.len()).map(|i| self.iteration_view(i)).collect(),
        }
    }
}

fn to_window(fragment: &Fragment, edit: &Edit) -> Result<Edit, SessionError> {
    let map = |pos: usize| {
        fragment
            .to_window(pos)
            .filter(|_| (fragment.token_start..fragment.token_end).contains(&pos))
            .ok_or_else(|| SessionError::InvalidEdit(format!("edit position {pos} is outside the fragment")))
    };
    Ok(match *edit {
        Edit::ForceKeep { pos } => Edit::ForceKeep { pos: map(pos)? },
        Edit::ForceRegenerate { pos } => Edit::ForceRegenerate { pos: map(pos)? },
        Edit::ReplaceToken { pos, token } => Edit::ReplaceToken { pos: map(pos)?, token },
        Edit::SetKeepCount { k } => Edit::SetKeepCount { k },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarView {
    pub index: usize,
    pub notes: Vec<PlainNote>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragmentView {
    pub bar_from: usize,
    pub bar_to: usize,
    pub token_range: [usize; 2],
    pub n_tokens: usize,
}

impl From<Fragment> for FragmentView {
    fn from(f: Fragment) -> Self {
        Self {
            bar_from: f.bar_from,
            bar_to: f.bar_to,
            token_range: [f.token_start, f.token_end],
            n_tokens: f.n_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationView {
    pub index: usize,
    pub gfs: f64,
    /// Full-sequence positions regenerated to produce this version.
    pub regenerated: Vec<usize>,
    /// Edits applied when leaving this version.
    pub human_edits: Vec<Edit>,
    pub notes: Vec<NoteView>,
    pub heatmap: Vec<TokenHeat>,
    pub diff: NoteDiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub n_bars: usize,
    pub bars: Vec<BarView>,
    pub fragment: Option<FragmentView>,
    pub accepted_index: Option<usize>,
    pub created: u64,
    pub updated: u64,
    pub iterations: Vec<IterationView>,
}

/// Sessions under `root/sessions/{id}/`, each with `state.json`,
/// `source.mid` and `traces/`.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

impl SessionStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions"))?;
        fs::create_dir_all(root.join("idempotency"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn new_id() -> String {
        format!("{:032x}", rand::random::<u128>())
    }

    pub fn create(&self, state: &SessionState, source: &[u8]) -> Result<(), SessionError> {
        let dir = self.dir(&state.session_id);
        fs::create_dir_all(dir.join("traces"))?;
        atomic_write(&dir.join("source.mid"), source)?;
        self.save(state)
    }

    pub fn save(&self, state: &SessionState) -> Result<(), SessionError> {
        let json = serde_json::to_vec(state).map_err(|e| SessionError::Internal(e.to_string()))?;
        atomic_write(&self.dir(&state.session_id).join("state.json"), &json)?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<SessionState, SessionError> {
        if !valid_id(id) {
            return Err(SessionError::UnknownSession(id.to_string()));
        }
        let path = self.dir(id).join("state.json");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(SessionError::UnknownSession(id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        serde_json::from_slice(&bytes).map_err(|e| SessionError::CorruptState {
            path,
            message: e.to_string(),
        })
    }

    pub fn write_trace(&self, id: &str, view: &IterationView) -> Result<(), SessionError> {
        let json = serde_json::to_vec_pretty(view).map_err(|e| SessionError::Internal(e.to_string()))?;
        let path = self.dir(id).join("traces").join(format!("iteration-{:03}.json", view.index));
        atomic_write(&path, &json)?;
        Ok(())
    }

    /// Ids of all stored sessions, sorted.
    pub fn list(&self) -> Result<Vec<String>, SessionError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(self.root.join("sessions"))? {
            let entry = entry?;
            if entry.path().join("state.json").is_file() {
                ids.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn key_path(&self, key: &str) -> PathBuf {
        let digest = Sha256::digest(key.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        self.root.join("idempotency").join(format!("{hex}.json"))
    }

    /// Stored response of a session-less request (creation).
    pub fn global_response(&self, key: &str) -> Option<StoredResponse> {
        let bytes = fs::read(self.key_path(key)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    pub fn store_global_response(&self, key: &str, response: &StoredResponse) -> Result<(), SessionError> {
        let json = serde_json::to_vec(response).map_err(|e| SessionError::Internal(e.to_string()))?;
        atomic_write(&self.key_path(key), &json)?;
        Ok(())
    }
}

/// Models and engine settings shared by every session.
pub struct Models {
    pub inpainter: Inpainter,
    pub feedback: Feedback,
}

impl Models {
    pub fn max_len(&self) -> usize {
        self.inpainter.config().max_len.min(self.feedback.config().max_len)
    }
}
