//! Server-side session records: engine state, undo history and persistence.

use std::collections::VecDeque;
use std::path::Path;

use chrono::{DateTime, Utc};
use mais_core::archive::Archive;
use mais_core::engine::{refine, EngineConfig, Refinement, SessionState};
use mais_core::memory::MemoryBank;
use mais_core::params::ParamStore;
use mais_core::{Click, Error, Mask, Result};

/// State restored by undo.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub current_mask: Mask,
    pub bank: MemoryBank,
    pub clicks: Vec<Click>,
    pub dice_trace: Vec<f64>,
    pub interaction_count: u64,
}

impl Snapshot {
    pub fn of(s: &SessionState) -> Self {
        Self {
            current_mask: s.current_mask.clone(),
            bank: s.bank.clone(),
            clicks: s.clicks.clone(),
            dice_trace: s.dice_trace.clone(),
            interaction_count: s.interaction_count,
        }
    }

    fn restore(self, s: &mut SessionState) {
        s.current_mask = self.current_mask;
        s.bank = self.bank;
        s.clicks = self.clicks;
        s.dice_trace = self.dice_trace;
        s.interaction_count = self.interaction_count;
    }
}

#[derive(Debug)]
pub struct SessionRecord {
    pub session_id: String,
    pub state: SessionState,
    /// Engine configuration after per-session overrides.
    pub config: EngineConfig,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub persisted: bool,
    history: VecDeque<Snapshot>,
}

impl SessionRecord {
    pub fn new(session_id: String, state: SessionState, config: EngineConfig) -> Self {
        let now = Utc::now();
        Self { session_id, state, config, created_at: now, updated_at: now, persisted: false, history: VecDeque::new() }
    }

    /// Undo depth: the bank capacity, at least one.
    pub fn undo_depth(&self) -> usize {
        self.config.memory.capacity.max(1)
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Refines with `clicks`; on error the session is unchanged.
    pub fn apply(&mut self, clicks: &[Click], params: &ParamStore) -> Result<Refinement> {
        let before = Snapshot::of(&self.state);
        let r = refine(&mut self.state, clicks, &self.config, params)?;
        if self.history.len() == self.undo_depth() {
            self.history.pop_front();
        }
        self.history.push_back(before);
        self.touch();
        Ok(r)
    }

    /// Rolls back one interaction. Returns false when there is nothing to undo.
    pub fn undo(&mut self) -> bool {
        match self.history.pop_back() {
            Some(snap) => {
                snap.restore(&mut self.state);
                self.touch();
                true
            }
            None => false,
        }
    }

    fn touch(&mut self) {
        self.updated_at = Utc::now();
        self.persisted = false;
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = self.state.to_archive();
        a.put_meta("session.id", self.session_id.clone());
        a.put_meta("session.created_at", self.created_at.to_rfc3339());
        a.put_meta("session.updated_at", self.updated_at.to_rfc3339());
        a.put_meta("session.config", serde_json::to_string(&self.config)?);
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let time = |key: &str| -> Result<DateTime<Utc>> {
            DateTime::parse_from_rfc3339(a.meta(key)?)
                .map(|t| t.with_timezone(&Utc))
                .map_err(|e| Error::Archive(format!("{key}: {e}")))
        };
        Ok(Self {
            session_id: a.meta("session.id")?.to_string(),
            state: SessionState::from_archive(a)?,
            config: serde_json::from_str(a.meta("session.config")?)?,
            created_at: time("session.created_at")?,
            updated_at: time("session.updated_at")?,
            persisted: true,
            history: VecDeque::new(),
        })
    }

    /// Atomic write. The undo history is not persisted.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)?;
        self.persisted = true;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}
