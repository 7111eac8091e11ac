//! The shared notes bus.
//!
//! Streams publish note embeddings; each publish gets the next per-stream
//! version. Point-in-time [`BusSnapshot`]s are taken explicitly and kept in a
//! bounded history so readers can look `Δ` versions into the past. Total live
//! rows never exceed `capacity`: older notes are mean-pooled into one summary
//! row per stream when the bound is hit. Notes invalidated by a rollback are
//! tombstoned, not deleted.

use alloc::collections::VecDeque;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::canon::Canon;
use crate::error::{config_err, input_err, Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemaTag {
    Content,
    /// Mean pool of older notes produced by compaction.
    Summary,
}

impl SchemaTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemaTag::Content => "content",
            SchemaTag::Summary => "summary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Note {
    pub stream_id: usize,
    pub version: u64,
    pub embedding: Vec<f64>,
    pub emitted_at: usize,
    pub schema: SchemaTag,
    /// How many original notes this row stands for (1 unless a summary).
    pub weight: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusSnapshot {
    pub snapshot_version: u64,
    /// Live notes per stream, ordered by version.
    pub entries: Vec<Vec<Note>>,
    pub created_at_token: usize,
}

impl BusSnapshot {
    pub fn empty(n_streams: usize) -> Self {
        Self {
            snapshot_version: 0,
            entries: vec![Vec::new(); n_streams],
            created_at_token: 0,
        }
    }

    pub fn total_rows(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_rows() == 0
    }

    pub fn notes(&self) -> impl Iterator<Item = &Note> {
        self.entries.iter().flatten()
    }

    /// Copy without the given stream's notes.
    pub fn excluding(&self, stream: usize) -> BusSnapshot {
        let mut out = self.clone();
        if let Some(e) = out.entries.get_mut(stream) {
            e.clear();
        }
        out
    }

    /// One note matrix per non-empty stream, in stream order.
    pub fn note_blocks(&self, d_note: usize) -> Vec<Matrix> {
        self.entries
            .iter()
            .filter(|e| !e.is_empty())
            .map(|e| {
                let data = e.iter().flat_map(|n| n.embedding.iter().copied()).collect();
                Matrix::new(e.len(), d_note, data).expect("bus embeddings are validated on publish")
            })
            .collect()
    }

    /// Weighted mean of all visible embeddings, or `None` when empty.
    pub fn pooled(&self, d_note: usize) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; d_note];
        let mut total = 0u64;
        for n in self.notes() {
            for (a, x) in acc.iter_mut().zip(&n.embedding) {
                *a += x * n.weight as f64;
            }
            total += n.weight;
        }
        (total > 0).then(|| acc.into_iter().map(|a| a / total as f64).collect())
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut c = Canon::new(b"snapshot");
        c.u64(self.snapshot_version).usize(self.created_at_token);
        for n in self.notes() {
            hash_note(&mut c, n);
        }
        c.finish()
    }
}

fn hash_note(c: &mut Canon, n: &Note) {
    c.usize(n.stream_id)
        .u64(n.version)
        .usize(n.emitted_at)
        .u64(matches!(n.schema, SchemaTag::Summary) as u64)
        .u64(n.weight)
        .f64s(&n.embedding);
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusConfig {
    pub n_streams: usize,
    pub d_note: usize,
    /// `ℓ_bus`: maximum live note rows.
    pub capacity: usize,
    /// Notes kept verbatim per stream when compacting.
    pub retain_k: usize,
    /// Snapshots kept for lagged reads.
    pub history: usize,
}

impl BusConfig {
    pub fn new(n_streams: usize, d_note: usize) -> Self {
        Self {
            n_streams,
            d_note,
            capacity: 2560,
            retain_k: 32,
            history: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_streams == 0 || self.d_note == 0 {
            return Err(config_err("bus needs at least one stream and d_note > 0"));
        }
        if self.retain_k == 0 {
            return Err(config_err("retain_k must be at least 1"));
        }
        if self.history == 0 {
            return Err(config_err("snapshot history must be at least 1"));
        }
        if self.capacity < self.n_streams * (self.retain_k + 1) {
            return Err(config_err(alloc::format!(
                "capacity {} cannot hold {} streams x (retain_k {} + summary)",
                self.capacity,
                self.n_streams,
                self.retain_k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NotesBus {
    cfg: BusConfig,
    live: Vec<Vec<Note>>,
    tombstoned: Vec<Note>,
    next_version: Vec<u64>,
    history: VecDeque<Arc<BusSnapshot>>,
    snapshot_counter: u64,
    /// Live state differs from the newest snapshot.
    dirty: bool,
    last_token: usize,
}

impl NotesBus {
    pub fn new(cfg: BusConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            live: vec![Vec::new(); cfg.n_streams],
            next_version: vec![1; cfg.n_streams],
            tombstoned: Vec::new(),
            history: VecDeque::new(),
            snapshot_counter: 0,
            dirty: false,
            last_token: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &BusConfig {
        &self.cfg
    }

    fn check_stream(&self, stream_id: usize) -> Result<()> {
        if stream_id >= self.cfg.n_streams {
            return Err(input_err(alloc::format!(
                "stream {stream_id} out of range ({} streams)",
                self.cfg.n_streams
            )));
        }
        Ok(())
    }

    /// Append a note; compacts when the row bound would be exceeded.
    pub fn publish(&mut self, stream_id: usize, embedding: Vec<f64>, token_pos: usize) -> Result<u64> {
        self.check_stream(stream_id)?;
        if embedding.len() != self.cfg.d_note {
            return Err(Error::Shape {
                op: "publish",
                expected: (1, self.cfg.d_note),
                found: (1, embedding.len()),
            });
        }
        if embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("note embedding"));
        }
        let version = self.next_version[stream_id];
        self.next_version[stream_id] += 1;
        self.live[stream_id].push(Note {
            stream_id,
            version,
            embedding,
            emitted_at: token_pos,
            schema: SchemaTag::Content,
            weight: 1,
        });
        self.dirty = true;
        self.last_token = self.last_token.max(token_pos);
        if self.total_rows() > self.cfg.capacity {
            self.compact(self.cfg.retain_k)?;
        }
        Ok(version)
    }

    /// Record the live state as a new immutable snapshot.
    pub fn snapshot(&mut self, token_pos: usize) -> u64 {
        self.snapshot_counter += 1;
        let snap = BusSnapshot {
            snapshot_version: self.snapshot_counter,
            entries: self.live.clone(),
            created_at_token: token_pos,
        };
        if self.history.len() == self.cfg.history {
            self.history.pop_front();
        }
        self.history.push_back(Arc::new(snap));
        self.dirty = false;
        self.snapshot_counter
    }

    pub fn latest_snapshot(&self) -> Option<Arc<BusSnapshot>> {
        self.history.back().cloned()
    }

    pub fn snapshot_version(&self) -> u64 {
        self.snapshot_counter
    }

    fn live_view(&self) -> BusSnapshot {
        BusSnapshot {
            snapshot_version: self.snapshot_counter + 1,
            entries: self.live.clone(),
            created_at_token: self.last_token,
        }
    }

    /// View `delta` versions behind the current state, without `reader`'s notes.
    ///
    /// The current state is the live bus; it counts as its own version only
    /// when it has changed since the last snapshot. Deltas past the retained
    /// history clamp to the earliest snapshot.
    pub fn read_lagged(&self, reader: usize, delta: usize) -> BusSnapshot {
        let live_extra = usize::from(self.dirty || self.history.is_empty());
        let versions = self.history.len() + live_extra;
        let idx = versions - 1 - delta.min(versions - 1);
        let view = if idx == self.history.len() {
            self.live_view()
        } else {
            (*self.history[idx]).clone()
        };
        view.excluding(reader)
    }

    /// Keep the newest `retain_k` notes of each stream and mean-pool the rest
    /// into one summary row. Returns the number of summary rows written.
    pub fn compact(&mut self, retain_k: usize) -> Result<usize> {
        if retain_k == 0 {
            return Err(input_err("retain_k must be at least 1"));
        }
        let mut summaries = 0;
        for notes in self.live.iter_mut() {
            let already_compact = notes.len() == retain_k + 1 && notes[0].schema == SchemaTag::Summary;
            if notes.len() <= retain_k || already_compact {
                continue;
            }
            let split = notes.len() - retain_k;
            let old: Vec<Note> = notes.drain(..split).collect();
            notes.insert(0, mean_pool(&old));
            summaries += 1;
        }
        if summaries > 0 {
            self.dirty = true;
        }
        Ok(summaries)
    }

    /// Tombstone every live note of `stream_id` emitted at or after `position`.
    pub fn tombstone_from(&mut self, stream_id: usize, position: usize) -> Result<usize> {
        self.check_stream(stream_id)?;
        let notes = &mut self.live[stream_id];
        let keep = notes.iter().take_while(|n| n.emitted_at < position).count();
        let dropped: Vec<Note> = notes.drain(keep..).collect();
        let count = dropped.len();
        self.tombstoned.extend(dropped);
        if count > 0 {
            self.dirty = true;
        }
        Ok(count)
    }

    pub fn total_rows(&self) -> usize {
        self.live.iter().map(Vec::len).sum()
    }

    pub fn live_notes(&self, stream_id: usize) -> &[Note] {
        &self.live[stream_id]
    }

    pub fn tombstoned(&self) -> &[Note] {
        &self.tombstoned
    }

    /// Live notes in `(stream_id, version)` order.
    pub fn dump(&self) -> Vec<Note> {
        self.live.iter().flatten().cloned().collect()
    }

    /// Rebuild a bus from dumped notes. Versions continue after the largest loaded one.
    pub fn restore(cfg: BusConfig, notes: Vec<Note>) -> Result<Self> {
        let mut bus = Self::new(cfg)?;
        for n in notes {
            bus.check_stream(n.stream_id)?;
            if n.embedding.len() != bus.cfg.d_note {
                return Err(input_err("restored note has wrong width"));
            }
            let list = &mut bus.live[n.stream_id];
            if list.last().is_some_and(|last| last.version >= n.version) {
                return Err(input_err("restored notes must be ordered by (stream, version)"));
            }
            bus.next_version[n.stream_id] = n.version + 1;
            bus.last_token = bus.last_token.max(n.emitted_at);
            list.push(n);
        }
        bus.dirty = bus.total_rows() > 0;
        Ok(bus)
    }

    /// Fingerprint of live notes, tombstones and snapshot history.
    pub fn digest(&self) -> [u8; 32] {
        let mut c = Canon::new(b"bus");
        for n in self.live.iter().flatten().chain(&self.tombstoned) {
            hash_note(&mut c, n);
        }
        c.u64(self.snapshot_counter);
        for s in &self.history {
            c.u64(s.snapshot_version);
            for n in s.notes() {
                hash_note(&mut c, n);
            }
        }
        c.finish()
    }
}

fn mean_pool(notes: &[Note]) -> Note {
    let d = notes[0].embedding.len();
    let mut acc = vec![0.0; d];
    let mut weight = 0u64;
    for n in notes {
        for (a, x) in acc.iter_mut().zip(&n.embedding) {
            *a += x * n.weight as f64;
        }
        weight += n.weight;
    }
    let last = notes.last().expect("non-empty");
    Note {
        stream_id: last.stream_id,
        version: last.version,
        embedding: acc.into_iter().map(|a| a / weight as f64).collect(),
        emitted_at: notes.iter().map(|n| n.emitted_at).max().unwrap_or(0),
        schema: SchemaTag::Summary,
        weight,
    }
}

/// Dense `(streams · pad_to) × d_note` note matrix plus a row-validity mask.
pub fn ragged_mask(snapshot: &BusSnapshot, d_note: usize, pad_to: usize) -> Result<(Matrix, Vec<bool>)> {
    let longest = snapshot.entries.iter().map(Vec::len).max().unwrap_or(0);
    if pad_to < longest {
        return Err(Error::Shape {
            op: "ragged_mask",
            expected: (longest, d_note),
            found: (pad_to, d_note),
        });
    }
    let rows = snapshot.entries.len() * pad_to;
    let mut data = vec![0.0; rows * d_note];
    let mut mask = vec![false; rows];
    for (s, notes) in snapshot.entries.iter().enumerate() {
        for (i, n) in notes.iter().enumerate() {
            let r = s * pad_to + i;
            data[r * d_note..(r + 1) * d_note].copy_from_slice(&n.embedding);
            mask[r] = true;
        }
    }
    Ok((Matrix::new(rows, d_note, data)?, mask))
}
