//! Long-term memory: notable user messages are embedded, persisted and
//! recalled by cosine similarity.

use std::cmp::Ordering;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{Message, Role};

pub const DEFAULT_DIMENSION: usize = 256;
pub const DEFAULT_K: usize = 4;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("vector has dimension {got}, store expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("corrupt memory file at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub id: String,
    pub text: String,
    pub vector: Vec<f64>,
    #[serde(default)]
    pub tags: Vec<String>,
    pub session_id: String,
    pub created_at: DateTime<Utc>,
}

/// Maps text to a fixed-dimension vector. Equal text must give equal vectors.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError>;
}

/// Feature hashing of lowercase word tokens, L2-normalized.
#[derive(Debug, Clone, Copy)]
pub struct HashingEmbedder {
    dimension: usize,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0);
        HashingEmbedder { dimension }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

impl Embedder for HashingEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError> {
        if text.trim().is_empty() {
            return Err(MemoryError::EmptyText);
        }
        let mut v = vec![0.0; self.dimension];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            v[(fnv1a(token.as_bytes()) % self.dimension as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }
}

/// Cosine similarity; defined as 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Phrase rules deciding which user messages are worth remembering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotabilityRules {
    pub phrases: Vec<String>,
}

impl Default for NotabilityRules {
    fn default() -> Self {
        NotabilityRules {
            phrases: vec!["remember".into(), "note that".into(), "from now on".into()],
        }
    }
}

impl NotabilityRules {
    pub fn with_phrase(mut self, phrase: &str) -> Self {
        self.phrases.push(phrase.to_lowercase());
        self
    }

    pub fn is_notable_text(&self, text: &str) -> bool {
        let lower = text.to_lowercase();
        self.phrases.iter().any(|p| lower.contains(&p.to_lowercase()))
    }

    /// Only user messages can be notable.
    pub fn detect_notable(&self, message: &Message) -> bool {
        message.role == Role::User && self.is_notable_text(&message.text())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            enabled: false,
            k: DEFAULT_K,
            dimension: DEFAULT_DIMENSION,
            path: None,
        }
    }
}

/// JSONL-backed vector store with an in-memory index.
///
/// Readers may share a store; writers need exclusive access (`&mut self`).
pub struct MemoryStore {
    embedder: Box<dyn Embedder>,
    records: Vec<MemoryRecord>,
    path: Option<PathBuf>,
}

impl MemoryStore {
    pub fn in_memory(embedder: Box<dyn Embedder>) -> Self {
        MemoryStore {
            embedder,
            records: Vec::new(),
            path: None,
        }
    }

    /// Opens (or creates) a store file; later lines with the same id win.
    pub fn open(path: &Path, embedder: Box<dyn Embedder>) -> Result<Self, MemoryError> {
        let mut store = MemoryStore {
            embedder,
            records: Vec::new(),
            path: Some(path.to_path_buf()),
        };
        if path.exists() {
            let reader = BufReader::new(std::fs::File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: MemoryRecord = serde_json::from_str(&line).map_err(|e| MemoryError::Corrupt {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                store.insert_indexed(record)?;
            }
        }
        Ok(store)
    }

    pub fn dimension(&self) -> usize {
        self.embedder.dimension()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&MemoryRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn records(&self) -> &[MemoryRecord] {
        &self.records
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError> {
        self.embedder.embed(text)
    }

    fn insert_indexed(&mut self, record: MemoryRecord) -> Result<(), MemoryError> {
        if record.text.trim().is_empty() {
            return Err(MemoryError::EmptyText);
        }
        if record.vector.len() != self.dimension() {
            return Err(MemoryError::DimensionMismatch {
                expected: self.dimension(),
                got: record.vector.len(),
            });
        }
        match self.records.iter_mut().find(|r| r.id == record.id) {
            Some(existing) => *existing = record,
            None => self.records.push(record),
        }
        Ok(())
    }

    pub fn upsert(&mut self, record: MemoryRecord) -> Result<(), MemoryError> {
        self.insert_indexed(record.clone())?;
        if let Some(path) = &self.path {
            let mut file = OpenOptions::new().create(true).append(true).open(path)?;
            let mut line = serde_json::to_vec(&record).map_err(std::io::Error::other)?;
            line.push(b'\n');
            file.write_all(&line)?;
        }
        Ok(())
    }

    /// Embeds and stores a text snippet under a generated id.
    pub fn remember(&mut self, text: &str, tags: Vec<String>, session_id: &str, at: DateTime<Utc>) -> Result<String, MemoryError> {
        let vector = self.embed(text)?;
        let id = format!("mem-{:04}-{:016x}", self.records.len(), fnv1a(text.as_bytes()));
        self.upsert(MemoryRecord {
            id: id.clone(),
            text: text.to_string(),
            vector,
            tags,
            session_id: session_id.to_string(),
            created_at: at,
        })?;
        Ok(id)
    }

    /// Up to `k` records by non-increasing similarity; ties go to the newest
    /// record, then to the smaller id.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<(MemoryRecord, f64)> {
        if k == 0 || self.records.is_empty() {
            return Vec::new();
        }
        let Ok(q) = self.embed(query) else {
            return Vec::new();
        };
        let mut scored: Vec<(&MemoryRecord, f64)> =
            self.records.iter().map(|r| (r, cosine(&q, &r.vector))).collect();
        scored.sort_by(|(ra, sa), (rb, sb)| {
            sb.partial_cmp(sa)
                .unwrap_or(Ordering::Equal)
                .then_with(|| rb.created_at.cmp(&ra.created_at))
                .then_with(|| ra.id.cmp(&rb.id))
        });
        scored.into_iter().take(k).map(|(r, s)| (r.clone(), s)).collect()
    }
}

/// Renders retrieved records as the context message injected before a user turn.
pub fn memory_message(hits: &[(MemoryRecord, f64)]) -> Option<Message> {
    if hits.is_empty() {
        return None;
    }
    let mut text = String::from("Relevant memory:");
    for (record, _) in hits {
        text.push_str("\n- ");
        text.push_str(&record.text);
    }
    Some(Message::system(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + secs, 0).unwrap()
    }

    fn store() -> MemoryStore {
        MemoryStore::in_memory(Box::new(HashingEmbedder::default()))
    }

    #[test]
    fn embedding_is_deterministic_and_normalized() {
        let e = HashingEmbedder::default();
        let a = e.embed("focus the zone plate").unwrap();
        assert_eq!(a, e.embed("focus the zone plate").unwrap());
        assert_eq!(a.len(), 256);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-12);
        assert!(matches!(e.embed(""), Err(MemoryError::EmptyText)));
    }

    #[test]
    fn zero_vector_has_zero_similarity() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn upsert_count_and_replacement() {
        let mut s = store();
        s.remember("beam energy is 10 keV", vec![], "s1", t(0)).unwrap();
        assert_eq!(s.len(), 1);
        let wrong = MemoryRecord {
            id: "x".into(),
            text: "x".into(),
            vector: vec![1.0; 3],
            tags: vec![],
            session_id: "s".into(),
            created_at: t(0),
        };
        assert!(matches!(s.upsert(wrong), Err(MemoryError::DimensionMismatch { expected: 256, got: 3 })));
        let id = s.records()[0].id.clone();
        let mut updated = s.records()[0].clone();
        updated.text = "beam energy is 12 keV".into();
        updated.vector = s.embed(&updated.text).unwrap();
        s.upsert(updated).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(&id).unwrap().text, "beam energy is 12 keV");
    }

    #[test]
    fn exact_text_ranks_first() {
        let mut s = store();
        s.remember("detector deadtime is 2 us", vec![], "s", t(0)).unwrap();
        s.remember("beam energy is 10 keV", vec![], "s", t(1)).unwrap();
        let hits = s.retrieve("beam energy is 10 keV", 1);
        assert_eq!(hits[0].0.text, "beam energy is 10 keV");
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
        assert_eq!(s.retrieve("anything", 10).len(), 2);
        assert!(store().retrieve("x", 3).is_empty());
    }

    #[test]
    fn ties_prefer_newest() {
        let mut s = store();
        s.remember("same words", vec![], "s", t(0)).unwrap();
        s.remember("same words", vec![], "s", t(5)).unwrap();
        let hits = s.retrieve("same words", 2);
        assert_eq!(hits[0].0.created_at, t(5));
    }

    #[test]
    fn notability_rules() {
        let rules = NotabilityRules::default();
        assert!(rules.detect_notable(&Message::user("Remember that the detector deadtime is 2 µs")));
        assert!(!rules.detect_notable(&Message::user("take a scan here")));
        assert!(!rules.detect_notable(&Message::auto("remember this")));
        let extended = rules.with_phrase("always");
        assert!(extended.detect_notable(&Message::user("always use 50 nm steps")));
    }

    #[test]
    fn persisted_store_survives_reload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.jsonl");
        let mut s = MemoryStore::open(&path, Box::new(HashingEmbedder::default())).unwrap();
        for (i, text) in ["scan at 50 nm", "zone plate z is -193.5", "use channel Cr"].iter().enumerate() {
            s.remember(text, vec!["ops".into()], "s", t(i as i64)).unwrap();
        }
        let before = s.retrieve("zone plate focus", 3);
        drop(s);
        let reloaded = MemoryStore::open(&path, Box::new(HashingEmbedder::default())).unwrap();
        assert_eq!(reloaded.retrieve("zone plate focus", 3), before);
    }

    #[test]
    fn memory_message_lists_hits() {
        let mut s = store();
        s.remember("remember to close the shutter", vec![], "s", t(0)).unwrap();
        let msg = memory_message(&s.retrieve("shutter", 4)).unwrap();
        assert_eq!(msg.role, Role::System);
        assert!(msg.text().starts_with("Relevant memory:"));
        assert!(memory_message(&[]).is_none());
    }
}
