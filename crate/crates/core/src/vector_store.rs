//! Persistent embedding store with exact cosine search, plus the question-id
//! cache consulted before calling the StackExchange API.
//!
//! Documents live in an append-only JSON-lines file (`store.jsonl`); a
//! re-upsert appends a newer record for the same id and the file is rewritten
//! once stale records pile up. The id cache is `ids.json`, shaped
//! `{"ids": [..]}` and replaced atomically. On open the store file is
//! authoritative and the cache is rebuilt if the two disagree.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm_gateway::EmbeddingVector;
use crate::ranking::{cosine, RankingError};
use crate::transport::write_atomic;

pub const STORE_FILE: &str = "store.jsonl";
pub const CACHE_FILE: &str = "ids.json";

/// A store shared between the storage and retrieval stages. Locks are never
/// held across an await.
pub type SharedStore = Arc<std::sync::RwLock<VectorStore>>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("embedding dimension {got} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("corrupt store data: {0}")]
    Corrupt(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        Self::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDocument {
    pub question_id: u64,
    pub title: String,
    pub link: String,
    pub document_text: String,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub document: StoredDocument,
    pub score: f64,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct IdCacheFile {
    ids: Vec<u64>,
}

/// Byte-level persistence used by [`VectorStore`].
pub trait StoreBackend: Send + Sync {
    fn read_records(&self) -> io::Result<Vec<u8>>;
    /// Appends and returns the previous length, for rollback.
    fn append_records(&mut self, bytes: &[u8]) -> io::Result<u64>;
    fn truncate_records(&mut self, len: u64) -> io::Result<()>;
    fn replace_records(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn read_cache(&self) -> io::Result<Option<Vec<u8>>>;
    fn write_cache(&mut self, bytes: &[u8]) -> io::Result<()>;
    fn clear(&mut self) -> io::Result<()>;
}

/// Files under a data directory.
pub struct DirBackend {
    dir: PathBuf,
}

impl DirBackend {
    pub fn new(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn store_path(&self) -> PathBuf {
        self.dir.join(STORE_FILE)
    }

    pub fn cache_path(&self) -> PathBuf {
        self.dir.join(CACHE_FILE)
    }
}

fn read_optional(path: &Path) -> io::Result<Option<Vec<u8>>> {
    match fs::read(path) {
        Ok(bytes) => Ok(Some(bytes)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

fn remove_optional(path: &Path) -> io::Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

impl StoreBackend for DirBackend {
    fn read_records(&self) -> io::Result<Vec<u8>> {
        Ok(read_optional(&self.store_path())?.unwrap_or_default())
    }

    fn append_records(&mut self, bytes: &[u8]) -> io::Result<u64> {
        let mut file = OpenOptions::new().create(true).append(true).open(self.store_path())?;
        let prev = file.metadata()?.len();
        file.write_all(bytes)?;
        file.sync_data()?;
        Ok(prev)
    }

    fn truncate_records(&mut self, len: u64) -> io::Result<()> {
        OpenOptions::new().write(true).open(self.store_path())?.set_len(len)
    }

    fn replace_records(&mut self, bytes: &[u8]) -> io::Result<()> {
        write_atomic(&self.store_path(), bytes)
    }

    fn read_cache(&self) -> io::Result<Option<Vec<u8>>> {
        read_optional(&self.cache_path())
    }

    fn write_cache(&mut self, bytes: &[u8]) -> io::Result<()> {
        write_atomic(&self.cache_path(), bytes)
    }

    fn clear(&mut self) -> io::Result<()> {
        remove_optional(&self.store_path())?;
        remove_optional(&self.cache_path())
    }
}

#[derive(Debug, Default, Clone)]
pub struct MemoryFiles {
    pub records: Vec<u8>,
    pub cache: Option<Vec<u8>>,
}

/// In-memory backend; clones share the same bytes, so a store can be
/// "reopened" from a clone.
#[derive(Debug, Default, Clone)]
pub struct MemoryBackend {
    files: Arc<Mutex<MemoryFiles>>,
}

impl MemoryBackend {
    pub fn snapshot(&self) -> MemoryFiles {
        self.files.lock().unwrap().clone()
    }
}

impl StoreBackend for MemoryBackend {
    fn read_records(&self) -> io::Result<Vec<u8>> {
        Ok(self.files.lock().unwrap().records.clone())
    }

    fn append_records(&mut self, bytes: &[u8]) -> io::Result<u64> {
        let mut files = self.files.lock().unwrap();
        let prev = files.records.len() as u64;
        files.records.extend_from_slice(bytes);
        Ok(prev)
    }

    fn truncate_records(&mut self, len: u64) -> io::Result<()> {
        self.files.lock().unwrap().records.truncate(len as usize);
        Ok(())
    }

    fn replace_records(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.files.lock().unwrap().records = bytes.to_vec();
        Ok(())
    }

    fn read_cache(&self) -> io::Result<Option<Vec<u8>>> {
        Ok(self.files.lock().unwrap().cache.clone())
    }

    fn write_cache(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.files.lock().unwrap().cache = Some(bytes.to_vec());
        Ok(())
    }

    fn clear(&mut self) -> io::Result<()> {
        *self.files.lock().unwrap() = MemoryFiles::default();
        Ok(())
    }
}

/// Embedding dimension of the first readable record under `dir`, if any.
pub fn detect_dimension(dir: &Path) -> Result<Option<usize>, StoreError> {
    let Some(bytes) = read_optional(&dir.join(STORE_FILE))? else {
        return Ok(None);
    };
    Ok(String::from_utf8_lossy(&bytes)
        .lines()
        .find_map(|line| serde_json::from_str::<StoredDocument>(line).ok())
        .map(|doc| doc.embedding.dimension()))
}

pub struct VectorStore {
    backend: Box<dyn StoreBackend>,
    dimension: usize,
    docs: Vec<StoredDocument>,
    positions: HashMap<u64, usize>,
    cache: BTreeSet<u64>,
    record_count: usize,
}

impl std::fmt::Debug for VectorStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorStore")
            .field("dimension", &self.dimension)
            .field("documents", &self.docs.len())
            .finish()
    }
}

impl VectorStore {
    pub fn open(backend: impl StoreBackend + 'static, dimension: usize) -> Result<Self, StoreError> {
        if dimension == 0 {
            return Err(StoreError::InvalidArgument("dimension must be positive".into()));
        }
        let mut store = Self {
            backend: Box::new(backend),
            dimension,
            docs: Vec::new(),
            positions: HashMap::new(),
            cache: BTreeSet::new(),
            record_count: 0,
        };
        store.load()?;
        Ok(store)
    }

    pub fn open_dir(dir: impl Into<PathBuf>, dimension: usize) -> Result<Self, StoreError> {
        Self::open(DirBackend::new(dir)?, dimension)
    }

    pub fn in_memory(dimension: usize) -> Self {
        Self::open(MemoryBackend::default(), dimension).expect("empty in-memory store")
    }

    fn load(&mut self) -> Result<(), StoreError> {
        let bytes = self.backend.read_records()?;
        let text = String::from_utf8_lossy(&bytes);
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_str::<StoredDocument>(line) {
                Ok(doc) => {
                    self.check_dimension(doc.embedding.dimension())?;
                    self.place(doc);
                    self.record_count += 1;
                }
                // a torn final append
                Err(_) if i + 1 == lines.len() => {
                    tracing::warn!("ignoring truncated trailing store record");
                }
                Err(e) => return Err(StoreError::Corrupt(format!("record {}: {e}", i + 1))),
            }
        }
        let ids: BTreeSet<u64> = self.positions.keys().copied().collect();
        let cached = self
            .backend
            .read_cache()?
            .and_then(|b| serde_json::from_slice::<IdCacheFile>(&b).ok())
            .map(|c| c.ids.into_iter().collect::<BTreeSet<u64>>());
        if cached.as_ref() != Some(&ids) && !(cached.is_none() && ids.is_empty()) {
            tracing::info!("rebuilding id cache from store");
            self.backend.write_cache(&Self::encode_cache(&ids))?;
        }
        self.cache = ids;
        Ok(())
    }

    fn encode_cache(ids: &BTreeSet<u64>) -> Vec<u8> {
        serde_json::to_vec(&IdCacheFile { ids: ids.iter().copied().collect() }).expect("serializable")
    }

    fn check_dimension(&self, got: usize) -> Result<(), StoreError> {
        if got != self.dimension {
            return Err(StoreError::DimensionMismatch { expected: self.dimension, got });
        }
        Ok(())
    }

    fn place(&mut self, doc: StoredDocument) {
        match self.positions.get(&doc.question_id) {
            Some(&pos) => self.docs[pos] = doc,
            None => {
                self.positions.insert(doc.question_id, self.docs.len());
                self.docs.push(doc);
            }
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[StoredDocument] {
        &self.docs
    }

    pub fn get(&self, question_id: u64) -> Option<&StoredDocument> {
        self.positions.get(&question_id).map(|&p| &self.docs[p])
    }

    /// Inserts or replaces the document for its question id. The record and
    /// the id cache are written together: if the cache write fails the record
    /// is rolled back and nothing changes.
    pub fn upsert(&mut self, doc: StoredDocument) -> Result<(), StoreError> {
        self.check_dimension(doc.embedding.dimension())?;
        if doc.question_id == 0 {
            return Err(StoreError::InvalidArgument("question id must be positive".into()));
        }
        if !doc.embedding.is_finite() {
            return Err(StoreError::InvalidArgument("embedding has non-finite values".into()));
        }
        let mut line = serde_json::to_vec(&doc).map_err(|e| StoreError::Storage(e.to_string()))?;
        line.push(b'\n');

        let prev_len = self.backend.append_records(&line)?;
        let mut ids = self.cache.clone();
        ids.insert(doc.question_id);
        if let Err(e) = self.backend.write_cache(&Self::encode_cache(&ids)) {
            if let Err(rollback) = self.backend.truncate_records(prev_len) {
                tracing::error!(%rollback, "could not roll back store append");
            }
            return Err(e.into());
        }

        self.cache = ids;
        self.place(doc);
        self.record_count += 1;
        if self.record_count > 2 * self.docs.len() + 16 {
            if let Err(e) = self.compact() {
                tracing::warn!(%e, "store compaction failed");
            }
        }
        Ok(())
    }

    /// Rewrites the record file with one line per live document.
    pub fn compact(&mut self) -> Result<(), StoreError> {
        let mut bytes = Vec::new();
        for doc in &self.docs {
            bytes.extend(serde_json::to_vec(doc).map_err(|e| StoreError::Storage(e.to_string()))?);
            bytes.push(b'\n');
        }
        self.backend.replace_records(&bytes)?;
        self.record_count = self.docs.len();
        Ok(())
    }

    /// Exact top-k by cosine similarity; equal scores keep insertion order.
    pub fn query(&self, embedding: &[f64], top_k: usize) -> Result<Vec<SearchHit>, StoreError> {
        self.check_dimension(embedding.len())?;
        if top_k == 0 {
            return Err(StoreError::InvalidArgument("top_k must be at least 1".into()));
        }
        let mut scored = Vec::with_capacity(self.docs.len());
        for (pos, doc) in self.docs.iter().enumerate() {
            let score = cosine(embedding, &doc.embedding.values).map_err(|e| match e {
                RankingError::DimensionMismatch { left, right } => {
                    StoreError::DimensionMismatch { expected: left, got: right }
                }
                RankingError::ZeroVector => StoreError::InvalidArgument("zero query vector".into()),
            })?;
            scored.push((pos, score));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        scored.truncate(top_k);
        Ok(scored
            .into_iter()
            .map(|(pos, score)| SearchHit { document: self.docs[pos].clone(), score })
            .collect())
    }

    pub fn contains(&self, question_id: u64) -> bool {
        self.cache.contains(&question_id)
    }

    /// The subset of `ids` already stored, in input order.
    pub fn known_ids(&self, ids: &[u64]) -> Vec<u64> {
        ids.iter().copied().filter(|id| self.contains(*id)).collect()
    }

    pub fn cached_ids(&self) -> Vec<u64> {
        self.cache.iter().copied().collect()
    }

    /// Removes every document and the id cache.
    pub fn clear(&mut self) -> Result<(), StoreError> {
        self.backend.clear()?;
        self.docs.clear();
        self.positions.clear();
        self.cache.clear();
        self.record_count = 0;
        Ok(())
    }
}
