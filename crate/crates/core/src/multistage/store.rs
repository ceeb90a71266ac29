use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::RwLock;

use crate::error::{Error, Result};
use crate::model::{fallback_embedding, CachedEmbedding};

/// One published user embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub user_id: u64,
    pub vector: Vec<f64>,
    pub computed_at: u64,
    pub model_version: String,
}

impl EmbeddingRecord {
    /// Order-sensitive digest of the vector bits.
    pub fn checksum(&self) -> u64 {
        self.vector
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, v| (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3))
    }
}

/// In-process feature store keyed by user. Every published record is kept so
/// that reads can be made as of a past time; records are replaced as whole
/// `Arc`s, so a reader sees either the old or the new record.
#[derive(Debug)]
pub struct EmbeddingStore {
    dim: usize,
    records: RwLock<HashMap<u64, Vec<Arc<EmbeddingRecord>>>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: RwLock::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn put(&self, record: EmbeddingRecord) -> Result<()> {
        if record.vector.len() != self.dim {
            return Err(Error::Shape {
                op: "embedding_store.put",
                left: vec![record.vector.len()],
                right: vec![self.dim],
            });
        }
        if record.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("embedding for user {}", record.user_id),
            });
        }
        let record = Arc::new(record);
        let mut map = self.records.write();
        let history = map.entry(record.user_id).or_default();
        let at = history.partition_point(|r| r.computed_at <= record.computed_at);
        history.insert(at, record);
        Ok(())
    }

    /// Most recently computed record for `user`.
    pub fn latest(&self, user: u64) -> Option<Arc<EmbeddingRecord>> {
        self.records.read().get(&user).and_then(|h| h.last().cloned())
    }

    /// Latest record with `computed_at <= t`.
    pub fn record_asof(&self, user: u64, t: u64) -> Option<Arc<EmbeddingRecord>> {
        let map = self.records.read();
        let history = map.get(&user)?;
        let end = history.partition_point(|r| r.computed_at <= t);
        end.checked_sub(1).map(|i| Arc::clone(&history[i]))
    }

    /// The as-of vector, or the zero fallback with the missing flag.
    pub fn get_asof(&self, user: u64, t: u64) -> CachedEmbedding {
        match self.record_asof(user, t) {
            Some(r) => CachedEmbedding {
                vector: r.vector.clone(),
                missing: false,
            },
            None => fallback_embedding(self.dim),
        }
    }

    pub fn num_users(&self) -> usize {
        self.records.read().len()
    }

    pub fn num_records(&self) -> usize {
        self.records.read().values().map(Vec::len).sum()
    }
}
