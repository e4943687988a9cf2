//! File-backed embedding store: JSONL, one `{"key", "values"}` object per line.

use std::collections::HashMap;
use std::path::Path;

use divgen_core::{EmbeddingProvider, EmbeddingVector, SimilarityError};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    key: String,
    values: Vec<f64>,
}

/// Loaded once, then read-only.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: HashMap<String, EmbeddingVector>,
}

impl EmbeddingStore {
    pub fn from_jsonl(text: &str) -> Result<Self, SimilarityError> {
        let mut store = EmbeddingStore::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| SimilarityError::StoreParse { line: i + 1, message };
            let rec: Record = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            let v = EmbeddingVector::new(rec.values).map_err(|e| parse_err(e.to_string()))?;
            if store.vectors.is_empty() {
                store.dim = v.dim();
            } else if v.dim() != store.dim {
                return Err(parse_err(format!("dimension {} differs from {}", v.dim(), store.dim)));
            }
            if store.vectors.insert(rec.key.clone(), v).is_some() {
                return Err(parse_err(format!("duplicate key {:?}", rec.key)));
            }
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_jsonl(&text)?)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Serializes records sorted by key.
    pub fn to_jsonl(&self) -> String {
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        let mut out = String::new();
        for k in keys {
            let rec = Record {
                key: k.clone(),
                values: self.vectors[k].values().to_vec(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn insert(&mut self, key: impl Into<String>, v: EmbeddingVector) -> Result<(), SimilarityError> {
        if !self.vectors.is_empty() && v.dim() != self.dim {
            return Err(SimilarityError::DimMismatch {
                expected: self.dim,
                found: v.dim(),
            });
        }
        self.dim = v.dim();
        self.vectors.insert(key.into(), v);
        Ok(())
    }
}

impl EmbeddingProvider for EmbeddingStore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, key: &str) -> Result<EmbeddingVector, SimilarityError> {
        self.vectors
            .get(key)
            .cloned()
            .ok_or_else(|| SimilarityError::KeyNotFound(key.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_lookup() {
        let s = EmbeddingStore::from_jsonl("{\"key\":\"a\",\"values\":[3,4]}\n\n{\"key\":\"b\",\"values\":[0,1]}\n")
            .unwrap();
        assert_eq!(s.dim(), 2);
        assert_eq!(s.embed_unit("a").unwrap().values(), &[0.6, 0.8]);
        assert_eq!(s.embed("xyzzy"), Err(SimilarityError::KeyNotFound("xyzzy".into())));
        assert_eq!(EmbeddingStore::from_jsonl(&s.to_jsonl()).unwrap().len(), 2);
    }

    #[test]
    fn rejects_mixed_dims_and_garbage() {
        let mixed = "{\"key\":\"a\",\"values\":[1,0]}\n{\"key\":\"b\",\"values\":[1,0,0]}\n";
        assert!(matches!(
            EmbeddingStore::from_jsonl(mixed),
            Err(SimilarityError::StoreParse { line: 2, .. })
        ));
        assert!(matches!(
            EmbeddingStore::from_jsonl("nope"),
            Err(SimilarityError::StoreParse { line: 1, .. })
        ));
        let dup = "{\"key\":\"a\",\"values\":[1]}\n{\"key\":\"a\",\"values\":[2]}\n";
        assert!(EmbeddingStore::from_jsonl(dup).is_err());
    }
}
