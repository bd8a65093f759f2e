use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::Deserialize;

use super::{EmbedError, EmbeddingMatrix, EmbeddingProvider, TokenSeq};

#[derive(Deserialize)]
struct Record {
    key: String,
    vectors: Vec<Vec<f64>>,
}

/// Precomputed token vectors keyed by the tokenized utterance (tokens joined
/// by single spaces). One JSON document per line: `{"key": str, "vectors": [[..], ..]}`.
#[derive(Debug, Clone)]
pub struct FileEmbeddings {
    dim: usize,
    table: HashMap<String, EmbeddingMatrix>,
}

impl FileEmbeddings {
    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<Self, EmbedError> {
        Self::from_reader(BufReader::new(File::open(path)?), dim)
    }

    pub fn from_reader<R: BufRead>(reader: R, dim: usize) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::Settings("dimension must be at least 1".into()));
        }
        let mut table = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| EmbedError::Format {
                line: i + 1,
                detail: e.to_string(),
            })?;
            if rec.vectors.is_empty() {
                return Err(EmbedError::Format {
                    line: i + 1,
                    detail: format!("key {:?} has no vectors", rec.key),
                });
            }
            if let Some(bad) = rec.vectors.iter().find(|v| v.len() != dim) {
                return Err(EmbedError::Dimension {
                    key: rec.key,
                    expected: dim,
                    found: bad.len(),
                });
            }
            let m = EmbeddingMatrix::from_rows(rec.vectors).expect("rows checked above");
            table.insert(rec.key, m);
        }
        Ok(Self { dim, table })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl EmbeddingProvider for FileEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &TokenSeq) -> Result<EmbeddingMatrix, EmbedError> {
        let key = tokens.joined();
        self.table.get(&key).cloned().ok_or(EmbedError::MissingKey(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::tokenize;

    #[test]
    fn lookup_hit_and_miss() {
        let data = "{\"key\":\"hello\",\"vectors\":[[0.1,0.2]]}\n{\"key\":\"a b\",\"vectors\":[[1,2],[3,4]]}\n";
        let f = FileEmbeddings::from_reader(data.as_bytes(), 2).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f.embed(&tokenize("hello")).unwrap().row(0), &[0.1, 0.2]);
        assert_eq!(f.embed(&tokenize("A  b")).unwrap().rows(), 2);
        match f.embed(&tokenize("absent words")) {
            Err(EmbedError::MissingKey(k)) => assert_eq!(k, "absent words"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_dimension_rejected_at_load() {
        let data = "{\"key\":\"bad\",\"vectors\":[[0.1,0.2,0.3]]}\n";
        match FileEmbeddings::from_reader(data.as_bytes(), 2) {
            Err(EmbedError::Dimension { key, expected: 2, found: 3 }) => assert_eq!(key, "bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_reports_position() {
        let data = "\nnot json\n";
        assert!(matches!(
            FileEmbeddings::from_reader(data.as_bytes(), 2),
            Err(EmbedError::Format { line: 2, .. })
        ));
    }
}
