//! Tokenization, embedding providers and scorer input features.
//!
//! A provider maps a token sequence to one `k`-dimensional vector per token.
//! Token vectors are pooled into one vector per utterance, and the pooled
//! context slots, query and response are combined into the scorer input.

mod file;
mod hashed;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use file::FileEmbeddings;
pub use hashed::HashedEmbedder;

pub const EMPTY_TOKEN: &str = "<empty>";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("no stored embedding for utterance {0:?}")]
    MissingKey(String),
    #[error("embedding {key:?}: expected dimension {expected}, found {found}")]
    Dimension {
        key: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding file line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("invalid provider settings: {0}")]
    Settings(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Non-empty sequence of non-empty tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(Vec<String>);

impl TokenSeq {
    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Tokens joined by single spaces; the key format of embedding files.
    pub fn joined(&self) -> String {
        self.0.join(" ")
    }
}

/// Lowercases and splits on Unicode whitespace. Empty input yields `["<empty>"]`.
pub fn tokenize(text: &str) -> TokenSeq {
    let toks: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if toks.is_empty() {
        TokenSeq(vec![EMPTY_TOKEN.to_string()])
    } else {
        TokenSeq(toks)
    }
}

/// `rows x dim` token vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Option<Self> {
        let dim = rows.first()?.len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return None;
        }
        Some(Self {
            dim,
            data: rows.into_iter().flatten().collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, tokens: &TokenSeq) -> Result<EmbeddingMatrix, EmbedError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenPool {
    /// Last hidden state only.
    #[default]
    Last,
    Avg,
    Max,
    Sum,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    #[default]
    Concat,
    Sum,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolingSpec {
    pub token_pool: TokenPool,
    pub combine: Combine,
}

impl PoolingSpec {
    pub fn input_dim(&self, k: usize, window: usize) -> usize {
        match self.combine {
            Combine::Concat => (window + 2) * k,
            Combine::Sum => k,
        }
    }
}

pub fn pool_tokens(m: &EmbeddingMatrix, mode: TokenPool) -> Vec<f64> {
    let k = m.dim();
    match mode {
        TokenPool::Last => m.row(m.rows() - 1).to_vec(),
        TokenPool::Sum | TokenPool::Avg => {
            let mut acc = vec![0.0; k];
            for row in m.iter_rows() {
                for (a, x) in acc.iter_mut().zip(row) {
                    *a += x;
                }
            }
            if mode == TokenPool::Avg {
                let n = m.rows() as f64;
                acc.iter_mut().for_each(|a| *a /= n);
            }
            acc
        }
        TokenPool::Max => {
            let mut acc = vec![f64::NEG_INFINITY; k];
            for row in m.iter_rows() {
                for (a, &x) in acc.iter_mut().zip(row) {
                    *a = a.max(x);
                }
            }
            acc
        }
    }
}

/// Embeds and pools a single utterance.
pub fn pooled_utterance(
    provider: &dyn EmbeddingProvider,
    text: &str,
    mode: TokenPool,
) -> Result<Vec<f64>, EmbedError> {
    Ok(pool_tokens(&provider.embed(&tokenize(text))?, mode))
}

fn combine_pooled(spec: &PoolingSpec, window: usize, k: usize, slots: &[&[f64]], query: &[f64], response: &[f64]) -> Vec<f64> {
    // `slots` holds the present context, oldest first; padding goes in front.
    let missing = window - slots.len();
    match spec.combine {
        Combine::Concat => {
            let mut out = Vec::with_capacity((window + 2) * k);
            out.resize(missing * k, 0.0);
            for s in slots {
                out.extend_from_slice(s);
            }
            out.extend_from_slice(query);
            out.extend_from_slice(response);
            out
        }
        Combine::Sum => {
            let mut out = vec![0.0; k];
            for v in slots.iter().copied().chain([query, response]) {
                for (o, x) in out.iter_mut().zip(v) {
                    *o += x;
                }
            }
            out
        }
    }
}

/// Scorer input for one (context, query, response) triple. Contexts longer
/// than `window` keep their most recent `window` utterances.
pub fn build_features(
    provider: &dyn EmbeddingProvider,
    spec: &PoolingSpec,
    context: &[String],
    query: &str,
    response: &str,
    window: usize,
) -> Result<Vec<f64>, EmbedError> {
    let ctx = &context[context.len().saturating_sub(window)..];
    let pooled: Vec<Vec<f64>> = ctx
        .iter()
        .map(|c| pooled_utterance(provider, c, spec.token_pool))
        .collect::<Result<_, _>>()?;
    let slots: Vec<&[f64]> = pooled.iter().map(Vec::as_slice).collect();
    let q = pooled_utterance(provider, query, spec.token_pool)?;
    let r = pooled_utterance(provider, response, spec.token_pool)?;
    Ok(combine_pooled(spec, window, provider.dim(), &slots, &q, &r))
}

/// [`build_features`] with a per-utterance cache of pooled vectors. Safe to
/// share across threads.
pub struct Featurizer {
    provider: Arc<dyn EmbeddingProvider>,
    spec: PoolingSpec,
    window: usize,
    cache: RwLock<HashMap<String, Arc<[f64]>>>,
}

impl std::fmt::Debug for Featurizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Featurizer")
            .field("k", &self.provider.dim())
            .field("spec", &self.spec)
            .field("window", &self.window)
            .finish()
    }
}

impl Featurizer {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, spec: PoolingSpec, window: usize) -> Self {
        Self {
            provider,
            spec,
            window,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    pub fn spec(&self) -> PoolingSpec {
        self.spec
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim(self.provider.dim(), self.window)
    }

    pub fn pooled(&self, text: &str) -> Result<Arc<[f64]>, EmbedError> {
        if let Some(v) = self.cache.read().expect("featurizer cache poisoned").get(text) {
            return Ok(Arc::clone(v));
        }
        let v: Arc<[f64]> = pooled_utterance(self.provider.as_ref(), text, self.spec.token_pool)?.into();
        self.cache
            .write()
            .expect("featurizer cache poisoned")
            .insert(text.to_string(), Arc::clone(&v));
        Ok(v)
    }

    pub fn features(&self, context: &[String], query: &str, response: &str) -> Result<Vec<f64>, EmbedError> {
        let ctx = &context[context.len().saturating_sub(self.window)..];
        let pooled: Vec<Arc<[f64]>> = ctx.iter().map(|c| self.pooled(c)).collect::<Result<_, _>>()?;
        let slots: Vec<&[f64]> = pooled.iter().map(|p| &p[..]).collect();
        let q = self.pooled(query)?;
        let r = self.pooled(response)?;
        Ok(combine_pooled(&self.spec, self.window, self.provider.dim(), &slots, &q, &r))
    }
}

fn default_k() -> usize {
    64
}

fn default_alpha() -> f64 {
    0.7
}

/// Serializable provider settings shared by configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    Hashed {
        #[serde(default = "default_k")]
        k: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    File {
        path: PathBuf,
        k: usize,
    },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Hashed {
            k: default_k(),
            seed: 0,
            alpha: default_alpha(),
        }
    }
}

impl ProviderConfig {
    pub fn dim(&self) -> usize {
        match self {
            ProviderConfig::Hashed { k, .. } | ProviderConfig::File { k, .. } => *k,
        }
    }

    pub fn build(&self) -> Result<Arc<dyn EmbeddingProvider>, EmbedError> {
        Ok(match self {
            ProviderConfig::Hashed { k, seed, alpha } => Arc::new(HashedEmbedder::new(*k, *seed, *alpha)?),
            ProviderConfig::File { path, k } => Arc::new(FileEmbeddings::load(path, *k)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Hello  World").tokens(), ["hello", "world"]);
        assert_eq!(tokenize("").tokens(), [EMPTY_TOKEN]);
        assert_eq!(tokenize(" \t\n").tokens(), [EMPTY_TOKEN]);
        assert_eq!(tokenize("topic T ask S").len(), 4);
    }

    #[test]
    fn pooling_modes() {
        let x = m(&[&[1.0, 3.0], &[3.0, 5.0]]);
        assert_eq!(pool_tokens(&x, TokenPool::Avg), vec![2.0, 4.0]);
        assert_eq!(pool_tokens(&x, TokenPool::Last), vec![3.0, 5.0]);
        assert_eq!(pool_tokens(&x, TokenPool::Max), vec![3.0, 5.0]);
        assert_eq!(pool_tokens(&x, TokenPool::Sum), vec![4.0, 8.0]);
        let y = m(&[&[-1.0, 2.0], &[-3.0, 1.0]]);
        assert_eq!(pool_tokens(&y, TokenPool::Max), vec![-1.0, 2.0]);
    }

    #[test]
    fn ragged_matrix_rejected() {
        assert!(EmbeddingMatrix::from_rows(vec![vec![1.0], vec![1.0, 2.0]]).is_none());
        assert!(EmbeddingMatrix::from_rows(vec![]).is_none());
        assert!(EmbeddingMatrix::from_rows(vec![vec![]]).is_none());
    }

    #[test]
    fn concat_pads_missing_context() {
        let p = HashedEmbedder::new(3, 1, 0.7).unwrap();
        let f = build_features(&p, &PoolingSpec::default(), &[], "q", "r", 2).unwrap();
        assert_eq!(f.len(), 12);
        assert!(f[..6].iter().all(|&x| x == 0.0));
        assert!(f[6..].iter().any(|&x| x != 0.0));

        // one context utterance lands in the newest slot
        let g = build_features(&p, &PoolingSpec::default(), &["c".into()], "q", "r", 2).unwrap();
        assert!(g[..3].iter().all(|&x| x == 0.0));
        assert_eq!(&g[3..6], &pooled_utterance(&p, "c", TokenPool::Last).unwrap()[..]);
    }

    #[test]
    fn concat_full_context_dim() {
        let p = HashedEmbedder::new(64, 1, 0.7).unwrap();
        let ctx = vec!["a b".to_string(), "c".to_string()];
        let f = build_features(&p, &PoolingSpec::default(), &ctx, "q", "r", 2).unwrap();
        assert_eq!(f.len(), 256);
    }

    #[test]
    fn sum_of_identical_vectors() {
        let p = HashedEmbedder::new(8, 3, 0.7).unwrap();
        let spec = PoolingSpec {
            token_pool: TokenPool::Last,
            combine: Combine::Sum,
        };
        let ctx = vec!["same".to_string(), "same".to_string()];
        let f = build_features(&p, &spec, &ctx, "same", "same", 2).unwrap();
        let v = pooled_utterance(&p, "same", TokenPool::Last).unwrap();
        for (a, b) in f.iter().zip(&v) {
            assert!((a - 4.0 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn featurizer_matches_direct_build() {
        let provider: Arc<dyn EmbeddingProvider> = Arc::new(HashedEmbedder::new(16, 9, 0.5).unwrap());
        for spec in [
            PoolingSpec::default(),
            PoolingSpec {
                token_pool: TokenPool::Max,
                combine: Combine::Sum,
            },
        ] {
            let fz = Featurizer::new(Arc::clone(&provider), spec, 2);
            let ctx = vec!["one two".into(), "three".into(), "four five".into()];
            for _ in 0..2 {
                let a = fz.features(&ctx, "q x", "r y").unwrap();
                let b = build_features(provider.as_ref(), &spec, &ctx, "q x", "r y", 2).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.len(), fz.input_dim());
            }
        }
    }

    #[test]
    fn provider_config_roundtrip() {
        let cfg: ProviderConfig = serde_json::from_str(r#"{"kind":"hashed","k":8}"#).unwrap();
        assert_eq!(
            cfg,
            ProviderConfig::Hashed {
                k: 8,
                seed: 0,
                alpha: 0.7
            }
        );
        assert_eq!(cfg.build().unwrap().dim(), 8);
    }
}
