use super::{EmbedError, EmbeddingMatrix, EmbeddingProvider, TokenSeq};
use crate::hash;

/// Deterministic contextual embedder.
///
/// Each token gets a seeded pseudo-random unit vector `e(tok)`; hidden states
/// follow `h_1 = e(tok_1)`, `h_t = normalize(alpha * e(tok_t) + (1 - alpha) * h_{t-1})`.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dim: usize,
    seed: u64,
    alpha: f64,
}

impl HashedEmbedder {
    pub fn new(dim: usize, seed: u64, alpha: f64) -> Result<Self, EmbedError> {
        if dim == 0 {
            return Err(EmbedError::Settings("dimension must be at least 1".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(EmbedError::Settings(format!("alpha {alpha} outside (0, 1]")));
        }
        Ok(Self { dim, seed, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Unit-norm base vector of a token.
    pub fn base_vector(&self, token: &str) -> Vec<f64> {
        let tok = hash::fnv1a(token.as_bytes());
        let mut v: Vec<f64> = (0..self.dim)
            .map(|d| hash::to_signed_unit(hash::combine(&[tok, d as u64, self.seed])))
            .collect();
        normalize(&mut v);
        v
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl EmbeddingProvider for HashedEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, tokens: &TokenSeq) -> Result<EmbeddingMatrix, EmbedError> {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(tokens.len());
        for tok in tokens.tokens() {
            let e = self.base_vector(tok);
            let h = match rows.last() {
                None => e,
                Some(prev) => {
                    let mut h: Vec<f64> = e
                        .iter()
                        .zip(prev)
                        .map(|(x, p)| self.alpha * x + (1.0 - self.alpha) * p)
                        .collect();
                    normalize(&mut h);
                    h
                }
            };
            rows.push(h);
        }
        Ok(EmbeddingMatrix::from_rows(rows).expect("token sequences are non-empty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::tokenize;

    #[test]
    fn single_token_is_base_vector() {
        let p = HashedEmbedder::new(16, 4, 0.7).unwrap();
        let m = p.embed(&tokenize("hello")).unwrap();
        assert_eq!(m.rows(), 1);
        assert_eq!(m.row(0), &p.base_vector("hello")[..]);
    }

    #[test]
    fn repeated_token_is_fixed_point() {
        let p = HashedEmbedder::new(32, 4, 0.7).unwrap();
        let m = p.embed(&tokenize("a a a")).unwrap();
        let e = p.base_vector("a");
        for r in m.iter_rows() {
            for (x, y) in r.iter().zip(&e) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_changes_later_rows() {
        let p = HashedEmbedder::new(32, 4, 0.7).unwrap();
        let a = p.embed(&tokenize("x z")).unwrap();
        let b = p.embed(&tokenize("y z")).unwrap();
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn bad_settings() {
        assert!(HashedEmbedder::new(0, 0, 0.7).is_err());
        assert!(HashedEmbedder::new(4, 0, 0.0).is_err());
        assert!(HashedEmbedder::new(4, 0, 1.5).is_err());
        assert!(HashedEmbedder::new(4, 0, 1.0).is_ok());
    }
}
