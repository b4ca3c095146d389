use serde_json::json;

use super::{KnowledgeError, Result};
use crate::remote::{RemoteEndpoint, ENV_EMBED_MODEL, ENV_EMBED_URL};

pub const DEFAULT_DIM: usize = 256;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
    /// Stable identifier recorded in store manifests.
    fn id(&self) -> String;
}

/// Feature hashing of lowercase word unigrams and bigrams into `dim` signed
/// buckets, L2-normalized. Text without tokens embeds to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            seed: 0,
        }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // Final avalanche so neighbouring buckets get independent sign bits.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^ (h >> 33)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

impl HashingEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    fn add(&self, v: &mut [f64], feature: &str) {
        let h = fnv1a(self.seed, feature.as_bytes());
        let idx = (h % self.dim as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[idx] += sign;
    }
}

impl Embedder for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        if self.dim == 0 {
            return Err(KnowledgeError::Dimension {
                expected: 1,
                actual: 0,
            });
        }
        let tokens = tokenize(text);
        let mut v = vec![0.0; self.dim];
        for t in &tokens {
            self.add(&mut v, t);
        }
        for pair in tokens.windows(2) {
            self.add(&mut v, &format!("{} {}", pair[0], pair[1]));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }

    fn id(&self) -> String {
        format!("hashing:{}:{}", self.dim, self.seed)
    }
}

/// Embeddings endpoint speaking the common `{model, input}` ->
/// `{data: [{embedding}]}` shape.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub endpoint: RemoteEndpoint,
    pub dim: usize,
}

impl RemoteEmbedder {
    pub fn from_env(url: Option<&str>, dim: usize) -> Result<Self> {
        Ok(Self {
            endpoint: RemoteEndpoint::from_env(url, ENV_EMBED_URL, ENV_EMBED_MODEL)?,
            dim,
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let body = json!({ "model": self.endpoint.model, "input": text });
        let reply = self.endpoint.post_json(&body)?;
        let v: Vec<f64> = reply["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| KnowledgeError::Remote(crate::remote::RemoteError::Malformed {
                url: self.endpoint.url.clone(),
                message: "missing data[0].embedding".into(),
            }))?
            .iter()
            .map(|x| x.as_f64().unwrap_or(f64::NAN))
            .collect();
        if v.len() != self.dim {
            return Err(KnowledgeError::Dimension {
                expected: self.dim,
                actual: v.len(),
            });
        }
        Ok(v)
    }

    fn id(&self) -> String {
        format!("remote:{}:{}", self.endpoint.url, self.endpoint.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let e = HashingEmbedder::default();
        let a = e.embed("Mass conservation requires a divergence-free velocity").unwrap();
        let b = e.embed("Mass conservation requires a divergence-free velocity").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), DEFAULT_DIM);
        assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn case_and_punctuation_are_ignored() {
        let e = HashingEmbedder::default();
        assert_eq!(e.embed("Wave HEIGHT!").unwrap(), e.embed("wave, height").unwrap());
    }

    #[test]
    fn seed_changes_the_hash() {
        let a = HashingEmbedder::new(64, 1).embed("vortex shedding").unwrap();
        let b = HashingEmbedder::new(64, 2).embed("vortex shedding").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_text_is_zero() {
        let v = HashingEmbedder::default().embed("  ...  ").unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn related_text_scores_higher() {
        let e = HashingEmbedder::default();
        let q = e.embed("mass conservation").unwrap();
        let near = e.embed("mass conservation and divergence").unwrap();
        let far = e.embed("suspend flight routes over open water").unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!(dot(&q, &near) > dot(&q, &far));
    }
}
