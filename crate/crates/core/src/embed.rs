//! Text embedders and the similarity used by retrieval and the reward.

use serde::{Deserialize, Serialize};

use crate::llm::{ClientError, EndpointConfig, Role};

/// Maps text to a unit-norm vector of fixed dimension.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>, ClientError>;
}

/// Hashed character-trigram frequency embedder.
///
/// Text is lowercased, every window of three Unicode scalars is hashed with
/// FNV-1a into one of `dimension` buckets, and the count vector is
/// L2-normalized. Strings shorter than three characters hash as a single gram.
/// All coordinates are non-negative so cosine similarity lies in `[0, 1]`.
/// Text without any gram (the empty string) maps to the zero vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub const DEFAULT_DIMENSION: usize = 256;

    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn bucket(&self, gram: &str) -> usize {
        (fnv1a(gram.as_bytes()) % self.dimension as u64) as usize
    }

    /// The grams a text contributes, before hashing.
    pub fn grams(text: &str) -> Vec<String> {
        let chars: Vec<char> = text.to_lowercase().chars().collect();
        match chars.len() {
            0 => Vec::new(),
            1..=2 => vec![chars.iter().collect()],
            _ => chars.windows(3).map(|w| w.iter().collect()).collect(),
        }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dimension];
        for gram in Self::grams(text) {
            v[self.bucket(&gram)] += 1.0;
        }
        normalize(&mut v);
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIMENSION)
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ClientError> {
        Ok(self.embed_text(text))
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Similarity score in `[0, 1]`: `max(0, cosine)` clamped above at 1.
pub fn unit_score(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b).clamp(0.0, 1.0)
}

/// Embeddings endpoint (`POST {base}/embeddings`, OpenAI-compatible).
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    config: EndpointConfig,
    agent: ureq::Agent,
    dimension: usize,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(config: EndpointConfig, dimension: usize) -> Self {
        let agent = config.agent();
        Self { config, agent, dimension }
    }

    pub fn from_env(dimension: usize) -> Result<Self, ClientError> {
        EndpointConfig::from_env(Role::Embeddings).map(|c| Self::new(c, dimension))
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, ClientError> {
        let mut req = self.agent.post(self.config.url("embeddings"));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&EmbeddingRequest { model: &self.config.model, input: text })
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status >= 400 {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(ClientError::Status { status, body });
        }
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| ClientError::Malformed(e.to_string()))?;
        let mut v = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| ClientError::Malformed("empty embedding list".into()))?;
        if v.len() != self.dimension {
            return Err(ClientError::Malformed(format!(
                "expected dimension {}, got {}",
                self.dimension,
                v.len()
            )));
        }
        normalize(&mut v);
        Ok(v)
    }
}
