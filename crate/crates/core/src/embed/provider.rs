use std::collections::HashMap;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{EmbedError, Embedding, ExternalProvider};
use crate::kg::Lang;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider protocol error: {0}")]
    Protocol(String),
    #[error("provider process exited: {0}")]
    Crash(String),
    #[error("provider did not answer within {0:?}")]
    Timeout(Duration),
    #[error("provider reported: {0}")]
    Provider(String),
    #[error("failed to start provider: {0}")]
    Spawn(#[source] std::io::Error),
    #[error("bad provider vector: {0}")]
    Vector(#[from] EmbedError),
    #[error("invalid provider spec {0:?}")]
    BadSpec(String),
}

/// Turns text and images into vectors of one shared dimension.
///
/// Implementations must be deterministic: equal input gives equal output.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Whether every vector this provider returns has unit L2 norm.
    fn normalized(&self) -> bool;

    fn embed_text(&self, text: &str, lang: Option<Lang>) -> Result<Embedding, ProviderError>;

    fn embed_image(&self, bytes: &[u8]) -> Result<Embedding, ProviderError>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn normalized(&self) -> bool {
        (**self).normalized()
    }
    fn embed_text(&self, text: &str, lang: Option<Lang>) -> Result<Embedding, ProviderError> {
        (**self).embed_text(text, lang)
    }
    fn embed_image(&self, bytes: &[u8]) -> Result<Embedding, ProviderError> {
        (**self).embed_image(bytes)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for std::sync::Arc<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn normalized(&self) -> bool {
        (**self).normalized()
    }
    fn embed_text(&self, text: &str, lang: Option<Lang>) -> Result<Embedding, ProviderError> {
        (**self).embed_text(text, lang)
    }
    fn embed_image(&self, bytes: &[u8]) -> Result<Embedding, ProviderError> {
        (**self).embed_image(bytes)
    }
}

/// Table-backed provider for tests and offline runs.
///
/// Known inputs return their table vector. Anything else gets a unit vector
/// expanded from a SHA-256 of the input, so results are stable across
/// processes. Text lookup ignores the language.
#[derive(Debug, Clone)]
pub struct MockProvider {
    dim: usize,
    text: HashMap<String, Embedding>,
    images: HashMap<Vec<u8>, Embedding>,
}

impl MockProvider {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "mock provider needs a positive dimension");
        MockProvider {
            dim,
            text: HashMap::new(),
            images: HashMap::new(),
        }
    }

    pub fn with_text(mut self, text: impl Into<String>, vector: Embedding) -> Result<Self, EmbedError> {
        self.check(&vector)?;
        self.text.insert(text.into(), vector);
        Ok(self)
    }

    pub fn with_image(mut self, bytes: impl Into<Vec<u8>>, vector: Embedding) -> Result<Self, EmbedError> {
        self.check(&vector)?;
        self.images.insert(bytes.into(), vector);
        Ok(self)
    }

    pub fn insert_text(&mut self, text: impl Into<String>, vector: Embedding) -> Result<(), EmbedError> {
        self.check(&vector)?;
        self.text.insert(text.into(), vector);
        Ok(())
    }

    pub fn insert_image(&mut self, bytes: impl Into<Vec<u8>>, vector: Embedding) -> Result<(), EmbedError> {
        self.check(&vector)?;
        self.images.insert(bytes.into(), vector);
        Ok(())
    }

    fn check(&self, v: &Embedding) -> Result<(), EmbedError> {
        if v.dim() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: v.dim(),
            });
        }
        Ok(())
    }

    /// The deterministic fallback vector for an input under a domain tag.
    pub fn hashed(&self, domain: &str, input: &[u8]) -> Embedding {
        let mut raw = Vec::with_capacity(self.dim);
        let mut counter = 0u32;
        while raw.len() < self.dim {
            let mut h = Sha256::new();
            h.update(domain.as_bytes());
            h.update([0u8]);
            h.update(input);
            h.update(counter.to_le_bytes());
            let block = h.finalize();
            for chunk in block.chunks_exact(4) {
                if raw.len() == self.dim {
                    break;
                }
                let x = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
                raw.push(x as f64 / u32::MAX as f64 * 2.0 - 1.0);
            }
            counter += 1;
        }
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let values = if n == 0.0 {
            let mut e = vec![0.0; self.dim];
            e[0] = 1.0;
            e
        } else {
            raw.iter().map(|x| (x / n) as f32).collect()
        };
        Embedding(values)
    }
}

impl EmbeddingProvider for MockProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn normalized(&self) -> bool {
        self.text.values().chain(self.images.values()).all(Embedding::is_unit)
    }

    fn embed_text(&self, text: &str, _lang: Option<Lang>) -> Result<Embedding, ProviderError> {
        Ok(match self.text.get(text) {
            Some(v) => v.clone(),
            None => self.hashed("text", text.as_bytes()),
        })
    }

    fn embed_image(&self, bytes: &[u8]) -> Result<Embedding, ProviderError> {
        Ok(match self.images.get(bytes) {
            Some(v) => v.clone(),
            None => self.hashed("image", bytes),
        })
    }
}

/// Builds a provider from a command-line style spec.
///
/// `mock` or `mock:DIM` gives a hash-backed [`MockProvider`] (dimension
/// defaults to `default_dim`); anything else is run as a shell command
/// speaking the JSON-lines protocol.
pub fn provider_from_spec(
    spec: &str,
    default_dim: usize,
    timeout: Duration,
) -> Result<Box<dyn EmbeddingProvider>, ProviderError> {
    let spec = spec.trim();
    if spec == "mock" {
        return Ok(Box::new(MockProvider::new(default_dim.max(1))));
    }
    if let Some(dim) = spec.strip_prefix("mock:") {
        let dim: usize = dim
            .parse()
            .ok()
            .filter(|d| *d > 0)
            .ok_or_else(|| ProviderError::BadSpec(spec.to_string()))?;
        return Ok(Box::new(MockProvider::new(dim)));
    }
    if spec.is_empty() {
        return Err(ProviderError::BadSpec(spec.to_string()));
    }
    Ok(Box::new(ExternalProvider::spawn(spec, timeout)?))
}
