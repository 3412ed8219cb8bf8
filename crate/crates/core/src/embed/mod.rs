//! Embedding vectors, similarity kernels, the vector store and its binary
//! file format, and the provider interface used to turn text and images
//! into vectors.

mod external;
mod provider;
mod store;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use external::{ExternalProvider, DEFAULT_REQUEST_TIMEOUT};
pub use provider::{provider_from_spec, EmbeddingProvider, MockProvider, ProviderError};
pub use store::{read_vectors, write_vectors, VectorFileError, VectorStore};

/// Tolerance on ‖x‖₂ for vectors declared unit-norm.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding must have at least one component")]
    Empty,
    #[error("component {index} is not finite")]
    NonFinite { index: usize },
    #[error("vector norm {norm} is not within {UNIT_NORM_TOLERANCE} of 1")]
    NotNormalized { norm: f64 },
}

/// A finite, non-empty f32 vector.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::Empty);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite { index });
        }
        Ok(Embedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }

    /// Scales to unit length, computing in f64.
    pub fn normalized(&self) -> Result<Embedding, EmbedError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(EmbedError::ZeroVector);
        }
        Ok(Embedding(
            self.0.iter().map(|&v| (v as f64 / n) as f32).collect(),
        ))
    }
}

impl fmt::Debug for Embedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Embedding(dim={}, {:?})", self.0.len(), &self.0[..self.0.len().min(4)])
    }
}

impl TryFrom<Vec<f32>> for Embedding {
    type Error = EmbedError;

    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        Embedding::new(values)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

/// Similarity metric declared by a vector store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Dot,
}

impl Metric {
    pub fn to_byte(self) -> u8 {
        match self {
            Metric::Cosine => 0,
            Metric::Dot => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Metric::Cosine),
            1 => Some(Metric::Dot),
            _ => None,
        }
    }
}

/// Vector components the kernels accept. Accumulation is always f64.
pub trait Component: Copy {
    fn widen(self) -> f64;
}

impl Component for f32 {
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
}

impl Component for f64 {
    #[inline]
    fn widen(self) -> f64 {
        self
    }
}

#[inline]
fn dot_unchecked<A: Component, B: Component>(u: &[A], v: &[B]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a.widen() * b.widen()).sum()
}

pub fn norm<T: Component>(u: &[T]) -> f64 {
    u.iter().map(|&a| a.widen() * a.widen()).sum::<f64>().sqrt()
}

pub fn dot<A: Component, B: Component>(u: &[A], v: &[B]) -> Result<f64, EmbedError> {
    if u.len() != v.len() {
        return Err(EmbedError::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(dot_unchecked(u, v))
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine<A: Component, B: Component>(u: &[A], v: &[B]) -> Result<f64, EmbedError> {
    let d = dot(u, v)?;
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((d / (nu * nv)).clamp(-1.0, 1.0))
}
