//! Entity retrieval as ranking over a gloss index, and its evaluation.
//!
//! A query vector is scored against every indexed gloss by cosine. Each node
//! takes the score of its best gloss; ties go to the smaller gloss id.

mod eval;
mod index;

use thiserror::Error;

use crate::embed::{EmbedError, ProviderError, VectorFileError};
use crate::kg::{GlossId, Lang, NodeId};
use crate::pipeline::InvalidImage;

pub use eval::{evaluate, EvalQuery, EvalReport, QueryInput, DEFAULT_KS};
pub use index::{build_index, GlossIndex, IndexMeta, IndexRow, META_SUFFIX};

/// Upper bound on `k` accepted by the query entry points.
pub const MAX_K: usize = 1000;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("no glosses in the requested languages")]
    NoGlossesForLanguages,
    #[error("index is empty")]
    EmptyIndex,
    #[error("query text is empty")]
    EmptyQuery,
    #[error("k must be between 1 and {MAX_K}, got {0}")]
    InvalidK(usize),
    #[error("image retrieval needs an English-only index, this one covers {0:?}")]
    BuildMismatch(Vec<Lang>),
    #[error(transparent)]
    InvalidImage(#[from] InvalidImage),
    #[error("query dimension {got} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("provider failed{}: {source}", gloss.as_ref().map(|g| format!(" on gloss {g}")).unwrap_or_default())]
    Provider {
        gloss: Option<GlossId>,
        #[source]
        source: ProviderError,
    },
    #[error("query vector: {0}")]
    Embedding(EmbedError),
    #[error("gold node {gold} of query {query} has no gloss in the index")]
    GoldNotInIndex { query: usize, gold: NodeId },
    #[error("no queries to evaluate")]
    NoQueries,
    #[error(transparent)]
    Vectors(#[from] VectorFileError),
    #[error("index metadata {path}: {reason}")]
    Meta { path: String, reason: String },
}

impl From<EmbedError> for RetrievalError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::DimensionMismatch { expected, got } => {
                RetrievalError::DimensionMismatch { expected, got }
            }
            other => RetrievalError::Embedding(other),
        }
    }
}

impl From<ProviderError> for RetrievalError {
    fn from(source: ProviderError) -> Self {
        RetrievalError::Provider { gloss: None, source }
    }
}

/// One ranked node and the gloss that placed it.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hit {
    pub node: NodeId,
    pub score: f64,
    pub gloss: GlossId,
}

/// Ranked nodes, best first. Ranks are 1-based positions in `results`.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct QueryResult {
    pub results: Vec<Hit>,
}

fn check_k(k: usize) -> Result<(), RetrievalError> {
    if k == 0 || k > MAX_K {
        return Err(RetrievalError::InvalidK(k));
    }
    Ok(())
}

pub fn retrieve_by_sentence(
    index: &GlossIndex,
    provider: &dyn crate::embed::EmbeddingProvider,
    text: &str,
    lang: Lang,
    k: usize,
) -> Result<QueryResult, RetrievalError> {
    if text.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    check_k(k)?;
    let q = provider.embed_text(text, Some(lang))?;
    index.search(q.as_slice(), k)
}

/// Image-to-node retrieval; `index` must cover English glosses only.
pub fn retrieve_by_image(
    index: &GlossIndex,
    provider: &dyn crate::embed::EmbeddingProvider,
    image: &[u8],
    k: usize,
) -> Result<QueryResult, RetrievalError> {
    index.require_english_only()?;
    check_k(k)?;
    crate::pipeline::validate_image(image)?;
    let q = provider.embed_image(image)?;
    index.search(q.as_slice(), k)
}
