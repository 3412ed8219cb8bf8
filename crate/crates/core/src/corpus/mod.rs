//! On-disk graph format, dataset splits, statistics and node-embedding export.

mod export;
mod graph_io;
pub(crate) mod jsonl;
mod splits;
mod stats;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::embed::{ProviderError, VectorFileError};
use crate::kg::Lang;

pub use export::{export_node_embeddings, ExportSummary};
pub use graph_io::{read_graph, write_graph, FACTS_FILE, GLOSSES_FILE, IMAGES_FILE, NODES_FILE};
pub use jsonl::SCHEMA_VERSION;
pub use splits::{
    make_splits, write_splits, FactSplitRow, GlossSplitRow, ImageSplitRow, Split, SplitCounts,
    SplitManifest, SplitSpec, Splits, FACT_SPLITS_FILE, GLOSS_SPLITS_FILE, IMAGE_SPLITS_FILE,
    MANIFEST_FILE,
};
pub use stats::{compute_stats, Average, MaxImageNode, StatsReport};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{}:{line}: {reason}", file.display())]
    Format {
        file: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not enough {category}{} to split: need {needed}, have {available}",
        language.map(|l| format!(" in {l}")).unwrap_or_default())]
    InsufficientItems {
        category: &'static str,
        language: Option<Lang>,
        needed: usize,
        available: usize,
    },
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Vectors(#[from] VectorFileError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

impl CorpusError {
    pub(crate) fn format(file: &Path, line: usize, reason: impl Into<String>) -> Self {
        CorpusError::Format {
            file: file.to_path_buf(),
            line,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
