use std::path::Path;

use super::CorpusError;
use crate::embed::{write_vectors, EmbeddingProvider, Metric, VectorStore};
use crate::kg::{KnowledgeGraph, NodeId};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExportSummary {
    pub exported: usize,
    /// Nodes skipped for having no gloss.
    pub without_gloss: Vec<NodeId>,
}

/// Writes one vector per node: the mean of its gloss vectors across all
/// languages. Nodes without glosses are skipped and listed.
pub fn export_node_embeddings(
    graph: &KnowledgeGraph,
    provider: &dyn EmbeddingProvider,
    path: impl AsRef<Path>,
) -> Result<ExportSummary, CorpusError> {
    let dim = provider.dim();
    let mut store = VectorStore::new(dim, Metric::Cosine, false)?;
    let mut summary = ExportSummary::default();
    for node in graph.nodes() {
        if node.glosses.is_empty() {
            summary.without_gloss.push(node.id.clone());
            continue;
        }
        let mut sum = vec![0f64; dim];
        for g in &node.glosses {
            let v = provider.embed_text(&g.text, Some(g.lang))?;
            if v.dim() != dim {
                return Err(CorpusError::InvalidSpec(format!(
                    "provider returned {} components for a gloss of {}, expected {dim}",
                    v.dim(),
                    node.id
                )));
            }
            for (s, x) in sum.iter_mut().zip(v.as_slice()) {
                *s += f64::from(*x);
            }
        }
        let n = node.glosses.len() as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
        store.insert(node.id.as_str(), &mean)?;
        summary.exported += 1;
    }
    write_vectors(&store, path)?;
    Ok(summary)
}
