use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Hit, QueryResult, RetrievalError};
use crate::embed::{
    dot, norm, read_vectors, write_vectors, Component, EmbedError, EmbeddingProvider, Metric,
    VectorStore,
};
use crate::kg::{Gloss, GlossId, KnowledgeGraph, Lang, NodeId};

/// Appended to the vector file path to name the metadata sidecar.
pub const META_SUFFIX: &str = ".meta.json";

const META_SCHEMA: u32 = 1;

/// Sidecar row mapping a vector to its node and language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub id: GlossId,
    pub node: NodeId,
    pub lang: Lang,
}

/// Provenance stored next to an index.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexMeta {
    /// Provider spec used to embed the glosses, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<String>,
    /// Graph directory the glosses came from, if known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    schema: u32,
    languages: Vec<Lang>,
    #[serde(flatten)]
    meta: IndexMeta,
    glosses: Vec<IndexRow>,
}

/// Immutable gloss vectors with their owning nodes, rows ordered by gloss id.
#[derive(Debug, Clone)]
pub struct GlossIndex {
    store: VectorStore,
    rows: Vec<IndexRow>,
    languages: BTreeSet<Lang>,
    norms: Vec<f64>,
    node_ids: Vec<NodeId>,
    node_of_row: Vec<usize>,
    meta: IndexMeta,
}

/// Embeds every gloss whose language is in `languages`.
pub fn build_index(
    glosses: &[(GlossId, Gloss)],
    provider: &dyn EmbeddingProvider,
    languages: &BTreeSet<Lang>,
) -> Result<GlossIndex, RetrievalError> {
    let mut kept: Vec<&(GlossId, Gloss)> = glosses.iter().filter(|(_, g)| languages.contains(&g.lang)).collect();
    if kept.is_empty() {
        return Err(RetrievalError::NoGlossesForLanguages);
    }
    kept.sort_by(|a, b| a.0.cmp(&b.0));
    let mut store = VectorStore::new(provider.dim(), Metric::Cosine, false)?;
    let mut rows = Vec::with_capacity(kept.len());
    for (gid, g) in kept {
        let with_gloss = |source| RetrievalError::Provider {
            gloss: Some(gid.clone()),
            source,
        };
        let v = provider.embed_text(&g.text, Some(g.lang)).map_err(with_gloss)?;
        if v.dim() != provider.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: provider.dim(),
                got: v.dim(),
            });
        }
        store.insert(gid.as_str(), v.as_slice())?;
        rows.push(IndexRow {
            id: gid.clone(),
            node: g.node.clone(),
            lang: g.lang,
        });
    }
    GlossIndex::from_parts(store, rows, languages.clone(), IndexMeta::default())
}

impl GlossIndex {
    /// Embeds the graph's glosses in `languages`.
    pub fn from_graph(
        graph: &KnowledgeGraph,
        provider: &dyn EmbeddingProvider,
        languages: &BTreeSet<Lang>,
    ) -> Result<Self, RetrievalError> {
        let glosses: Vec<_> = graph
            .gloss_entries()
            .map(|e| (e.id.clone(), e.gloss.clone()))
            .collect();
        build_index(&glosses, provider, languages)
    }

    /// Pairs precomputed gloss vectors with the graph's glosses in
    /// `languages`. The store must hold exactly those gloss ids.
    pub fn from_vectors(
        graph: &KnowledgeGraph,
        store: VectorStore,
        languages: &BTreeSet<Lang>,
    ) -> Result<Self, RetrievalError> {
        let mut rows: BTreeMap<&str, IndexRow> = BTreeMap::new();
        for e in graph.gloss_entries() {
            if languages.contains(&e.gloss.lang) {
                rows.insert(
                    e.id.as_str(),
                    IndexRow {
                        id: e.id.clone(),
                        node: e.gloss.node.clone(),
                        lang: e.gloss.lang,
                    },
                );
            }
        }
        if rows.is_empty() {
            return Err(RetrievalError::NoGlossesForLanguages);
        }
        let mut ordered = VectorStore::new(store.dim(), store.metric(), store.is_normalized())?;
        for (gid, _) in &rows {
            let v = store.get(gid).ok_or_else(|| RetrievalError::Meta {
                path: "vectors".into(),
                reason: format!("no vector for gloss {gid}"),
            })?;
            ordered.insert(*gid, v)?;
        }
        if store.len() != rows.len() {
            let extra = store.ids().iter().find(|id| !rows.contains_key(id.as_str()));
            return Err(RetrievalError::Meta {
                path: "vectors".into(),
                reason: format!("vector {} has no matching gloss", extra.map(String::as_str).unwrap_or("?")),
            });
        }
        GlossIndex::from_parts(ordered, rows.into_values().collect(), languages.clone(), IndexMeta::default())
    }

    fn from_parts(
        store: VectorStore,
        rows: Vec<IndexRow>,
        languages: BTreeSet<Lang>,
        meta: IndexMeta,
    ) -> Result<Self, RetrievalError> {
        let bad = |reason: String| RetrievalError::Meta {
            path: "index".into(),
            reason,
        };
        if rows.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if rows.len() != store.len() {
            return Err(bad(format!("{} rows for {} vectors", rows.len(), store.len())));
        }
        let mut norms = Vec::with_capacity(rows.len());
        let mut node_ids: Vec<NodeId> = Vec::new();
        let mut node_pos: HashMap<NodeId, usize> = HashMap::new();
        let mut node_of_row = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            if store.id(i) != row.id.as_str() {
                return Err(bad(format!("row {i} is {} but vector is {}", row.id, store.id(i))));
            }
            if i > 0 && rows[i - 1].id >= row.id {
                return Err(bad(format!("gloss ids out of order at {}", row.id)));
            }
            if !languages.contains(&row.lang) {
                return Err(bad(format!("gloss {} has language {} outside the index", row.id, row.lang)));
            }
            let n = norm(store.row(i));
            if n == 0.0 {
                return Err(RetrievalError::Embedding(EmbedError::ZeroVector));
            }
            norms.push(n);
            let pos = *node_pos.entry(row.node.clone()).or_insert_with(|| {
                node_ids.push(row.node.clone());
                node_ids.len() - 1
            });
            node_of_row.push(pos);
        }
        Ok(GlossIndex {
            store,
            rows,
            languages,
            norms,
            node_ids,
            node_of_row,
            meta,
        })
    }

    pub fn with_meta(mut self, meta: IndexMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn meta(&self) -> &IndexMeta {
        &self.meta
    }

    pub fn dim(&self) -> usize {
        self.store.dim()
    }

    /// Number of indexed glosses.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.node_ids.len()
    }

    pub fn languages(&self) -> &BTreeSet<Lang> {
        &self.languages
    }

    pub fn rows(&self) -> &[IndexRow] {
        &self.rows
    }

    pub fn store(&self) -> &VectorStore {
        &self.store
    }

    pub fn contains_node(&self, node: &NodeId) -> bool {
        self.rows.iter().any(|r| r.node == *node)
    }

    pub(crate) fn require_english_only(&self) -> Result<(), RetrievalError> {
        if self.languages.len() != 1 || !self.languages.contains(&Lang::En) {
            return Err(RetrievalError::BuildMismatch(self.languages.iter().copied().collect()));
        }
        Ok(())
    }

    /// Sub-index over the rows in `languages`.
    pub fn restrict_to(&self, languages: &BTreeSet<Lang>) -> Result<GlossIndex, RetrievalError> {
        let mut store = VectorStore::new(self.store.dim(), self.store.metric(), self.store.is_normalized())?;
        let mut rows = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            if languages.contains(&row.lang) {
                store.insert(row.id.as_str(), self.store.row(i))?;
                rows.push(row.clone());
            }
        }
        if rows.is_empty() {
            return Err(RetrievalError::NoGlossesForLanguages);
        }
        let langs = self.languages.intersection(languages).copied().collect();
        GlossIndex::from_parts(store, rows, langs, self.meta.clone())
    }

    /// Cosine of the query against every row.
    pub fn gloss_scores<T: Component>(&self, query: &[T]) -> Result<Vec<f64>, RetrievalError> {
        if query.len() != self.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim(),
                got: query.len(),
            });
        }
        let qn = norm(query);
        if qn == 0.0 || !qn.is_finite() {
            return Err(RetrievalError::Embedding(EmbedError::ZeroVector));
        }
        (0..self.rows.len())
            .map(|i| {
                let d = dot(query, self.store.row(i))?;
                Ok((d / (qn * self.norms[i])).clamp(-1.0, 1.0))
            })
            .collect()
    }

    /// Best (score, row) per node, indexed like `node_ids`.
    fn node_bests(&self, scores: &[f64]) -> Vec<(f64, usize)> {
        let mut best = vec![(f64::NEG_INFINITY, usize::MAX); self.node_ids.len()];
        for (row, &s) in scores.iter().enumerate() {
            let b = &mut best[self.node_of_row[row]];
            // rows ascend by gloss id, so the first maximum wins ties
            if s > b.0 {
                *b = (s, row);
            }
        }
        best
    }

    /// Top `k` nodes for a query vector.
    pub fn search<T: Component>(&self, query: &[T], k: usize) -> Result<QueryResult, RetrievalError> {
        let scores = self.gloss_scores(query)?;
        let mut bests = self.node_bests(&scores);
        let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < bests.len() {
            bests.select_nth_unstable_by(k, order);
            bests.truncate(k);
        }
        bests.sort_unstable_by(order);
        Ok(QueryResult {
            results: bests
                .into_iter()
                .map(|(score, row)| Hit {
                    node: self.rows[row].node.clone(),
                    score,
                    gloss: self.rows[row].id.clone(),
                })
                .collect(),
        })
    }

    /// 1-based position of `node` in the full node ranking, or `None` if it
    /// has no gloss here.
    pub fn rank_of<T: Component>(&self, query: &[T], node: &NodeId) -> Result<Option<usize>, RetrievalError> {
        let Some(pos) = self.node_ids.iter().position(|n| n == node) else {
            return Ok(None);
        };
        let scores = self.gloss_scores(query)?;
        let bests = self.node_bests(&scores);
        let (gs, gr) = bests[pos];
        let ahead = bests
            .iter()
            .filter(|&&(s, r)| s > gs || (s == gs && r < gr))
            .count();
        Ok(Some(ahead + 1))
    }

    /// Writes the vectors to `path` and the metadata to `path` + [`META_SUFFIX`].
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        write_vectors(&self.store, path)?;
        let meta_path = meta_path(path);
        let file = MetaFile {
            schema: META_SCHEMA,
            languages: self.languages.iter().copied().collect(),
            meta: self.meta.clone(),
            glosses: self.rows.clone(),
        };
        let json = serde_json::to_vec(&file).map_err(|e| meta_err(&meta_path, e))?;
        std::fs::write(&meta_path, json).map_err(|e| meta_err(&meta_path, e))
    }

    /// Loads and validates an index written by [`GlossIndex::save`].
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let store = read_vectors(path)?;
        let meta_path = meta_path(path);
        let bytes = std::fs::read(&meta_path).map_err(|e| meta_err(&meta_path, e))?;
        let file: MetaFile = serde_json::from_slice(&bytes).map_err(|e| meta_err(&meta_path, e))?;
        if file.schema != META_SCHEMA {
            return Err(meta_err(&meta_path, format!("unsupported schema {}", file.schema)));
        }
        GlossIndex::from_parts(store, file.glosses, file.languages.into_iter().collect(), file.meta)
            .map_err(|e| match e {
                RetrievalError::Meta { reason, .. } => meta_err(&meta_path, reason),
                other => other,
            })
    }
}

pub(crate) fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(META_SUFFIX);
    PathBuf::from(s)
}

fn meta_err(path: &Path, e: impl ToString) -> RetrievalError {
    RetrievalError::Meta {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::MockProvider;
    use crate::kg::Node;

    fn graph() -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        for (n, glosses) in [("A", vec![(Lang::En, "a one"), (Lang::Fr, "un a")]), ("B", vec![(Lang::En, "b")])] {
            let id = NodeId::new(n).unwrap();
            let mut node = Node::new(id.clone());
            node.glosses = glosses
                .into_iter()
                .map(|(l, t)| Gloss::new(id.clone(), l, t).unwrap())
                .collect();
            g.add_node(node).unwrap();
        }
        g
    }

    fn all() -> BTreeSet<Lang> {
        Lang::ALL.into_iter().collect()
    }

    #[test]
    fn save_load_round_trip() {
        let p = MockProvider::new(6);
        let idx = GlossIndex::from_graph(&graph(), &p, &all())
            .unwrap()
            .with_meta(IndexMeta {
                provider: Some("mock:6".into()),
                graph: Some("g".into()),
            });
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("idx.vec");
        idx.save(&f).unwrap();
        let back = GlossIndex::load(&f).unwrap();
        assert_eq!(back.rows(), idx.rows());
        assert_eq!(back.meta(), idx.meta());
        assert_eq!(back.languages(), idx.languages());
        assert_eq!(back.node_count(), 2);
        let q = p.hashed("text", b"query");
        assert_eq!(back.search(q.as_slice(), 3).unwrap(), idx.search(q.as_slice(), 3).unwrap());
    }

    #[test]
    fn load_rejects_mismatched_sidecar() {
        let p = MockProvider::new(4);
        let idx = GlossIndex::from_graph(&graph(), &p, &all()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("idx.vec");
        idx.save(&f).unwrap();
        let mp = meta_path(&f);
        let mut meta: serde_json::Value = serde_json::from_slice(&std::fs::read(&mp).unwrap()).unwrap();
        meta["glosses"].as_array_mut().unwrap().pop();
        std::fs::write(&mp, meta.to_string()).unwrap();
        assert!(matches!(GlossIndex::load(&f), Err(RetrievalError::Meta { .. })));
        std::fs::remove_file(&mp).unwrap();
        assert!(matches!(GlossIndex::load(&f), Err(RetrievalError::Meta { .. })));
    }

    #[test]
    fn from_vectors_checks_coverage() {
        let g = graph();
        let p = MockProvider::new(4);
        let built = GlossIndex::from_graph(&g, &p, &all()).unwrap();
        let idx = GlossIndex::from_vectors(&g, built.store().clone(), &all()).unwrap();
        assert_eq!(idx.rows(), built.rows());

        let en: BTreeSet<_> = [Lang::En].into_iter().collect();
        assert!(GlossIndex::from_vectors(&g, built.store().clone(), &en).is_err());
        let en_built = GlossIndex::from_graph(&g, &p, &en).unwrap();
        assert!(GlossIndex::from_vectors(&g, en_built.store().clone(), &all()).is_err());
    }

    #[test]
    fn rank_of_matches_search() {
        let p = MockProvider::new(5);
        let idx = GlossIndex::from_graph(&graph(), &p, &all()).unwrap();
        let q = p.hashed("text", b"zz");
        let full = idx.search(q.as_slice(), 10).unwrap();
        for (i, h) in full.results.iter().enumerate() {
            assert_eq!(idx.rank_of(q.as_slice(), &h.node).unwrap(), Some(i + 1));
        }
        assert_eq!(idx.rank_of(q.as_slice(), &NodeId::new("nope").unwrap()).unwrap(), None);
    }
}
