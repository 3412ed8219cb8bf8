//! In-memory knowledge graph: nodes with glosses and images, typed facts,
//! and the mapping from source relation labels to relation types.

mod relation;
mod types;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Deref;
use std::sync::Arc;

use thiserror::Error;

pub use relation::{map_relation_label, RelationType};
pub use types::{ContentHash, Fact, FilterFlags, Gloss, GlossId, ImageRecord, Lang, Node, NodeId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KgError {
    #[error("node id must be non-empty")]
    EmptyNodeId,
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("fact endpoint {0} is not in the graph")]
    UnknownEndpoint(NodeId),
    #[error("self-loop on {0}")]
    SelfLoop(NodeId),
    #[error("unknown relation type {0:?}")]
    UnknownRelation(String),
    #[error("unknown language code {0:?}")]
    UnknownLanguage(String),
    #[error("gloss text for {0} is empty")]
    EmptyGloss(NodeId),
    #[error("invalid content hash {0:?}")]
    InvalidContentHash(String),
    #[error("{kind} owned by {owner} attached to node {node}")]
    ForeignRecord {
        kind: &'static str,
        owner: NodeId,
        node: NodeId,
    },
    #[error("image {hash} on node {node} has not passed every filter")]
    UnfilteredImage { node: NodeId, hash: ContentHash },
}

/// A gloss together with its graph-level id.
#[derive(Debug, Clone, Copy)]
pub struct GlossEntry<'a> {
    pub id: &'a GlossId,
    pub gloss: &'a Gloss,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<NodeId, Node>,
    gloss_ids: BTreeMap<NodeId, Vec<GlossId>>,
    facts: BTreeSet<Fact>,
    relation_counts: BTreeMap<RelationType, usize>,
    adjacency: BTreeMap<NodeId, BTreeSet<(RelationType, NodeId)>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, node: Node) -> Result<(), KgError> {
        if self.nodes.contains_key(&node.id) {
            return Err(KgError::DuplicateNode(node.id));
        }
        for g in &node.glosses {
            if g.node != node.id {
                return Err(KgError::ForeignRecord {
                    kind: "gloss",
                    owner: g.node.clone(),
                    node: node.id.clone(),
                });
            }
        }
        for img in &node.images {
            if img.node != node.id {
                return Err(KgError::ForeignRecord {
                    kind: "image",
                    owner: img.node.clone(),
                    node: node.id.clone(),
                });
            }
            if !img.filter_flags.is_complete() {
                return Err(KgError::UnfilteredImage {
                    node: node.id.clone(),
                    hash: img.content_hash,
                });
            }
        }

        let mut ordinals: BTreeMap<Lang, usize> = BTreeMap::new();
        let ids = node
            .glosses
            .iter()
            .map(|g| {
                let n = ordinals.entry(g.lang).or_default();
                let id = GlossId::new(&node.id, g.lang, *n);
                *n += 1;
                id
            })
            .collect();
        self.gloss_ids.insert(node.id.clone(), ids);
        self.adjacency.insert(node.id.clone(), BTreeSet::new());
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    /// Inserts a fact. Returns `false` when the identical fact was already stored.
    pub fn add_fact(&mut self, fact: Fact) -> Result<bool, KgError> {
        for end in [&fact.head, &fact.tail] {
            if !self.nodes.contains_key(end) {
                return Err(KgError::UnknownEndpoint(end.clone()));
            }
        }
        if fact.head == fact.tail {
            return Err(KgError::SelfLoop(fact.head));
        }
        if self.facts.contains(&fact) {
            return Ok(false);
        }
        *self.relation_counts.entry(fact.relation).or_default() += 1;
        if let Some(adj) = self.adjacency.get_mut(&fact.head) {
            adj.insert((fact.relation, fact.tail.clone()));
        }
        if let Some(adj) = self.adjacency.get_mut(&fact.tail) {
            adj.insert((fact.relation, fact.head.clone()));
        }
        self.facts.insert(fact);
        Ok(true)
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    /// Nodes in ascending id order.
    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    /// Facts in (head, relation, tail) order.
    pub fn facts(&self) -> impl Iterator<Item = &Fact> {
        self.facts.iter()
    }

    pub fn contains_fact(&self, fact: &Fact) -> bool {
        self.facts.contains(fact)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn fact_count(&self) -> usize {
        self.facts.len()
    }

    pub fn gloss_count(&self) -> usize {
        self.nodes.values().map(|n| n.glosses.len()).sum()
    }

    pub fn image_count(&self) -> usize {
        self.nodes.values().map(|n| n.images.len()).sum()
    }

    pub fn relation_count(&self, relation: RelationType) -> usize {
        self.relation_counts.get(&relation).copied().unwrap_or(0)
    }

    /// Per-relation fact counts, including zero entries for every type.
    pub fn relation_counts(&self) -> BTreeMap<RelationType, usize> {
        RelationType::ALL
            .into_iter()
            .map(|r| (r, self.relation_count(r)))
            .collect()
    }

    /// First-degree neighbors over both outgoing and incoming facts, ordered
    /// by relation then neighbor id.
    pub fn neighbors(
        &self,
        id: &str,
        relation_filter: Option<RelationType>,
    ) -> Result<Vec<(RelationType, NodeId)>, KgError> {
        let adj = self.adjacency(id)?;
        Ok(adj
            .iter()
            .filter(|(r, _)| relation_filter.is_none_or(|f| f == *r))
            .cloned()
            .collect())
    }

    pub fn distinct_relation_types(&self, id: &str) -> Result<usize, KgError> {
        let adj = self.adjacency(id)?;
        let types: BTreeSet<RelationType> = adj.iter().map(|(r, _)| *r).collect();
        Ok(types.len())
    }

    fn adjacency(&self, id: &str) -> Result<&BTreeSet<(RelationType, NodeId)>, KgError> {
        self.adjacency
            .get(id)
            .ok_or_else(|| KgError::UnknownNode(id.to_string()))
    }

    /// Every gloss with its id, in node order then stored gloss order.
    pub fn gloss_entries(&self) -> impl Iterator<Item = GlossEntry<'_>> {
        self.nodes.values().flat_map(move |node| {
            let ids = &self.gloss_ids[&node.id];
            ids.iter()
                .zip(&node.glosses)
                .map(|(id, gloss)| GlossEntry { id, gloss })
        })
    }

    pub fn gloss_ids(&self, node: &str) -> Option<&[GlossId]> {
        self.gloss_ids.get(node).map(Vec::as_slice)
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.nodes.values().flat_map(|n| n.images.iter())
    }

    /// Ends construction; the returned handle is read-only and cheap to clone
    /// across threads.
    pub fn freeze(self) -> FrozenGraph {
        FrozenGraph(Arc::new(self))
    }
}

/// Immutable, shareable view of a finished graph.
#[derive(Debug, Clone)]
pub struct FrozenGraph(Arc<KnowledgeGraph>);

impl Deref for FrozenGraph {
    type Target = KnowledgeGraph;

    fn deref(&self) -> &KnowledgeGraph {
        &self.0
    }
}

impl PartialEq for FrozenGraph {
    fn eq(&self, other: &Self) -> bool {
        *self.0 == *other.0
    }
}
