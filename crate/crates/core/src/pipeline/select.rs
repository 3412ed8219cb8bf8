//! Candidate discovery, node filtering, ranking and pool updates.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use super::source::{CachedSource, KnowledgeSource};
use super::{FilterReport, PipelineConfig, PipelineError};
use crate::kg::{
    map_relation_label, Fact, Gloss, ImageRecord, KgError, KnowledgeGraph, Node, NodeId,
    RelationType,
};
use crate::pipeline::filters::Deduplicator;

/// A surviving image plus its optional near-duplicate fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateImage {
    pub record: ImageRecord,
    pub fingerprint: Option<u64>,
}

/// Composite ordering key; larger sorts first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorityKey {
    /// Sum over distinct relation types of 1 / (1 + global count of the type).
    pub rarity: f64,
    pub distinct_types: usize,
    pub images: usize,
}

/// A neighbor of the pool under consideration for acceptance.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateNode {
    pub id: NodeId,
    /// Pool members whose edges reached this node.
    pub sources: BTreeSet<NodeId>,
    pub source_ids: Vec<String>,
    pub glosses: Vec<Gloss>,
    pub image_locators: Vec<String>,
    /// Images that passed all four filters.
    pub images: Vec<CandidateImage>,
    /// Mapped outgoing edges of the candidate, self-loops removed.
    pub edges: Vec<(RelationType, NodeId)>,
    /// Distinct types over the candidate's own edges and pool edges into it.
    pub relation_types: BTreeSet<RelationType>,
    pub priority: Option<PriorityKey>,
}

impl CandidateNode {
    pub fn new(id: NodeId) -> Self {
        CandidateNode {
            id,
            sources: BTreeSet::new(),
            source_ids: Vec::new(),
            glosses: Vec::new(),
            image_locators: Vec::new(),
            images: Vec::new(),
            edges: Vec::new(),
            relation_types: BTreeSet::new(),
            priority: None,
        }
    }
}

/// An edge whose label did not map onto a relation type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UnmappedEdge {
    pub head: NodeId,
    pub label: String,
    pub tail: NodeId,
}

#[derive(Debug, Clone, Default)]
pub struct NeighborRetrieval {
    /// Ascending by id.
    pub candidates: Vec<CandidateNode>,
    pub unmapped: Vec<UnmappedEdge>,
    /// Edges pointing at ids the source does not hold.
    pub missing: usize,
    pub self_loops: usize,
}

/// Collects first-degree neighbors of every pool member, deduplicated,
/// excluding nodes already in the pool.
pub fn retrieve_neighbors(
    pool: &BTreeSet<NodeId>,
    source: &dyn KnowledgeSource,
) -> Result<NeighborRetrieval, PipelineError> {
    retrieve_neighbors_cached(pool, &CachedSource::new(source))
}

pub(crate) fn retrieve_neighbors_cached(
    pool: &BTreeSet<NodeId>,
    source: &CachedSource<'_>,
) -> Result<NeighborRetrieval, PipelineError> {
    let mut out = NeighborRetrieval::default();
    let mut found: BTreeMap<NodeId, CandidateNode> = BTreeMap::new();

    for member in pool {
        let node = source.node(member)?;
        for rel in &node.relations {
            let Some(relation) = map_relation_label(&rel.label) else {
                out.unmapped.push(UnmappedEdge {
                    head: member.clone(),
                    label: rel.label.clone(),
                    tail: rel.target.clone(),
                });
                continue;
            };
            if rel.target == *member {
                out.self_loops += 1;
                continue;
            }
            if pool.contains(&rel.target) {
                continue;
            }
            if !found.contains_key(&rel.target) {
                if !source.exists(&rel.target)? {
                    out.missing += 1;
                    continue;
                }
                let cand = load_candidate(&rel.target, source, &mut out)?;
                found.insert(rel.target.clone(), cand);
            }
            let cand = found.get_mut(&rel.target).expect("inserted above");
            cand.sources.insert(member.clone());
            cand.relation_types.insert(relation);
        }
    }
    out.candidates = found.into_values().collect();
    Ok(out)
}

fn load_candidate(
    id: &NodeId,
    source: &CachedSource<'_>,
    out: &mut NeighborRetrieval,
) -> Result<CandidateNode, PipelineError> {
    let node = source.node(id)?;
    let mut cand = CandidateNode::new(id.clone());
    cand.source_ids = node.source_ids.clone();
    cand.glosses = node
        .glosses
        .iter()
        .filter_map(|(lang, text)| Gloss::new(id.clone(), *lang, text.clone()).ok())
        .collect();
    cand.image_locators = node.images.clone();
    for rel in &node.relations {
        match map_relation_label(&rel.label) {
            None => out.unmapped.push(UnmappedEdge {
                head: id.clone(),
                label: rel.label.clone(),
                tail: rel.target.clone(),
            }),
            Some(_) if rel.target == *id => out.self_loops += 1,
            Some(r) => {
                cand.edges.push((r, rel.target.clone()));
                cand.relation_types.insert(r);
            }
        }
    }
    Ok(cand)
}

/// Keeps a candidate with enough surviving images and distinct relation types.
pub fn filter_node(candidate: &CandidateNode, config: &PipelineConfig) -> bool {
    candidate.images.len() >= config.min_images
        && candidate.relation_types.len() >= config.min_relation_types
}

pub fn priority_key(candidate: &CandidateNode, graph: &KnowledgeGraph) -> PriorityKey {
    let rarity = candidate
        .relation_types
        .iter()
        .map(|r| 1.0 / (1.0 + graph.relation_count(*r) as f64))
        .sum();
    PriorityKey {
        rarity,
        distinct_types: candidate.relation_types.len(),
        images: candidate.images.len(),
    }
}

fn compare(a: &CandidateNode, b: &CandidateNode) -> Ordering {
    let (ka, kb) = (a.priority.expect("keyed"), b.priority.expect("keyed"));
    kb.rarity
        .total_cmp(&ka.rarity)
        .then(kb.distinct_types.cmp(&ka.distinct_types))
        .then(kb.images.cmp(&ka.images))
        .then_with(|| a.id.cmp(&b.id))
}

/// Orders candidates by rarity, then relation diversity, then image count
/// (all descending), then ascending id.
pub fn rank_candidates(mut candidates: Vec<CandidateNode>, graph: &KnowledgeGraph) -> Vec<CandidateNode> {
    for c in &mut candidates {
        c.priority = Some(priority_key(c, graph));
    }
    candidates.sort_by(compare);
    candidates
}

/// Builds the graph while tracking edges whose far end has not arrived yet
/// and the registry of committed image hashes.
#[derive(Debug, Default)]
pub struct GraphAssembler {
    graph: KnowledgeGraph,
    registry: Deduplicator,
    /// Edges waiting for their tail, keyed by that tail.
    pending: BTreeMap<NodeId, Vec<(NodeId, RelationType)>>,
}

impl GraphAssembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_registry(registry: Deduplicator) -> Self {
        GraphAssembler {
            registry,
            ..Self::default()
        }
    }

    pub fn graph(&self) -> &KnowledgeGraph {
        &self.graph
    }

    pub fn registry(&self) -> &Deduplicator {
        &self.registry
    }

    pub(crate) fn registry_mut(&mut self) -> &mut Deduplicator {
        &mut self.registry
    }

    pub fn into_graph(self) -> KnowledgeGraph {
        self.graph
    }

    /// Adds a node and every fact between it and nodes already present.
    pub fn insert(&mut self, node: Node, edges: &[(RelationType, NodeId)]) -> Result<(), KgError> {
        let id = node.id.clone();
        self.graph.add_node(node)?;
        for (relation, tail) in edges {
            if *tail == id {
                continue;
            }
            if self.graph.contains(tail.as_str()) {
                self.graph.add_fact(Fact::new(id.clone(), *relation, tail.clone()))?;
            } else {
                self.pending
                    .entry(tail.clone())
                    .or_default()
                    .push((id.clone(), *relation));
            }
        }
        if let Some(waiting) = self.pending.remove(&id) {
            for (head, relation) in waiting {
                self.graph.add_fact(Fact::new(head, relation, id.clone()))?;
            }
        }
        Ok(())
    }

    /// Re-deduplicates the candidate's images against committed ones and
    /// admits it if it still passes the node filter.
    pub fn try_accept(
        &mut self,
        candidate: &CandidateNode,
        config: &PipelineConfig,
        report: &mut FilterReport,
    ) -> Result<bool, KgError> {
        let mut kept = Vec::new();
        let mut local = Deduplicator::new();
        for img in &candidate.images {
            let fresh = !self.registry.is_duplicate(&img.record.content_hash, img.fingerprint)
                && local.admit(img.record.content_hash, img.fingerprint);
            report.acceptance.record(fresh);
            if fresh {
                kept.push(img);
            }
        }
        if kept.len() < config.min_images || candidate.relation_types.len() < config.min_relation_types {
            report.rejected_at_acceptance += 1;
            return Ok(false);
        }
        for img in &kept {
            self.registry.admit(img.record.content_hash, img.fingerprint);
        }
        let node = Node {
            id: candidate.id.clone(),
            source_ids: candidate.source_ids.clone(),
            glosses: candidate.glosses.clone(),
            images: kept.iter().map(|i| i.record.clone()).collect(),
        };
        self.insert(node, &candidate.edges)?;
        Ok(true)
    }
}

/// Accepts ranked candidates into the graph: at most `per_node_top_k` per
/// sourcing pool member and never beyond `target` nodes in total.
/// Returns the accepted ids in acceptance order.
pub fn update_pool(
    assembler: &mut GraphAssembler,
    ranked: &[CandidateNode],
    config: &PipelineConfig,
    report: &mut FilterReport,
) -> Result<Vec<NodeId>, KgError> {
    let mut quota: BTreeMap<&NodeId, usize> = BTreeMap::new();
    let mut accepted = Vec::new();
    for cand in ranked {
        if assembler.graph.node_count() >= config.target_node_count {
            break;
        }
        let slot = cand
            .sources
            .iter()
            .find(|s| quota.get(s).copied().unwrap_or(0) < config.per_node_top_k);
        let Some(slot) = slot else {
            continue;
        };
        if assembler.try_accept(cand, config, report)? {
            *quota.entry(slot).or_default() += 1;
            accepted.push(cand.id.clone());
        }
    }
    Ok(accepted)
}
