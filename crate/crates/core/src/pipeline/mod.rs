//! Iterative graph expansion from a seed set.
//!
//! Each iteration gathers the first-degree neighbors of every node in the
//! graph, runs their images through the filter cascade, drops nodes that
//! fail the node filter, ranks the rest and accepts up to `per_node_top_k`
//! per sourcing node until `target_node_count` is reached.

mod filters;
mod select;
mod source;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{dot, EmbedError, Embedding, EmbeddingProvider, ProviderError};
use crate::kg::{
    map_relation_label, ContentHash, FilterFlags, Gloss, ImageRecord, KgError, KnowledgeGraph,
    Lang, Node, NodeId,
};

pub use filters::{
    dedup_images, filter_gloss_match, filter_quality, filter_valid_image, gloss_match,
    validate_image, ConstantScorer, Deduplicator, InvalidImage, NearDuplicateHook, QualityScorer,
    ScorerError, TableScorer,
};
pub use select::{
    filter_node, priority_key, rank_candidates, retrieve_neighbors, update_pool, CandidateImage,
    CandidateNode, GraphAssembler, NeighborRetrieval, PriorityKey, UnmappedEdge,
};
pub use source::{
    FileSource, InMemorySource, KnowledgeSource, SourceError, SourceNode, SourceRelation,
    SOURCE_GLOSSES_FILE, SOURCE_IMAGES_FILE, SOURCE_NODES_FILE, SOURCE_RELATIONS_FILE,
};

use source::CachedSource;

#[cfg(test)]
pub(crate) use filters::tests as tests_support;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("seed set is empty")]
    EmptySeeds,
    #[error("seed {0} is not in the source")]
    UnknownSeed(NodeId),
    #[error("seed {0} listed twice")]
    DuplicateSeed(NodeId),
    #[error("{seeds} seeds exceed the target of {target} nodes")]
    TooManySeeds { seeds: usize, target: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("quality scorer failed on {hash}: {message}")]
    Scorer { hash: ContentHash, message: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bad embedding: {0}")]
    Embedding(EmbedError),
    #[error("gloss matching needs English glosses{}",
        .0.as_ref().map(|n| format!(" (node {n})")).unwrap_or_default())]
    NoEnglishGloss(Option<NodeId>),
    #[error(transparent)]
    Graph(#[from] KgError),
}

impl From<EmbedError> for PipelineError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::DimensionMismatch { expected, got } => {
                PipelineError::DimensionMismatch { expected, got }
            }
            other => PipelineError::Embedding(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub target_node_count: usize,
    pub per_node_top_k: usize,
    pub gloss_match_threshold: f64,
    pub quality_threshold: f64,
    pub min_images: usize,
    pub min_relation_types: usize,
    pub max_iterations: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            target_node_count: 90_000,
            per_node_top_k: 10,
            gloss_match_threshold: 0.5,
            quality_threshold: 0.5,
            min_images: 1,
            min_relation_types: 2,
            max_iterations: 100,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if self.target_node_count == 0 {
            return bad("target_node_count must be positive");
        }
        if self.per_node_top_k == 0 {
            return bad("per_node_top_k must be positive");
        }
        if self.min_images == 0 || self.min_relation_types == 0 {
            return bad("min_images and min_relation_types must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if !(0.0..=1.0).contains(&self.gloss_match_threshold) {
            return bad("gloss_match_threshold must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.quality_threshold) {
            return bad("quality_threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Input/output tally for one filter stage. `input == kept + removed`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    pub removed: usize,
    pub kept: usize,
}

impl StageCounts {
    pub fn record(&mut self, kept: bool) {
        self.input += 1;
        if kept {
            self.kept += 1;
        } else {
            self.removed += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TargetReached,
    FrontierExhausted,
    MaxIterations,
}

/// What happened during expansion.
///
/// Candidate images are filtered once, the first time their node is
/// seen. Node-filter counts are per evaluation, so a candidate seen in
/// several iterations is counted in each.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub seeds: usize,
    /// Validity and exact dedup applied to seed images.
    pub seed_images: StageCounts,
    pub valid: StageCounts,
    pub dedup: StageCounts,
    pub quality: StageCounts,
    pub gloss_match: StageCounts,
    pub node_filter: StageCounts,
    /// Images re-checked against the registry when their node is accepted.
    pub acceptance: StageCounts,
    pub rejected_at_acceptance: usize,
    pub invalid_reasons: BTreeMap<String, usize>,
    /// Candidates whose images could not be matched for lack of English glosses.
    pub no_english_gloss: usize,
    /// Distinct edges per unmapped label.
    pub unmapped_labels: BTreeMap<String, usize>,
    pub self_loops: usize,
    /// Distinct ids referenced by edges but absent from the source.
    pub missing_neighbors: usize,
    /// Node count after seeding, then after each iteration.
    pub pool_sizes: Vec<usize>,
    /// Nodes accepted in each iteration, in acceptance order.
    pub accepted: Vec<Vec<NodeId>>,
    pub iterations: usize,
    pub termination: Option<Termination>,
}

struct Expansion<'a> {
    source: CachedSource<'a>,
    scorer: &'a dyn QualityScorer,
    embedder: &'a dyn EmbeddingProvider,
    config: &'a PipelineConfig,
    assembler: GraphAssembler,
    report: FilterReport,
    text_vectors: HashMap<String, Embedding>,
    image_vectors: HashMap<ContentHash, Embedding>,
    quality: HashMap<ContentHash, bool>,
    /// Images surviving all four filters, per candidate, before any
    /// registry updates that happened after the first evaluation.
    evaluated: HashMap<NodeId, Vec<CandidateImage>>,
    unmapped: BTreeSet<UnmappedEdge>,
    self_loops: BTreeSet<NodeId>,
    missing: BTreeSet<NodeId>,
}

/// Expands `seeds` into a graph drawn from `source`.
///
/// Seeds are always kept. Their images go through the validity and dedup
/// filters only. Ties in every ordering resolve by ascending node id, so
/// the output depends only on the inputs.
pub fn expand(
    seeds: &[NodeId],
    source: &dyn KnowledgeSource,
    scorer: &dyn QualityScorer,
    embedder: &dyn EmbeddingProvider,
    config: &PipelineConfig,
) -> Result<(KnowledgeGraph, FilterReport), PipelineError> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(PipelineError::EmptySeeds);
    }
    let mut sorted: Vec<&NodeId> = seeds.iter().collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(PipelineError::DuplicateSeed(w[0].clone()));
    }
    if seeds.len() > config.target_node_count {
        return Err(PipelineError::TooManySeeds {
            seeds: seeds.len(),
            target: config.target_node_count,
        });
    }

    let mut run = Expansion {
        source: CachedSource::new(source),
        scorer,
        embedder,
        config,
        assembler: GraphAssembler::new(),
        report: FilterReport::default(),
        text_vectors: HashMap::new(),
        image_vectors: HashMap::new(),
        quality: HashMap::new(),
        evaluated: HashMap::new(),
        unmapped: BTreeSet::new(),
        self_loops: BTreeSet::new(),
        missing: BTreeSet::new(),
    };
    for seed in sorted {
        run.add_seed(seed)?;
    }
    run.report.seeds = seeds.len();
    run.report.pool_sizes.push(run.graph().node_count());
    run.iterate()?;
    Ok(run.finish())
}

impl<'a> Expansion<'a> {
    fn graph(&self) -> &KnowledgeGraph {
        self.assembler.graph()
    }

    fn add_seed(&mut self, seed: &NodeId) -> Result<(), PipelineError> {
        if !self.source.exists(seed)? {
            return Err(PipelineError::UnknownSeed(seed.clone()));
        }
        let src = self.source.node(seed)?;
        let mut images = Vec::new();
        for locator in &src.images {
            let Some(bytes) = self.fetch_valid(locator) else {
                self.report.seed_images.record(false);
                continue;
            };
            let hash = ContentHash::of(&bytes);
            let fp = self.assembler.registry().fingerprint(&bytes);
            let kept = self.assembler.registry_mut().admit(hash, fp);
            self.report.seed_images.record(kept);
            if kept {
                images.push(ImageRecord {
                    node: seed.clone(),
                    content_hash: hash,
                    locator: locator.clone(),
                    filter_flags: FilterFlags::ALL,
                });
            }
        }
        let mut edges = Vec::new();
        for rel in &src.relations {
            match map_relation_label(&rel.label) {
                None => {
                    self.unmapped.insert(UnmappedEdge {
                        head: seed.clone(),
                        label: rel.label.clone(),
                        tail: rel.target.clone(),
                    });
                }
                Some(_) if rel.target == *seed => {
                    self.self_loops.insert(seed.clone());
                }
                Some(r) => edges.push((r, rel.target.clone())),
            }
        }
        let node = Node {
            id: seed.clone(),
            source_ids: src.source_ids.clone(),
            glosses: src
                .glosses
                .iter()
                .filter_map(|(lang, text)| Gloss::new(seed.clone(), *lang, text.clone()).ok())
                .collect(),
            images,
        };
        self.assembler.insert(node, &edges)?;
        Ok(())
    }

    /// Fetches and decodes; failures are tallied as invalid and yield `None`.
    fn fetch_valid(&mut self, locator: &str) -> Option<Vec<u8>> {
        let reason = match self.source.image(locator) {
            Err(_) => "fetch_failed",
            Ok(bytes) => match validate_image(&bytes) {
                Ok(_) => return Some(bytes),
                Err(e) => e.code(),
            },
        };
        *self.report.invalid_reasons.entry(reason.to_string()).or_default() += 1;
        None
    }

    fn iterate(&mut self) -> Result<(), PipelineError> {
        let termination = loop {
            if self.graph().node_count() >= self.config.target_node_count {
                break Termination::TargetReached;
            }
            if self.report.iterations >= self.config.max_iterations {
                break Termination::MaxIterations;
            }
            self.report.iterations += 1;

            let pool: BTreeSet<NodeId> = self.graph().node_ids().cloned().collect();
            let found = select::retrieve_neighbors_cached(&pool, &self.source)?;
            self.unmapped.extend(found.unmapped);
            if found.candidates.is_empty() {
                break Termination::FrontierExhausted;
            }
            self.note_missing_and_loops(&pool)?;

            let mut passing = Vec::new();
            for mut cand in found.candidates {
                cand.images = self.candidate_images(&cand)?;
                let keep = filter_node(&cand, self.config);
                self.report.node_filter.record(keep);
                if keep {
                    passing.push(cand);
                }
            }
            let ranked = rank_candidates(passing, self.graph());
            let accepted = update_pool(&mut self.assembler, &ranked, self.config, &mut self.report)?;
            self.report.pool_sizes.push(self.graph().node_count());
            let done = accepted.is_empty();
            self.report.accepted.push(accepted);
            if done {
                break if self.graph().node_count() >= self.config.target_node_count {
                    Termination::TargetReached
                } else {
                    Termination::FrontierExhausted
                };
            }
        };
        self.report.termination = Some(termination);
        Ok(())
    }

    /// Records dangling targets and self-loops as distinct ids, so rescanning
    /// the pool each iteration does not inflate the counts.
    fn note_missing_and_loops(&mut self, pool: &BTreeSet<NodeId>) -> Result<(), PipelineError> {
        for member in pool {
            let node = self.source.node(member)?;
            for rel in &node.relations {
                if map_relation_label(&rel.label).is_none() {
                    continue;
                }
                if rel.target == *member {
                    self.self_loops.insert(member.clone());
                } else if !pool.contains(&rel.target) && !self.source.exists(&rel.target)? {
                    self.missing.insert(rel.target.clone());
                }
            }
        }
        Ok(())
    }

    /// Runs the four image filters once per candidate, then drops anything
    /// committed to the registry since.
    fn candidate_images(&mut self, cand: &CandidateNode) -> Result<Vec<CandidateImage>, PipelineError> {
        if !self.evaluated.contains_key(&cand.id) {
            let imgs = self.filter_images(cand)?;
            self.evaluated.insert(cand.id.clone(), imgs);
        }
        let registry = self.assembler.registry();
        Ok(self.evaluated[&cand.id]
            .iter()
            .filter(|i| !registry.is_duplicate(&i.record.content_hash, i.fingerprint))
            .cloned()
            .collect())
    }

    fn filter_images(&mut self, cand: &CandidateNode) -> Result<Vec<CandidateImage>, PipelineError> {
        let english: Vec<&Gloss> = cand.glosses.iter().filter(|g| g.lang == Lang::En).collect();
        if english.is_empty() && !cand.image_locators.is_empty() {
            self.report.no_english_gloss += 1;
        }
        let mut local = Deduplicator::new();
        let mut out = Vec::new();
        for locator in &cand.image_locators {
            let Some(bytes) = self.fetch_valid(locator) else {
                self.report.valid.record(false);
                continue;
            };
            self.report.valid.record(true);

            let hash = ContentHash::of(&bytes);
            let registry = self.assembler.registry();
            let fp = registry.fingerprint(&bytes);
            let unique = !registry.is_duplicate(&hash, fp) && local.admit(hash, fp);
            self.report.dedup.record(unique);
            if !unique {
                continue;
            }

            let good = match self.quality.get(&hash) {
                Some(&g) => g,
                None => {
                    let g = filter_quality(&bytes, &hash, self.scorer, self.config.quality_threshold)?;
                    self.quality.insert(hash, g);
                    g
                }
            };
            self.report.quality.record(good);
            if !good {
                continue;
            }

            let matched = !english.is_empty() && self.matches_gloss(&bytes, hash, &english)?;
            self.report.gloss_match.record(matched);
            if matched {
                out.push(CandidateImage {
                    record: ImageRecord {
                        node: cand.id.clone(),
                        content_hash: hash,
                        locator: locator.clone(),
                        filter_flags: FilterFlags::ALL,
                    },
                    fingerprint: fp,
                });
            }
        }
        Ok(out)
    }

    fn matches_gloss(&mut self, bytes: &[u8], hash: ContentHash, english: &[&Gloss]) -> Result<bool, PipelineError> {
        let dim = self.embedder.dim();
        if !self.image_vectors.contains_key(&hash) {
            let v = self.embedder.embed_image(bytes)?;
            check_dim(dim, &v)?;
            self.image_vectors.insert(hash, v);
        }
        let mut best = f64::NEG_INFINITY;
        for g in english {
            if !self.text_vectors.contains_key(&g.text) {
                let v = self.embedder.embed_text(&g.text, Some(Lang::En))?;
                check_dim(dim, &v)?;
                self.text_vectors.insert(g.text.clone(), v);
            }
            let image = self.image_vectors[&hash].as_slice();
            best = best.max(dot(image, self.text_vectors[&g.text].as_slice())?);
        }
        Ok(best > self.config.gloss_match_threshold)
    }

    fn finish(mut self) -> (KnowledgeGraph, FilterReport) {
        for e in &self.unmapped {
            *self.report.unmapped_labels.entry(e.label.clone()).or_default() += 1;
        }
        self.report.self_loops = self.self_loops.len();
        self.report.missing_neighbors = self.missing.len();
        (self.assembler.into_graph(), self.report)
    }
}

fn check_dim(expected: usize, v: &Embedding) -> Result<(), PipelineError> {
    if v.dim() != expected {
        return Err(PipelineError::DimensionMismatch {
            expected,
            got: v.dim(),
        });
    }
    Ok(())
}
