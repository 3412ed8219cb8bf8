use std::collections::BTreeMap;
use std::fmt;

use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::kg::{KnowledgeGraph, Lang, NodeId, RelationType};

/// An exact ratio `total / count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Average {
    pub total: u64,
    pub count: u64,
}

impl Average {
    pub fn new(total: u64, count: u64) -> Self {
        Average { total, count }
    }

    /// `None` when the denominator is zero.
    pub fn value(&self) -> Option<f64> {
        (self.count > 0).then(|| self.total as f64 / self.count as f64)
    }

    /// Rounded half-up to one decimal using integer arithmetic.
    pub fn to_one_decimal(&self) -> Option<String> {
        if self.count == 0 {
            return None;
        }
        let (t, c) = (self.total as u128, self.count as u128);
        let tenths = (20 * t + c) / (2 * c);
        Some(format!("{}.{}", tenths / 10, tenths % 10))
    }
}

impl Serialize for Average {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("Average", 3)?;
        st.serialize_field("total", &self.total)?;
        st.serialize_field("count", &self.count)?;
        st.serialize_field("value", &self.value())?;
        st.end()
    }
}

impl fmt::Display for Average {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.to_one_decimal().as_deref().unwrap_or("n/a"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MaxImageNode {
    pub node: NodeId,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub nodes: usize,
    pub facts: usize,
    pub glosses: usize,
    pub images: usize,
    pub avg_glosses_per_node: Average,
    pub avg_images_per_node: Average,
    /// Every relation type, zero counts included.
    pub relation_counts: BTreeMap<RelationType, usize>,
    /// Fraction of facts typed related-to.
    pub related_to_share: Average,
    /// Nodes with at least one gloss, for each supported language.
    pub language_coverage: BTreeMap<Lang, usize>,
    /// Images per node -> number of nodes.
    pub image_histogram: BTreeMap<usize, usize>,
    /// Ties go to the smaller id.
    pub max_image_node: Option<MaxImageNode>,
}

pub fn compute_stats(graph: &KnowledgeGraph) -> StatsReport {
    let mut coverage: BTreeMap<Lang, usize> = Lang::ALL.iter().map(|&l| (l, 0)).collect();
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut max: Option<MaxImageNode> = None;
    let (mut glosses, mut images) = (0usize, 0usize);
    for node in graph.nodes() {
        glosses += node.glosses.len();
        images += node.images.len();
        for l in Lang::ALL {
            if node.glosses_in(l).next().is_some() {
                *coverage.get_mut(&l).expect("all languages present") += 1;
            }
        }
        *histogram.entry(node.images.len()).or_default() += 1;
        if max.as_ref().is_none_or(|m| node.images.len() > m.images) {
            max = Some(MaxImageNode {
                node: node.id.clone(),
                images: node.images.len(),
            });
        }
    }
    let relation_counts = graph.relation_counts();
    let nodes = graph.node_count() as u64;
    let facts = graph.fact_count();
    StatsReport {
        nodes: graph.node_count(),
        facts,
        glosses,
        images,
        avg_glosses_per_node: Average::new(glosses as u64, nodes),
        avg_images_per_node: Average::new(images as u64, nodes),
        related_to_share: Average::new(relation_counts[&RelationType::RelatedTo] as u64, facts as u64),
        relation_counts,
        language_coverage: coverage,
        image_histogram: histogram,
        max_image_node: max,
    }
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "nodes: {}", self.nodes)?;
        writeln!(f, "facts: {}", self.facts)?;
        writeln!(f, "glosses: {}", self.glosses)?;
        writeln!(f, "images: {}", self.images)?;
        writeln!(f, "avg glosses per node: {}", self.avg_glosses_per_node)?;
        writeln!(f, "avg images per node: {}", self.avg_images_per_node)?;
        let share = Average::new(self.related_to_share.total * 100, self.related_to_share.count);
        writeln!(f, "related-to share: {share}%")?;
        writeln!(f, "facts per relation:")?;
        for (r, c) in &self.relation_counts {
            writeln!(f, "  {r}: {c}")?;
        }
        writeln!(f, "nodes with a gloss per language:")?;
        for (l, c) in &self.language_coverage {
            writeln!(f, "  {l}: {c}")?;
        }
        writeln!(f, "images per node histogram:")?;
        for (k, c) in &self.image_histogram {
            writeln!(f, "  {k}: {c}")?;
        }
        match &self.max_image_node {
            Some(m) => writeln!(f, "most images: {} ({})", m.node, m.images),
            None => writeln!(f, "most images: n/a"),
        }
    }
}
