//! Graph directory layout: four JSON-lines files, every row tagged with
//! `"schema":1`, written in a fixed order so output is byte-stable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::jsonl::{check_schema, read_jsonl, write_jsonl, SCHEMA_VERSION};
use super::CorpusError;
use crate::kg::{ContentHash, Fact, FilterFlags, Gloss, ImageRecord, KnowledgeGraph, Lang, Node, NodeId, RelationType};

pub const NODES_FILE: &str = "nodes.jsonl";
pub const GLOSSES_FILE: &str = "glosses.jsonl";
pub const FACTS_FILE: &str = "facts.jsonl";
pub const IMAGES_FILE: &str = "images.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRow {
    schema: u32,
    id: NodeId,
    source_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GlossRow {
    schema: u32,
    id: String,
    node: NodeId,
    lang: Lang,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactRow {
    schema: u32,
    head: NodeId,
    relation: RelationType,
    tail: NodeId,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRow {
    schema: u32,
    node: NodeId,
    hash: ContentHash,
    locator: String,
    flags: FilterFlags,
}

pub fn write_graph(graph: &KnowledgeGraph, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    write_jsonl(
        &dir.join(NODES_FILE),
        graph.nodes().map(|n| NodeRow {
            schema: SCHEMA_VERSION,
            id: n.id.clone(),
            source_ids: n.source_ids.clone(),
        }),
    )?;
    write_jsonl(
        &dir.join(GLOSSES_FILE),
        graph.gloss_entries().map(|e| GlossRow {
            schema: SCHEMA_VERSION,
            id: e.id.as_str().to_string(),
            node: e.gloss.node.clone(),
            lang: e.gloss.lang,
            text: e.gloss.text.clone(),
        }),
    )?;
    write_jsonl(
        &dir.join(FACTS_FILE),
        graph.facts().map(|f| FactRow {
            schema: SCHEMA_VERSION,
            head: f.head.clone(),
            relation: f.relation,
            tail: f.tail.clone(),
        }),
    )?;
    write_jsonl(
        &dir.join(IMAGES_FILE),
        graph.images().map(|i| ImageRow {
            schema: SCHEMA_VERSION,
            node: i.node.clone(),
            hash: i.content_hash,
            locator: i.locator.clone(),
            flags: i.filter_flags,
        }),
    )
}

pub fn read_graph(dir: impl AsRef<Path>) -> Result<KnowledgeGraph, CorpusError> {
    let dir = dir.as_ref();
    let mut nodes: BTreeMap<NodeId, (usize, Node)> = BTreeMap::new();

    let path = dir.join(NODES_FILE);
    for (line, row) in read_jsonl::<NodeRow>(&path)? {
        check_schema(&path, line, row.schema)?;
        let mut node = Node::new(row.id.clone());
        node.source_ids = row.source_ids;
        if nodes.insert(row.id.clone(), (line, node)).is_some() {
            return Err(CorpusError::format(&path, line, format!("duplicate node {}", row.id)));
        }
    }

    let path = dir.join(GLOSSES_FILE);
    for (line, row) in read_jsonl::<GlossRow>(&path)? {
        check_schema(&path, line, row.schema)?;
        let node = owner(&mut nodes, &path, line, &row.node)?;
        let ordinal = node.glosses_in(row.lang).count();
        let expected = crate::kg::GlossId::new(&row.node, row.lang, ordinal);
        if expected.as_str() != row.id {
            return Err(CorpusError::format(
                &path,
                line,
                format!("gloss id {} does not match position {expected}", row.id),
            ));
        }
        let gloss = Gloss::new(row.node, row.lang, row.text)
            .map_err(|e| CorpusError::format(&path, line, e.to_string()))?;
        node.glosses.push(gloss);
    }

    let path = dir.join(IMAGES_FILE);
    for (line, row) in read_jsonl::<ImageRow>(&path)? {
        check_schema(&path, line, row.schema)?;
        let node = owner(&mut nodes, &path, line, &row.node)?;
        node.images.push(ImageRecord {
            node: row.node,
            content_hash: row.hash,
            locator: row.locator,
            filter_flags: row.flags,
        });
    }

    let mut graph = KnowledgeGraph::new();
    for (_, (line, node)) in nodes {
        graph
            .add_node(node)
            .map_err(|e| CorpusError::format(&dir.join(NODES_FILE), line, e.to_string()))?;
    }

    let path = dir.join(FACTS_FILE);
    for (line, row) in read_jsonl::<FactRow>(&path)? {
        check_schema(&path, line, row.schema)?;
        let added = graph
            .add_fact(Fact::new(row.head, row.relation, row.tail))
            .map_err(|e| CorpusError::format(&path, line, e.to_string()))?;
        if !added {
            return Err(CorpusError::format(&path, line, "duplicate fact"));
        }
    }
    Ok(graph)
}

fn owner<'a>(
    nodes: &'a mut BTreeMap<NodeId, (usize, Node)>,
    path: &Path,
    line: usize,
    id: &NodeId,
) -> Result<&'a mut Node, CorpusError> {
    nodes
        .get_mut(id)
        .map(|(_, n)| n)
        .ok_or_else(|| CorpusError::format(path, line, format!("unknown node {id}")))
}
