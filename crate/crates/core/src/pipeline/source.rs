//! Knowledge sources: where expansion reads nodes, glosses, images and
//! relation labels from.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::jsonl::{check_schema, read_jsonl, write_jsonl, SCHEMA_VERSION};
use crate::corpus::CorpusError;
use crate::kg::{Lang, NodeId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("source error at {node}: {message}")]
pub struct SourceError {
    pub node: String,
    pub message: String,
}

impl SourceError {
    pub fn new(node: impl Into<String>, message: impl Into<String>) -> Self {
        SourceError {
            node: node.into(),
            message: message.into(),
        }
    }
}

/// An outgoing edge as the source labels it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceRelation {
    pub label: String,
    pub target: NodeId,
}

/// Everything a source knows about one node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceNode {
    pub id: NodeId,
    pub source_ids: Vec<String>,
    pub glosses: Vec<(Lang, String)>,
    pub images: Vec<String>,
    pub relations: Vec<SourceRelation>,
}

impl SourceNode {
    pub fn new(id: NodeId) -> Self {
        SourceNode {
            id,
            source_ids: Vec::new(),
            glosses: Vec::new(),
            images: Vec::new(),
            relations: Vec::new(),
        }
    }

    pub fn gloss(mut self, lang: Lang, text: impl Into<String>) -> Self {
        self.glosses.push((lang, text.into()));
        self
    }

    pub fn image(mut self, locator: impl Into<String>) -> Self {
        self.images.push(locator.into());
        self
    }

    pub fn relation(mut self, label: impl Into<String>, target: NodeId) -> Self {
        self.relations.push(SourceRelation {
            label: label.into(),
            target,
        });
        self
    }
}

/// Read-only access to a backing dataset. Must be deterministic.
pub trait KnowledgeSource {
    fn exists(&self, id: &NodeId) -> Result<bool, SourceError>;

    fn fetch_node(&self, id: &NodeId) -> Result<SourceNode, SourceError>;

    /// Raw bytes behind an image locator.
    fn fetch_image(&self, locator: &str) -> Result<Vec<u8>, SourceError>;
}

#[derive(Debug, Clone, Default)]
pub struct InMemorySource {
    nodes: BTreeMap<NodeId, SourceNode>,
    images: HashMap<String, Vec<u8>>,
}

impl InMemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_node(&mut self, node: SourceNode) {
        self.nodes.insert(node.id.clone(), node);
    }

    pub fn insert_image(&mut self, locator: impl Into<String>, bytes: Vec<u8>) {
        self.images.insert(locator.into(), bytes);
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SourceNode> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

impl KnowledgeSource for InMemorySource {
    fn exists(&self, id: &NodeId) -> Result<bool, SourceError> {
        Ok(self.nodes.contains_key(id))
    }

    fn fetch_node(&self, id: &NodeId) -> Result<SourceNode, SourceError> {
        self.nodes
            .get(id)
            .cloned()
            .ok_or_else(|| SourceError::new(id.as_str(), "no such node"))
    }

    fn fetch_image(&self, locator: &str) -> Result<Vec<u8>, SourceError> {
        self.images
            .get(locator)
            .cloned()
            .ok_or_else(|| SourceError::new(locator, "no such image"))
    }
}

pub const SOURCE_NODES_FILE: &str = "nodes.jsonl";
pub const SOURCE_GLOSSES_FILE: &str = "glosses.jsonl";
pub const SOURCE_RELATIONS_FILE: &str = "relations.jsonl";
pub const SOURCE_IMAGES_FILE: &str = "images.jsonl";

#[derive(Serialize, Deserialize)]
struct NodeRow {
    schema: u32,
    id: NodeId,
    #[serde(default)]
    source_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct GlossRow {
    schema: u32,
    node: NodeId,
    lang: String,
    text: String,
}

#[derive(Serialize, Deserialize)]
struct RelationRow {
    schema: u32,
    head: NodeId,
    label: String,
    tail: NodeId,
}

#[derive(Serialize, Deserialize)]
struct ImageRow {
    schema: u32,
    node: NodeId,
    locator: String,
}

/// Offline source backed by a directory of JSON-lines files:
///
/// - `nodes.jsonl`: `{"schema":1,"id":…,"source_ids":[…]}`
/// - `glosses.jsonl`: `{"schema":1,"node":…,"lang":…,"text":…}`
/// - `relations.jsonl`: `{"schema":1,"head":…,"label":…,"tail":…}`
/// - `images.jsonl`: `{"schema":1,"node":…,"locator":…}`
///
/// Relative image locators resolve against the directory. Glosses in
/// languages outside the supported set are ignored. Relation tails may
/// point at ids the source does not hold.
#[derive(Debug, Clone)]
pub struct FileSource {
    root: PathBuf,
    inner: InMemorySource,
}

impl FileSource {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let root = root.as_ref().to_path_buf();
        let mut nodes: BTreeMap<NodeId, SourceNode> = BTreeMap::new();

        let path = root.join(SOURCE_NODES_FILE);
        for (line, row) in read_jsonl::<NodeRow>(&path)? {
            check_schema(&path, line, row.schema)?;
            if nodes.contains_key(&row.id) {
                return Err(CorpusError::format(&path, line, format!("duplicate node {}", row.id)));
            }
            let mut n = SourceNode::new(row.id.clone());
            n.source_ids = row.source_ids;
            nodes.insert(row.id, n);
        }

        let owner = |nodes: &mut BTreeMap<NodeId, SourceNode>, path: &Path, line, id: &NodeId| {
            if nodes.contains_key(id) {
                Ok(())
            } else {
                Err(CorpusError::format(path, line, format!("unknown node {id}")))
            }
        };

        let path = root.join(SOURCE_GLOSSES_FILE);
        for (line, row) in read_jsonl::<GlossRow>(&path)? {
            check_schema(&path, line, row.schema)?;
            owner(&mut nodes, &path, line, &row.node)?;
            if let Ok(lang) = row.lang.parse::<Lang>() {
                nodes.get_mut(&row.node).unwrap().glosses.push((lang, row.text));
            }
        }

        let path = root.join(SOURCE_RELATIONS_FILE);
        for (line, row) in read_jsonl::<RelationRow>(&path)? {
            check_schema(&path, line, row.schema)?;
            owner(&mut nodes, &path, line, &row.head)?;
            nodes.get_mut(&row.head).unwrap().relations.push(SourceRelation {
                label: row.label,
                target: row.tail,
            });
        }

        let path = root.join(SOURCE_IMAGES_FILE);
        for (line, row) in read_jsonl::<ImageRow>(&path)? {
            check_schema(&path, line, row.schema)?;
            owner(&mut nodes, &path, line, &row.node)?;
            nodes.get_mut(&row.node).unwrap().images.push(row.locator);
        }

        Ok(FileSource {
            root,
            inner: InMemorySource {
                nodes,
                images: HashMap::new(),
            },
        })
    }

    /// Writes an in-memory source in this layout; image bytes go under
    /// `images/` using their locators as relative paths.
    pub fn write(source: &InMemorySource, root: impl AsRef<Path>) -> Result<(), CorpusError> {
        let root = root.as_ref();
        std::fs::create_dir_all(root).map_err(|e| CorpusError::io(root, e))?;
        let nodes: Vec<_> = source.nodes.values().collect();
        write_jsonl(
            &root.join(SOURCE_NODES_FILE),
            nodes.iter().map(|n| NodeRow {
                schema: SCHEMA_VERSION,
                id: n.id.clone(),
                source_ids: n.source_ids.clone(),
            }),
        )?;
        write_jsonl(
            &root.join(SOURCE_GLOSSES_FILE),
            nodes.iter().flat_map(|n| {
                n.glosses.iter().map(|(lang, text)| GlossRow {
                    schema: SCHEMA_VERSION,
                    node: n.id.clone(),
                    lang: lang.code().to_string(),
                    text: text.clone(),
                })
            }),
        )?;
        write_jsonl(
            &root.join(SOURCE_RELATIONS_FILE),
            nodes.iter().flat_map(|n| {
                n.relations.iter().map(|r| RelationRow {
                    schema: SCHEMA_VERSION,
                    head: n.id.clone(),
                    label: r.label.clone(),
                    tail: r.target.clone(),
                })
            }),
        )?;
        write_jsonl(
            &root.join(SOURCE_IMAGES_FILE),
            nodes.iter().flat_map(|n| {
                n.images.iter().map(|l| ImageRow {
                    schema: SCHEMA_VERSION,
                    node: n.id.clone(),
                    locator: l.clone(),
                })
            }),
        )?;
        for (locator, bytes) in &source.images {
            let path = root.join(locator);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CorpusError::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| CorpusError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl KnowledgeSource for FileSource {
    fn exists(&self, id: &NodeId) -> Result<bool, SourceError> {
        self.inner.exists(id)
    }

    fn fetch_node(&self, id: &NodeId) -> Result<SourceNode, SourceError> {
        self.inner.fetch_node(id)
    }

    fn fetch_image(&self, locator: &str) -> Result<Vec<u8>, SourceError> {
        let path = self.root.join(locator);
        std::fs::read(&path).map_err(|e| SourceError::new(locator, e.to_string()))
    }
}

/// Memoizes node fetches; sources are deterministic so this is transparent.
pub(crate) struct CachedSource<'a> {
    inner: &'a dyn KnowledgeSource,
    nodes: RefCell<HashMap<NodeId, Rc<SourceNode>>>,
    exists: RefCell<HashMap<NodeId, bool>>,
}

impl<'a> CachedSource<'a> {
    pub(crate) fn new(inner: &'a dyn KnowledgeSource) -> Self {
        CachedSource {
            inner,
            nodes: RefCell::new(HashMap::new()),
            exists: RefCell::new(HashMap::new()),
        }
    }

    pub(crate) fn node(&self, id: &NodeId) -> Result<Rc<SourceNode>, SourceError> {
        if let Some(n) = self.nodes.borrow().get(id) {
            return Ok(n.clone());
        }
        let n = Rc::new(self.inner.fetch_node(id)?);
        self.nodes.borrow_mut().insert(id.clone(), n.clone());
        Ok(n)
    }

    pub(crate) fn exists(&self, id: &NodeId) -> Result<bool, SourceError> {
        if let Some(&e) = self.exists.borrow().get(id) {
            return Ok(e);
        }
        let e = self.inner.exists(id)?;
        self.exists.borrow_mut().insert(id.clone(), e);
        Ok(e)
    }

    pub(crate) fn image(&self, locator: &str) -> Result<Vec<u8>, SourceError> {
        self.inner.fetch_image(locator)
    }
}
