//! Random train/valid/test splits over glosses, images and facts.
//!
//! Glosses are split per language with exactly `eval_count_per_language`
//! entries in each of valid and test. Each (category, language) pair
//! shuffles with its own seed-derived stream, so adding a language leaves
//! the others untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::jsonl::{write_jsonl, SCHEMA_VERSION};
use super::CorpusError;
use crate::kg::{ContentHash, GlossId, KnowledgeGraph, Lang, NodeId, RelationType};

pub const GLOSS_SPLITS_FILE: &str = "gloss_splits.jsonl";
pub const IMAGE_SPLITS_FILE: &str = "image_splits.jsonl";
pub const FACT_SPLITS_FILE: &str = "fact_splits.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub eval_count_per_language: usize,
    #[serde(default)]
    pub image_eval_count: usize,
    #[serde(default)]
    pub fact_eval_count: usize,
    pub rng_seed: u64,
    /// Languages to split; defaults to every language with a gloss.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub languages: Option<Vec<Lang>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossSplitRow {
    pub schema: u32,
    pub split: Split,
    pub id: GlossId,
    pub node: NodeId,
    pub lang: Lang,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSplitRow {
    pub schema: u32,
    pub split: Split,
    pub node: NodeId,
    pub hash: ContentHash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactSplitRow {
    pub schema: u32,
    pub split: Split,
    pub head: NodeId,
    pub relation: RelationType,
    pub tail: NodeId,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitCounts {
    fn add(&mut self, s: Split) {
        match s {
            Split::Train => self.train += 1,
            Split::Valid => self.valid += 1,
            Split::Test => self.test += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema: u32,
    pub spec: SplitSpec,
    pub languages: Vec<Lang>,
    pub glosses: BTreeMap<Lang, SplitCounts>,
    pub images: SplitCounts,
    pub facts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    /// Ordered by split, then item.
    pub glosses: Vec<GlossSplitRow>,
    pub images: Vec<ImageSplitRow>,
    pub facts: Vec<FactSplitRow>,
    pub manifest: SplitManifest,
}

fn stream(seed: u64, category: &str, lang: Option<Lang>) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(category.as_bytes());
    h.update([0]);
    h.update(lang.map(Lang::code).unwrap_or("").as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Shuffles sorted `items` and labels the first `eval` valid, the next
/// `eval` test and the rest train.
fn assign<T: Ord + Clone>(
    mut items: Vec<T>,
    eval: usize,
    rng: &mut ChaCha8Rng,
    category: &'static str,
    language: Option<Lang>,
) -> Result<Vec<(Split, T)>, CorpusError> {
    if 2 * eval > items.len() {
        return Err(CorpusError::InsufficientItems {
            category,
            language,
            needed: 2 * eval,
            available: items.len(),
        });
    }
    items.sort();
    items.shuffle(rng);
    let mut out: Vec<(Split, T)> = items
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let s = if i < eval {
                Split::Valid
            } else if i < 2 * eval {
                Split::Test
            } else {
                Split::Train
            };
            (s, t)
        })
        .collect();
    out.sort();
    Ok(out)
}

pub fn make_splits(graph: &KnowledgeGraph, spec: &SplitSpec) -> Result<Splits, CorpusError> {
    if spec.eval_count_per_language == 0 {
        return Err(CorpusError::InvalidSpec("eval_count_per_language must be positive".into()));
    }
    let languages: BTreeSet<Lang> = match &spec.languages {
        Some(ls) if ls.is_empty() => {
            return Err(CorpusError::InvalidSpec("languages must not be empty".into()))
        }
        Some(ls) => ls.iter().copied().collect(),
        None => graph.gloss_entries().map(|e| e.gloss.lang).collect(),
    };
    if languages.is_empty() {
        return Err(CorpusError::InsufficientItems {
            category: "glosses",
            language: None,
            needed: 2 * spec.eval_count_per_language,
            available: 0,
        });
    }

    let mut per_lang: BTreeMap<Lang, Vec<(GlossId, NodeId)>> =
        languages.iter().map(|&l| (l, Vec::new())).collect();
    for e in graph.gloss_entries() {
        if let Some(v) = per_lang.get_mut(&e.gloss.lang) {
            v.push((e.id.clone(), e.gloss.node.clone()));
        }
    }
    let mut gloss_rows = Vec::new();
    let mut gloss_counts = BTreeMap::new();
    for (lang, items) in per_lang {
        let mut rng = stream(spec.rng_seed, "glosses", Some(lang));
        let assigned = assign(items, spec.eval_count_per_language, &mut rng, "glosses", Some(lang))?;
        let counts: &mut SplitCounts = gloss_counts.entry(lang).or_default();
        for (split, (id, node)) in assigned {
            counts.add(split);
            gloss_rows.push(GlossSplitRow {
                schema: SCHEMA_VERSION,
                split,
                id,
                node,
                lang,
            });
        }
    }
    gloss_rows.sort_by(|a, b| (a.split, &a.id).cmp(&(b.split, &b.id)));

    let images: Vec<(NodeId, ContentHash)> = graph
        .images()
        .map(|i| (i.node.clone(), i.content_hash))
        .collect();
    let mut rng = stream(spec.rng_seed, "images", None);
    let mut image_counts = SplitCounts::default();
    let image_rows: Vec<_> = assign(images, spec.image_eval_count, &mut rng, "images", None)?
        .into_iter()
        .map(|(split, (node, hash))| {
            image_counts.add(split);
            ImageSplitRow {
                schema: SCHEMA_VERSION,
                split,
                node,
                hash,
            }
        })
        .collect();

    let facts: Vec<_> = graph.facts().cloned().collect();
    let mut rng = stream(spec.rng_seed, "facts", None);
    let mut fact_counts = SplitCounts::default();
    let fact_rows: Vec<_> = assign(facts, spec.fact_eval_count, &mut rng, "facts", None)?
        .into_iter()
        .map(|(split, f)| {
            fact_counts.add(split);
            FactSplitRow {
                schema: SCHEMA_VERSION,
                split,
                head: f.head,
                relation: f.relation,
                tail: f.tail,
            }
        })
        .collect();

    Ok(Splits {
        glosses: gloss_rows,
        images: image_rows,
        facts: fact_rows,
        manifest: SplitManifest {
            schema: SCHEMA_VERSION,
            spec: spec.clone(),
            languages: languages.into_iter().collect(),
            glosses: gloss_counts,
            images: image_counts,
            facts: fact_counts,
        },
    })
}

/// Writes the three row files and `manifest.json` into `dir`.
pub fn write_splits(splits: &Splits, dir: impl AsRef<Path>) -> Result<(), CorpusError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    write_jsonl(&dir.join(GLOSS_SPLITS_FILE), &splits.glosses)?;
    write_jsonl(&dir.join(IMAGE_SPLITS_FILE), &splits.images)?;
    write_jsonl(&dir.join(FACT_SPLITS_FILE), &splits.facts)?;
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&splits.manifest).map_err(|e| CorpusError::io(&path, e.into()))?;
    std::fs::write(&path, json).map_err(|e| CorpusError::io(&path, e))
}
