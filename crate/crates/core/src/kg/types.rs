use std::borrow::Borrow;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{KgError, RelationType};

/// Opaque, non-empty node identifier (e.g. a source synset id).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct NodeId(String);

impl NodeId {
    pub fn new(value: impl Into<String>) -> Result<Self, KgError> {
        let value = value.into();
        if value.is_empty() {
            return Err(KgError::EmptyNodeId);
        }
        Ok(NodeId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for NodeId {
    type Error = KgError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        NodeId::new(value)
    }
}

impl From<NodeId> for String {
    fn from(id: NodeId) -> Self {
        id.0
    }
}

impl FromStr for NodeId {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodeId::new(s)
    }
}

impl Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Gloss languages, ordered by ISO 639-1 code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lang {
    Ar,
    De,
    En,
    Es,
    Fa,
    Fr,
    It,
    Ko,
    Nl,
    Pl,
    Pt,
    Ru,
    Sv,
    Zh,
}

impl Lang {
    pub const ALL: [Lang; 14] = [
        Lang::Ar,
        Lang::De,
        Lang::En,
        Lang::Es,
        Lang::Fa,
        Lang::Fr,
        Lang::It,
        Lang::Ko,
        Lang::Nl,
        Lang::Pl,
        Lang::Pt,
        Lang::Ru,
        Lang::Sv,
        Lang::Zh,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Lang::Ar => "ar",
            Lang::De => "de",
            Lang::En => "en",
            Lang::Es => "es",
            Lang::Fa => "fa",
            Lang::Fr => "fr",
            Lang::It => "it",
            Lang::Ko => "ko",
            Lang::Nl => "nl",
            Lang::Pl => "pl",
            Lang::Pt => "pt",
            Lang::Ru => "ru",
            Lang::Sv => "sv",
            Lang::Zh => "zh",
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Lang {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Lang::ALL
            .into_iter()
            .find(|l| l.code() == s)
            .ok_or_else(|| KgError::UnknownLanguage(s.to_string()))
    }
}

/// A short definition of a node in one language.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Gloss {
    pub node: NodeId,
    pub lang: Lang,
    pub text: String,
}

impl Gloss {
    pub fn new(node: NodeId, lang: Lang, text: impl Into<String>) -> Result<Self, KgError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(KgError::EmptyGloss(node));
        }
        Ok(Gloss { node, lang, text })
    }
}

/// Identifier of a gloss inside a graph: `{node}#{lang}#{ordinal}`, where
/// the ordinal counts the node's glosses in that language from zero.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GlossId(String);

impl GlossId {
    pub fn new(node: &NodeId, lang: Lang, ordinal: usize) -> Self {
        GlossId(format!("{node}#{lang}#{ordinal}"))
    }

    pub fn from_raw(raw: impl Into<String>) -> Self {
        GlossId(raw.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for GlossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// SHA-1 digest of an image's bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash([u8; 20]);

impl ContentHash {
    pub fn of(bytes: &[u8]) -> Self {
        use sha1::{Digest, Sha1};
        let digest = Sha1::digest(bytes);
        let mut out = [0u8; 20];
        out.copy_from_slice(&digest);
        ContentHash(out)
    }

    pub fn from_bytes(raw: [u8; 20]) -> Self {
        ContentHash(raw)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl FromStr for ContentHash {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || KgError::InvalidContentHash(s.to_string());
        if s.len() != 40 || s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(bad());
        }
        let mut out = [0u8; 20];
        hex::decode_to_slice(s, &mut out).map_err(|_| bad())?;
        Ok(ContentHash(out))
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({})", self.to_hex())
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which image filters an image has passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FilterFlags(u8);

impl FilterFlags {
    pub const VALID: FilterFlags = FilterFlags(1);
    pub const UNIQUE: FilterFlags = FilterFlags(1 << 1);
    pub const PHOTOGRAPHIC: FilterFlags = FilterFlags(1 << 2);
    pub const GLOSS_MATCHED: FilterFlags = FilterFlags(1 << 3);
    pub const ALL: FilterFlags = FilterFlags(0b1111);

    const NAMES: [(FilterFlags, &'static str); 4] = [
        (FilterFlags::VALID, "valid"),
        (FilterFlags::UNIQUE, "unique"),
        (FilterFlags::PHOTOGRAPHIC, "photographic"),
        (FilterFlags::GLOSS_MATCHED, "gloss_matched"),
    ];

    pub fn empty() -> Self {
        FilterFlags(0)
    }

    pub fn contains(self, other: FilterFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert(&mut self, other: FilterFlags) {
        self.0 |= other.0;
    }

    pub fn with(mut self, other: FilterFlags) -> Self {
        self.insert(other);
        self
    }

    pub fn is_complete(self) -> bool {
        self.contains(FilterFlags::ALL)
    }
}

impl Serialize for FilterFlags {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let names: Vec<&str> = FilterFlags::NAMES
            .iter()
            .filter(|(f, _)| self.contains(*f))
            .map(|(_, n)| *n)
            .collect();
        names.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for FilterFlags {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(deserializer)?;
        let mut flags = FilterFlags::empty();
        for name in names {
            let (flag, _) = FilterFlags::NAMES
                .iter()
                .find(|(_, n)| *n == name)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown filter flag {name:?}")))?;
            flags.insert(*flag);
        }
        Ok(flags)
    }
}

/// An image attached to (or considered for) a node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRecord {
    pub node: NodeId,
    pub content_hash: ContentHash,
    pub locator: String,
    pub filter_flags: FilterFlags,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub source_ids: Vec<String>,
    pub glosses: Vec<Gloss>,
    pub images: Vec<ImageRecord>,
}

impl Node {
    pub fn new(id: NodeId) -> Self {
        Node {
            id,
            source_ids: Vec::new(),
            glosses: Vec::new(),
            images: Vec::new(),
        }
    }

    pub fn glosses_in(&self, lang: Lang) -> impl Iterator<Item = &Gloss> {
        self.glosses.iter().filter(move |g| g.lang == lang)
    }
}

/// A typed directed edge `<head, relation, tail>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub head: NodeId,
    pub relation: RelationType,
    pub tail: NodeId,
}

impl Fact {
    pub fn new(head: NodeId, relation: RelationType, tail: NodeId) -> Self {
        Fact {
            head,
            relation,
            tail,
        }
    }
}
