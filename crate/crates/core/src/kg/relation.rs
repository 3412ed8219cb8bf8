use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::KgError;

/// The closed set of semantic edge types a graph can hold.
///
/// Declaration order is the ordering used for neighbor lists and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelationType {
    IsA,
    HasPart,
    RelatedTo,
    UsedFor,
    UsedBy,
    SubjectOf,
    ReceivesAction,
    MadeOf,
    HasProperty,
    GlossRelated,
    Synonym,
    PartOf,
    LocatedAt,
}

impl RelationType {
    pub const ALL: [RelationType; 13] = [
        RelationType::IsA,
        RelationType::HasPart,
        RelationType::RelatedTo,
        RelationType::UsedFor,
        RelationType::UsedBy,
        RelationType::SubjectOf,
        RelationType::ReceivesAction,
        RelationType::MadeOf,
        RelationType::HasProperty,
        RelationType::GlossRelated,
        RelationType::Synonym,
        RelationType::PartOf,
        RelationType::LocatedAt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RelationType::IsA => "is-a",
            RelationType::HasPart => "has-part",
            RelationType::RelatedTo => "related-to",
            RelationType::UsedFor => "used-for",
            RelationType::UsedBy => "used-by",
            RelationType::SubjectOf => "subject-of",
            RelationType::ReceivesAction => "receives-action",
            RelationType::MadeOf => "made-of",
            RelationType::HasProperty => "has-property",
            RelationType::GlossRelated => "gloss-related",
            RelationType::Synonym => "synonym",
            RelationType::PartOf => "part-of",
            RelationType::LocatedAt => "located-at",
        }
    }
}

impl fmt::Display for RelationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RelationType {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RelationType::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| KgError::UnknownRelation(s.to_string()))
    }
}

/// Source labels that map to a relation type verbatim.
const EXACT_LABELS: &[(&str, RelationType)] = &[
    ("is-a", RelationType::IsA),
    ("is_a", RelationType::IsA),
    ("has-part", RelationType::HasPart),
    ("has_part", RelationType::HasPart),
    ("related", RelationType::RelatedTo),
    ("use", RelationType::UsedFor),
    ("used-by", RelationType::UsedBy),
    ("used_by", RelationType::UsedBy),
    ("subject-of", RelationType::SubjectOf),
    ("subject_of", RelationType::SubjectOf),
    ("interaction", RelationType::ReceivesAction),
    ("oath-made-by", RelationType::MadeOf),
    ("gloss-related", RelationType::GlossRelated),
    ("taxon-synonym", RelationType::Synonym),
    ("part-of", RelationType::PartOf),
    ("part_of", RelationType::PartOf),
    ("location", RelationType::LocatedAt),
];

/// Prefix patterns; the trailing `*` matches any number of characters.
const WILDCARD_PREFIXES: &[(&str, RelationType)] = &[
    ("has_", RelationType::HasProperty),
    ("located_", RelationType::LocatedAt),
];

/// Maps a source relation label onto one of the 13 relation types.
///
/// Exact rows win over wildcard rows; among wildcard rows the longest literal
/// prefix wins. `None` means the label is unmapped and the edge is dropped.
pub fn map_relation_label(source_label: &str) -> Option<RelationType> {
    if source_label.is_empty() {
        return None;
    }
    if let Some((_, r)) = EXACT_LABELS.iter().find(|(l, _)| *l == source_label) {
        return Some(*r);
    }
    WILDCARD_PREFIXES
        .iter()
        .filter(|(prefix, _)| source_label.starts_with(prefix))
        .max_by_key(|(prefix, _)| prefix.len())
        .map(|(_, r)| *r)
}
