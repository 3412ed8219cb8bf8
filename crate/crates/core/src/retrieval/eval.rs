use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GlossIndex, RetrievalError};
use crate::embed::EmbeddingProvider;
use crate::kg::{Lang, NodeId};

pub const DEFAULT_KS: [usize; 3] = [1, 3, 10];

#[derive(Debug, Clone, PartialEq)]
pub enum QueryInput {
    Text { text: String, lang: Lang },
    Image { bytes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalQuery {
    pub input: QueryInput,
    pub gold: NodeId,
}

/// Hits@k as percentages, keyed by k, plus mean and population standard
/// deviation of the gold rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub hits: BTreeMap<usize, f64>,
    pub mean_rank: f64,
    pub rank_std: f64,
    #[serde(default)]
    pub per_language: BTreeMap<Lang, EvalReport>,
}

impl EvalReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self, RetrievalError> {
        if ranks.is_empty() {
            return Err(RetrievalError::NoQueries);
        }
        let n = ranks.len() as f64;
        let hits = ks
            .iter()
            .map(|&k| {
                let c = ranks.iter().filter(|&&r| r <= k).count();
                (k, 100.0 * c as f64 / n)
            })
            .collect();
        let mean = ranks.iter().map(|&r| r as f64).sum::<f64>() / n;
        let var = ranks.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / n;
        Ok(EvalReport {
            hits,
            mean_rank: mean,
            rank_std: var.sqrt(),
            per_language: BTreeMap::new(),
        })
    }
}

/// Ranks each query's gold node among all nodes and summarizes.
/// Text queries also contribute to a per-language breakdown.
pub fn evaluate(
    index: &GlossIndex,
    provider: &dyn EmbeddingProvider,
    queries: &[EvalQuery],
    ks: &[usize],
) -> Result<EvalReport, RetrievalError> {
    if queries.is_empty() {
        return Err(RetrievalError::NoQueries);
    }
    let mut ranks = Vec::with_capacity(queries.len());
    let mut by_lang: BTreeMap<Lang, Vec<usize>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        if !index.contains_node(&q.gold) {
            return Err(RetrievalError::GoldNotInIndex {
                query: i,
                gold: q.gold.clone(),
            });
        }
        let (vector, lang) = match &q.input {
            QueryInput::Text { text, lang } => {
                if text.trim().is_empty() {
                    return Err(RetrievalError::EmptyQuery);
                }
                (provider.embed_text(text, Some(*lang))?, Some(*lang))
            }
            QueryInput::Image { bytes } => {
                index.require_english_only()?;
                crate::pipeline::validate_image(bytes)?;
                (provider.embed_image(bytes)?, None)
            }
        };
        let rank = index
            .rank_of(vector.as_slice(), &q.gold)?
            .expect("gold presence checked above");
        ranks.push(rank);
        if let Some(l) = lang {
            by_lang.entry(l).or_default().push(rank);
        }
    }
    let mut report = EvalReport::from_ranks(&ranks, ks)?;
    for (lang, rs) in by_lang {
        report.per_language.insert(lang, EvalReport::from_ranks(&rs, ks)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{Embedding, MockProvider};
    use crate::kg::{Gloss, GlossId};
    use crate::retrieval::build_index;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn arithmetic_example() {
        let r = EvalReport::from_ranks(&[1, 2, 5, 11], &DEFAULT_KS).unwrap();
        assert_eq!(r.hits[&1], 25.0);
        assert_eq!(r.hits[&3], 50.0);
        assert_eq!(r.hits[&10], 75.0);
        assert_eq!(r.mean_rank, 4.75);
        // population variance: (14.0625 + 7.5625 + 0.0625 + 39.0625) / 4
        assert!((r.rank_std - (60.75f64 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn all_rank_one() {
        let r = EvalReport::from_ranks(&[1, 1, 1], &DEFAULT_KS).unwrap();
        assert!(r.hits.values().all(|&h| h == 100.0));
        assert_eq!((r.mean_rank, r.rank_std), (1.0, 0.0));
        assert!(matches!(EvalReport::from_ranks(&[], &DEFAULT_KS), Err(RetrievalError::NoQueries)));
    }

    #[test]
    fn json_shape() {
        let r = EvalReport::from_ranks(&[1, 4], &DEFAULT_KS).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["hits"]["1"], 50.0);
        assert_eq!(v["hits"]["10"], 100.0);
        assert_eq!(v["mean_rank"], 2.5);
        assert_eq!(v["rank_std"], 1.5);
        assert!(v["per_language"].as_object().unwrap().is_empty());
    }

    #[test]
    fn evaluate_examples() {
        let id = |s: &str| NodeId::new(s).unwrap();
        let p = MockProvider::new(2)
            .with_text("a", Embedding::new(vec![1.0, 0.0]).unwrap()).unwrap()
            .with_text("b", Embedding::new(vec![0.0, 1.0]).unwrap()).unwrap();
        let glosses = vec![
            (GlossId::new(&id("A"), Lang::En, 0), Gloss::new(id("A"), Lang::En, "a").unwrap()),
            (GlossId::new(&id("B"), Lang::En, 0), Gloss::new(id("B"), Lang::En, "b").unwrap()),
        ];
        let langs: BTreeSet<_> = [Lang::En].into_iter().collect();
        let idx = build_index(&glosses, &p, &langs).unwrap();
        let q = |t: &str, lang, g: &str| EvalQuery {
            input: QueryInput::Text { text: t.into(), lang },
            gold: id(g),
        };
        let r = evaluate(&idx, &p, &[q("a", Lang::En, "A"), q("b", Lang::Fr, "A")], &DEFAULT_KS).unwrap();
        assert_eq!(r.hits[&1], 50.0);
        assert_eq!(r.mean_rank, 1.5);
        assert_eq!(r.per_language[&Lang::En].mean_rank, 1.0);
        assert_eq!(r.per_language[&Lang::Fr].mean_rank, 2.0);

        let err = evaluate(&idx, &p, &[q("a", Lang::En, "Z")], &DEFAULT_KS).unwrap_err();
        assert!(matches!(err, RetrievalError::GoldNotInIndex { query: 0, .. }));
    }

    proptest! {
        #[test]
        fn hits_are_monotone(ranks in proptest::collection::vec(1usize..50, 1..200)) {
            let r = EvalReport::from_ranks(&ranks, &DEFAULT_KS).unwrap();
            prop_assert!(r.hits[&1] <= r.hits[&3]);
            prop_assert!(r.hits[&3] <= r.hits[&10]);
            prop_assert!(r.hits[&10] <= 100.0);
            prop_assert!(r.mean_rank >= 1.0);
        }
    }
}
