//! Exact cosine top-K retrieval over an embedded gallery and the recall
//! metrics computed from it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine_similarity, EncoderParameters};

/// Embedded gallery. Immutable once built.
#[derive(Debug, Clone)]
pub struct Gallery {
    ids: Vec<String>,
    embeddings: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<Scored>,
}

impl RankedList {
    /// 1-based rank of `id`, if present.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id).map(|p| p + 1)
    }
}

/// Descending score, ties by ascending gallery position.
pub(crate) fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

impl Gallery {
    pub fn new(ids: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(Error::shape("gallery ids vs embeddings", ids.len(), embeddings.len()));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate gallery id {id}")));
            }
        }
        if let Some(first) = embeddings.first() {
            let dim = first.len();
            for (id, e) in ids.iter().zip(&embeddings) {
                if e.len() != dim {
                    return Err(Error::shape("gallery embedding", dim, e.len()));
                }
                if e.iter().all(|v| *v == 0.0) {
                    return Err(Error::Domain(format!("gallery item {id} has a zero embedding")));
                }
            }
        }
        Ok(Gallery {
            ids,
            embeddings,
            index,
        })
    }

    /// Embeds `(id, image feature)` pairs with the target tower.
    pub fn embed<'a, I>(params: &EncoderParameters, items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a [f64])>,
    {
        let (ids, embeddings) = items
            .into_iter()
            .map(|(id, feat)| Ok((id.to_string(), params.encode_target(feat)?)))
            .collect::<Result<(Vec<_>, Vec<_>)>>()?;
        Gallery::new(ids, embeddings)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn embedding(&self, pos: usize) -> &[f64] {
        &self.embeddings[pos]
    }

    /// Cosine score of the query against every gallery item, in gallery order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::Argument("empty gallery".into()));
        }
        self.embeddings
            .iter()
            .map(|e| cosine_similarity(query, e))
            .collect()
    }

    /// Exact top-`k` by cosine similarity.
    pub fn rank_all(&self, query_id: &str, query: &[f64], k: usize) -> Result<RankedList> {
        self.rank_excluding(query_id, query, k, &[])
    }

    /// Exact top-`k`, skipping the gallery positions in `exclude`.
    pub fn rank_excluding(
        &self,
        query_id: &str,
        query: &[f64],
        k: usize,
        exclude: &[usize],
    ) -> Result<RankedList> {
        if k == 0 {
            return Err(Error::Argument("k must be at least 1".into()));
        }
        let scores = self.scores(query)?;
        let mut scored: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|(i, _)| !exclude.contains(i))
            .collect();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
            scored.truncate(k);
        }
        scored.sort_by(|a, b| rank_order(*a, *b));
        Ok(RankedList {
            query_id: query_id.to_string(),
            entries: scored
                .into_iter()
                .map(|(i, score)| Scored {
                    id: self.ids[i].clone(),
                    score,
                })
                .collect(),
        })
    }

    /// Full ranking restricted to `subset`.
    pub fn rank_subset(&self, query_id: &str, query: &[f64], subset: &[String]) -> Result<RankedList> {
        let mut scored = subset
            .iter()
            .map(|id| {
                let pos = self
                    .position(id)
                    .ok_or_else(|| Error::Data(format!("subset member {id} not in gallery")))?;
                Ok((pos, cosine_similarity(query, &self.embeddings[pos])?))
            })
            .collect::<Result<Vec<_>>>()?;
        scored.sort_by(|a, b| rank_order(*a, *b));
        Ok(RankedList {
            query_id: query_id.to_string(),
            entries: scored
                .into_iter()
                .map(|(i, score)| Scored {
                    id: self.ids[i].clone(),
                    score,
                })
                .collect(),
        })
    }
}

fn ground_truth_for<'a>(gt: &'a HashMap<String, String>, query_id: &str) -> Result<&'a str> {
    gt.get(query_id)
        .map(String::as_str)
        .ok_or_else(|| Error::Data(format!("no ground truth for query {query_id}")))
}

/// Fraction of queries whose target appears within the first `k` entries.
pub fn recall_at_k(ranked: &[RankedList], ground_truth: &HashMap<String, String>, k: usize) -> Result<f64> {
    if ranked.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for list in ranked {
        let target = ground_truth_for(ground_truth, &list.query_id)?;
        if list.entries.iter().take(k).any(|e| e.id == target) {
            hits += 1;
        }
    }
    Ok(hits as f64 / ranked.len() as f64)
}

/// Like [`recall_at_k`], but each list is a full ranking of that query's
/// candidate subset, which must contain the target.
pub fn recall_subset_at_k(
    ranked_within_subset: &[RankedList],
    ground_truth: &HashMap<String, String>,
    k: usize,
) -> Result<f64> {
    for list in ranked_within_subset {
        let target = ground_truth_for(ground_truth, &list.query_id)?;
        if list.rank_of(target).is_none() {
            return Err(Error::Data(format!(
                "target {target} of query {} is missing from its subset",
                list.query_id
            )));
        }
    }
    recall_at_k(ranked_within_subset, ground_truth, k)
}

/// `(R@5 + R_subset@1) / 2`, in whatever unit the inputs share.
pub fn avg_metric(r_at_5: f64, r_subset_at_1: f64) -> f64 {
    (r_at_5 + r_subset_at_1) / 2.0
}

/// Recall fractions keyed by K. JSON keys render as `recall_at.{K}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub recall_subset_at: BTreeMap<usize, f64>,
    /// `None` when R@5 or R_subset@1 was not measured.
    pub avg: Option<f64>,
}

impl MetricsReport {
    pub fn compute(
        ranked: &[RankedList],
        ranked_subsets: Option<&[RankedList]>,
        ground_truth: &HashMap<String, String>,
        ks: &[usize],
    ) -> Result<Self> {
        let mut recall_at = BTreeMap::new();
        let mut recall_subset_at = BTreeMap::new();
        for &k in ks {
            recall_at.insert(k, recall_at_k(ranked, ground_truth, k)?);
        }
        if let Some(subsets) = ranked_subsets {
            let size = subsets.iter().map(|l| l.entries.len()).max().unwrap_or(0);
            for k in 1..=size.min(3) {
                recall_subset_at.insert(k, recall_subset_at_k(subsets, ground_truth, k)?);
            }
        }
        let avg = match (recall_at.get(&5), recall_subset_at.get(&1)) {
            (Some(a), Some(b)) => Some(avg_metric(*a, *b)),
            _ => None,
        };
        Ok(MetricsReport {
            queries: ranked.len(),
            recall_at,
            recall_subset_at,
            avg,
        })
    }

    /// Percentages with two decimals.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.recall_at {
            out.push_str(&format!("R@{k}: {:.2}\n", v * 100.0));
        }
        for (k, v) in &self.recall_subset_at {
            out.push_str(&format!("R_subset@{k}: {:.2}\n", v * 100.0));
        }
        if let Some(avg) = self.avg {
            out.push_str(&format!("Avg: {:.2}\n", avg * 100.0));
        }
        out
    }
}
