//! Self-guided informative instance mining.
//!
//! A frozen retriever ranks the gallery for every training query. Queries whose
//! target already ranks first are left alone; for the rest, the items ranked
//! above the target are the retriever's blind spots.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::numeric::EncoderParameters;
use crate::retrieval::{rank_order, Gallery};
use crate::seed;
use crate::triplet::Triplet;
use crate::world::World;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub top_k: usize,
    pub exclude_reference_from_gallery: bool,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            top_k: 5,
            exclude_reference_from_gallery: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryMining {
    pub query_id: String,
    /// 1-based rank of the ground-truth target.
    pub gt_rank: usize,
    /// Mined instance ids in rank order.
    pub informative: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningReport {
    pub records: Vec<QueryMining>,
}

impl MiningReport {
    pub fn failure_count(&self) -> usize {
        self.records.iter().filter(|r| r.gt_rank > 1).count()
    }

    pub fn mined_instance_count(&self) -> usize {
        self.records.iter().map(|r| r.informative.len()).sum()
    }

    /// Keeps a seeded uniform sample of `budget` instances across all queries,
    /// preserving order. Used to hold the data scale fixed across strategies.
    pub fn limit_instances(&self, budget: usize, seed: u64) -> MiningReport {
        let total = self.mined_instance_count();
        if budget >= total {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_index(seed, "budget", budget as u64));
        let mut keep = vec![false; total];
        for i in sample(&mut rng, total, budget) {
            keep[i] = true;
        }
        let mut flat = keep.into_iter();
        MiningReport {
            records: self
                .records
                .iter()
                .map(|r| QueryMining {
                    query_id: r.query_id.clone(),
                    gt_rank: r.gt_rank,
                    informative: r
                        .informative
                        .iter()
                        .filter(|_| flat.next().expect("one flag per instance"))
                        .cloned()
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_jsonl(path, &self.records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(MiningReport {
            records: read_jsonl(path)?,
        })
    }
}

/// Random-mining baseline settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomMiningConfig {
    pub pool_k: usize,
    pub sample_n: usize,
    pub seed: u64,
    pub exclude_reference_from_gallery: bool,
}

impl Default for RandomMiningConfig {
    fn default() -> Self {
        RandomMiningConfig {
            pool_k: 50,
            sample_n: 1,
            seed: 0,
            exclude_reference_from_gallery: true,
        }
    }
}

/// Scores of one query against the gallery, ready for rank questions.
struct QueryScores {
    scores: Vec<f64>,
    target: usize,
    excluded: Option<usize>,
}

impl QueryScores {
    fn compute(
        params: &EncoderParameters,
        world: &World,
        gallery: &Gallery,
        triplet: &Triplet,
        exclude_reference: bool,
    ) -> Result<Self> {
        let target = gallery.position(&triplet.target_id).ok_or_else(|| {
            Error::Data(format!(
                "target {} of query {} is not in the gallery",
                triplet.target_id, triplet.query_id
            ))
        })?;
        let (image, text) = world.query_features(triplet)?;
        let q = params.encode_query(image, &text)?;
        let excluded = if exclude_reference {
            gallery.position(&triplet.reference_id)
        } else {
            None
        };
        Ok(QueryScores {
            scores: gallery.scores(&q)?,
            target,
            excluded,
        })
    }

    /// Gallery positions ranked strictly above the target, in rank order.
    fn above_target(&self) -> Vec<usize> {
        let t = (self.target, self.scores[self.target]);
        let mut above: Vec<usize> = (0..self.scores.len())
            .filter(|&i| Some(i) != self.excluded && i != self.target)
            .filter(|&i| rank_order((i, self.scores[i]), t) == Ordering::Less)
            .collect();
        above.sort_by(|&a, &b| rank_order((a, self.scores[a]), (b, self.scores[b])));
        above
    }

    /// The top `k` positions excluding the target.
    fn pool(&self, k: usize) -> Vec<usize> {
        let mut all: Vec<usize> = (0..self.scores.len())
            .filter(|&i| Some(i) != self.excluded && i != self.target)
            .collect();
        all.sort_by(|&a, &b| rank_order((a, self.scores[a]), (b, self.scores[b])));
        all.truncate(k);
        all
    }
}

/// Mines the up-to-`top_k` items ranked above each failing query's target.
pub fn mine(
    params: &EncoderParameters,
    world: &World,
    triplets: &[Triplet],
    gallery: &Gallery,
    cfg: &MiningConfig,
) -> Result<MiningReport> {
    if cfg.top_k == 0 {
        return Err(Error::Argument("top_k must be at least 1".into()));
    }
    let records = triplets
        .par_iter()
        .map(|t| {
            let qs = QueryScores::compute(params, world, gallery, t, cfg.exclude_reference_from_gallery)?;
            let above = qs.above_target();
            Ok(QueryMining {
                query_id: t.query_id.clone(),
                gt_rank: above.len() + 1,
                informative: above
                    .into_iter()
                    .take(cfg.top_k)
                    .map(|i| gallery.ids()[i].clone())
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MiningReport { records })
}

/// Random-mining baseline: for every query, successful or not, draw
/// `sample_n` items uniformly from the top `pool_k` non-target items.
pub fn random_mine(
    params: &EncoderParameters,
    world: &World,
    triplets: &[Triplet],
    gallery: &Gallery,
    cfg: &RandomMiningConfig,
) -> Result<MiningReport> {
    let RandomMiningConfig {
        pool_k,
        sample_n,
        seed,
        exclude_reference_from_gallery: exclude_reference,
    } = *cfg;
    if sample_n > pool_k {
        return Err(Error::Argument(format!(
            "cannot sample {sample_n} from a pool of {pool_k}"
        )));
    }
    let records = triplets
        .par_iter()
        .map(|t| {
            let qs = QueryScores::compute(params, world, gallery, t, exclude_reference)?;
            let gt_rank = qs.above_target().len() + 1;
            let pool = qs.pool(pool_k);
            if pool.len() < sample_n {
                return Err(Error::Data(format!(
                    "query {} has only {} pool candidates, needs {sample_n}",
                    t.query_id,
                    pool.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
                seed,
                "random-mine",
                &[t.query_id.as_bytes()],
            ));
            let informative = draw(&mut rng, &pool, sample_n)
                .into_iter()
                .map(|i| gallery.ids()[i].clone())
                .collect();
            Ok(QueryMining {
                query_id: t.query_id.clone(),
                gt_rank,
                informative,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MiningReport { records })
}

/// Uniform sample without replacement, in draw order.
fn draw<T: Copy>(rng: &mut ChaCha8Rng, pool: &[T], n: usize) -> Vec<T> {
    sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
}
