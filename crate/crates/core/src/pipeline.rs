//! Stage wiring: world, baseline, mining, calibration, refinement, evaluation.
//!
//! Every stage reads and writes fixed file names inside a run directory, so
//! running the stages one by one produces the same artifacts as one
//! `run` call.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibrate, thousands, Calibration, CalibrationConfig, CalibrationSummary, CorrectiveTriplet,
    HttpOracle, MockOracle, Oracle,
};
use crate::error::{Error, Result};
use crate::io::{ensure_dir, read_json, write_json};
use crate::miner::{mine, random_mine, MiningConfig, MiningReport, RandomMiningConfig};
use crate::numeric::{Architecture, EncoderParameters};
use crate::retrieval::{Gallery, MetricsReport, RankedList};
use crate::seed;
use crate::trainer::{refine, train_base, Profile, TrainConfig, TrainingLog};
use crate::triplet::Triplet;
use crate::world::{World, WorldSpec};

pub const WORLD_DIR: &str = "world";
pub const BASE_SNAPSHOT: &str = "base.encoder.json";
pub const BASE_LOG: &str = "base.log.jsonl";
pub const MINING_REPORT: &str = "mining.jsonl";
pub const KEPT: &str = "correctives.kept.jsonl";
pub const REJECTED: &str = "correctives.rejected.jsonl";
pub const CALIBRATION_SUMMARY: &str = "calibration.json";
pub const REFINE_SNAPSHOT: &str = "refine.encoder.json";
pub const REFINE_LOG: &str = "refine.log.jsonl";
pub const BASE_METRICS: &str = "metrics.base.json";
pub const REFINE_METRICS: &str = "metrics.refine.json";
pub const REPORT: &str = "report.txt";

/// A generated world or a directory holding a saved one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldSource {
    Spec(WorldSpec),
    Path(PathBuf),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningStrategy {
    SelfGuided,
    /// `top_k` uniform draws from each query's top `pool_k`, trimmed at
    /// random to the number of instances self-guided mining produces.
    Random,
}

/// Which images the base encoder ranks while mining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiningGallery {
    /// Distinct targets of the training queries, in query order.
    TrainTargets,
    /// Every item in the world, planted confusables included.
    AllItems,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningSection {
    pub strategy: MiningStrategy,
    pub gallery: MiningGallery,
    pub top_k: usize,
    pub exclude_reference_from_gallery: bool,
    pub pool_k: usize,
}

impl Default for MiningSection {
    fn default() -> Self {
        let m = MiningConfig::default();
        MiningSection {
            strategy: MiningStrategy::SelfGuided,
            gallery: MiningGallery::AllItems,
            top_k: m.top_k,
            exclude_reference_from_gallery: m.exclude_reference_from_gallery,
            pool_k: RandomMiningConfig::default().pool_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSpec {
    Mock,
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub oracle: OracleSpec,
    pub vqa_threshold: f64,
    pub max_concurrency: usize,
    pub retries: usize,
    pub timeout_secs: u64,
    /// Per-edit corruption rate of the mock oracle.
    pub mock_noise: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let c = CalibrationConfig::default();
        CalibrationSection {
            oracle: OracleSpec::Mock,
            vqa_threshold: c.vqa_threshold,
            max_concurrency: c.max_concurrency,
            retries: c.retries,
            timeout_secs: 30,
            mock_noise: 0.0,
        }
    }
}

impl CalibrationSection {
    pub fn config(&self) -> CalibrationConfig {
        CalibrationConfig {
            vqa_threshold: self.vqa_threshold,
            max_concurrency: self.max_concurrency,
            retries: self.retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    /// Also rank each query's confusion subset.
    pub subset: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            ks: vec![1, 5, 10, 50],
            subset: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds encoder initialization; stage seeds are derived from it by
    /// [`reseed`](Self::reseed) but may be set independently.
    pub seed: u64,
    pub world: WorldSource,
    pub stage1: TrainConfig,
    pub mining: MiningSection,
    pub calibration: CalibrationSection,
    pub stage4: TrainConfig,
    pub eval: EvalSection,
}

/// Desk batch size used by the default config.
pub const DESK_BATCH_SIZE: usize = 64;

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig::from_profile(Profile::Fashioniq, 0)
    }
}

impl PipelineConfig {
    pub fn from_profile(profile: Profile, seed: u64) -> Self {
        let (stage1, stage4) = profile.stages(DESK_BATCH_SIZE, 0);
        let mut cfg = PipelineConfig {
            seed,
            world: WorldSource::Spec(WorldSpec::default()),
            stage1,
            mining: MiningSection::default(),
            calibration: CalibrationSection::default(),
            stage4,
            eval: EvalSection::default(),
        };
        cfg.reseed(seed);
        cfg
    }

    /// Replaces both training stages with `profile`'s presets, keeping the
    /// current batch size and seeds.
    pub fn apply_profile(&mut self, profile: Profile) {
        let (mut s1, mut s4) = profile.stages(self.stage1.batch_size, 0);
        s1.seed = self.stage1.seed;
        s4.seed = self.stage4.seed;
        s4.batch_size = self.stage4.batch_size;
        s4.micro_group_fraction = self.stage4.micro_group_fraction;
        self.stage1 = s1;
        self.stage4 = s4;
    }

    /// Sets the top-level seed and every stage seed derived from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.stage1.seed = seed::derive(seed, "stage1", &[]);
        self.stage4.seed = seed::derive(seed, "stage4", &[]);
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage4.validate()?;
        if let WorldSource::Spec(s) = &self.world {
            s.validate()?;
        }
        if self.mining.top_k == 0 {
            return Err(Error::Argument("mining.top_k must be at least 1".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Argument("eval.ks must be non-empty positive integers".into()));
        }
        if let OracleSpec::Remote(url) = &self.calibration.oracle {
            HttpOracle::new(url, Duration::from_secs(1))?;
        }
        if !(0.0..=1.0).contains(&self.calibration.mock_noise) {
            return Err(Error::Argument("calibration.mock_noise must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// First 12 hex chars of the sha256 of the canonical JSON.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))[..12].to_string()
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

pub fn load_world(source: &WorldSource) -> Result<World> {
    match source {
        WorldSource::Spec(s) => World::generate(s),
        WorldSource::Path(p) => World::load(p),
    }
}

pub fn initial_params(world: &World, seed: u64) -> Result<EncoderParameters> {
    EncoderParameters::init(
        &Architecture::desk(world.spec.image_dim(), world.spec.text_dim()),
        seed::derive(seed, "init", &[]),
    )
}

/// Every world item embedded by the target tower.
pub fn world_gallery(params: &EncoderParameters, world: &World) -> Result<Gallery> {
    Gallery::embed(
        params,
        world.items.iter().map(|it| (it.id.as_str(), it.image_feature.as_slice())),
    )
}

/// Ranks the full gallery (reference excluded) and, if asked, each query's
/// confusion subset.
pub fn evaluate(params: &EncoderParameters, world: &World, queries: &[Triplet], eval: &EvalSection) -> Result<MetricsReport> {
    let gallery = world_gallery(params, world)?;
    let k_max = eval.ks.iter().copied().max().unwrap_or(1);
    let ranked: Vec<(RankedList, Option<RankedList>)> = queries
        .par_iter()
        .map(|t| {
            let (image, text) = world.query_features(t)?;
            let q = params.encode_query(image, &text)?;
            let exclude: Vec<usize> = gallery.position(&t.reference_id).into_iter().collect();
            let full = gallery.rank_excluding(&t.query_id, &q, k_max, &exclude)?;
            let sub = if eval.subset {
                let s = world
                    .subset(&t.query_id)
                    .ok_or_else(|| Error::Data(format!("query {} has no subset", t.query_id)))?;
                Some(gallery.rank_subset(&t.query_id, &q, &s.candidates)?)
            } else {
                None
            };
            Ok((full, sub))
        })
        .collect::<Result<Vec<_>>>()?;
    let (full, subs): (Vec<_>, Vec<_>) = ranked.into_iter().unzip();
    let subs: Option<Vec<RankedList>> = subs.into_iter().collect();
    let gt: HashMap<String, String> = queries
        .iter()
        .map(|t| (t.query_id.clone(), t.target_id.clone()))
        .collect();
    MetricsReport::compute(&full, subs.as_deref(), &gt, &eval.ks)
}

/// Runs the configured mining strategy over the training queries.
pub fn mine_stage(params: &EncoderParameters, world: &World, cfg: &PipelineConfig) -> Result<MiningReport> {
    let gallery = match cfg.mining.gallery {
        MiningGallery::AllItems => world_gallery(params, world)?,
        MiningGallery::TrainTargets => {
            let mut seen = HashSet::new();
            let mut features = Vec::new();
            for t in world.train_queries() {
                if seen.insert(t.target_id.as_str()) {
                    features.push((t.target_id.as_str(), world.target_feature(&t.target_id)?));
                }
            }
            Gallery::embed(params, features)?
        }
    };
    let m = MiningConfig {
        top_k: cfg.mining.top_k,
        exclude_reference_from_gallery: cfg.mining.exclude_reference_from_gallery,
    };
    let guided = mine(params, world, world.train_queries(), &gallery, &m)?;
    match cfg.mining.strategy {
        MiningStrategy::SelfGuided => Ok(guided),
        MiningStrategy::Random => {
            let rc = RandomMiningConfig {
                pool_k: cfg.mining.pool_k,
                sample_n: cfg.mining.top_k.min(cfg.mining.pool_k),
                seed: seed::derive(cfg.seed, "random-mining", &[]),
                exclude_reference_from_gallery: m.exclude_reference_from_gallery,
            };
            let random = random_mine(params, world, world.train_queries(), &gallery, &rc)?;
            Ok(random.limit_instances(guided.mined_instance_count(), rc.seed))
        }
    }
}

/// The oracle named by the config, or `override_url` if given.
pub fn make_oracle<'w>(world: &'w World, cfg: &PipelineConfig, override_url: Option<&str>) -> Result<Box<dyn Oracle + 'w>> {
    let timeout = Duration::from_secs(cfg.calibration.timeout_secs);
    let url = override_url.or(match &cfg.calibration.oracle {
        OracleSpec::Remote(u) => Some(u.as_str()),
        OracleSpec::Mock => None,
    });
    match url {
        Some(url) => Ok(Box::new(HttpOracle::new(url, timeout)?)),
        None => Ok(Box::new(MockOracle::noisy(
            world,
            cfg.calibration.mock_noise,
            seed::derive(cfg.seed, "mock-oracle", &[]),
        )?)),
    }
}

pub fn calibrate_stage(oracle: &dyn Oracle, world: &World, mining: &MiningReport, cfg: &PipelineConfig) -> Result<Calibration> {
    calibrate(oracle, world, mining, &cfg.calibration.config())
}

/// Human-readable summary of a finished run.
pub fn render_report(base: &MetricsReport, refined: &MetricsReport, calibration: Option<&CalibrationSummary>) -> String {
    let mut out = String::new();
    out.push_str("== base ==\n");
    out.push_str(&base.render());
    out.push_str("== refine ==\n");
    out.push_str(&refined.render());
    if let (Some(b), Some(r)) = (base.recall_subset_at.get(&1), refined.recall_subset_at.get(&1)) {
        out.push_str(&format!("R_subset@1 gain: {:+.2}\n", (r - b) * 100.0));
    }
    if let Some(s) = calibration {
        out.push_str(&calibration_line(s));
    }
    out
}

pub fn calibration_line(s: &CalibrationSummary) -> String {
    format!(
        "Samples (Generated → Kept): {}  [requested {}, discarded {}]\n",
        s.render(),
        thousands(s.requested),
        thousands(s.discarded)
    )
}

/// Paths and headline numbers of a finished run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub base: MetricsReport,
    pub refined: MetricsReport,
    pub calibration: CalibrationSummary,
    pub base_log: TrainingLog,
    pub refine_log: TrainingLog,
}

impl PipelineOutcome {
    /// Refined minus base confusion-subset Recall@1, in points.
    pub fn subset_gain(&self) -> Option<f64> {
        Some((self.refined.recall_subset_at.get(&1)? - self.base.recall_subset_at.get(&1)?) * 100.0)
    }
}

pub fn gen_world_stage(cfg: &PipelineConfig, out: &Path) -> Result<World> {
    let world = load_world(&cfg.world)?;
    world.save(&out.join(WORLD_DIR))?;
    Ok(world)
}

pub fn train_base_stage(world: &World, cfg: &PipelineConfig, out: &Path) -> Result<(EncoderParameters, TrainingLog)> {
    let (params, log) = train_base(initial_params(world, cfg.seed)?, world, world.train_queries(), &cfg.stage1)?;
    params.save(&out.join(BASE_SNAPSHOT))?;
    log.save_records(&out.join(BASE_LOG))?;
    Ok((params, log))
}

pub fn refine_stage(
    base: EncoderParameters,
    world: &World,
    kept: &[CorrectiveTriplet],
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<(EncoderParameters, TrainingLog)> {
    let (params, log) = refine(base, world, world.train_queries(), kept, &cfg.stage4)?;
    params.save(&out.join(REFINE_SNAPSHOT))?;
    log.save_records(&out.join(REFINE_LOG))?;
    Ok((params, log))
}

pub fn save_calibration(c: &Calibration, out: &Path) -> Result<()> {
    CorrectiveTriplet::save_all(&out.join(KEPT), &c.kept)?;
    CorrectiveTriplet::save_all(&out.join(REJECTED), &c.rejected)?;
    write_json(&out.join(CALIBRATION_SUMMARY), &c.summary)
}

/// All stages end to end, artifacts under `out`.
pub fn run(cfg: &PipelineConfig, out: &Path, oracle_url: Option<&str>) -> Result<PipelineOutcome> {
    cfg.validate()?;
    ensure_dir(out)?;
    let world = gen_world_stage(cfg, out)?;
    let (base, base_log) = train_base_stage(&world, cfg, out)?;

    let mining = mine_stage(&base, &world, cfg)?;
    mining.save(&out.join(MINING_REPORT))?;

    let oracle = make_oracle(&world, cfg, oracle_url)?;
    let calibration = calibrate_stage(oracle.as_ref(), &world, &mining, cfg)?;
    save_calibration(&calibration, out)?;

    let (refined, refine_log) = refine_stage(base.clone(), &world, &calibration.kept, cfg, out)?;

    let base_metrics = evaluate(&base, &world, world.test_queries(), &cfg.eval)?;
    let refine_metrics = evaluate(&refined, &world, world.test_queries(), &cfg.eval)?;
    write_json(&out.join(BASE_METRICS), &base_metrics)?;
    write_json(&out.join(REFINE_METRICS), &refine_metrics)?;
    std::fs::write(
        out.join(REPORT),
        render_report(&base_metrics, &refine_metrics, Some(&calibration.summary)),
    )
    .map_err(|e| Error::io(out.join(REPORT), e))?;

    Ok(PipelineOutcome {
        base: base_metrics,
        refined: refine_metrics,
        calibration: calibration.summary,
        base_log,
        refine_log,
    })
}
