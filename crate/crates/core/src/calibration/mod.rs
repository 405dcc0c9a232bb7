//! Corrective-instruction synthesis and VQA-consistency filtering.
//!
//! For every mined `(reference, instruction, informative)` the oracle
//! decomposes the instruction into intents, marks each as valid or violated
//! against the informative image and rewrites only the violated ones. A second
//! pass asks the oracle yes/no questions about the rewritten intents and keeps
//! the triplet only if every answer is a confident "yes".

mod oracle;
pub mod protocol;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use oracle::{call_with_retry, describe, HttpOracle, MockOracle, Oracle};
use protocol::{Answer, Descriptor, OracleRequest, OracleResponse, Verdict, YesNo};

use crate::error::{Error, Result};
use crate::io::{read_jsonl, write_jsonl};
use crate::miner::MiningReport;
use crate::triplet::Triplet;
use crate::world::{Grammar, World};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub intent: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub passed: bool,
    pub answers: Vec<Answer>,
    /// Why the check could not be completed, if it errored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// `(reference, corrected instruction, informative)` induced by one mined item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectiveTriplet {
    pub parent_query_id: String,
    pub reference_id: String,
    pub corrected_instruction: String,
    pub informative_id: String,
    pub verification_trace: Vec<TraceEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterOutcome>,
}

impl CorrectiveTriplet {
    /// Intents of the corrected instruction that were not kept verbatim as
    /// valid intents of the original.
    pub fn edited_intents(&self) -> Vec<String> {
        Grammar::intents(&self.corrected_instruction)
            .into_iter()
            .filter(|i| {
                !self
                    .verification_trace
                    .iter()
                    .any(|t| t.verdict == Verdict::Valid && &t.intent == i)
            })
            .collect()
    }

    /// As a training triplet; the informative image becomes the target.
    pub fn as_triplet(&self) -> Triplet {
        Triplet {
            query_id: format!("{}~{}", self.parent_query_id, self.informative_id),
            reference_id: self.reference_id.clone(),
            instruction: self.corrected_instruction.clone(),
            target_id: self.informative_id.clone(),
        }
    }

    pub fn save_all(path: &Path, triplets: &[CorrectiveTriplet]) -> Result<()> {
        write_jsonl(path, triplets)
    }

    pub fn load_all(path: &Path) -> Result<Vec<CorrectiveTriplet>> {
        read_jsonl(path)
    }
}

/// Yes/no question about one intent. Intents of the form
/// `change <slot> to <value>` become `is the <slot> <value>?`.
pub fn question_for(intent: &str) -> String {
    let tokens: Vec<&str> = intent.split_whitespace().collect();
    match tokens.as_slice() {
        ["change", slot, "to", value] => format!("is the {slot} {value}?"),
        _ => format!("does the image satisfy: {}?", intent.trim()),
    }
}

/// Asks the oracle for a corrective instruction. The result is unfiltered.
pub fn generate_corrective(
    oracle: &dyn Oracle,
    parent: &Triplet,
    reference: Descriptor,
    informative: Descriptor,
    retries: usize,
) -> Result<CorrectiveTriplet> {
    if informative.id == parent.target_id {
        return Err(Error::Argument(format!(
            "informative {} is the target of query {}",
            informative.id, parent.query_id
        )));
    }
    if reference.id != parent.reference_id {
        return Err(Error::Argument(format!(
            "reference {} does not belong to query {}",
            reference.id, parent.query_id
        )));
    }
    let informative_id = informative.id.clone();
    let request = OracleRequest::generate(reference, &parent.instruction, informative);
    let response = match call_with_retry(oracle, &request, retries)? {
        OracleResponse::Generate(g) => g,
        OracleResponse::Vqa(_) => return Err(Error::Protocol("vqa answer to a generate request".into())),
    };
    response_contract(&response.intents, &response.corrected_instruction)?;
    Ok(CorrectiveTriplet {
        parent_query_id: parent.query_id.clone(),
        reference_id: parent.reference_id.clone(),
        corrected_instruction: response.corrected_instruction,
        informative_id,
        verification_trace: response
            .intents
            .into_iter()
            .map(|i| TraceEntry {
                intent: i.text,
                verdict: i.verdict,
            })
            .collect(),
        filter: None,
    })
}

/// Valid intents must survive verbatim.
fn response_contract(intents: &[protocol::IntentVerdict], corrected: &str) -> Result<()> {
    let kept = Grammar::intents(corrected);
    for i in intents.iter().filter(|i| i.verdict == Verdict::Valid) {
        if !kept.iter().any(|k| k == i.text.trim()) {
            return Err(Error::Protocol(format!(
                "valid intent '{}' was rewritten in '{corrected}'",
                i.text
            )));
        }
    }
    Ok(())
}

fn check_one(
    oracle: &dyn Oracle,
    world: &World,
    triplet: &CorrectiveTriplet,
    threshold: f64,
    retries: usize,
) -> Result<FilterOutcome> {
    let mut intents = triplet.edited_intents();
    if intents.is_empty() {
        intents = Grammar::intents(&triplet.corrected_instruction);
    }
    let questions: Vec<String> = intents.iter().map(|i| question_for(i)).collect();
    let request = OracleRequest::vqa(
        &triplet.corrected_instruction,
        describe(world, &triplet.informative_id)?,
        questions,
    );
    let answers = match call_with_retry(oracle, &request, retries)? {
        OracleResponse::Vqa(v) => v.answers,
        OracleResponse::Generate(_) => return Err(Error::Protocol("generate answer to a vqa request".into())),
    };
    let passed = answers
        .iter()
        .all(|a| a.answer == YesNo::Yes && a.confidence >= threshold);
    Ok(FilterOutcome {
        passed,
        answers,
        reason: None,
    })
}

/// Splits `candidates` into `(kept, rejected)`, both in input order. A
/// triplet whose check errors is rejected with the error as its reason;
/// transport failures that outlive the retries abort instead.
pub fn vqa_filter(
    oracle: &dyn Oracle,
    world: &World,
    candidates: Vec<CorrectiveTriplet>,
    threshold: f64,
    retries: usize,
) -> Result<(Vec<CorrectiveTriplet>, Vec<CorrectiveTriplet>)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Argument(format!("threshold must be in [0, 1], got {threshold}")));
    }
    let outcomes = candidates
        .par_iter()
        .map(|t| match check_one(oracle, world, t, threshold, retries) {
            Err(e @ Error::Transport(_)) => Err(e),
            Err(e) => Ok(FilterOutcome {
                passed: false,
                answers: Vec::new(),
                reason: Some(e.to_string()),
            }),
            ok => ok,
        })
        .collect::<Result<Vec<_>>>()?;
    let (kept, rejected) = candidates
        .into_iter()
        .zip(outcomes)
        .map(|(mut t, o)| {
            t.filter = Some(o);
            t
        })
        .partition(|t| t.filter.as_ref().is_some_and(|f| f.passed));
    Ok((kept, rejected))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub vqa_threshold: f64,
    /// Upper bound on in-flight oracle requests.
    pub max_concurrency: usize,
    /// Extra attempts after a transport failure.
    pub retries: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            vqa_threshold: 0.95,
            max_concurrency: 8,
            retries: 2,
        }
    }
}

/// Generated/kept bookkeeping of one calibration run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    /// Mined instances submitted for generation.
    pub requested: usize,
    pub generated: usize,
    /// Generation attempts dropped for malformed oracle output.
    pub discarded: usize,
    pub kept: usize,
    pub rejected: usize,
}

impl CalibrationSummary {
    pub fn keep_rate(&self) -> f64 {
        if self.generated == 0 {
            0.0
        } else {
            self.kept as f64 / self.generated as f64
        }
    }

    /// `generated → kept` with thousands separators.
    pub fn render(&self) -> String {
        format!("{} → {}", thousands(self.generated), thousands(self.kept))
    }
}

pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub kept: Vec<CorrectiveTriplet>,
    pub rejected: Vec<CorrectiveTriplet>,
    /// `(parent query, informative, error)` for discarded generations.
    pub discarded: Vec<(String, String, String)>,
    pub summary: CalibrationSummary,
}

/// Generates and filters a corrective for every mined instance.
///
/// Transport errors that survive the retries abort the run; malformed oracle
/// output only discards the affected triplet.
pub fn calibrate(
    oracle: &dyn Oracle,
    world: &World,
    mining: &MiningReport,
    cfg: &CalibrationConfig,
) -> Result<Calibration> {
    if cfg.max_concurrency == 0 {
        return Err(Error::Argument("max_concurrency must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.max_concurrency)
        .build()
        .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;

    let mut jobs = Vec::new();
    for rec in &mining.records {
        let parent = world
            .queries
            .iter()
            .find(|q| q.query_id == rec.query_id)
            .ok_or_else(|| Error::Data(format!("mined query {} is not in the world", rec.query_id)))?;
        jobs.extend(rec.informative.iter().map(|inf| (parent, inf.as_str())));
    }

    pool.install(|| {
        let generated: Vec<Result<CorrectiveTriplet>> = jobs
            .par_iter()
            .map(|&(parent, inf)| {
                generate_corrective(
                    oracle,
                    parent,
                    describe(world, &parent.reference_id)?,
                    describe(world, inf)?,
                    cfg.retries,
                )
            })
            .collect();

        let mut candidates = Vec::new();
        let mut discarded = Vec::new();
        for (r, &(parent, inf)) in generated.into_iter().zip(&jobs) {
            match r {
                Ok(t) => candidates.push(t),
                Err(e @ Error::Transport(_)) => return Err(e),
                Err(e) => discarded.push((parent.query_id.clone(), inf.to_string(), e.to_string())),
            }
        }
        let generated = candidates.len();
        let (kept, rejected) = vqa_filter(oracle, world, candidates, cfg.vqa_threshold, cfg.retries)?;
        let summary = CalibrationSummary {
            requested: jobs.len(),
            generated,
            discarded: discarded.len(),
            kept: kept.len(),
            rejected: rejected.len(),
        };
        Ok(Calibration {
            kept,
            rejected,
            discarded,
            summary,
        })
    })
}
