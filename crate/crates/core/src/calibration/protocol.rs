//! Oracle wire protocol.
//!
//! One endpoint, `POST /v1/oracle`, discriminated by `kind`. Field names here
//! are the contract shared with out-of-process oracle servers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const ORACLE_PATH: &str = "/v1/oracle";

/// JSON Schema (draft 2020-12) for requests and responses, shared with
/// oracle servers. Definitions live under `$defs`.
pub const SCHEMA: &str = include_str!("../../schema/oracle.schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    GenerateCorrective,
    VqaCheck,
}

/// What the oracle is told about an image: its id, optionally where to fetch
/// it, and optionally a textual attribute description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uri: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub kind: RequestKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Descriptor>,
    pub instruction: String,
    pub candidate: Descriptor,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub questions: Vec<String>,
    /// Prompt template selector for servers that keep several.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flavor: Option<String>,
}

impl OracleRequest {
    pub fn generate(reference: Descriptor, instruction: &str, candidate: Descriptor) -> Self {
        OracleRequest {
            kind: RequestKind::GenerateCorrective,
            reference: Some(reference),
            instruction: instruction.to_string(),
            candidate,
            questions: Vec::new(),
            flavor: None,
        }
    }

    pub fn vqa(instruction: &str, candidate: Descriptor, questions: Vec<String>) -> Self {
        OracleRequest {
            kind: RequestKind::VqaCheck,
            reference: None,
            instruction: instruction.to_string(),
            candidate,
            questions,
            flavor: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Valid,
    Violated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentVerdict {
    pub text: String,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub intents: Vec<IntentVerdict>,
    pub corrected_instruction: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum YesNo {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub question: String,
    pub answer: YesNo,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqaResponse {
    pub answers: Vec<Answer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleResponse {
    Generate(GenerateResponse),
    Vqa(VqaResponse),
}

impl OracleResponse {
    pub fn to_json(&self) -> Value {
        match self {
            OracleResponse::Generate(g) => serde_json::to_value(g),
            OracleResponse::Vqa(v) => serde_json::to_value(v),
        }
        .expect("responses always serialize")
    }

    /// Parses and checks a response body for a request of `kind`. A body of
    /// the form `{"error": {"kind": "retryable" | "protocol", "message": ...}}`
    /// maps to the matching error.
    pub fn from_json(request: &OracleRequest, body: &Value) -> Result<Self> {
        if let Some(err) = body.get("error") {
            let message = err
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or("unspecified oracle error")
                .to_string();
            return Err(match err.get("kind").and_then(Value::as_str) {
                Some("retryable") => Error::Transport(message),
                _ => Error::Protocol(message),
            });
        }
        let parsed = match request.kind {
            RequestKind::GenerateCorrective => serde_json::from_value(body.clone())
                .map(OracleResponse::Generate),
            RequestKind::VqaCheck => serde_json::from_value(body.clone()).map(OracleResponse::Vqa),
        }
        .map_err(|e| Error::Protocol(format!("response does not match schema: {e}")))?;
        parsed.check(request)?;
        Ok(parsed)
    }

    /// Totality and range checks: every intent and question answered.
    pub fn check(&self, request: &OracleRequest) -> Result<()> {
        match (self, request.kind) {
            (OracleResponse::Generate(g), RequestKind::GenerateCorrective) => {
                if g.intents.is_empty() {
                    return Err(Error::Protocol("oracle returned no intents".into()));
                }
                if g.intents.iter().any(|i| i.text.trim().is_empty()) {
                    return Err(Error::Protocol("oracle returned an empty intent".into()));
                }
                if g.corrected_instruction.trim().is_empty() {
                    return Err(Error::Protocol("empty corrected instruction".into()));
                }
                Ok(())
            }
            (OracleResponse::Vqa(v), RequestKind::VqaCheck) => {
                if v.answers.len() != request.questions.len() {
                    return Err(Error::Protocol(format!(
                        "{} answers for {} questions",
                        v.answers.len(),
                        request.questions.len()
                    )));
                }
                for (a, q) in v.answers.iter().zip(&request.questions) {
                    if &a.question != q {
                        return Err(Error::Protocol(format!(
                            "answer for '{}' where '{q}' was asked",
                            a.question
                        )));
                    }
                    if !(0.0..=1.0).contains(&a.confidence) {
                        return Err(Error::Protocol(format!(
                            "confidence {} outside [0, 1]",
                            a.confidence
                        )));
                    }
                }
                Ok(())
            }
            _ => Err(Error::Protocol("response kind does not match request".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn desc(id: &str) -> Descriptor {
        Descriptor { id: id.into(), uri: None, attributes: BTreeMap::new() }
    }

    #[test]
    fn request_field_names() {
        let r = OracleRequest::generate(desc("a"), "change color to red", desc("b"));
        assert_eq!(
            serde_json::to_value(&r).unwrap(),
            json!({"kind": "generate_corrective", "reference": {"id": "a"}, "instruction": "change color to red", "candidate": {"id": "b"}})
        );
        let r = OracleRequest::vqa("change color to red", desc("b"), vec!["is the color red?".into()]);
        assert_eq!(
            serde_json::to_value(&r).unwrap(),
            json!({"kind": "vqa_check", "instruction": "change color to red", "candidate": {"id": "b"}, "questions": ["is the color red?"]})
        );
    }

    #[test]
    fn parses_generate() {
        let req = OracleRequest::generate(desc("a"), "x", desc("b"));
        let body = json!({"intents": [{"text": "change color to red", "verdict": "violated"}], "corrected_instruction": "change color to blue"});
        let r = OracleResponse::from_json(&req, &body).unwrap();
        assert_eq!(r.to_json(), body);
    }

    #[test]
    fn rejects_malformed_generate() {
        let req = OracleRequest::generate(desc("a"), "x", desc("b"));
        for body in [
            json!({"intents": [], "corrected_instruction": "y"}),
            json!({"intents": [{"text": "a", "verdict": "maybe"}], "corrected_instruction": "y"}),
            json!({"intents": [{"text": "a", "verdict": "valid"}], "corrected_instruction": " "}),
            json!({"answers": []}),
            json!("not an object"),
        ] {
            assert!(matches!(OracleResponse::from_json(&req, &body), Err(Error::Protocol(_))), "{body}");
        }
    }

    #[test]
    fn vqa_must_answer_every_question_in_order() {
        let req = OracleRequest::vqa("x", desc("b"), vec!["q1".into(), "q2".into()]);
        let ok = json!({"answers": [
            {"question": "q1", "answer": "yes", "confidence": 1.0},
            {"question": "q2", "answer": "no", "confidence": 0.5}
        ]});
        assert!(OracleResponse::from_json(&req, &ok).is_ok());
        for body in [
            json!({"answers": [{"question": "q1", "answer": "yes", "confidence": 1.0}]}),
            json!({"answers": [
                {"question": "q2", "answer": "yes", "confidence": 1.0},
                {"question": "q1", "answer": "yes", "confidence": 1.0}
            ]}),
            json!({"answers": [
                {"question": "q1", "answer": "Yes", "confidence": 1.0},
                {"question": "q2", "answer": "yes", "confidence": 1.0}
            ]}),
            json!({"answers": [
                {"question": "q1", "answer": "yes", "confidence": 1.5},
                {"question": "q2", "answer": "yes", "confidence": 1.0}
            ]}),
        ] {
            assert!(matches!(OracleResponse::from_json(&req, &body), Err(Error::Protocol(_))), "{body}");
        }
    }

    #[test]
    fn error_bodies_map_to_error_classes() {
        let req = OracleRequest::vqa("x", desc("b"), vec![]);
        let retry = json!({"error": {"kind": "retryable", "message": "upstream timeout"}});
        assert!(matches!(OracleResponse::from_json(&req, &retry), Err(Error::Transport(_))));
        let proto = json!({"error": {"kind": "protocol", "message": "bad json", "raw": "???"}});
        assert!(matches!(OracleResponse::from_json(&req, &proto), Err(Error::Protocol(_))));
    }
}
