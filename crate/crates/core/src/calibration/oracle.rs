//! Oracle backends: the exact in-process mock and the HTTP client.

use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::protocol::{
    Answer, Descriptor, GenerateResponse, IntentVerdict, OracleRequest, OracleResponse,
    RequestKind, Verdict, VqaResponse, YesNo, ORACLE_PATH,
};
use crate::error::{Error, Result};
use crate::seed;
use crate::world::{attribute_diff, Edit, Grammar, World};

/// Anything that answers oracle requests. Implementations must be reentrant.
pub trait Oracle: Sync {
    fn call(&self, request: &OracleRequest) -> Result<OracleResponse>;
}

/// Calls `oracle`, retrying transport failures up to `retries` extra times.
pub fn call_with_retry(oracle: &dyn Oracle, request: &OracleRequest, retries: usize) -> Result<OracleResponse> {
    let mut attempt = 0;
    loop {
        match oracle.call(request) {
            Err(e) if e.is_retryable() && attempt < retries => attempt += 1,
            other => return other,
        }
    }
}

/// Descriptor of a world item, attributes spelled out in the world grammar.
pub fn describe(world: &World, id: &str) -> Result<Descriptor> {
    let item = world.item(id)?;
    let g = world.grammar();
    Ok(Descriptor {
        id: id.to_string(),
        uri: None,
        attributes: item
            .attributes
            .iter()
            .enumerate()
            .map(|(slot, &value)| (g.slot_name(slot).to_string(), g.value_name(value).to_string()))
            .collect(),
    })
}

/// Exact oracle backed by a world's ground truth.
///
/// With `noise > 0`, each regenerated or added intent is independently
/// replaced by a wrong value with that probability. The corruption is a pure
/// function of `(seed, request)`.
#[derive(Debug, Clone)]
pub struct MockOracle<'w> {
    world: &'w World,
    noise: f64,
    seed: u64,
}

impl<'w> MockOracle<'w> {
    pub fn exact(world: &'w World) -> Self {
        MockOracle {
            world,
            noise: 0.0,
            seed: 0,
        }
    }

    pub fn noisy(world: &'w World, noise: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise) {
            return Err(Error::Argument(format!("noise must be in [0, 1], got {noise}")));
        }
        Ok(MockOracle { world, noise, seed })
    }

    fn grammar(&self) -> &Grammar {
        self.world.grammar()
    }

    fn generate(&self, req: &OracleRequest) -> Result<GenerateResponse> {
        let reference = req
            .reference
            .as_ref()
            .ok_or_else(|| Error::Data("generate_corrective needs a reference".into()))?;
        let ref_attrs = &self.world.item(&reference.id)?.attributes;
        let cand_attrs = &self.world.item(&req.candidate.id)?.attributes;
        let original = self.grammar().parse(&req.instruction)?;
        let diff = attribute_diff(ref_attrs, cand_attrs);
        if diff.is_empty() {
            return Err(Error::Data(format!(
                "candidate {} is indistinguishable from reference {}",
                req.candidate.id, reference.id
            )));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
            self.seed,
            "mock-noise",
            &[reference.id.as_bytes(), req.instruction.as_bytes(), req.candidate.id.as_bytes()],
        ));
        let v = self.world.spec.values_per_attribute;
        let mut regenerate = |slot: usize| {
            let truth = cand_attrs[slot];
            let mut value = truth;
            if self.noise > 0.0 && rng.random_bool(self.noise) {
                let wrong: Vec<usize> = (0..v)
                    .filter(|&x| x != truth && (x != ref_attrs[slot] || v < 3))
                    .collect();
                value = wrong[rng.random_range(0..wrong.len())];
            }
            Edit { slot, value }
        };

        let mut intents = Vec::with_capacity(original.len());
        let mut corrected = Vec::new();
        for e in &original {
            let valid = cand_attrs[e.slot] == e.value;
            intents.push(IntentVerdict {
                text: self.grammar().render_intent(*e),
                verdict: if valid { Verdict::Valid } else { Verdict::Violated },
            });
            if valid {
                corrected.push(*e);
            } else if cand_attrs[e.slot] != ref_attrs[e.slot] {
                corrected.push(regenerate(e.slot));
            }
            // else: the candidate kept the reference's value, so the intent is dropped
        }
        for d in diff {
            if !original.iter().any(|e| e.slot == d.slot) {
                corrected.push(regenerate(d.slot));
            }
        }
        Ok(GenerateResponse {
            intents,
            corrected_instruction: self.grammar().render(&corrected),
        })
    }

    fn vqa(&self, req: &OracleRequest) -> Result<VqaResponse> {
        let cand = &self.world.item(&req.candidate.id)?.attributes;
        let answers = req
            .questions
            .iter()
            .map(|q| {
                let e = self.grammar().parse_question(q)?;
                Ok(Answer {
                    question: q.clone(),
                    answer: if cand[e.slot] == e.value { YesNo::Yes } else { YesNo::No },
                    confidence: 1.0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VqaResponse { answers })
    }
}

impl Oracle for MockOracle<'_> {
    fn call(&self, request: &OracleRequest) -> Result<OracleResponse> {
        match request.kind {
            RequestKind::GenerateCorrective => self.generate(request).map(OracleResponse::Generate),
            RequestKind::VqaCheck => self.vqa(request).map(OracleResponse::Vqa),
        }
    }
}

/// Client for a remote oracle server speaking the JSON protocol.
pub struct HttpOracle {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpOracle {
    /// `base_url` is the server root; requests go to `{base_url}/v1/oracle`.
    pub fn new(base_url: &str, timeout: Duration) -> Result<Self> {
        let base = base_url.trim_end_matches('/');
        let well_formed = ["http://", "https://"]
            .iter()
            .any(|s| base.strip_prefix(s).is_some_and(|rest| !rest.is_empty()));
        if !well_formed {
            return Err(Error::Argument(format!("oracle url must be http(s)://..., got '{base_url}'")));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpOracle {
            endpoint: format!("{base}{ORACLE_PATH}"),
            agent,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl Oracle for HttpOracle {
    fn call(&self, request: &OracleRequest) -> Result<OracleResponse> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| Error::Transport(format!("{}: {e}", self.endpoint)))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(format!("reading response: {e}")))?;
        if status >= 500 {
            return Err(Error::Transport(format!("server returned {status}")));
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Protocol(format!("non-JSON response ({status}): {e}")))?;
        if !(200..300).contains(&status) && body.get("error").is_none() {
            return Err(Error::Protocol(format!("server returned {status}")));
        }
        OracleResponse::from_json(request, &body)
    }
}
