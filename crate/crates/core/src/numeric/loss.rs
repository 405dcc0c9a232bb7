//! InfoNCE and in-group triplet margin losses, plus the batched hybrid
//! objective with analytic gradients through both towers.

use serde::{Deserialize, Serialize};

use super::encoder::{EncoderParameters, ForwardTrace};
use super::vector::{cosine_similarity, cosine_with_grad};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.03,
            margin: 0.05,
            lambda: 0.30,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Argument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Argument(format!("margin must be >= 0, got {}", self.margin)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Argument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("temperature must be positive, got {tau}")))
    }
}

/// Softmax cross-entropy over cosine similarities from precomputed logits.
/// Returns the loss and the softmax probabilities.
fn info_nce_from_sims(sims: &[f64], positive: usize, tau: f64) -> (f64, Vec<f64>) {
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (sims[positive] - max) / tau;
    let probs = exps.into_iter().map(|e| e / z).collect();
    // rounding can push a perfectly confident softmax a hair below zero
    (loss.max(0.0), probs)
}

/// `−log softmax_τ(s(q, ·))[positive]` over the candidate targets.
pub fn info_nce(q: &[f64], targets: &[&[f64]], positive_index: usize, tau: f64) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Argument("info_nce needs at least one target".into()));
    }
    if positive_index >= targets.len() {
        return Err(Error::Argument(format!(
            "positive index {positive_index} out of range for {} targets",
            targets.len()
        )));
    }
    check_temperature(tau)?;
    let sims = targets
        .iter()
        .map(|t| cosine_similarity(q, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(info_nce_from_sims(&sims, positive_index, tau).0)
}

fn hinge(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (s_neg - s_pos + margin).max(0.0)
}

/// `max(0, s(q, t⁻) − s(q, t⁺) + m)`.
pub fn triplet_margin(q: &[f64], t_pos: &[f64], t_neg: &[f64], margin: f64) -> Result<f64> {
    if margin.is_nan() || margin < 0.0 {
        return Err(Error::Argument(format!("margin must be >= 0, got {margin}")));
    }
    let s_pos = cosine_similarity(q, t_pos)?;
    let s_neg = cosine_similarity(q, t_neg)?;
    Ok(hinge(s_pos, s_neg, margin))
}

/// One query in a training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub target_image: Vec<f64>,
    /// Indices of other batch items whose targets serve as this query's
    /// triplet negatives. Empty means no triplet term.
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        for (i, item) in self.items.iter().enumerate() {
            for &n in &item.negatives {
                if n >= self.items.len() || n == i {
                    return Err(Error::Argument(format!(
                        "batch item {i} names invalid negative {n}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub infonce: f64,
    pub triplet: f64,
}

/// Gradient of the hybrid objective, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: EncoderParameters,
    pub loss: LossTerms,
}

struct Forward {
    query_traces: Vec<ForwardTrace>,
    target_traces: Vec<ForwardTrace>,
}

fn forward(params: &EncoderParameters, batch: &Batch) -> Result<Forward> {
    let query_traces = batch
        .items
        .iter()
        .map(|it| {
            params.query_tower.forward_trace(
                &EncoderParameters::query_input(&it.image, &it.text),
                "encode_query",
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let target_traces = batch
        .items
        .iter()
        .map(|it| params.target_tower.forward_trace(&it.target_image, "encode_target"))
        .collect::<Result<Vec<_>>>()?;
    Ok(Forward {
        query_traces,
        target_traces,
    })
}

fn run(
    params: &EncoderParameters,
    batch: &Batch,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(LossTerms, Option<EncoderParameters>)> {
    cfg.validate()?;
    batch.validate()?;
    let fwd = forward(params, batch)?;
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let tau = cfg.temperature;

    // ∂L/∂z for every query and target embedding
    let dim = params.embedding_dim();
    let mut d_query = vec![vec![0.0; dim]; if with_grad { b } else { 0 }];
    let mut d_target = vec![vec![0.0; dim]; if with_grad { b } else { 0 }];

    let mut infonce_sum = 0.0;
    let mut triplet_sum = 0.0;
    for i in 0..b {
        let q = fwd.query_traces[i].output();
        let mut sims = Vec::with_capacity(b);
        let mut grads = Vec::with_capacity(if with_grad { b } else { 0 });
        for t in &fwd.target_traces {
            if with_grad {
                let (s, dq, dt) = cosine_with_grad(q, t.output())?;
                sims.push(s);
                grads.push((dq, dt));
            } else {
                sims.push(cosine_similarity(q, t.output())?);
            }
        }
        let (loss_i, probs) = info_nce_from_sims(&sims, i, tau);
        infonce_sum += loss_i;

        // coefficient ∂L/∂s_ij
        let mut coef: Vec<f64> = if with_grad {
            probs
                .iter()
                .enumerate()
                .map(|(j, p)| (p - if j == i { 1.0 } else { 0.0 }) * inv_b / tau)
                .collect()
        } else {
            Vec::new()
        };

        let negatives = &batch.items[i].negatives;
        if !negatives.is_empty() {
            let inv_n = 1.0 / negatives.len() as f64;
            let mut trip_i = 0.0;
            for &n in negatives {
                let h = hinge(sims[i], sims[n], cfg.margin);
                trip_i += h;
                // the kink itself is treated as the satisfied side
                if with_grad && h > 0.0 && cfg.lambda != 0.0 {
                    let w = cfg.lambda * inv_b * inv_n;
                    coef[n] += w;
                    coef[i] -= w;
                }
            }
            triplet_sum += trip_i * inv_n;
        }

        if with_grad {
            for (j, (c, (dq, dt))) in coef.iter().zip(&grads).enumerate() {
                if *c == 0.0 {
                    continue;
                }
                d_query[i].iter_mut().zip(dq).for_each(|(a, g)| *a += c * g);
                d_target[j].iter_mut().zip(dt).for_each(|(a, g)| *a += c * g);
            }
        }
    }

    let infonce = infonce_sum * inv_b;
    let triplet = triplet_sum * inv_b;
    let total = if cfg.lambda == 0.0 {
        infonce
    } else {
        infonce + cfg.lambda * triplet
    };
    let terms = LossTerms {
        total,
        infonce,
        triplet,
    };
    if !with_grad {
        return Ok((terms, None));
    }

    let mut grad = params.zeros_like();
    for (trace, d) in fwd.query_traces.iter().zip(&d_query) {
        params.query_tower.backward(trace, d, &mut grad.query_tower);
    }
    for (trace, d) in fwd.target_traces.iter().zip(&d_target) {
        params.target_tower.backward(trace, d, &mut grad.target_tower);
    }
    Ok((terms, Some(grad)))
}

/// Forward-only evaluation of `L_infoNCE + λ·L_triplet`, both averaged over
/// the queries of the batch.
pub fn batch_loss(params: &EncoderParameters, batch: &Batch, cfg: &LossConfig) -> Result<LossTerms> {
    Ok(run(params, batch, cfg, false)?.0)
}

/// The hybrid objective and its gradient with respect to every parameter.
pub fn total_loss(params: &EncoderParameters, batch: &Batch, cfg: &LossConfig) -> Result<Gradients> {
    let (loss, grad) = run(params, batch, cfg, true)?;
    Ok(Gradients {
        params: grad.expect("requested"),
        loss,
    })
}
