//! Hierarchy-constrained proficiency: level embedding, intra-level
//! convolution-enhanced attention (CEA) and inter-level random-sampling
//! attention (RSA).
//!
//! Everything operates on the deduplicated g x k level matrix; students at
//! the same level share one row by construction, which is the hierarchy
//! constraint itself.

use crate::autodiff::{NodeId, Tape};
use crate::error::{HcdError, Result};
use crate::params::Binding;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// How RSA visits other levels: all of them (deterministic, used for
/// evaluation) or one sampled level per query level (used for training).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RsaMode {
    All,
    SampleOne,
}

impl FromStr for RsaMode {
    type Err = HcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(RsaMode::All),
            "sample-1" | "sample-one" | "sample_one" => Ok(RsaMode::SampleOne),
            other => Err(HcdError::Config(format!(
                "unknown RSA mode `{other}` (expected all|sample-1)"
            ))),
        }
    }
}

/// Ablation switches: replace a layer with plain row-mean aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoCea,
    NoRsa,
}

impl FromStr for Ablation {
    type Err = HcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Ablation::Full),
            "no_cea" | "no-cea" => Ok(Ablation::NoCea),
            "no_rsa" | "no-rsa" => Ok(Ablation::NoRsa),
            other => Err(HcdError::Config(format!(
                "unknown ablation `{other}` (expected full|no_cea|no_rsa)"
            ))),
        }
    }
}

/// Activation applied to the CEA attention scores. The reference design uses
/// sigmoid; softmax is exposed as an alternative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CeaAttention {
    Sigmoid,
    Softmax,
}

impl FromStr for CeaAttention {
    type Err = HcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(CeaAttention::Sigmoid),
            "softmax" => Ok(CeaAttention::Softmax),
            other => Err(HcdError::Config(format!(
                "unknown CEA attention `{other}` (expected sigmoid|softmax)"
            ))),
        }
    }
}

/// Which other level each query level attends to in RSA.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RsaChoices {
    /// Visit every other level and average.
    All,
    /// `choices[g0]` is the single other level sampled for level g0.
    Sampled(Vec<usize>),
}

impl RsaChoices {
    /// Uniformly samples one other level per query level.
    pub fn sample(g: usize, rng: &mut impl Rng) -> RsaChoices {
        let choices = (0..g)
            .map(|g0| {
                if g == 1 {
                    0 // unused; g = 1 has no other level
                } else {
                    let pick = rng.random_range(0..g - 1);
                    if pick >= g0 {
                        pick + 1
                    } else {
                        pick
                    }
                }
            })
            .collect();
        RsaChoices::Sampled(choices)
    }
}

/// Node handles of the hierarchy stage outputs on one tape.
pub struct HierarchyNodes {
    pub h_kcs: NodeId,
    pub h_intra: NodeId,
    pub h_inter: NodeId,
    /// g x k, strictly inside (0, 1); row l is the shared proficiency of
    /// every student at level l.
    pub theta: NodeId,
}

/// Level-concept embedding: the one-hot level stack times the embedding
/// weights, which collapses to the weight matrix plus a broadcast bias.
pub fn level_embedding(tape: &mut Tape, w_o: NodeId, b_o: NodeId) -> Result<NodeId> {
    tape.add_row(w_o, b_o)
}

/// Parameter nodes of one CEA head.
#[derive(Clone, Copy)]
pub struct CeaHead {
    pub kernel: NodeId,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

/// Intra-level attention: per head, convolve the level embedding along the
/// level axis, project to queries/keys/values, activate the scaled score
/// matrix, and apply it to the values; head outputs are averaged and pushed
/// through a final linear layer.
pub fn cea_forward(
    tape: &mut Tape,
    h_kcs: NodeId,
    heads: &[CeaHead],
    w_intra: NodeId,
    b_intra: NodeId,
    attention: CeaAttention,
) -> Result<NodeId> {
    if heads.is_empty() {
        return Err(HcdError::Config("CEA needs at least one head".into()));
    }
    let k = tape.value(h_kcs).cols();
    let scale = 1.0 / (k as f64).sqrt();

    let mut acc: Option<NodeId> = None;
    for head in heads {
        let conv = tape.conv1d_cols(h_kcs, head.kernel)?;
        let q = tape.matmul(conv, head.w_q)?;
        let key = tape.matmul(conv, head.w_k)?;
        let v = tape.matmul(conv, head.w_v)?;
        let key_t = tape.transpose(key);
        let scores = tape.matmul(q, key_t)?;
        let scaled = tape.scale(scores, scale);
        let weights = match attention {
            CeaAttention::Sigmoid => tape.sigmoid(scaled),
            CeaAttention::Softmax => tape.softmax_rows(scaled),
        };
        let z = tape.matmul(weights, v)?;
        acc = Some(match acc {
            Some(prev) => tape.add(prev, z)?,
            None => z,
        });
    }
    let summed = acc.expect("at least one head");
    let averaged = tape.scale(summed, 1.0 / heads.len() as f64);
    let projected = tape.matmul(averaged, w_intra)?;
    tape.add_row(projected, b_intra)
}

/// Inter-level attention. For each query level, the query comes from its
/// intra-level row and the keys/values from the level embeddings of the
/// visited levels; vectors are treated as columns, so each (query, key) pair
/// yields a k x k concept-attention matrix. Visited contexts are averaged.
/// With a single level there is nothing to attend to and the output is zero.
pub fn rsa_forward(
    tape: &mut Tape,
    h_intra: NodeId,
    h_kcs: NodeId,
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    choices: &RsaChoices,
) -> Result<NodeId> {
    let (g, k) = tape.value(h_intra).shape();
    if g == 1 {
        return Ok(tape.leaf(crate::array::Array::zeros(1, k)));
    }
    if let RsaChoices::Sampled(c) = choices {
        if c.len() != g {
            return Err(HcdError::Contract(format!(
                "RSA choices cover {} levels, expected {g}",
                c.len()
            )));
        }
        for (g0, &pick) in c.iter().enumerate() {
            if pick == g0 || pick >= g {
                return Err(HcdError::Contract(format!(
                    "RSA choice {pick} invalid for level {g0} of {g}"
                )));
            }
        }
    }
    let scale = 1.0 / (k as f64).sqrt();

    let mut rows = Vec::with_capacity(g);
    for g0 in 0..g {
        let intra_row = tape.row(h_intra, g0)?;
        let intra_col = tape.transpose(intra_row);
        let query = tape.matmul(w_q, intra_col)?;

        let visited: Vec<usize> = match choices {
            RsaChoices::All => (0..g).filter(|&o| o != g0).collect(),
            RsaChoices::Sampled(c) => vec![c[g0]],
        };
        let mut acc: Option<NodeId> = None;
        for other in &visited {
            let kc_row = tape.row(h_kcs, *other)?;
            let kc_col = tape.transpose(kc_row);
            let key = tape.matmul(w_k, kc_col)?;
            let value = tape.matmul(w_v, kc_col)?;
            let key_t = tape.transpose(key);
            let scores = tape.matmul(query, key_t)?;
            let scaled = tape.scale(scores, scale);
            let weights = tape.softmax_rows(scaled);
            let z = tape.matmul(weights, value)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, z)?,
                None => z,
            });
        }
        let summed = acc.expect("g > 1 so at least one visited level");
        let averaged = tape.scale(summed, 1.0 / visited.len() as f64);
        rows.push(tape.transpose(averaged));
    }
    tape.concat_rows(&rows)
}

/// Row r of the output is the mean of every other row of the input; with a
/// single row the output is zero (no other level to average).
fn leave_one_out_mean(tape: &mut Tape, input: NodeId) -> Result<NodeId> {
    let (g, k) = tape.value(input).shape();
    if g == 1 {
        return Ok(tape.leaf(crate::array::Array::zeros(1, k)));
    }
    let mut rows = Vec::with_capacity(g);
    for g0 in 0..g {
        let mut acc: Option<NodeId> = None;
        for other in (0..g).filter(|&o| o != g0) {
            let row = tape.row(input, other)?;
            acc = Some(match acc {
                Some(prev) => tape.add(prev, row)?,
                None => row,
            });
        }
        let summed = acc.expect("g > 1");
        rows.push(tape.scale(summed, 1.0 / (g - 1) as f64));
    }
    tape.concat_rows(&rows)
}

/// Final per-level proficiency: sigmoid of the combined intra- and
/// inter-level features. Students inherit the row of their level.
pub fn hierarchy_proficiency(tape: &mut Tape, h_intra: NodeId, h_inter: NodeId) -> Result<NodeId> {
    let combined = tape.add(h_intra, h_inter)?;
    Ok(tape.sigmoid(combined))
}

/// Runs the whole hierarchy stage on a tape from bound parameters.
/// Ablations swap a layer for row-mean aggregation of its input.
pub fn hierarchy_forward(
    tape: &mut Tape,
    binding: &Binding,
    heads: usize,
    attention: CeaAttention,
    ablation: Ablation,
    choices: &RsaChoices,
) -> Result<HierarchyNodes> {
    let w_o = binding.node("hier.w_o")?;
    let b_o = binding.node("hier.b_o")?;
    let h_kcs = level_embedding(tape, w_o, b_o)?;
    let g = tape.value(h_kcs).rows();

    let h_intra = if ablation == Ablation::NoCea {
        let mean = tape.col_mean(h_kcs);
        tape.repeat_rows(mean, g)?
    } else {
        let head_nodes: Vec<CeaHead> = (0..heads)
            .map(|i| {
                Ok(CeaHead {
                    kernel: binding.node(&format!("cea.h{i}.kernel"))?,
                    w_q: binding.node(&format!("cea.h{i}.w_q"))?,
                    w_k: binding.node(&format!("cea.h{i}.w_k"))?,
                    w_v: binding.node(&format!("cea.h{i}.w_v"))?,
                })
            })
            .collect::<Result<_>>()?;
        let w_intra = binding.node("cea.w_intra")?;
        let b_intra = binding.node("cea.b_intra")?;
        cea_forward(tape, h_kcs, &head_nodes, w_intra, b_intra, attention)?
    };

    let h_inter = if ablation == Ablation::NoRsa {
        // keep the mean over other levels but drop the attention: each level
        // receives the raw average of the other levels' embeddings
        leave_one_out_mean(tape, h_kcs)?
    } else {
        let w_q = binding.node("rsa.w_q")?;
        let w_k = binding.node("rsa.w_k")?;
        let w_v = binding.node("rsa.w_v")?;
        rsa_forward(tape, h_intra, h_kcs, w_q, w_k, w_v, choices)?
    };

    let theta = hierarchy_proficiency(tape, h_intra, h_inter)?;
    Ok(HierarchyNodes {
        h_kcs,
        h_intra,
        h_inter,
        theta,
    })
}
