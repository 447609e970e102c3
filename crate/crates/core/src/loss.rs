//! Batch-level contrastive losses.
//!
//! [`info_nce`] is the plain objective evaluated directly. [`sscl_loss_on_tape`]
//! records the full objective (real negatives, synthetic negatives, pair
//! weights, debiasing and the optional floor) on an autodiff tape so that the
//! gradient reaches every parameter upstream of the features. Index
//! selections and mixing coefficients are taken from precomputed
//! [`NegativeSet`]s and act as constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::negatives::{build_negative_sets, clamp_floor, partner, LossParams, NegativeSet, StepKey, WeightMode};

/// Ablation family. Each mode fixes which components of the objective are on.
///
/// | mode           | weights    | debias | synthesis |
/// |----------------|------------|--------|-----------|
/// | `baseline`     | uniform    | no     | no        |
/// | `synth`        | uniform    | no     | yes       |
/// | `synth-debias` | uniform    | yes    | yes       |
/// | `sampling`     | similarity | yes    | no        |
/// | `sscl`         | similarity | yes    | yes       |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "synth")]
    Synth,
    #[serde(rename = "synth-debias")]
    SynthDebias,
    #[serde(rename = "sampling")]
    Sampling,
    #[serde(rename = "sscl")]
    Sscl,
}

impl LossMode {
    pub const ALL: [LossMode; 5] = [
        LossMode::Baseline,
        LossMode::Synth,
        LossMode::SynthDebias,
        LossMode::Sampling,
        LossMode::Sscl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Baseline => "baseline",
            LossMode::Synth => "synth",
            LossMode::SynthDebias => "synth-debias",
            LossMode::Sampling => "sampling",
            LossMode::Sscl => "sscl",
        }
    }

    /// The parameters actually used by this mode.
    pub fn effective(self, params: &LossParams) -> LossParams {
        let (weight_mode, debias, synth) = match self {
            LossMode::Baseline => (WeightMode::Uniform, false, false),
            LossMode::Synth => (WeightMode::Uniform, false, true),
            LossMode::SynthDebias => (WeightMode::Uniform, true, true),
            LossMode::Sampling => (WeightMode::Similarity, true, false),
            LossMode::Sscl => (WeightMode::Similarity, true, true),
        };
        LossParams {
            weight_mode,
            tau: if debias { params.tau } else { 0.0 },
            k: if synth { params.k } else { 0 },
            ..params.clone()
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = LossMode::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!("unknown loss mode `{s}`; valid modes: {}", valid.join(", ")))
            })
    }
}

fn check_batch(z: &Matrix) -> Result<usize> {
    if z.rows() == 0 || !z.rows().is_multiple_of(2) {
        return Err(Error::shape(
            "contrastive loss",
            format!("batch of {} rows is not two views of N >= 1 inputs", z.rows()),
        ));
    }
    Ok(z.rows())
}

/// Mean over all `2N` anchors of `-log(pos / (pos + sum of negatives))`.
pub fn info_nce(z: &Matrix, r: f64) -> Result<f64> {
    let two_n = check_batch(z)?;
    let mut total = 0.0;
    for a in 0..two_n {
        let p = partner(two_n, a);
        let pos = (dot(z.row(a), z.row(p)) / r).exp();
        let neg: f64 = (0..two_n)
            .filter(|&i| i != a && i != p)
            .map(|i| (dot(z.row(a), z.row(i)) / r).exp())
            .sum();
        total += -(pos / (pos + neg)).ln();
    }
    Ok(total / two_n as f64)
}

/// Node ids of a recorded loss.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// `1 x 1` mean loss.
    pub loss: NodeId,
    /// `2N x 1` per-anchor terms.
    pub per_anchor: NodeId,
    /// `2N x 1` positive terms `exp(sim(z, z') / r)`.
    pub pos_exp: NodeId,
    /// `2N x 1` negative terms after debiasing and flooring.
    pub negative: NodeId,
}

/// Records the full objective for a `2N x d` node of unit rows.
///
/// `params` must already be the effective parameters of the chosen mode.
/// `sets[a]` supplies the synthetic negatives of anchor `a` when `k > 0`.
pub fn sscl_loss_on_tape(
    tape: &mut Tape,
    z: NodeId,
    params: &LossParams,
    sets: &[NegativeSet],
) -> Result<LossNodes> {
    params.validate()?;
    let two_n = check_batch(tape.value(z))?;
    let k = params.k;
    let inv_r = 1.0 / params.r;
    let m = two_n - 2 + k;

    // positives: rowwise dot with the partner view
    let mut swap = Matrix::zeros(two_n, two_n);
    let mut mask = Matrix::filled(two_n, two_n, 1.0);
    for a in 0..two_n {
        swap.set(a, partner(two_n, a), 1.0);
        mask.set(a, a, 0.0);
        mask.set(a, partner(two_n, a), 0.0);
    }
    let swap = tape.constant(swap);
    let zp = tape.matmul(swap, z)?;
    let zz = tape.mul(z, zp)?;
    let pos_sim = tape.row_sum(zz)?;
    let pos_logit = tape.scale(pos_sim, inv_r)?;
    let pos_exp = tape.exp(pos_logit)?;

    // real negatives
    let sims = tape.matmul_t(z, z)?;
    let logits = tape.scale(sims, inv_r)?;
    let exps = tape.exp(logits)?;
    let weighted = weigh(tape, exps, params)?;
    let mask = tape.constant(mask);
    let masked = tape.mul(weighted, mask)?;
    let mut neg = tape.row_sum(masked)?;

    // synthetic negatives: row a*k + p mixes the parents of anchor a
    if k > 0 {
        if sets.len() != two_n {
            return Err(Error::shape(
                "sscl loss",
                format!("{} negative sets for {two_n} anchors", sets.len()),
            ));
        }
        let mut mix = Matrix::zeros(two_n * k, two_n);
        let mut anchor_of = Matrix::zeros(two_n * k, two_n);
        let mut gather = Matrix::zeros(two_n, two_n * k);
        for (a, set) in sets.iter().enumerate() {
            if set.parents.len() != k || set.alphas.len() != k {
                return Err(Error::shape(
                    "sscl loss",
                    format!("anchor {a} has {} synthetic negatives, expected {k}", set.parents.len()),
                ));
            }
            for (p, (&(i, j), &alpha)) in set.parents.iter().zip(&set.alphas).enumerate() {
                let row = a * k + p;
                mix.set(row, i, mix.get(row, i) + alpha);
                mix.set(row, j, mix.get(row, j) + (1.0 - alpha));
                anchor_of.set(row, a, 1.0);
                gather.set(a, row, 1.0);
            }
        }
        let mix = tape.constant(mix);
        let mixed = tape.matmul(mix, z)?;
        let synth = tape.normalize_rows(mixed)?;
        let anchor_of = tape.constant(anchor_of);
        let anchors = tape.matmul(anchor_of, z)?;
        let prod = tape.mul(anchors, synth)?;
        let synth_sim = tape.row_sum(prod)?;
        let synth_logit = tape.scale(synth_sim, inv_r)?;
        let synth_exp = tape.exp(synth_logit)?;
        let synth_weighted = weigh(tape, synth_exp, params)?;
        let gather = tape.constant(gather);
        let synth_sum = tape.matmul(gather, synth_weighted)?;
        neg = tape.add(neg, synth_sum)?;
    }

    // debiasing: (neg - tau * M * pos) / (1 - tau)
    let bias = tape.scale(pos_exp, params.tau * m as f64)?;
    let neg = tape.sub(neg, bias)?;
    let mut neg = tape.scale(neg, 1.0 / (1.0 - params.tau))?;
    if params.clamp_floor {
        neg = tape.clamp_min(neg, clamp_floor(m, params.r))?;
    }

    // -log(pos / (pos + neg)) = log(pos + neg) - sim / r
    let denom = tape.add(pos_exp, neg)?;
    let log_denom = tape.log(denom)?;
    let per_anchor = tape.sub(log_denom, pos_logit)?;
    let total = tape.sum(per_anchor)?;
    let loss = tape.scale(total, 1.0 / two_n as f64)?;
    Ok(LossNodes {
        loss,
        per_anchor,
        pos_exp,
        negative: neg,
    })
}

/// Applies pair weights to `exp(sim / r)` terms: `beta * e * e` or `e`.
fn weigh(tape: &mut Tape, exps: NodeId, params: &LossParams) -> Result<NodeId> {
    match params.weight_mode {
        WeightMode::Uniform => Ok(exps),
        WeightMode::Similarity => {
            let w = tape.scale(exps, params.beta)?;
            tape.mul(w, exps)
        }
    }
}

/// Value of the full objective with everything it sampled.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub per_anchor: Vec<f64>,
    /// `pos / (pos + neg)` per anchor: the argument of the log.
    pub log_arguments: Vec<f64>,
    pub sets: Vec<NegativeSet>,
}

/// Evaluates the objective of `mode` on a `2N x d` block of unit rows.
pub fn sscl_loss(z: &Matrix, mode: LossMode, params: &LossParams, key: StepKey) -> Result<LossEval> {
    let params = mode.effective(params);
    params.validate()?;
    check_batch(z)?;
    let sets = build_negative_sets(z, &params, key)?;
    evaluate_with_sets(z, &params, sets)
}

/// Evaluates the objective with fixed negative sets.
pub fn evaluate_with_sets(z: &Matrix, params: &LossParams, sets: Vec<NegativeSet>) -> Result<LossEval> {
    let mut tape = Tape::new();
    let zn = tape.constant(z.clone());
    let nodes = sscl_loss_on_tape(&mut tape, zn, params, &sets)?;
    let pos = tape.value(nodes.pos_exp).as_slice();
    let neg = tape.value(nodes.negative).as_slice();
    Ok(LossEval {
        loss: tape.scalar(nodes.loss),
        per_anchor: tape.value(nodes.per_anchor).as_slice().to_vec(),
        log_arguments: pos.iter().zip(neg).map(|(p, n)| p / (p + n)).collect(),
        sets,
    })
}
