//! Hard-negative selection, synthetic negatives, pair weights and the
//! debiased negative term.
//!
//! Batch layout: a `2N x d` block of unit rows where row `a` and row
//! `(a + N) mod 2N` are the two views of one input. For anchor `a` every
//! other row except its partner is a negative.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{norm, similarity_matrix, top_k_desc, Matrix, ZERO_NORM};
use crate::rng::{stream, Purpose};

/// How negatives are weighted inside the negative term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// Every negative has weight 1.
    Uniform,
    /// Weight `beta * exp(sim / r)`.
    Similarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossParams {
    /// Temperature.
    pub r: f64,
    /// Class probability used for debiasing, in `[0, 1)`.
    pub tau: f64,
    /// Weighting control factor.
    pub beta: f64,
    /// Size of the per-anchor hardest set.
    pub s: usize,
    /// Number of synthetic negatives per anchor.
    pub k: usize,
    pub weight_mode: WeightMode,
    /// Floor the negative term at `M * exp(-1/r)`.
    pub clamp_floor: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            r: 0.5,
            tau: 0.1,
            beta: 1.0,
            s: 32,
            k: 8,
            weight_mode: WeightMode::Similarity,
            clamp_floor: true,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::config(format!("temperature r must be > 0, got {}", self.r)));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::InvalidTau(self.tau));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.k > 0 && self.s < 2 {
            return Err(Error::config(format!(
                "synthesis needs s >= 2 parents, got s = {}",
                self.s
            )));
        }
        Ok(())
    }

    /// Per-anchor negative count `M = 2N - 2 + k`.
    pub fn negative_count(&self, batch_n: usize) -> usize {
        2 * batch_n - 2 + self.k
    }
}

/// Index of the other view of `anchor` in a batch of `two_n` rows.
pub fn partner(two_n: usize, anchor: usize) -> usize {
    (anchor + two_n / 2) % two_n
}

/// `true` exactly at the anchor's negatives: everything except itself and
/// its partner view.
pub fn negative_mask(two_n: usize, anchor: usize) -> Vec<bool> {
    assert!(two_n.is_multiple_of(2), "batch of {two_n} rows is not two views");
    assert!(anchor < two_n, "anchor {anchor} outside batch of {two_n}");
    let pos = partner(two_n, anchor);
    (0..two_n).map(|i| i != anchor && i != pos).collect()
}

/// The `s` negatives most similar to the anchor, most similar first.
pub fn select_hardest(sim_row: &[f64], mask: &[bool], s: usize) -> Result<Vec<usize>> {
    top_k_desc(sim_row, mask, s)
}

/// Synthetic negatives with the parents and mixing weights that made them.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis {
    /// `k x d`, unit rows.
    pub vectors: Matrix,
    /// Row indices into the feature matrix, `(i, j)` per synthetic row.
    pub parents: Vec<(usize, usize)>,
    /// `h_p ∝ alpha_p * z_i + (1 - alpha_p) * z_j`.
    pub alphas: Vec<f64>,
}

/// Uniform draw on the open interval (0, 1).
fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let a: f64 = rng.random();
        if a > 0.0 && a < 1.0 {
            return a;
        }
    }
}

/// Mixes `k` pairs of distinct hardest negatives and projects each mix back
/// onto the unit sphere.
pub fn synthesize(
    features: &Matrix,
    hard_indices: &[usize],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Synthesis> {
    if hard_indices.len() < 2 {
        return Err(Error::InsufficientParents(hard_indices.len()));
    }
    let d = features.cols();
    let mut vectors = Matrix::zeros(k, d);
    let mut parents = Vec::with_capacity(k);
    let mut alphas = Vec::with_capacity(k);
    for p in 0..k {
        let pick = index::sample(rng, hard_indices.len(), 2);
        let (i, j) = (hard_indices[pick.index(0)], hard_indices[pick.index(1)]);
        let alpha = open_unit(rng);
        let row = vectors.row_mut(p);
        for ((h, &zi), &zj) in row.iter_mut().zip(features.row(i)).zip(features.row(j)) {
            *h = alpha * zi + (1.0 - alpha) * zj;
        }
        let n = norm(row);
        if n < ZERO_NORM {
            return Err(Error::ZeroRow { row: p });
        }
        row.iter_mut().for_each(|h| *h /= n);
        parents.push((i, j));
        alphas.push(alpha);
    }
    Ok(Synthesis {
        vectors,
        parents,
        alphas,
    })
}

/// Weight of each negative pair given its similarity to the anchor.
pub fn pair_weights(sims: &[f64], params: &LossParams) -> Vec<f64> {
    match params.weight_mode {
        WeightMode::Uniform => vec![1.0; sims.len()],
        WeightMode::Similarity => sims
            .iter()
            .map(|s| params.beta * (s / params.r).exp())
            .collect(),
    }
}

/// Smallest value the clamped negative term may take: `M * exp(-1/r)`.
pub fn clamp_floor(m: usize, r: f64) -> f64 {
    m as f64 * (-1.0 / r).exp()
}

/// `(weighted_exp_sum - tau * M * pos_exp) / (1 - tau)`, optionally floored
/// at `M * exp(-1/r)`.
pub fn debiased_negative_term(
    weighted_exp_sum: f64,
    pos_exp: f64,
    m: usize,
    params: &LossParams,
) -> Result<f64> {
    if !(0.0..1.0).contains(&params.tau) {
        return Err(Error::InvalidTau(params.tau));
    }
    let value = (weighted_exp_sum - params.tau * m as f64 * pos_exp) / (1.0 - params.tau);
    Ok(if params.clamp_floor {
        value.max(clamp_floor(m, params.r))
    } else {
        value
    })
}

/// Everything sampled for one anchor in one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSet {
    pub anchor: usize,
    /// Hardest negatives, most similar first. Empty when `k == 0`.
    pub hard_indices: Vec<usize>,
    pub parents: Vec<(usize, usize)>,
    pub alphas: Vec<f64>,
    #[serde(skip)]
    pub synthetic: Option<Matrix>,
}

/// Identifies the random streams of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepKey {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

impl StepKey {
    pub fn anchor_rng(&self, anchor: usize) -> rand_chacha::ChaCha8Rng {
        stream(
            self.seed,
            Purpose::Synthesis,
            &[self.epoch, self.step, anchor as u64],
        )
    }
}

/// Builds the negative set of every anchor in a `2N x d` batch of unit rows.
///
/// Anchors are independent and each draws from its own keyed stream, so the
/// parallel build is identical to a serial one.
pub fn build_negative_sets(
    z: &Matrix,
    params: &LossParams,
    key: StepKey,
) -> Result<Vec<NegativeSet>> {
    let two_n = z.rows();
    if !two_n.is_multiple_of(2) {
        return Err(Error::shape("negative sets", format!("{two_n} rows is not two views")));
    }
    if params.k == 0 {
        return Ok((0..two_n)
            .map(|anchor| NegativeSet {
                anchor,
                hard_indices: vec![],
                parents: vec![],
                alphas: vec![],
                synthetic: None,
            })
            .collect());
    }
    let sims = similarity_matrix(z, z)?;
    (0..two_n)
        .into_par_iter()
        .map(|anchor| {
            let mask = negative_mask(two_n, anchor);
            let hard = select_hardest(sims.row(anchor), &mask, params.s)?;
            let mut rng = key.anchor_rng(anchor);
            let syn = synthesize(z, &hard, params.k, &mut rng)?;
            Ok(NegativeSet {
                anchor,
                hard_indices: hard,
                parents: syn.parents,
                alphas: syn.alphas,
                synthetic: Some(syn.vectors),
            })
        })
        .collect()
}
