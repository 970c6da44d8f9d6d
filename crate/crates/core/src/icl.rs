//! Projection network and the instance-level contrastive loss over the
//! class-balanced memory bank, with analytic gradients through both the loss
//! and the projection parameters.
//!
//! For an anchor of class c, the entries of Q_c are its positives and every
//! entry of every other queue (background included) is a negative. Bank
//! entries are constants: gradients flow only through the anchor side, as in
//! queue-based contrastive training.
//!
//! The default follows the standard supervised-contrastive form: each
//! positive pair is scored against the anchor's negatives with the positive
//! term itself included in the denominator, so every log ratio is bounded
//! at zero and the loss is nonnegative. `negatives_only_denominator`
//! switches to a variant whose denominator sums only the negatives
//! (unbounded below), kept for comparison runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::membank::{MemoryBank, QueueKey};
use crate::numerics::{self, logsumexp, logsumexp2, Mat};

/// Two linear layers with a rectifier between them, followed by L2
/// normalization onto the unit sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionNet {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

/// Forward intermediates kept for the backward pass.
struct ProjectionTrace {
    input: Vec<f64>,
    pre_act: Vec<f64>,
    hidden: Vec<f64>,
    pre_norm_norm: f64,
    z: Vec<f64>,
}

impl ProjectionNet {
    pub fn new_seeded(d_in: usize, d_hidden: usize, d_proj: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |rows: usize, cols: usize| -> Mat {
            let normal = Normal::new(0.0, (1.0 / cols as f64).sqrt()).unwrap();
            Mat {
                rows,
                cols,
                data: (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
            }
        };
        ProjectionNet {
            w1: draw(d_hidden, d_in),
            b1: vec![0.0; d_hidden],
            w2: draw(d_proj, d_hidden),
            b2: vec![0.0; d_proj],
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.cols
    }

    pub fn d_proj(&self) -> usize {
        self.w2.rows
    }

    fn forward_trace(&self, f: &[f64]) -> Result<ProjectionTrace> {
        if f.len() != self.d_in() {
            return Err(Error::DimensionMismatch {
                context: "project input",
                expected: self.d_in(),
                got: f.len(),
            });
        }
        let mut pre_act = self.w1.matvec(f);
        for (u, b) in pre_act.iter_mut().zip(&self.b1) {
            *u += b;
        }
        let hidden: Vec<f64> = pre_act.iter().map(|u| u.max(0.0)).collect();
        let mut y = self.w2.matvec(&hidden);
        for (v, b) in y.iter_mut().zip(&self.b2) {
            *v += b;
        }
        let n = numerics::norm(&y);
        if n <= 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm { context: "project" });
        }
        let z = numerics::scale(&y, 1.0 / n);
        Ok(ProjectionTrace {
            input: f.to_vec(),
            pre_act,
            hidden,
            pre_norm_norm: n,
            z,
        })
    }

    /// `normalize(W2 * relu(W1 * f + b1) + b2)`; output unit norm.
    pub fn project(&self, f: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(f)?.z)
    }

    /// All parameters as one flat vector (w1, b1, w2, b2 order).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len());
        out.extend_from_slice(&self.w1.data);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2.data);
        out.extend_from_slice(&self.b2);
        out
    }

    /// Inverse of [`Self::flatten_params`].
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected =
            self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "ProjectionNet::set_from_flat",
                expected,
                got: flat.len(),
            });
        }
        let mut at = 0;
        let mut take = |len: usize| {
            let s = &flat[at..at + len];
            at += len;
            s
        };
        let n = self.w1.data.len();
        self.w1.data.copy_from_slice(take(n));
        let n = self.b1.len();
        self.b1.copy_from_slice(take(n));
        let n = self.w2.data.len();
        self.w2.data.copy_from_slice(take(n));
        let n = self.b2.len();
        self.b2.copy_from_slice(take(n));
        Ok(())
    }
}

/// Parameter gradients of a [`ProjectionNet`], same shapes as the net.
#[derive(Debug, Clone)]
pub struct NetGrads {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl NetGrads {
    pub fn zeros_like(net: &ProjectionNet) -> Self {
        NetGrads {
            w1: Mat::zeros(net.w1.rows, net.w1.cols),
            b1: vec![0.0; net.b1.len()],
            w2: Mat::zeros(net.w2.rows, net.w2.cols),
            b2: vec![0.0; net.b2.len()],
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.w1.data.iter_mut().for_each(|x| *x *= s);
        self.b1.iter_mut().for_each(|x| *x *= s);
        self.w2.data.iter_mut().for_each(|x| *x *= s);
        self.b2.iter_mut().for_each(|x| *x *= s);
    }

    /// Flat view matching [`ProjectionNet::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.w1.data);
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(&self.w2.data);
        out.extend_from_slice(&self.b2);
        out
    }
}

/// Anchors for one contrastive step: projected embeddings with their queue
/// key (a base class, or None for background).
#[derive(Debug, Clone, Default)]
pub struct ContrastiveBatch {
    pub anchors: Vec<(Vec<f64>, QueueKey)>,
}

/// Value of the contrastive loss plus anchor accounting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IclLoss {
    pub loss: f64,
    /// Anchors actually scored (the N in the mean).
    pub scored: usize,
    /// Anchors skipped because their positive or negative set was empty.
    pub skipped: usize,
}

fn anchor_terms(
    z: &[f64],
    key: QueueKey,
    bank: &MemoryBank,
    gamma: f64,
) -> Result<Option<(Vec<f64>, Vec<f64>, f64)>> {
    let positives = bank.queue(key)?;
    let neg_scores: Vec<f64> = bank
        .entries_excluding(key)
        .map(|s| numerics::dot(z, &s.embedding) / gamma)
        .collect();
    if positives.is_empty() || neg_scores.is_empty() {
        return Ok(None);
    }
    let pos_scores: Vec<f64> = positives
        .iter()
        .map(|s| numerics::dot(z, &s.embedding) / gamma)
        .collect();
    let lse_neg = logsumexp(&neg_scores);
    Ok(Some((pos_scores, neg_scores, lse_neg)))
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma <= 0.0 || !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "contrastive temperature must be positive, got {gamma}"
        )));
    }
    Ok(())
}

/// Instance contrastive loss over the bank, computed in log space.
///
/// Anchors whose own queue or negative set is empty (the degenerate
/// early-training state) are skipped and counted; the mean runs over the
/// anchors actually scored. With nothing scored the loss is 0.
pub fn icl_loss(
    batch: &ContrastiveBatch,
    bank: &MemoryBank,
    gamma: f64,
    negatives_only_denominator: bool,
) -> Result<IclLoss> {
    check_gamma(gamma)?;
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for (z, key) in &batch.anchors {
        let Some((pos_scores, _negs, lse_neg)) = anchor_terms(z, *key, bank, gamma)? else {
            skipped += 1;
            continue;
        };
        let mut anchor_sum = 0.0;
        for &s_j in &pos_scores {
            let denom = if negatives_only_denominator {
                lse_neg
            } else {
                logsumexp2(s_j, lse_neg)
            };
            anchor_sum += s_j - denom;
        }
        total -= anchor_sum / pos_scores.len() as f64;
        scored += 1;
    }
    if scored > 0 {
        total /= scored as f64;
    }
    Ok(IclLoss {
        loss: total,
        scored,
        skipped,
    })
}

/// Loss, parameter gradients, and per-input gradients of the contrastive
/// loss with raw features pushed through the projection net.
#[derive(Debug)]
pub struct IclBackward {
    pub loss: f64,
    pub scored: usize,
    pub skipped: usize,
    pub grad_net: NetGrads,
    /// Gradient with respect to each raw input feature (zero rows for
    /// skipped anchors).
    pub grad_inputs: Vec<Vec<f64>>,
}

/// Full backward pass of [`icl_loss`] through the projection net.
///
/// `inputs` hold raw (pre-projection) features; bank entries stay constant.
pub fn icl_grads(
    inputs: &[(Vec<f64>, QueueKey)],
    net: &ProjectionNet,
    bank: &MemoryBank,
    gamma: f64,
    negatives_only_denominator: bool,
) -> Result<IclBackward> {
    check_gamma(gamma)?;
    let mut grad_net = NetGrads::zeros_like(net);
    let mut grad_inputs: Vec<Vec<f64>> = inputs.iter().map(|(f, _)| vec![0.0; f.len()]).collect();
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;

    for (idx, (f, key)) in inputs.iter().enumerate() {
        let trace = net.forward_trace(f)?;
        let Some((pos_scores, neg_scores, lse_neg)) =
            anchor_terms(&trace.z, *key, bank, gamma)?
        else {
            skipped += 1;
            continue;
        };
        scored += 1;
        let inv_q = 1.0 / pos_scores.len() as f64;

        // Loss terms and coefficients of d(anchor loss)/d(score).
        let mut anchor_sum = 0.0;
        let mut pos_coeff = Vec::with_capacity(pos_scores.len());
        // T = sum_j exp(lse_neg - denom_j); negatives share it.
        let mut t_factor = 0.0;
        for &s_j in &pos_scores {
            let denom = if negatives_only_denominator {
                lse_neg
            } else {
                logsumexp2(s_j, lse_neg)
            };
            anchor_sum += s_j - denom;
            let d_term_d_sj = if negatives_only_denominator {
                1.0
            } else {
                1.0 - (s_j - denom).exp()
            };
            pos_coeff.push(-inv_q * d_term_d_sj);
            t_factor += (lse_neg - denom).exp();
        }
        total -= anchor_sum * inv_q;

        // d(anchor loss)/dz, with bank embeddings as constants.
        let mut g_z = vec![0.0; trace.z.len()];
        let positives = bank.queue(*key)?;
        for (coeff, s) in pos_coeff.iter().zip(positives.iter()) {
            numerics::axpy(&mut g_z, coeff / gamma, &s.embedding);
        }
        for (k, s) in bank.entries_excluding(*key).enumerate() {
            let coeff = inv_q * t_factor * (neg_scores[k] - lse_neg).exp();
            numerics::axpy(&mut g_z, coeff / gamma, &s.embedding);
        }

        // Backward through normalization and the two layers.
        let ztg = numerics::dot(&trace.z, &g_z);
        let mut g_y = g_z;
        numerics::axpy(&mut g_y, -ztg, &trace.z);
        for x in &mut g_y {
            *x /= trace.pre_norm_norm;
        }
        numerics::axpy(&mut grad_net.b2, 1.0, &g_y);
        grad_net.w2.add_scaled_outer(1.0, &g_y, &trace.hidden);
        let g_hidden = net.w2.tr_matvec(&g_y);
        let g_pre: Vec<f64> = g_hidden
            .iter()
            .zip(&trace.pre_act)
            .map(|(g, u)| if *u > 0.0 { *g } else { 0.0 })
            .collect();
        numerics::axpy(&mut grad_net.b1, 1.0, &g_pre);
        grad_net.w1.add_scaled_outer(1.0, &g_pre, &trace.input);
        grad_inputs[idx] = net.w1.tr_matvec(&g_pre);
    }

    if scored > 0 {
        let inv_n = 1.0 / scored as f64;
        total *= inv_n;
        grad_net.scale(inv_n);
        for g in &mut grad_inputs {
            for x in g.iter_mut() {
                *x *= inv_n;
            }
        }
    }

    Ok(IclBackward {
        loss: total,
        scored,
        skipped,
        grad_net,
        grad_inputs,
    })
}
