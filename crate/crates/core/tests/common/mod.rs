//! Shared test support: naive straight-line reimplementations of every loss
//! and probability (the comparison oracles), and parameter flattening
//! helpers for finite-difference checks.
//!
//! Everything here is deliberately written the slow, obvious way (direct
//! exponential ratios, double loops) and must stay independent of the
//! optimized log-space implementations it checks.

#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ovlab_core::encoder::ClassId;
use ovlab_core::membank::MemoryBank;
use ovlab_core::numerics::Mat;
use ovlab_core::prompt::{BackgroundPrompt, ForegroundPrompt};

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Direct evaluation of the positive probability with the background slot in
/// the denominator.
pub fn naive_positive_prob(
    f: &[f64],
    rows: &[Vec<f64>],
    t_bg: &[f64],
    c_idx: usize,
    tau: f64,
) -> f64 {
    let mut denom = 0.0;
    for t in rows {
        denom += (cosine(f, t) / tau).exp();
    }
    denom += (cosine(f, t_bg) / tau).exp();
    (cosine(f, &rows[c_idx]) / tau).exp() / denom
}

/// Direct evaluation of the negative probability (classes only).
pub fn naive_negative_prob(f: &[f64], rows: &[Vec<f64>], c_idx: usize, tau: f64) -> f64 {
    let mut denom = 0.0;
    for t in rows {
        denom += (cosine(f, t) / tau).exp();
    }
    (cosine(f, &rows[c_idx]) / tau).exp() / denom
}

/// Double-loop mean of -log p over positives.
pub fn naive_loss_p(
    positives: &[(Vec<f64>, usize)],
    rows: &[Vec<f64>],
    t_bg: Option<&[f64]>,
    tau: f64,
) -> f64 {
    let mut sum = 0.0;
    for (f, c_idx) in positives {
        let p = match t_bg {
            Some(bg) => naive_positive_prob(f, rows, bg, *c_idx, tau),
            None => naive_negative_prob(f, rows, *c_idx, tau),
        };
        sum -= p.ln();
    }
    sum / positives.len() as f64
}

/// Double-loop mean of the uniform-target negative loss.
pub fn naive_loss_n(negatives: &[Vec<f64>], rows: &[Vec<f64>], tau: f64) -> f64 {
    let s = rows.len() as f64;
    let mut sum = 0.0;
    for f in negatives {
        for c_idx in 0..rows.len() {
            sum -= naive_negative_prob(f, rows, c_idx, tau).ln() / s;
        }
    }
    sum / negatives.len() as f64
}

/// O(N * |Q|^2) double-loop contrastive loss straight off the definition.
pub fn naive_icl_loss(
    anchors: &[(Vec<f64>, Option<ClassId>)],
    bank: &MemoryBank,
    gamma: f64,
    negatives_only_denominator: bool,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut scored = 0usize;
    for (z, key) in anchors {
        let positives: Vec<Vec<f64>> = bank
            .queue(*key)
            .unwrap()
            .iter()
            .map(|s| s.embedding.clone())
            .collect();
        let negatives: Vec<Vec<f64>> = bank
            .entries_excluding(*key)
            .map(|s| s.embedding.clone())
            .collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        scored += 1;
        let mut anchor_sum = 0.0;
        for zj in &positives {
            let dot_j: f64 = z.iter().zip(zj).map(|(a, b)| a * b).sum();
            let num = (dot_j / gamma).exp();
            let mut denom = 0.0;
            for zk in &negatives {
                let dot_k: f64 = z.iter().zip(zk).map(|(a, b)| a * b).sum();
                denom += (dot_k / gamma).exp();
            }
            if !negatives_only_denominator {
                denom += num;
            }
            anchor_sum += (num / denom).ln();
        }
        total -= anchor_sum / positives.len() as f64;
    }
    if scored > 0 {
        total /= scored as f64;
    }
    (total, scored)
}

/// Direct classification probabilities over classes plus background.
pub fn naive_classify(f: &[f64], t: &Mat, t_bg: &[f64], tau: f64) -> Vec<f64> {
    let mut e = Vec::with_capacity(t.rows + 1);
    for i in 0..t.rows {
        e.push((cosine(f, t.row(i)) / tau).exp());
    }
    e.push((cosine(f, t_bg) / tau).exp());
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// Double-loop mean cross-entropy with background targeting the last slot.
pub fn naive_loss_cls(
    batch: &[(Vec<f64>, Option<usize>)],
    t: &Mat,
    t_bg: &[f64],
    tau: f64,
) -> f64 {
    let mut sum = 0.0;
    for (f, target) in batch {
        let p = naive_classify(f, t, t_bg, tau);
        let idx = target.unwrap_or(t.rows);
        sum -= p[idx].ln();
    }
    sum / batch.len() as f64
}

// ---------------------------------------------------------------------------
// Prompt parameter flattening for finite differences
// ---------------------------------------------------------------------------

/// Flatten both prompts' context vectors into one parameter vector
/// (foreground first).
pub fn flatten_prompts(fg: &ForegroundPrompt, bg: &BackgroundPrompt) -> Vec<f64> {
    fg.context
        .iter()
        .chain(&bg.context)
        .flatten()
        .cloned()
        .collect()
}

/// Rebuild prompts from a flat parameter vector produced by
/// [`flatten_prompts`].
pub fn unflatten_prompts(
    flat: &[f64],
    fg_template: &ForegroundPrompt,
    bg_template: &BackgroundPrompt,
    d: usize,
) -> (ForegroundPrompt, BackgroundPrompt) {
    let mut fg = fg_template.clone();
    let mut bg = bg_template.clone();
    let mut at = 0;
    for v in &mut fg.context {
        v.copy_from_slice(&flat[at..at + d]);
        at += d;
    }
    for v in &mut bg.context {
        v.copy_from_slice(&flat[at..at + d]);
        at += d;
    }
    (fg, bg)
}

pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-300 {
        return (a - b).abs();
    }
    (a - b).abs() / scale
}

/// Norm-wise relative error between an analytic gradient and its
/// finite-difference estimate, with a floor for gradients that are
/// numerically zero on both routes (a central difference of a flat function
/// measures only rounding noise, so a relative comparison is meaningless
/// below ~1e-8).
pub fn grad_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale < 1e-8 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
