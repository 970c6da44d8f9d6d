//! Deterministic synthetic stand-ins for a frozen text encoder and its word
//! embedding table.
//!
//! The encoder is the simplest frozen differentiable map that keeps the
//! contract "token sequence in, unit-norm class embedding out": mean-pool the
//! sequence, apply a fixed seeded linear map, L2-normalize. It is
//! differentiable with respect to the sequence entries only; the weights are
//! immutable after construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Mat};

pub type ClassId = usize;

/// Mix a seed with a purpose tag so independent components of a run draw
/// from unrelated streams.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    (seed ^ tag).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// The deterministic encoder seed of a world: the frozen backbone is a
/// property of the task, shared by training and evaluation.
pub fn encoder_seed(world_seed: u64) -> u64 {
    mix_seed(world_seed, 0xE2)
}

/// Fixed per-class word embeddings, unit norm, immutable after creation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WordEmbeddingTable {
    pub dim: usize,
    pub seed: u64,
    entries: Vec<Vec<f64>>,
}

impl WordEmbeddingTable {
    /// Build a table from one unit-norm vector per class (class id = index).
    pub fn new(entries: Vec<Vec<f64>>, dim: usize, seed: u64) -> Result<Self> {
        for (c, w) in entries.iter().enumerate() {
            if w.len() != dim {
                return Err(Error::DimensionMismatch {
                    context: "WordEmbeddingTable entry",
                    expected: dim,
                    got: w.len(),
                });
            }
            let n = numerics::norm(w);
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "word embedding for class {c} has norm {n}, expected 1"
                )));
            }
        }
        Ok(WordEmbeddingTable { dim, seed, entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class: ClassId) -> Result<&[f64]> {
        self.entries
            .get(class)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownClass {
                class,
                context: "WordEmbeddingTable::get",
            })
    }
}

/// Frozen linear text encoder: `t = normalize(W * mean(sequence))`.
///
/// Weights are the orthonormalized rows of a seeded Gaussian draw, so the
/// map is an exact isometry: the cosine structure of its inputs survives
/// unchanged, and its transpose inverts it (which is what ties the word
/// embeddings of a synthetic world to the image prototypes, the way a
/// pretrained vision-language model ties its two towers together).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrozenTextEncoder {
    pub d_in: usize,
    pub d_out: usize,
    pub seed: u64,
    weights: Mat,
}

impl FrozenTextEncoder {
    pub fn new_seeded(d_in: usize, d_out: usize, seed: u64) -> Self {
        assert!(d_out <= d_in, "semi-orthogonal rows need d_out <= d_in");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / d_in as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        // Gram-Schmidt on Gaussian rows; a fresh row is drawn in the
        // (measure-zero) case one collapses.
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d_out);
        while rows.len() < d_out {
            let mut v: Vec<f64> = (0..d_in).map(|_| normal.sample(&mut rng)).collect();
            for r in &rows {
                let proj = numerics::dot(&v, r);
                numerics::axpy(&mut v, -proj, r);
            }
            if let Ok(u) = numerics::normalized(&v, "encoder row") {
                rows.push(u);
            }
        }
        FrozenTextEncoder {
            d_in,
            d_out,
            seed,
            weights: Mat::from_rows(rows).expect("rows share d_in"),
        }
    }

    /// Transpose of the weight matrix (the inverse map, since the rows are
    /// orthonormal).
    pub fn weights_transposed(&self) -> Mat {
        let mut t = Mat::zeros(self.d_in, self.d_out);
        for i in 0..self.d_out {
            for j in 0..self.d_in {
                t.data[j * self.d_out + i] = self.weights.data[i * self.d_in + j];
            }
        }
        t
    }

    /// Encoder with identity weights, for tests and degenerate setups.
    pub fn identity(d: usize) -> Self {
        FrozenTextEncoder {
            d_in: d,
            d_out: d,
            seed: 0,
            weights: Mat::identity(d),
        }
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    fn mean_pool(&self, sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
        if sequence.is_empty() {
            return Err(Error::EmptyInput("encode_text sequence"));
        }
        let mut mean = vec![0.0; self.d_in];
        for v in sequence {
            if v.len() != self.d_in {
                return Err(Error::DimensionMismatch {
                    context: "encode_text sequence entry",
                    expected: self.d_in,
                    got: v.len(),
                });
            }
            numerics::axpy(&mut mean, 1.0, v);
        }
        let inv = 1.0 / sequence.len() as f64;
        for x in &mut mean {
            *x *= inv;
        }
        Ok(mean)
    }

    /// `normalize(W * mean(sequence))`; output has unit norm.
    pub fn encode_text(&self, sequence: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mean = self.mean_pool(sequence)?;
        let y = self.weights.matvec(&mean);
        numerics::normalized(&y, "encode_text")
    }

    /// Vector-Jacobian product of [`Self::encode_text`]: the gradient of
    /// `<upstream, encode_text(sequence)>` with respect to each sequence
    /// position.
    ///
    /// Mean-pooling gives every position the same gradient; the per-position
    /// split matters to callers that route context-vector positions and the
    /// word-embedding position differently.
    pub fn encode_text_vjp(
        &self,
        sequence: &[Vec<f64>],
        upstream: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        if upstream.len() != self.d_out {
            return Err(Error::DimensionMismatch {
                context: "encode_text_vjp upstream",
                expected: self.d_out,
                got: upstream.len(),
            });
        }
        let mean = self.mean_pool(sequence)?;
        let y = self.weights.matvec(&mean);
        let n = numerics::norm(&y);
        if n <= 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm {
                context: "encode_text_vjp",
            });
        }
        let t = numerics::scale(&y, 1.0 / n);
        // d<u, y/|y|>/dy = (u - t <t,u>) / |y|
        let tu = numerics::dot(&t, upstream);
        let mut g_y = upstream.to_vec();
        numerics::axpy(&mut g_y, -tu, &t);
        for x in &mut g_y {
            *x /= n;
        }
        let g_mean = self.weights.tr_matvec(&g_y);
        let g_pos = numerics::scale(&g_mean, 1.0 / sequence.len() as f64);
        Ok(vec![g_pos; sequence.len()])
    }
}
