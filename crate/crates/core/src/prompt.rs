//! Learnable foreground and background prompt representations and their
//! assembly into encoder input sequences.
//!
//! The foreground prompt is a class-shared list of context vectors; a class
//! prompt is that context with the class word embedding inserted at a
//! configurable position. The background prompt is context only: it carries
//! no word embedding.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{ClassId, FrozenTextEncoder, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Standard deviation of prompt initialization.
pub const INIT_STD: f64 = 0.02;

/// Where the class word embedding sits inside the assembled prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenPosition {
    Front,
    Middle,
    #[default]
    End,
}

impl FromStr for TokenPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(TokenPosition::Front),
            "middle" => Ok(TokenPosition::Middle),
            "end" => Ok(TokenPosition::End),
            other => Err(Error::InvalidConfig(format!(
                "unknown token position '{other}' (expected front|middle|end)"
            ))),
        }
    }
}

impl fmt::Display for TokenPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenPosition::Front => write!(f, "front"),
            TokenPosition::Middle => write!(f, "middle"),
            TokenPosition::End => write!(f, "end"),
        }
    }
}

/// Class-shared learnable context vectors plus the word-embedding position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForegroundPrompt {
    pub context: Vec<Vec<f64>>,
    pub token_position: TokenPosition,
}

/// Learnable background context vectors; contains no word embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPrompt {
    pub context: Vec<Vec<f64>>,
}

impl ForegroundPrompt {
    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }

    /// Index of the word embedding in the assembled sequence.
    pub fn word_index(&self) -> usize {
        let l = self.context.len();
        match self.token_position {
            TokenPosition::Front => 0,
            TokenPosition::Middle => l.div_ceil(2),
            TokenPosition::End => l,
        }
    }
}

impl BackgroundPrompt {
    pub fn len(&self) -> usize {
        self.context.len()
    }

    pub fn is_empty(&self) -> bool {
        self.context.is_empty()
    }
}

/// Table 4a-style length presets: the background context is two longer than
/// the foreground one because it has no word embedding.
pub fn preset_lengths(l_fg: usize) -> (usize, usize) {
    (l_fg, l_fg + 2)
}

/// Class identifiers split into base (training) and novel (inference-only)
/// roles. The two sets are disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    base: Vec<ClassId>,
    novel: Vec<ClassId>,
}

impl Vocabulary {
    pub fn new(base: Vec<ClassId>, novel: Vec<ClassId>) -> Result<Self> {
        for c in &novel {
            if base.contains(c) {
                return Err(Error::InvalidConfig(format!(
                    "class {c} appears in both base and novel sets"
                )));
            }
        }
        Ok(Vocabulary { base, novel })
    }

    pub fn base(&self) -> &[ClassId] {
        &self.base
    }

    pub fn novel(&self) -> &[ClassId] {
        &self.novel
    }

    pub fn n_base(&self) -> usize {
        self.base.len()
    }

    pub fn n_novel(&self) -> usize {
        self.novel.len()
    }

    pub fn is_base(&self, c: ClassId) -> bool {
        self.base.contains(&c)
    }

    /// Base followed by novel classes.
    pub fn all(&self) -> Vec<ClassId> {
        self.base.iter().chain(&self.novel).cloned().collect()
    }
}

/// Initialize both prompts i.i.d. Gaussian(0, 0.02^2), deterministic per seed.
pub fn init_prompts(
    l_fg: usize,
    l_bg: usize,
    d: usize,
    seed: u64,
) -> Result<(ForegroundPrompt, BackgroundPrompt)> {
    if l_fg == 0 || l_bg == 0 || d == 0 {
        return Err(Error::InvalidConfig(format!(
            "prompt shape must be positive, got l_fg={l_fg} l_bg={l_bg} d={d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).unwrap();
    let mut draw = |len: usize| -> Vec<Vec<f64>> {
        (0..len)
            .map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    };
    let fg = ForegroundPrompt {
        context: draw(l_fg),
        token_position: TokenPosition::End,
    };
    let bg = BackgroundPrompt { context: draw(l_bg) };
    Ok((fg, bg))
}

/// Insert the word embedding into the context at the configured position.
pub fn assemble_class_prompt(fg: &ForegroundPrompt, w_c: &[f64]) -> Vec<Vec<f64>> {
    let mut seq: Vec<Vec<f64>> = fg.context.clone();
    seq.insert(fg.word_index(), w_c.to_vec());
    seq
}

/// One class embedding per row, in `classes` order; each row unit norm.
pub fn class_embeddings(
    fg: &ForegroundPrompt,
    classes: &[ClassId],
    table: &WordEmbeddingTable,
    encoder: &FrozenTextEncoder,
) -> Result<Mat> {
    let mut rows = Vec::with_capacity(classes.len());
    for &c in classes {
        let w = table.get(c)?;
        let seq = assemble_class_prompt(fg, w);
        let t = encoder
            .encode_text(&seq)
            .map_err(|e| match e {
                Error::ZeroNorm { .. } => Error::DegenerateEncoding { class: c },
                other => other,
            })?;
        rows.push(t);
    }
    Mat::from_rows(rows)
}

/// Encode the bare background context.
pub fn background_embedding(
    bg: &BackgroundPrompt,
    encoder: &FrozenTextEncoder,
) -> Result<Vec<f64>> {
    encoder.encode_text(&bg.context)
}

/// On-disk prompt state, so detector training can consume the output of
/// prompt learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCheckpoint {
    pub dim: usize,
    pub seed: u64,
    pub fg: ForegroundPrompt,
    pub bg: BackgroundPrompt,
}

impl PromptCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics;

    fn basis(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn init_shapes_match_defaults() {
        let (fg, bg) = init_prompts(8, 10, 512, 1).unwrap();
        assert_eq!(fg.context.len(), 8);
        assert_eq!(bg.context.len(), 10);
        assert!(fg.context.iter().all(|v| v.len() == 512));
        assert!(bg.context.iter().all(|v| v.len() == 512));
    }

    #[test]
    fn init_sample_std_near_002() {
        let (fg, bg) = init_prompts(8, 10, 512, 3).unwrap();
        let entries: Vec<f64> = fg
            .context
            .iter()
            .chain(&bg.context)
            .flatten()
            .cloned()
            .collect();
        assert!(entries.len() >= 4096);
        let mean = entries.iter().sum::<f64>() / entries.len() as f64;
        let var =
            entries.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / entries.len() as f64;
        let std = var.sqrt();
        assert!((0.015..=0.025).contains(&std), "sample std {std}");
    }

    #[test]
    fn init_deterministic() {
        let a = init_prompts(4, 6, 16, 9).unwrap();
        let b = init_prompts(4, 6, 16, 9).unwrap();
        assert_eq!(a, b);
        let c = init_prompts(4, 6, 16, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn length_presets_pair_background_two_longer() {
        assert_eq!(preset_lengths(4), (4, 6));
        assert_eq!(preset_lengths(8), (8, 10));
        assert_eq!(preset_lengths(16), (16, 18));
    }

    #[test]
    fn init_rejects_zero_lengths() {
        assert!(init_prompts(0, 1, 4, 0).is_err());
        assert!(init_prompts(1, 0, 4, 0).is_err());
        assert!(init_prompts(1, 1, 0, 0).is_err());
    }

    #[test]
    fn assemble_positions() {
        let (mut fg, _) = init_prompts(2, 2, 3, 0).unwrap();
        let w = vec![9.0, 9.0, 9.0];

        fg.token_position = TokenPosition::End;
        let seq = assemble_class_prompt(&fg, &w);
        assert_eq!(seq.len(), 3);
        assert_eq!(seq[2], w);
        assert_eq!(seq[0], fg.context[0]);

        fg.token_position = TokenPosition::Front;
        let seq = assemble_class_prompt(&fg, &w);
        assert_eq!(seq[0], w);
        assert_eq!(seq[1], fg.context[0]);

        // Middle with three context vectors: after position ceil(3/2) = 2.
        let (mut fg3, _) = init_prompts(3, 2, 3, 0).unwrap();
        fg3.token_position = TokenPosition::Middle;
        let seq = assemble_class_prompt(&fg3, &w);
        assert_eq!(seq.len(), 4);
        assert_eq!(seq[0], fg3.context[0]);
        assert_eq!(seq[1], fg3.context[1]);
        assert_eq!(seq[2], w);
        assert_eq!(seq[3], fg3.context[2]);
    }

    #[test]
    fn assemble_contains_each_vector_once() {
        for l in [1usize, 2, 3, 5, 8] {
            for pos in [TokenPosition::Front, TokenPosition::Middle, TokenPosition::End] {
                let (mut fg, _) = init_prompts(l, 2, 4, 7).unwrap();
                fg.token_position = pos;
                let w = vec![5.0, 5.0, 5.0, 5.0];
                let seq = assemble_class_prompt(&fg, &w);
                assert_eq!(seq.len(), l + 1);
                assert_eq!(seq.iter().filter(|v| **v == w).count(), 1);
                for v in &fg.context {
                    assert_eq!(seq.iter().filter(|s| *s == v).count(), 1);
                }
                assert_eq!(seq[fg.word_index()], w);
            }
        }
    }

    #[test]
    fn class_embeddings_compose_and_permute() {
        let d = 4;
        let table = WordEmbeddingTable::new(
            vec![basis(d, 0), basis(d, 1), basis(d, 2)],
            d,
            0,
        )
        .unwrap();
        let encoder = FrozenTextEncoder::new_seeded(d, d, 13);
        let (fg, _) = init_prompts(2, 2, d, 5).unwrap();

        // Singleton subset equals a direct encode_text call.
        let single = class_embeddings(&fg, &[1], &table, &encoder).unwrap();
        let direct = encoder
            .encode_text(&assemble_class_prompt(&fg, table.get(1).unwrap()))
            .unwrap();
        assert_eq!(single.row(0), direct.as_slice());

        // Rows permute exactly with the subset permutation.
        let fwd = class_embeddings(&fg, &[0, 1, 2], &table, &encoder).unwrap();
        let rev = class_embeddings(&fg, &[2, 1, 0], &table, &encoder).unwrap();
        assert_eq!(fwd.row(0), rev.row(2));
        assert_eq!(fwd.row(1), rev.row(1));
        assert_eq!(fwd.row(2), rev.row(0));

        // Each row matches a per-class straight-line recomputation.
        for (i, &c) in [0usize, 1, 2].iter().enumerate() {
            let row = encoder
                .encode_text(&assemble_class_prompt(&fg, table.get(c).unwrap()))
                .unwrap();
            assert_eq!(fwd.row(i), row.as_slice());
            assert!((numerics::norm(fwd.row(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn background_embedding_properties() {
        let d = 6;
        let encoder = FrozenTextEncoder::new_seeded(d, d, 2);
        let (fg_a, bg) = init_prompts(3, 4, d, 8).unwrap();
        let t_bg = background_embedding(&bg, &encoder).unwrap();
        assert!((numerics::norm(&t_bg) - 1.0).abs() < 1e-12);

        // Independent of foreground state.
        let (mut fg_b, _) = init_prompts(3, 4, d, 99).unwrap();
        fg_b.token_position = TokenPosition::Front;
        assert_ne!(fg_a.context, fg_b.context);
        assert_eq!(background_embedding(&bg, &encoder).unwrap(), t_bg);

        // Sensitive to any background coordinate.
        let mut bg2 = bg.clone();
        bg2.context[1][2] += 0.05;
        assert_ne!(background_embedding(&bg2, &encoder).unwrap(), t_bg);
    }

    #[test]
    fn vocabulary_rejects_overlap() {
        assert!(Vocabulary::new(vec![0, 1], vec![1, 2]).is_err());
        let v = Vocabulary::new(vec![0, 1], vec![2]).unwrap();
        assert_eq!(v.all(), vec![0, 1, 2]);
        assert!(v.is_base(1));
        assert!(!v.is_base(2));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.json");
        let (fg, bg) = init_prompts(3, 5, 8, 17).unwrap();
        let ckpt = PromptCheckpoint {
            dim: 8,
            seed: 17,
            fg,
            bg,
        };
        ckpt.save(&path).unwrap();
        let back = PromptCheckpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
    }
}
