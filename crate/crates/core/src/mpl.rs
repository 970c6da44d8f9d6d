//! Meta prompt learning: batch-wise vocabulary subsampling, the
//! positive/negative classification probabilities with background
//! competition, the prompt losses, and their analytic gradients with respect
//! to the foreground and background context vectors.
//!
//! Per training batch, the class vocabulary is shrunk to a random subset that
//! always keeps the classes present in the batch. Training the shared context
//! against a changing vocabulary is what makes it generalize to classes that
//! never appear.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{ClassId, FrozenTextEncoder, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::numerics::{self, Mat};
use crate::prompt::{
    self, assemble_class_prompt, BackgroundPrompt, ForegroundPrompt, TokenPosition,
};

/// A batch of proposal embeddings for prompt learning. All embeddings are
/// expected unit norm; positives carry a base-class label.
#[derive(Debug, Clone, Default)]
pub struct MetaBatch {
    pub positives: Vec<(Vec<f64>, ClassId)>,
    pub negatives: Vec<Vec<f64>>,
}

impl MetaBatch {
    /// Exactly the labels occurring among the positives.
    pub fn present_classes(&self) -> BTreeSet<ClassId> {
        self.positives.iter().map(|(_, c)| *c).collect()
    }
}

/// A sampled sub-vocabulary: class ids and their embedding rows, aligned.
#[derive(Debug, Clone)]
pub struct SampledVocab {
    class_ids: Vec<ClassId>,
    embeddings: Mat,
    index: BTreeMap<ClassId, usize>,
}

impl SampledVocab {
    pub fn new(class_ids: Vec<ClassId>, embeddings: Mat) -> Result<Self> {
        if embeddings.rows != class_ids.len() {
            return Err(Error::DimensionMismatch {
                context: "SampledVocab rows",
                expected: class_ids.len(),
                got: embeddings.rows,
            });
        }
        let index = class_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Ok(SampledVocab {
            class_ids,
            embeddings,
            index,
        })
    }

    /// Encode the sampled classes under the current foreground prompt.
    pub fn from_prompt(
        fg: &ForegroundPrompt,
        class_ids: Vec<ClassId>,
        table: &WordEmbeddingTable,
        encoder: &FrozenTextEncoder,
    ) -> Result<Self> {
        let embeddings = prompt::class_embeddings(fg, &class_ids, table, encoder)?;
        SampledVocab::new(class_ids, embeddings)
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn embeddings(&self) -> &Mat {
        &self.embeddings
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }

    pub fn index_of(&self, c: ClassId) -> Result<usize> {
        self.index.get(&c).copied().ok_or(Error::UnknownClass {
            class: c,
            context: "SampledVocab::index_of",
        })
    }
}

/// Sample the batch-wise vocabulary: the classes present in the batch are
/// always reserved, the rest are drawn uniformly without replacement from the
/// remaining base classes. Returns sorted ids.
///
/// When `k >= |base|` the full base vocabulary is returned and the RNG is not
/// touched, so a full-vocabulary run is bit-identical to one with sampling
/// disabled.
pub fn meta_sample(
    present: &BTreeSet<ClassId>,
    base: &[ClassId],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClassId>> {
    for c in present {
        if !base.contains(c) {
            return Err(Error::UnknownClass {
                class: *c,
                context: "meta_sample present class outside base vocabulary",
            });
        }
    }
    if k < present.len() {
        return Err(Error::InvalidConfig(format!(
            "sampled vocabulary size k={k} cannot reserve {} present classes",
            present.len()
        )));
    }
    if k >= base.len() {
        let mut all = base.to_vec();
        all.sort_unstable();
        return Ok(all);
    }
    let rest: Vec<ClassId> = base.iter().filter(|c| !present.contains(c)).cloned().collect();
    let mut picked: Vec<ClassId> = rest
        .choose_multiple(rng, k - present.len())
        .cloned()
        .collect();
    picked.extend(present.iter().cloned());
    picked.sort_unstable();
    Ok(picked)
}

fn cosine_logits(f: &[f64], vocab: &SampledVocab, t_bg: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut logits = Vec::with_capacity(vocab.len() + 1);
    for i in 0..vocab.len() {
        logits.push(numerics::cosine_sim(f, vocab.row(i))?);
    }
    if let Some(bg) = t_bg {
        logits.push(numerics::cosine_sim(f, bg)?);
    }
    Ok(logits)
}

/// Log-probabilities of a positive proposal over the sampled classes, with
/// the background embedding competing as one extra slot when provided.
pub fn positive_log_probs(
    f_p: &[f64],
    vocab: &SampledVocab,
    t_bg: Option<&[f64]>,
    tau: f64,
) -> Result<Vec<f64>> {
    let logits = cosine_logits(f_p, vocab, t_bg)?;
    numerics::log_softmax(&logits, tau)
}

/// Probability of a positive proposal being classified as `class`, with the
/// background embedding as a competing negative item in the denominator.
pub fn positive_prob(
    f_p: &[f64],
    vocab: &SampledVocab,
    t_bg: &[f64],
    class: ClassId,
    tau: f64,
) -> Result<f64> {
    let idx = vocab.index_of(class)?;
    let log_p = positive_log_probs(f_p, vocab, Some(t_bg), tau)?;
    Ok(log_p[idx].exp())
}

/// Log-probabilities of a negative proposal over the sampled classes only -
/// the background embedding is excluded here.
pub fn negative_log_probs(f_n: &[f64], vocab: &SampledVocab, tau: f64) -> Result<Vec<f64>> {
    let logits = cosine_logits(f_n, vocab, None)?;
    numerics::log_softmax(&logits, tau)
}

/// Probability of a negative proposal being classified as `class`.
pub fn negative_prob(f_n: &[f64], vocab: &SampledVocab, class: ClassId, tau: f64) -> Result<f64> {
    let idx = vocab.index_of(class)?;
    let log_p = negative_log_probs(f_n, vocab, tau)?;
    Ok(log_p[idx].exp())
}

/// Mean cross-entropy of the positives under [`positive_log_probs`], computed
/// in log space. `t_bg = None` drops the background slot (ablation form).
pub fn loss_p(
    positives: &[(Vec<f64>, ClassId)],
    vocab: &SampledVocab,
    t_bg: Option<&[f64]>,
    tau: f64,
) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::EmptyInput("loss_p positives"));
    }
    let mut sum = 0.0;
    for (f, c) in positives {
        let idx = vocab.index_of(*c)?;
        let log_p = positive_log_probs(f, vocab, t_bg, tau)?;
        sum -= log_p[idx];
    }
    Ok(sum / positives.len() as f64)
}

/// Mean over negatives of the uniform-target loss
/// `-(1/|C_S|) * sum_c log p_c^n`.
pub fn loss_n(negatives: &[Vec<f64>], vocab: &SampledVocab, tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::EmptyInput("loss_n negatives"));
    }
    let inv_s = 1.0 / vocab.len() as f64;
    let mut sum = 0.0;
    for f in negatives {
        let log_p = negative_log_probs(f, vocab, tau)?;
        sum -= inv_s * log_p.iter().sum::<f64>();
    }
    Ok(sum / negatives.len() as f64)
}

// ---------------------------------------------------------------------------
// Analytic gradients
// ---------------------------------------------------------------------------

/// Gradients with respect to both prompt parameter sets.
#[derive(Debug, Clone)]
pub struct PromptGrads {
    pub fg: Vec<Vec<f64>>,
    pub bg: Vec<Vec<f64>>,
}

impl PromptGrads {
    fn zeros(fg: &ForegroundPrompt, bg: &BackgroundPrompt, d: usize) -> Self {
        PromptGrads {
            fg: vec![vec![0.0; d]; fg.len()],
            bg: vec![vec![0.0; d]; bg.len()],
        }
    }

    pub fn add(&mut self, other: &PromptGrads) {
        for (a, b) in self.fg.iter_mut().zip(&other.fg) {
            numerics::axpy(a, 1.0, b);
        }
        for (a, b) in self.bg.iter_mut().zip(&other.bg) {
            numerics::axpy(a, 1.0, b);
        }
    }
}

/// Accumulate the sequence-position gradients of one class prompt into the
/// foreground context gradients, skipping the word-embedding slot (the word
/// embedding receives a gradient but is never updated).
fn route_fg_grads(fg: &ForegroundPrompt, seq_grads: &[Vec<f64>], acc: &mut [Vec<f64>]) {
    let w_idx = fg.word_index();
    for (pos, g) in seq_grads.iter().enumerate() {
        if pos == w_idx {
            continue;
        }
        let ctx = if pos < w_idx { pos } else { pos - 1 };
        numerics::axpy(&mut acc[ctx], 1.0, g);
    }
}

struct EncodedVocab {
    seqs: Vec<Vec<Vec<f64>>>,
    vocab: SampledVocab,
}

fn encode_vocab(
    fg: &ForegroundPrompt,
    class_ids: &[ClassId],
    table: &WordEmbeddingTable,
    encoder: &FrozenTextEncoder,
) -> Result<EncodedVocab> {
    let mut seqs = Vec::with_capacity(class_ids.len());
    let mut rows = Vec::with_capacity(class_ids.len());
    for &c in class_ids {
        let seq = assemble_class_prompt(fg, table.get(c)?);
        let t = encoder.encode_text(&seq).map_err(|e| match e {
            Error::ZeroNorm { .. } => Error::DegenerateEncoding { class: c },
            other => other,
        })?;
        seqs.push(seq);
        rows.push(t);
    }
    let vocab = SampledVocab::new(class_ids.to_vec(), Mat::from_rows(rows)?)?;
    Ok(EncodedVocab { seqs, vocab })
}

/// Loss value and prompt gradients of [`loss_p`] for one batch of positives.
///
/// With no positives the loss is 0 and the gradients are zero (the empty sum).
pub fn loss_p_grads(
    positives: &[(Vec<f64>, ClassId)],
    class_ids: &[ClassId],
    fg: &ForegroundPrompt,
    bg: &BackgroundPrompt,
    table: &WordEmbeddingTable,
    encoder: &FrozenTextEncoder,
    tau: f64,
    include_bg: bool,
) -> Result<(f64, PromptGrads)> {
    let d = encoder.d_in;
    let mut grads = PromptGrads::zeros(fg, bg, d);
    if positives.is_empty() {
        return Ok((0.0, grads));
    }

    let enc = encode_vocab(fg, class_ids, table, encoder)?;
    let s = enc.vocab.len();
    let (bg_seq, t_bg) = if include_bg {
        let t = prompt::background_embedding(bg, encoder)?;
        (Some(&bg.context), Some(t))
    } else {
        (None, None)
    };

    let inv_p = 1.0 / positives.len() as f64;
    let mut upstream_t = vec![vec![0.0; encoder.d_out]; s];
    let mut upstream_bg = vec![0.0; encoder.d_out];
    let mut loss_sum = 0.0;

    for (f, c) in positives {
        let c_idx = enc.vocab.index_of(*c)?;
        let log_p = positive_log_probs(f, &enc.vocab, t_bg.as_deref(), tau)?;
        loss_sum -= log_p[c_idx];
        // d(-log p_c)/d cos_i = (p_i - [i == c]) / tau
        for i in 0..s {
            let coef = inv_p * (log_p[i].exp() - if i == c_idx { 1.0 } else { 0.0 }) / tau;
            if coef != 0.0 {
                let dcos = numerics::cosine_grad(enc.vocab.row(i), f)?;
                numerics::axpy(&mut upstream_t[i], coef, &dcos);
            }
        }
        if let Some(t) = &t_bg {
            let coef = inv_p * log_p[s].exp() / tau;
            let dcos = numerics::cosine_grad(t, f)?;
            numerics::axpy(&mut upstream_bg, coef, &dcos);
        }
    }

    for (i, upstream) in upstream_t.iter().enumerate() {
        let seq_grads = encoder.encode_text_vjp(&enc.seqs[i], upstream)?;
        route_fg_grads(fg, &seq_grads, &mut grads.fg);
    }
    if let Some(bg_seq) = bg_seq {
        let seq_grads = encoder.encode_text_vjp(bg_seq, &upstream_bg)?;
        for (acc, g) in grads.bg.iter_mut().zip(&seq_grads) {
            numerics::axpy(acc, 1.0, g);
        }
    }

    Ok((loss_sum * inv_p, grads))
}

/// Loss value and prompt gradients of [`loss_n`] for one batch of negatives.
///
/// The background prompt does not appear in the negative probabilities, so
/// its gradient block is identically zero.
pub fn loss_n_grads(
    negatives: &[Vec<f64>],
    class_ids: &[ClassId],
    fg: &ForegroundPrompt,
    bg: &BackgroundPrompt,
    table: &WordEmbeddingTable,
    encoder: &FrozenTextEncoder,
    tau: f64,
) -> Result<(f64, PromptGrads)> {
    let d = encoder.d_in;
    let mut grads = PromptGrads::zeros(fg, bg, d);
    if negatives.is_empty() {
        return Ok((0.0, grads));
    }

    let enc = encode_vocab(fg, class_ids, table, encoder)?;
    let s = enc.vocab.len();
    let inv_s = 1.0 / s as f64;
    let inv_n = 1.0 / negatives.len() as f64;

    let mut upstream_t = vec![vec![0.0; encoder.d_out]; s];
    let mut loss_sum = 0.0;

    for f in negatives {
        let log_p = negative_log_probs(f, &enc.vocab, tau)?;
        loss_sum -= inv_s * log_p.iter().sum::<f64>();
        // d(-(1/S) sum_c log p_c)/d cos_i = (p_i - 1/S) / tau
        for i in 0..s {
            let coef = inv_n * (log_p[i].exp() - inv_s) / tau;
            let dcos = numerics::cosine_grad(enc.vocab.row(i), f)?;
            numerics::axpy(&mut upstream_t[i], coef, &dcos);
        }
    }

    for (i, upstream) in upstream_t.iter().enumerate() {
        let seq_grads = encoder.encode_text_vjp(&enc.seqs[i], upstream)?;
        route_fg_grads(fg, &seq_grads, &mut grads.fg);
    }

    Ok((loss_sum * inv_n, grads))
}

/// How gradients are routed onto the two prompts.
///
/// By default the foreground prompt is updated from the positive loss and
/// the background prompt from the negative loss. Since the negative
/// probabilities never touch the background embedding, that routing leaves
/// the background prompt frozen; `joint_grads` instead gives both prompts
/// the gradient of the full loss for comparison runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MplGradMode {
    pub joint_grads: bool,
    pub bg_in_loss_p: bool,
}

impl Default for MplGradMode {
    fn default() -> Self {
        MplGradMode {
            joint_grads: false,
            bg_in_loss_p: true,
        }
    }
}

/// Batch losses and the per-prompt update gradients under `mode`.
#[derive(Debug, Clone)]
pub struct MplGrads {
    pub grad_fg: Vec<Vec<f64>>,
    pub grad_bg: Vec<Vec<f64>>,
    pub loss_p: f64,
    pub loss_n: f64,
}

pub fn mpl_grads(
    batch: &MetaBatch,
    class_ids: &[ClassId],
    fg: &ForegroundPrompt,
    bg: &BackgroundPrompt,
    table: &WordEmbeddingTable,
    encoder: &FrozenTextEncoder,
    tau: f64,
    mode: MplGradMode,
) -> Result<MplGrads> {
    let (lp, lp_grads) = loss_p_grads(
        &batch.positives,
        class_ids,
        fg,
        bg,
        table,
        encoder,
        tau,
        mode.bg_in_loss_p,
    )?;
    let (ln, ln_grads) = loss_n_grads(&batch.negatives, class_ids, fg, bg, table, encoder, tau)?;

    let (grad_fg, grad_bg) = if mode.joint_grads {
        let mut fg_total = lp_grads.fg;
        for (a, b) in fg_total.iter_mut().zip(&ln_grads.fg) {
            numerics::axpy(a, 1.0, b);
        }
        let mut bg_total = lp_grads.bg;
        for (a, b) in bg_total.iter_mut().zip(&ln_grads.bg) {
            numerics::axpy(a, 1.0, b);
        }
        (fg_total, bg_total)
    } else {
        (lp_grads.fg, ln_grads.bg)
    };

    Ok(MplGrads {
        grad_fg,
        grad_bg,
        loss_p: lp,
        loss_n: ln,
    })
}

// ---------------------------------------------------------------------------
// Prompt training loop
// ---------------------------------------------------------------------------

/// Proposal embeddings prepared for prompt learning. Negatives are expected
/// to be pre-subsampled by the caller (10% of the available background
/// proposals by default).
#[derive(Debug, Clone, Default)]
pub struct PromptDataset {
    pub positives: Vec<(Vec<f64>, ClassId)>,
    pub negatives: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct MplTrainOptions {
    pub l_fg: usize,
    pub l_bg: usize,
    pub d: usize,
    pub token_position: TokenPosition,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    /// Sampled vocabulary size; clamped up to the batch's present-class count
    /// and down to the base vocabulary size.
    pub k: usize,
    pub mode: MplGradMode,
    /// Decay the learning rate by `step_lr_gamma` every `step_lr_every`
    /// epochs (0 disables the decay).
    pub step_lr_every: usize,
    pub step_lr_gamma: f64,
    pub seed: u64,
}

impl Default for MplTrainOptions {
    fn default() -> Self {
        MplTrainOptions {
            l_fg: 8,
            l_bg: 10,
            d: 64,
            token_position: TokenPosition::End,
            lr: 0.002,
            epochs: 6,
            batch_size: 512,
            tau: 0.01,
            k: usize::MAX,
            mode: MplGradMode::default(),
            step_lr_every: 4,
            step_lr_gamma: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PromptCurvePoint {
    pub step: usize,
    pub loss_p: f64,
    pub loss_n: f64,
}

#[derive(Debug, Clone)]
pub struct PromptTraining {
    pub fg: ForegroundPrompt,
    pub bg: BackgroundPrompt,
    pub curve: Vec<PromptCurvePoint>,
}

enum PoolItem {
    Positive(usize),
    Negative(usize),
}

/// Plain gradient descent over shuffled mixed batches, with step-wise
/// learning-rate decay. Deterministic given the seed: prompt initialization,
/// batch order, and vocabulary sampling each draw from their own stream.
pub fn train_prompts(
    dataset: &PromptDataset,
    base: &[ClassId],
    table: &WordEmbeddingTable,
    encoder: &FrozenTextEncoder,
    opts: &MplTrainOptions,
) -> Result<PromptTraining> {
    if opts.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be positive".into()));
    }
    if dataset.positives.is_empty() {
        return Err(Error::EmptyInput("train_prompts positives"));
    }
    let (mut fg, mut bg) = prompt::init_prompts(opts.l_fg, opts.l_bg, opts.d, opts.seed)?;
    fg.token_position = opts.token_position;

    let mut batch_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    batch_rng.set_stream(1);
    let mut meta_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    meta_rng.set_stream(2);

    let mut pool: Vec<PoolItem> = (0..dataset.positives.len())
        .map(PoolItem::Positive)
        .chain((0..dataset.negatives.len()).map(PoolItem::Negative))
        .collect();

    let mut curve = Vec::new();
    let mut step = 0usize;
    for epoch in 0..opts.epochs {
        pool.shuffle(&mut batch_rng);
        let lr = if opts.step_lr_every > 0 {
            opts.lr * opts.step_lr_gamma.powi((epoch / opts.step_lr_every) as i32)
        } else {
            opts.lr
        };
        for chunk in pool.chunks(opts.batch_size) {
            let mut batch = MetaBatch::default();
            for item in chunk {
                match item {
                    PoolItem::Positive(i) => batch.positives.push(dataset.positives[*i].clone()),
                    PoolItem::Negative(i) => batch.negatives.push(dataset.negatives[*i].clone()),
                }
            }
            let present = batch.present_classes();
            let k_eff = opts.k.max(present.len());
            let class_ids = meta_sample(&present, base, k_eff, &mut meta_rng)?;

            let grads = mpl_grads(&batch, &class_ids, &fg, &bg, table, encoder, opts.tau, opts.mode)?;
            if !grads.loss_p.is_finite() || !grads.loss_n.is_finite() {
                return Err(Error::Diverged {
                    step,
                    what: "prompt loss",
                });
            }
            for (v, g) in fg.context.iter_mut().zip(&grads.grad_fg) {
                numerics::axpy(v, -lr, g);
            }
            for (v, g) in bg.context.iter_mut().zip(&grads.grad_bg) {
                numerics::axpy(v, -lr, g);
            }
            curve.push(PromptCurvePoint {
                step,
                loss_p: grads.loss_p,
                loss_n: grads.loss_n,
            });
            step += 1;
        }
    }

    Ok(PromptTraining { fg, bg, curve })
}

// ---------------------------------------------------------------------------
// IoU-level prompt ensemble
// ---------------------------------------------------------------------------

/// One prompt pair per IoU level; class embeddings are the normalized mean of
/// the per-level embeddings.
#[derive(Debug, Clone)]
pub struct LevelEnsemble {
    pub levels: Vec<(ForegroundPrompt, BackgroundPrompt)>,
}

impl LevelEnsemble {
    pub fn class_embeddings(
        &self,
        classes: &[ClassId],
        table: &WordEmbeddingTable,
        encoder: &FrozenTextEncoder,
    ) -> Result<Mat> {
        let per_level: Vec<Mat> = self
            .levels
            .iter()
            .map(|(fg, _)| prompt::class_embeddings(fg, classes, table, encoder))
            .collect::<Result<_>>()?;
        let inv = 1.0 / self.levels.len() as f64;
        let mut rows = Vec::with_capacity(classes.len());
        for r in 0..classes.len() {
            let mut mean = vec![0.0; encoder.d_out];
            for level in &per_level {
                numerics::axpy(&mut mean, inv, level.row(r));
            }
            rows.push(numerics::normalized(&mean, "level ensemble class embedding")?);
        }
        Mat::from_rows(rows)
    }

    pub fn background_embedding(&self, encoder: &FrozenTextEncoder) -> Result<Vec<f64>> {
        let inv = 1.0 / self.levels.len() as f64;
        let mut mean = vec![0.0; encoder.d_out];
        for (_, bg) in &self.levels {
            let t = prompt::background_embedding(bg, encoder)?;
            numerics::axpy(&mut mean, inv, &t);
        }
        numerics::normalized(&mean, "level ensemble background embedding")
    }
}

/// Train one prompt pair per IoU-level dataset with identical options and
/// ensemble them. Every level must contribute at least one positive.
pub fn level_ensemble(
    level_datasets: &[PromptDataset],
    base: &[ClassId],
    table: &WordEmbeddingTable,
    encoder: &FrozenTextEncoder,
    opts: &MplTrainOptions,
) -> Result<LevelEnsemble> {
    if level_datasets.is_empty() {
        return Err(Error::InvalidConfig("level ensemble needs at least one level".into()));
    }
    for (i, ds) in level_datasets.iter().enumerate() {
        if ds.positives.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "IoU level {i} has no positive proposals"
            )));
        }
    }
    let mut levels = Vec::with_capacity(level_datasets.len());
    for ds in level_datasets {
        let trained = train_prompts(ds, base, table, encoder, opts)?;
        levels.push((trained.fg, trained.bg));
    }
    Ok(LevelEnsemble { levels })
}
