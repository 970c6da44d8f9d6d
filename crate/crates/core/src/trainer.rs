//! Orchestration of the two-stage pipeline: procedure A learns the prompts,
//! procedure B trains the detector analog (projection net plus an optional
//! linear adapter standing in for backbone plasticity) with classification
//! and instance-contrastive losses.
//!
//! Class embeddings and the background embedding are produced once at the
//! start of procedure B and stay frozen; only the projection net and the
//! adapter learn there.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ClassId, FrozenTextEncoder, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::icl::{self, NetGrads, ProjectionNet};
use crate::membank::{MemoryBank, ProposalSample};
use crate::mpl::{self, LevelEnsemble, MplGradMode, MplTrainOptions, PromptCurvePoint, PromptDataset};
use crate::numerics::{self, Mat};
use crate::prompt::{self, BackgroundPrompt, ForegroundPrompt, TokenPosition};
use crate::synth::{self, SyntheticWorld, TaskSpec};

/// Derive an independent sub-seed for one concern of a run, so that changing
/// how one stream is consumed cannot shift any other stream.
pub fn subseed(seed: u64, tag: u64) -> u64 {
    crate::encoder::mix_seed(seed, tag)
}

// Stream tags.
const TAG_PROMPT_DATA: u64 = 0xA1;
const TAG_NET_INIT: u64 = 0xB1;
const TAG_DET_DATA: u64 = 0xB2;
const TAG_EVAL_DATA: u64 = 0xC1;

fn default_world_seed() -> u64 {
    42
}
fn default_n_base() -> usize {
    40
}
fn default_n_novel() -> usize {
    10
}
fn default_d() -> usize {
    64
}
fn default_cluster_count() -> usize {
    10
}
fn default_cluster_spread() -> f64 {
    0.35
}
fn default_proposal_noise() -> f64 {
    0.25
}
fn default_iou_fg_alpha() -> f64 {
    5.0
}
fn default_iou_fg_beta() -> f64 {
    2.0
}
fn default_iou_bg_max() -> f64 {
    0.05
}
fn default_word_noise() -> f64 {
    0.05
}
fn default_l_fg() -> usize {
    8
}
fn default_l_bg() -> usize {
    10
}
fn default_tau() -> f64 {
    0.01
}
fn default_lr_prompt() -> f64 {
    0.002
}
fn default_epochs() -> usize {
    6
}
fn default_mpl_batch() -> usize {
    512
}
fn default_mpl_proposals_per_class() -> usize {
    30
}
fn default_mpl_bg_proposals() -> usize {
    600
}
fn default_mpl_bg_ratio() -> f64 {
    0.1
}
fn default_step_lr_every() -> usize {
    4
}
fn default_step_lr_gamma() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}
fn default_gamma() -> f64 {
    0.1
}
fn default_alpha0() -> f64 {
    0.1
}
fn default_bank_capacity() -> usize {
    256
}
fn default_admit_m() -> usize {
    16
}
fn default_u_p() -> f64 {
    0.7
}
fn default_u_n() -> f64 {
    0.01
}
fn default_lr_detector() -> f64 {
    0.02
}
fn default_momentum() -> f64 {
    0.9
}
fn default_det_steps() -> usize {
    2000
}
fn default_det_batch() -> usize {
    32
}
fn default_warmup_factor() -> f64 {
    1e-4
}
fn default_tau_cls() -> f64 {
    0.05
}
fn default_d_proj() -> usize {
    16
}
fn default_det_bg_fraction() -> f64 {
    0.25
}
fn default_lr_net_scale() -> f64 {
    1.0
}
fn default_eval_per_class() -> usize {
    40
}
fn default_eval_bg() -> usize {
    200
}

/// Every knob of the pipeline, loadable from a flat key-value (TOML) file.
/// Field names are the config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Run seed: training streams, batch order, evaluation draws.
    #[serde(default)]
    pub seed: u64,

    // -- synthetic world --
    #[serde(default = "default_world_seed")]
    pub world_seed: u64,
    #[serde(default = "default_n_base")]
    pub n_base: usize,
    #[serde(default = "default_n_novel")]
    pub n_novel: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_cluster_count")]
    pub cluster_count: usize,
    #[serde(default = "default_cluster_spread")]
    pub cluster_spread: f64,
    #[serde(default = "default_proposal_noise")]
    pub proposal_noise: f64,
    #[serde(default = "default_iou_fg_alpha")]
    pub iou_fg_alpha: f64,
    #[serde(default = "default_iou_fg_beta")]
    pub iou_fg_beta: f64,
    #[serde(default = "default_iou_bg_max")]
    pub iou_bg_max: f64,
    #[serde(default = "default_word_noise")]
    pub word_noise: f64,
    #[serde(default)]
    pub identity_word_map: bool,

    // -- prompt learning (procedure A) --
    #[serde(default = "default_l_fg")]
    pub l_fg: usize,
    #[serde(default = "default_l_bg")]
    pub l_bg: usize,
    #[serde(default)]
    pub token_position: TokenPosition,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_lr_prompt")]
    pub lr_prompt: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_mpl_batch")]
    pub mpl_batch: usize,
    /// Sampled vocabulary size; absent means ceil(0.75 * n_base).
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_mpl_proposals_per_class")]
    pub mpl_proposals_per_class: usize,
    #[serde(default = "default_mpl_bg_proposals")]
    pub mpl_bg_proposals: usize,
    /// Fraction of generated background proposals kept for prompt learning.
    #[serde(default = "default_mpl_bg_ratio")]
    pub mpl_bg_ratio: f64,
    #[serde(default = "default_step_lr_every")]
    pub step_lr_every: usize,
    #[serde(default = "default_step_lr_gamma")]
    pub step_lr_gamma: f64,
    /// Train the prompts at all (false = frozen at initialization).
    #[serde(default = "default_true")]
    pub train_prompts: bool,
    /// Include the background embedding as a competing slot in the positive
    /// probabilities.
    #[serde(default = "default_true")]
    pub bg_in_loss_p: bool,
    /// Give both prompts the gradient of the full prompt loss instead of
    /// the default per-loss routing.
    #[serde(default)]
    pub joint_grads: bool,
    /// Train one prompt pair per IoU level and ensemble the embeddings.
    #[serde(default)]
    pub use_iou_levels: bool,

    // -- detector training (procedure B) --
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    #[serde(default = "default_bank_capacity")]
    pub bank_capacity: usize,
    #[serde(default = "default_admit_m")]
    pub admit_m: usize,
    #[serde(default = "default_u_p")]
    pub u_p: f64,
    #[serde(default = "default_u_n")]
    pub u_n: f64,
    #[serde(default = "default_lr_detector")]
    pub lr_detector: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_det_steps")]
    pub det_steps: usize,
    #[serde(default = "default_det_batch")]
    pub det_batch: usize,
    /// Warmup length; absent means det_steps / 9 (the 10000-of-90000 analog).
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default = "default_warmup_factor")]
    pub warmup_factor: f64,
    #[serde(default = "default_tau_cls")]
    pub tau_cls: f64,
    /// Hidden width of the projection net; absent means d.
    #[serde(default)]
    pub d_hidden: Option<usize>,
    #[serde(default = "default_d_proj")]
    pub d_proj: usize,
    #[serde(default = "default_true")]
    pub adapter_enabled: bool,
    /// Multiplier on the projection net's learning rate relative to the
    /// adapter's. Below 1 the contrastive pressure lands on the shared
    /// features instead of being absorbed by the projection head.
    #[serde(default = "default_lr_net_scale")]
    pub lr_net_scale: f64,
    #[serde(default = "default_true")]
    pub icl_enabled: bool,
    #[serde(default)]
    pub negatives_only_denominator: bool,
    #[serde(default = "default_det_bg_fraction")]
    pub det_bg_fraction: f64,

    // -- evaluation --
    #[serde(default = "default_eval_per_class")]
    pub eval_per_class: usize,
    #[serde(default = "default_eval_bg")]
    pub eval_bg: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config must deserialize from defaults")
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        if self.tau <= 0.0 || self.tau_cls <= 0.0 || self.gamma <= 0.0 {
            return Err(Error::InvalidConfig("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.u_n) || !(0.0..=1.0).contains(&self.u_p) || self.u_n >= self.u_p
        {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= u_n < u_p <= 1, got u_n={} u_p={}",
                self.u_n, self.u_p
            )));
        }
        if self.admit_m >= self.bank_capacity {
            return Err(Error::InvalidConfig(format!(
                "admit_m={} must be below bank_capacity={}",
                self.admit_m, self.bank_capacity
            )));
        }
        if self.alpha0 < 0.0 {
            return Err(Error::InvalidConfig("alpha0 cannot be negative".into()));
        }
        if self.mpl_batch == 0 || self.det_batch == 0 {
            return Err(Error::InvalidConfig("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mpl_bg_ratio) || !(0.0..=1.0).contains(&self.det_bg_fraction)
        {
            return Err(Error::InvalidConfig("ratios must lie in [0, 1]".into()));
        }
        if let Some(k) = self.k {
            if k == 0 {
                return Err(Error::InvalidConfig("k must be positive when given".into()));
            }
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            n_base: self.n_base,
            n_novel: self.n_novel,
            d: self.d,
            cluster_count: self.cluster_count,
            cluster_spread: self.cluster_spread,
            proposal_noise: self.proposal_noise,
            iou_fg_alpha: self.iou_fg_alpha,
            iou_fg_beta: self.iou_fg_beta,
            iou_bg_max: self.iou_bg_max,
            word_noise: self.word_noise,
            identity_word_map: self.identity_word_map,
            seed: self.world_seed,
        }
    }

    /// Sampled vocabulary size: configured, or ceil(0.75 * n_base).
    pub fn effective_k(&self) -> usize {
        self.k.unwrap_or((3 * self.n_base).div_ceil(4))
    }

    pub fn effective_warmup(&self) -> usize {
        self.warmup_steps.unwrap_or(self.det_steps / 9)
    }

    pub fn effective_d_hidden(&self) -> usize {
        self.d_hidden.unwrap_or(self.d)
    }

    pub fn mpl_options(&self) -> MplTrainOptions {
        MplTrainOptions {
            l_fg: self.l_fg,
            l_bg: self.l_bg,
            d: self.d,
            token_position: self.token_position,
            lr: self.lr_prompt,
            epochs: self.epochs,
            batch_size: self.mpl_batch,
            tau: self.tau,
            k: self.effective_k(),
            mode: MplGradMode {
                joint_grads: self.joint_grads,
                bg_in_loss_p: self.bg_in_loss_p,
            },
            step_lr_every: self.step_lr_every,
            step_lr_gamma: self.step_lr_gamma,
            seed: self.seed,
        }
    }
}

/// The frozen text encoder of a run, seeded from the world so the same task
/// always sees the same backbone.
pub fn build_encoder(config: &TrainConfig) -> FrozenTextEncoder {
    FrozenTextEncoder::new_seeded(
        config.d,
        config.d,
        crate::encoder::encoder_seed(config.world_seed),
    )
}

// ---------------------------------------------------------------------------
// Classification head
// ---------------------------------------------------------------------------

/// Classification target: a row index into the class-embedding matrix, or
/// None for the background slot.
pub type ClsTarget = Option<usize>;

/// Probabilities over classes plus one trailing background slot, from
/// temperature-scaled cosine similarities.
pub fn classify(f: &[f64], t: &Mat, t_bg: &[f64], tau_cls: f64) -> Result<Vec<f64>> {
    let logits = class_logits(f, t, t_bg)?;
    numerics::tempered_softmax(&logits, tau_cls)
}

fn class_logits(f: &[f64], t: &Mat, t_bg: &[f64]) -> Result<Vec<f64>> {
    let mut logits = Vec::with_capacity(t.rows + 1);
    for i in 0..t.rows {
        logits.push(numerics::cosine_sim(f, t.row(i))?);
    }
    logits.push(numerics::cosine_sim(f, t_bg)?);
    Ok(logits)
}

/// Mean cross-entropy over labeled proposals; background proposals target the
/// background slot.
pub fn loss_cls(
    batch: &[(Vec<f64>, ClsTarget)],
    t: &Mat,
    t_bg: &[f64],
    tau_cls: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss_cls batch"));
    }
    let mut sum = 0.0;
    for (f, target) in batch {
        let logits = class_logits(f, t, t_bg)?;
        let log_p = numerics::log_softmax(&logits, tau_cls)?;
        let idx = target.unwrap_or(t.rows);
        if idx >= log_p.len() {
            return Err(Error::UnknownClass {
                class: idx,
                context: "loss_cls target row",
            });
        }
        sum -= log_p[idx];
    }
    Ok(sum / batch.len() as f64)
}

/// [`loss_cls`] plus its gradient with respect to every input embedding (the
/// class embeddings are frozen here).
pub fn loss_cls_grads(
    batch: &[(Vec<f64>, ClsTarget)],
    t: &Mat,
    t_bg: &[f64],
    tau_cls: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss_cls batch"));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut sum = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for (f, target) in batch {
        let logits = class_logits(f, t, t_bg)?;
        let log_p = numerics::log_softmax(&logits, tau_cls)?;
        let idx = target.unwrap_or(t.rows);
        if idx >= log_p.len() {
            return Err(Error::UnknownClass {
                class: idx,
                context: "loss_cls target row",
            });
        }
        sum -= log_p[idx];

        let mut g = vec![0.0; f.len()];
        for (i, lp) in log_p.iter().enumerate() {
            let coef = inv_b * (lp.exp() - if i == idx { 1.0 } else { 0.0 }) / tau_cls;
            if coef == 0.0 {
                continue;
            }
            let row = if i < t.rows { t.row(i) } else { t_bg };
            let dcos = numerics::cosine_grad(f, row)?;
            numerics::axpy(&mut g, coef, &dcos);
        }
        grads.push(g);
    }
    Ok((sum * inv_b, grads))
}

// ---------------------------------------------------------------------------
// Schedules and optimizer
// ---------------------------------------------------------------------------

/// Linear decay of the contrastive weight: `alpha0 * (1 - iter/total)`,
/// clamped at zero past the end.
pub fn alpha_schedule(alpha0: f64, iter: usize, total: usize) -> f64 {
    if total == 0 || iter >= total {
        return 0.0;
    }
    alpha0 * (1.0 - iter as f64 / total as f64)
}

/// The self-referential reading of the decay formula, where the factor
/// compounds every iteration. Rejected as the default: it collapses to zero
/// almost immediately rather than decaying gradually.
pub fn alpha_schedule_compounding(alpha0: f64, iter: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let mut alpha = alpha0;
    for i in 1..=iter.min(total) {
        alpha *= 1.0 - i as f64 / total as f64;
    }
    if iter >= total {
        0.0
    } else {
        alpha
    }
}

/// Warmup then cosine decay, the detector learning-rate schedule.
pub fn detector_lr(base: f64, iter: usize, total: usize, warmup: usize, warmup_factor: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    if warmup > 0 && iter < warmup {
        return base * (warmup_factor + (1.0 - warmup_factor) * iter as f64 / warmup as f64);
    }
    let rest = (total - warmup).max(1);
    let progress = (iter - warmup.min(iter)) as f64 / rest as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
}

/// One momentum SGD update: `v = momentum * v + g; p -= lr * v`.
/// Zero momentum recovers plain gradient descent.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

// ---------------------------------------------------------------------------
// Learned prompt artifact
// ---------------------------------------------------------------------------

/// Output of procedure A: a single prompt pair, or one pair per IoU level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LearnedPrompts {
    Single {
        fg: ForegroundPrompt,
        bg: BackgroundPrompt,
    },
    Ensemble {
        levels: Vec<(ForegroundPrompt, BackgroundPrompt)>,
    },
}

impl LearnedPrompts {
    pub fn class_embeddings(
        &self,
        classes: &[ClassId],
        table: &WordEmbeddingTable,
        encoder: &FrozenTextEncoder,
    ) -> Result<Mat> {
        match self {
            LearnedPrompts::Single { fg, .. } => prompt::class_embeddings(fg, classes, table, encoder),
            LearnedPrompts::Ensemble { levels } => LevelEnsemble {
                levels: levels.clone(),
            }
            .class_embeddings(classes, table, encoder),
        }
    }

    pub fn background_embedding(&self, encoder: &FrozenTextEncoder) -> Result<Vec<f64>> {
        match self {
            LearnedPrompts::Single { bg, .. } => prompt::background_embedding(bg, encoder),
            LearnedPrompts::Ensemble { levels } => LevelEnsemble {
                levels: levels.clone(),
            }
            .background_embedding(encoder),
        }
    }
}

/// On-disk artifact produced by procedure A and consumed by procedure B.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptArtifact {
    pub dim: usize,
    pub seed: u64,
    pub prompts: LearnedPrompts,
}

impl PromptArtifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Procedure A
// ---------------------------------------------------------------------------

/// A named loss curve (one per trained prompt pair).
#[derive(Debug, Clone)]
pub struct NamedCurve {
    pub name: String,
    pub points: Vec<PromptCurvePoint>,
}

#[derive(Debug, Clone)]
pub struct ProcAOutput {
    pub prompts: LearnedPrompts,
    pub curves: Vec<NamedCurve>,
}

/// Build the prompt-learning dataset from the world: per-class foreground
/// proposals with IoU >= 0.5, and the configured fraction of the generated
/// background proposals.
pub fn build_prompt_dataset(
    world: &SyntheticWorld,
    config: &TrainConfig,
) -> Result<(PromptDataset, Vec<PromptDataset>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, TAG_PROMPT_DATA));
    let mut fg_samples = Vec::new();
    for &c in world.vocab.base() {
        fg_samples.extend(synth::gen_fg_proposals(
            world,
            c,
            config.mpl_proposals_per_class,
            &mut rng,
        )?);
    }
    let bg_samples = synth::gen_bg_proposals(world, config.mpl_bg_proposals, &mut rng)?;
    let keep = ((bg_samples.len() as f64) * config.mpl_bg_ratio).round() as usize;
    let negatives: Vec<Vec<f64>> = bg_samples
        .into_iter()
        .take(keep)
        .map(|s| s.embedding)
        .collect();

    let levels = synth::gen_iou_level_datasets(&fg_samples);
    let level_datasets: Vec<PromptDataset> = levels
        .into_iter()
        .map(|samples| PromptDataset {
            positives: samples
                .into_iter()
                .map(|s| (s.embedding, s.label.expect("foreground sample")))
                .collect(),
            negatives: negatives.clone(),
        })
        .collect();

    let combined = PromptDataset {
        positives: fg_samples
            .into_iter()
            .filter(|s| s.iou >= 0.5)
            .map(|s| (s.embedding, s.label.expect("foreground sample")))
            .collect(),
        negatives,
    };
    Ok((combined, level_datasets))
}

/// Procedure A: meta prompt learning on the synthetic world. With
/// `use_iou_levels` one prompt pair is trained per IoU level and ensembled;
/// with `train_prompts = false` the prompts stay at initialization.
pub fn run_procedure_a(world: &SyntheticWorld, config: &TrainConfig) -> Result<ProcAOutput> {
    config.validate()?;
    let encoder = build_encoder(config);
    let opts = config.mpl_options();

    if !config.train_prompts {
        let (mut fg, bg) = prompt::init_prompts(config.l_fg, config.l_bg, config.d, config.seed)?;
        fg.token_position = config.token_position;
        return Ok(ProcAOutput {
            prompts: LearnedPrompts::Single { fg, bg },
            curves: Vec::new(),
        });
    }

    let (combined, level_datasets) = build_prompt_dataset(world, config)?;
    if config.use_iou_levels {
        let mut levels = Vec::with_capacity(level_datasets.len());
        let mut curves = Vec::with_capacity(level_datasets.len());
        for (i, ds) in level_datasets.iter().enumerate() {
            if ds.positives.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "IoU level {i} has no positive proposals"
                )));
            }
            let trained =
                mpl::train_prompts(ds, world.vocab.base(), &world.words, &encoder, &opts)?;
            curves.push(NamedCurve {
                name: format!("level{i}"),
                points: trained.curve,
            });
            levels.push((trained.fg, trained.bg));
        }
        Ok(ProcAOutput {
            prompts: LearnedPrompts::Ensemble { levels },
            curves,
        })
    } else {
        let trained = mpl::train_prompts(&combined, world.vocab.base(), &world.words, &encoder, &opts)?;
        Ok(ProcAOutput {
            prompts: LearnedPrompts::Single {
                fg: trained.fg,
                bg: trained.bg,
            },
            curves: vec![NamedCurve {
                name: "prompts".into(),
                points: trained.curve,
            }],
        })
    }
}

// ---------------------------------------------------------------------------
// Procedure B
// ---------------------------------------------------------------------------

/// Frozen classifier plus the learnable per-run state of procedure B.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorHead {
    /// Base class ids, aligned with the rows of `class_embeddings`.
    pub classes: Vec<ClassId>,
    /// Frozen class embeddings produced by procedure A.
    pub class_embeddings: Mat,
    /// Frozen background embedding.
    pub t_bg: Vec<f64>,
    pub tau_cls: f64,
    pub net: ProjectionNet,
    /// Linear adapter on the proposal features (detector plasticity analog).
    pub adapter: Option<Mat>,
}

impl DetectorHead {
    /// Apply the adapter (identity when disabled).
    pub fn adapt(&self, f: &[f64]) -> Vec<f64> {
        match &self.adapter {
            Some(a) => a.matvec(f),
            None => f.to_vec(),
        }
    }

    pub fn row_of(&self, class: ClassId) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| *c == class)
            .ok_or(Error::UnknownClass {
                class,
                context: "DetectorHead::row_of",
            })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }
}

/// One metrics record per detector iteration (JSON-lines row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss_cls: f64,
    pub loss_icl: f64,
    pub alpha: f64,
    pub loss_det: f64,
    pub lr: f64,
    pub bank_len: usize,
    pub skipped_anchors: usize,
}

#[derive(Debug)]
pub struct ProcBOutput {
    pub head: DetectorHead,
    pub metrics: Vec<IterRecord>,
    /// Final memory-bank state, dumpable for replay.
    pub bank: MemoryBank,
}

/// Mutable state of one detector-training run, stepped one batch at a time.
pub struct DetectorTrainer {
    pub head: DetectorHead,
    pub bank: MemoryBank,
    config: TrainConfig,
    vel_net: Vec<f64>,
    vel_adapter: Vec<f64>,
}

impl DetectorTrainer {
    pub fn new(
        world: &SyntheticWorld,
        prompts: &LearnedPrompts,
        config: &TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        let encoder = build_encoder(config);
        let classes = world.vocab.base().to_vec();
        let class_embeddings = prompts.class_embeddings(&classes, &world.words, &encoder)?;
        let t_bg = prompts.background_embedding(&encoder)?;
        let net = ProjectionNet::new_seeded(
            config.d,
            config.effective_d_hidden(),
            config.d_proj,
            subseed(config.seed, TAG_NET_INIT),
        );
        let adapter = config.adapter_enabled.then(|| Mat::identity(config.d));
        let bank = MemoryBank::new(&classes, config.bank_capacity)?;
        let vel_net = vec![0.0; net.flatten_params().len()];
        let vel_adapter = vec![0.0; adapter.as_ref().map_or(0, |a| a.data.len())];
        Ok(DetectorTrainer {
            head: DetectorHead {
                classes,
                class_embeddings,
                t_bg,
                tau_cls: config.tau_cls,
                net,
                adapter,
            },
            bank,
            config: config.clone(),
            vel_net,
            vel_adapter,
        })
    }

    /// Draw one training batch from the proposal stream.
    pub fn sample_batch(
        &self,
        world: &SyntheticWorld,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<ProposalSample>> {
        let n_bg = ((self.config.det_batch as f64) * self.config.det_bg_fraction).round() as usize;
        let n_fg = self.config.det_batch - n_bg.min(self.config.det_batch);
        let mut batch = Vec::with_capacity(self.config.det_batch);
        for _ in 0..n_fg {
            let class = world.vocab.base()[rng.gen_range(0..world.vocab.n_base())];
            batch.extend(synth::gen_fg_proposals(world, class, 1, rng)?);
        }
        batch.extend(synth::gen_bg_proposals(world, n_bg, rng)?);
        Ok(batch)
    }

    /// One iteration: adapt features, update the memory bank with projected
    /// candidates, evaluate both losses, and take one momentum-SGD step on
    /// the projection net and the adapter. The class embeddings never move.
    pub fn step(&mut self, batch: &[ProposalSample], iter: usize) -> Result<IterRecord> {
        let cfg = &self.config;
        let adapted: Vec<Vec<f64>> = batch.iter().map(|s| self.head.adapt(&s.embedding)).collect();

        // Classification loss over every proposal in the batch.
        let cls_batch: Vec<(Vec<f64>, ClsTarget)> = batch
            .iter()
            .zip(&adapted)
            .map(|(s, f)| {
                let target = match s.label {
                    Some(c) => Some(self.head.row_of(c)?),
                    None => None,
                };
                Ok((f.clone(), target))
            })
            .collect::<Result<_>>()?;
        let (l_cls, g_cls) =
            loss_cls_grads(&cls_batch, &self.head.class_embeddings, &self.head.t_bg, cfg.tau_cls)?;

        let alpha = alpha_schedule(cfg.alpha0, iter, cfg.det_steps);
        let mut l_icl = 0.0;
        let mut skipped = 0usize;
        let mut g_icl: Option<icl::IclBackward> = None;

        if cfg.icl_enabled {
            // Bank update precedes the loss, with candidates projected under
            // the current net.
            let mut candidates = Vec::with_capacity(batch.len());
            for (s, f) in batch.iter().zip(&adapted) {
                let z = self.head.net.project(f)?;
                candidates.push(ProposalSample::new(z, s.iou, s.label));
            }
            self.bank.update(candidates, cfg.u_p, cfg.u_n, cfg.admit_m)?;

            let inputs: Vec<(Vec<f64>, Option<ClassId>)> = batch
                .iter()
                .zip(&adapted)
                .map(|(s, f)| (f.clone(), s.label))
                .collect();
            let back = icl::icl_grads(
                &inputs,
                &self.head.net,
                &self.bank,
                cfg.gamma,
                cfg.negatives_only_denominator,
            )?;
            l_icl = back.loss;
            skipped = back.skipped;
            g_icl = Some(back);
        }

        let l_det = l_cls + alpha * l_icl;
        if !l_det.is_finite() {
            return Err(Error::Diverged {
                step: iter,
                what: "detector loss",
            });
        }

        let lr = detector_lr(
            cfg.lr_detector,
            iter,
            cfg.det_steps,
            cfg.effective_warmup(),
            cfg.warmup_factor,
        );

        // Adapter gradient: chain every input-embedding gradient back through
        // f' = A f.
        if let Some(adapter) = &mut self.head.adapter {
            let mut grad_a = Mat::zeros(adapter.rows, adapter.cols);
            for (i, s) in batch.iter().enumerate() {
                grad_a.add_scaled_outer(1.0, &g_cls[i], &s.embedding);
                if let (Some(back), true) = (&g_icl, alpha != 0.0) {
                    grad_a.add_scaled_outer(alpha, &back.grad_inputs[i], &s.embedding);
                }
            }
            sgd_step(
                &mut adapter.data,
                &grad_a.data,
                &mut self.vel_adapter,
                lr,
                cfg.momentum,
            );
        }

        // Projection net only learns through the weighted contrastive loss.
        if let Some(back) = &g_icl {
            if alpha != 0.0 {
                let mut g = NetGrads {
                    w1: back.grad_net.w1.clone(),
                    b1: back.grad_net.b1.clone(),
                    w2: back.grad_net.w2.clone(),
                    b2: back.grad_net.b2.clone(),
                };
                g.scale(alpha);
                let flat = g.flatten();
                let mut params = self.head.net.flatten_params();
                sgd_step(
                    &mut params,
                    &flat,
                    &mut self.vel_net,
                    lr * cfg.lr_net_scale,
                    cfg.momentum,
                );
                self.head.net.set_from_flat(&params)?;
            }
        }

        Ok(IterRecord {
            iter,
            loss_cls: l_cls,
            loss_icl: l_icl,
            alpha,
            loss_det: l_det,
            lr,
            bank_len: self.bank.total_len(),
            skipped_anchors: skipped,
        })
    }
}

/// Procedure B: detector-analog training against the frozen embeddings of
/// procedure A. Deterministic per config and seed.
pub fn run_procedure_b(
    world: &SyntheticWorld,
    prompts: &LearnedPrompts,
    config: &TrainConfig,
) -> Result<ProcBOutput> {
    let mut trainer = DetectorTrainer::new(world, prompts, config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, TAG_DET_DATA));
    let mut metrics = Vec::with_capacity(config.det_steps);
    for iter in 0..config.det_steps {
        let batch = trainer.sample_batch(world, &mut rng)?;
        metrics.push(trainer.step(&batch, iter)?);
    }
    Ok(ProcBOutput {
        head: trainer.head,
        metrics,
        bank: trainer.bank,
    })
}

/// Deterministic RNG for evaluation draws of a run.
pub fn eval_rng(config: &TrainConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(subseed(config.seed, TAG_EVAL_DATA))
}
