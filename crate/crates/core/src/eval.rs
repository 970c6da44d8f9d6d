//! Evaluation of a trained run: accuracy metrics over base and novel
//! classes, the novel-as-base error decomposition, projection-space
//! compactness statistics, the sampled-class sweep, and the component
//! ablation grid.
//!
//! Class embeddings for base AND novel classes are generated from the learned
//! foreground prompt: novel classes enter only through their word
//! embeddings, exactly as at inference time.

use serde::{Deserialize, Serialize};

use crate::encoder::ClassId;
use crate::error::{Error, Result};
use crate::membank::ProposalSample;
use crate::mpl::PromptCurvePoint;
use crate::numerics;
use crate::synth::{self, SyntheticWorld};
use crate::trainer::{
    self, build_encoder, classify, DetectorHead, IterRecord, LearnedPrompts, TrainConfig,
};

/// Everything measured in one evaluation pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    /// Accuracy over all foreground test proposals (base and novel).
    pub overall_accuracy: f64,
    /// Fraction of novel-class test samples whose top prediction is a base
    /// class.
    pub novel_as_base_error: f64,
    pub novel_correct_rate: f64,
    pub novel_as_other_novel_rate: f64,
    pub novel_as_background_rate: f64,
    /// Fraction of background test samples predicted as any foreground class.
    pub background_fp_rate: f64,
    /// Mean pairwise cosine similarity of same-class / cross-class test
    /// samples in projection space (needs a trained projection net).
    pub mean_intra_class_cos: Option<f64>,
    pub mean_inter_class_cos: Option<f64>,
    /// Row per true class (base then novel, `class_order` order); columns are
    /// predicted classes in the same order plus one trailing background
    /// column. Each row sums to that class's test-sample count.
    pub class_order: Vec<ClassId>,
    pub confusion: Vec<Vec<usize>>,
    pub per_class_counts: Vec<usize>,
    pub background_count: usize,
}

/// Classify held-out proposals of every class (plus background) under the
/// learned prompts, through the detector head when one is given.
pub fn eval_classifier(
    world: &SyntheticWorld,
    prompts: &LearnedPrompts,
    head: Option<&DetectorHead>,
    config: &TrainConfig,
) -> Result<EvalReport> {
    if config.eval_per_class == 0 {
        return Err(Error::EmptyInput("eval_per_class is zero"));
    }
    let encoder = build_encoder(config);
    let class_order = world.vocab.all();
    let n_base = world.vocab.n_base();
    let n_all = class_order.len();
    let t_all = prompts.class_embeddings(&class_order, &world.words, &encoder)?;
    let t_bg = prompts.background_embedding(&encoder)?;
    let tau_cls = head.map_or(config.tau_cls, |h| h.tau_cls);

    let mut rng = trainer::eval_rng(config);
    let mut confusion = vec![vec![0usize; n_all + 1]; n_all];
    let mut per_class_counts = vec![0usize; n_all];

    // Projection-space accumulators (pairwise cosine via sum-of-vectors
    // identities; all projections are unit norm).
    let mut proj_class_sums: Vec<Vec<f64>> = Vec::new();
    let mut proj_counts: Vec<usize> = Vec::new();
    if head.is_some() {
        proj_class_sums = vec![vec![0.0; config.d_proj]; n_all];
        proj_counts = vec![0usize; n_all];
    }

    for (row, &class) in class_order.iter().enumerate() {
        let samples = synth::gen_fg_proposals(world, class, config.eval_per_class, &mut rng)?;
        for s in samples {
            let f = head.map_or_else(|| s.embedding.clone(), |h| h.adapt(&s.embedding));
            let probs = classify(&f, &t_all, &t_bg, tau_cls)?;
            let pred = numerics::argmax(&probs);
            confusion[row][pred] += 1;
            per_class_counts[row] += 1;
            if let Some(h) = head {
                let z = h.net.project(&f)?;
                numerics::axpy(&mut proj_class_sums[row], 1.0, &z);
                proj_counts[row] += 1;
            }
        }
    }

    let bg_samples = synth::gen_bg_proposals(world, config.eval_bg, &mut rng)?;
    let background_count = bg_samples.len();
    let mut bg_fp = 0usize;
    for s in &bg_samples {
        let f = head.map_or_else(|| s.embedding.clone(), |h| h.adapt(&s.embedding));
        let probs = classify(&f, &t_all, &t_bg, tau_cls)?;
        if numerics::argmax(&probs) < n_all {
            bg_fp += 1;
        }
    }

    // Accuracies and the novel decomposition.
    let mut base_correct = 0usize;
    let mut base_total = 0usize;
    let mut novel_correct = 0usize;
    let mut novel_total = 0usize;
    let mut novel_as_base = 0usize;
    let mut novel_as_other_novel = 0usize;
    let mut novel_as_bg = 0usize;
    for (row, counts) in confusion.iter().enumerate() {
        let total: usize = counts.iter().sum();
        if row < n_base {
            base_total += total;
            base_correct += counts[row];
        } else {
            novel_total += total;
            novel_correct += counts[row];
            novel_as_base += counts[..n_base].iter().sum::<usize>();
            novel_as_other_novel +=
                counts[n_base..n_all].iter().sum::<usize>() - counts[row];
            novel_as_bg += counts[n_all];
        }
    }
    let frac = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };

    let (mean_intra, mean_inter) = if head.is_some() {
        let mut total_sum = vec![0.0; config.d_proj];
        let mut intra_pairsum = 0.0;
        let mut intra_pairs = 0.0;
        let mut sum_sq_class = 0.0;
        let mut n_total = 0.0;
        let mut sum_n_sq = 0.0;
        for (s_c, &n_c) in proj_class_sums.iter().zip(&proj_counts) {
            numerics::axpy(&mut total_sum, 1.0, s_c);
            let nc = n_c as f64;
            let norm_sq = numerics::dot(s_c, s_c);
            intra_pairsum += (norm_sq - nc) / 2.0;
            intra_pairs += nc * (nc - 1.0) / 2.0;
            sum_sq_class += norm_sq;
            sum_n_sq += nc * nc;
            n_total += nc;
        }
        let cross_pairsum = (numerics::dot(&total_sum, &total_sum) - sum_sq_class) / 2.0;
        let cross_pairs = (n_total * n_total - sum_n_sq) / 2.0;
        (
            (intra_pairs > 0.0).then(|| intra_pairsum / intra_pairs),
            (cross_pairs > 0.0).then(|| cross_pairsum / cross_pairs),
        )
    } else {
        (None, None)
    };

    Ok(EvalReport {
        base_accuracy: frac(base_correct, base_total),
        novel_accuracy: frac(novel_correct, novel_total),
        overall_accuracy: frac(base_correct + novel_correct, base_total + novel_total),
        novel_as_base_error: frac(novel_as_base, novel_total),
        novel_correct_rate: frac(novel_correct, novel_total),
        novel_as_other_novel_rate: frac(novel_as_other_novel, novel_total),
        novel_as_background_rate: frac(novel_as_bg, novel_total),
        background_fp_rate: frac(bg_fp, background_count),
        mean_intra_class_cos: mean_intra,
        mean_inter_class_cos: mean_inter,
        class_order,
        confusion,
        per_class_counts,
        background_count,
    })
}

/// Run the full pipeline (procedure A, procedure B, evaluation) for one
/// config on an existing world.
pub fn evaluate_config(world: &SyntheticWorld, config: &TrainConfig) -> Result<EvalReport> {
    let a = trainer::run_procedure_a(world, config)?;
    let b = trainer::run_procedure_b(world, &a.prompts, config)?;
    eval_classifier(world, &a.prompts, Some(&b.head), config)
}

// ---------------------------------------------------------------------------
// Sampled-class sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub novel_acc_mean: f64,
    pub novel_acc_std: f64,
    pub base_acc_mean: f64,
    /// Per-seed novel accuracies, aligned with the seeds passed in.
    pub novel_accs: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// For each sampled-vocabulary size, run the pipeline across paired seeds and
/// record novel accuracy. The world is fixed; only the run seed varies.
pub fn sweep_sampled_classes(
    world: &SyntheticWorld,
    base_config: &TrainConfig,
    k_values: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyInput("sweep needs k values and seeds"));
    }
    let mut rows = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let mut novel = Vec::with_capacity(seeds.len());
        let mut base = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base_config.clone();
            cfg.k = Some(k);
            cfg.seed = seed;
            let report = evaluate_config(world, &cfg)?;
            novel.push(report.novel_accuracy);
            base.push(report.base_accuracy);
        }
        let (novel_mean, novel_std) = mean_std(&novel);
        let (base_mean, _) = mean_std(&base);
        rows.push(SweepRow {
            k,
            novel_acc_mean: novel_mean,
            novel_acc_std: novel_std,
            base_acc_mean: base_mean,
            novel_accs: novel,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,novel_acc_mean,novel_acc_std,base_acc_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.k, r.novel_acc_mean, r.novel_acc_std, r.base_acc_mean
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Component ablation grid
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub novel_acc_mean: f64,
    pub novel_acc_std: f64,
    pub base_acc_mean: f64,
    pub novel_accs: Vec<f64>,
}

/// The five ablation configurations, in order: frozen prompt, learnable
/// prompt, plus meta sampling, plus background prompt, plus instance
/// contrast.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut fixed = base.clone();
    fixed.train_prompts = false;
    fixed.bg_in_loss_p = false;
    fixed.icl_enabled = false;

    let mut learnable = base.clone();
    learnable.train_prompts = true;
    learnable.k = Some(base.n_base);
    learnable.bg_in_loss_p = false;
    learnable.icl_enabled = false;

    let mut meta = base.clone();
    meta.train_prompts = true;
    meta.bg_in_loss_p = false;
    meta.icl_enabled = false;

    let mut meta_bg = base.clone();
    meta_bg.train_prompts = true;
    meta_bg.bg_in_loss_p = true;
    meta_bg.icl_enabled = false;

    let mut full = base.clone();
    full.train_prompts = true;
    full.bg_in_loss_p = true;
    full.icl_enabled = true;

    vec![
        ("fixed_prompt".into(), fixed),
        ("learnable_prompt".into(), learnable),
        ("meta_sampling".into(), meta),
        ("background_prompt".into(), meta_bg),
        ("instance_contrast".into(), full),
    ]
}

/// Run the five ablation rows across paired seeds on a fixed world.
pub fn ablation_grid(
    world: &SyntheticWorld,
    base_config: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::EmptyInput("ablation needs seeds"));
    }
    let mut rows = Vec::new();
    for (name, cfg_template) in ablation_configs(base_config) {
        let mut novel = Vec::with_capacity(seeds.len());
        let mut base_acc = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = cfg_template.clone();
            cfg.seed = seed;
            let report = evaluate_config(world, &cfg)?;
            novel.push(report.novel_accuracy);
            base_acc.push(report.base_accuracy);
        }
        let (novel_mean, novel_std) = mean_std(&novel);
        let (base_mean, _) = mean_std(&base_acc);
        rows.push(AblationRow {
            name,
            novel_acc_mean: novel_mean,
            novel_acc_std: novel_std,
            base_acc_mean: base_mean,
            novel_accs: novel,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("name,novel_acc_mean,novel_acc_std,base_acc_mean\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            r.name, r.novel_acc_mean, r.novel_acc_std, r.base_acc_mean
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Output formats and small statistics
// ---------------------------------------------------------------------------

/// One JSON object per line, one line per iteration.
pub fn metrics_to_jsonl(records: &[IterRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("IterRecord serializes"));
        out.push('\n');
    }
    out
}

/// CSV form of a prompt-learning loss curve.
pub fn curve_to_csv(points: &[PromptCurvePoint]) -> String {
    let mut out = String::from("step,loss_p,loss_n\n");
    for p in points {
        out.push_str(&format!("{},{:.12},{:.12}\n", p.step, p.loss_p, p.loss_n));
    }
    out
}

/// One-sided paired sign test: p-value of seeing at least this many `a > b`
/// wins under the null that wins and losses are equally likely. Ties drop.
pub fn sign_test_p_greater(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut wins = 0u32;
    let mut n = 0u32;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            wins += 1;
            n += 1;
        } else if x < y {
            n += 1;
        }
    }
    if n == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    for i in wins..=n {
        p += binomial(n, i);
    }
    p / 2f64.powi(n as i32)
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut out = 1.0;
    for i in 0..k {
        out *= (n - i) as f64 / (i + 1) as f64;
    }
    out
}

/// Generate a held-out labeled test pool (foreground per class plus
/// background), mostly for tests that need raw samples rather than a report.
pub fn gen_test_pool(
    world: &SyntheticWorld,
    per_class: usize,
    n_bg: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<ProposalSample>> {
    let mut pool = Vec::new();
    for &c in &world.vocab.all() {
        pool.extend(synth::gen_fg_proposals(world, c, per_class, rng)?);
    }
    pool.extend(synth::gen_bg_proposals(world, n_bg, rng)?);
    Ok(pool)
}
