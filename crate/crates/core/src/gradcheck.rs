//! Finite-difference certification harness: every analytic gradient in the
//! crate, checked against the central-difference oracle on seeded
//! micro-instances. Used by the command-line `gradcheck` subcommand and by
//! the acceptance suite.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{ClassId, FrozenTextEncoder, WordEmbeddingTable};
use crate::error::Result;
use crate::icl::{self, ProjectionNet};
use crate::membank::{MemoryBank, ProposalSample};
use crate::mpl::{self, SampledVocab};
use crate::numerics::{self, finite_diff_grad, Mat};
use crate::prompt::{self, BackgroundPrompt, ForegroundPrompt, TokenPosition};
use crate::trainer;

/// Central-difference step used throughout the harness.
pub const STEP: f64 = 1e-5;
/// Pass threshold on the norm-wise relative error.
pub const TOLERANCE: f64 = 1e-5;

/// Worst observed disagreement per gradient family.
#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub loss_p_wrt_prompts: f64,
    pub loss_n_wrt_prompts: f64,
    pub icl_wrt_net: f64,
    pub icl_wrt_inputs: f64,
    pub cls_wrt_inputs: f64,
    pub cls_wrt_adapter: f64,
    pub instances: usize,
}

impl GradcheckReport {
    pub fn max(&self) -> f64 {
        [
            self.loss_p_wrt_prompts,
            self.loss_n_wrt_prompts,
            self.icl_wrt_net,
            self.icl_wrt_inputs,
            self.cls_wrt_inputs,
            self.cls_wrt_adapter,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max() < TOLERANCE
    }
}

/// Norm-wise relative error with a floor for gradients that are numerically
/// zero along both routes (a central difference of a flat function only
/// measures rounding noise).
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
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

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        if let Ok(u) = numerics::normalized(&v, "gradcheck unit") {
            return u;
        }
    }
}

struct PromptInstance {
    table: WordEmbeddingTable,
    encoder: FrozenTextEncoder,
    fg: ForegroundPrompt,
    bg: BackgroundPrompt,
    class_ids: Vec<ClassId>,
    positives: Vec<(Vec<f64>, ClassId)>,
    negatives: Vec<Vec<f64>>,
    d: usize,
    tau: f64,
}

fn prompt_instance(seed: u64) -> PromptInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8 + (seed as usize % 3) * 4; // 8, 12, 16
    let n_classes = 3 + (seed as usize % 4); // 3..=6
    let tau = [0.1, 0.2, 0.5][seed as usize % 3];
    let words: Vec<Vec<f64>> = (0..n_classes).map(|_| unit(&mut rng, d)).collect();
    let table = WordEmbeddingTable::new(words, d, seed).unwrap();
    let encoder = FrozenTextEncoder::new_seeded(d, d, seed ^ 0x5151);
    let (mut fg, bg) = prompt::init_prompts(2, 3, d, seed ^ 0x99).unwrap();
    fg.token_position = [TokenPosition::Front, TokenPosition::Middle, TokenPosition::End]
        [seed as usize % 3];
    let positives = (0..3)
        .map(|_| (unit(&mut rng, d), rng.gen_range(0..n_classes)))
        .collect();
    let negatives = (0..2).map(|_| unit(&mut rng, d)).collect();
    PromptInstance {
        table,
        encoder,
        fg,
        bg,
        class_ids: (0..n_classes).collect(),
        positives,
        negatives,
        d,
        tau,
    }
}

fn flatten(fg: &ForegroundPrompt, bg: &BackgroundPrompt) -> Vec<f64> {
    fg.context.iter().chain(&bg.context).flatten().cloned().collect()
}

fn unflatten(flat: &[f64], fg0: &ForegroundPrompt, bg0: &BackgroundPrompt, d: usize) -> (ForegroundPrompt, BackgroundPrompt) {
    let mut fg = fg0.clone();
    let mut bg = bg0.clone();
    let mut at = 0;
    for v in fg.context.iter_mut().chain(bg.context.iter_mut()) {
        v.copy_from_slice(&flat[at..at + d]);
        at += d;
    }
    (fg, bg)
}

fn check_prompt_losses(inst: &PromptInstance, report: &mut GradcheckReport) -> Result<()> {
    let flat = flatten(&inst.fg, &inst.bg);

    // loss_p with the background slot, gradients for both prompts.
    let (_, grads) = mpl::loss_p_grads(
        &inst.positives,
        &inst.class_ids,
        &inst.fg,
        &inst.bg,
        &inst.table,
        &inst.encoder,
        inst.tau,
        true,
    )?;
    let analytic: Vec<f64> = grads.fg.iter().chain(&grads.bg).flatten().cloned().collect();
    let numeric = finite_diff_grad(
        |x| {
            let (fg, bg) = unflatten(x, &inst.fg, &inst.bg, inst.d);
            let emb = prompt::class_embeddings(&fg, &inst.class_ids, &inst.table, &inst.encoder)
                .unwrap();
            let vocab = SampledVocab::new(inst.class_ids.clone(), emb).unwrap();
            let t_bg = prompt::background_embedding(&bg, &inst.encoder).unwrap();
            mpl::loss_p(&inst.positives, &vocab, Some(&t_bg), inst.tau).unwrap()
        },
        &flat,
        STEP,
    )?;
    report.loss_p_wrt_prompts = report.loss_p_wrt_prompts.max(rel_err(&analytic, &numeric));

    // loss_n, gradients for both prompts (background block identically zero).
    let (_, grads) = mpl::loss_n_grads(
        &inst.negatives,
        &inst.class_ids,
        &inst.fg,
        &inst.bg,
        &inst.table,
        &inst.encoder,
        inst.tau,
    )?;
    let analytic: Vec<f64> = grads.fg.iter().chain(&grads.bg).flatten().cloned().collect();
    let numeric = finite_diff_grad(
        |x| {
            let (fg, _) = unflatten(x, &inst.fg, &inst.bg, inst.d);
            let emb = prompt::class_embeddings(&fg, &inst.class_ids, &inst.table, &inst.encoder)
                .unwrap();
            let vocab = SampledVocab::new(inst.class_ids.clone(), emb).unwrap();
            mpl::loss_n(&inst.negatives, &vocab, inst.tau).unwrap()
        },
        &flat,
        STEP,
    )?;
    report.loss_n_wrt_prompts = report.loss_n_wrt_prompts.max(rel_err(&analytic, &numeric));
    Ok(())
}

fn check_icl(seed: u64, report: &mut GradcheckReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD00D);
    let d_in = 12 + (seed as usize % 2) * 4; // 12 or 16
    let d_proj = 4;
    let gamma = [0.2, 0.5][seed as usize % 2];
    let literal = seed % 2 == 0;
    let net = ProjectionNet::new_seeded(d_in, 8, d_proj, seed ^ 0x31);
    let classes: Vec<ClassId> = vec![0, 1, 2];
    let mut bank = MemoryBank::new(&classes, 8)?;
    for &c in &classes {
        let samples: Vec<ProposalSample> = (0..3)
            .map(|_| ProposalSample::new(unit(&mut rng, d_proj), 0.9, Some(c)))
            .collect();
        bank.push(Some(c), samples)?;
    }
    // Keep probes away from the rectifier kink, where a central difference
    // is not a derivative estimate.
    let mut inputs: Vec<(Vec<f64>, Option<ClassId>)> = Vec::new();
    while inputs.len() < 3 {
        let f = unit(&mut rng, d_in);
        let mut pre = net.w1.matvec(&f);
        for (u, b) in pre.iter_mut().zip(&net.b1) {
            *u += b;
        }
        if pre.iter().all(|u| u.abs() > 1e-3) {
            inputs.push((f, Some(inputs.len() % 3)));
        }
    }

    let back = icl::icl_grads(&inputs, &net, &bank, gamma, literal)?;

    let loss_of = |net: &ProjectionNet, inputs: &[(Vec<f64>, Option<ClassId>)]| -> f64 {
        let anchors: Vec<(Vec<f64>, Option<ClassId>)> = inputs
            .iter()
            .map(|(f, k)| (net.project(f).unwrap(), *k))
            .collect();
        icl::icl_loss(&icl::ContrastiveBatch { anchors }, &bank, gamma, literal)
            .unwrap()
            .loss
    };

    let numeric = finite_diff_grad(
        |x| {
            let mut n = net.clone();
            n.set_from_flat(x).unwrap();
            loss_of(&n, &inputs)
        },
        &net.flatten_params(),
        STEP,
    )?;
    report.icl_wrt_net = report.icl_wrt_net.max(rel_err(&back.grad_net.flatten(), &numeric));

    for (i, (f, _)) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |x| {
                let mut moved = inputs.clone();
                moved[i].0 = x.to_vec();
                loss_of(&net, &moved)
            },
            f,
            STEP,
        )?;
        report.icl_wrt_inputs = report
            .icl_wrt_inputs
            .max(rel_err(&back.grad_inputs[i], &numeric));
    }
    Ok(())
}

fn check_cls(seed: u64, report: &mut GradcheckReport) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5);
    let d = 8;
    let n_classes = 2 + (seed as usize % 5); // 2..=6
    let tau = [0.1, 0.3][seed as usize % 2];
    let rows: Vec<Vec<f64>> = (0..n_classes).map(|_| unit(&mut rng, d)).collect();
    let t = Mat::from_rows(rows)?;
    let t_bg = unit(&mut rng, d);
    let raw: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, d)).collect();
    let targets: Vec<Option<usize>> = (0..3)
        .map(|i| if i == 2 { None } else { Some(rng.gen_range(0..n_classes)) })
        .collect();
    let mut adapter = Mat::identity(d);
    for x in &mut adapter.data {
        *x += 0.1 * (rng.gen::<f64>() - 0.5);
    }

    let adapted: Vec<(Vec<f64>, Option<usize>)> = raw
        .iter()
        .zip(&targets)
        .map(|(f, tg)| (adapter.matvec(f), *tg))
        .collect();
    let (_, g_inputs) = trainer::loss_cls_grads(&adapted, &t, &t_bg, tau)?;

    for (i, (f, _)) in adapted.iter().enumerate() {
        let numeric = finite_diff_grad(
            |x| {
                let mut batch = adapted.clone();
                batch[i].0 = x.to_vec();
                trainer::loss_cls(&batch, &t, &t_bg, tau).unwrap()
            },
            f,
            STEP,
        )?;
        report.cls_wrt_inputs = report.cls_wrt_inputs.max(rel_err(&g_inputs[i], &numeric));
    }

    let mut grad_a = Mat::zeros(d, d);
    for (g, f) in g_inputs.iter().zip(&raw) {
        grad_a.add_scaled_outer(1.0, g, f);
    }
    let numeric = finite_diff_grad(
        |x| {
            let a = Mat {
                rows: d,
                cols: d,
                data: x.to_vec(),
            };
            let batch: Vec<(Vec<f64>, Option<usize>)> = raw
                .iter()
                .zip(&targets)
                .map(|(f, tg)| (a.matvec(f), *tg))
                .collect();
            trainer::loss_cls(&batch, &t, &t_bg, tau).unwrap()
        },
        &adapter.data,
        STEP,
    )?;
    report.cls_wrt_adapter = report.cls_wrt_adapter.max(rel_err(&grad_a.data, &numeric));
    Ok(())
}

/// Run the full certification over `instances` seeded micro-instances
/// starting at `seed`.
pub fn run(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for i in 0..instances as u64 {
        let s = seed.wrapping_add(i);
        let inst = prompt_instance(s);
        check_prompt_losses(&inst, &mut report)?;
        check_icl(s, &mut report)?;
        check_cls(s, &mut report)?;
    }
    report.instances = instances;
    Ok(report)
}
