//! Deterministic generator of synthetic open-vocabulary tasks: class
//! prototypes with controllable inter-class similarity, base/novel splits,
//! word embeddings correlated with the prototypes, and proposal streams with
//! synthetic IoU values.
//!
//! Classes live on the unit sphere, grouped into clusters; novel classes are
//! placed inside the same clusters as base classes on purpose, so that the
//! "novel predicted as a similar base class" failure mode actually occurs.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_seed, ClassId, FrozenTextEncoder, WordEmbeddingTable};
use crate::error::{Error, Result};
use crate::membank::ProposalSample;
use crate::numerics::{self, Mat};
use crate::prompt::Vocabulary;

/// Number of IoU levels used by the level ensemble (range 0.5..=1.0, step 0.1).
pub const NUM_IOU_LEVELS: usize = 5;

fn default_iou_fg_alpha() -> f64 {
    5.0
}
fn default_iou_fg_beta() -> f64 {
    2.0
}
fn default_iou_bg_max() -> f64 {
    0.05
}

/// Parameters of a synthetic open-vocabulary task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_base: usize,
    pub n_novel: usize,
    pub d: usize,
    pub cluster_count: usize,
    /// Angle (radians) between a cluster center and its class prototypes.
    pub cluster_spread: f64,
    /// Std of the Gaussian noise added to a prototype before normalizing a
    /// foreground proposal embedding.
    pub proposal_noise: f64,
    /// Beta parameters of the foreground IoU distribution.
    #[serde(default = "default_iou_fg_alpha")]
    pub iou_fg_alpha: f64,
    #[serde(default = "default_iou_fg_beta")]
    pub iou_fg_beta: f64,
    /// Background IoU is uniform on [0, iou_bg_max).
    #[serde(default = "default_iou_bg_max")]
    pub iou_bg_max: f64,
    /// Std of the noise between a prototype and its word embedding.
    pub word_noise: f64,
    /// Use the identity map instead of the seeded linear map between
    /// prototypes and word embeddings (degenerate setups and tests).
    #[serde(default)]
    pub identity_word_map: bool,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_base < 2 {
            return Err(Error::InvalidConfig("n_base must be at least 2".into()));
        }
        if self.d < 3 {
            return Err(Error::InvalidConfig(
                "d must be at least 3 for the spherical construction".into(),
            ));
        }
        if self.cluster_count == 0 {
            return Err(Error::InvalidConfig("cluster_count must be positive".into()));
        }
        if self.cluster_spread <= 0.0 {
            return Err(Error::InvalidConfig("cluster_spread must be positive".into()));
        }
        if self.proposal_noise < 0.0 || self.word_noise < 0.0 {
            return Err(Error::InvalidConfig("noise levels cannot be negative".into()));
        }
        if self.iou_fg_alpha <= 0.0 || self.iou_fg_beta <= 0.0 {
            return Err(Error::InvalidConfig("Beta IoU parameters must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_bg_max) {
            return Err(Error::InvalidConfig("iou_bg_max must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// The fixed regression world: seed 42, 40 base + 10 novel classes, d = 64.
    /// Novel classes share clusters with base classes, proposals carry enough
    /// noise that same-cluster classes genuinely compete, and the word noise
    /// leaves the prompt something real to overfit.
    pub fn golden() -> Self {
        TaskSpec {
            n_base: 40,
            n_novel: 10,
            d: 64,
            cluster_count: 10,
            cluster_spread: 0.35,
            proposal_noise: 0.25,
            iou_fg_alpha: 5.0,
            iou_fg_beta: 2.0,
            iou_bg_max: 0.05,
            word_noise: 0.05,
            identity_word_map: false,
            seed: 42,
        }
    }
}

/// A generated task: unit-norm class prototypes, the base/novel split, and
/// the correlated word embedding table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: TaskSpec,
    pub prototypes: Vec<Vec<f64>>,
    pub vocab: Vocabulary,
    pub words: WordEmbeddingTable,
}

impl SyntheticWorld {
    pub fn n_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn prototype(&self, c: ClassId) -> Result<&[f64]> {
        self.prototypes
            .get(c)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownClass {
                class: c,
                context: "SyntheticWorld::prototype",
            })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
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

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        if let Ok(u) = numerics::normalized(&v, "random_unit") {
            return u;
        }
    }
}

/// A unit vector at angle `theta` from `center`, in a random tangent
/// direction.
fn rotate_on_sphere(center: &[f64], theta: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let g = random_unit(rng, center.len());
        let radial = numerics::dot(&g, center);
        let mut tangent = g;
        numerics::axpy(&mut tangent, -radial, center);
        if let Ok(t) = numerics::normalized(&tangent, "tangent") {
            let mut out = numerics::scale(center, theta.cos());
            numerics::axpy(&mut out, theta.sin(), &t);
            return out;
        }
    }
}

/// Generate the world: cluster centers uniform on the sphere, class
/// prototypes rotated off their center by the configured spread, word
/// embeddings correlated with the prototypes. Deterministic per seed.
pub fn gen_world(spec: &TaskSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let centers: Vec<Vec<f64>> = (0..spec.cluster_count)
        .map(|_| random_unit(&mut rng, spec.d))
        .collect();

    // Base class i and novel class j share cluster (i % cc) / (j % cc), so
    // every novel class has a nearby base class.
    let n_total = spec.n_base + spec.n_novel;
    let mut prototypes = Vec::with_capacity(n_total);
    for idx in 0..n_total {
        let cluster = if idx < spec.n_base {
            idx % spec.cluster_count
        } else {
            (idx - spec.n_base) % spec.cluster_count
        };
        prototypes.push(rotate_on_sphere(&centers[cluster], spec.cluster_spread, &mut rng));
    }

    // Ground-truth text map G: prototypes -> word space. By default it is
    // the inverse (transpose) of this world's frozen text encoder, so that
    // encoding a class's word embedding lands back on its image prototype -
    // the synthetic analog of a pretrained two-tower model whose text and
    // image embeddings already agree.
    let text_map = if spec.identity_word_map {
        Mat::identity(spec.d)
    } else {
        FrozenTextEncoder::new_seeded(spec.d, spec.d, encoder_seed(spec.seed))
            .weights_transposed()
    };
    let mut word_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    word_rng.set_stream(2);
    let word_noise = Normal::new(0.0, spec.word_noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut words = Vec::with_capacity(n_total);
    for p in &prototypes {
        let mut w = text_map.matvec(p);
        if spec.word_noise > 0.0 {
            for x in &mut w {
                *x += word_noise.sample(&mut word_rng);
            }
        }
        words.push(numerics::normalized(&w, "word embedding")?);
    }

    let vocab = Vocabulary::new(
        (0..spec.n_base).collect(),
        (spec.n_base..n_total).collect(),
    )?;
    let words = WordEmbeddingTable::new(words, spec.d, spec.seed)?;

    Ok(SyntheticWorld {
        spec: spec.clone(),
        prototypes,
        vocab,
        words,
    })
}

/// Foreground proposals for one class: `normalize(prototype + noise)` with a
/// Beta-distributed IoU.
pub fn gen_fg_proposals(
    world: &SyntheticWorld,
    class: ClassId,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ProposalSample>> {
    let proto = world.prototype(class)?;
    let spec = &world.spec;
    let beta = Beta::new(spec.iou_fg_alpha, spec.iou_fg_beta)
        .map_err(|e| Error::InvalidConfig(format!("bad Beta parameters: {e}")))?;
    let noise = Normal::new(0.0, spec.proposal_noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut e = proto.to_vec();
        if spec.proposal_noise > 0.0 {
            for x in &mut e {
                *x += noise.sample(rng);
            }
        }
        let e = numerics::normalized(&e, "fg proposal")?;
        let iou = beta.sample(rng);
        out.push(ProposalSample::new(e, iou, Some(class)));
    }
    Ok(out)
}

/// Background proposals: a random direction mixed with a random class
/// prototype (objects are sometimes partially inside background boxes), with
/// a small uniform IoU.
pub fn gen_bg_proposals(
    world: &SyntheticWorld,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ProposalSample>> {
    let spec = &world.spec;
    let alpha_dist = Uniform::new(0.5, 1.0);
    let iou_dist = Uniform::new(0.0, spec.iou_bg_max.max(f64::MIN_POSITIVE));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let alpha = alpha_dist.sample(rng);
        let dir = random_unit(rng, spec.d);
        let proto = &world.prototypes[rng.gen_range(0..world.n_classes())];
        let mut e = numerics::scale(&dir, alpha);
        numerics::axpy(&mut e, 1.0 - alpha, proto);
        let e = numerics::normalized(&e, "bg proposal")?;
        out.push(ProposalSample::new(e, iou_dist.sample(rng), None));
    }
    Ok(out)
}

/// Partition foreground samples into the five IoU levels
/// `[0.5 + 0.1 l, 0.5 + 0.1 (l+1))`, with IoU 1.0 assigned to the top level.
/// Samples below 0.5 belong to no level and are dropped.
pub fn gen_iou_level_datasets(samples: &[ProposalSample]) -> Vec<Vec<ProposalSample>> {
    let mut levels: Vec<Vec<ProposalSample>> = vec![Vec::new(); NUM_IOU_LEVELS];
    for s in samples {
        if s.iou < 0.5 {
            continue;
        }
        let level = (((s.iou - 0.5) / 0.1).floor() as usize).min(NUM_IOU_LEVELS - 1);
        levels[level].push(s.clone());
    }
    levels
}
