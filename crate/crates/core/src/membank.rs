//! Class-balanced instance memory bank: IoU-threshold filtering,
//! dissimilarity-based admission, and bounded per-class FIFO eviction.
//!
//! The bank keeps one queue per base class plus one for background, each
//! capped at the same capacity. Admission picks the candidates least similar
//! to what a queue already holds, so the stored samples stay diverse.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::encoder::ClassId;
use crate::error::{Error, Result};
use crate::numerics::cosine_sim;

/// Queue key: a base class or the background queue.
pub type QueueKey = Option<ClassId>;

/// One proposal, represented by its embedding, its IoU with ground truth, and
/// its class (None marks background). `tick` is stamped by the bank on
/// insertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSample {
    pub embedding: Vec<f64>,
    pub iou: f64,
    pub label: Option<ClassId>,
    #[serde(default)]
    pub tick: u64,
}

impl ProposalSample {
    pub fn new(embedding: Vec<f64>, iou: f64, label: Option<ClassId>) -> Self {
        ProposalSample {
            embedding,
            iou,
            label,
            tick: 0,
        }
    }
}

/// Split candidates into per-class foreground (IoU strictly above `u_p`) and
/// background (IoU strictly below `u_n`); everything in between is discarded.
///
/// A labeled candidate whose IoU falls below `u_n` barely overlaps its object
/// and is treated as background. Unlabeled candidates can never be foreground.
pub fn filter_proposals(
    candidates: Vec<ProposalSample>,
    u_p: f64,
    u_n: f64,
) -> Result<(BTreeMap<ClassId, Vec<ProposalSample>>, Vec<ProposalSample>)> {
    if !(0.0..=1.0).contains(&u_n) || !(0.0..=1.0).contains(&u_p) || u_n >= u_p {
        return Err(Error::InvalidConfig(format!(
            "IoU thresholds must satisfy 0 <= u_n < u_p <= 1, got u_n={u_n} u_p={u_p}"
        )));
    }
    let mut foreground: BTreeMap<ClassId, Vec<ProposalSample>> = BTreeMap::new();
    let mut background = Vec::new();
    for cand in candidates {
        if cand.iou < u_n {
            background.push(cand);
        } else if cand.iou > u_p {
            if let Some(class) = cand.label {
                foreground.entry(class).or_default().push(cand);
            }
            // high-IoU candidates without a label are dropped
        }
    }
    Ok((foreground, background))
}

/// Pick at most `m` candidates that are most dissimilar to the queue.
///
/// Each candidate is scored by its maximum cosine similarity to the current
/// queue entries (worst-case novelty) and the `m` lowest-scoring candidates
/// win, ties broken by candidate order. Against an empty queue there is
/// nothing to score, so selection falls back to greedy max-min
/// farthest-point sampling seeded by the first candidate.
pub fn select_dissimilar(
    queue: &VecDeque<ProposalSample>,
    candidates: Vec<ProposalSample>,
    m: usize,
) -> Result<Vec<ProposalSample>> {
    if candidates.is_empty() || m == 0 {
        return Ok(Vec::new());
    }

    if queue.is_empty() {
        // Greedy max-min: repeatedly add the candidate whose similarity to the
        // already-selected set is smallest.
        let take = m.min(candidates.len());
        let mut remaining: Vec<ProposalSample> = candidates;
        let mut selected = vec![remaining.remove(0)];
        while selected.len() < take && !remaining.is_empty() {
            let mut best_idx = 0;
            let mut best_score = f64::INFINITY;
            for (i, cand) in remaining.iter().enumerate() {
                let mut max_sim = f64::NEG_INFINITY;
                for s in &selected {
                    let sim = cosine_sim(&cand.embedding, &s.embedding)?;
                    if sim > max_sim {
                        max_sim = sim;
                    }
                }
                if max_sim < best_score {
                    best_score = max_sim;
                    best_idx = i;
                }
            }
            selected.push(remaining.remove(best_idx));
        }
        return Ok(selected);
    }

    let mut scored: Vec<(f64, usize, ProposalSample)> = Vec::with_capacity(candidates.len());
    for (i, cand) in candidates.into_iter().enumerate() {
        let mut max_sim = f64::NEG_INFINITY;
        for s in queue {
            let sim = cosine_sim(&cand.embedding, &s.embedding)?;
            if sim > max_sim {
                max_sim = sim;
            }
        }
        scored.push((max_sim, i, cand));
    }
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(m).map(|(_, _, c)| c).collect())
}

/// Counts reported by [`MemoryBank::update`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub admitted: usize,
    pub evicted: usize,
    pub filtered_out: usize,
}

/// Bounded per-class FIFO queues of proposal samples, one queue per base
/// class plus one background queue, all with the same capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "BankDump", into = "BankDump")]
pub struct MemoryBank {
    capacity: usize,
    next_tick: u64,
    queues: BTreeMap<QueueKey, VecDeque<ProposalSample>>,
}

/// Serialization shim: JSON maps need string keys, so the queue map is dumped
/// as a list of pairs.
#[derive(Serialize, Deserialize)]
struct BankDump {
    capacity: usize,
    next_tick: u64,
    queues: Vec<(QueueKey, Vec<ProposalSample>)>,
}

impl From<BankDump> for MemoryBank {
    fn from(d: BankDump) -> Self {
        MemoryBank {
            capacity: d.capacity,
            next_tick: d.next_tick,
            queues: d
                .queues
                .into_iter()
                .map(|(k, v)| (k, VecDeque::from(v)))
                .collect(),
        }
    }
}

impl From<MemoryBank> for BankDump {
    fn from(b: MemoryBank) -> Self {
        BankDump {
            capacity: b.capacity,
            next_tick: b.next_tick,
            queues: b
                .queues
                .into_iter()
                .map(|(k, v)| (k, Vec::from(v)))
                .collect(),
        }
    }
}

impl MemoryBank {
    /// One queue per base class plus the background queue.
    pub fn new(base_classes: &[ClassId], capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("memory bank capacity must be positive".into()));
        }
        let mut queues: BTreeMap<QueueKey, VecDeque<ProposalSample>> = BTreeMap::new();
        queues.insert(None, VecDeque::new());
        for &c in base_classes {
            queues.insert(Some(c), VecDeque::new());
        }
        Ok(MemoryBank {
            capacity,
            next_tick: 0,
            queues,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_queues(&self) -> usize {
        self.queues.len()
    }

    pub fn queue(&self, key: QueueKey) -> Result<&VecDeque<ProposalSample>> {
        self.queues.get(&key).ok_or(Error::UnknownClass {
            class: key.unwrap_or(usize::MAX),
            context: "MemoryBank::queue",
        })
    }

    pub fn keys(&self) -> impl Iterator<Item = QueueKey> + '_ {
        self.queues.keys().cloned()
    }

    pub fn total_len(&self) -> usize {
        self.queues.values().map(|q| q.len()).sum()
    }

    /// Entries of every queue except `key` (the negative set for that class).
    pub fn entries_excluding(&self, key: QueueKey) -> impl Iterator<Item = &ProposalSample> {
        self.queues
            .iter()
            .filter(move |(k, _)| **k != key)
            .flat_map(|(_, q)| q.iter())
    }

    /// Append samples in order, stamping insertion ticks; evict the oldest
    /// entries once the queue exceeds capacity. Returns the evictions.
    pub fn push(
        &mut self,
        key: QueueKey,
        samples: Vec<ProposalSample>,
    ) -> Result<Vec<ProposalSample>> {
        let capacity = self.capacity;
        let next_tick = &mut self.next_tick;
        let queue = self.queues.get_mut(&key).ok_or(Error::UnknownClass {
            class: key.unwrap_or(usize::MAX),
            context: "MemoryBank::push",
        })?;
        let mut evicted = Vec::new();
        for mut s in samples {
            s.tick = *next_tick;
            *next_tick += 1;
            queue.push_back(s);
            if queue.len() > capacity {
                evicted.push(queue.pop_front().expect("queue cannot be empty here"));
            }
        }
        Ok(evicted)
    }

    /// One full bank update: threshold filtering, per-queue dissimilarity
    /// selection, FIFO push.
    pub fn update(
        &mut self,
        candidates: Vec<ProposalSample>,
        u_p: f64,
        u_n: f64,
        m: usize,
    ) -> Result<UpdateSummary> {
        if m >= self.capacity {
            return Err(Error::InvalidConfig(format!(
                "sampling size m={m} must be smaller than capacity M={}",
                self.capacity
            )));
        }
        let total = candidates.len();
        let (foreground, background) = filter_proposals(candidates, u_p, u_n)?;

        let mut summary = UpdateSummary::default();
        summary.filtered_out =
            total - foreground.values().map(Vec::len).sum::<usize>() - background.len();

        for (class, cands) in foreground {
            let picked = select_dissimilar(self.queue(Some(class))?, cands, m)?;
            summary.admitted += picked.len();
            summary.evicted += self.push(Some(class), picked)?.len();
        }
        let picked = select_dissimilar(self.queue(None)?, background, m)?;
        summary.admitted += picked.len();
        summary.evicted += self.push(None, picked)?.len();
        Ok(summary)
    }
}
