//! Queue refinement: decide which freshly computed keys are admitted to the
//! negative queues.
//!
//! For each candidate key the module forms a softmax distribution of its
//! similarities to every queued key (its own class included), compares that
//! against an expected distribution that puts weight e on own-class slots and
//! weight 1 elsewhere, and scores the candidate by the KL divergence between
//! the two. A candidate is admitted when its divergence does not exceed the
//! batch mean; keys that look more like other classes than their own are
//! rejected. All candidates in a batch are scored against the same queue
//! snapshot, taken before any of them is enqueued.

use crate::error::{Error, Result};
use crate::math::{dot, kahan_sum, kl_divergence, Embedding, ProbVector};
use crate::queue::QueueSnapshot;

/// Per-candidate admission verdict.
#[derive(Clone, Debug)]
pub struct QrsItem {
    pub label: usize,
    pub kl: f64,
    pub selected: bool,
}

/// Verdicts for one batch of candidate keys.
#[derive(Clone, Debug)]
pub struct QrsVerdict {
    pub items: Vec<QrsItem>,
    pub batch_mean_kl: f64,
}

impl QrsVerdict {
    pub fn selected_count(&self) -> usize {
        self.items.iter().filter(|i| i.selected).count()
    }

    pub fn selected_fraction(&self) -> f64 {
        if self.items.is_empty() {
            return 0.0;
        }
        self.selected_count() as f64 / self.items.len() as f64
    }

    pub fn per_class_selected(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for item in &self.items {
            if item.selected {
                counts[item.label] += 1;
            }
        }
        counts
    }
}

fn check_snapshot(snapshot: &QueueSnapshot) -> Result<()> {
    if snapshot.total() == 0 {
        return Err(Error::InvalidState(
            "cannot score candidates against an empty queue".into(),
        ));
    }
    Ok(())
}

/// Softmax over the candidate's similarity to every stored key, flattened in
/// ascending class order, oldest first. `temperature` divides the
/// similarities; 1.0 leaves them as raw dot products.
pub fn similarity_distribution(
    key: &Embedding,
    snapshot: &QueueSnapshot,
    temperature: f64,
) -> Result<ProbVector> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature {temperature} must be finite and > 0"
        )));
    }
    check_snapshot(snapshot)?;
    if key.dim() != snapshot.dim() {
        return Err(Error::ShapeMismatch(format!(
            "candidate dim {} does not match queue dim {}",
            key.dim(),
            snapshot.dim()
        )));
    }
    let logits: Vec<f64> = snapshot
        .iter_flat()
        .map(|(_, _, stored)| dot(key.values(), stored.values()) / temperature)
        .collect();
    crate::math::softmax(&logits)
}

/// The target distribution: weight e on slots of the candidate's own class,
/// weight 1 on every other stored slot, normalized. Slot order matches
/// [`similarity_distribution`].
pub fn expected_distribution(label: usize, counts: &[usize]) -> Result<ProbVector> {
    if label >= counts.len() {
        return Err(Error::InvalidClass {
            class: label,
            num_classes: counts.len(),
        });
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidState(
            "cannot build an expected distribution over an empty queue".into(),
        ));
    }
    let e = std::f64::consts::E;
    let z = kahan_sum(
        counts
            .iter()
            .enumerate()
            .map(|(class, &n)| if class == label { e * n as f64 } else { n as f64 }),
    );
    let mut values = Vec::with_capacity(total);
    for (class, &n) in counts.iter().enumerate() {
        let w = if class == label { e / z } else { 1.0 / z };
        values.extend(std::iter::repeat_n(w, n));
    }
    ProbVector::new(values)
}

/// Divergence of one candidate's similarity profile from its expected
/// profile. Low values mean the candidate resembles its own class's stored
/// keys more than the others.
pub fn candidate_kl(
    key: &Embedding,
    label: usize,
    snapshot: &QueueSnapshot,
    temperature: f64,
) -> Result<f64> {
    let p = similarity_distribution(key, snapshot, temperature)?;
    let q = expected_distribution(label, &snapshot.counts())?;
    kl_divergence(&p, &q)
}

/// Score a batch of candidate keys against one snapshot and admit those at or
/// below the batch-mean divergence. The mean includes every candidate's own
/// score, so a batch of one always admits its candidate.
pub fn select_updates(
    candidates: &[(usize, Embedding)],
    snapshot: &QueueSnapshot,
    temperature: f64,
) -> Result<QrsVerdict> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput(
            "candidate batch must be non-empty".into(),
        ));
    }
    check_snapshot(snapshot)?;
    let mut kls = Vec::with_capacity(candidates.len());
    for (label, key) in candidates {
        kls.push(candidate_kl(key, *label, snapshot, temperature)?);
    }
    let batch_mean_kl = kahan_sum(kls.iter().copied()) / kls.len() as f64;
    let items = candidates
        .iter()
        .zip(&kls)
        .map(|((label, _), &kl)| QrsItem {
            label: *label,
            kl,
            selected: kl <= batch_mean_kl,
        })
        .collect();
    Ok(QrsVerdict {
        items,
        batch_mean_kl,
    })
}
