//! Class-partitioned FIFO queues of key embeddings.
//!
//! A total budget of `total_capacity` slots is split evenly across the
//! pseudo-label classes: each class owns an independent queue of
//! `total_capacity / num_classes` (floor) entries. Enqueueing past capacity
//! evicts the oldest entry of that class only; other classes are untouched.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math::{l2_normalize, Embedding, UNIT_TOL};

/// How queue slots are filled at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueueInit {
    /// All queues start empty and fill as keys arrive.
    Empty,
    /// All queues start full of random unit vectors drawn from the seed.
    RandomUnit { seed: u64 },
}

/// Per-class FIFO queues holding unit-norm key embeddings.
#[derive(Clone, Debug)]
pub struct LesionQueue {
    dim: usize,
    per_class_capacity: usize,
    buffers: Vec<VecDeque<Embedding>>,
}

/// An immutable copy of queue contents, in ascending class order and
/// oldest-first within each class.
#[derive(Clone, Debug)]
pub struct QueueSnapshot {
    dim: usize,
    per_class: Vec<Vec<Embedding>>,
}

impl LesionQueue {
    pub fn new(
        num_classes: usize,
        total_capacity: usize,
        dim: usize,
        init: QueueInit,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidConfig(
                "queue needs at least one class".into(),
            ));
        }
        if dim == 0 {
            return Err(Error::InvalidConfig("queue entry dim must be > 0".into()));
        }
        let per_class_capacity = total_capacity / num_classes;
        if per_class_capacity == 0 {
            return Err(Error::InvalidConfig(format!(
                "total capacity {total_capacity} splits to zero slots per class \
                 across {num_classes} classes"
            )));
        }
        let mut buffers: Vec<VecDeque<Embedding>> = (0..num_classes)
            .map(|_| VecDeque::with_capacity(per_class_capacity))
            .collect();
        if let QueueInit::RandomUnit { seed } = init {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for buf in &mut buffers {
                for _ in 0..per_class_capacity {
                    let v: Vec<f64> =
                        (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    // A standard normal draw of dim >= 1 is zero with
                    // probability zero, so normalization cannot fail here.
                    buf.push_back(l2_normalize(&v)?);
                }
            }
        }
        Ok(LesionQueue {
            dim,
            per_class_capacity,
            buffers,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.buffers.len()
    }

    pub fn per_class_capacity(&self) -> usize {
        self.per_class_capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self, class: usize) -> Result<usize> {
        self.check_class(class)?;
        Ok(self.buffers[class].len())
    }

    pub fn total_len(&self) -> usize {
        self.buffers.iter().map(|b| b.len()).sum()
    }

    /// Fraction of all slots currently occupied.
    pub fn fill_fraction(&self) -> f64 {
        let cap = self.per_class_capacity * self.buffers.len();
        self.total_len() as f64 / cap as f64
    }

    /// Append a key to its class queue, evicting the oldest entry of that
    /// class if the queue is full.
    pub fn enqueue(&mut self, class: usize, key: Embedding) -> Result<()> {
        self.check_class(class)?;
        if key.dim() != self.dim {
            return Err(Error::ShapeMismatch(format!(
                "key dim {} does not match queue dim {}",
                key.dim(),
                self.dim
            )));
        }
        let n = crate::math::norm(key.values());
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::NotUnitNorm { norm: n, tol: UNIT_TOL });
        }
        let buf = &mut self.buffers[class];
        buf.push_back(key);
        while buf.len() > self.per_class_capacity {
            buf.pop_front();
        }
        Ok(())
    }

    /// All stored keys whose class differs from `label`, as (class, key)
    /// pairs in ascending class order, oldest first within a class.
    pub fn negatives_for(&self, label: usize) -> Result<Vec<(usize, Embedding)>> {
        self.check_class(label)?;
        let mut out = Vec::new();
        for (class, buf) in self.buffers.iter().enumerate() {
            if class == label {
                continue;
            }
            for key in buf {
                out.push((class, key.clone()));
            }
        }
        Ok(out)
    }

    /// Borrowing variant of [`negatives_for`](Self::negatives_for), for hot
    /// paths that only need to read the keys.
    pub fn iter_excluding(&self, label: usize) -> impl Iterator<Item = (usize, &Embedding)> {
        self.buffers
            .iter()
            .enumerate()
            .filter(move |(class, _)| *class != label)
            .flat_map(|(class, buf)| buf.iter().map(move |k| (class, k)))
    }

    /// Every stored key across all classes, ascending class order.
    pub fn iter_all(&self) -> impl Iterator<Item = (usize, &Embedding)> {
        self.buffers
            .iter()
            .enumerate()
            .flat_map(|(class, buf)| buf.iter().map(move |k| (class, k)))
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        QueueSnapshot {
            dim: self.dim,
            per_class: self
                .buffers
                .iter()
                .map(|b| b.iter().cloned().collect())
                .collect(),
        }
    }

    /// Rebuild a queue from a snapshot, used when loading checkpoints.
    pub fn from_snapshot(snapshot: QueueSnapshot, per_class_capacity: usize) -> Result<Self> {
        if per_class_capacity == 0 {
            return Err(Error::InvalidConfig(
                "per-class capacity must be > 0".into(),
            ));
        }
        if snapshot.per_class.is_empty() {
            return Err(Error::InvalidConfig(
                "queue needs at least one class".into(),
            ));
        }
        for keys in &snapshot.per_class {
            if keys.len() > per_class_capacity {
                return Err(Error::InvalidState(format!(
                    "snapshot holds {} keys in one class, capacity is {}",
                    keys.len(),
                    per_class_capacity
                )));
            }
            for key in keys {
                if key.dim() != snapshot.dim {
                    return Err(Error::ShapeMismatch(format!(
                        "snapshot key dim {} does not match queue dim {}",
                        key.dim(),
                        snapshot.dim
                    )));
                }
            }
        }
        Ok(LesionQueue {
            dim: snapshot.dim,
            per_class_capacity,
            buffers: snapshot
                .per_class
                .into_iter()
                .map(VecDeque::from)
                .collect(),
        })
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.buffers.len() {
            return Err(Error::InvalidClass {
                class,
                num_classes: self.buffers.len(),
            });
        }
        Ok(())
    }
}

impl QueueSnapshot {
    pub fn new(dim: usize, per_class: Vec<Vec<Embedding>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("queue entry dim must be > 0".into()));
        }
        if per_class.is_empty() {
            return Err(Error::InvalidConfig(
                "queue needs at least one class".into(),
            ));
        }
        for keys in &per_class {
            for key in keys {
                if key.dim() != dim {
                    return Err(Error::ShapeMismatch(format!(
                        "snapshot key dim {} does not match queue dim {dim}",
                        key.dim()
                    )));
                }
            }
        }
        Ok(QueueSnapshot { dim, per_class })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn class_keys(&self, class: usize) -> &[Embedding] {
        &self.per_class[class]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.per_class.iter().map(|k| k.len()).collect()
    }

    pub fn total(&self) -> usize {
        self.per_class.iter().map(|k| k.len()).sum()
    }

    /// Flat view in the canonical order: ascending class, oldest first.
    pub fn iter_flat(&self) -> impl Iterator<Item = (usize, usize, &Embedding)> {
        self.per_class
            .iter()
            .enumerate()
            .flat_map(|(class, keys)| {
                keys.iter().enumerate().map(move |(slot, k)| (class, slot, k))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::norm;

    fn unit(tag: u64, dim: usize) -> Embedding {
        let v: Vec<f64> = (0..dim)
            .map(|i| ((tag as f64 + 1.0) * (i as f64 + 0.5)).sin() + 0.01)
            .collect();
        l2_normalize(&v).unwrap()
    }

    #[test]
    fn capacity_splits_by_floor() {
        let q = LesionQueue::new(3, 10, 4, QueueInit::Empty).unwrap();
        assert_eq!(q.per_class_capacity(), 3);
        assert_eq!(q.num_classes(), 3);
        assert_eq!(q.total_len(), 0);
    }

    #[test]
    fn construction_rejects_degenerate_shapes() {
        assert!(matches!(
            LesionQueue::new(0, 10, 4, QueueInit::Empty),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            LesionQueue::new(3, 10, 0, QueueInit::Empty),
            Err(Error::InvalidConfig(_))
        ));
        // 2 slots across 3 classes floors to zero per class
        assert!(matches!(
            LesionQueue::new(3, 2, 4, QueueInit::Empty),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn enqueue_validates_class_dim_and_norm() {
        let mut q = LesionQueue::new(2, 4, 4, QueueInit::Empty).unwrap();
        assert!(matches!(
            q.enqueue(2, unit(0, 4)),
            Err(Error::InvalidClass { class: 2, num_classes: 2 })
        ));
        assert!(matches!(
            q.enqueue(0, unit(0, 3)),
            Err(Error::ShapeMismatch(_))
        ));
        q.enqueue(0, unit(0, 4)).unwrap();
        assert_eq!(q.len(0).unwrap(), 1);
        assert_eq!(q.len(1).unwrap(), 0);
    }

    #[test]
    fn eviction_is_fifo_and_per_class() {
        let mut q = LesionQueue::new(2, 4, 4, QueueInit::Empty).unwrap();
        for tag in 0..5 {
            q.enqueue(0, unit(tag, 4)).unwrap();
        }
        q.enqueue(1, unit(100, 4)).unwrap();
        // class 0 holds the last two of five; class 1 is untouched
        assert_eq!(q.len(0).unwrap(), 2);
        let snap = q.snapshot();
        assert_eq!(snap.class_keys(0)[0], unit(3, 4));
        assert_eq!(snap.class_keys(0)[1], unit(4, 4));
        assert_eq!(snap.class_keys(1), &[unit(100, 4)]);
    }

    #[test]
    fn negatives_exclude_the_label_class() {
        let mut q = LesionQueue::new(3, 6, 4, QueueInit::Empty).unwrap();
        q.enqueue(0, unit(1, 4)).unwrap();
        q.enqueue(1, unit(2, 4)).unwrap();
        q.enqueue(1, unit(3, 4)).unwrap();
        q.enqueue(2, unit(4, 4)).unwrap();
        let negs = q.negatives_for(1).unwrap();
        let classes: Vec<usize> = negs.iter().map(|(c, _)| *c).collect();
        assert_eq!(classes, vec![0, 2]);
        assert_eq!(negs[0].1, unit(1, 4));
        assert_eq!(negs[1].1, unit(4, 4));
        // borrowing iterator agrees
        let borrowed: Vec<(usize, Embedding)> = q
            .iter_excluding(1)
            .map(|(c, k)| (c, k.clone()))
            .collect();
        assert_eq!(borrowed, negs);
        assert!(q.negatives_for(3).is_err());
    }

    #[test]
    fn random_unit_init_fills_every_slot() {
        let q = LesionQueue::new(3, 9, 8, QueueInit::RandomUnit { seed: 42 }).unwrap();
        assert_eq!(q.total_len(), 9);
        assert!((q.fill_fraction() - 1.0).abs() < 1e-15);
        for (_, key) in q.iter_all() {
            assert!((norm(key.values()) - 1.0).abs() < 1e-10);
        }
        let again = LesionQueue::new(3, 9, 8, QueueInit::RandomUnit { seed: 42 }).unwrap();
        assert_eq!(q.snapshot().iter_flat().count(), 9);
        for ((_, _, a), (_, _, b)) in q.snapshot().iter_flat().zip(again.snapshot().iter_flat()) {
            assert_eq!(a.values(), b.values());
        }
        let other = LesionQueue::new(3, 9, 8, QueueInit::RandomUnit { seed: 43 }).unwrap();
        let same = q
            .snapshot()
            .iter_flat()
            .zip(other.snapshot().iter_flat())
            .all(|((_, _, a), (_, _, b))| a.values() == b.values());
        assert!(!same, "different seeds should give different contents");
    }

    #[test]
    fn snapshot_round_trips_through_from_snapshot() {
        let mut q = LesionQueue::new(2, 6, 4, QueueInit::Empty).unwrap();
        q.enqueue(0, unit(7, 4)).unwrap();
        q.enqueue(1, unit(8, 4)).unwrap();
        let rebuilt = LesionQueue::from_snapshot(q.snapshot(), 3).unwrap();
        assert_eq!(rebuilt.per_class_capacity(), 3);
        assert_eq!(rebuilt.snapshot().class_keys(0), q.snapshot().class_keys(0));
        assert_eq!(rebuilt.snapshot().class_keys(1), q.snapshot().class_keys(1));
        // a snapshot larger than the declared capacity is rejected
        let mut big = LesionQueue::new(1, 3, 4, QueueInit::Empty).unwrap();
        for tag in 0..3 {
            big.enqueue(0, unit(tag, 4)).unwrap();
        }
        assert!(matches!(
            LesionQueue::from_snapshot(big.snapshot(), 2),
            Err(Error::InvalidState(_))
        ));
    }

    #[test]
    fn flat_iteration_order_is_class_then_age() {
        let mut q = LesionQueue::new(2, 4, 4, QueueInit::Empty).unwrap();
        q.enqueue(1, unit(0, 4)).unwrap();
        q.enqueue(0, unit(1, 4)).unwrap();
        q.enqueue(1, unit(2, 4)).unwrap();
        let snap = q.snapshot();
        let order: Vec<(usize, usize)> =
            snap.iter_flat().map(|(c, s, _)| (c, s)).collect();
        assert_eq!(order, vec![(0, 0), (1, 0), (1, 1)]);
    }
}
