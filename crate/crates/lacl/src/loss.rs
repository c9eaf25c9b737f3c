//! Temperature-scaled contrastive losses over a query, its positive key, and
//! a set of negative keys, together with exact gradients with respect to the
//! query vector.
//!
//! Two denominators are supported. The standard form scores the positive
//! against positive-plus-negatives, so the loss is a true negative
//! log-probability and stays non-negative. The negatives-only form drops the
//! positive from the denominator; it can go negative when the positive
//! similarity dominates, and is kept selectable for comparison runs.

use crate::error::{Error, Result};
use crate::math::{dot, kahan_sum, Embedding};
use crate::queue::LesionQueue;

/// Loss value and gradient with respect to the query.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_q: Vec<f64>,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidInput(format!(
            "temperature {tau} must be finite and > 0"
        )));
    }
    Ok(())
}

fn check_dims(q: &[f64], k_plus: &Embedding) -> Result<()> {
    if q.is_empty() {
        return Err(Error::InvalidInput("query vector is empty".into()));
    }
    if q.len() != k_plus.dim() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} does not match positive key dim {}",
            q.len(),
            k_plus.dim()
        )));
    }
    Ok(())
}

/// InfoNCE with the positive in the denominator:
/// L = -log( exp(q.k+ / tau) / (exp(q.k+ / tau) + sum_i exp(q.k_i / tau)) ).
pub fn info_nce(
    q: &[f64],
    k_plus: &Embedding,
    negatives: &[&Embedding],
    tau: f64,
) -> Result<LossOutput> {
    check_tau(tau)?;
    check_dims(q, k_plus)?;
    if negatives.is_empty() {
        return Err(Error::NoNegatives(
            "InfoNCE needs at least one negative key".into(),
        ));
    }
    for k in negatives {
        if k.dim() != q.len() {
            return Err(Error::ShapeMismatch(format!(
                "negative key dim {} does not match query dim {}",
                k.dim(),
                q.len()
            )));
        }
    }

    // logits over [positive, negatives...], stabilized by the running max
    let pos_logit = dot(q, k_plus) / tau;
    let neg_logits: Vec<f64> = negatives.iter().map(|k| dot(q, k) / tau).collect();
    let max = neg_logits.iter().copied().fold(pos_logit, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidInput("non-finite contrastive logit".into()));
    }
    let pos_exp = (pos_logit - max).exp();
    let neg_exps: Vec<f64> = neg_logits.iter().map(|l| (l - max).exp()).collect();
    let denom = pos_exp + kahan_sum(neg_exps.iter().copied());
    let loss = -(pos_logit - max) + denom.ln();

    // dL/dq = (1/tau) * ((p+ - 1) k+ + sum_i p_i k_i)
    let mut grad = vec![0.0; q.len()];
    let p_pos = pos_exp / denom;
    for (g, &kp) in grad.iter_mut().zip(k_plus.values()) {
        *g += (p_pos - 1.0) * kp;
    }
    for (k, e) in negatives.iter().zip(neg_exps) {
        let p = e / denom;
        for (g, &kn) in grad.iter_mut().zip(k.values()) {
            *g += p * kn;
        }
    }
    for g in &mut grad {
        *g /= tau;
    }
    Ok(LossOutput { loss, grad_q: grad })
}

/// InfoNCE scored only against negatives:
/// L = -q.k+ / tau + log sum_i exp(q.k_i / tau).
///
/// Without the positive term the denominator can be smaller than the
/// numerator's exponential, so this loss has no lower bound at zero.
pub fn info_nce_negatives_only(
    q: &[f64],
    k_plus: &Embedding,
    negatives: &[&Embedding],
    tau: f64,
) -> Result<LossOutput> {
    check_tau(tau)?;
    check_dims(q, k_plus)?;
    if negatives.is_empty() {
        return Err(Error::NoNegatives(
            "negatives-only InfoNCE needs at least one negative key".into(),
        ));
    }
    for k in negatives {
        if k.dim() != q.len() {
            return Err(Error::ShapeMismatch(format!(
                "negative key dim {} does not match query dim {}",
                k.dim(),
                q.len()
            )));
        }
    }

    let pos_logit = dot(q, k_plus) / tau;
    let neg_logits: Vec<f64> = negatives.iter().map(|k| dot(q, k) / tau).collect();
    let max = neg_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() || !pos_logit.is_finite() {
        return Err(Error::InvalidInput("non-finite contrastive logit".into()));
    }
    let neg_exps: Vec<f64> = neg_logits.iter().map(|l| (l - max).exp()).collect();
    let denom = kahan_sum(neg_exps.iter().copied());
    let loss = -pos_logit + max + denom.ln();

    // dL/dq = (1/tau) * (sum_i p_i k_i - k+), p over negatives only
    let mut grad = vec![0.0; q.len()];
    for (g, &kp) in grad.iter_mut().zip(k_plus.values()) {
        *g -= kp;
    }
    for (k, e) in negatives.iter().zip(neg_exps) {
        let p = e / denom;
        for (g, &kn) in grad.iter_mut().zip(k.values()) {
            *g += p * kn;
        }
    }
    for g in &mut grad {
        *g /= tau;
    }
    Ok(LossOutput { loss, grad_q: grad })
}

/// Contrastive loss where negatives are every queued key whose class differs
/// from the query's pseudo-label.
pub fn lesion_info_nce(
    q: &[f64],
    k_plus: &Embedding,
    label: usize,
    queue: &LesionQueue,
    tau: f64,
    include_positive_in_denominator: bool,
) -> Result<LossOutput> {
    if queue.dim() != k_plus.dim() {
        return Err(Error::ShapeMismatch(format!(
            "queue dim {} does not match key dim {}",
            queue.dim(),
            k_plus.dim()
        )));
    }
    let negatives: Vec<&Embedding> = queue.iter_excluding(label).map(|(_, k)| k).collect();
    if negatives.is_empty() {
        return Err(Error::NoNegatives(format!(
            "no queued keys outside class {label}"
        )));
    }
    if include_positive_in_denominator {
        info_nce(q, k_plus, &negatives, tau)
    } else {
        info_nce_negatives_only(q, k_plus, &negatives, tau)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_gradient, l2_normalize};
    use crate::queue::QueueInit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> Embedding {
        l2_normalize(v).unwrap()
    }

    #[test]
    fn symmetric_pair_gives_ln2() {
        // positive and negative tie, so the positive's probability is 1/2
        let q = [1.0, 0.0];
        let kp = unit(&[0.0, 1.0]);
        let kn = unit(&[0.0, -1.0]);
        let out = info_nce(&q, &kp, &[&kn], 1.0).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn aligned_positive_orthogonal_negative() {
        // logits are [1, 0]; the positive's probability is e/(e+1)
        let q = [1.0, 0.0];
        let kp = unit(&[1.0, 0.0]);
        let kn = unit(&[0.0, 1.0]);
        let out = info_nce(&q, &kp, &[&kn], 1.0).unwrap();
        assert!((out.loss - 0.31326168751822284).abs() < 1e-15);
    }

    #[test]
    fn temperature_rescales_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = unit(&raw);
            let kp = unit(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let kn = unit(&(0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
            let cold = info_nce(q.values(), &kp, &[&kn], 0.5).unwrap();
            // tau = 0.5 equals doubling every similarity at tau = 1
            let q2: Vec<f64> = q.values().iter().map(|x| 2.0 * x).collect();
            let hot = info_nce(&q2, &kp, &[&kn], 1.0).unwrap();
            assert!((cold.loss - hot.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_form_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let dim = rng.random_range(2..8);
            let mk = |rng: &mut ChaCha8Rng| {
                unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
            };
            let q = mk(&mut rng);
            let kp = mk(&mut rng);
            let negs: Vec<Embedding> = (0..rng.random_range(1..6)).map(|_| mk(&mut rng)).collect();
            let refs: Vec<&Embedding> = negs.iter().collect();
            let out = info_nce(q.values(), &kp, &refs, 0.2).unwrap();
            assert!(out.loss >= 0.0, "loss went negative: {}", out.loss);
        }
    }

    #[test]
    fn negatives_only_form_can_go_negative() {
        let q = [1.0, 0.0];
        let kp = unit(&[1.0, 0.0]);
        let kn = unit(&[0.0, 1.0]);
        let out = info_nce_negatives_only(&q, &kp, &[&kn], 1.0).unwrap();
        // -1 + log(exp(0)) = -1
        assert!((out.loss - (-1.0)).abs() < 1e-15);
    }

    #[test]
    fn both_forms_agree_when_positive_term_is_added_back() {
        // exp(-L_std) = exp(pos) / (exp(pos) + S); exp(pos - L_only) relates
        // through S alone, so check via direct recomputation instead
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let dim = 5;
            let mk = |rng: &mut ChaCha8Rng| {
                unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
            };
            let q = mk(&mut rng);
            let kp = mk(&mut rng);
            let negs: Vec<Embedding> = (0..4).map(|_| mk(&mut rng)).collect();
            let refs: Vec<&Embedding> = negs.iter().collect();
            let tau = 0.3;
            let std = info_nce(q.values(), &kp, &refs, tau).unwrap();
            let only = info_nce_negatives_only(q.values(), &kp, &refs, tau).unwrap();
            let pos = dot(q.values(), &kp) / tau;
            let s_neg: f64 = refs.iter().map(|k| (dot(q.values(), k) / tau).exp()).sum();
            let expect_std = -pos + (pos.exp() + s_neg).ln();
            let expect_only = -pos + s_neg.ln();
            assert!((std.loss - expect_std).abs() < 1e-10);
            assert!((only.loss - expect_only).abs() < 1e-10);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for case in 0..20 {
            let dim = rng.random_range(2..7);
            let mk = |rng: &mut ChaCha8Rng| {
                unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
            };
            let q = mk(&mut rng);
            let kp = mk(&mut rng);
            let negs: Vec<Embedding> = (0..rng.random_range(1..5)).map(|_| mk(&mut rng)).collect();
            let refs: Vec<&Embedding> = negs.iter().collect();
            let tau = [1.0, 0.2, 0.07][case % 3];
            let include = case % 2 == 0;
            let f = |x: &[f64]| {
                let out = if include {
                    info_nce(x, &kp, &refs, tau)?
                } else {
                    info_nce_negatives_only(x, &kp, &refs, tau)?
                };
                Ok(out.loss)
            };
            let analytic = if include {
                info_nce(q.values(), &kp, &refs, tau).unwrap().grad_q
            } else {
                info_nce_negatives_only(q.values(), &kp, &refs, tau)
                    .unwrap()
                    .grad_q
            };
            let numeric = finite_diff_gradient(f, q.values(), 1e-6).unwrap();
            for (a, n) in analytic.iter().zip(&numeric) {
                let scale = a.abs().max(n.abs()).max(1e-4);
                assert!(
                    ((a - n) / scale).abs() < 1e-6,
                    "case {case}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn queue_variant_excludes_own_class() {
        let mut queue = LesionQueue::new(2, 4, 3, QueueInit::Empty).unwrap();
        let own = unit(&[1.0, 1.0, 0.0]);
        let other = unit(&[0.0, 1.0, -1.0]);
        queue.enqueue(0, own.clone()).unwrap();
        queue.enqueue(1, other.clone()).unwrap();
        let q = [1.0, 0.0, 0.0];
        let kp = unit(&[0.0, 0.0, 1.0]);
        let from_queue = lesion_info_nce(&q, &kp, 0, &queue, 0.2, true).unwrap();
        let direct = info_nce(&q, &kp, &[&other], 0.2).unwrap();
        assert_eq!(from_queue.loss, direct.loss);
        assert_eq!(from_queue.grad_q, direct.grad_q);
    }

    #[test]
    fn queue_variant_errors_without_negatives() {
        let mut queue = LesionQueue::new(2, 4, 3, QueueInit::Empty).unwrap();
        queue.enqueue(0, unit(&[1.0, 1.0, 0.0])).unwrap();
        let q = [1.0, 0.0, 0.0];
        let kp = unit(&[0.0, 0.0, 1.0]);
        // class 1 is empty, so a label-0 query has nothing to contrast with
        assert!(matches!(
            lesion_info_nce(&q, &kp, 0, &queue, 0.2, true),
            Err(Error::NoNegatives(_))
        ));
        // a label-1 query sees the class-0 key
        assert!(lesion_info_nce(&q, &kp, 1, &queue, 0.2, true).is_ok());
    }

    #[test]
    fn input_validation() {
        let kp = unit(&[1.0, 0.0]);
        let kn = unit(&[0.0, 1.0]);
        assert!(matches!(
            info_nce(&[1.0, 0.0], &kp, &[&kn], 0.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            info_nce(&[1.0, 0.0], &kp, &[&kn], -0.2),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            info_nce(&[1.0, 0.0, 0.0], &kp, &[&kn], 0.2),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            info_nce(&[1.0, 0.0], &kp, &[], 0.2),
            Err(Error::NoNegatives(_))
        ));
        let kn3 = unit(&[0.0, 1.0, 0.0]);
        assert!(matches!(
            info_nce(&[1.0, 0.0], &kp, &[&kn3], 0.2),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
