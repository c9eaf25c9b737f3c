//! Downstream evaluation of frozen representations: backbone feature
//! extraction, a linear probe, a cosine k-NN probe, slide-level bag
//! classifiers (mean pooling and gated attention pooling), and the metric
//! computation behind every report (accuracy, macro one-vs-rest AUC,
//! macro F1).
//!
//! Everything here is deterministic: probes start from fixed
//! initializations, gradient descent is full-batch, reductions run in fixed
//! order, and reports contain no timestamps.

use rayon::prelude::*;

use crate::config::{EvalSection, Pooling};
use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::math::{kahan_sum, softmax, Matrix};
use crate::model::ModelParams;

/// Seed-stream tag for attention-pooling initialization; tags 2–5 belong to
/// the trainer.
const STREAM_ATTENTION: u64 = 6;

/// Hidden width of the gated attention head.
const ATTENTION_DIM: usize = 16;

/// Per-class slice of an evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: usize,
    /// True instances of this class.
    pub support: usize,
    /// Instances predicted as this class.
    pub predicted: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// One-vs-rest AUC; absent when the class lacks positives or negatives.
    pub auc: Option<f64>,
}

/// The rendered result of one evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    /// Which probe produced this; callers may overwrite with the run mode.
    pub mode: String,
    pub config_fingerprint: String,
    pub total: usize,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Classes whose AUC is undefined (no positives or no negatives).
    pub auc_excluded: Vec<usize>,
}

impl EvaluationReport {
    /// Plain-text rendering: one `key = value` line per metric, then one
    /// line per class. Deliberately timestamp-free so identical evaluations
    /// render byte-identically.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("# evaluation\n");
        out.push_str(&format!("mode = {}\n", self.mode));
        out.push_str(&format!("config = {}\n", self.config_fingerprint));
        out.push_str(&format!("samples = {}\n", self.total));
        out.push_str(&format!("accuracy = {:.6}\n", self.accuracy));
        out.push_str(&format!("macro_auc = {:.6}\n", self.macro_auc));
        out.push_str(&format!("macro_f1 = {:.6}\n", self.macro_f1));
        let excluded = if self.auc_excluded.is_empty() {
            "none".to_string()
        } else {
            self.auc_excluded
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        out.push_str(&format!("auc_excluded_classes = {excluded}\n"));
        for c in &self.per_class {
            let auc = c
                .auc
                .map_or_else(|| "undefined".to_string(), |a| format!("{a:.6}"));
            out.push_str(&format!(
                "class {}: support={} predicted={} precision={:.6} recall={:.6} \
                 f1={:.6} auc={auc}\n",
                c.class, c.support, c.predicted, c.precision, c.recall, c.f1
            ));
        }
        out
    }
}

/// Backbone features (pre-projector) for a set of patches; the projector
/// never touches these.
pub fn extract_features(params: &ModelParams, patches: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    patches
        .par_iter()
        .map(|x| params.backbone_features(x))
        .collect()
}

// ---------------------------------------------------------------------------
// shared softmax classifier (linear probe, mean-pool bag head)

struct SoftmaxClassifier {
    /// num_classes × feature_dim.
    w: Matrix,
    b: Vec<f64>,
}

impl SoftmaxClassifier {
    fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut logits = self.w.matvec(x);
        for (l, b) in logits.iter_mut().zip(&self.b) {
            *l += b;
        }
        Ok(softmax(&logits)?.values().to_vec())
    }
}

/// Full-batch gradient descent from a zero initialization; returns the
/// classifier and the per-epoch training losses.
fn train_softmax_classifier(
    x: &[Vec<f64>],
    y: &[usize],
    num_classes: usize,
    lr: f64,
    epochs: u32,
) -> Result<(SoftmaxClassifier, Vec<f64>)> {
    let dim = x[0].len();
    let n = x.len() as f64;
    let mut clf = SoftmaxClassifier {
        w: Matrix::zeros(num_classes, dim),
        b: vec![0.0; num_classes],
    };
    let mut losses = Vec::with_capacity(epochs as usize);
    for _ in 0..epochs {
        let mut grad_w = Matrix::zeros(num_classes, dim);
        let mut grad_b = vec![0.0; num_classes];
        let mut row_losses = Vec::with_capacity(x.len());
        for (xi, &yi) in x.iter().zip(y) {
            let p = clf.scores(xi)?;
            row_losses.push(-p[yi].max(f64::MIN_POSITIVE).ln());
            for c in 0..num_classes {
                let d = (p[c] - usize::from(c == yi) as f64) / n;
                grad_b[c] += d;
                for (g, xv) in grad_w.row_mut(c).iter_mut().zip(xi) {
                    *g += d * xv;
                }
            }
        }
        losses.push(kahan_sum(row_losses.iter().copied()) / n);
        for (wv, gv) in clf.w.data_mut().iter_mut().zip(grad_w.data()) {
            *wv -= lr * gv;
        }
        for (bv, gv) in clf.b.iter_mut().zip(&grad_b) {
            *bv -= lr * gv;
        }
    }
    Ok((clf, losses))
}

fn check_probe_inputs(
    train: &[Vec<f64>],
    train_y: &[usize],
    test: &[Vec<f64>],
    test_y: &[usize],
) -> Result<usize> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput(
            "probe needs non-empty train and test sets".into(),
        ));
    }
    if train.len() != train_y.len() || test.len() != test_y.len() {
        return Err(Error::ShapeMismatch(format!(
            "features/labels length mismatch: {}/{} train, {}/{} test",
            train.len(),
            train_y.len(),
            test.len(),
            test_y.len()
        )));
    }
    let dim = train[0].len();
    if train.iter().chain(test).any(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch(
            "feature rows have inconsistent dimensions".into(),
        ));
    }
    let num_classes = train_y.iter().chain(test_y).max().unwrap() + 1;
    Ok(num_classes)
}

/// Multinomial logistic regression on frozen features.
pub fn linear_probe(
    train: &[Vec<f64>],
    train_y: &[usize],
    test: &[Vec<f64>],
    test_y: &[usize],
    config: &EvalSection,
) -> Result<EvaluationReport> {
    let num_classes = check_probe_inputs(train, train_y, test, test_y)?;
    let mut seen = vec![false; num_classes];
    for &y in train_y {
        seen[y] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::InvalidInput(
            "linear probe needs at least 2 classes in the training set".into(),
        ));
    }
    let (clf, losses) = train_softmax_classifier(
        train,
        train_y,
        num_classes,
        config.probe_learning_rate,
        config.probe_epochs,
    )?;
    log::debug!(
        "linear probe: train loss {:.6} -> {:.6}",
        losses.first().copied().unwrap_or(f64::NAN),
        losses.last().copied().unwrap_or(f64::NAN)
    );
    let scores: Vec<Vec<f64>> = test.iter().map(|x| clf.scores(x)).collect::<Result<_>>()?;
    let predicted: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let mut report = compute_metrics(test_y, &predicted, &scores)?;
    report.mode = "linear-probe".into();
    Ok(report)
}

// ---------------------------------------------------------------------------
// cosine k-NN probe

/// Cosine similarity, with zero-norm vectors treated as similar to nothing.
fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na < 1e-24 || nb < 1e-24 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Majority vote over the k cosine-nearest training rows. Vote ties go to
/// the tied class with the smallest summed distance, then the lowest index.
pub fn knn_probe(
    train: &[Vec<f64>],
    train_y: &[usize],
    test: &[Vec<f64>],
    test_y: &[usize],
    k: usize,
) -> Result<EvaluationReport> {
    let num_classes = check_probe_inputs(train, train_y, test, test_y)?;
    if k == 0 || k > train.len() {
        return Err(Error::InvalidInput(format!(
            "k = {k} must be in 1..={}",
            train.len()
        )));
    }

    let votes: Vec<(usize, Vec<f64>)> = test
        .par_iter()
        .map(|x| {
            let mut dist: Vec<(f64, usize)> = train
                .iter()
                .enumerate()
                .map(|(i, t)| (1.0 - cosine_similarity(x, t), i))
                .collect();
            // ties at the k boundary admit the lower training index
            dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut count = vec![0usize; num_classes];
            let mut summed = vec![0.0f64; num_classes];
            for &(d, i) in &dist[..k] {
                count[train_y[i]] += 1;
                summed[train_y[i]] += d;
            }
            let best = (0..num_classes)
                .max_by(|&a, &b| {
                    count[a]
                        .cmp(&count[b])
                        .then_with(|| summed[b].partial_cmp(&summed[a]).unwrap())
                        .then_with(|| b.cmp(&a))
                })
                .unwrap();
            let shares = count.iter().map(|&c| c as f64 / k as f64).collect();
            (best, shares)
        })
        .collect();

    let predicted: Vec<usize> = votes.iter().map(|(b, _)| *b).collect();
    let scores: Vec<Vec<f64>> = votes.into_iter().map(|(_, s)| s).collect();
    let mut report = compute_metrics(test_y, &predicted, &scores)?;
    report.mode = "knn".into();
    Ok(report)
}

// ---------------------------------------------------------------------------
// slide-level bag classifiers

/// One slide's patch features plus its label.
#[derive(Clone, Debug)]
pub struct Bag {
    pub features: Vec<Vec<f64>>,
    pub label: usize,
}

/// Classify whole slides from their patch features, by mean pooling or by a
/// learned gated-attention weighted average.
pub fn bag_classify(
    train: &[Bag],
    test: &[Bag],
    pooling: Pooling,
    config: &EvalSection,
    seed: u64,
) -> Result<EvaluationReport> {
    check_bags(train, test)?;
    let num_classes = train
        .iter()
        .chain(test)
        .map(|b| b.label)
        .max()
        .unwrap()
        + 1;
    let mut seen = vec![false; num_classes];
    for b in train {
        seen[b.label] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::InvalidInput(
            "bag classifier needs at least 2 classes in the training set".into(),
        ));
    }

    let (mode, predicted, scores) = match pooling {
        Pooling::Mean => {
            let pool = |bags: &[Bag]| -> Vec<Vec<f64>> {
                bags.iter().map(|b| mean_pool(&b.features)).collect()
            };
            let train_x = pool(train);
            let labels: Vec<usize> = train.iter().map(|b| b.label).collect();
            let (clf, _) = train_softmax_classifier(
                &train_x,
                &labels,
                num_classes,
                config.probe_learning_rate,
                config.probe_epochs,
            )?;
            let scores: Vec<Vec<f64>> = pool(test)
                .iter()
                .map(|x| clf.scores(x))
                .collect::<Result<_>>()?;
            let predicted: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
            ("bag-mean", predicted, scores)
        }
        Pooling::Attention => {
            let dim = train[0].features[0].len();
            let mut params = AttentionParams::init(
                dim,
                ATTENTION_DIM,
                num_classes,
                mix_seed(&[seed, STREAM_ATTENTION]),
            );
            for _ in 0..config.probe_epochs {
                let (_, grads) = attention_loss_and_grads(&params, train)?;
                params.add_scaled(&grads, -config.probe_learning_rate);
            }
            let scores: Vec<Vec<f64>> = test
                .iter()
                .map(|b| {
                    let (_, pooled) = attention_forward(&params, &b.features)?;
                    params.classifier_scores(&pooled)
                })
                .collect::<Result<_>>()?;
            let predicted: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
            ("bag-attention", predicted, scores)
        }
    };

    let truth: Vec<usize> = test.iter().map(|b| b.label).collect();
    let mut report = compute_metrics(&truth, &predicted, &scores)?;
    report.mode = mode.into();
    Ok(report)
}

fn check_bags(train: &[Bag], test: &[Bag]) -> Result<()> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput(
            "bag classifier needs non-empty train and test sets".into(),
        ));
    }
    let dim = match train[0].features.first() {
        Some(f) => f.len(),
        None => {
            return Err(Error::InvalidInput(
                "every slide needs at least one patch".into(),
            ))
        }
    };
    for bag in train.iter().chain(test) {
        if bag.features.is_empty() {
            return Err(Error::InvalidInput(
                "every slide needs at least one patch".into(),
            ));
        }
        if bag.features.iter().any(|f| f.len() != dim) {
            return Err(Error::ShapeMismatch(
                "bag feature rows have inconsistent dimensions".into(),
            ));
        }
    }
    Ok(())
}

fn mean_pool(features: &[Vec<f64>]) -> Vec<f64> {
    let dim = features[0].len();
    let mut out = vec![0.0; dim];
    for f in features {
        for (o, v) in out.iter_mut().zip(f) {
            *o += v;
        }
    }
    let n = features.len() as f64;
    for o in &mut out {
        *o /= n;
    }
    out
}

/// Parameters of the gated attention pooler and its linear classifier:
/// attention logit a_i = wᵀ(tanh(V·h_i) ⊙ σ(U·h_i)).
struct AttentionParams {
    v: Matrix,
    u: Matrix,
    w: Vec<f64>,
    /// Classifier over the pooled feature.
    wc: Matrix,
    bc: Vec<f64>,
}

impl AttentionParams {
    /// The attention head must start off-zero: at zero, tanh kills every
    /// gradient path through it. The classifier starts at zero as usual.
    fn init(dim: usize, attn_dim: usize, num_classes: usize, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let bound_in = 1.0 / (dim as f64).sqrt();
        let bound_attn = 1.0 / (attn_dim as f64).sqrt();
        let draw = |bound: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            rng.random_range(-bound..=bound)
        };
        let v = Matrix::from_fn(attn_dim, dim, |_, _| draw(bound_in, &mut rng));
        let u = Matrix::from_fn(attn_dim, dim, |_, _| draw(bound_in, &mut rng));
        let w = (0..attn_dim).map(|_| draw(bound_attn, &mut rng)).collect();
        AttentionParams {
            v,
            u,
            w,
            wc: Matrix::zeros(num_classes, dim),
            bc: vec![0.0; num_classes],
        }
    }

    fn zeros_like(&self) -> Self {
        AttentionParams {
            v: Matrix::zeros(self.v.rows(), self.v.cols()),
            u: Matrix::zeros(self.u.rows(), self.u.cols()),
            w: vec![0.0; self.w.len()],
            wc: Matrix::zeros(self.wc.rows(), self.wc.cols()),
            bc: vec![0.0; self.bc.len()],
        }
    }

    fn add_scaled(&mut self, other: &AttentionParams, scale: f64) {
        for (a, b) in self.v.data_mut().iter_mut().zip(other.v.data()) {
            *a += scale * b;
        }
        for (a, b) in self.u.data_mut().iter_mut().zip(other.u.data()) {
            *a += scale * b;
        }
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            *a += scale * b;
        }
        for (a, b) in self.wc.data_mut().iter_mut().zip(other.wc.data()) {
            *a += scale * b;
        }
        for (a, b) in self.bc.iter_mut().zip(&other.bc) {
            *a += scale * b;
        }
    }

    fn classifier_scores(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        let mut logits = self.wc.matvec(pooled);
        for (l, b) in logits.iter_mut().zip(&self.bc) {
            *l += b;
        }
        Ok(softmax(&logits)?.values().to_vec())
    }

    #[cfg(test)]
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.v.data());
        out.extend_from_slice(self.u.data());
        out.extend_from_slice(&self.w);
        out.extend_from_slice(self.wc.data());
        out.extend_from_slice(&self.bc);
        out
    }

    #[cfg(test)]
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        for v in self.v.data_mut() {
            *v = it.next().unwrap();
        }
        for v in self.u.data_mut() {
            *v = it.next().unwrap();
        }
        for v in &mut self.w {
            *v = it.next().unwrap();
        }
        for v in self.wc.data_mut() {
            *v = it.next().unwrap();
        }
        for v in &mut self.bc {
            *v = it.next().unwrap();
        }
        assert!(it.next().is_none());
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Attention weights and pooled feature of one bag.
fn attention_forward(params: &AttentionParams, features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let logits: Vec<f64> = features
        .iter()
        .map(|h| {
            let t = params.v.matvec(h);
            let s = params.u.matvec(h);
            params
                .w
                .iter()
                .zip(t.iter().zip(&s))
                .map(|(w, (t, s))| w * t.tanh() * sigmoid(*s))
                .sum()
        })
        .collect();
    let alpha = softmax(&logits)?.values().to_vec();
    let dim = features[0].len();
    let mut pooled = vec![0.0; dim];
    for (a, h) in alpha.iter().zip(features) {
        for (p, v) in pooled.iter_mut().zip(h) {
            *p += a * v;
        }
    }
    Ok((alpha, pooled))
}

/// Mean cross-entropy over the bags and its exact gradient.
fn attention_loss_and_grads(
    params: &AttentionParams,
    bags: &[Bag],
) -> Result<(f64, AttentionParams)> {
    let mut grads = params.zeros_like();
    let n = bags.len() as f64;
    let mut losses = Vec::with_capacity(bags.len());
    for bag in bags {
        let (alpha, pooled) = attention_forward(params, &bag.features)?;
        let p = params.classifier_scores(&pooled)?;
        losses.push(-p[bag.label].max(f64::MIN_POSITIVE).ln());

        // classifier layer
        let d_logits: Vec<f64> = (0..p.len())
            .map(|c| (p[c] - usize::from(c == bag.label) as f64) / n)
            .collect();
        for (c, d) in d_logits.iter().enumerate() {
            grads.bc[c] += d;
            for (g, x) in grads.wc.row_mut(c).iter_mut().zip(&pooled) {
                *g += d * x;
            }
        }
        let d_pooled = params.wc.matvec_transpose(&d_logits);

        // softmax over attention logits
        let d_alpha: Vec<f64> = bag
            .features
            .iter()
            .map(|h| h.iter().zip(&d_pooled).map(|(x, d)| x * d).sum())
            .collect();
        let inner: f64 = alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let d_logit: Vec<f64> = alpha
            .iter()
            .zip(&d_alpha)
            .map(|(a, d)| a * (d - inner))
            .collect();

        // gated attention head
        for (h, dl) in bag.features.iter().zip(&d_logit) {
            let t_pre = params.v.matvec(h);
            let s_pre = params.u.matvec(h);
            for l in 0..params.w.len() {
                let t = t_pre[l].tanh();
                let s = sigmoid(s_pre[l]);
                grads.w[l] += dl * t * s;
                let dt = dl * params.w[l] * s * (1.0 - t * t);
                let ds = dl * params.w[l] * t * s * (1.0 - s);
                for (g, x) in grads.v.row_mut(l).iter_mut().zip(h) {
                    *g += dt * x;
                }
                for (g, x) in grads.u.row_mut(l).iter_mut().zip(h) {
                    *g += ds * x;
                }
            }
        }
    }
    Ok((kahan_sum(losses.iter().copied()) / n, grads))
}

// ---------------------------------------------------------------------------
// metrics

fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// One-vs-rest AUC by the rank statistic; tied scores share their average
/// rank, which counts each tied positive/negative pair as half. `None` when
/// either class is empty.
pub fn rank_auc(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; a tied block shares the block's mean rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if positive[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_pos = n_pos as f64;
    Some((rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Accuracy, macro one-vs-rest AUC (rank-based, undefined classes excluded
/// and flagged), and macro F1 (0/0 ≡ 0) from truth, predictions, and
/// per-class scores.
pub fn compute_metrics(
    truth: &[usize],
    predicted: &[usize],
    scores: &[Vec<f64>],
) -> Result<EvaluationReport> {
    if truth.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    if truth.len() != predicted.len() || truth.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "metrics inputs disagree on length: {} truth, {} predicted, {} score rows",
            truth.len(),
            predicted.len(),
            scores.len()
        )));
    }
    let num_classes = scores[0].len();
    if num_classes == 0 || scores.iter().any(|s| s.len() != num_classes) {
        return Err(Error::ShapeMismatch(
            "score rows must share one non-zero width".into(),
        ));
    }
    if let Some(&bad) = truth.iter().chain(predicted).find(|&&l| l >= num_classes) {
        return Err(Error::InvalidClass {
            class: bad,
            num_classes,
        });
    }
    if scores
        .iter()
        .any(|row| row.iter().any(|s| !s.is_finite()))
    {
        return Err(Error::InvalidInput("scores must be finite".into()));
    }

    let n = truth.len();
    let correct = truth
        .iter()
        .zip(predicted)
        .filter(|(t, p)| t == p)
        .count();

    let mut per_class = Vec::with_capacity(num_classes);
    let mut auc_excluded = Vec::new();
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let support = truth.iter().filter(|&&t| t == c).count();
        let predicted_count = predicted.iter().filter(|&&p| p == c).count();
        let tp = truth
            .iter()
            .zip(predicted)
            .filter(|&(&t, &p)| t == c && p == c)
            .count();
        let div = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = div(tp, predicted_count);
        let recall = div(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        f1_sum += f1;

        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let class_scores: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        let auc = rank_auc(&positive, &class_scores);
        match auc {
            Some(a) => {
                auc_sum += a;
                auc_count += 1;
            }
            None => auc_excluded.push(c),
        }
        per_class.push(ClassMetrics {
            class: c,
            support,
            predicted: predicted_count,
            precision,
            recall,
            f1,
            auc,
        });
    }
    if auc_count == 0 {
        return Err(Error::InvalidInput(
            "no class has both positive and negative examples; AUC undefined".into(),
        ));
    }

    Ok(EvaluationReport {
        mode: "unspecified".into(),
        config_fingerprint: "unspecified".into(),
        total: n,
        accuracy: correct as f64 / n as f64,
        macro_auc: auc_sum / auc_count as f64,
        macro_f1: f1_sum / num_classes as f64,
        per_class,
        auc_excluded,
    })
}
