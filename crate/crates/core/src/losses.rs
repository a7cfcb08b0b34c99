//! Training objectives: cross-entropy, prototype-contrastive loss, their
//! combination for the known stage, the semantic-weighted alignment loss for
//! novel stages, and the pairwise binary cross-entropy used as an ablation.
//!
//! Each loss returns its scalar value together with analytic gradients;
//! every gradient is validated against central finite differences in the
//! acceptance suite.

use crate::error::{Error, Result};
use crate::numcore::Vector;

/// Default top-k width for rank statistics in the pairwise BCE loss.
pub const DEFAULT_TOPK: usize = 5;

/// Distances below this are treated as zero when differentiating a Euclidean
/// norm (the norm is not differentiable at coincident points).
const DISTANCE_EPS: f64 = 1e-12;

/// Probability clamp for the BCE logarithms.
const BCE_CLAMP: f64 = 1e-7;

/// Shared loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Contrastive/softmax temperature.
    pub tau: f64,
    /// Weight of the prototype-contrastive term in the known-stage loss.
    pub eta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 0.07, eta: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::invalid(format!("eta must be nonnegative, got {}", self.eta)));
        }
        Ok(())
    }
}

/// A loss value with its analytic gradients.
///
/// `batch_grads[i]` is the gradient with respect to the i-th input vector of
/// the batch — representations for the contrastive/alignment losses, logits
/// for cross-entropy, probability vectors for the pairwise BCE.
/// `prototype_grads`, when present, aligns index-wise with the prototype
/// list the loss was given.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub batch_grads: Vec<Vector>,
    pub prototype_grads: Option<Vec<Vector>>,
}

impl LossOutput {
    fn check_finite(self, what: &str) -> Result<Self> {
        let ok = self.value.is_finite()
            && self.batch_grads.iter().all(Vector::is_finite)
            && self
                .prototype_grads
                .iter()
                .flatten()
                .all(Vector::is_finite);
        if ok {
            Ok(self)
        } else {
            Err(Error::DegenerateInput(format!("{what} produced a non-finite value")))
        }
    }
}

fn check_batch(vectors: &[Vector], what: &str) -> Result<usize> {
    let Some(first) = vectors.first() else {
        return Err(Error::invalid(format!("{what}: empty batch")));
    };
    let dim = first.dim();
    if vectors.iter().any(|v| v.dim() != dim) {
        return Err(Error::invalid(format!("{what}: inconsistent dimensions in batch")));
    }
    Ok(dim)
}

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

/// Mean cross-entropy of softmax(logits) against integer labels.
/// `batch_grads` are gradients w.r.t. the logits: `(softmax - onehot) / N`.
pub fn ce_loss(logits: &[Vector], labels: &[usize]) -> Result<LossOutput> {
    let width = check_batch(logits, "ce_loss")?;
    if logits.len() != labels.len() {
        return Err(Error::invalid("ce_loss: logits/labels length mismatch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
        return Err(Error::invalid(format!(
            "ce_loss: label {bad} out of range for {width} logits"
        )));
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let mut batch_grads = Vec::with_capacity(logits.len());
    for (row, &label) in logits.iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        value += -(row[label] - max - total.ln());
        let mut grad = Vector::from_fn(row.dim(), |j| exps[j] / total / n);
        grad[label] -= 1.0 / n;
        batch_grads.push(grad);
    }
    LossOutput {
        value: value / n,
        batch_grads,
        prototype_grads: None,
    }
    .check_finite("ce_loss")
}

// ---------------------------------------------------------------------------
// Prototype-contrastive loss
// ---------------------------------------------------------------------------

/// Contrastive loss whose positive pair is (sample representation, its class
/// prototype). The denominator sums similarity against every prototype plus
/// every same-batch sample with a different label. Dot products are raw (no
/// normalization); gradients flow to representations and prototypes.
pub fn pcl_loss(
    reps: &[Vector],
    labels: &[usize],
    prototypes: &[Vector],
    config: &LossConfig,
) -> Result<LossOutput> {
    config.validate()?;
    let dim = check_batch(reps, "pcl_loss")?;
    if reps.len() != labels.len() {
        return Err(Error::invalid("pcl_loss: reps/labels length mismatch"));
    }
    if prototypes.is_empty() {
        return Err(Error::invalid("pcl_loss: no prototypes"));
    }
    if prototypes.iter().any(|p| p.dim() != dim) {
        return Err(Error::invalid("pcl_loss: prototype dimension mismatch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= prototypes.len()) {
        return Err(Error::invalid(format!(
            "pcl_loss: label {bad} has no prototype (only {})",
            prototypes.len()
        )));
    }

    let n = reps.len();
    let tau = config.tau;
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut batch_grads = vec![Vector::zeros(dim); n];
    let mut proto_grads = vec![Vector::zeros(dim); prototypes.len()];

    for i in 0..n {
        let zi = &reps[i];
        let yi = labels[i];
        // Denominator terms: one per prototype, one per different-label
        // sample. Stabilized by subtracting the max exponent argument.
        let proto_args: Vec<f64> = prototypes.iter().map(|p| zi.dot(p) / tau).collect();
        let negatives: Vec<usize> = (0..n).filter(|&j| labels[j] != yi).collect();
        let neg_args: Vec<f64> = negatives.iter().map(|&j| zi.dot(&reps[j]) / tau).collect();

        let max_arg = proto_args
            .iter()
            .chain(neg_args.iter())
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let proto_exp: Vec<f64> = proto_args.iter().map(|a| (a - max_arg).exp()).collect();
        let neg_exp: Vec<f64> = neg_args.iter().map(|a| (a - max_arg).exp()).collect();
        let denom: f64 = proto_exp.iter().sum::<f64>() + neg_exp.iter().sum::<f64>();

        // -log( exp(pos) / denom ) = -pos + max + ln(denom')
        value += -(proto_args[yi] - max_arg - denom.ln());

        // d/d(arg_k) = softmax weight - indicator(k is the positive).
        for (c, p) in prototypes.iter().enumerate() {
            let mut w = proto_exp[c] / denom;
            if c == yi {
                w -= 1.0;
            }
            batch_grads[i].add_scaled(p, scale * w / tau);
            proto_grads[c].add_scaled(zi, scale * w / tau);
        }
        for (idx, &j) in negatives.iter().enumerate() {
            let w = neg_exp[idx] / denom;
            batch_grads[i].add_scaled(&reps[j], scale * w / tau);
            batch_grads[j].add_scaled(zi, scale * w / tau);
        }
    }

    LossOutput {
        value: value * scale,
        batch_grads,
        prototype_grads: Some(proto_grads),
    }
    .check_finite("pcl_loss")
}

// ---------------------------------------------------------------------------
// Combined known-stage loss
// ---------------------------------------------------------------------------

/// Linear combination `ce + eta * pcl` of two loss outputs computed on the
/// same batch. With `eta = 0` the result equals the cross-entropy output
/// exactly.
pub fn combined_known_loss(ce: &LossOutput, pcl: &LossOutput, eta: f64) -> Result<LossOutput> {
    if ce.batch_grads.len() != pcl.batch_grads.len() {
        return Err(Error::invalid(
            "combined_known_loss: losses were computed on different batch sizes",
        ));
    }
    if eta == 0.0 {
        return Ok(ce.clone());
    }
    let batch_grads = ce
        .batch_grads
        .iter()
        .zip(&pcl.batch_grads)
        .map(|(a, b)| {
            if a.dim() != b.dim() {
                return Err(Error::invalid(
                    "combined_known_loss: gradient dimension mismatch",
                ));
            }
            let mut g = a.clone();
            g.add_scaled(b, eta);
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let prototype_grads = match (&ce.prototype_grads, &pcl.prototype_grads) {
        (None, None) => None,
        (Some(a), None) => Some(a.clone()),
        (None, Some(b)) => Some(b.iter().map(|g| g.scale(eta)).collect()),
        (Some(a), Some(b)) => {
            if a.len() != b.len() {
                return Err(Error::invalid(
                    "combined_known_loss: prototype gradient count mismatch",
                ));
            }
            Some(
                a.iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let mut g = x.clone();
                        g.add_scaled(y, eta);
                        g
                    })
                    .collect(),
            )
        }
    };
    Ok(LossOutput {
        value: ce.value + eta * pcl.value,
        batch_grads,
        prototype_grads,
    })
}

// ---------------------------------------------------------------------------
// Semantic-weighted loss
// ---------------------------------------------------------------------------

/// Mean over the batch of the softmax-weighted Euclidean distances between a
/// representation and every global prototype: the weight of prototype `c`
/// for sample `z` is `softmax_c(z . p_c / tau)`. Gradients flow to both the
/// representations and the prototypes.
pub fn swl_loss(reps: &[Vector], prototypes: &[Vector], config: &LossConfig) -> Result<LossOutput> {
    config.validate()?;
    let dim = check_batch(reps, "swl_loss")?;
    if prototypes.is_empty() {
        return Err(Error::invalid("swl_loss: empty prototype set"));
    }
    if prototypes.iter().any(|p| p.dim() != dim) {
        return Err(Error::invalid("swl_loss: prototype dimension mismatch"));
    }

    let n = reps.len();
    let tau = config.tau;
    let scale = 1.0 / n as f64;
    let mut value = 0.0;
    let mut batch_grads = vec![Vector::zeros(dim); n];
    let mut proto_grads = vec![Vector::zeros(dim); prototypes.len()];

    for (i, z) in reps.iter().enumerate() {
        let args: Vec<f64> = prototypes.iter().map(|p| z.dot(p) / tau).collect();
        let max_arg = args.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = args.iter().map(|a| (a - max_arg).exp()).collect();
        let total: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let dists: Vec<f64> = prototypes
            .iter()
            .map(|p| crate::numcore::euclidean_distance(z, p).expect("validated dims"))
            .collect();
        let sample_value: f64 = weights.iter().zip(&dists).map(|(w, d)| w * d).sum();
        value += sample_value;

        for (c, p) in prototypes.iter().enumerate() {
            let w = weights[c];
            let d = dists[c];
            // Distance part: w * (z - p)/d toward z, the negative toward p.
            if d > DISTANCE_EPS {
                let diff = z.sub(p);
                batch_grads[i].add_scaled(&diff, scale * w / d);
                proto_grads[c].add_scaled(&diff, -scale * w / d);
            }
            // Softmax-weight part: dw_c/dz = w_c (p_c - sum_j w_j p_j)/tau,
            // dw_c'/dp_c collected per prototype below.
            let coeff = scale * w * (d - sample_value) / tau;
            proto_grads[c].add_scaled(z, coeff);
        }
        // dz from the weight terms: (1/tau) * [sum_c w_c d_c p_c - value * zbar]
        let mut weighted_protos = Vector::zeros(dim);
        let mut zbar = Vector::zeros(dim);
        for (c, p) in prototypes.iter().enumerate() {
            weighted_protos.add_scaled(p, weights[c] * dists[c]);
            zbar.add_scaled(p, weights[c]);
        }
        batch_grads[i].add_scaled(&weighted_protos, scale / tau);
        batch_grads[i].add_scaled(&zbar, -scale * sample_value / tau);
    }

    LossOutput {
        value: value * scale,
        batch_grads,
        prototype_grads: Some(proto_grads),
    }
    .check_finite("swl_loss")
}

// ---------------------------------------------------------------------------
// Pairwise BCE (ablation)
// ---------------------------------------------------------------------------

/// Top-k coordinate index set of a representation, as a sorted list.
/// Ties break toward the lower index.
fn topk_indices(rep: &Vector, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..rep.dim()).collect();
    order.sort_by(|&a, &b| {
        rep[b]
            .partial_cmp(&rep[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut top = order[..k].to_vec();
    top.sort_unstable();
    top
}

/// Pairwise binary cross-entropy over all ordered sample pairs. The pair
/// target `s_ij` is 1 iff the top-k representation coordinate index sets of
/// the two samples are equal. Probabilities are head softmax outputs; their
/// inner products are clamped to `[1e-7, 1 - 1e-7]` before the logarithm.
/// `batch_grads` are gradients w.r.t. the probability vectors.
pub fn pairwise_bce_loss(
    novel_probs: &[Vector],
    reps: &[Vector],
    topk: usize,
) -> Result<LossOutput> {
    if novel_probs.len() < 2 {
        return Err(Error::invalid("pairwise_bce_loss: batch must have at least 2 samples"));
    }
    let prob_dim = check_batch(novel_probs, "pairwise_bce_loss")?;
    let rep_dim = check_batch(reps, "pairwise_bce_loss reps")?;
    if novel_probs.len() != reps.len() {
        return Err(Error::invalid("pairwise_bce_loss: probs/reps length mismatch"));
    }
    if topk == 0 || topk > rep_dim {
        return Err(Error::invalid(format!(
            "pairwise_bce_loss: topk {topk} out of range for {rep_dim}-dim reps"
        )));
    }
    let _ = prob_dim;

    let n = novel_probs.len();
    let scale = 1.0 / (n * n) as f64;
    let ranks: Vec<Vec<usize>> = reps.iter().map(|r| topk_indices(r, topk)).collect();

    let mut value = 0.0;
    let mut batch_grads = vec![Vector::zeros(prob_dim); n];
    for i in 0..n {
        for j in 0..n {
            let s = if ranks[i] == ranks[j] { 1.0 } else { 0.0 };
            let raw = novel_probs[i].dot(&novel_probs[j]);
            let q = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            value -= s * q.ln() + (1.0 - s) * (1.0 - q).ln();
            // The clamp zeroes the gradient outside its active range.
            if raw > BCE_CLAMP && raw < 1.0 - BCE_CLAMP {
                let dq = -(s / q - (1.0 - s) / (1.0 - q)) * scale;
                batch_grads[i].add_scaled(&novel_probs[j], dq);
                batch_grads[j].add_scaled(&novel_probs[i], dq);
            }
        }
    }

    LossOutput {
        value: value * scale,
        batch_grads,
        prototype_grads: None,
    }
    .check_finite("pairwise_bce_loss")
}
