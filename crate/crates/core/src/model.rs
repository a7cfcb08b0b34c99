//! MLP feature extractor plus a bias-free linear classifier whose rows double
//! as class prototypes. Forward/backward passes are hand-written; gradients
//! are checked against central finite differences in the test suites.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, RngStream, Vector};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `out = act(weights * in + bias)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Per-sample intermediates kept for the backward pass.
#[derive(Clone, Debug)]
struct SampleTrace {
    /// Input to each layer (activations of the previous layer).
    layer_inputs: Vec<Vector>,
    /// Pre-activation values of each layer.
    pre_activations: Vec<Vector>,
}

/// MLP producing representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub layers: Vec<Layer>,
}

fn uniform_fan_in(out_dim: usize, in_dim: usize, rng: &mut RngStream) -> Matrix {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data = (0..out_dim * in_dim)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    Matrix::new(out_dim, in_dim, data).expect("counted elements")
}

impl FeatureExtractor {
    /// Build with uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights and
    /// biases. Hidden layers use relu; the representation layer is linear.
    pub fn new(input_dim: usize, hidden: &[usize], rep_dim: usize, rng: &mut RngStream) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(rep_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let (in_dim, out_dim) = (dims[i], dims[i + 1]);
            layers.push(Layer {
                weights: uniform_fan_in(out_dim, in_dim, rng),
                // Zero bias init keeps representations free of a shared
                // offset component, which matters downstream: prototypes of
                // unseen classes must not collapse onto a common direction.
                bias: Vector::zeros(out_dim),
                activation: if i + 2 == dims.len() {
                    Activation::Identity
                } else {
                    Activation::Relu
                },
            });
        }
        FeatureExtractor { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    fn forward_traced(&self, x: &Vector) -> Result<(Vector, SampleTrace)> {
        if x.dim() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input dim {} does not match extractor input {}",
                x.dim(),
                self.input_dim()
            )));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for layer in &self.layers {
            layer_inputs.push(current.clone());
            let mut pre = layer.weights.matvec(&current);
            for (p, b) in pre.0.iter_mut().zip(layer.bias.iter()) {
                *p += b;
            }
            pre_activations.push(pre.clone());
            current = Vector(pre.iter().map(|&v| layer.activation.apply(v)).collect());
        }
        Ok((
            current,
            SampleTrace {
                layer_inputs,
                pre_activations,
            },
        ))
    }

    /// Stateless forward pass (evaluation, filtering, clustering).
    pub fn forward(&self, x: &Vector) -> Result<Vector> {
        self.forward_traced(x).map(|(out, _)| out)
    }

    /// Backward for one sample; accumulates into `grads`.
    fn backward_traced(
        &self,
        trace: &SampleTrace,
        d_rep: &Vector,
        weight_grads: &mut [Matrix],
        bias_grads: &mut [Vector],
    ) {
        let mut d_out = d_rep.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let pre = &trace.pre_activations[idx];
            let d_pre = Vector(
                d_out
                    .iter()
                    .zip(pre.iter())
                    .map(|(&g, &p)| g * layer.activation.derivative(p))
                    .collect(),
            );
            weight_grads[idx].add_outer(&d_pre, &trace.layer_inputs[idx], 1.0);
            bias_grads[idx].add_scaled(&d_pre, 1.0);
            if idx > 0 {
                d_out = layer.weights.transpose_matvec(&d_pre);
            }
        }
    }

    pub fn same_shape(&self, other: &FeatureExtractor) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.same_shape(&b.weights) && a.bias.dim() == b.bias.dim())
    }

    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.weights.validate()?;
            if layer.bias.dim() != layer.out_dim() {
                return Err(Error::invalid(format!("layer {i} bias dim mismatch")));
            }
            if i > 0 && layer.in_dim() != self.layers[i - 1].out_dim() {
                return Err(Error::invalid(format!("layer {i} does not compose")));
            }
        }
        Ok(())
    }
}

/// Bias-free linear classifier. Row `c` is exactly the prototype of class
/// `c`; frozen rows never receive gradient or parameter updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    weights: Matrix,
    frozen: BTreeSet<usize>,
}

impl Classifier {
    pub fn new(class_count: usize, rep_dim: usize, rng: &mut RngStream) -> Self {
        Classifier {
            weights: uniform_fan_in(class_count, rep_dim, rng),
            frozen: BTreeSet::new(),
        }
    }

    pub fn from_weights(weights: Matrix) -> Self {
        Classifier {
            weights,
            frozen: BTreeSet::new(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.weights.rows()
    }

    pub fn rep_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn row_vector(&self, class: usize) -> Vector {
        self.weights.row_vector(class)
    }

    pub fn is_frozen(&self, class: usize) -> bool {
        self.frozen.contains(&class)
    }

    pub fn frozen_rows(&self) -> &BTreeSet<usize> {
        &self.frozen
    }

    /// Row indices that are currently trainable, ascending.
    pub fn trainable_rows(&self) -> Vec<usize> {
        (0..self.class_count())
            .filter(|c| !self.frozen.contains(c))
            .collect()
    }

    /// Logits are plain dot products against every row.
    pub fn logits(&self, rep: &Vector) -> Result<Vector> {
        if rep.dim() != self.rep_dim() {
            return Err(Error::invalid(format!(
                "representation dim {} does not match classifier dim {}",
                rep.dim(),
                self.rep_dim()
            )));
        }
        Ok(self.weights.matvec(rep))
    }

    /// The first `c_l` rows, read from the current weights.
    pub fn known_prototypes(&self, c_l: usize) -> Result<Vec<Vector>> {
        if c_l > self.class_count() {
            return Err(Error::invalid(format!(
                "asked for {} prototypes from a {}-row classifier",
                c_l,
                self.class_count()
            )));
        }
        Ok((0..c_l).map(|c| self.weights.row_vector(c)).collect())
    }

    /// Append one row per prototype (bitwise) and freeze all pre-existing
    /// rows. An empty prototype list leaves the classifier unchanged.
    pub fn extend(&mut self, prototypes: &[Vector]) -> Result<()> {
        if prototypes.is_empty() {
            return Ok(());
        }
        if prototypes.iter().any(|p| p.dim() != self.rep_dim()) {
            return Err(Error::invalid("prototype dimension mismatch"));
        }
        for c in 0..self.class_count() {
            self.frozen.insert(c);
        }
        for p in prototypes {
            self.weights.push_row(p)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if let Some(&max) = self.frozen.iter().next_back() {
            if max >= self.class_count() {
                return Err(Error::invalid("frozen row beyond classifier size"));
            }
        }
        Ok(())
    }
}

/// Gradients (or parameter deltas) mirroring a model's shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub layer_weights: Vec<Matrix>,
    pub layer_biases: Vec<Vector>,
    pub classifier: Matrix,
}

impl GradientSet {
    pub fn zeros_for(model: &Model) -> Self {
        GradientSet {
            layer_weights: model
                .extractor
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            layer_biases: model
                .extractor
                .layers
                .iter()
                .map(|l| Vector::zeros(l.out_dim()))
                .collect(),
            classifier: Matrix::zeros(
                model.classifier.class_count(),
                model.classifier.rep_dim(),
            ),
        }
    }

    pub fn same_shape(&self, other: &GradientSet) -> bool {
        self.layer_weights.len() == other.layer_weights.len()
            && self
                .layer_weights
                .iter()
                .zip(&other.layer_weights)
                .all(|(a, b)| a.same_shape(b))
            && self
                .layer_biases
                .iter()
                .zip(&other.layer_biases)
                .all(|(a, b)| a.dim() == b.dim())
            && self.classifier.same_shape(&other.classifier)
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, factor: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::invalid("gradient shape mismatch"));
        }
        for (a, b) in self.layer_weights.iter_mut().zip(&other.layer_weights) {
            a.add_scaled(b, factor);
        }
        for (a, b) in self.layer_biases.iter_mut().zip(&other.layer_biases) {
            a.add_scaled(b, factor);
        }
        self.classifier.add_scaled(&other.classifier, factor);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for m in self.layer_weights.iter_mut() {
            for v in m.iter_mut() {
                *v *= factor;
            }
        }
        for b in self.layer_biases.iter_mut() {
            for v in b.0.iter_mut() {
                *v *= factor;
            }
        }
        for v in self.classifier.iter_mut() {
            *v *= factor;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut total = 0.0;
        for m in &self.layer_weights {
            total += m.iter().map(|v| v * v).sum::<f64>();
        }
        for b in &self.layer_biases {
            total += b.iter().map(|v| v * v).sum::<f64>();
        }
        total += self.classifier.iter().map(|v| v * v).sum::<f64>();
        total.sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.layer_weights
            .iter()
            .all(|m| m.iter().all(|v| *v == 0.0))
            && self.layer_biases.iter().all(|b| b.iter().all(|v| *v == 0.0))
            && self.classifier.iter().all(|v| *v == 0.0)
    }
}

/// Immutable deep copy of model parameters at a named moment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    extractor: FeatureExtractor,
    classifier: Classifier,
}

impl ModelSnapshot {
    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn to_model(&self) -> Model {
        Model {
            extractor: self.extractor.clone(),
            classifier: self.classifier.clone(),
            cache: None,
        }
    }
}

#[derive(Clone, Debug)]
struct BatchCache {
    traces: Vec<SampleTrace>,
}

/// Feature extractor plus classifier, with a forward cache for backward.
#[derive(Clone, Debug)]
pub struct Model {
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
    cache: Option<BatchCache>,
}

impl Model {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        rep_dim: usize,
        class_count: usize,
        rng: &RngStream,
    ) -> Self {
        let mut init = rng.child("init");
        let extractor = FeatureExtractor::new(input_dim, hidden, rep_dim, &mut init);
        let classifier = Classifier::new(class_count, rep_dim, &mut init);
        Model {
            extractor,
            classifier,
            cache: None,
        }
    }

    pub fn from_parts(extractor: FeatureExtractor, classifier: Classifier) -> Self {
        Model {
            extractor,
            classifier,
            cache: None,
        }
    }

    /// Forward a single input, caching intermediates for backward.
    pub fn forward_features(&mut self, x: &Vector) -> Result<Vector> {
        let (rep, trace) = self.extractor.forward_traced(x)?;
        self.cache = Some(BatchCache {
            traces: vec![trace],
        });
        Ok(rep)
    }

    /// Forward a batch, caching intermediates for backward.
    pub fn forward_batch(&mut self, xs: &[Vector]) -> Result<Vec<Vector>> {
        let mut reps = Vec::with_capacity(xs.len());
        let mut traces = Vec::with_capacity(xs.len());
        for x in xs {
            let (rep, trace) = self.extractor.forward_traced(x)?;
            reps.push(rep);
            traces.push(trace);
        }
        self.cache = Some(BatchCache { traces });
        Ok(reps)
    }

    /// Gradients of a scalar loss given its per-sample gradients w.r.t. the
    /// cached representations, plus an optional direct classifier-weight
    /// gradient. Frozen classifier rows receive exactly zero.
    pub fn backward(
        &self,
        rep_grads: &[Vector],
        classifier_grad: Option<&Matrix>,
    ) -> Result<GradientSet> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidState("backward called before forward".into()))?;
        if rep_grads.len() != cache.traces.len() {
            return Err(Error::invalid(format!(
                "{} gradient rows for a cached batch of {}",
                rep_grads.len(),
                cache.traces.len()
            )));
        }
        let mut grads = GradientSet::zeros_for(self);
        for (trace, d_rep) in cache.traces.iter().zip(rep_grads) {
            if d_rep.dim() != self.extractor.output_dim() {
                return Err(Error::invalid("representation gradient dim mismatch"));
            }
            self.extractor.backward_traced(
                trace,
                d_rep,
                &mut grads.layer_weights,
                &mut grads.layer_biases,
            );
        }
        if let Some(cg) = classifier_grad {
            if !cg.same_shape(&grads.classifier) {
                return Err(Error::invalid("classifier gradient shape mismatch"));
            }
            grads.classifier = cg.clone();
        }
        for &row in self.classifier.frozen_rows() {
            for v in grads.classifier.row_mut(row) {
                *v = 0.0;
            }
        }
        Ok(grads)
    }

    /// Convenience for losses expressed on logits: converts per-sample logit
    /// gradients into representation gradients plus classifier-row gradients,
    /// then runs backward.
    pub fn backward_from_logits(
        &self,
        reps: &[Vector],
        logit_grads: &[Vector],
    ) -> Result<GradientSet> {
        if reps.len() != logit_grads.len() {
            return Err(Error::invalid("reps/logit-grads length mismatch"));
        }
        let mut rep_grads = Vec::with_capacity(reps.len());
        let mut classifier_grad = Matrix::zeros(
            self.classifier.class_count(),
            self.classifier.rep_dim(),
        );
        for (rep, dl) in reps.iter().zip(logit_grads) {
            if dl.dim() != self.classifier.class_count() {
                return Err(Error::invalid("logit gradient width mismatch"));
            }
            rep_grads.push(self.classifier.weights().transpose_matvec(dl));
            classifier_grad.add_outer(dl, rep, 1.0);
        }
        self.backward(&rep_grads, Some(&classifier_grad))
    }

    /// `p <- p - lr * g` for every unfrozen parameter; frozen classifier
    /// rows stay bitwise unchanged.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        let zeros = GradientSet::zeros_for(self);
        if !grads.same_shape(&zeros) {
            return Err(Error::invalid("sgd_step gradient shape mismatch"));
        }
        for (layer, (gw, gb)) in self
            .extractor
            .layers
            .iter_mut()
            .zip(grads.layer_weights.iter().zip(&grads.layer_biases))
        {
            layer.weights.add_scaled(gw, -lr);
            layer.bias.add_scaled(gb, -lr);
        }
        for row in 0..self.classifier.class_count() {
            if self.classifier.is_frozen(row) {
                continue;
            }
            let g = grads.classifier.row(row).to_vec();
            for (w, gv) in self.classifier.weights.row_mut(row).iter_mut().zip(g) {
                *w -= lr * gv;
            }
        }
        Ok(())
    }

    /// `p <- p + delta` for every unfrozen parameter.
    pub fn apply_delta(&mut self, delta: &GradientSet) -> Result<()> {
        self.sgd_step(delta, -1.0)
    }

    /// Parameter difference `self - base` as a [`GradientSet`].
    pub fn param_delta(&self, base: &Model) -> Result<GradientSet> {
        if !self.extractor.same_shape(&base.extractor)
            || !self
                .classifier
                .weights()
                .same_shape(base.classifier.weights())
        {
            return Err(Error::invalid("param_delta shape mismatch"));
        }
        let mut delta = GradientSet::zeros_for(self);
        for (i, (a, b)) in self
            .extractor
            .layers
            .iter()
            .zip(&base.extractor.layers)
            .enumerate()
        {
            delta.layer_weights[i].add_scaled(&a.weights, 1.0);
            delta.layer_weights[i].add_scaled(&b.weights, -1.0);
            delta.layer_biases[i].add_scaled(&a.bias, 1.0);
            delta.layer_biases[i].add_scaled(&b.bias, -1.0);
        }
        delta.classifier.add_scaled(self.classifier.weights(), 1.0);
        delta.classifier.add_scaled(base.classifier.weights(), -1.0);
        Ok(delta)
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            extractor: self.extractor.clone(),
            classifier: self.classifier.clone(),
        }
    }

    pub fn params_equal(&self, other: &Model) -> bool {
        self.extractor == other.extractor
            && self.classifier.weights() == other.classifier.weights()
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Versioned textual model dump. JSON float encoding round-trips `f64`
/// bitwise, so save/load is lossless.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub extractor: FeatureExtractor,
    pub classifier: Classifier,
    /// Classifier row-block sizes in learning order: known classes first,
    /// then one block per novel stage.
    pub stage_blocks: Vec<usize>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, stage_blocks: Vec<usize>) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            extractor: model.extractor.clone(),
            classifier: model.classifier.clone(),
            stage_blocks,
        }
    }

    pub fn into_model(self) -> Result<(Model, Vec<usize>)> {
        self.validate()?;
        Ok((
            Model::from_parts(self.extractor, self.classifier),
            self.stage_blocks,
        ))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        self.extractor.validate()?;
        self.classifier.validate()?;
        if self.stage_blocks.iter().sum::<usize>() != self.classifier.class_count() {
            return Err(Error::invalid(
                "stage blocks do not sum to the classifier row count",
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::invalid(format!("checkpoint encode: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("checkpoint decode: {e}")))?;
        ckpt.validate()?;
        Ok(ckpt)
    }
}
