//! Federated orchestration: participant state and bounded data memories,
//! novel-data filtering, client selection, local training for both stages,
//! unweighted FedAvg aggregation, moving-average forgetting compensation, and
//! the known/novel stage pipelines.
//!
//! The server is the single coordinator. Clients train on independent model
//! replicas; aggregation reduces deltas in ascending client-id order, so a
//! whole stage is a pure function of (config, seed).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::clustering::{local_prototypes, ppm_estimate};
use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::losses::{
    ce_loss, combined_known_loss, pairwise_bce_loss, pcl_loss, swl_loss, LossConfig, DEFAULT_TOPK,
};
use crate::model::{FeatureExtractor, GradientSet, Model, ModelSnapshot};
use crate::numcore::{argmax_stable, cosine_similarity, softmax, Matrix, RngStream, Vector};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Federation hyperparameters. The loss block is populated from the
/// experiment configuration at run time and never read from this JSON block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Total participants K in the known stage.
    pub participants: usize,
    /// Clients selected per global round.
    pub clients_per_round: usize,
    /// Global rounds per stage.
    pub rounds_per_stage: usize,
    /// Local epochs per selected client per round.
    pub local_epochs: usize,
    /// SGD learning rate.
    pub learning_rate: f64,
    /// Nominal minibatch size; shrinks to the local dataset when smaller.
    pub batch_size: usize,
    /// Cosine threshold r of the novel-data filter.
    pub filter_threshold: f64,
    /// Moving-average coefficient pulling the extractor toward its
    /// known-stage snapshot.
    pub ema_beta: f64,
    /// Dirichlet concentration for non-IID partitioning.
    pub dirichlet_alpha: f64,
    /// Per-participant data memory capacity (FIFO eviction).
    pub memory_capacity: usize,
    /// Participants available in novel stages; defaults to `participants`.
    #[serde(default)]
    pub novel_participants: Option<usize>,
    #[serde(skip)]
    pub loss: LossConfig,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.participants == 0 {
            return Err(Error::invalid("participants must be at least 1"));
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.participants {
            return Err(Error::invalid(format!(
                "clients_per_round {} must be in 1..={}",
                self.clients_per_round, self.participants
            )));
        }
        if let Some(k_u) = self.novel_participants {
            if k_u == 0 {
                return Err(Error::invalid("novel_participants must be at least 1"));
            }
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(Error::invalid("ema_beta must lie in [0, 1]"));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::invalid("dirichlet_alpha must be positive"));
        }
        if self.memory_capacity == 0 {
            return Err(Error::invalid("memory_capacity must be at least 1"));
        }
        if !self.filter_threshold.is_finite() {
            return Err(Error::invalid("filter_threshold must be finite"));
        }
        self.loss.validate()
    }

    pub fn novel_roster_size(&self) -> usize {
        self.novel_participants.unwrap_or(self.participants)
    }
}

/// Rising-radius sweep parameters for the class-count estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpmConfig {
    /// Total rising steps E; the sweep visits E + 1 radii.
    pub rising_steps: usize,
    /// Minimum cluster size (the point itself included).
    pub min_cluster_size: usize,
}

impl Default for PpmConfig {
    fn default() -> Self {
        PpmConfig {
            rising_steps: 50,
            min_cluster_size: 2,
        }
    }
}

impl PpmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rising_steps == 0 {
            return Err(Error::invalid("rising_steps must be at least 1"));
        }
        if self.min_cluster_size == 0 {
            return Err(Error::invalid("min_cluster_size must be at least 1"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Participant state
// ---------------------------------------------------------------------------

/// Bounded FIFO sample buffer for filtered novel data.
#[derive(Clone, Debug, Default)]
pub struct DataMemory {
    capacity: usize,
    items: VecDeque<Vector>,
}

impl DataMemory {
    pub fn new(capacity: usize) -> Self {
        DataMemory {
            capacity,
            items: VecDeque::new(),
        }
    }

    /// Push one sample, evicting the oldest when full.
    pub fn push(&mut self, sample: Vector) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(sample);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn samples(&self) -> Vec<Vector> {
        self.items.iter().cloned().collect()
    }
}

/// One participant: labelled data for the known stage, an unlabelled incoming
/// stream for novel stages, and the bounded memory fed by the filter.
#[derive(Clone, Debug)]
pub struct ParticipantState {
    pub id: usize,
    pub local_labeled: Vec<LabeledSample>,
    pub incoming_unlabeled: Vec<Vector>,
    pub data_memory: DataMemory,
    /// Filter rejects (screened known-class data); pseudo-labelled and used
    /// as auxiliary supervision only in mixture mode.
    pub known_screened: Vec<Vector>,
    pub pseudo_labeled: Vec<LabeledSample>,
}

impl ParticipantState {
    pub fn new(id: usize, local_labeled: Vec<LabeledSample>, memory_capacity: usize) -> Self {
        ParticipantState {
            id,
            local_labeled,
            incoming_unlabeled: Vec::new(),
            data_memory: DataMemory::new(memory_capacity),
            known_screened: Vec::new(),
            pseudo_labeled: Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

/// In-process message records exchanged between participants and the server.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    PrototypeUpload {
        participant: usize,
        stage: usize,
        vectors: Vec<Vector>,
    },
    DeltaUpload {
        participant: usize,
        round: usize,
        delta: GradientSet,
    },
    ModelBroadcast {
        round: usize,
        params: ModelSnapshot,
    },
}

impl Message {
    /// Compact single-line JSON summary for audit logs: event identity plus
    /// payload shape and norm, without the raw parameters.
    pub fn summary(&self, seed: u64) -> serde_json::Value {
        match self {
            Message::PrototypeUpload {
                participant,
                stage,
                vectors,
            } => serde_json::json!({
                "seed": seed,
                "kind": "prototype_upload",
                "participant": participant,
                "stage": stage,
                "count": vectors.len(),
                "dim": vectors.first().map_or(0, Vector::dim),
            }),
            Message::DeltaUpload {
                participant,
                round,
                delta,
            } => serde_json::json!({
                "seed": seed,
                "kind": "delta_upload",
                "participant": participant,
                "round": round,
                "delta_norm": delta.l2_norm(),
            }),
            Message::ModelBroadcast { round, .. } => serde_json::json!({
                "seed": seed,
                "kind": "model_broadcast",
                "round": round,
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Server
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    KnownStage,
    NovelStage(usize),
}

/// Server-side state: the global model, the stage phase, the known-stage
/// snapshot captured exactly once, current global prototypes, and the full
/// message transcript.
#[derive(Debug)]
pub struct Server {
    pub model: Model,
    pub round: usize,
    pub phase: Phase,
    pub known_snapshot: Option<ModelSnapshot>,
    pub global_prototypes: Vec<Vector>,
    pub estimated_count: Option<usize>,
    pub transcript: Vec<Message>,
}

impl Server {
    pub fn new(model: Model) -> Self {
        Server {
            model,
            round: 0,
            phase: Phase::KnownStage,
            known_snapshot: None,
            global_prototypes: Vec::new(),
            estimated_count: None,
            transcript: Vec::new(),
        }
    }

    /// Prototype uploads per participant for one stage.
    pub fn prototype_upload_counts(&self, stage: usize) -> std::collections::BTreeMap<usize, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for msg in &self.transcript {
            if let Message::PrototypeUpload {
                participant,
                stage: s,
                ..
            } = msg
            {
                if *s == stage {
                    *counts.entry(*participant).or_insert(0) += 1;
                }
            }
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// Filtering
// ---------------------------------------------------------------------------

/// Outcome of routing an unlabelled stream through the novel filter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterStats {
    pub admitted_novel: usize,
    pub routed_known: usize,
    /// Zero-norm representations cannot be compared by cosine; they are
    /// conservatively routed to the known side and tallied here.
    pub zero_norm_routed: usize,
}

#[derive(Clone, Debug)]
pub struct FilterSplit {
    pub novel: Vec<Vector>,
    pub known: Vec<Vector>,
    pub zero_norm_routed: usize,
}

/// Route samples: novel iff the largest cosine similarity between the
/// sample's representation and any known prototype stays below `threshold`.
/// Order-preserving on both sides.
pub fn filter_novel(
    samples: &[Vector],
    model: &Model,
    prototypes: &[Vector],
    threshold: f64,
) -> Result<FilterSplit> {
    if prototypes.is_empty() {
        return Err(Error::invalid("filter_novel: no known prototypes"));
    }
    let usable: Vec<&Vector> = prototypes.iter().filter(|p| p.norm() > 0.0).collect();
    if usable.is_empty() {
        return Err(Error::DegenerateInput(
            "filter_novel: every known prototype has zero norm".into(),
        ));
    }
    let mut split = FilterSplit {
        novel: Vec::new(),
        known: Vec::new(),
        zero_norm_routed: 0,
    };
    for x in samples {
        let rep = model.extractor.forward(x)?;
        if rep.norm() == 0.0 {
            split.zero_norm_routed += 1;
            split.known.push(x.clone());
            continue;
        }
        let mut max_sim = f64::NEG_INFINITY;
        for p in &usable {
            max_sim = max_sim.max(cosine_similarity(&rep, p)?);
        }
        if max_sim < threshold {
            split.novel.push(x.clone());
        } else {
            split.known.push(x.clone());
        }
    }
    Ok(split)
}

/// Drain every participant's incoming stream through the filter into its
/// data memory (cleared first — each novel stage starts a fresh memory).
/// Screened known-class samples are retained for optional pseudo-labelling.
pub fn ingest_incoming(
    participants: &mut [ParticipantState],
    model: &Model,
    threshold: f64,
) -> Result<FilterStats> {
    let prototypes = model
        .classifier
        .known_prototypes(model.classifier.class_count())?;
    let mut stats = FilterStats::default();
    for p in participants.iter_mut() {
        p.data_memory.clear();
        p.known_screened.clear();
        p.pseudo_labeled.clear();
        let incoming = std::mem::take(&mut p.incoming_unlabeled);
        let split = filter_novel(&incoming, model, &prototypes, threshold)?;
        stats.admitted_novel += split.novel.len();
        stats.routed_known += split.known.len();
        stats.zero_norm_routed += split.zero_norm_routed;
        for x in split.novel {
            p.data_memory.push(x);
        }
        p.known_screened = split.known;
    }
    Ok(stats)
}

/// Label screened known-class samples with the argmax over the known-class
/// logits (the first `known_class_count` classifier rows).
pub fn pseudo_label_known(
    samples: &[Vector],
    model: &Model,
    known_class_count: usize,
) -> Result<Vec<LabeledSample>> {
    if known_class_count == 0 || known_class_count > model.classifier.class_count() {
        return Err(Error::invalid("pseudo_label_known: bad known class count"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for x in samples {
        let rep = model.extractor.forward(x)?;
        let logits = model.classifier.logits(&rep)?;
        let known_logits = Vector(logits.as_slice()[..known_class_count].to_vec());
        out.push(LabeledSample {
            features: x.clone(),
            label: argmax_stable(&known_logits)?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Client selection
// ---------------------------------------------------------------------------

/// Per-round plan: the selected client ids (ascending), plus the local
/// training schedule they run.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    pub selected: Vec<usize>,
    pub local_epochs: usize,
    pub learning_rate: f64,
}

/// Uniform sample of `count` distinct ids, returned in ascending order.
pub fn select_clients(active_ids: &[usize], count: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if count > active_ids.len() {
        return Err(Error::invalid(format!(
            "cannot select {count} clients from {} active participants",
            active_ids.len()
        )));
    }
    let mut picked: Vec<usize> = rng
        .sample_indices(active_ids.len(), count)
        .into_iter()
        .map(|i| active_ids[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

fn plan_round(
    cfg: &FederationConfig,
    round: usize,
    active_ids: &[usize],
    rng: &mut RngStream,
) -> Result<RoundPlan> {
    Ok(RoundPlan {
        round,
        selected: select_clients(active_ids, cfg.clients_per_round.min(active_ids.len()), rng)?,
        local_epochs: cfg.local_epochs,
        learning_rate: cfg.learning_rate,
    })
}

// ---------------------------------------------------------------------------
// Local training
// ---------------------------------------------------------------------------

fn effective_batch(batch_size: usize, n: usize) -> usize {
    batch_size.min(n).max(1)
}

/// Known-stage local training: `local_epochs` epochs of minibatch SGD on
/// cross-entropy plus `eta` times the prototype-contrastive term, starting
/// from a clone of the global model. Returns the parameter delta
/// (local - global). Empty local data yields an exactly zero delta.
pub fn local_train_known(
    participant: &ParticipantState,
    global: &Model,
    cfg: &FederationConfig,
    rng: &mut RngStream,
) -> Result<GradientSet> {
    let mut model = global.clone();
    let data = &participant.local_labeled;
    if data.is_empty() || cfg.local_epochs == 0 || cfg.learning_rate == 0.0 {
        return Ok(GradientSet::zeros_for(&model));
    }
    let batch = effective_batch(cfg.batch_size, data.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let xs: Vec<Vector> = chunk.iter().map(|&i| data[i].features.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let grads = known_stage_gradients(&mut model, &xs, &labels, &cfg.loss)?;
            model.sgd_step(&grads, cfg.learning_rate)?;
        }
    }
    model.param_delta(global)
}

/// One full gradient of the combined known-stage loss on a batch.
pub fn known_stage_gradients(
    model: &mut Model,
    xs: &[Vector],
    labels: &[usize],
    loss: &LossConfig,
) -> Result<GradientSet> {
    let reps = model.forward_batch(xs)?;
    let logits: Vec<Vector> = reps
        .iter()
        .map(|z| model.classifier.logits(z))
        .collect::<Result<_>>()?;
    let ce = ce_loss(&logits, labels)?;
    // Express the cross-entropy in representation/prototype space so it can
    // combine with the contrastive term.
    let mut ce_rep_grads = Vec::with_capacity(reps.len());
    let mut ce_proto = vec![Vector::zeros(model.classifier.rep_dim()); model.classifier.class_count()];
    for ((rep, dl), _) in reps.iter().zip(&ce.batch_grads).zip(labels) {
        ce_rep_grads.push(model.classifier.weights().transpose_matvec(dl));
        for c in 0..model.classifier.class_count() {
            ce_proto[c].add_scaled(rep, dl[c]);
        }
    }
    let ce_rep_space = crate::losses::LossOutput {
        value: ce.value,
        batch_grads: ce_rep_grads,
        prototype_grads: Some(ce_proto),
    };
    let combined = if loss.eta > 0.0 {
        let prototypes = model
            .classifier
            .known_prototypes(model.classifier.class_count())?;
        let pcl = pcl_loss(&reps, labels, &prototypes, loss)?;
        combined_known_loss(&ce_rep_space, &pcl, loss.eta)?
    } else {
        ce_rep_space
    };
    let mut classifier_grad = Matrix::zeros(
        model.classifier.class_count(),
        model.classifier.rep_dim(),
    );
    if let Some(proto_grads) = &combined.prototype_grads {
        for (c, g) in proto_grads.iter().enumerate() {
            for (w, v) in classifier_grad.row_mut(c).iter_mut().zip(g.iter()) {
                *w = *v;
            }
        }
    }
    model.backward(&combined.batch_grads, Some(&classifier_grad))
}

/// Which objective drives novel-stage local training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NovelTrainMode {
    /// Semantic-weighted alignment to the trainable prototype rows.
    Swl,
    /// Pairwise BCE with rank-statistics targets (ablation).
    PairwiseBce,
}

#[derive(Clone, Copy, Debug)]
pub struct NovelTrainOptions {
    pub mode: NovelTrainMode,
    pub apply_ema: bool,
}

impl Default for NovelTrainOptions {
    fn default() -> Self {
        NovelTrainOptions {
            mode: NovelTrainMode::Swl,
            apply_ema: true,
        }
    }
}

/// Novel-stage local training over the participant's data memory. The known
/// classifier rows are frozen; the trainable rows double as the global
/// prototypes and receive gradients. After the local epochs the feature
/// extractor is blended back toward the known-stage snapshot (unless the
/// ablation disables it). Empty memory yields an exactly zero delta.
pub fn local_train_novel(
    participant: &ParticipantState,
    global: &Model,
    anchor: &ModelSnapshot,
    cfg: &FederationConfig,
    options: &NovelTrainOptions,
    rng: &mut RngStream,
) -> Result<GradientSet> {
    // Extension freezes all prior rows and appends the trainable novel
    // block, so an empty frozen set means the classifier was never extended.
    if global.classifier.frozen_rows().is_empty() {
        return Err(Error::InvalidState(
            "novel training before the classifier was extended".into(),
        ));
    }
    let trainable = global.classifier.trainable_rows();
    if trainable.is_empty() {
        return Err(Error::InvalidState(
            "novel training with no trainable classifier rows".into(),
        ));
    }
    let mut model = global.clone();
    let memory = participant.data_memory.samples();
    if memory.is_empty() {
        return Ok(GradientSet::zeros_for(&model));
    }
    let batch = effective_batch(cfg.batch_size, memory.len());
    let mut order: Vec<usize> = (0..memory.len()).collect();
    let pseudo = &participant.pseudo_labeled;
    let mut pseudo_order: Vec<usize> = (0..pseudo.len()).collect();

    for _ in 0..cfg.local_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let xs: Vec<Vector> = chunk.iter().map(|&i| memory[i].clone()).collect();
            let grads = match options.mode {
                NovelTrainMode::Swl => novel_swl_gradients(&mut model, &xs, &trainable, &cfg.loss)?,
                NovelTrainMode::PairwiseBce => {
                    if xs.len() < 2 {
                        continue;
                    }
                    novel_bce_gradients(&mut model, &xs, &trainable)?
                }
            };
            model.sgd_step(&grads, cfg.learning_rate)?;
        }
        // Mixture mode: auxiliary cross-entropy on pseudo-labelled known data.
        if !pseudo.is_empty() {
            rng.shuffle(&mut pseudo_order);
            let pbatch = effective_batch(cfg.batch_size, pseudo.len());
            for chunk in pseudo_order.chunks(pbatch) {
                let xs: Vec<Vector> = chunk.iter().map(|&i| pseudo[i].features.clone()).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| pseudo[i].label).collect();
                let reps = model.forward_batch(&xs)?;
                let logits: Vec<Vector> = reps
                    .iter()
                    .map(|z| model.classifier.logits(z))
                    .collect::<Result<_>>()?;
                let ce = ce_loss(&logits, &labels)?;
                let grads = model.backward_from_logits(&reps, &ce.batch_grads)?;
                model.sgd_step(&grads, cfg.learning_rate)?;
            }
        }
    }

    if options.apply_ema {
        model.extractor = ema_update(anchor.extractor(), &model.extractor, cfg.ema_beta)?;
    }
    model.param_delta(global)
}

/// One full gradient of the semantic-weighted loss on a batch: trainable
/// classifier rows act as the prototypes and receive gradients; frozen rows
/// receive exactly zero.
pub fn novel_swl_gradients(
    model: &mut Model,
    xs: &[Vector],
    trainable: &[usize],
    loss: &LossConfig,
) -> Result<GradientSet> {
    let reps = model.forward_batch(xs)?;
    let prototypes: Vec<Vector> = trainable
        .iter()
        .map(|&r| model.classifier.row_vector(r))
        .collect();
    let out = swl_loss(&reps, &prototypes, loss)?;
    let mut classifier_grad = Matrix::zeros(
        model.classifier.class_count(),
        model.classifier.rep_dim(),
    );
    if let Some(proto_grads) = &out.prototype_grads {
        for (&row, g) in trainable.iter().zip(proto_grads) {
            for (w, v) in classifier_grad.row_mut(row).iter_mut().zip(g.iter()) {
                *w = *v;
            }
        }
    }
    model.backward(&out.batch_grads, Some(&classifier_grad))
}

/// One full gradient of the pairwise BCE ablation loss on a batch: head
/// probabilities are the softmax of the trainable-row logits, and gradients
/// chain through the softmax into both the rows and the extractor.
pub fn novel_bce_gradients(model: &mut Model, xs: &[Vector], trainable: &[usize]) -> Result<GradientSet> {
    let reps = model.forward_batch(xs)?;
    let rows: Vec<Vector> = trainable
        .iter()
        .map(|&r| model.classifier.row_vector(r))
        .collect();
    let novel_logits: Vec<Vector> = reps
        .iter()
        .map(|z| Vector::from_fn(rows.len(), |c| z.dot(&rows[c])))
        .collect();
    let probs: Vec<Vector> = novel_logits
        .iter()
        .map(|l| softmax(l, 1.0))
        .collect::<Result<_>>()?;
    let topk = DEFAULT_TOPK.min(reps[0].dim());
    let out = pairwise_bce_loss(&probs, &reps, topk)?;

    // Chain prob gradients through the softmax, then through the novel head
    // as full-width logit gradients (frozen rows stay at zero).
    let width = model.classifier.class_count();
    let mut logit_grads = Vec::with_capacity(xs.len());
    for (p, dp) in probs.iter().zip(&out.batch_grads) {
        let inner: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
        let mut full = Vector::zeros(width);
        for (c, &row) in trainable.iter().enumerate() {
            full[row] = p[c] * (dp[c] - inner);
        }
        logit_grads.push(full);
    }
    model.backward_from_logits(&reps, &logit_grads)
}

// ---------------------------------------------------------------------------
// Aggregation and forgetting compensation
// ---------------------------------------------------------------------------

/// Unweighted mean of client deltas, summed in the given (ascending
/// client-id) order.
pub fn fedavg_aggregate(deltas: &[GradientSet]) -> Result<GradientSet> {
    let Some(first) = deltas.first() else {
        return Err(Error::invalid("fedavg_aggregate: empty delta list"));
    };
    let mut total = first.clone();
    for d in &deltas[1..] {
        total.add_scaled(d, 1.0)?;
    }
    total.scale(1.0 / deltas.len() as f64);
    Ok(total)
}

/// Blend extractor parameters toward the known-stage snapshot:
/// `theta <- beta * theta_known + (1 - beta) * theta_local`, elementwise.
/// Coincident parameters pass through untouched.
pub fn ema_update(
    theta_known: &FeatureExtractor,
    theta_local: &FeatureExtractor,
    beta: f64,
) -> Result<FeatureExtractor> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("ema beta must lie in [0, 1], got {beta}")));
    }
    if !theta_known.same_shape(theta_local) {
        return Err(Error::invalid("ema_update: extractor shape mismatch"));
    }
    let blend = |a: f64, c: f64| -> f64 {
        if a == c {
            a
        } else {
            beta * a + (1.0 - beta) * c
        }
    };
    let mut out = theta_local.clone();
    for (layer, (known, local)) in out
        .layers
        .iter_mut()
        .zip(theta_known.layers.iter().zip(&theta_local.layers))
    {
        for ((w, &a), &c) in layer
            .weights
            .iter_mut()
            .zip(known.weights.iter())
            .zip(local.weights.iter())
        {
            *w = blend(a, c);
        }
        for ((b, &a), &c) in layer
            .bias
            .0
            .iter_mut()
            .zip(known.bias.iter())
            .zip(local.bias.iter())
        {
            *b = blend(a, c);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stage pipelines
// ---------------------------------------------------------------------------

/// Run the known stage: per round, select clients, train them locally on the
/// combined loss, aggregate deltas, and apply the mean to the global model.
/// Captures the known-stage snapshot exactly once, at stage end.
pub fn run_known_stage(
    server: &mut Server,
    participants: &mut [ParticipantState],
    cfg: &FederationConfig,
    root: &RngStream,
) -> Result<()> {
    if server.known_snapshot.is_some() {
        return Err(Error::InvalidState(
            "known stage already ran: the snapshot is captured exactly once".into(),
        ));
    }
    server.phase = Phase::KnownStage;
    let active: Vec<usize> = participants.iter().map(|p| p.id).collect();
    for _ in 0..cfg.rounds_per_stage {
        let round = server.round;
        let plan = plan_round(
            cfg,
            round,
            &active,
            &mut root.child(&format!("client-selection-r{round}")),
        )?;
        let mut deltas = Vec::with_capacity(plan.selected.len());
        for &id in &plan.selected {
            let mut rng = root.child(&format!("local-train-r{round}-p{id}"));
            let delta = local_train_known(&participants[id], &server.model, cfg, &mut rng)?;
            server.transcript.push(Message::DeltaUpload {
                participant: id,
                round,
                delta: delta.clone(),
            });
            deltas.push(delta);
        }
        let mean = fedavg_aggregate(&deltas)?;
        server.model.apply_delta(&mean)?;
        server.transcript.push(Message::ModelBroadcast {
            round,
            params: server.model.snapshot(),
        });
        server.round += 1;
    }
    server.known_snapshot = Some(server.model.snapshot());
    Ok(())
}

/// How the appended classifier rows are initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrototypeInit {
    /// Use the merge estimator's global prototypes (the default).
    FromPpm,
    /// Random rows from the init substream (ablation).
    Random,
}

#[derive(Clone, Copy, Debug)]
pub struct NovelStageOptions {
    pub ppm: PpmConfig,
    pub init: PrototypeInit,
    pub train: NovelTrainOptions,
}

impl Default for NovelStageOptions {
    fn default() -> Self {
        NovelStageOptions {
            ppm: PpmConfig::default(),
            init: PrototypeInit::FromPpm,
            train: NovelTrainOptions::default(),
        }
    }
}

/// Summary of one novel stage run.
#[derive(Clone, Debug)]
pub struct NovelStageOutcome {
    pub stage: usize,
    pub pool_size: usize,
    pub estimated_count: usize,
    pub per_step_counts: Vec<(f64, usize)>,
    pub prototype_uploads: usize,
}

/// Run one novel stage:
/// 1. each participant with novel memory clusters it into local prototypes
///    and uploads them once;
/// 2. the server shuffles the pool and estimates the global class count;
/// 3. the classifier is extended (freezing all earlier rows);
/// 4. the configured global rounds run semantic-weighted local training with
///    moving-average forgetting compensation on each selected client.
pub fn run_novel_stage(
    server: &mut Server,
    participants: &mut [ParticipantState],
    cfg: &FederationConfig,
    stage: usize,
    options: &NovelStageOptions,
    root: &RngStream,
) -> Result<NovelStageOutcome> {
    options.ppm.validate()?;
    let anchor = server
        .known_snapshot
        .clone()
        .ok_or_else(|| Error::InvalidState("novel stage before the known stage finished".into()))?;
    server.phase = Phase::NovelStage(stage);

    if participants.iter().all(|p| p.data_memory.is_empty()) {
        return Err(Error::EmptyNovelStage { stage });
    }

    // Local prototypes, uploaded exactly once per participant per stage.
    let known_row_count = server.model.classifier.class_count();
    let mut pool = Vec::new();
    let mut uploads = 0usize;
    for p in participants.iter() {
        if p.data_memory.is_empty() {
            continue;
        }
        let reps: Vec<Vector> = p
            .data_memory
            .samples()
            .iter()
            .map(|x| server.model.extractor.forward(x))
            .collect::<Result<_>>()?;
        let mut rng = root.child(&format!("kmeans-s{stage}-p{}", p.id));
        let prototypes = local_prototypes(&reps, known_row_count, &mut rng)?;
        server.transcript.push(Message::PrototypeUpload {
            participant: p.id,
            stage,
            vectors: prototypes.clone(),
        });
        uploads += 1;
        pool.extend(prototypes);
    }
    root.child(&format!("ppm-shuffle-s{stage}")).shuffle(&mut pool);

    let ppm = ppm_estimate(
        &pool,
        options.ppm.rising_steps,
        options.ppm.min_cluster_size,
        &mut root.child(&format!("ppm-kmeans-s{stage}")),
    )?;

    let prototypes = match options.init {
        PrototypeInit::FromPpm => ppm.global_prototypes.clone(),
        PrototypeInit::Random => {
            let dim = server.model.classifier.rep_dim();
            let bound = 1.0 / (dim as f64).sqrt();
            let mut rng = root.child(&format!("init-s{stage}"));
            (0..ppm.estimated_count)
                .map(|_| Vector::from_fn(dim, |_| rng.uniform_in(-bound, bound)))
                .collect()
        }
    };
    server.model.classifier.extend(&prototypes)?;
    server.global_prototypes = prototypes;
    server.estimated_count = Some(ppm.estimated_count);

    // Global rounds of semantic-weighted local training.
    let active: Vec<usize> = participants.iter().map(|p| p.id).collect();
    for _ in 0..cfg.rounds_per_stage {
        let round = server.round;
        let plan = plan_round(
            cfg,
            round,
            &active,
            &mut root.child(&format!("client-selection-r{round}")),
        )?;
        let mut deltas = Vec::with_capacity(plan.selected.len());
        for &id in &plan.selected {
            let idx = participants
                .iter()
                .position(|p| p.id == id)
                .expect("selected id comes from the active roster");
            let mut rng = root.child(&format!("local-train-r{round}-p{id}"));
            let delta = local_train_novel(
                &participants[idx],
                &server.model,
                &anchor,
                cfg,
                &options.train,
                &mut rng,
            )?;
            server.transcript.push(Message::DeltaUpload {
                participant: id,
                round,
                delta: delta.clone(),
            });
            deltas.push(delta);
        }
        let mean = fedavg_aggregate(&deltas)?;
        server.model.apply_delta(&mean)?;
        server.transcript.push(Message::ModelBroadcast {
            round,
            params: server.model.snapshot(),
        });
        server.round += 1;
    }

    Ok(NovelStageOutcome {
        stage,
        pool_size: pool.len(),
        estimated_count: ppm.estimated_count,
        per_step_counts: ppm.per_step_counts,
        prototype_uploads: uploads,
    })
}
