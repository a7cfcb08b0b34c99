//! Config-driven experiment runner: parses and validates a JSON experiment
//! description, executes staged multi-seed runs, and emits metrics artifacts
//! (`metrics.json`, `summary.csv`, optional `transcript.log`, per-seed model
//! checkpoints).

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{
    dirichlet_partition, generate_gaussian_mixture, load_embedding_csv, split_stages, Dataset,
    GaussianMixtureSpec, LabeledSample, PartitionSpec, StageSchedule,
};
use crate::error::{Error, Result};
use crate::eval::{known_accuracy, novel_cluster_accuracy, overall_accuracy};
use crate::federation::{
    ingest_incoming, pseudo_label_known, run_known_stage, run_novel_stage, FederationConfig,
    FilterStats, NovelStageOptions, NovelTrainMode, NovelTrainOptions, ParticipantState,
    PpmConfig, PrototypeInit, Server,
};
use crate::losses::LossConfig;
use crate::model::{Checkpoint, Model};
use crate::numcore::{argmax_stable, RngStream, Vector};

/// Hidden layer widths of the default feature extractor. A single rectified
/// hidden layer: every extra relu layer pulls the cosine between unrelated
/// representations up toward the filter threshold at this representation
/// width, which breaks novel-data filtering.
pub const DEFAULT_HIDDEN: [usize; 1] = [64];
/// Representation dimension d.
pub const REP_DIM: usize = 16;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How mixture class means are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanPlacement {
    /// Rejection-sampled uniformly in a box, per seed, with at least
    /// `mean_separation` between any two means.
    #[default]
    Box,
    /// One scaled coordinate axis per class (requires `dim >= class_count`);
    /// pairwise distances all equal `mean_separation` exactly.
    Axes,
}

/// Gaussian-mixture dataset block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub class_count: usize,
    pub dim: usize,
    pub stddev: f64,
    pub mean_separation: f64,
    pub samples_per_class: usize,
    #[serde(default)]
    pub placement: MeanPlacement,
}

/// Where the experiment data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Mixture(MixtureConfig),
    Csv { path: String },
}

fn default_test_fraction() -> f64 {
    1.0 / 6.0
}

/// Stage lists plus the per-class held-out test fraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub known_classes: Vec<usize>,
    #[serde(default)]
    pub novel_stages: Vec<Vec<usize>>,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

/// Pipeline mode flags. Ablations substitute one mechanism each and compose
/// freely; everything defaults to the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeConfig {
    /// Feed screened known-class data back as pseudo-labelled supervision
    /// during novel stages.
    pub mixture_pseudo_label: bool,
    /// Drop the prototype-contrastive term from known-stage training.
    pub no_pcl: bool,
    /// Initialise appended classifier rows randomly instead of from the
    /// merged global prototypes.
    pub no_init: bool,
    /// Skip the moving-average pull toward the known-stage snapshot.
    pub no_ema: bool,
    /// Replace the semantic-weighted loss with pairwise BCE.
    pub swl_bce: bool,
    /// Record a message transcript and write `transcript.log`.
    pub emit_transcript: bool,
}

/// A full experiment description: one JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub federation: FederationConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub ppm: PpmConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<String>,
    #[serde(default)]
    pub mode: ModeConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)
            .map_err(|e| Error::config("<root>", e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetConfig::Mixture(m) => {
                if m.class_count == 0 || m.dim == 0 || m.samples_per_class == 0 {
                    return Err(Error::config(
                        "dataset.mixture",
                        "class_count, dim and samples_per_class must be positive",
                    ));
                }
                if !(m.stddev > 0.0) {
                    return Err(Error::config("dataset.mixture.stddev", "must be positive"));
                }
                if !(m.mean_separation > 0.0) {
                    return Err(Error::config(
                        "dataset.mixture.mean_separation",
                        "must be positive",
                    ));
                }
                if m.placement == MeanPlacement::Axes && m.dim < m.class_count {
                    return Err(Error::config(
                        "dataset.mixture",
                        format!(
                            "axes placement needs dim >= class_count ({} < {})",
                            m.dim, m.class_count
                        ),
                    ));
                }
                let declared = self
                    .schedule
                    .known_classes
                    .iter()
                    .chain(self.schedule.novel_stages.iter().flatten());
                if let Some(&bad) = declared.clone().find(|&&c| c >= m.class_count) {
                    return Err(Error::config(
                        "schedule",
                        format!("class {bad} is outside the {}-class mixture", m.class_count),
                    ));
                }
            }
            DatasetConfig::Csv { path } => {
                if path.is_empty() {
                    return Err(Error::config("dataset.csv.path", "must not be empty"));
                }
            }
        }
        let schedule = StageSchedule {
            known_classes: self.schedule.known_classes.clone(),
            novel_stages: self.schedule.novel_stages.clone(),
        };
        schedule
            .validate()
            .map_err(|e| Error::config("schedule", e.to_string()))?;
        if !(0.0..1.0).contains(&self.schedule.test_fraction) {
            return Err(Error::config(
                "schedule.test_fraction",
                "must lie in [0, 1)",
            ));
        }
        self.federation
            .validate()
            .map_err(|e| Error::config("federation", e.to_string()))?;
        self.loss
            .validate()
            .map_err(|e| Error::config("loss", e.to_string()))?;
        self.ppm
            .validate()
            .map_err(|e| Error::config("ppm", e.to_string()))?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        Ok(())
    }

    /// Runtime federation config with the loss block folded in and the
    /// contrastive term dropped when the ablation asks for it.
    fn runtime_federation(&self) -> FederationConfig {
        let mut fed = self.federation.clone();
        fed.loss = self.loss;
        if self.mode.no_pcl {
            fed.loss.eta = 0.0;
        }
        fed
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Metrics for one stage of one seed. Stage 0 is the known stage; novel
/// stages count from 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub known_acc: f64,
    pub novel_acc: Option<f64>,
    pub overall_acc: f64,
    pub forgetting: f64,
    pub est_count: Option<usize>,
    pub true_count: Option<usize>,
    pub est_count_error: Option<i64>,
    pub filter: Option<FilterStats>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParticipantUploads {
    pub participant: usize,
    pub uploads: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageUploadCounts {
    pub stage: usize,
    pub per_participant: Vec<ParticipantUploads>,
}

/// Message traffic summary for one seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TranscriptSummary {
    pub delta_uploads: usize,
    pub model_broadcasts: usize,
    pub prototype_uploads: Vec<StageUploadCounts>,
}

/// Everything recorded for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub stages: Vec<StageMetrics>,
    pub transcript_summary: TranscriptSummary,
    /// Full transcript lines (only when `mode.emit_transcript` is set);
    /// written to `transcript.log`, never into `metrics.json`.
    #[serde(skip)]
    pub transcript: Vec<serde_json::Value>,
    /// Final model, written to `model-<seed>.json`.
    #[serde(skip)]
    pub checkpoint: Option<Checkpoint>,
}

/// Per-stage mean and population variance across seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateStageRow {
    pub stage: usize,
    pub mean_known: f64,
    pub var_known: f64,
    pub mean_novel: Option<f64>,
    pub var_novel: Option<f64>,
    pub mean_overall: f64,
    pub var_overall: f64,
    pub mean_forgetting: f64,
    pub var_forgetting: f64,
}

/// Full multi-seed run output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seeds: Vec<SeedReport>,
    pub aggregate: Vec<AggregateStageRow>,
    /// Wall-clock seconds; excluded from serialized artifacts so reruns are
    /// byte-identical.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

fn aggregate_stages(seeds: &[SeedReport]) -> Vec<AggregateStageRow> {
    let Some(first) = seeds.first() else {
        return Vec::new();
    };
    let mut rows = Vec::new();
    for (idx, stage) in first.stages.iter().enumerate() {
        let collect = |f: &dyn Fn(&StageMetrics) -> f64| -> Vec<f64> {
            seeds.iter().map(|s| f(&s.stages[idx])).collect()
        };
        let (mean_known, var_known) = mean_var(&collect(&|m| m.known_acc));
        let (mean_overall, var_overall) = mean_var(&collect(&|m| m.overall_acc));
        let (mean_forgetting, var_forgetting) = mean_var(&collect(&|m| m.forgetting));
        let novel: Option<Vec<f64>> = seeds
            .iter()
            .map(|s| s.stages[idx].novel_acc)
            .collect();
        let (mean_novel, var_novel) = match novel {
            Some(values) => {
                let (m, v) = mean_var(&values);
                (Some(m), Some(v))
            }
            None => (None, None),
        };
        rows.push(AggregateStageRow {
            stage: stage.stage,
            mean_known,
            var_known,
            mean_novel,
            var_novel,
            mean_overall,
            var_overall,
            mean_forgetting,
            var_forgetting,
        });
    }
    rows
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Skip novel-stage training rounds (estimation still runs). Used by the
    /// `estimate` subcommand.
    pub skip_novel_training: bool,
}

fn build_dataset(config: &ExperimentConfig, rng: &RngStream) -> Result<Dataset> {
    match &config.dataset {
        DatasetConfig::Mixture(m) => {
            let means = match m.placement {
                MeanPlacement::Box => GaussianMixtureSpec::separated_means(
                    m.class_count,
                    m.dim,
                    m.mean_separation,
                    &mut rng.child("means"),
                )?,
                MeanPlacement::Axes => {
                    let scale = m.mean_separation / 2.0_f64.sqrt();
                    (0..m.class_count)
                        .map(|c| Vector::from_fn(m.dim, |d| if d == c { scale } else { 0.0 }))
                        .collect()
                }
            };
            let spec = GaussianMixtureSpec {
                class_count: m.class_count,
                dim: m.dim,
                means,
                stddev: m.stddev,
                samples_per_class: m.samples_per_class,
            };
            generate_gaussian_mixture(&spec, &mut rng.child("data"))
        }
        DatasetConfig::Csv { path } => load_embedding_csv(Path::new(path))?.into_dataset(),
    }
}

/// Predicted cluster index for every sample, taken over one classifier row
/// block (the novel head of a stage).
fn novel_head_predictions(
    model: &Model,
    features: &[Vector],
    block_start: usize,
    block_len: usize,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(features.len());
    for x in features {
        let rep = model.extractor.forward(x)?;
        let logits = model.classifier.logits(&rep)?;
        let block = Vector(logits.as_slice()[block_start..block_start + block_len].to_vec());
        preds.push(argmax_stable(&block)?);
    }
    Ok(preds)
}

/// Run one seed end to end: generate/load data, split stages, partition,
/// train the known stage, then run every novel stage (filter, estimate,
/// extend, train) and evaluate after each.
pub fn run_seed(config: &ExperimentConfig, seed: u64, options: &RunOptions) -> Result<SeedReport> {
    let fed = config.runtime_federation();
    let rng = RngStream::from_seed(seed);
    let dataset = build_dataset(config, &rng)?;
    let schedule = StageSchedule {
        known_classes: config.schedule.known_classes.clone(),
        novel_stages: config.schedule.novel_stages.clone(),
    };
    let split = split_stages(&dataset, &schedule, config.schedule.test_fraction)?;
    let known_class_count = schedule.known_classes.len();

    // Roster: known-stage participants first; novel stages may use fewer or
    // more (extras start with no labelled data).
    let roster = fed.participants.max(fed.novel_roster_size());
    let known_parts = dirichlet_partition(
        &split.known_train,
        known_class_count,
        &PartitionSpec::uniform(fed.participants, fed.dirichlet_alpha, known_class_count),
        &mut rng.child("partitioning-known"),
    )?;
    let mut participants: Vec<ParticipantState> = (0..roster)
        .map(|id| {
            let local = known_parts.get(id).cloned().unwrap_or_default();
            ParticipantState::new(id, local, fed.memory_capacity)
        })
        .collect();

    let model = Model::new(
        dataset.dim(),
        &DEFAULT_HIDDEN,
        REP_DIM,
        known_class_count,
        &rng,
    );
    let mut server = Server::new(model);

    run_known_stage(
        &mut server,
        &mut participants[..fed.participants],
        &fed,
        &rng.child("known-stage"),
    )?;
    let baseline_known = known_accuracy(&server.model, &split.known_test)?;

    let mut stages = vec![StageMetrics {
        stage: 0,
        known_acc: baseline_known,
        novel_acc: None,
        overall_acc: baseline_known,
        forgetting: 0.0,
        est_count: None,
        true_count: None,
        est_count_error: None,
        filter: None,
    }];
    let mut stage_blocks = vec![known_class_count];

    let novel_roster = fed.novel_roster_size();
    let mut novel_fed = fed.clone();
    if options.skip_novel_training {
        novel_fed.rounds_per_stage = 0;
    }

    for (idx, novel) in split.novel_stages.iter().enumerate() {
        let stage_no = idx + 1;
        // Partition the unlabelled stream non-IID using the hidden labels
        // (environment machinery only; training never sees them).
        let stage_classes = novel.class_ids.len();
        let relabelled: Vec<LabeledSample> = novel
            .train
            .features
            .iter()
            .zip(&novel.train.hidden_labels)
            .map(|(f, &l)| LabeledSample {
                features: f.clone(),
                label: novel.class_ids.iter().position(|&c| c == l).expect("stage class"),
            })
            .collect();
        let parts = dirichlet_partition(
            &relabelled,
            stage_classes,
            &PartitionSpec::uniform(novel_roster, fed.dirichlet_alpha, stage_classes),
            &mut rng.child(&format!("partitioning-novel-{stage_no}")),
        )?;
        for (k, part) in parts.iter().enumerate() {
            participants[k].incoming_unlabeled =
                part.iter().map(|s| s.features.clone()).collect();
        }

        let filter_stats = ingest_incoming(
            &mut participants[..novel_roster],
            &server.model,
            fed.filter_threshold,
        )?;
        if config.mode.mixture_pseudo_label {
            let learned = server.model.classifier.class_count();
            for p in participants[..novel_roster].iter_mut() {
                p.pseudo_labeled = pseudo_label_known(&p.known_screened, &server.model, learned)?;
            }
        }

        let stage_options = NovelStageOptions {
            ppm: config.ppm,
            init: if config.mode.no_init {
                PrototypeInit::Random
            } else {
                PrototypeInit::FromPpm
            },
            train: NovelTrainOptions {
                mode: if config.mode.swl_bce {
                    NovelTrainMode::PairwiseBce
                } else {
                    NovelTrainMode::Swl
                },
                apply_ema: !config.mode.no_ema,
            },
        };
        let block_start: usize = stage_blocks.iter().sum();
        let outcome = run_novel_stage(
            &mut server,
            &mut participants[..novel_roster],
            &novel_fed,
            stage_no,
            &stage_options,
            &rng.child(&format!("novel-stage-{stage_no}")),
        )?;
        stage_blocks.push(outcome.estimated_count);

        let known_after = known_accuracy(&server.model, &split.known_test)?;
        let preds = novel_head_predictions(
            &server.model,
            &novel.test.features,
            block_start,
            outcome.estimated_count,
        )?;
        let novel_acc = novel_cluster_accuracy(&preds, &novel.test.hidden_labels)?;
        let overall = overall_accuracy(
            known_after,
            novel_acc,
            split.known_test.len(),
            novel.test.len(),
        )?;
        stages.push(StageMetrics {
            stage: stage_no,
            known_acc: known_after,
            novel_acc: Some(novel_acc),
            overall_acc: overall,
            forgetting: baseline_known - known_after,
            est_count: Some(outcome.estimated_count),
            true_count: Some(stage_classes),
            est_count_error: Some(outcome.estimated_count as i64 - stage_classes as i64),
            filter: Some(filter_stats.clone()),
        });
    }

    let mut summary = TranscriptSummary::default();
    for msg in &server.transcript {
        match msg {
            crate::federation::Message::DeltaUpload { .. } => summary.delta_uploads += 1,
            crate::federation::Message::ModelBroadcast { .. } => summary.model_broadcasts += 1,
            crate::federation::Message::PrototypeUpload { .. } => {}
        }
    }
    for stage_no in 1..=split.novel_stages.len() {
        let counts = server.prototype_upload_counts(stage_no);
        summary.prototype_uploads.push(StageUploadCounts {
            stage: stage_no,
            per_participant: counts
                .into_iter()
                .map(|(participant, uploads)| ParticipantUploads {
                    participant,
                    uploads,
                })
                .collect(),
        });
    }
    let transcript = if config.mode.emit_transcript {
        server.transcript.iter().map(|m| m.summary(seed)).collect()
    } else {
        Vec::new()
    };

    Ok(SeedReport {
        seed,
        stages,
        transcript_summary: summary,
        transcript,
        checkpoint: Some(Checkpoint::from_model(&server.model, stage_blocks)),
    })
}

/// Run every configured seed and aggregate.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let started = Instant::now();
    let mut seeds = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        seeds.push(run_seed(config, seed, &RunOptions::default())?);
    }
    let aggregate = aggregate_stages(&seeds);
    Ok(RunReport {
        seeds,
        aggregate,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Data -> partition -> filter -> estimation, skipping novel training rounds.
/// Returns `(seed, stage, estimated, true_count)` rows.
pub fn run_estimate(config: &ExperimentConfig) -> Result<Vec<(u64, usize, usize, usize)>> {
    config.validate()?;
    let mut rows = Vec::new();
    for &seed in &config.seeds {
        let report = run_seed(
            config,
            seed,
            &RunOptions {
                skip_novel_training: true,
            },
        )?;
        for stage in &report.stages {
            if let (Some(est), Some(truth)) = (stage.est_count, stage.true_count) {
                rows.push((seed, stage.stage, est, truth));
            }
        }
    }
    Ok(rows)
}

/// Metrics of a saved checkpoint against the first configured seed's data.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub seed: u64,
    pub known_acc: f64,
    pub per_stage: Vec<EvalStageRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalStageRow {
    pub stage: usize,
    pub novel_acc: f64,
    pub overall_acc: f64,
}

pub fn evaluate_checkpoint(config: &ExperimentConfig, checkpoint: Checkpoint) -> Result<EvalReport> {
    config.validate()?;
    let (model, blocks) = checkpoint.into_model()?;
    let seed = config.seeds[0];
    let rng = RngStream::from_seed(seed);
    let dataset = build_dataset(config, &rng)?;
    let schedule = StageSchedule {
        known_classes: config.schedule.known_classes.clone(),
        novel_stages: config.schedule.novel_stages.clone(),
    };
    let split = split_stages(&dataset, &schedule, config.schedule.test_fraction)?;
    if blocks.first() != Some(&schedule.known_classes.len()) {
        return Err(Error::invalid(format!(
            "checkpoint known block {:?} does not match the schedule's {} known classes",
            blocks.first(),
            schedule.known_classes.len()
        )));
    }
    let known_acc = known_accuracy(&model, &split.known_test)?;
    let mut per_stage = Vec::new();
    let mut offset = blocks[0];
    for (idx, block_len) in blocks.iter().skip(1).enumerate() {
        let Some(novel) = split.novel_stages.get(idx) else {
            break;
        };
        let preds = novel_head_predictions(&model, &novel.test.features, offset, *block_len)?;
        let novel_acc = novel_cluster_accuracy(&preds, &novel.test.hidden_labels)?;
        let overall = overall_accuracy(known_acc, novel_acc, split.known_test.len(), novel.test.len())?;
        per_stage.push(EvalStageRow {
            stage: idx + 1,
            novel_acc,
            overall_acc: overall,
        });
        offset += block_len;
    }
    Ok(EvalReport {
        seed,
        known_acc,
        per_stage,
    })
}

// ---------------------------------------------------------------------------
// Artifact emission
// ---------------------------------------------------------------------------

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `metrics.json`, `summary.csv`, per-seed checkpoints, and (when
/// transcripts were recorded) `transcript.log` into `out_dir`. Returns the
/// written paths. Identical reports produce byte-identical artifacts.
pub fn emit_metrics(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let metrics_path = out_dir.join("metrics.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::invalid(format!("report encode: {e}")))?;
    std::fs::write(&metrics_path, json).map_err(|e| Error::io(&metrics_path, e))?;
    written.push(metrics_path);

    let csv_path = out_dir.join("summary.csv");
    let mut csv = String::from("seed,stage,known,novel,all,forgetting,est_count\n");
    for seed in &report.seeds {
        for stage in &seed.stages {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                seed.seed,
                stage.stage,
                stage.known_acc,
                csv_cell(stage.novel_acc),
                stage.overall_acc,
                stage.forgetting,
                stage
                    .est_count
                    .map(|c| c.to_string())
                    .unwrap_or_default(),
            ));
        }
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    written.push(csv_path);

    for seed in &report.seeds {
        if let Some(ckpt) = &seed.checkpoint {
            let path = out_dir.join(format!("model-{}.json", seed.seed));
            ckpt.save(&path)?;
            written.push(path);
        }
    }

    if report.seeds.iter().any(|s| !s.transcript.is_empty()) {
        let log_path = out_dir.join("transcript.log");
        let mut log = String::new();
        for seed in &report.seeds {
            for entry in &seed.transcript {
                log.push_str(&entry.to_string());
                log.push('\n');
            }
        }
        std::fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
        written.push(log_path);
    }
    Ok(written)
}
