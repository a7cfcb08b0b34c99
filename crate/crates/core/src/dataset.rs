//! Synthetic data generation, embedding-CSV ingestion, known/novel stage
//! splitting, and Dirichlet non-IID partitioning.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{RngStream, Vector};

/// One feature vector with its class id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vector,
    pub label: usize,
}

/// A labelled dataset; every label is `< class_count`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<LabeledSample>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(samples: Vec<LabeledSample>, class_count: usize) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_count) {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                s.label, class_count
            )));
        }
        Ok(Dataset {
            samples,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.dim())
    }

    /// Per-class sample indices in dataset order.
    fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            by_class.entry(s.label).or_default().push(i);
        }
        by_class
    }
}

// ---------------------------------------------------------------------------
// Gaussian mixtures
// ---------------------------------------------------------------------------

/// Specification of an isotropic Gaussian mixture used as a desk-scale stand-in
/// for image datasets.
#[derive(Clone, Debug)]
pub struct GaussianMixtureSpec {
    pub class_count: usize,
    pub dim: usize,
    pub means: Vec<Vector>,
    pub stddev: f64,
    pub samples_per_class: usize,
}

impl GaussianMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 || self.dim == 0 {
            return Err(Error::invalid("mixture needs at least one class and one dimension"));
        }
        if self.means.len() != self.class_count {
            return Err(Error::invalid(format!(
                "{} means for {} classes",
                self.means.len(),
                self.class_count
            )));
        }
        if self.means.iter().any(|m| m.dim() != self.dim) {
            return Err(Error::invalid("mixture mean dimension mismatch"));
        }
        if !(self.stddev > 0.0) {
            return Err(Error::invalid("mixture stddev must be positive"));
        }
        Ok(())
    }

    /// Smallest pairwise distance between class means (infinity for a single
    /// class). Recorded so tests can assert the separation they rely on.
    pub fn min_mean_separation(&self) -> f64 {
        let mut min = f64::INFINITY;
        for i in 0..self.means.len() {
            for j in (i + 1)..self.means.len() {
                let d = crate::numcore::euclidean_distance(&self.means[i], &self.means[j])
                    .expect("validated dims");
                min = min.min(d);
            }
        }
        min
    }

    /// Draw class means uniformly in a box, rejecting layouts whose minimum
    /// pairwise separation falls below `min_separation`.
    pub fn separated_means(
        class_count: usize,
        dim: usize,
        min_separation: f64,
        rng: &mut RngStream,
    ) -> Result<Vec<Vector>> {
        let half = min_separation.max(1.0) * 1.5;
        'attempt: for _ in 0..10_000 {
            let means: Vec<Vector> = (0..class_count)
                .map(|_| Vector::from_fn(dim, |_| rng.uniform_in(-half, half)))
                .collect();
            for i in 0..class_count {
                for j in (i + 1)..class_count {
                    let d = crate::numcore::euclidean_distance(&means[i], &means[j])?;
                    if d < min_separation {
                        continue 'attempt;
                    }
                }
            }
            return Ok(means);
        }
        Err(Error::invalid(format!(
            "could not place {class_count} means at separation {min_separation} in {dim} dims"
        )))
    }
}

/// Sample `samples_per_class` points per class, mean plus isotropic noise,
/// in class-major order. Deterministic given the stream.
pub fn generate_gaussian_mixture(
    spec: &GaussianMixtureSpec,
    rng: &mut RngStream,
) -> Result<Dataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.class_count * spec.samples_per_class);
    for (label, mean) in spec.means.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let features = Vector::from_fn(spec.dim, |d| mean[d] + spec.stddev * rng.normal());
            samples.push(LabeledSample { features, label });
        }
    }
    Dataset::new(samples, spec.class_count)
}

// ---------------------------------------------------------------------------
// Dirichlet partitioning
// ---------------------------------------------------------------------------

/// Non-IID partition parameters: `q_k ~ Dir(alpha * prior)` per participant.
#[derive(Clone, Debug)]
pub struct PartitionSpec {
    pub participant_count: usize,
    pub alpha: f64,
    pub prior: Vec<f64>,
}

impl PartitionSpec {
    pub fn uniform(participant_count: usize, alpha: f64, class_count: usize) -> Self {
        PartitionSpec {
            participant_count,
            alpha,
            prior: vec![1.0 / class_count as f64; class_count],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.participant_count == 0 {
            return Err(Error::invalid("participant_count must be at least 1"));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::invalid(format!(
                "dirichlet alpha must be positive, got {}",
                self.alpha
            )));
        }
        let total: f64 = self.prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.prior.iter().any(|p| *p < 0.0) {
            return Err(Error::invalid("prior must be a distribution summing to 1"));
        }
        Ok(())
    }
}

/// Per-participant class-proportion vectors drawn from `Dir(alpha * prior)`
/// via normalized Gamma draws. Rows follow participant order.
pub fn draw_proportions(
    spec: &PartitionSpec,
    class_count: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(spec.participant_count);
    for _ in 0..spec.participant_count {
        let mut row = Vec::with_capacity(class_count);
        for c in 0..class_count {
            let shape = spec.alpha * spec.prior[c];
            // Prior mass can be zero for classes absent from this stage.
            row.push(if shape > 0.0 { rng.gamma(shape)? } else { 0.0 });
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 && total.is_finite() {
            for v in row.iter_mut() {
                *v /= total;
            }
        } else {
            // Tiny concentration parameters underflow all Gamma draws to
            // zero on rare occasions; fall back to a single random class.
            row.iter_mut().for_each(|v| *v = 0.0);
            row[rng.index(class_count)] = 1.0;
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Assign every sample to exactly one participant: each sample of class `c`
/// draws its owner from the per-class column of the proportion matrix.
/// Conservation holds by construction; empty participants are permitted.
pub fn dirichlet_partition(
    samples: &[LabeledSample],
    class_count: usize,
    spec: &PartitionSpec,
    rng: &mut RngStream,
) -> Result<Vec<Vec<LabeledSample>>> {
    spec.validate()?;
    if spec.prior.len() != class_count {
        return Err(Error::invalid(format!(
            "prior has {} entries for {} classes",
            spec.prior.len(),
            class_count
        )));
    }
    if samples.is_empty() {
        return Err(Error::invalid("dirichlet_partition of an empty dataset"));
    }
    let q = draw_proportions(spec, class_count, rng)?;
    // Column weights per class: probability that a class-c sample lands on
    // participant k.
    let mut columns = vec![vec![0.0; spec.participant_count]; class_count];
    for c in 0..class_count {
        let mut total = 0.0;
        for k in 0..spec.participant_count {
            columns[c][k] = q[k][c];
            total += q[k][c];
        }
        if total > 0.0 {
            for w in columns[c].iter_mut() {
                *w /= total;
            }
        } else {
            let k = rng.index(spec.participant_count);
            columns[c][k] = 1.0;
        }
    }

    let mut parts: Vec<Vec<LabeledSample>> = vec![Vec::new(); spec.participant_count];
    for s in samples {
        let weights = &columns[s.label];
        let r = rng.uniform01();
        let mut acc = 0.0;
        let mut owner = spec.participant_count - 1;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if r < acc {
                owner = k;
                break;
            }
        }
        parts[owner].push(s.clone());
    }
    Ok(parts)
}

// ---------------------------------------------------------------------------
// Stage schedule and splitting
// ---------------------------------------------------------------------------

/// Ordered class lists: one known stage followed by zero or more novel
/// stages. All lists are pairwise disjoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub known_classes: Vec<usize>,
    pub novel_stages: Vec<Vec<usize>>,
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.known_classes.is_empty() {
            return Err(Error::invalid("schedule needs at least one known class"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &c in self
            .known_classes
            .iter()
            .chain(self.novel_stages.iter().flatten())
        {
            if !seen.insert(c) {
                return Err(Error::invalid(format!(
                    "class {c} appears in more than one stage list"
                )));
            }
        }
        Ok(())
    }
}

/// Unlabelled features whose ground-truth class ids are retained for
/// evaluation only; the training pipeline never reads `hidden_labels`.
#[derive(Clone, Debug)]
pub struct HiddenLabelSet {
    pub features: Vec<Vector>,
    pub hidden_labels: Vec<usize>,
}

impl HiddenLabelSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// One novel stage worth of data. `class_ids` are the original dataset ids.
#[derive(Clone, Debug)]
pub struct NovelStageData {
    pub class_ids: Vec<usize>,
    pub train: HiddenLabelSet,
    pub test: HiddenLabelSet,
}

/// Output of [`split_stages`]. Known-set labels are remapped to indices into
/// `schedule.known_classes` so they align with classifier rows.
#[derive(Clone, Debug)]
pub struct StageData {
    pub known_train: Vec<LabeledSample>,
    pub known_test: Vec<LabeledSample>,
    pub novel_stages: Vec<NovelStageData>,
}

/// Split a dataset according to a stage schedule. A per-class test split of
/// `test_fraction` (the trailing samples in dataset order) is held out before
/// any partitioning. Novel sets strip labels but keep hidden ground truth.
pub fn split_stages(
    dataset: &Dataset,
    schedule: &StageSchedule,
    test_fraction: f64,
) -> Result<StageData> {
    schedule.validate()?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::invalid(format!(
            "test_fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let by_class = dataset.indices_by_class();
    for &c in schedule
        .known_classes
        .iter()
        .chain(schedule.novel_stages.iter().flatten())
    {
        if !by_class.contains_key(&c) {
            return Err(Error::invalid(format!(
                "schedule references class {c} which has no samples"
            )));
        }
    }

    let split_class = |class: usize| -> (Vec<usize>, Vec<usize>) {
        let idx = &by_class[&class];
        let n_test = (idx.len() as f64 * test_fraction).floor() as usize;
        let cut = idx.len() - n_test;
        (idx[..cut].to_vec(), idx[cut..].to_vec())
    };

    let mut known_train = Vec::new();
    let mut known_test = Vec::new();
    for (row, &class) in schedule.known_classes.iter().enumerate() {
        let (train, test) = split_class(class);
        for i in train {
            known_train.push(LabeledSample {
                features: dataset.samples[i].features.clone(),
                label: row,
            });
        }
        for i in test {
            known_test.push(LabeledSample {
                features: dataset.samples[i].features.clone(),
                label: row,
            });
        }
    }

    let mut novel_stages = Vec::new();
    for stage_classes in &schedule.novel_stages {
        let mut train = HiddenLabelSet {
            features: Vec::new(),
            hidden_labels: Vec::new(),
        };
        let mut test = HiddenLabelSet {
            features: Vec::new(),
            hidden_labels: Vec::new(),
        };
        for &class in stage_classes {
            let (tr, te) = split_class(class);
            for i in tr {
                train.features.push(dataset.samples[i].features.clone());
                train.hidden_labels.push(class);
            }
            for i in te {
                test.features.push(dataset.samples[i].features.clone());
                test.hidden_labels.push(class);
            }
        }
        novel_stages.push(NovelStageData {
            class_ids: stage_classes.clone(),
            train,
            test,
        });
    }

    Ok(StageData {
        known_train,
        known_test,
        novel_stages,
    })
}

// ---------------------------------------------------------------------------
// Embedding CSV
// ---------------------------------------------------------------------------

/// Rows of an embedding CSV. `labels` is `None` when the header carries no
/// label column, in which case the set is label-free.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvDataset {
    pub features: Vec<Vector>,
    pub labels: Option<Vec<usize>>,
    pub dim: usize,
}

impl CsvDataset {
    /// Convert into a labelled [`Dataset`]; fails on label-free files.
    pub fn into_dataset(self) -> Result<Dataset> {
        let labels = self.labels.ok_or_else(|| {
            Error::invalid("embedding CSV has no label column; a labelled dataset is required")
        })?;
        let class_count = labels.iter().copied().max().map_or(0, |m| m + 1);
        let samples = self
            .features
            .into_iter()
            .zip(labels)
            .map(|(features, label)| LabeledSample { features, label })
            .collect();
        Dataset::new(samples, class_count)
    }
}

/// Load an embedding CSV: header `f0,f1,...,f{d-1}[,label]`, then one decimal
/// row per sample. Line numbers in errors are 1-based file lines.
pub fn load_embedding_csv(path: &Path) -> Result<CsvDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embedding_csv(&text)
}

pub fn parse_embedding_csv(text: &str) -> Result<CsvDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let columns: Vec<&str> = header.trim_end().split(',').map(str::trim).collect();
    let labeled = columns.last() == Some(&"label");
    let dim = if labeled {
        columns.len() - 1
    } else {
        columns.len()
    };
    for (i, col) in columns.iter().take(dim).enumerate() {
        if *col != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column `f{i}`, found `{col}`"),
            });
        }
    }
    if dim == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "header declares no feature columns".into(),
        });
    }

    let mut features = Vec::new();
    let mut labels = if labeled { Some(Vec::new()) } else { None };
    for (idx, line) in lines {
        let line_no = idx + 1;
        let trimmed = line.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        let cells: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} cells, found {}", columns.len(), cells.len()),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for cell in &cells[..dim] {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("`{cell}` is not finite"),
                });
            }
            row.push(v);
        }
        if let Some(ref mut labels) = labels {
            let label: usize = cells[dim].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{}` is not a nonnegative integer label", cells[dim]),
            })?;
            labels.push(label);
        }
        features.push(Vector(row));
    }
    Ok(CsvDataset {
        features,
        labels,
        dim,
    })
}
