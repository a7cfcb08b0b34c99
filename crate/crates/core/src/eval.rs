//! Evaluation metrics: minimum-cost assignment, clustering accuracy under the
//! optimal cluster-to-class matching, known/overall classification accuracy,
//! and the forgetting measure.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numcore::{argmax_stable, Matrix};

/// Minimum-total-cost assignment on a finite cost matrix.
///
/// Rectangular inputs are padded internally with zero-cost dummy rows or
/// columns to square; dummy pairs are stripped from the returned matching,
/// which is sorted by row index.
pub fn hungarian_assignment(cost: &Matrix) -> Result<(Vec<(usize, usize)>, f64)> {
    let (n_rows, n_cols) = (cost.rows(), cost.cols());
    if n_rows == 0 || n_cols == 0 {
        return Err(Error::invalid("hungarian_assignment: empty cost matrix"));
    }
    if !cost.is_finite() {
        return Err(Error::invalid("hungarian_assignment: non-finite cost"));
    }
    let n = n_rows.max(n_cols);
    let at = |r: usize, c: usize| -> f64 {
        if r < n_rows && c < n_cols {
            cost.get(r, c)
        } else {
            0.0
        }
    };

    // Potentials-based O(n^3) shortest augmenting path formulation, with
    // 1-based sentinel indexing: `matched_row[j]` is the row matched to
    // column j; column 0 is the virtual start.
    let mut row_potential = vec![0.0f64; n + 1];
    let mut col_potential = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut path = vec![0usize; n + 1];

    for row in 1..=n {
        matched_row[0] = row;
        let mut j0 = 0usize;
        let mut min_slack = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - row_potential[i0] - col_potential[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    path[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    row_potential[matched_row[j]] += delta;
                    col_potential[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // Augment along the found path.
        loop {
            let j1 = path[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut matching = Vec::new();
    let mut total = 0.0;
    for j in 1..=n {
        let i = matched_row[j];
        let (r, c) = (i - 1, j - 1);
        if r < n_rows && c < n_cols {
            matching.push((r, c));
            total += cost.get(r, c);
        }
    }
    matching.sort_unstable();
    Ok((matching, total))
}

/// Clustering accuracy: the fraction of samples explained by the best
/// one-to-one matching between predicted cluster ids and ground-truth class
/// ids. Cluster and class ids may be arbitrary; a mismatch between the
/// number of clusters and classes is handled by zero-count padding.
pub fn novel_cluster_accuracy(pred_clusters: &[usize], true_labels: &[usize]) -> Result<f64> {
    if pred_clusters.len() != true_labels.len() {
        return Err(Error::invalid(format!(
            "novel_cluster_accuracy: {} predictions for {} labels",
            pred_clusters.len(),
            true_labels.len()
        )));
    }
    if pred_clusters.is_empty() {
        return Err(Error::invalid("novel_cluster_accuracy: empty input"));
    }
    let mut cluster_index: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in pred_clusters {
        let next = cluster_index.len();
        cluster_index.entry(c).or_insert(next);
    }
    let mut class_index: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in true_labels {
        let next = class_index.len();
        class_index.entry(c).or_insert(next);
    }
    let (rows, cols) = (cluster_index.len(), class_index.len());
    let mut counts = vec![0u64; rows * cols];
    for (&p, &t) in pred_clusters.iter().zip(true_labels) {
        counts[cluster_index[&p] * cols + class_index[&t]] += 1;
    }
    // Maximum agreement == minimum of negated counts.
    let cost = Matrix::new(
        rows,
        cols,
        counts.iter().map(|&c| -(c as f64)).collect(),
    )?;
    let (matching, _) = hungarian_assignment(&cost)?;
    let agreement: u64 = matching
        .iter()
        .map(|&(r, c)| counts[r * cols + c])
        .sum();
    Ok(agreement as f64 / pred_clusters.len() as f64)
}

/// Fraction of test samples whose argmax over all current logits equals the
/// ground-truth label. Labels index classifier rows directly.
pub fn known_accuracy(model: &Model, test: &[crate::dataset::LabeledSample]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::UndefinedMetric("known_accuracy of an empty test set".into()));
    }
    let mut correct = 0usize;
    for sample in test {
        let rep = model.extractor.forward(&sample.features)?;
        let logits = model.classifier.logits(&rep)?;
        if argmax_stable(&logits)? == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Sample-weighted combination of a known-class accuracy and a novel-class
/// accuracy.
pub fn overall_accuracy(
    known_acc: f64,
    novel_acc: f64,
    n_known: usize,
    n_novel: usize,
) -> Result<f64> {
    if n_known == 0 && n_novel == 0 {
        return Err(Error::UndefinedMetric("overall_accuracy with no samples".into()));
    }
    Ok((known_acc * n_known as f64 + novel_acc * n_novel as f64) / (n_known + n_novel) as f64)
}

/// Accuracy drop on known classes after novel learning; positive values mean
/// forgetting, negative values are allowed.
pub fn forgetting(known_acc_before: f64, known_acc_after: f64) -> f64 {
    known_acc_before - known_acc_after
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{RngStream, Vector};

    #[test]
    fn hungarian_identity_diagonal() {
        let mut cost = Matrix::zeros(3, 3);
        for r in 0..3 {
            for c in 0..3 {
                if r != c {
                    cost.set(r, c, 1.0);
                }
            }
        }
        let (matching, total) = hungarian_assignment(&cost).unwrap();
        assert_eq!(matching, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn hungarian_two_by_two() {
        let cost = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let (matching, total) = hungarian_assignment(&cost).unwrap();
        assert_eq!(matching, vec![(0, 0), (1, 1)]);
        assert_eq!(total, 2.0);
    }

    fn brute_force_min_cost(cost: &Matrix) -> f64 {
        // Min over all injections of the smaller side into the larger.
        let n = cost.rows().max(cost.cols());
        let mut cols: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut cols, 0, &mut |perm| {
            let mut total = 0.0;
            for (r, &c) in perm.iter().enumerate() {
                if r < cost.rows() && c < cost.cols() {
                    total += cost.get(r, c);
                }
            }
            best = best.min(total);
        });
        best
    }

    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }

    #[test]
    fn hungarian_matches_exhaustive_search() {
        let mut rng = RngStream::from_seed(31);
        for trial in 0..30 {
            let rows = 2 + rng.index(5);
            let cols = 2 + rng.index(5);
            let data: Vec<f64> = (0..rows * cols)
                .map(|_| (rng.index(100)) as f64)
                .collect();
            let cost = Matrix::new(rows, cols, data).unwrap();
            let (_, total) = hungarian_assignment(&cost).unwrap();
            let expected = brute_force_min_cost(&cost);
            assert_eq!(total, expected, "trial {trial} {rows}x{cols}");
        }
    }

    #[test]
    fn hungarian_beats_random_permutations() {
        let mut rng = RngStream::from_seed(32);
        let n = 8;
        let data: Vec<f64> = (0..n * n).map(|_| rng.uniform01() * 10.0).collect();
        let cost = Matrix::new(n, n, data).unwrap();
        let (_, total) = hungarian_assignment(&cost).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        for _ in 0..1000 {
            rng.shuffle(&mut perm);
            let other: f64 = perm.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum();
            assert!(total <= other + 1e-9);
        }
    }

    #[test]
    fn cluster_accuracy_perfect_and_permuted() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        assert_eq!(novel_cluster_accuracy(&truth, &truth).unwrap(), 1.0);
        // Any fixed relabelling of the predictions is still perfect.
        let permuted: Vec<usize> = truth.iter().map(|&c| [7, 3, 5][c]).collect();
        assert_eq!(novel_cluster_accuracy(&permuted, &truth).unwrap(), 1.0);
    }

    #[test]
    fn cluster_accuracy_partial_agreement() {
        let pred = vec![0, 0, 1, 1];
        let truth = vec![5, 5, 5, 6];
        assert_eq!(novel_cluster_accuracy(&pred, &truth).unwrap(), 0.75);
    }

    #[test]
    fn cluster_accuracy_relabel_invariance_and_lower_bound() {
        // Predictions formed as a function of the true label cannot score
        // below the modal class frequency.
        let mut rng = RngStream::from_seed(33);
        for _ in 0..50 {
            let n = 3 + rng.index(40);
            let classes = 1 + rng.index(5);
            let truth: Vec<usize> = (0..n).map(|_| rng.index(classes)).collect();
            let map: Vec<usize> = (0..classes).map(|_| rng.index(classes)).collect();
            let pred: Vec<usize> = truth.iter().map(|&t| map[t]).collect();
            let acc = novel_cluster_accuracy(&pred, &truth).unwrap();

            let mut freq = vec![0usize; classes];
            for &t in &truth {
                freq[t] += 1;
            }
            let modal = *freq.iter().max().unwrap() as f64 / n as f64;
            assert!(acc >= modal - 1e-12, "acc {acc} below modal {modal}");
            assert!(acc <= 1.0);

            // Bijective relabelling leaves the score unchanged.
            let relabel: Vec<usize> = {
                let mut ids: Vec<usize> = (0..classes).collect();
                rng.shuffle(&mut ids);
                ids
            };
            let relabelled: Vec<usize> = pred.iter().map(|&p| relabel[p] + 100).collect();
            let acc2 = novel_cluster_accuracy(&relabelled, &truth).unwrap();
            assert_eq!(acc, acc2);
        }
    }

    #[test]
    fn known_accuracy_contracts() {
        use crate::dataset::LabeledSample;
        use crate::model::Classifier;
        use crate::model::{Activation, FeatureExtractor, Layer};

        // Identity extractor + orthogonal prototype rows: samples placed at
        // the prototypes classify perfectly.
        let dim = 3;
        let mut eye = Matrix::zeros(dim, dim);
        for i in 0..dim {
            eye.set(i, i, 1.0);
        }
        let extractor = FeatureExtractor {
            layers: vec![Layer {
                weights: eye.clone(),
                bias: Vector::zeros(dim),
                activation: Activation::Identity,
            }],
        };
        let model = Model::from_parts(extractor, Classifier::from_weights(eye));
        let test: Vec<LabeledSample> = (0..dim)
            .map(|c| LabeledSample {
                features: Vector::from_fn(dim, |d| if d == c { 1.0 } else { 0.0 }),
                label: c,
            })
            .collect();
        assert_eq!(known_accuracy(&model, &test).unwrap(), 1.0);
        assert!(matches!(
            known_accuracy(&model, &[]),
            Err(Error::UndefinedMetric(_))
        ));

        // Randomized labels: accuracy concentrates near 1/C.
        let mut rng = RngStream::from_seed(55);
        let n = 3000;
        let random: Vec<LabeledSample> = (0..n)
            .map(|_| LabeledSample {
                features: Vector::from_fn(dim, |_| rng.normal()),
                label: rng.index(dim),
            })
            .collect();
        let acc = known_accuracy(&model, &random).unwrap();
        let p = 1.0 / dim as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (acc - p).abs() <= 3.0 * sigma,
            "random-label accuracy {acc} outside {p} +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn overall_accuracy_contracts() {
        assert_eq!(overall_accuracy(0.7, 0.0, 10, 0).unwrap(), 0.7);
        assert_eq!(overall_accuracy(0.8, 0.4, 50, 50).unwrap(), 0.6);
        assert!(matches!(
            overall_accuracy(0.5, 0.5, 0, 0),
            Err(Error::UndefinedMetric(_))
        ));
        // Lies between its constituents.
        let v = overall_accuracy(0.9, 0.3, 17, 5).unwrap();
        assert!(v >= 0.3 && v <= 0.9);
    }

    #[test]
    fn forgetting_contracts() {
        assert!((forgetting(0.727, 0.726) - 0.001).abs() < 1e-12);
        assert_eq!(forgetting(0.5, 0.5), 0.0);
        assert!((forgetting(0.5, 0.6) - (-0.1)).abs() < 1e-15);
    }
}
