//! Kmeans with k-means++ seeding, density-based clustering, the rising-radius
//! schedule, and the potential-prototype-merge estimator that turns pooled
//! local prototypes into a global novel-class count plus global prototypes.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::numcore::{euclidean_distance, RngStream, Vector};

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub centroids: Vec<Vector>,
    pub assignment: Vec<usize>,
    /// Sum of squared distances from each point to its assigned centroid.
    pub inertia: f64,
}

fn check_points(points: &[Vector], what: &str) -> Result<usize> {
    let Some(first) = points.first() else {
        return Err(Error::invalid(format!("{what}: empty input")));
    };
    let dim = first.dim();
    if points.iter().any(|p| p.dim() != dim) {
        return Err(Error::invalid(format!("{what}: inconsistent dimensions")));
    }
    Ok(dim)
}

fn distinct_count(points: &[Vector]) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(points.len());
    for p in points {
        seen.insert(p.iter().map(|v| v.to_bits()).collect());
    }
    seen.len()
}

fn squared_distance(a: &Vector, b: &Vector) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid index (ties toward the lowest index) and its squared
/// distance.
fn nearest(point: &Vector, centroids: &[Vector]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_distance(point, centroid);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn kmeans_plus_plus_seed(points: &[Vector], k: usize, rng: &mut RngStream) -> Vec<Vector> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.index(points.len())].clone());
    let mut dist2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let r = rng.uniform01() * total;
            let mut acc = 0.0;
            let mut pick = points.len() - 1;
            for (i, &d) in dist2.iter().enumerate() {
                acc += d;
                if r < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Every point coincides with a chosen centroid; k was capped at
            // the distinct count so this only happens on the last duplicate.
            rng.index(points.len())
        };
        centroids.push(points[next].clone());
        for (d, p) in dist2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, centroids.last().unwrap()));
        }
    }
    centroids
}

/// Lloyd iterations with k-means++ seeding. `k` is capped at the number of
/// distinct points. Empty clusters are repaired by reseeding them at the
/// point farthest from its current centroid. Deterministic given the stream.
pub fn kmeans(
    points: &[Vector],
    k: usize,
    rng: &mut RngStream,
    max_iter: usize,
    tol: f64,
) -> Result<KmeansResult> {
    let dim = check_points(points, "kmeans")?;
    if k == 0 {
        return Err(Error::invalid("kmeans: k must be at least 1"));
    }
    let k = k.min(distinct_count(points));
    let mut centroids = kmeans_plus_plus_seed(points, k, rng);
    let mut assignment = vec![0usize; points.len()];
    let mut last_inertia = f64::INFINITY;

    for _ in 0..max_iter {
        // Assignment step.
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (c, d) = nearest(p, &centroids);
            assignment[i] = c;
            inertia += d;
        }
        debug_assert!(
            inertia <= last_inertia * (1.0 + 1e-9) + 1e-12,
            "kmeans inertia increased: {last_inertia} -> {inertia}"
        );
        last_inertia = inertia;

        // Empty-cluster repair: steal the point farthest from its centroid.
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        let mut stolen: HashSet<usize> = HashSet::new();
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far_idx = None;
            let mut far_d = -1.0;
            for (i, p) in points.iter().enumerate() {
                if stolen.contains(&i) || counts[assignment[i]] <= 1 {
                    continue;
                }
                let d = squared_distance(p, &centroids[assignment[i]]);
                if d > far_d {
                    far_d = d;
                    far_idx = Some(i);
                }
            }
            if let Some(i) = far_idx {
                counts[assignment[i]] -= 1;
                assignment[i] = c;
                counts[c] = 1;
                stolen.insert(i);
            }
        }

        // Update step.
        let mut sums = vec![Vector::zeros(dim); k];
        for (p, &a) in points.iter().zip(&assignment) {
            sums[a].add_scaled(p, 1.0);
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let mean = sums[c].scale(1.0 / counts[c] as f64);
            shift = shift.max(euclidean_distance(&mean, &centroids[c])?);
            centroids[c] = mean;
        }
        if shift < tol {
            break;
        }
    }

    // Final assignment against the converged centroids.
    let mut inertia = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (c, d) = nearest(p, &centroids);
        assignment[i] = c;
        inertia += d;
    }
    Ok(KmeansResult {
        centroids,
        assignment,
        inertia,
    })
}

/// Cluster representations into `min(c_l, distinct points)` groups and return
/// only the centroids — synthetic points that stand in for local data.
pub fn local_prototypes(reps: &[Vector], c_l: usize, rng: &mut RngStream) -> Result<Vec<Vector>> {
    check_points(reps, "local_prototypes")?;
    if c_l == 0 {
        return Err(Error::invalid("local_prototypes: class count must be positive"));
    }
    Ok(kmeans(reps, c_l, rng, KMEANS_MAX_ITER, KMEANS_TOL)?.centroids)
}

// ---------------------------------------------------------------------------
// DBSCAN
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DbscanResult {
    /// Per-point label: -1 for noise, otherwise a cluster id in `0..cluster_count`.
    pub labels: Vec<i64>,
    /// Number of clusters, noise excluded.
    pub cluster_count: usize,
}

/// Density clustering. A point is a core point when its eps-neighbourhood
/// (itself included) holds at least `min_size` points; clusters are connected
/// components of core points plus their border points. Border points attach
/// to the cluster of their nearest core neighbour, and cluster ids follow
/// first occurrence in input order, which makes the output stable under
/// input permutation up to that relabelling.
pub fn dbscan(points: &[Vector], eps: f64, min_size: usize) -> Result<DbscanResult> {
    if points.is_empty() {
        return Ok(DbscanResult {
            labels: Vec::new(),
            cluster_count: 0,
        });
    }
    check_points(points, "dbscan")?;
    if eps < 0.0 {
        return Err(Error::invalid("dbscan: eps must be nonnegative"));
    }
    if min_size == 0 {
        return Err(Error::invalid("dbscan: min_size must be at least 1"));
    }

    let n = points.len();
    let mut neighbors: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = euclidean_distance(&points[i], &points[j])?;
            if d <= eps {
                neighbors[i].push((j, d));
                neighbors[j].push((i, d));
            }
        }
    }
    let core: Vec<bool> = neighbors.iter().map(|ns| ns.len() + 1 >= min_size).collect();

    // Union-find over core points.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        if !core[i] {
            continue;
        }
        for &(j, _) in &neighbors[i] {
            if core[j] {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }

    let mut labels = vec![-1i64; n];
    let mut root_label: std::collections::HashMap<usize, i64> = std::collections::HashMap::new();
    let mut next = 0i64;
    for i in 0..n {
        if core[i] {
            let root = find(&mut parent, i);
            let label = *root_label.entry(root).or_insert_with(|| {
                let l = next;
                next += 1;
                l
            });
            labels[i] = label;
        }
    }
    // Border points: non-core with at least one core neighbour.
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for &(j, d) in &neighbors[i] {
            if core[j] {
                let better = match best {
                    None => true,
                    Some((bd, bj)) => d < bd || (d == bd && j < bj),
                };
                if better {
                    best = Some((d, j));
                }
            }
        }
        if let Some((_, j)) = best {
            labels[i] = labels[j];
        }
    }

    Ok(DbscanResult {
        labels,
        cluster_count: next as usize,
    })
}

// ---------------------------------------------------------------------------
// Rising radius and PPM
// ---------------------------------------------------------------------------

/// The `E + 1` radii `eps_e = min D + (e/E)(max D - min D)`, where `D` ranges
/// over all pairwise distances of the pool. Endpoints are exactly `min D`
/// and `max D`.
pub fn rising_eps_schedule(points: &[Vector], rising_steps: usize) -> Result<Vec<f64>> {
    check_points(points, "rising_eps_schedule")?;
    if points.len() < 2 {
        return Err(Error::invalid("rising_eps_schedule: need at least 2 points"));
    }
    if rising_steps == 0 {
        return Err(Error::invalid("rising_eps_schedule: need at least 1 step"));
    }
    let mut min_d = f64::INFINITY;
    let mut max_d = f64::NEG_INFINITY;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let d = euclidean_distance(&points[i], &points[j])?;
            min_d = min_d.min(d);
            max_d = max_d.max(d);
        }
    }
    let e_total = rising_steps as f64;
    Ok((0..=rising_steps)
        .map(|e| {
            if e == rising_steps {
                max_d
            } else {
                min_d + (e as f64 / e_total) * (max_d - min_d)
            }
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct PpmResult {
    /// Estimated global novel class count (at least 1 for a usable pool).
    pub estimated_count: usize,
    /// Kmeans centroids of the pool with `k = estimated_count`.
    pub global_prototypes: Vec<Vector>,
    /// `(eps_e, cluster count)` for every radius in schedule order.
    pub per_step_counts: Vec<(f64, usize)>,
}

/// Sweep density clustering over the rising radii, take the maximum cluster
/// count as the estimated class number, then cluster the pool into that many
/// groups to obtain global prototypes. A pool whose sweep never forms a
/// cluster still yields a single prototype.
pub fn ppm_estimate(
    pool: &[Vector],
    rising_steps: usize,
    n_size: usize,
    rng: &mut RngStream,
) -> Result<PpmResult> {
    if pool.len() < 2 {
        return Err(Error::invalid("ppm_estimate: pool needs at least 2 points"));
    }
    let schedule = rising_eps_schedule(pool, rising_steps)?;
    let mut per_step_counts = Vec::with_capacity(schedule.len());
    let mut best = 0usize;
    for eps in schedule {
        let result = dbscan(pool, eps, n_size)?;
        best = best.max(result.cluster_count);
        per_step_counts.push((eps, result.cluster_count));
    }
    let estimated_count = best.max(1);
    let global_prototypes = kmeans(pool, estimated_count, rng, KMEANS_MAX_ITER, KMEANS_TOL)?.centroids;
    Ok(PpmResult {
        estimated_count,
        global_prototypes,
        per_step_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{dirichlet_partition, generate_gaussian_mixture, GaussianMixtureSpec, PartitionSpec};

    fn v(data: &[f64]) -> Vector {
        Vector(data.to_vec())
    }

    #[test]
    fn kmeans_k1_is_the_mean() {
        let points = vec![v(&[0.0, 0.0]), v(&[2.0, 0.0]), v(&[1.0, 3.0])];
        let mut rng = RngStream::from_seed(1);
        let result = kmeans(&points, 1, &mut rng, 100, 1e-9).unwrap();
        assert_eq!(result.centroids.len(), 1);
        assert!((result.centroids[0][0] - 1.0).abs() < 1e-12);
        assert!((result.centroids[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_duplicated_locations_zero_inertia() {
        let mut points = Vec::new();
        for loc in [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]] {
            points.push(v(&loc));
            points.push(v(&loc));
        }
        let mut rng = RngStream::from_seed(2);
        let result = kmeans(&points, 3, &mut rng, 100, 1e-9).unwrap();
        assert!(result.inertia < 1e-20);
        let mut got: Vec<Vec<u64>> = result
            .centroids
            .iter()
            .map(|c| c.iter().map(|x| x.to_bits()).collect())
            .collect();
        got.sort();
        got.dedup();
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn kmeans_caps_k_at_distinct_points() {
        let points = vec![v(&[1.0, 2.0]); 5];
        let mut rng = RngStream::from_seed(3);
        let result = kmeans(&points, 80, &mut rng, 100, 1e-9).unwrap();
        assert_eq!(result.centroids.len(), 1);
        assert_eq!(result.centroids[0], v(&[1.0, 2.0]));
    }

    /// Exhaustive best inertia over all assignments of `points` into at most
    /// `k` labelled groups.
    fn brute_force_best_inertia(points: &[Vector], k: usize) -> f64 {
        let n = points.len();
        let mut best = f64::INFINITY;
        let total = k.pow(n as u32);
        for code in 0..total {
            let mut c = code;
            let mut assignment = Vec::with_capacity(n);
            for _ in 0..n {
                assignment.push(c % k);
                c /= k;
            }
            let dim = points[0].dim();
            let mut sums = vec![Vector::zeros(dim); k];
            let mut counts = vec![0usize; k];
            for (p, &a) in points.iter().zip(&assignment) {
                sums[a].add_scaled(p, 1.0);
                counts[a] += 1;
            }
            let mut inertia = 0.0;
            for (p, &a) in points.iter().zip(&assignment) {
                if counts[a] == 0 {
                    continue;
                }
                let mean = sums[a].scale(1.0 / counts[a] as f64);
                inertia += squared_distance(p, &mean);
            }
            best = best.min(inertia);
        }
        best
    }

    #[test]
    fn kmeans_reaches_global_optimum_on_most_seeds() {
        // 12 points in the plane, 3 natural groups plus stragglers.
        let points = vec![
            v(&[0.0, 0.0]),
            v(&[0.5, 0.2]),
            v(&[-0.3, 0.4]),
            v(&[0.1, -0.5]),
            v(&[8.0, 8.0]),
            v(&[8.4, 7.7]),
            v(&[7.6, 8.3]),
            v(&[8.1, 8.6]),
            v(&[-7.0, 6.0]),
            v(&[-7.5, 6.4]),
            v(&[-6.6, 5.7]),
            v(&[-7.2, 5.5]),
        ];
        let optimum = brute_force_best_inertia(&points, 3);
        let mut hits = 0;
        for seed in 0..10u64 {
            let mut rng = RngStream::from_seed(seed).child("kmeans");
            let result = kmeans(&points, 3, &mut rng, 300, 1e-9).unwrap();
            if (result.inertia - optimum).abs() <= 1e-9 * optimum.max(1.0) {
                hits += 1;
            }
        }
        assert!(hits >= 8, "kmeans matched the optimum on {hits}/10 seeds");
    }

    #[test]
    fn local_prototypes_cap_and_mean() {
        let mut rng = RngStream::from_seed(4);
        let reps = vec![v(&[3.0, 1.0]); 5];
        let protos = local_prototypes(&reps, 80, &mut rng).unwrap();
        assert_eq!(protos, vec![v(&[3.0, 1.0])]);

        let reps = vec![v(&[0.0, 0.0]), v(&[4.0, 0.0]), v(&[2.0, 3.0])];
        let protos = local_prototypes(&reps, 1, &mut rng).unwrap();
        assert!((protos[0][0] - 2.0).abs() < 1e-12);
        assert!((protos[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn local_prototypes_recover_separated_gaussians() {
        let mut rng = RngStream::from_seed(6);
        let means = GaussianMixtureSpec::separated_means(4, 8, 10.0, &mut rng.child("means")).unwrap();
        let spec = GaussianMixtureSpec {
            class_count: 4,
            dim: 8,
            means: means.clone(),
            stddev: 1.0,
            samples_per_class: 60,
        };
        let data = generate_gaussian_mixture(&spec, &mut rng.child("data")).unwrap();
        let reps: Vec<Vector> = data.samples.iter().map(|s| s.features.clone()).collect();
        let protos = local_prototypes(&reps, 8, &mut rng.child("kmeans")).unwrap();
        // Every centroid lies within 3 stddev of some true mean.
        for p in &protos {
            let nearest = means
                .iter()
                .map(|m| euclidean_distance(p, m).unwrap())
                .fold(f64::INFINITY, f64::min);
            assert!(nearest <= 3.0, "centroid {nearest} stddevs away");
        }
    }

    #[test]
    fn dbscan_two_clumps() {
        let points = vec![
            v(&[0.0, 0.0]),
            v(&[0.5, 0.0]),
            v(&[0.0, 0.5]),
            v(&[100.0, 0.0]),
            v(&[100.5, 0.0]),
            v(&[100.0, 0.5]),
        ];
        let result = dbscan(&points, 2.0, 2).unwrap();
        assert_eq!(result.cluster_count, 2);
        assert!(result.labels.iter().all(|&l| l >= 0));
        assert_eq!(result.labels[0], result.labels[1]);
        assert_eq!(result.labels[3], result.labels[4]);
        assert_ne!(result.labels[0], result.labels[3]);
    }

    #[test]
    fn dbscan_huge_eps_single_cluster() {
        let points = vec![v(&[0.0]), v(&[5.0]), v(&[100.0])];
        let result = dbscan(&points, 1000.0, 2).unwrap();
        assert_eq!(result.cluster_count, 1);
        assert!(result.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn dbscan_isolated_point_is_noise() {
        let points = vec![
            v(&[0.0, 0.0]),
            v(&[0.5, 0.0]),
            v(&[50.0, 50.0]), // isolated
            v(&[100.0, 0.0]),
            v(&[100.5, 0.0]),
        ];
        let result = dbscan(&points, 2.0, 2).unwrap();
        assert_eq!(result.labels[2], -1);
        assert_eq!(result.cluster_count, 2);
    }

    #[test]
    fn dbscan_order_invariant_up_to_relabeling() {
        let mut rng = RngStream::from_seed(9);
        let points: Vec<Vector> = (0..40)
            .map(|i| {
                let center = if i % 3 == 0 { 0.0 } else if i % 3 == 1 { 10.0 } else { 30.0 };
                Vector::from_fn(2, |_| center + rng.normal())
            })
            .collect();
        let base = dbscan(&points, 3.0, 2).unwrap();

        let mut order: Vec<usize> = (0..points.len()).collect();
        rng.shuffle(&mut order);
        let permuted: Vec<Vector> = order.iter().map(|&i| points[i].clone()).collect();
        let shuffled = dbscan(&permuted, 3.0, 2).unwrap();

        assert_eq!(base.cluster_count, shuffled.cluster_count);
        // Same partition of the underlying points.
        for a in 0..points.len() {
            for b in 0..points.len() {
                let same_base = base.labels[order[a]] == base.labels[order[b]]
                    && base.labels[order[a]] >= 0;
                let same_shuf = shuffled.labels[a] == shuffled.labels[b] && shuffled.labels[a] >= 0;
                assert_eq!(same_base, same_shuf);
            }
        }
    }

    #[test]
    fn rising_eps_endpoints_and_count() {
        let points = vec![v(&[0.0]), v(&[1.0]), v(&[4.0])];
        let schedule = rising_eps_schedule(&points, 50).unwrap();
        assert_eq!(schedule.len(), 51);
        assert_eq!(schedule[0], 1.0); // min pairwise distance
        assert_eq!(schedule[50], 4.0); // max pairwise distance
        assert!(schedule.windows(2).all(|w| w[0] <= w[1]));

        let identical = vec![v(&[2.0, 2.0]); 4];
        let flat = rising_eps_schedule(&identical, 10).unwrap();
        assert!(flat.iter().all(|&e| e == 0.0));

        assert!(rising_eps_schedule(&[v(&[0.0])], 10).is_err());
    }

    #[test]
    fn ppm_tight_clump_estimates_one() {
        // A single dense region with no internal gaps: mutually equidistant
        // points (a scaled simplex), so every rising radius either connects
        // nothing or everything.
        let mut rng = RngStream::from_seed(12);
        let pool: Vec<Vector> = (0..12)
            .map(|i| Vector::from_fn(12, |d| if d == i { 0.25 } else { 0.0 }))
            .collect();
        let result = ppm_estimate(&pool, 50, 2, &mut rng).unwrap();
        assert_eq!(result.estimated_count, 1);
        assert_eq!(result.global_prototypes.len(), 1);
    }

    #[test]
    fn ppm_degenerate_pool_all_identical() {
        let pool = vec![v(&[1.0, 1.0]); 6];
        let mut rng = RngStream::from_seed(13);
        let result = ppm_estimate(&pool, 50, 2, &mut rng).unwrap();
        assert_eq!(result.estimated_count, 1);
        assert_eq!(result.global_prototypes, vec![v(&[1.0, 1.0])]);
    }

    #[test]
    fn ppm_count_is_max_of_steps() {
        let mut rng = RngStream::from_seed(14);
        let mut pool = Vec::new();
        for center in [[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]] {
            for _ in 0..8 {
                pool.push(Vector::from_fn(2, |d| center[d] + 0.3 * rng.normal()));
            }
        }
        let result = ppm_estimate(&pool, 50, 2, &mut rng).unwrap();
        let max_step = result.per_step_counts.iter().map(|&(_, c)| c).max().unwrap();
        assert_eq!(result.estimated_count, max_step.max(1));
        assert_eq!(result.global_prototypes.len(), result.estimated_count);
        assert_eq!(result.per_step_counts.len(), 51);
    }

    #[test]
    fn ppm_recovers_separated_class_count_from_federated_prototypes() {
        // Local prototypes from 10 heterogeneous participants over 4
        // well-separated classes (30x the within-class spread; at this
        // dimensionality smaller ratios let the rising radii resolve the
        // percolation transition inside a class cloud and overcount):
        // the sweep's max count should recover 4.
        let g = 4;
        let mut hits = 0;
        let trials = 10;
        for seed in 0..trials {
            let mut rng = RngStream::from_seed(1000 + seed);
            let means = GaussianMixtureSpec::separated_means(g, 16, 30.0, &mut rng.child("means")).unwrap();
            let spec = GaussianMixtureSpec {
                class_count: g,
                dim: 16,
                means,
                stddev: 1.0,
                samples_per_class: 50,
            };
            let data = generate_gaussian_mixture(&spec, &mut rng.child("data")).unwrap();
            let parts = dirichlet_partition(
                &data.samples,
                g,
                &PartitionSpec::uniform(10, 0.1, g),
                &mut rng.child("partitioning"),
            )
            .unwrap();
            let mut pool = Vec::new();
            for (k, part) in parts.iter().enumerate() {
                if part.is_empty() {
                    continue;
                }
                let reps: Vec<Vector> = part.iter().map(|s| s.features.clone()).collect();
                pool.extend(local_prototypes(&reps, 10, &mut rng.child(&format!("kmeans-{k}"))).unwrap());
            }
            rng.child("shuffle").shuffle(&mut pool);
            let result = ppm_estimate(&pool, 50, 2, &mut rng.child("ppm")).unwrap();
            assert!(
                (3..=5).contains(&result.estimated_count),
                "estimate {} outside g +- 1",
                result.estimated_count
            );
            if result.estimated_count == g {
                hits += 1;
            }
        }
        assert!(hits >= 8, "exact estimate on {hits}/{trials} seeds");
    }

    #[test]
    fn ppm_translation_equivariance() {
        let mut rng = RngStream::from_seed(15);
        let mut pool = Vec::new();
        for center in [[0.0, 0.0, 0.0], [15.0, 0.0, 0.0], [0.0, 15.0, 0.0]] {
            for _ in 0..6 {
                pool.push(Vector::from_fn(3, |d| center[d] + 0.5 * rng.normal()));
            }
        }
        let shift = v(&[100.0, -40.0, 7.0]);
        let moved: Vec<Vector> = pool.iter().map(|p| p.add(&shift)).collect();

        let a = ppm_estimate(&pool, 30, 2, &mut RngStream::from_seed(77)).unwrap();
        let b = ppm_estimate(&moved, 30, 2, &mut RngStream::from_seed(77)).unwrap();
        assert_eq!(a.estimated_count, b.estimated_count);
        for (pa, pb) in a.global_prototypes.iter().zip(&b.global_prototypes) {
            let back = pb.sub(&shift);
            assert!(euclidean_distance(pa, &back).unwrap() < 1e-9);
        }
    }
}
