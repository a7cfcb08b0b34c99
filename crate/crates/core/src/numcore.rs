//! Deterministic numeric kernel: dense vectors and matrices, distance and
//! softmax primitives, and a seeded random stream with named substreams.
//!
//! Everything here accumulates in `f64`. All functions are pure; the only
//! stateful type is [`RngStream`], which is single-owner by design — derive
//! a child stream per concurrent task instead of sharing one.

use rand::Rng;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense real vector. The currency of the whole crate: inputs,
/// representations and prototypes are all `Vector`s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize) -> f64) -> Self {
        Vector((0..dim).map(&mut f).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    /// Dot product. Panics on dimension mismatch; fallible entry points
    /// validate dimensions before calling in here.
    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "vector dimension mismatch");
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector dimension mismatch");
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector dimension mismatch");
        Vector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * factor).collect())
    }

    /// `self += factor * other`, in place.
    pub fn add_scaled(&mut self, other: &Vector, factor: f64) {
        assert_eq!(self.dim(), other.dim(), "vector dimension mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|a| a.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense row-major matrix. Holds layer weight blocks and the classifier
/// weight matrix (whose rows double as class prototypes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, 0));
        }
        let cols = rows[0].dim();
        if rows.iter().any(|r| r.dim() != cols) {
            return Err(Error::invalid("rows have inconsistent dimensions"));
        }
        let data = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_vector(&self, r: usize) -> Vector {
        Vector(self.row(r).to_vec())
    }

    pub fn push_row(&mut self, row: &Vector) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.dim();
        }
        if row.dim() != self.cols {
            return Err(Error::invalid(format!(
                "cannot append a {}-dim row to a {}-column matrix",
                row.dim(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row.as_slice());
        self.rows += 1;
        Ok(())
    }

    /// `self * v` for a `cols`-dimensional `v`.
    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(v.dim(), self.cols, "matvec dimension mismatch");
        Vector(
            (0..self.rows)
                .map(|r| {
                    self.row(r)
                        .iter()
                        .zip(v.iter())
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect(),
        )
    }

    /// `self^T * v` for a `rows`-dimensional `v`.
    pub fn transpose_matvec(&self, v: &Vector) -> Vector {
        assert_eq!(v.dim(), self.rows, "transpose_matvec dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let f = v[r];
            for (o, w) in out.iter_mut().zip(row) {
                *o += f * w;
            }
        }
        Vector(out)
    }

    /// `self += factor * other`, in place.
    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "matrix shape mismatch"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    /// Rank-1 update `self += factor * u * v^T`.
    pub fn add_outer(&mut self, u: &Vector, v: &Vector, factor: f64) {
        assert_eq!(u.dim(), self.rows, "outer product row mismatch");
        assert_eq!(v.dim(), self.cols, "outer product col mismatch");
        for r in 0..self.rows {
            let f = factor * u[r];
            for (a, b) in self.row_mut(r).iter_mut().zip(v.iter()) {
                *a += f * b;
            }
        }
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, f64> {
        self.data.iter_mut()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Internal consistency check, used after deserializing checkpoints.
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::invalid(format!(
                "matrix claims {}x{} but holds {} elements",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Spec operations
// ---------------------------------------------------------------------------

/// Euclidean distance between two equal-dimension vectors.
pub fn euclidean_distance(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "euclidean_distance: dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Cosine similarity in [-1, 1]. Zero-norm inputs are degenerate.
pub fn cosine_similarity(a: &Vector, b: &Vector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "cosine_similarity: dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput(
            "cosine_similarity of a zero-norm vector".into(),
        ));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Temperature softmax with max-subtraction for stability.
pub fn softmax(logits: &Vector, temperature: f64) -> Result<Vector> {
    if temperature <= 0.0 {
        return Err(Error::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if logits.dim() == 0 {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&x| ((x - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(Vector(exps.into_iter().map(|e| e / total).collect()))
}

/// Index of the maximum entry; ties break toward the lowest index.
pub fn argmax_stable(v: &Vector) -> Result<usize> {
    if v.dim() == 0 {
        return Err(Error::invalid("argmax of an empty vector"));
    }
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// RngStream
// ---------------------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seeded random stream backed by ChaCha12.
///
/// Child streams are derived from the parent's *seed material* plus a label,
/// never from its draw position, so adding draws anywhere in the program
/// cannot perturb any other stream. Identical seeds produce bitwise-identical
/// draw sequences on every platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    material: [u64; 4],
    rng: ChaCha12Rng,
}

fn rng_from_material(material: [u64; 4]) -> ChaCha12Rng {
    let mut seed = [0u8; 32];
    for (chunk, lane) in seed.chunks_exact_mut(8).zip(material.iter()) {
        chunk.copy_from_slice(&lane.to_le_bytes());
    }
    ChaCha12Rng::from_seed(seed)
}

impl RngStream {
    /// Root stream for a 64-bit experiment seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut material = [0u64; 4];
        let mut x = seed;
        for lane in material.iter_mut() {
            x = splitmix64(x);
            *lane = x;
        }
        RngStream {
            material,
            rng: rng_from_material(material),
        }
    }

    /// Derive an independent labelled substream. Children with distinct
    /// labels are statistically independent; deriving is insensitive to how
    /// many draws the parent has made.
    pub fn child(&self, label: &str) -> Self {
        let h = fnv1a(label.as_bytes());
        let mut material = [0u64; 4];
        for (i, lane) in material.iter_mut().enumerate() {
            *lane = splitmix64(splitmix64(self.material[i] ^ h) ^ (i as u64).wrapping_mul(0xa076_1d64_78bd_642f));
        }
        RngStream {
            material,
            rng: rng_from_material(material),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in [0, 1).
    pub fn uniform01(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform01()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        rand_distr::StandardNormal.sample(&mut self.rng)
    }

    /// Gamma(shape, 1) draw; shape must be positive.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        let dist = rand_distr::Gamma::new(shape, 1.0)
            .map_err(|e| Error::invalid(format!("gamma shape {shape}: {e}")))?;
        Ok(dist.sample(&mut self.rng))
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index draw over an empty range");
        self.rng.random_range(0..n)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices sampled uniformly from `0..n`, in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} of {n} without replacement");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclidean_three_four_five() {
        let a = Vector(vec![0.0, 0.0]);
        let b = Vector(vec![3.0, 4.0]);
        assert_eq!(euclidean_distance(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn euclidean_identity_is_zero() {
        let a = Vector(vec![1.5, -2.0, 7.0]);
        assert_eq!(euclidean_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn euclidean_embedded_three_four_five() {
        let a = Vector(vec![1.0, 2.0, 3.0]);
        let b = Vector(vec![4.0, 6.0, 3.0]);
        assert_eq!(euclidean_distance(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn euclidean_dimension_mismatch() {
        let a = Vector(vec![1.0]);
        let b = Vector(vec![1.0, 2.0]);
        assert!(matches!(
            euclidean_distance(&a, &b),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn cosine_orthogonal_parallel_antiparallel() {
        let e1 = Vector(vec![1.0, 0.0]);
        let e2 = Vector(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&e1, &e2).unwrap(), 0.0);

        let a = Vector(vec![2.0, 0.0]);
        let b = Vector(vec![5.0, 0.0]);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 1.0);

        let c = Vector(vec![1.0, 1.0]);
        let d = Vector(vec![-1.0, -1.0]);
        assert!((cosine_similarity(&c, &d).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_degenerate() {
        let z = Vector(vec![0.0, 0.0]);
        let a = Vector(vec![1.0, 0.0]);
        assert!(matches!(
            cosine_similarity(&z, &a),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let s = softmax(&Vector(vec![0.0, 0.0]), 1.0).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!((s[1] - 0.5).abs() < 1e-15);

        let s = softmax(&Vector(vec![2.0f64.ln(), 0.0]), 1.0).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_at_low_temperature() {
        let c = -3.25;
        let s = softmax(&Vector(vec![c, c, c]), 0.07).unwrap();
        for i in 0..3 {
            assert!((s[i] - 1.0 / 3.0).abs() < 1e-12);
        }
        let total: f64 = s.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        assert!(softmax(&Vector(vec![1.0]), 0.0).is_err());
        assert!(softmax(&Vector(vec![1.0]), -1.0).is_err());
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax_stable(&Vector(vec![1.0, 3.0, 3.0])).unwrap(), 1);
        assert_eq!(argmax_stable(&Vector(vec![5.0])).unwrap(), 0);
        assert_eq!(argmax_stable(&Vector(vec![0.0, 0.0, 0.0])).unwrap(), 0);
        assert!(argmax_stable(&Vector(vec![])).is_err());
    }

    #[test]
    fn rng_same_seed_same_sequence() {
        let mut a = RngStream::from_seed(2023);
        let mut b = RngStream::from_seed(2023);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_children_ignore_parent_draw_position() {
        let parent_fresh = RngStream::from_seed(7);
        let mut parent_used = RngStream::from_seed(7);
        for _ in 0..100 {
            parent_used.next_u64();
        }
        let mut a = parent_fresh.child("kmeans");
        let mut b = parent_used.child("kmeans");
        for _ in 0..16 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn rng_distinct_labels_distinct_streams() {
        let root = RngStream::from_seed(7);
        let mut a = root.child("init");
        let mut b = root.child("partitioning");
        let same = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
        assert_eq!(same, 0);
    }

    #[test]
    fn rng_sample_indices_without_replacement() {
        let mut rng = RngStream::from_seed(1);
        let mut picked = rng.sample_indices(10, 10);
        picked.sort_unstable();
        assert_eq!(picked, (0..10).collect::<Vec<_>>());
        let few = rng.sample_indices(100, 5);
        assert_eq!(few.len(), 5);
        let mut dedup = few.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 5);
    }

    #[test]
    fn matrix_shape_checks() {
        assert!(Matrix::new(2, 3, vec![0.0; 5]).is_err());
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.matvec(&Vector(vec![1.0, 0.0])).0, vec![1.0, 3.0]);
        assert_eq!(m.transpose_matvec(&Vector(vec![1.0, 0.0])).0, vec![1.0, 2.0]);
    }
}
