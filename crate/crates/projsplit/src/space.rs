//! Vectors, linear couplings between blocks, and the weighted primal-dual metric.
//!
//! A solver iterate is a point `(z, w_1, ..., w_{n-1})`: one primal vector and
//! one dual vector per block except the last. The last dual variable is always
//! the derived value `w_n = -sum_i G_i^* w_i` and is computed on demand, never
//! stored, so the stored representation cannot drift from the convention.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Dense column vector. All public entry points reject non-finite entries.
pub type Vector = Array1<f64>;

pub fn inner(a: &Vector, b: &Vector) -> f64 {
    a.dot(b)
}

pub fn norm_sq(a: &Vector) -> f64 {
    a.dot(a)
}

pub fn norm(a: &Vector) -> f64 {
    norm_sq(a).sqrt()
}

pub fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Errors with the offending context if `v` is empty or has a NaN/inf entry.
pub fn ensure_finite(v: &Vector, context: &'static str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::ShapeMismatch {
            context,
            expected: 1,
            got: 0,
        });
    }
    if !all_finite(v) {
        return Err(Error::NonFinite { context, iter: 0 });
    }
    Ok(())
}

/// Sparse matrix in compressed-row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets. Duplicate positions are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("sparse matrix must have nonzero shape"));
        }
        let mut buckets: Vec<Vec<(usize, f64)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(Error::config(format!(
                    "triplet ({r}, {c}) out of bounds for {rows}x{cols} matrix"
                )));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "sparse matrix entry",
                    iter: 0,
                });
            }
            buckets[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for bucket in &mut buckets {
            bucket.sort_by_key(|&(c, _)| c);
            let mut last_col = usize::MAX;
            for &(c, v) in bucket.iter() {
                if c == last_col {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                    last_col = c;
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(CsrMatrix {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        let mut out = Array1::zeros(self.rows);
        for r in 0..self.rows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            out[r] = acc;
        }
        out
    }

    pub fn apply_transpose(&self, y: &Vector) -> Vector {
        let mut out = Array1::zeros(self.cols);
        for r in 0..self.rows {
            let yr = y[r];
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.col_idx[k]] += self.values[k] * yr;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[(r, self.col_idx[k])] += self.values[k];
            }
        }
        out
    }

    /// Stored entries as `(row, col, value)`, row-major.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                out.push((r, self.col_idx[k], self.values[k]));
            }
        }
        out
    }
}

/// Linear coupling `G_i` from the primal space into a block's space.
///
/// The identity kind applies without materializing anything and reproduces its
/// input exactly, bit for bit.
#[derive(Debug, Clone)]
pub enum LinearMap {
    Identity(usize),
    Dense(Array2<f64>),
    Sparse(CsrMatrix),
}

impl LinearMap {
    pub fn identity(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("identity map needs dim >= 1"));
        }
        Ok(LinearMap::Identity(dim))
    }

    pub fn dense(m: Array2<f64>) -> Result<Self> {
        if m.nrows() == 0 || m.ncols() == 0 {
            return Err(Error::config("dense map must have nonzero shape"));
        }
        if !m.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                context: "dense map entry",
                iter: 0,
            });
        }
        Ok(LinearMap::Dense(m))
    }

    pub fn sparse(m: CsrMatrix) -> Self {
        LinearMap::Sparse(m)
    }

    /// Dimension of the input (primal) space.
    pub fn input_dim(&self) -> usize {
        match self {
            LinearMap::Identity(d) => *d,
            LinearMap::Dense(m) => m.ncols(),
            LinearMap::Sparse(m) => m.cols(),
        }
    }

    /// Dimension of the output (block) space.
    pub fn output_dim(&self) -> usize {
        match self {
            LinearMap::Identity(d) => *d,
            LinearMap::Dense(m) => m.nrows(),
            LinearMap::Sparse(m) => m.rows(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, LinearMap::Identity(_))
    }

    pub fn apply(&self, x: &Vector) -> Vector {
        debug_assert_eq!(x.len(), self.input_dim());
        match self {
            LinearMap::Identity(_) => x.clone(),
            LinearMap::Dense(m) => m.dot(x),
            LinearMap::Sparse(m) => m.apply(x),
        }
    }

    pub fn apply_adjoint(&self, y: &Vector) -> Vector {
        debug_assert_eq!(y.len(), self.output_dim());
        match self {
            LinearMap::Identity(_) => y.clone(),
            LinearMap::Dense(m) => m.t().dot(y),
            LinearMap::Sparse(m) => m.apply_transpose(y),
        }
    }
}

/// Weight `gamma > 0` on the primal part of the primal-dual norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaMetric {
    gamma: f64,
}

impl GammaMetric {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::config(format!(
                "metric weight gamma must be finite and positive, got {gamma}"
            )));
        }
        Ok(GammaMetric { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Iterate of the solver: primal `z` plus the first `n - 1` dual vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualPoint {
    pub z: Vector,
    pub w: Vec<Vector>,
}

impl PrimalDualPoint {
    pub fn new(z: Vector, w: Vec<Vector>) -> Result<Self> {
        ensure_finite(&z, "primal point")?;
        for wi in &w {
            ensure_finite(wi, "dual point")?;
        }
        Ok(PrimalDualPoint { z, w })
    }

    /// Number of blocks this point is an iterate for.
    pub fn n_blocks(&self) -> usize {
        self.w.len() + 1
    }

    /// Derived dual variable for the last block: `-sum_i G_i^* w_i`.
    ///
    /// `maps` holds all n coupling maps; only the first n-1 are read. For a
    /// single-block problem this is the zero vector.
    pub fn last_dual(&self, maps: &[LinearMap]) -> Vector {
        let mut out = Array1::zeros(self.z.len());
        for (wi, map) in self.w.iter().zip(maps.iter()) {
            out -= &map.apply_adjoint(wi);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.z) && self.w.iter().all(all_finite)
    }
}

/// Squared weighted norm `gamma * |z|^2 + sum_i |w_i|^2`.
pub fn gamma_norm_sq(p: &PrimalDualPoint, metric: &GammaMetric) -> f64 {
    let mut total = metric.gamma() * norm_sq(&p.z);
    for wi in &p.w {
        total += norm_sq(wi);
    }
    total
}

/// Weighted inner product matching [`gamma_norm_sq`].
pub fn gamma_inner(p: &PrimalDualPoint, q: &PrimalDualPoint, metric: &GammaMetric) -> f64 {
    debug_assert_eq!(p.w.len(), q.w.len());
    let mut total = metric.gamma() * inner(&p.z, &q.z);
    for (wp, wq) in p.w.iter().zip(q.w.iter()) {
        total += inner(wp, wq);
    }
    total
}

/// Squared weighted distance between two iterates.
pub fn gamma_dist_sq(p: &PrimalDualPoint, q: &PrimalDualPoint, metric: &GammaMetric) -> f64 {
    debug_assert_eq!(p.w.len(), q.w.len());
    let dz = &p.z - &q.z;
    let mut total = metric.gamma() * norm_sq(&dz);
    for (wp, wq) in p.w.iter().zip(q.w.iter()) {
        let dw = wp - wq;
        total += norm_sq(&dw);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;

    #[test]
    fn gamma_norm_hand_values() {
        let m = GammaMetric::new(2.0).unwrap();
        let p = PrimalDualPoint::new(arr1(&[1.0]), vec![arr1(&[1.0])]).unwrap();
        assert_eq!(gamma_norm_sq(&p, &m), 3.0);

        let m = GammaMetric::new(0.5).unwrap();
        let p = PrimalDualPoint::new(arr1(&[3.0, 4.0]), vec![arr1(&[0.0, 0.0])]).unwrap();
        assert_eq!(gamma_norm_sq(&p, &m), 12.5);
    }

    #[test]
    fn dense_adjoint_hand_value() {
        let g = LinearMap::dense(arr2(&[[1.0, 2.0], [3.0, 4.0]])).unwrap();
        let y = arr1(&[1.0, 1.0]);
        assert_eq!(g.apply_adjoint(&y), arr1(&[4.0, 6.0]));
    }

    #[test]
    fn identity_apply_is_bit_exact() {
        let g = LinearMap::identity(3).unwrap();
        let x = arr1(&[0.1, -0.0, 1.0e-300]);
        let gx = g.apply(&x);
        let gty = g.apply_adjoint(&x);
        for i in 0..3 {
            assert_eq!(gx[i].to_bits(), x[i].to_bits());
            assert_eq!(gty[i].to_bits(), x[i].to_bits());
        }
    }

    #[test]
    fn metric_rejects_bad_gamma() {
        assert!(GammaMetric::new(0.0).is_err());
        assert!(GammaMetric::new(-1.0).is_err());
        assert!(GammaMetric::new(f64::NAN).is_err());
        assert!(GammaMetric::new(f64::INFINITY).is_err());
    }

    #[test]
    fn point_rejects_non_finite_and_empty() {
        assert!(PrimalDualPoint::new(arr1(&[f64::NAN]), vec![]).is_err());
        assert!(PrimalDualPoint::new(arr1(&[1.0]), vec![arr1(&[f64::INFINITY])]).is_err());
        let empty: [f64; 0] = [];
        assert!(PrimalDualPoint::new(arr1(&empty), vec![]).is_err());
    }

    #[test]
    fn last_dual_single_block_is_zero() {
        let p = PrimalDualPoint::new(arr1(&[2.0, -1.0]), vec![]).unwrap();
        let maps = [LinearMap::identity(2).unwrap()];
        assert_eq!(p.last_dual(&maps), arr1(&[0.0, 0.0]));
    }

    #[test]
    fn last_dual_matches_negated_adjoint_sum() {
        let g1 = LinearMap::dense(arr2(&[[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]])).unwrap();
        let g2 = LinearMap::identity(2).unwrap();
        let w1 = arr1(&[1.0, -1.0, 0.5]);
        let p = PrimalDualPoint::new(arr1(&[0.0, 0.0]), vec![w1.clone()]).unwrap();
        let maps = [g1.clone(), g2];
        let expect = -g1.apply_adjoint(&w1);
        assert_eq!(p.last_dual(&maps), expect);
    }

    #[test]
    fn csr_matches_dense_on_small_example() {
        let triplets = [(0, 1, 2.0), (1, 0, 3.0), (1, 2, -1.0), (1, 2, 0.5)];
        let s = CsrMatrix::from_triplets(2, 3, &triplets).unwrap();
        assert_eq!(s.nnz(), 3); // duplicate (1, 2) summed
        let x = arr1(&[1.0, 2.0, 4.0]);
        assert_eq!(s.apply(&x), arr1(&[4.0, 1.0]));
        let y = arr1(&[1.0, 1.0]);
        assert_eq!(s.apply_transpose(&y), arr1(&[3.0, 2.0, -0.5]));
        assert_eq!(s.to_dense(), arr2(&[[0.0, 2.0, 0.0], [3.0, 0.0, -0.5]]));
    }

    #[test]
    fn csr_rejects_out_of_bounds_and_non_finite() {
        assert!(CsrMatrix::from_triplets(2, 2, &[(2, 0, 1.0)]).is_err());
        assert!(CsrMatrix::from_triplets(2, 2, &[(0, 0, f64::NAN)]).is_err());
        assert!(CsrMatrix::from_triplets(0, 2, &[]).is_err());
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = Vector> {
        prop::collection::vec(-100.0..100.0f64, dim).prop_map(Array1::from_vec)
    }

    proptest! {
        #[test]
        fn adjoint_identity_dense(rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-5.0..5.0));
            let g = LinearMap::dense(m).unwrap();
            let x = Array1::from_shape_fn(cols, |_| rng.random_range(-5.0..5.0));
            let y = Array1::from_shape_fn(rows, |_| rng.random_range(-5.0..5.0));
            let lhs = inner(&g.apply(&x), &y);
            let rhs = inner(&x, &g.apply_adjoint(&y));
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }

        #[test]
        fn adjoint_identity_sparse(rows in 1usize..10, cols in 1usize..10, seed in 0u64..1000) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5ca1ab1e);
            let mut triplets = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if rng.random_bool(0.3) {
                        triplets.push((r, c, rng.random_range(-5.0..5.0)));
                    }
                }
            }
            let g = LinearMap::sparse(CsrMatrix::from_triplets(rows, cols, &triplets).unwrap());
            let x = Array1::from_shape_fn(cols, |_| rng.random_range(-5.0..5.0));
            let y = Array1::from_shape_fn(rows, |_| rng.random_range(-5.0..5.0));
            let lhs = inner(&g.apply(&x), &y);
            let rhs = inner(&x, &g.apply_adjoint(&y));
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }

        #[test]
        fn gamma_norm_positive_definite(z in vec_strategy(3), w in vec_strategy(2), gamma in 0.01..50.0f64) {
            let m = GammaMetric::new(gamma).unwrap();
            let p = PrimalDualPoint::new(z.clone(), vec![w.clone()]).unwrap();
            let nsq = gamma_norm_sq(&p, &m);
            prop_assert!(nsq >= 0.0);
            let zero = z.iter().all(|&v| v == 0.0) && w.iter().all(|&v| v == 0.0);
            prop_assert_eq!(nsq == 0.0, zero);
        }

        #[test]
        fn gamma_norm_triangle_inequality(
            z1 in vec_strategy(3), w1 in vec_strategy(2),
            z2 in vec_strategy(3), w2 in vec_strategy(2),
            gamma in 0.01..50.0f64,
        ) {
            let m = GammaMetric::new(gamma).unwrap();
            let p = PrimalDualPoint::new(z1.clone(), vec![w1.clone()]).unwrap();
            let q = PrimalDualPoint::new(z2.clone(), vec![w2.clone()]).unwrap();
            let sum = PrimalDualPoint::new(z1 + z2, vec![w1 + w2]).unwrap();
            let lhs = gamma_norm_sq(&sum, &m).sqrt();
            let rhs = gamma_norm_sq(&p, &m).sqrt() + gamma_norm_sq(&q, &m).sqrt();
            prop_assert!(lhs <= rhs + 1e-9 * rhs.max(1.0));
        }

        #[test]
        fn gamma_inner_matches_norm(z in vec_strategy(3), w in vec_strategy(2), gamma in 0.01..50.0f64) {
            let m = GammaMetric::new(gamma).unwrap();
            let p = PrimalDualPoint::new(z, vec![w]).unwrap();
            assert_relative_eq!(gamma_inner(&p, &p, &m), gamma_norm_sq(&p, &m), max_relative = 1e-12);
        }
    }
}
