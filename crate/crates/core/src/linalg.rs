//! Sparse matrices on a fixed node-adjacency pattern and the linear solvers
//! used by the time stepper.
//!
//! The direct path reorders with reverse Cuthill-McKee and factors the result
//! as a band matrix with partial pivoting. The iterative path is Jacobi
//! preconditioned CG (symmetric systems) or BiCGStab (upwinded systems).

use std::collections::{BTreeSet, VecDeque};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Compressed-row sparsity pattern with sorted column indices.
#[derive(Debug)]
pub struct Pattern {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    ordering: OnceLock<Ordering>,
}

#[derive(Debug)]
struct Ordering {
    /// `perm[new] = old`
    perm: Vec<usize>,
    /// `inv[old] = new`
    inv: Vec<usize>,
    bandwidth: usize,
}

impl Pattern {
    pub fn from_rows(rows: Vec<BTreeSet<usize>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for r in rows {
            cols.extend(r);
            row_ptr.push(cols.len());
        }
        Pattern {
            n,
            row_ptr,
            cols,
            ordering: OnceLock::new(),
        }
    }

    /// Node-to-node adjacency of a triangulation (diagonal included).
    pub fn for_mesh(mesh: &Mesh) -> Self {
        let mut rows = vec![BTreeSet::new(); mesh.num_nodes()];
        for t in mesh.triangles() {
            for &a in t {
                for &b in t {
                    rows[a].insert(b);
                }
            }
        }
        for (i, r) in rows.iter_mut().enumerate() {
            r.insert(i);
        }
        Pattern::from_rows(rows)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.row_ptr[i];
        self.row(i).binary_search(&j).ok().map(|k| start + k)
    }

    fn ordering(&self) -> &Ordering {
        self.ordering.get_or_init(|| reverse_cuthill_mckee(self))
    }

    /// Bandwidth after reverse Cuthill-McKee reordering.
    pub fn reordered_bandwidth(&self) -> usize {
        self.ordering().bandwidth
    }
}

fn reverse_cuthill_mckee(p: &Pattern) -> Ordering {
    let n = p.n;
    let degree: Vec<usize> = (0..n).map(|i| p.row(i).len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&i| (degree[i], i));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = p.row(v).iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| (degree[w], w));
            for w in nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    let mut inv = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        inv[old] = new;
    }
    let mut bandwidth = 0;
    for i in 0..n {
        for &j in p.row(i) {
            bandwidth = bandwidth.max(inv[i].abs_diff(inv[j]));
        }
    }
    Ordering {
        perm: order,
        inv,
        bandwidth,
    }
}

/// Square sparse matrix sharing an immutable pattern.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    pattern: Arc<Pattern>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(pattern: Arc<Pattern>) -> Self {
        let values = vec![0.0; pattern.nnz()];
        SparseMatrix { pattern, values }
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn dim(&self) -> usize {
        self.pattern.n
    }

    /// Adds `v` at `(i, j)`. Panics if the entry is outside the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self
            .pattern
            .position(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) outside sparsity pattern"));
        self.values[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.position(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let start = self.pattern.row_ptr[i];
        self.pattern
            .row(i)
            .iter()
            .enumerate()
            .map(move |(k, &j)| (j, self.values[start + k]))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row_entries(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// Replaces row and column `i` by the identity (for homogeneous constraints).
    pub fn constrain(&mut self, i: usize) {
        // patterns built from meshes are structurally symmetric
        for &r in self.pattern.row(i) {
            if r == i {
                continue;
            }
            if let Some(k) = self.pattern.position(r, i) {
                self.values[k] = 0.0;
            }
        }
        let start = self.pattern.row_ptr[i];
        for (k, &j) in self.pattern.row(i).iter().enumerate() {
            self.values[start + k] = if j == i { 1.0 } else { 0.0 };
        }
    }

    /// Adds `alpha * other` (same pattern required).
    pub fn axpy(&mut self, alpha: f64, other: &SparseMatrix) {
        assert!(Arc::ptr_eq(&self.pattern, &other.pattern), "pattern mismatch");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    /// Dense copy, row major. Intended for tests and tiny systems.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut d = vec![vec![0.0; n]; n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row_entries(i) {
                row[j] = v;
            }
        }
        d
    }

    pub fn is_pattern_symmetric(&self) -> bool {
        (0..self.dim()).all(|i| {
            self.row_entries(i)
                .all(|(j, v)| (v == 0.0) == (self.get(j, i) == 0.0))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolverKind {
    Direct,
    Iterative,
    /// Direct below `threshold` unknowns, iterative at or above.
    Auto { threshold: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSolverConfig {
    pub kind: LinearSolverKind,
    pub iterative_tol: f64,
    pub max_iterations: usize,
}

impl Default for LinearSolverConfig {
    fn default() -> Self {
        LinearSolverConfig {
            kind: LinearSolverKind::Auto { threshold: 40_000 },
            iterative_tol: 1e-12,
            max_iterations: 20_000,
        }
    }
}

impl LinearSolverConfig {
    fn use_direct(&self, n: usize) -> bool {
        match self.kind {
            LinearSolverKind::Direct => true,
            LinearSolverKind::Iterative => false,
            LinearSolverKind::Auto { threshold } => n < threshold,
        }
    }
}

/// Solves `a x = b`. `symmetric` selects CG over BiCGStab on the iterative path.
pub fn solve(a: &SparseMatrix, b: &[f64], symmetric: bool, cfg: &LinearSolverConfig) -> Result<Vec<f64>> {
    if cfg.use_direct(a.dim()) {
        BandLu::factor(a)?.solve(b)
    } else if symmetric {
        conjugate_gradient(a, b, cfg)
    } else {
        bicgstab(a, b, cfg)
    }
}

/// LU factorization with partial pivoting of an RCM-reordered band matrix.
pub struct BandLu {
    n: usize,
    kl: usize,
    width: usize,
    data: Vec<f64>,
    pivots: Vec<usize>,
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl BandLu {
    pub fn factor(a: &SparseMatrix) -> Result<Self> {
        let n = a.dim();
        let ord = a.pattern.ordering();
        let kl = ord.bandwidth;
        // upper band grows to kl + ku under row interchanges
        let width = 3 * kl + 1;
        let mut data = vec![0.0; n * width];
        let idx = |i: usize, j: usize| i * width + (j + kl - i);
        for old_i in 0..n {
            let i = ord.inv[old_i];
            for (old_j, v) in a.row_entries(old_i) {
                let j = ord.inv[old_j];
                data[idx(i, j)] += v;
            }
        }
        let mut pivots = vec![0; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let last_col = (k + 2 * kl).min(n - 1);
            let mut p = k;
            let mut best = data[idx(k, k)].abs();
            for i in k + 1..=last_row {
                let v = data[idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            pivots[k] = p;
            if !(best > 0.0) || !best.is_finite() {
                return Err(Error::SingularSystem { min_pivot: best });
            }
            if p != k {
                for j in k..=last_col {
                    data.swap(idx(k, j), idx(p, j));
                }
            }
            let pivot = data[idx(k, k)];
            for i in k + 1..=last_row {
                let l = data[idx(i, k)] / pivot;
                if l == 0.0 {
                    continue;
                }
                data[idx(i, k)] = l;
                for j in k + 1..=last_col {
                    data[idx(i, j)] -= l * data[idx(k, j)];
                }
            }
        }
        Ok(BandLu {
            n,
            kl,
            width,
            data,
            pivots,
            perm: ord.perm.clone(),
            inv: ord.inv.clone(),
        })
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let (n, kl, width) = (self.n, self.kl, self.width);
        let idx = |i: usize, j: usize| i * width + (j + kl - i);
        let mut x: Vec<f64> = (0..n).map(|new| b[self.perm[new]]).collect();
        for k in 0..n {
            let p = self.pivots[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + kl).min(n.saturating_sub(1)) {
                    x[i] -= self.data[idx(i, k)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..=(k + 2 * kl).min(n - 1) {
                s -= self.data[idx(k, j)] * x[j];
            }
            x[k] = s / self.data[idx(k, k)];
        }
        let out = (0..n).map(|old| x[self.inv[old]]).collect();
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn jacobi(a: &SparseMatrix) -> Result<Vec<f64>> {
    a.diagonal()
        .into_iter()
        .map(|d| {
            if d != 0.0 && d.is_finite() {
                Ok(1.0 / d)
            } else {
                Err(Error::SingularSystem { min_pivot: d.abs() })
            }
        })
        .collect()
}

pub fn conjugate_gradient(a: &SparseMatrix, b: &[f64], cfg: &LinearSolverConfig) -> Result<Vec<f64>> {
    let n = a.dim();
    let minv = jacobi(a)?;
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&minv).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..cfg.max_iterations {
        a.mul_vec_into(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm2(&r);
        if res <= cfg.iterative_tol * bnorm {
            return Ok(x);
        }
        if !res.is_finite() {
            return Err(Error::IterativeSolver { iterations: it, residual: res });
        }
        for i in 0..n {
            z[i] = r[i] * minv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::IterativeSolver {
        iterations: cfg.max_iterations,
        residual: norm2(&r) / bnorm,
    })
}

pub fn bicgstab(a: &SparseMatrix, b: &[f64], cfg: &LinearSolverConfig) -> Result<Vec<f64>> {
    let n = a.dim();
    let minv = jacobi(a)?;
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 0..cfg.max_iterations {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 {
            return Err(Error::IterativeSolver { iterations: it, residual: norm2(&r) / bnorm });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = p[i] * minv[i];
        }
        a.mul_vec_into(&y, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) <= cfg.iterative_tol * bnorm {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok(x);
        }
        for i in 0..n {
            z[i] = s[i] * minv[i];
        }
        a.mul_vec_into(&z, &mut t);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        let res = norm2(&r);
        if res <= cfg.iterative_tol * bnorm {
            return Ok(x);
        }
        if !res.is_finite() || omega == 0.0 {
            return Err(Error::IterativeSolver { iterations: it, residual: res / bnorm });
        }
    }
    Err(Error::IterativeSolver {
        iterations: cfg.max_iterations,
        residual: norm2(&r) / bnorm,
    })
}

/// Gaussian elimination with partial pivoting on a small dense system.
pub fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for k in 0..n {
        let p = (k..n)
            .max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))
            .unwrap_or(k);
        if a[p][k] == 0.0 {
            return Err(Error::SingularSystem { min_pivot: 0.0 });
        }
        a.swap(k, p);
        b.swap(k, p);
        for i in k + 1..n {
            let l = a[i][k] / a[k][k];
            for j in k..n {
                a[i][j] -= l * a[k][j];
            }
            b[i] -= l * b[k];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_structured_mesh, SideTags};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(nx: usize, seed: u64, symmetric: bool) -> SparseMatrix {
        let mesh = build_structured_mesh(nx, nx + 1, 1.0, 1.0, SideTags::dirichlet_left()).unwrap();
        let pattern = Arc::new(Pattern::for_mesh(&mesh));
        let mut a = SparseMatrix::zeros(pattern.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..pattern.dim() {
            for &j in pattern.row(i) {
                if j < i || (!symmetric && j != i) {
                    let v: f64 = -rng.gen_range(0.0..1.0);
                    a.add(i, j, v);
                    if symmetric {
                        a.add(j, i, v);
                    }
                }
            }
        }
        for i in 0..pattern.dim() {
            let off: f64 = a.row_entries(i).filter(|&(j, _)| j != i).map(|(_, v)| v.abs()).sum();
            let col: f64 = (0..pattern.dim()).filter(|&j| j != i).map(|j| a.get(j, i).abs()).sum();
            a.add(i, i, off.max(col) + 0.1);
        }
        a
    }

    fn residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
        let ax = a.mul_vec(x);
        ax.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn band_lu_matches_dense_solve() {
        let a = random_matrix(4, 7, false);
        let b: Vec<f64> = (0..a.dim()).map(|i| (i as f64).sin()).collect();
        let x = BandLu::factor(&a).unwrap().solve(&b).unwrap();
        let y = dense_solve(a.to_dense(), b.clone()).unwrap();
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn band_lu_pivots_on_indefinite_matrices() {
        let a0 = random_matrix(3, 11, false);
        let mut a = SparseMatrix::zeros(a0.pattern().clone());
        for i in 0..a.dim() {
            for (j, v) in a0.row_entries(i) {
                a.add(i, j, if i == j { 1e-3 * v } else { v });
            }
        }
        let b: Vec<f64> = (0..a.dim()).map(|i| 1.0 + i as f64).collect();
        let x = BandLu::factor(&a).unwrap().solve(&b).unwrap();
        assert!(residual(&a, &x, &b) < 1e-9);
    }

    #[test]
    fn krylov_solvers_converge() {
        let cfg = LinearSolverConfig::default();
        let s = random_matrix(6, 3, true);
        let b: Vec<f64> = (0..s.dim()).map(|i| (0.3 * i as f64).cos()).collect();
        let x = conjugate_gradient(&s, &b, &cfg).unwrap();
        assert!(residual(&s, &x, &b) < 1e-9);
        let u = random_matrix(6, 5, false);
        let y = bicgstab(&u, &b, &cfg).unwrap();
        assert!(residual(&u, &y, &b) < 1e-9);
    }

    #[test]
    fn rcm_reduces_bandwidth_to_grid_width() {
        let mesh = build_structured_mesh(30, 5, 1.0, 1.0, SideTags::dirichlet_left()).unwrap();
        let p = Pattern::for_mesh(&mesh);
        assert!(p.reordered_bandwidth() <= 8, "bandwidth {}", p.reordered_bandwidth());
    }

    #[test]
    fn constrain_keeps_pattern_symmetric() {
        let mut a = random_matrix(3, 1, true);
        a.constrain(0);
        a.constrain(5);
        assert!(a.is_pattern_symmetric());
        assert_eq!(a.get(5, 5), 1.0);
        assert_eq!(a.get(4, 5), 0.0);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mesh = build_structured_mesh(1, 1, 1.0, 1.0, SideTags::dirichlet_left()).unwrap();
        let a = SparseMatrix::zeros(Arc::new(Pattern::for_mesh(&mesh)));
        assert!(matches!(
            BandLu::factor(&a),
            Err(Error::SingularSystem { .. })
        ));
    }
}
