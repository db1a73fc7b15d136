//! Sparse kernels for the Newton inner solves: CSR storage, ILU(0),
//! restarted right-preconditioned GMRES and a banded direct fallback.

#[derive(Clone, Debug)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds an all-zero matrix from sorted per-row column lists.
    pub fn from_pattern(rows: &[Vec<usize>]) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for r in rows {
            debug_assert!(r.windows(2).all(|w| w[0] < w[1]));
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        CsrMatrix { n: rows.len(), row_ptr, col_idx, vals: vec![0.0; nnz] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Position of `(i, j)` in the value array.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let row = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        row.binary_search(&j).ok().map(|k| self.row_ptr[i] + k)
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.vals
    }

    pub fn clear(&mut self) {
        self.vals.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.vals[k])
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[i] = acc;
        }
    }
}

/// Incomplete LU factorization with the sparsity pattern of the matrix.
#[derive(Clone, Debug)]
pub struct Ilu0 {
    lu: CsrMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsrMatrix) -> Self {
        let mut lu = a.clone();
        let n = lu.n;
        let diag: Vec<usize> = (0..n)
            .map(|i| lu.position(i, i).expect("ILU(0) needs a structurally nonzero diagonal"))
            .collect();
        let mut where_in_row = vec![usize::MAX; n];
        for i in 0..n {
            let (start, end) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for k in start..end {
                where_in_row[lu.col_idx[k]] = k;
            }
            for kk in start..end {
                let k = lu.col_idx[kk];
                if k >= i {
                    break;
                }
                let pivot = lu.vals[diag[k]];
                let factor = lu.vals[kk] / pivot;
                lu.vals[kk] = factor;
                for jj in diag[k] + 1..lu.row_ptr[k + 1] {
                    let pos = where_in_row[lu.col_idx[jj]];
                    if pos != usize::MAX {
                        lu.vals[pos] -= factor * lu.vals[jj];
                    }
                }
            }
            let d = &mut lu.vals[diag[i]];
            if d.abs() < 1e-300 {
                *d = if *d < 0.0 { -1e-300 } else { 1e-300 };
            }
            for k in start..end {
                where_in_row[lu.col_idx[k]] = usize::MAX;
            }
        }
        Ilu0 { lu, diag }
    }

    /// Overwrites `x` with `(LU)^{-1} x`.
    pub fn apply(&self, x: &mut [f64]) {
        let lu = &self.lu;
        for i in 0..lu.n {
            let mut acc = x[i];
            for k in lu.row_ptr[i]..self.diag[i] {
                acc -= lu.vals[k] * x[lu.col_idx[k]];
            }
            x[i] = acc;
        }
        for i in (0..lu.n).rev() {
            let mut acc = x[i];
            for k in self.diag[i] + 1..lu.row_ptr[i + 1] {
                acc -= lu.vals[k] * x[lu.col_idx[k]];
            }
            x[i] = acc / lu.vals[self.diag[i]];
        }
    }
}

/// LU factorization without pivoting in band storage. Fill-in stays inside
/// the band, so the cost is `n * lower * upper`. Meant for matrices with a
/// positive definite symmetric part, where no pivoting is needed.
#[derive(Clone, Debug)]
pub struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    // row i holds columns i - lower ..= i + upper
    band: Vec<f64>,
}

impl BandedLu {
    /// Returns `None` on a zero or non-finite pivot.
    pub fn new(a: &CsrMatrix) -> Option<Self> {
        let n = a.n;
        let (mut lower, mut upper) = (0, 0);
        for i in 0..n {
            for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                let j = a.col_idx[k];
                lower = lower.max(i.saturating_sub(j));
                upper = upper.max(j.saturating_sub(i));
            }
        }
        let w = lower + upper + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            for k in a.row_ptr[i]..a.row_ptr[i + 1] {
                band[i * w + a.col_idx[k] + lower - i] = a.vals[k];
            }
        }
        let at = |i: usize, j: usize| i * w + j + lower - i;
        for k in 0..n {
            let pivot = band[at(k, k)];
            if pivot == 0.0 || !pivot.is_finite() {
                return None;
            }
            let last_row = (k + lower).min(n - 1);
            let last_col = (k + upper).min(n - 1);
            for i in k + 1..=last_row {
                let factor = band[at(i, k)] / pivot;
                band[at(i, k)] = factor;
                if factor != 0.0 {
                    for j in k + 1..=last_col {
                        band[at(i, j)] -= factor * band[at(k, j)];
                    }
                }
            }
        }
        Some(BandedLu { n, lower, upper, band })
    }

    /// Overwrites `x` with `A^{-1} x`.
    pub fn solve(&self, x: &mut [f64]) {
        let w = self.lower + self.upper + 1;
        let at = |i: usize, j: usize| i * w + j + self.lower - i;
        for i in 0..self.n {
            let mut acc = x[i];
            for j in i.saturating_sub(self.lower)..i {
                acc -= self.band[at(i, j)] * x[j];
            }
            x[i] = acc;
        }
        for i in (0..self.n).rev() {
            let mut acc = x[i];
            for j in i + 1..=(i + self.upper).min(self.n - 1) {
                acc -= self.band[at(i, j)] * x[j];
            }
            x[i] = acc / self.band[at(i, i)];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KrylovStats {
    pub iterations: usize,
    /// Final `|b - A x| / |b|`.
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Restarted GMRES with right ILU(0) preconditioning. `x` holds the initial
/// guess on entry and the solution on exit.
pub fn gmres(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    precond: Option<&Ilu0>,
    rel_tol: f64,
    restart: usize,
    max_iter: usize,
) -> KrylovStats {
    let n = a.dim();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return KrylovStats { iterations: 0, relative_residual: 0.0, converged: true };
    }
    let m = restart.max(1);
    let mut r = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
    let mut hess = vec![vec![0.0; m]; m + 1];
    let (mut cs, mut sn, mut g) = (vec![0.0; m], vec![0.0; m], vec![0.0; m + 1]);
    let mut total = 0;
    let residual = |x: &[f64], r: &mut [f64], w: &mut [f64]| {
        a.matvec(x, w);
        for i in 0..n {
            r[i] = b[i] - w[i];
        }
        norm(r)
    };
    let mut beta = residual(x, &mut r, &mut w);
    loop {
        if beta <= rel_tol * bnorm || total >= max_iter {
            return KrylovStats { iterations: total, relative_residual: beta / bnorm, converged: beta <= rel_tol * bnorm };
        }
        basis.clear();
        basis.push(r.iter().map(|v| v / beta).collect());
        g.iter_mut().for_each(|v| *v = 0.0);
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            z.copy_from_slice(&basis[k]);
            if let Some(p) = precond {
                p.apply(&mut z);
            }
            a.matvec(&z, &mut w);
            // modified Gram-Schmidt
            for (j, vj) in basis.iter().enumerate() {
                let hjk = dot(&w, vj);
                hess[j][k] = hjk;
                for i in 0..n {
                    w[i] -= hjk * vj[i];
                }
            }
            let hnext = norm(&w);
            hess[k + 1][k] = hnext;
            for j in 0..k {
                let t = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                hess[j][k] = t;
            }
            let denom = hess[k][k].hypot(hess[k + 1][k]);
            if denom == 0.0 {
                cs[k] = 1.0;
                sn[k] = 0.0;
            } else {
                cs[k] = hess[k][k] / denom;
                sn[k] = hess[k + 1][k] / denom;
            }
            hess[k][k] = cs[k] * hess[k][k] + sn[k] * hess[k + 1][k];
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k_used = k + 1;
            if g[k + 1].abs() <= rel_tol * bnorm || hnext == 0.0 || total >= max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v / hnext).collect());
        }
        // back substitution for the least-squares coefficients
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut acc = g[i];
            for j in i + 1..k_used {
                acc -= hess[i][j] * y[j];
            }
            y[i] = if hess[i][i] == 0.0 { 0.0 } else { acc / hess[i][i] };
        }
        z.iter_mut().for_each(|v| *v = 0.0);
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                z[i] += yj * basis[j][i];
            }
        }
        if let Some(p) = precond {
            p.apply(&mut z);
        }
        for i in 0..n {
            x[i] += z[i];
        }
        let prev = beta;
        beta = residual(x, &mut r, &mut w);
        if !beta.is_finite() || (k_used < m && beta >= prev) {
            // breakdown or stagnation inside a full cycle
            return KrylovStats { iterations: total, relative_residual: beta / bnorm, converged: beta <= rel_tol * bnorm };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize, skew: f64) -> CsrMatrix {
        let rows: Vec<Vec<usize>> = (0..n)
            .map(|i| (i.saturating_sub(1)..(i + 2).min(n)).collect())
            .collect();
        let mut a = CsrMatrix::from_pattern(&rows);
        for i in 0..n {
            let d = a.position(i, i).unwrap();
            a.values_mut()[d] = 2.0;
            if i > 0 {
                let k = a.position(i, i - 1).unwrap();
                a.values_mut()[k] = -1.0 - skew;
            }
            if i + 1 < n {
                let k = a.position(i, i + 1).unwrap();
                a.values_mut()[k] = -1.0 + skew;
            }
        }
        a
    }

    #[test]
    fn ilu_is_exact_for_tridiagonal() {
        let a = laplace_1d(50, 0.3);
        let ilu = Ilu0::new(&a);
        let x: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = vec![0.0; 50];
        a.matvec(&x, &mut b);
        ilu.apply(&mut b);
        for (u, v) in b.iter().zip(&x) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn gmres_solves_nonsymmetric_system() {
        let n = 200;
        let a = laplace_1d(n, 0.4);
        let x_true: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64).cos()).collect();
        let mut b = vec![0.0; n];
        a.matvec(&x_true, &mut b);
        for pre in [None, Some(Ilu0::new(&a))] {
            let mut x = vec![0.0; n];
            let stats = gmres(&a, &b, &mut x, pre.as_ref(), 1e-12, 30, 5000);
            assert!(stats.converged, "{stats:?}");
            let err = x.iter().zip(&x_true).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "err {err}");
        }
    }

    #[test]
    fn banded_lu_solves_exactly() {
        // 2-D Laplacian with a skew perturbation: bandwidth = grid width
        let m = 12;
        let n = m * m;
        let rows: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut r = vec![i];
                if i % m > 0 {
                    r.push(i - 1);
                }
                if i % m + 1 < m {
                    r.push(i + 1);
                }
                if i >= m {
                    r.push(i - m);
                }
                if i + m < n {
                    r.push(i + m);
                }
                r.sort();
                r
            })
            .collect();
        let mut a = CsrMatrix::from_pattern(&rows);
        for (i, row) in rows.iter().enumerate() {
            for &j in row {
                let k = a.position(i, j).unwrap();
                a.values_mut()[k] = if i == j { 4.0 + 1e-9 } else if j > i { -1.0 + 0.3 } else { -1.0 - 0.3 };
            }
        }
        let lu = BandedLu::new(&a).unwrap();
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.13).cos()).collect();
        let mut b = vec![0.0; n];
        a.matvec(&x_true, &mut b);
        lu.solve(&mut b);
        for (u, v) in b.iter().zip(&x_true) {
            assert!((u - v).abs() < 1e-12);
        }
        let zero = CsrMatrix::from_pattern(&[vec![0]]);
        assert!(BandedLu::new(&zero).is_none());
    }

    #[test]
    fn gmres_zero_rhs() {
        let a = laplace_1d(5, 0.0);
        let mut x = vec![1.0; 5];
        let s = gmres(&a, &[0.0; 5], &mut x, None, 1e-10, 5, 10);
        assert!(s.converged);
        assert_eq!(x, vec![0.0; 5]);
    }
}
