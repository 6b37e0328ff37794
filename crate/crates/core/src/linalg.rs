//! Dense Cholesky factorization for the GP kernel matrix.

/// Lower-triangular factor `L` with `L Lᵀ = A`, stored row-major in a full
/// `n × n` buffer (upper triangle is zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

impl Cholesky {
    /// Factors the symmetric matrix held row-major in `a` (only the lower
    /// triangle is read). Returns `None` when a pivot falls below
    /// `n · ε · max(diag)`, i.e. the matrix is not numerically positive definite.
    pub fn factor(mut a: Vec<f64>, n: usize) -> Option<Self> {
        assert_eq!(a.len(), n * n, "matrix buffer has wrong size");
        let max_diag = (0..n).map(|i| a[i * n + i]).fold(0.0, f64::max);
        let tol = max_diag * f64::EPSILON * n as f64;
        // Rows are processed in blocks so that each finished row `j` is read
        // once per block rather than once per row. Every entry still sees the
        // same sequence of floating-point operations as the textbook
        // row-by-row Cholesky-Crout recurrence.
        const BLOCK: usize = 32;
        for i0 in (0..n).step_by(BLOCK) {
            let i1 = (i0 + BLOCK).min(n);
            let (done, block) = a.split_at_mut(i0 * n);
            let block = &mut block[..(i1 - i0) * n];
            for j in 0..i1 {
                if j >= i0 {
                    let r = (j - i0) * n;
                    let row = &mut block[r..r + n];
                    let s = row[j] - dot(&row[..j], &row[..j]);
                    if !(s > tol) {
                        return None;
                    }
                    row[j] = s.sqrt();
                }
                let (row_j, rest): (&[f64], &mut [f64]) = if j < i0 {
                    (&done[j * n..j * n + j + 1], &mut block[..])
                } else {
                    let (head, tail) = block.split_at_mut((j - i0 + 1) * n);
                    (&head[(j - i0) * n..(j - i0) * n + j + 1], tail)
                };
                let diag = row_j[j];
                for row in rest.chunks_exact_mut(n) {
                    let s = row[j] - dot(&row[..j], &row_j[..j]);
                    row[j] = s / diag;
                }
            }
            for (k, row) in block.chunks_exact_mut(n).enumerate() {
                for v in &mut row[i0 + k + 1..] {
                    *v = 0.0;
                }
            }
        }
        Some(Self { n, l: a })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.l[i * self.n..i * self.n + i + 1]
    }

    /// Solves `L x = b` in place.
    pub fn solve_lower(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            b[i] = (b[i] - dot(row, &b[..i])) / self.l[i * n + i];
        }
    }

    /// Solves `L x = b` for `m` right-hand sides stored back to back in `b`
    /// (each of length n). Each column gives the same bits as [`Self::solve_lower`].
    pub fn solve_lower_many(&self, b: &mut [f64], m: usize) {
        let n = self.n;
        assert_eq!(b.len(), n * m);
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let d = self.l[i * n + i];
            for x in b.chunks_exact_mut(n) {
                x[i] = (x[i] - dot(row, &x[..i])) / d;
            }
        }
    }

    /// Solves `Lᵀ x = b` in place.
    pub fn solve_upper(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            b[i] /= self.l[i * n + i];
            let bi = b[i];
            let row = &self.l[i * n..i * n + i];
            for (bj, lij) in b[..i].iter_mut().zip(row) {
                *bj -= lij * bi;
            }
        }
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        self.solve_lower(b);
        self.solve_upper(b);
    }

    /// `log det A = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }

    /// Packed lower triangle, row by row.
    pub fn packed(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.n + 1) / 2);
        for i in 0..self.n {
            out.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn from_packed(packed: &[f64], n: usize) -> Option<Self> {
        if packed.len() != n * (n + 1) / 2 {
            return None;
        }
        let mut l = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            l[i * n..i * n + i + 1].copy_from_slice(&packed[k..k + i + 1]);
            k += i + 1;
        }
        Some(Self { n, l })
    }

    /// Reconstructs `L Lᵀ` (test helper).
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = dot(&self.l[i * n..i * n + j + 1], &self.l[j * n..j * n + j + 1]);
                out[i * n + j] = v;
                out[j * n + i] = v;
            }
        }
        out
    }
}
