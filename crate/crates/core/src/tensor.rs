//! Row-major `f64` matrices and the strided GEMM calls used by the model.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec shape");
        Mat { rows, cols, data }
    }

    pub fn zeros_like(other: &Mat) -> Self {
        Mat::zeros(other.rows, other.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }
}

/// Strided view description for [`gemm`].
#[derive(Debug, Clone, Copy)]
pub struct Strides {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Strides {
    /// Plain row-major, optionally transposed, starting at `offset`.
    pub fn rm(offset: usize, cols: usize, transposed: bool) -> Self {
        if transposed {
            Strides {
                offset,
                rs: 1,
                cs: cols,
            }
        } else {
            Strides {
                offset,
                rs: cols,
                cs: 1,
            }
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `C = alpha * A B + beta * C` with `A: m x k`, `B: k x n`, `C: m x n`
/// addressed through arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = sc.offset + i * sc.rs + j * sc.cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(sa.last(m, k) < a.len(), "gemm: A out of bounds");
    assert!(sb.last(k, n) < b.len(), "gemm: B out of bounds");
    assert!(sc.last(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: every element addressed by the strides lies inside the slices
    // (checked above) and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(sa.offset),
            sa.rs as isize,
            sa.cs as isize,
            b.as_ptr().add(sb.offset),
            sb.rs as isize,
            sb.cs as isize,
            beta,
            c.as_mut_ptr().add(sc.offset),
            sc.rs as isize,
            sc.cs as isize,
        );
    }
}

/// `A B`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul shape");
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(
        a.rows,
        a.cols,
        b.cols,
        1.0,
        &a.data,
        Strides::rm(0, a.cols, false),
        &b.data,
        Strides::rm(0, b.cols, false),
        0.0,
        &mut c.data,
        Strides::rm(0, b.cols, false),
    );
    c
}

/// `A Bᵀ`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt shape");
    let mut c = Mat::zeros(a.rows, b.rows);
    gemm(
        a.rows,
        a.cols,
        b.rows,
        1.0,
        &a.data,
        Strides::rm(0, a.cols, false),
        &b.data,
        Strides::rm(0, b.cols, true),
        0.0,
        &mut c.data,
        Strides::rm(0, b.rows, false),
    );
    c
}

/// `C += alpha * Aᵀ B`.
pub fn matmul_tn_acc(a: &Mat, b: &Mat, alpha: f64, c: &mut Mat) {
    assert_eq!(a.rows, b.rows, "matmul_tn shape");
    assert_eq!((c.rows, c.cols), (a.cols, b.cols), "matmul_tn out shape");
    gemm(
        a.cols,
        a.rows,
        b.cols,
        alpha,
        &a.data,
        Strides::rm(0, a.cols, true),
        &b.data,
        Strides::rm(0, b.cols, false),
        1.0,
        &mut c.data,
        Strides::rm(0, c.cols, false),
    );
}

/// `C += alpha * A B`.
pub fn matmul_acc(a: &Mat, b: &Mat, alpha: f64, c: &mut Mat) {
    assert_eq!(a.cols, b.rows, "matmul_acc shape");
    assert_eq!((c.rows, c.cols), (a.rows, b.cols), "matmul_acc out shape");
    gemm(
        a.rows,
        a.cols,
        b.cols,
        alpha,
        &a.data,
        Strides::rm(0, a.cols, false),
        &b.data,
        Strides::rm(0, b.cols, false),
        1.0,
        &mut c.data,
        Strides::rm(0, c.cols, false),
    );
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..out.rows {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        for v in row.iter_mut() {
            *v -= z;
        }
    }
    out
}

/// Row-wise softmax, in place.
pub fn softmax_rows_inplace(x: &mut Mat) {
    for i in 0..x.rows {
        let row = x.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}
