//! Strided matrix views over slices and a checked wrapper around `dgemm`.

/// `rows x cols` matrix starting at `offset` with row/column strides.
#[derive(Debug, Clone, Copy)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(offset: usize, rows: usize, cols: usize) -> Self {
        Self { offset, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { offset: self.offset, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn last(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: &[f64], av: View, b: &[f64], bv: View, beta: f64, c: &mut [f64], cv: View) {
    assert_eq!(av.cols, bv.rows, "inner dimensions");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "output dimensions");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    assert!(av.last() < a.len() || av.cols == 0);
    assert!(bv.last() < b.len() || bv.rows == 0);
    assert!(cv.last() < c.len());
    // SAFETY: every element addressed through the three views lies inside the
    // corresponding slice (checked above), and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Plain row-major product of an `m x k` and a `k x n` matrix.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(1.0, a, View::row_major(0, m, k), b, View::row_major(0, k, n), 0.0, &mut c, View::row_major(0, m, n));
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn transposed_view() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        let v = View::row_major(0, 2, 2);
        gemm(1.0, &a, v.t(), &a, v, 0.0, &mut c, v);
        // a^T a
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }
}
