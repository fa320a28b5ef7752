//! Execution policy for the data-parallel inner loops.
//!
//! Every kernel here produces bit-identical output under both policies:
//! work is split only along independent rows (or independent items), and
//! any reduction over the split is performed sequentially in index order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds a GEMM is not worth splitting.
const PAR_GEMM_MIN_WORK: usize = 1 << 16;
/// Output rows per parallel GEMM task.
const GEMM_ROW_BLOCK: usize = 32;

/// How data-parallel loops are executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[derive(Default)]
pub enum Exec {
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}


impl Exec {
    /// All policies compiled into this build.
    pub fn available() -> Vec<Exec> {
        #[cfg(feature = "parallel")]
        {
            vec![Exec::Sequential, Exec::Parallel]
        }
        #[cfg(not(feature = "parallel"))]
        {
            vec![Exec::Sequential]
        }
    }

    /// Runs two closures, concurrently under the parallel policy.
    pub fn join<A, B, RA, RB>(self, a: A, b: B) -> (RA, RB)
    where
        A: FnOnce() -> RA + Send,
        B: FnOnce() -> RB + Send,
        RA: Send,
        RB: Send,
    {
        match self {
            Exec::Sequential => (a(), b()),
            #[cfg(feature = "parallel")]
            Exec::Parallel => rayon::join(a, b),
        }
    }

    /// Ordered map over `0..n`.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => (0..n).map(f).collect(),
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }

    /// Applies `f(chunk_index, chunk)` over consecutive chunks of `data`.
    pub fn for_each_chunk<F>(self, data: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        assert!(chunk > 0, "chunk size must be positive");
        match self {
            Exec::Sequential => data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c)),
            #[cfg(feature = "parallel")]
            Exec::Parallel => data
                .par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
        }
    }
}

/// Strided read-only matrix view used by the GEMM kernels.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` matrix.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer length");
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose, without copying.
    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn row_offset(&self, row: usize) -> usize {
        row * self.row_stride
    }
}

/// `C = A·B` with `C` returned row-major.
pub fn gemm(exec: Exec, a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return c;
    }
    if k == 0 {
        return c;
    }
    let exec = if m * k * n < PAR_GEMM_MIN_WORK {
        Exec::Sequential
    } else {
        exec
    };
    exec.for_each_chunk(&mut c, GEMM_ROW_BLOCK * n, |blk, out| {
        let row0 = blk * GEMM_ROW_BLOCK;
        let rows = out.len() / n;
        gemm_block(a, row0, rows, b, out);
    });
    c
}

fn gemm_block(a: MatRef<'_>, row0: usize, rows: usize, b: MatRef<'_>, out: &mut [f64]) {
    let (k, n) = (a.cols, b.cols);
    let a_off = a.row_offset(row0);
    // Bounds: every index touched by the kernel lies inside the buffers.
    debug_assert!(a_off + (rows - 1) * a.row_stride + (k - 1) * a.col_stride < a.data.len());
    debug_assert!((k - 1) * b.row_stride + (n - 1) * b.col_stride < b.data.len());
    debug_assert_eq!(out.len(), rows * n);
    // SAFETY: the views were validated at construction and the debug
    // assertions above pin every strided access inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            k,
            n,
            1.0,
            a.data.as_ptr().add(a_off),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Reference triple loop; used by tests and benches as a cross-check.
pub fn gemm_naive(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data[i * a.row_stride + p * a.col_stride]
                    * b.data[p * b.row_stride + j * b.col_stride];
            }
            c[i * n + j] = acc;
        }
    }
    c
}
