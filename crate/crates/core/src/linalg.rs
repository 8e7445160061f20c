//! Small dense helpers shared by the sampling and eigen paths.

use nalgebra::{DMatrix, SymmetricEigen};

/// `alpha · op(a) · op(b)` where `op` optionally transposes.
///
/// Runs through `matrixmultiply` directly so transposed operands are read
/// through strides instead of being copied.
pub(crate) fn gemm(alpha: f64, a: &DMatrix<f64>, ta: bool, b: &DMatrix<f64>, tb: bool) -> DMatrix<f64> {
    let (m, k) = if ta { (a.ncols(), a.nrows()) } else { (a.nrows(), a.ncols()) };
    let (kb, n) = if tb { (b.ncols(), b.nrows()) } else { (b.nrows(), b.ncols()) };
    assert_eq!(k, kb, "inner dimensions differ");
    let mut c = DMatrix::<f64>::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = strides(a, ta);
    let (rsb, csb) = strides(b, tb);
    // SAFETY: the pointers come from live, correctly sized column-major
    // buffers and the strides describe them exactly; `c` does not alias.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
    c
}

fn strides(a: &DMatrix<f64>, transposed: bool) -> (isize, isize) {
    let ld = a.nrows() as isize;
    if transposed {
        (ld, 1)
    } else {
        (1, ld)
    }
}

/// Why a symmetric eigensolve failed.
#[derive(Debug, Clone, PartialEq)]
pub struct NonConvergence {
    pub dim: usize,
    pub frobenius_norm: f64,
    pub max_diagonal: f64,
    pub min_diagonal: f64,
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
///
/// Equal eigenvalues keep the solver's original order. Each eigenvector is
/// signed so that its largest-magnitude coordinate is positive.
pub(crate) fn symmetric_eigen_desc(mut a: DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>), NonConvergence> {
    let dim = a.nrows();
    // Symmetrize; products like XᵀX are symmetric only up to rounding.
    for j in 0..dim {
        for i in 0..j {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let diag = a.diagonal();
    let diagnostics = NonConvergence {
        dim,
        frobenius_norm: a.norm(),
        max_diagonal: diag.max(),
        min_diagonal: diag.min(),
    };
    let eig = SymmetricEigen::try_new(a, f64::EPSILON, 1000 * dim.max(1)).ok_or(diagnostics)?;

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&x, &y| {
        eig.eigenvalues[y]
            .partial_cmp(&eig.eigenvalues[x])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.cmp(&y))
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(dim, dim);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    fix_signs(&mut vectors);
    Ok((values, vectors))
}

/// Flip each column so its largest-magnitude entry is positive.
pub(crate) fn fix_signs(vectors: &mut DMatrix<f64>) {
    for mut col in vectors.column_iter_mut() {
        let mut best = 0.0f64;
        let mut sign = 1.0;
        for &v in col.iter() {
            if v.abs() > best {
                best = v.abs();
                sign = v.signum();
            }
        }
        if sign < 0.0 {
            col.neg_mut();
        }
    }
}
