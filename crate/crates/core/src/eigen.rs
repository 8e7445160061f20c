//! Sample eigenstructure and principal angles.
//!
//! `Σ̂ = n⁻¹ X Xᵀ` is eigendecomposed either directly (`d × d`) or through
//! the `n × n` Gram dual `n⁻¹ XᵀX`, which is what makes `d ≫ n` tractable.
//! Both paths return the same pairs: eigenvalues are clamped at zero, pairs
//! with `λ̂_j ≤ 1e-12 · λ̂_1` carry no eigenvector, and every eigenvector is
//! signed so its largest-magnitude coordinate is positive.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, DVectorView};
use thiserror::Error;

use crate::linalg::{fix_signs, gemm, symmetric_eigen_desc, NonConvergence};
use crate::model::{index_sets, SpikeModel, DENSE_LIMIT};
use crate::sampling::{self, DataMatrix, SamplingError, ZMatrix};

/// Pairs below this fraction of `λ̂_1` are treated as null.
pub const NULL_EIGENVALUE_RATIO: f64 = 1e-12;

const UNIT_TOL: f64 = 1e-6;
const BASIS_TOL: f64 = 1e-8;
const SCORE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EigenError {
    #[error(
        "eigensolver did not converge on a {dim}×{dim} matrix (‖·‖_F = {norm:e}, diagonal in [{min_diag:e}, {max_diag:e}])"
    )]
    NonConvergence {
        dim: usize,
        norm: f64,
        min_diag: f64,
        max_diag: f64,
    },
    #[error("vector is not unit norm (‖v‖ = {norm})")]
    NonUnit { norm: f64 },
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("subspace basis is not orthonormal (max deviation {deviation:e})")]
    NonOrthonormalBasis { deviation: f64 },
    #[error("model is {model_n}×{model_d} but data is {data_n}×{data_d}")]
    ShapeMismatch {
        model_n: usize,
        model_d: usize,
        data_n: usize,
        data_d: usize,
    },
    #[error("population scores of column {0} are all below 1e-8; ratios are undefined")]
    DegenerateScores(usize),
    #[error("identity checks need an identity basis, zero mean and uncentered data")]
    IdentityPrecondition,
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

impl From<NonConvergence> for EigenError {
    fn from(e: NonConvergence) -> Self {
        EigenError::NonConvergence {
            dim: e.dim,
            norm: e.frobenius_norm,
            min_diag: e.min_diagonal,
            max_diag: e.max_diagonal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenMethod {
    Direct,
    Gram,
}

#[derive(Debug, Clone)]
pub struct EigenResult {
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
    scores: DMatrix<f64>,
    method: EigenMethod,
}

impl EigenResult {
    /// `λ̂_1 ≥ … ≥ λ̂_{min(n,d)} ≥ 0`.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `d × k` matrix of `û_1, …, û_k`.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// `n × k` matrix of unit score vectors `v̂_1, …, v̂_k`.
    pub fn scores(&self) -> &DMatrix<f64> {
        &self.scores
    }

    pub fn method(&self) -> EigenMethod {
        self.method
    }

    /// Number of pairs `k` that carry vectors.
    pub fn pair_count(&self) -> usize {
        self.eigenvectors.ncols()
    }

    pub fn eigenvector(&self, j: usize) -> DVectorView<'_, f64> {
        self.eigenvectors.column(j)
    }

    pub fn score_vector(&self, j: usize) -> DVectorView<'_, f64> {
        self.scores.column(j)
    }
}

/// `Σ̂` eigenstructure with automatic Direct/Gram dispatch.
pub fn sample_eigen(data: &DataMatrix, center: bool) -> Result<EigenResult, EigenError> {
    sample_eigen_top(data, center, None)
}

/// As [`sample_eigen`] but keeps at most `top` eigenvectors. All
/// `min(n, d)` eigenvalues are still returned.
pub fn sample_eigen_top(data: &DataMatrix, center: bool, top: Option<usize>) -> Result<EigenResult, EigenError> {
    let centered;
    let data = if center && !data.is_centered() {
        centered = sampling::center(data)?;
        &centered
    } else {
        data
    };
    if uses_direct_path(data.n(), data.d()) {
        direct_eigen(data, top)
    } else {
        gram_eigen(data, top)
    }
}

/// Whether [`sample_eigen`] takes the dense `d × d` route.
pub fn uses_direct_path(n: usize, d: usize) -> bool {
    d <= n || d <= DENSE_LIMIT
}

/// Eigendecomposition of the dense `d × d` sample covariance.
pub fn direct_eigen(data: &DataMatrix, top: Option<usize>) -> Result<EigenResult, EigenError> {
    let (n, d) = (data.n(), data.d());
    let obs = data.observations();
    let cov = gemm(1.0 / n as f64, obs, true, obs, false);
    let (values, vectors) = symmetric_eigen_desc(cov)?;
    let eigenvalues = clamp(&values[..n.min(d)]);
    let k = retained(&eigenvalues, top);
    let eigenvectors = vectors.columns(0, k).into_owned();
    let mut scores = gemm(1.0, obs, false, &eigenvectors, false);
    for (j, mut col) in scores.column_iter_mut().enumerate() {
        col.scale_mut(1.0 / (n as f64 * eigenvalues[j]).sqrt());
    }
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
        scores,
        method: EigenMethod::Direct,
    })
}

/// Eigendecomposition through the `n × n` Gram matrix `n⁻¹ XᵀX`, mapping
/// each score vector back by `û_j = X v̂_j / (n λ̂_j)^{1/2}`.
pub fn gram_eigen(data: &DataMatrix, top: Option<usize>) -> Result<EigenResult, EigenError> {
    let (n, d) = (data.n(), data.d());
    let obs = data.observations();
    let gram = gemm(1.0 / n as f64, obs, false, obs, true);
    let (values, vectors) = symmetric_eigen_desc(gram)?;
    let eigenvalues = clamp(&values[..n.min(d)]);
    let k = retained(&eigenvalues, top);
    let mut scores = vectors.columns(0, k).into_owned();
    let mut eigenvectors = gemm(1.0, obs, true, &scores, false);
    for (j, mut col) in eigenvectors.column_iter_mut().enumerate() {
        col.scale_mut(1.0 / (n as f64 * eigenvalues[j]).sqrt());
    }
    // Sign follows û; the score vector flips with it.
    let before = eigenvectors.clone();
    fix_signs(&mut eigenvectors);
    for j in 0..k {
        if eigenvectors.column(j).dot(&before.column(j)) < 0.0 {
            scores.column_mut(j).neg_mut();
        }
    }
    Ok(EigenResult {
        eigenvalues,
        eigenvectors,
        scores,
        method: EigenMethod::Gram,
    })
}

fn clamp(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| v.max(0.0)).collect()
}

fn retained(eigenvalues: &[f64], top: Option<usize>) -> usize {
    let lead = eigenvalues.first().copied().unwrap_or(0.0);
    let floor = lead * NULL_EIGENVALUE_RATIO;
    let k = eigenvalues.iter().take_while(|&&v| v > floor && v > 0.0).count();
    top.map_or(k, |t| k.min(t))
}

fn check_unit(v: &DVectorView<'_, f64>) -> Result<(), EigenError> {
    let norm = v.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(EigenError::NonUnit { norm });
    }
    Ok(())
}

fn cos_to_degrees(cos: f64) -> f64 {
    cos.abs().min(1.0).acos().to_degrees()
}

/// Angle in degrees between the lines spanned by two unit vectors.
pub fn angle_between<'a, 'b>(
    v: impl Into<DVectorView<'a, f64>>,
    u: impl Into<DVectorView<'b, f64>>,
) -> Result<f64, EigenError> {
    let (v, u) = (v.into(), u.into());
    if v.len() != u.len() {
        return Err(EigenError::LengthMismatch(v.len(), u.len()));
    }
    check_unit(&v)?;
    check_unit(&u)?;
    Ok(cos_to_degrees(v.dot(&u)))
}

/// Angle in degrees between a unit vector and the span of orthonormal columns.
pub fn angle_to_subspace<'a>(v: impl Into<DVectorView<'a, f64>>, basis: &DMatrix<f64>) -> Result<f64, EigenError> {
    let v = v.into();
    if v.len() != basis.nrows() {
        return Err(EigenError::LengthMismatch(v.len(), basis.nrows()));
    }
    check_unit(&v)?;
    let deviation = crate::model::orthonormality_deviation(basis);
    if deviation > BASIS_TOL {
        return Err(EigenError::NonOrthonormalBasis { deviation });
    }
    Ok(cos_to_degrees(basis.tr_mul(&v).norm()))
}

/// Symmetric matrix of angles (degrees) between the unit columns of `vectors`.
pub fn pairwise_angles(vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let inner = gemm(1.0, vectors, true, vectors, false);
    let p = inner.nrows();
    DMatrix::from_fn(p, p, |a, b| if a == b { 0.0 } else { cos_to_degrees(inner[(a, b)]) })
}

/// How spike indices are grouped into population subspaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubspaceGrouping {
    /// One subspace per tier, plus the noise subspace.
    Tiers,
    /// All spikes in a single subspace (fixed-n setting), plus the noise subspace.
    AllSpikes,
}

/// Angles of selected sample eigenvectors to their population counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleReport {
    pub indices: Vec<usize>,
    pub vector_angles: Vec<f64>,
    pub subspace_angles: Vec<f64>,
    pub inner_products: Vec<f64>,
}

/// Subspace index sets used for `grouping`.
pub fn grouping_sets(model: &SpikeModel, grouping: SubspaceGrouping) -> Vec<Range<usize>> {
    match grouping {
        SubspaceGrouping::Tiers => index_sets(model),
        SubspaceGrouping::AllSpikes => {
            let m = model.spike_count();
            vec![0..m, m..model.d()]
        }
    }
}

/// Angles of `û_j` (for each `j` in `indices`, all `< pair_count`) to `u_j`
/// and to the population subspace containing `j`.
pub fn angle_report(
    model: &SpikeModel,
    sample: &EigenResult,
    indices: &[usize],
    grouping: SubspaceGrouping,
) -> AngleReport {
    let sets = grouping_sets(model, grouping);
    let mut report = AngleReport {
        indices: indices.to_vec(),
        vector_angles: Vec::with_capacity(indices.len()),
        subspace_angles: Vec::with_capacity(indices.len()),
        inner_products: Vec::with_capacity(indices.len()),
    };
    for &j in indices {
        let v = sample.eigenvector(j);
        let coords: DVector<f64> = match model.basis_matrix() {
            None => v.into_owned(),
            Some(u) => u.tr_mul(&v),
        };
        let set = sets.iter().find(|s| s.contains(&j)).cloned().unwrap_or(0..0);
        let cos2: f64 = coords.rows_range(set).iter().map(|x| x * x).sum();
        let inner = coords[j].abs().min(1.0);
        report.inner_products.push(inner);
        report.vector_angles.push(cos_to_degrees(inner));
        report.subspace_angles.push(cos_to_degrees(cos2.sqrt()));
    }
    report
}

/// `S_{i,j} = λ_j^{-1/2} u_jᵀ (X_i − ξ)` for the `m` spike directions.
pub fn population_scores(model: &SpikeModel, data: &DataMatrix) -> Result<DMatrix<f64>, EigenError> {
    if data.n() != model.n() || data.d() != model.d() {
        return Err(EigenError::ShapeMismatch {
            model_n: model.n(),
            model_d: model.d(),
            data_n: data.n(),
            data_d: data.d(),
        });
    }
    let m = model.spike_count();
    let mut obs_m = match model.mean() {
        Some(mean) if !data.is_centered() => {
            let mut obs = data.observations().clone();
            for (mut col, &shift) in obs.column_iter_mut().zip(mean) {
                col.add_scalar_mut(-shift);
            }
            project(model, &obs, m)
        }
        _ => project(model, data.observations(), m),
    };
    for (j, lambda) in model.spike_eigenvalues().into_iter().enumerate() {
        obs_m.column_mut(j).scale_mut(1.0 / lambda.sqrt());
    }
    Ok(obs_m)
}

fn project(model: &SpikeModel, obs: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    match model.basis_matrix() {
        None => obs.columns(0, m).into_owned(),
        Some(u) => gemm(1.0, obs, false, &u.columns(0, m).into_owned(), false),
    }
}

/// `|√n · v̂_{i,j} / S_{i,j}|`, with entries where `|S_{i,j}| < 1e-8` left out.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRatios {
    columns: Vec<Vec<Option<f64>>>,
}

impl ScoreRatios {
    pub fn columns(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.columns[j][i]
    }

    pub fn column(&self, j: usize) -> &[Option<f64>] {
        &self.columns[j]
    }

    pub fn flagged(&self, j: usize) -> usize {
        self.columns[j].iter().filter(|r| r.is_none()).count()
    }

    /// Median of the unflagged ratios in column `j`.
    pub fn median(&self, j: usize) -> f64 {
        let values: Vec<f64> = self.columns[j].iter().flatten().copied().collect();
        crate::stats::median(&values)
    }
}

pub fn score_ratios(sample: &EigenResult, population: &DMatrix<f64>) -> Result<ScoreRatios, EigenError> {
    let n = sample.scores().nrows();
    if population.nrows() != n {
        return Err(EigenError::LengthMismatch(n, population.nrows()));
    }
    let cols = population.ncols().min(sample.pair_count());
    let root_n = (n as f64).sqrt();
    let mut columns = Vec::with_capacity(cols);
    for j in 0..cols {
        let v = sample.score_vector(j);
        let s = population.column(j);
        let sign = if v.dot(&s) < 0.0 { -1.0 } else { 1.0 };
        let column: Vec<Option<f64>> = v
            .iter()
            .zip(s.iter())
            .map(|(&vij, &sij)| (sij.abs() >= SCORE_FLOOR).then(|| (sign * root_n * vij / sij).abs()))
            .collect();
        if column.iter().all(Option::is_none) {
            return Err(EigenError::DegenerateScores(j));
        }
        columns.push(column);
    }
    Ok(ScoreRatios { columns })
}

/// Residuals of the exact finite-sample identities linking the sample
/// eigenstructure to the generating `Z` (identity basis, zero mean).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct IdentityResiduals {
    /// `‖W Wᵀ − n⁻¹ZᵀZ‖_F / ‖n⁻¹ZᵀZ‖_F` with `W = Λ^{-1/2} Û Λ̂^{1/2}`.
    pub ww_relative: f64,
    /// Max relative error of `Σ_j λ̂_j û²_{k,j} / λ_k = n⁻¹ Σ_i z²_{i,k}` over `k`.
    pub diagonal_relative: f64,
    /// `|Σ_j λ̂_j − n⁻¹ Σ_i ‖X_i‖²|` relative to the right side.
    pub trace_relative: f64,
    /// Max deviation from orthonormality of `Û` and of the score vectors.
    pub orthonormality: f64,
    /// Max relative excess of `λ̂_j û²_{j,j}` over `λ_j n⁻¹ Σ_i z²_{i,j}`.
    pub bound_excess: f64,
}

impl IdentityResiduals {
    pub fn max(&self) -> f64 {
        [
            self.ww_relative,
            self.diagonal_relative,
            self.trace_relative,
            self.orthonormality,
            self.bound_excess,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Evaluate every exact identity. `sample` should hold all non-null pairs.
pub fn identity_residuals(
    model: &SpikeModel,
    z: &ZMatrix,
    data: &DataMatrix,
    sample: &EigenResult,
) -> Result<IdentityResiduals, EigenError> {
    if !model.is_identity_basis() || model.mean().is_some() || data.is_centered() {
        return Err(EigenError::IdentityPrecondition);
    }
    let (n, d) = (data.n(), data.d());
    if z.n() != n || z.d() != d || model.d() != d {
        return Err(EigenError::ShapeMismatch {
            model_n: model.n(),
            model_d: model.d(),
            data_n: n,
            data_d: d,
        });
    }
    let k = sample.pair_count();
    let lambda_hat = &sample.eigenvalues()[..k];
    let u_hat = sample.eigenvectors();
    let zm = z.entries();
    let inv_n = 1.0 / n as f64;

    // P = Λ^{-1/2} Û Λ̂^{1/2} (d × k), Q = n^{-1/2} Zᵀ (d × n); P Pᵀ = W Wᵀ.
    let mut stacked = DMatrix::zeros(d, k + n);
    for j in 0..k {
        let s = lambda_hat[j].sqrt();
        for row in 0..d {
            stacked[(row, j)] = u_hat[(row, j)] * s / model.eigenvalue(row).sqrt();
        }
    }
    let root = inv_n.sqrt();
    for i in 0..n {
        for row in 0..d {
            stacked[(row, k + i)] = zm[(i, row)] * root;
        }
    }
    let ww_relative = stacked_difference(stacked, k);

    let z_sq: Vec<f64> = (0..d).map(|row| zm.column(row).norm_squared() * inv_n).collect();
    let mut diagonal_relative = 0.0f64;
    let mut bound_excess = 0.0f64;
    for row in 0..d {
        let lambda = model.eigenvalue(row);
        let lhs: f64 = (0..k).map(|j| lambda_hat[j] * u_hat[(row, j)].powi(2)).sum::<f64>() / lambda;
        diagonal_relative = diagonal_relative.max((lhs - z_sq[row]).abs() / z_sq[row]);
        if row < k {
            let own = lambda_hat[row] * u_hat[(row, row)].powi(2);
            let cap = lambda * z_sq[row];
            bound_excess = bound_excess.max((own - cap).max(0.0) / cap);
        }
    }

    let trace_hat: f64 = sample.eigenvalues().iter().sum();
    let trace = data.observations().norm_squared() * inv_n;
    let trace_relative = (trace_hat - trace).abs() / trace;

    let orthonormality = orthonormality_error(u_hat).max(orthonormality_error(sample.scores()));

    Ok(IdentityResiduals {
        ww_relative,
        diagonal_relative,
        trace_relative,
        orthonormality,
        bound_excess,
    })
}

/// `‖P Pᵀ − Q Qᵀ‖_F / ‖Q Qᵀ‖_F` for `A = [P | Q]`, evaluated on the
/// triangular factor of `A` so the `d × d` products are never formed.
fn stacked_difference(a: DMatrix<f64>, k: usize) -> f64 {
    let r = a.qr().r();
    let rp = r.columns(0, k).into_owned();
    let rq = r.columns(k, r.ncols() - k).into_owned();
    let pp = gemm(1.0, &rp, false, &rp, true);
    let qq = gemm(1.0, &rq, false, &rq, true);
    (pp - &qq).norm() / qq.norm()
}

/// `max |VᵀV − I|`.
pub fn orthonormality_error(v: &DMatrix<f64>) -> f64 {
    if v.ncols() == 0 {
        return 0.0;
    }
    let mut g = gemm(1.0, v, true, v, false);
    for i in 0..g.nrows() {
        g[(i, i)] -= 1.0;
    }
    g.amax()
}
