//! Reproducible Gaussian data through the standardized `Z` factorization.
//!
//! Every replication draws an `n × d` matrix `Z` of i.i.d. standard normals
//! and maps it to observations `X_i = U Λ^{1/2} z_i + ξ`. The covariance is
//! never factored.
//!
//! Normals come from ChaCha8 keyed by `seed` with `stream_id` selecting the
//! ChaCha stream, transformed by the ziggurat sampler of `rand_distr`
//! (`StandardNormal`). `Z` is filled column by column.

use std::io::{self, Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg::gemm;
use crate::model::SpikeModel;

/// Default cap on the number of entries of a single `Z`.
pub const DEFAULT_MEMORY_BUDGET: usize = 2_000_000_000;

/// Stream reserved for random bases so they never share normals with data.
const BASIS_STREAM: u64 = u64::MAX;

const DUMP_MAGIC: &[u8; 4] = b"SPKL";
const DUMP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("n and d must be positive, got n = {n}, d = {d}")]
    EmptyShape { n: usize, d: usize },
    #[error("n·d = {entries} entries exceeds the memory budget of {budget}")]
    MemoryBudget { entries: u128, budget: usize },
    #[error("Z is {got_n}×{got_d} but the model needs {n}×{d}")]
    DimensionMismatch {
        n: usize,
        d: usize,
        got_n: usize,
        got_d: usize,
    },
    #[error("centering needs at least 2 observations, got {0}")]
    TooFewObservations(usize),
    #[error("not a data dump (bad magic)")]
    BadMagic,
    #[error("unsupported dump version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The RNG behind stream `stream_id` of `seed`.
pub fn normal_stream(seed: u64, stream_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// `n × d` i.i.d. standard normal matrix tied to `(seed, stream_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZMatrix {
    entries: DMatrix<f64>,
    seed: u64,
    stream_id: u64,
}

impl ZMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn d(&self) -> usize {
        self.entries.ncols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

pub fn sample_z(n: usize, d: usize, seed: u64, stream_id: u64) -> Result<ZMatrix, SamplingError> {
    sample_z_with_budget(n, d, seed, stream_id, DEFAULT_MEMORY_BUDGET)
}

pub fn sample_z_with_budget(
    n: usize,
    d: usize,
    seed: u64,
    stream_id: u64,
    budget: usize,
) -> Result<ZMatrix, SamplingError> {
    check_shape(n, d, budget)?;
    let mut rng = normal_stream(seed, stream_id);
    let entries = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    Ok(ZMatrix {
        entries,
        seed,
        stream_id,
    })
}

pub(crate) fn check_shape(n: usize, d: usize, budget: usize) -> Result<(), SamplingError> {
    if n == 0 || d == 0 {
        return Err(SamplingError::EmptyShape { n, d });
    }
    let entries = n as u128 * d as u128;
    if entries > budget as u128 {
        return Err(SamplingError::MemoryBudget { entries, budget });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub stream_id: u64,
}

/// Observations `X_1, …, X_n` in `ℝ^d`.
///
/// Stored as the `n × d` matrix `Xᵀ`: row `i` is observation `X_i`, and
/// column `k` holds coordinate `k` of every observation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    obs: DMatrix<f64>,
    centered: bool,
    provenance: Option<Provenance>,
}

impl DataMatrix {
    /// From an `n × d` matrix whose rows are observations.
    pub fn from_observations(obs: DMatrix<f64>) -> Self {
        Self {
            obs,
            centered: false,
            provenance: None,
        }
    }

    /// From a `d × n` matrix `X = [X_1, …, X_n]`.
    pub fn from_columns(x: &DMatrix<f64>) -> Self {
        Self::from_observations(x.transpose())
    }

    pub fn n(&self) -> usize {
        self.obs.nrows()
    }

    pub fn d(&self) -> usize {
        self.obs.ncols()
    }

    /// The `n × d` matrix `Xᵀ`.
    pub fn observations(&self) -> &DMatrix<f64> {
        &self.obs
    }

    /// The `d × n` matrix `X` (copied).
    pub fn to_columns(&self) -> DMatrix<f64> {
        self.obs.transpose()
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    pub fn provenance(&self) -> Option<Provenance> {
        self.provenance
    }
}

/// `X = U Λ^{1/2} Zᵀ + ξ 1ᵀ` for the model's basis, eigenvalues and mean.
pub fn sample_data(model: &SpikeModel, z: &ZMatrix) -> Result<DataMatrix, SamplingError> {
    check_dims(model, z)?;
    sample_data_owned(model, z.clone())
}

/// As [`sample_data`], reusing the buffer of `z`.
pub fn sample_data_owned(model: &SpikeModel, z: ZMatrix) -> Result<DataMatrix, SamplingError> {
    check_dims(model, &z)?;
    let provenance = Provenance {
        seed: z.seed,
        stream_id: z.stream_id,
    };
    let mut scaled = z.entries;
    // Noise eigenvalues are 1, so only the spike columns need scaling.
    for (k, lambda) in model.spike_eigenvalues().into_iter().enumerate() {
        scaled.column_mut(k).scale_mut(lambda.sqrt());
    }
    let mut obs = match model.basis_matrix() {
        None => scaled,
        Some(u) => gemm(1.0, &scaled, false, u, true),
    };
    if let Some(mean) = model.mean() {
        for (mut col, &shift) in obs.column_iter_mut().zip(mean) {
            col.add_scalar_mut(shift);
        }
    }
    Ok(DataMatrix {
        obs,
        centered: false,
        provenance: Some(provenance),
    })
}

fn check_dims(model: &SpikeModel, z: &ZMatrix) -> Result<(), SamplingError> {
    if z.n() != model.n() || z.d() != model.d() {
        return Err(SamplingError::DimensionMismatch {
            n: model.n(),
            d: model.d(),
            got_n: z.n(),
            got_d: z.d(),
        });
    }
    Ok(())
}

/// Haar-distributed `d × d` orthogonal matrix: QR of a Gaussian matrix with
/// the diagonal of `R` made positive. For `d = 1` this is `[1]`.
pub fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    if d <= 1 {
        return DMatrix::from_element(d, d, 1.0);
    }
    let mut rng = normal_stream(seed, BASIS_STREAM);
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for (i, mut col) in q.column_iter_mut().enumerate() {
        if r[(i, i)] < 0.0 {
            col.neg_mut();
        }
    }
    q
}

/// Subtract the sample mean from every observation.
pub fn center(data: &DataMatrix) -> Result<DataMatrix, SamplingError> {
    let n = data.n();
    if n < 2 {
        return Err(SamplingError::TooFewObservations(n));
    }
    let mut obs = data.obs.clone();
    for mut col in obs.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    Ok(DataMatrix {
        obs,
        centered: true,
        provenance: data.provenance,
    })
}

/// Binary dump: `"SPKL"`, version (u32), n (u64), d (u64), then the
/// observations row by row as little-endian f64 (row `i` is `X_i`).
pub fn write_binary<W: Write>(data: &DataMatrix, mut out: W) -> io::Result<()> {
    out.write_all(DUMP_MAGIC)?;
    out.write_all(&DUMP_VERSION.to_le_bytes())?;
    out.write_all(&(data.n() as u64).to_le_bytes())?;
    out.write_all(&(data.d() as u64).to_le_bytes())?;
    let mut row = Vec::with_capacity(data.d() * 8);
    for i in 0..data.n() {
        row.clear();
        for k in 0..data.d() {
            row.extend_from_slice(&data.obs[(i, k)].to_le_bytes());
        }
        out.write_all(&row)?;
    }
    out.flush()
}

pub fn read_binary<R: Read>(mut input: R) -> Result<DataMatrix, SamplingError> {
    let mut header = [0u8; 24];
    input.read_exact(&mut header)?;
    if &header[0..4] != DUMP_MAGIC {
        return Err(SamplingError::BadMagic);
    }
    let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    if version != DUMP_VERSION {
        return Err(SamplingError::UnsupportedVersion(version));
    }
    let n = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes")) as usize;
    let d = u64::from_le_bytes(header[16..24].try_into().expect("8 bytes")) as usize;
    check_shape(n, d, DEFAULT_MEMORY_BUDGET)?;
    let mut obs = DMatrix::zeros(n, d);
    let mut row = vec![0u8; d * 8];
    for i in 0..n {
        input.read_exact(&mut row)?;
        for (k, chunk) in row.chunks_exact(8).enumerate() {
            obs[(i, k)] = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(DataMatrix::from_observations(obs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, build_model_with_basis, orthonormality_deviation, Basis, MeanConfig, ModelConfig, Ratio, TierConfig};

    fn spiked_model(d: usize, n: usize, lambdas: &[f64]) -> SpikeModel {
        let tiers = lambdas
            .iter()
            .map(|&l| TierConfig::new(1, d as f64 / (n as f64 * l)))
            .collect();
        build_model(&ModelConfig {
            min_spike: 1.0,
            ..ModelConfig::new(d, n, tiers)
        })
        .unwrap()
    }

    #[test]
    fn z_is_reproducible() {
        let a = sample_z(3, 2, 1, 0).unwrap();
        let b = sample_z(3, 2, 1, 0).unwrap();
        assert_eq!(a, b);
        let c = sample_z(3, 2, 1, 1).unwrap();
        assert_ne!(a.entries(), c.entries());
    }

    #[test]
    fn z_respects_budget() {
        assert!(matches!(
            sample_z_with_budget(1000, 1000, 0, 0, 999_999),
            Err(SamplingError::MemoryBudget { .. })
        ));
        assert!(matches!(sample_z(0, 3, 0, 0), Err(SamplingError::EmptyShape { .. })));
    }

    #[test]
    fn scales_spike_coordinates() {
        let model = spiked_model(2, 2, &[4.0]);
        let z = ZMatrix {
            entries: DMatrix::from_element(2, 2, 1.0),
            seed: 0,
            stream_id: 0,
        };
        let x = sample_data(&model, &z).unwrap();
        assert_eq!(x.observations().row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 1.0]);
    }

    #[test]
    fn zero_z_gives_mean() {
        let model = spiked_model(3, 4, &[6.0]);
        let model = model.with_mean(Some(vec![1.0, -2.0, 3.0])).unwrap();
        let z = ZMatrix {
            entries: DMatrix::zeros(4, 3),
            seed: 0,
            stream_id: 0,
        };
        let x = sample_data(&model, &z).unwrap();
        for row in x.observations().row_iter() {
            assert_eq!(row.iter().copied().collect::<Vec<_>>(), vec![1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn mean_from_config() {
        let mut cfg = ModelConfig::new(2, 5, vec![TierConfig::boundary(1, Ratio::Zero, 100.0)]);
        cfg.mean = MeanConfig::Vector(vec![10.0, 10.0]);
        let model = build_model(&cfg).unwrap();
        let z = ZMatrix {
            entries: DMatrix::zeros(5, 2),
            seed: 0,
            stream_id: 0,
        };
        assert!(sample_data(&model, &z).unwrap().observations().iter().all(|&v| v == 10.0));
    }

    #[test]
    fn rejects_mismatched_z() {
        let model = spiked_model(3, 4, &[6.0]);
        let z = sample_z(4, 2, 0, 0).unwrap();
        assert!(matches!(sample_data(&model, &z), Err(SamplingError::DimensionMismatch { .. })));
    }

    #[test]
    fn explicit_basis_matches_dense_product() {
        let u = random_orthogonal(6, 11);
        let cfg = ModelConfig {
            min_spike: 1.0,
            ..ModelConfig::new(6, 4, vec![TierConfig::boundary(2, Ratio::Zero, 30.0)])
        };
        let model = build_model_with_basis(&cfg, Basis::Explicit(u.clone())).unwrap();
        let z = sample_z(4, 6, 3, 0).unwrap();
        let x = sample_data(&model, &z).unwrap().to_columns();
        let mut sqrt_lambda = DMatrix::identity(6, 6);
        sqrt_lambda[(0, 0)] = 30f64.sqrt();
        sqrt_lambda[(1, 1)] = 30f64.sqrt();
        let expected = &u * sqrt_lambda * z.entries().transpose();
        assert!((x - expected).amax() < 1e-12);
    }

    #[test]
    fn random_orthogonal_shapes() {
        assert_eq!(random_orthogonal(1, 5), DMatrix::from_element(1, 1, 1.0));
        for seed in [0, 1, 99] {
            let q = random_orthogonal(20, seed);
            assert!(orthonormality_deviation(&q) <= 1e-10);
        }
        assert_eq!(random_orthogonal(8, 4), random_orthogonal(8, 4));
    }

    #[test]
    fn centering() {
        let x = DataMatrix::from_observations(DMatrix::from_column_slice(2, 1, &[1.0, 3.0]));
        let c = center(&x).unwrap();
        assert_eq!(c.observations().as_slice(), &[-1.0, 1.0]);
        assert!(c.is_centered());

        let zero_mean = DataMatrix::from_observations(DMatrix::from_column_slice(3, 2, &[-1.0, 0.0, 1.0, 2.0, -4.0, 2.0]));
        assert_eq!(center(&zero_mean).unwrap().observations(), zero_mean.observations());

        let single = DataMatrix::from_observations(DMatrix::zeros(1, 3));
        assert!(matches!(center(&single), Err(SamplingError::TooFewObservations(1))));
    }

    #[test]
    fn binary_dump_layout() {
        let obs = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let data = DataMatrix::from_observations(obs);
        let mut buf = Vec::new();
        write_binary(&data, &mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 6 * 8);
        assert_eq!(&buf[0..4], b"SPKL");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 3);
        // row-major: second value is X_1's second coordinate
        assert_eq!(f64::from_le_bytes(buf[32..40].try_into().unwrap()), 2.0);
        let back = read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.observations(), data.observations());

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_binary(bad.as_slice()), Err(SamplingError::BadMagic)));
        assert!(matches!(read_binary(&buf[..30]), Err(SamplingError::Io(_))));
    }
}
