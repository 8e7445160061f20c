//! Multi-tier spiked covariance models.
//!
//! A model has `m = Σ q_k` spike eigenvalues grouped into tiers of equal
//! value, followed by `d - m` noise eigenvalues fixed at exactly 1. Each tier
//! is described by its ratio `c = d / (n λ)`; the eigenvalue is recovered as
//! `λ = d / (n c)`. The two boundary regimes `c = 0` and `c = ∞` carry an
//! explicitly supplied eigenvalue instead.

use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::de::{self, Deserializer};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::sampling;

/// Eigenvalue of every non-spike direction.
pub const NOISE_EIGENVALUE: f64 = 1.0;

/// Default lower bound on spike eigenvalues.
pub const DEFAULT_MIN_SPIKE: f64 = 5.0;

/// `d/(nλ)` at or below this is treated as the consistent boundary (`c = 0`).
pub const ZERO_RATIO_PROXY: f64 = 0.05;

/// `d/(nλ)` at or above this is treated as the strongly inconsistent boundary (`c = ∞`).
pub const INFINITE_RATIO_PROXY: f64 = 20.0;

/// Largest dimension for which dense `d × d` matrices are formed.
pub const DENSE_LIMIT: usize = 2000;

const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("`d` must be at least 1")]
    ZeroDimension,
    #[error("`n` must be at least 2, got {0}")]
    SampleTooSmall(usize),
    #[error("`tiers` must not be empty")]
    NoTiers,
    #[error("tiers[{tier}].multiplicity must be at least 1")]
    ZeroMultiplicity { tier: usize },
    #[error("tiers[{tier}].c must be positive and finite (or \"0\"/\"inf\" with lambda), got {value}")]
    NegativeRatio { tier: usize, value: f64 },
    #[error("tiers[{tier}].lambda is required when c is 0 or inf")]
    MissingEigenvalue { tier: usize },
    #[error("tiers[{tier}].lambda must not be given when c is finite and nonzero")]
    UnexpectedEigenvalue { tier: usize },
    #[error("tiers[{tier}]: eigenvalue {eigenvalue} must exceed the noise eigenvalue 1")]
    EigenvalueAtNoise { tier: usize, eigenvalue: f64 },
    #[error("tiers[{tier}]: eigenvalue {eigenvalue} is below min_spike = {min_spike}")]
    EigenvalueTooClose {
        tier: usize,
        eigenvalue: f64,
        min_spike: f64,
    },
    #[error("tiers[{tier}]: c = 0 requires d/(n*lambda) <= {limit}, got {ratio}")]
    NotConsistentBoundary { tier: usize, ratio: f64, limit: f64 },
    #[error("tiers[{tier}]: c = inf requires d/(n*lambda) >= {limit}, got {ratio}")]
    NotInconsistentBoundary { tier: usize, ratio: f64, limit: f64 },
    #[error("tiers[{tier}]: eigenvalue {current} is not strictly below the previous tier's {previous}")]
    NonMonotone {
        tier: usize,
        previous: f64,
        current: f64,
    },
    #[error("total spike multiplicity {m} exceeds min(n, d) = {limit}")]
    TooManySpikes { m: usize, limit: usize },
    #[error("`basis` must be {expected}×{expected}, got {rows}×{cols}")]
    BasisShape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("`basis` columns are not orthonormal (max deviation {deviation:e})")]
    BasisNotOrthonormal { deviation: f64 },
    #[error("`basis` other than identity needs a dense d×d matrix; d = {d} exceeds {limit}")]
    BasisTooLarge { d: usize, limit: usize },
    #[error("`mean` has length {got}, expected d = {expected}")]
    MeanLength { expected: usize, got: usize },
    #[error("`min_spike` must be finite and at least 1, got {0}")]
    InvalidMinSpike(f64),
    #[error("dense covariance requested for d = {d} > {limit}")]
    DenseTooLarge { d: usize, limit: usize },
}

/// Limit of `d / (n λ)` for one tier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ratio {
    Zero,
    Finite(f64),
    Infinity,
}

impl Ratio {
    pub fn is_finite_nonzero(self) -> bool {
        matches!(self, Ratio::Finite(_))
    }

    /// Numeric value, with `Infinity` mapped to `f64::INFINITY`.
    pub fn value(self) -> f64 {
        match self {
            Ratio::Zero => 0.0,
            Ratio::Finite(c) => c,
            Ratio::Infinity => f64::INFINITY,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Zero => f.write_str("0"),
            Ratio::Finite(c) => write!(f, "{c}"),
            Ratio::Infinity => f.write_str("inf"),
        }
    }
}

impl Serialize for Ratio {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Ratio::Zero => serializer.serialize_str("0"),
            Ratio::Finite(c) => serializer.serialize_f64(*c),
            Ratio::Infinity => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Ratio {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(c) if c == 0.0 => Ok(Ratio::Zero),
            Raw::Num(c) if c.is_infinite() && c > 0.0 => Ok(Ratio::Infinity),
            Raw::Num(c) => Ok(Ratio::Finite(c)),
            Raw::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
                "0" => Ok(Ratio::Zero),
                "inf" | "infinity" => Ok(Ratio::Infinity),
                other => other.parse::<f64>().map(Ratio::Finite).map_err(|_| {
                    de::Error::invalid_value(de::Unexpected::Str(&s), &"a number, \"0\" or \"inf\"")
                }),
            },
        }
    }
}

/// A group of `multiplicity` equal spike eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct Tier {
    multiplicity: usize,
    ratio: Ratio,
    eigenvalue: f64,
}

impl Tier {
    pub fn multiplicity(&self) -> usize {
        self.multiplicity
    }

    pub fn ratio(&self) -> Ratio {
        self.ratio
    }

    pub fn eigenvalue(&self) -> f64 {
        self.eigenvalue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    Identity,
    RandomOrthogonal,
}

/// Population eigenvector basis `U`.
#[derive(Debug, Clone, PartialEq)]
pub enum Basis {
    Identity,
    Explicit(DMatrix<f64>),
    RandomOrthogonal { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanConfig {
    Named(MeanName),
    Vector(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanName {
    Zero,
}

impl Default for MeanConfig {
    fn default() -> Self {
        MeanConfig::Named(MeanName::Zero)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierConfig {
    pub multiplicity: usize,
    pub c: Ratio,
    #[serde(default, rename = "lambda", skip_serializing_if = "Option::is_none")]
    pub eigenvalue: Option<f64>,
}

impl TierConfig {
    pub fn new(multiplicity: usize, c: f64) -> Self {
        Self {
            multiplicity,
            c: Ratio::Finite(c),
            eigenvalue: None,
        }
    }

    pub fn boundary(multiplicity: usize, c: Ratio, eigenvalue: f64) -> Self {
        Self {
            multiplicity,
            c,
            eigenvalue: Some(eigenvalue),
        }
    }
}

/// Model description as read from a JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n: usize,
    pub tiers: Vec<TierConfig>,
    #[serde(default = "default_basis")]
    pub basis: BasisKind,
    #[serde(default)]
    pub basis_seed: u64,
    #[serde(default)]
    pub mean: MeanConfig,
    #[serde(default = "default_min_spike")]
    pub min_spike: f64,
}

fn default_basis() -> BasisKind {
    BasisKind::Identity
}

fn default_min_spike() -> f64 {
    DEFAULT_MIN_SPIKE
}

impl ModelConfig {
    /// Identity basis, zero mean, default `min_spike`.
    pub fn new(d: usize, n: usize, tiers: Vec<TierConfig>) -> Self {
        Self {
            d,
            n,
            tiers,
            basis: BasisKind::Identity,
            basis_seed: 0,
            mean: MeanConfig::default(),
            min_spike: DEFAULT_MIN_SPIKE,
        }
    }

    /// Singleton tiers at the given finite ratios.
    pub fn distinct(d: usize, n: usize, ratios: &[f64]) -> Self {
        Self::new(d, n, ratios.iter().map(|&c| TierConfig::new(1, c)).collect())
    }

    /// Tiers of equal multiplicity at the given finite ratios.
    pub fn tiered(d: usize, n: usize, multiplicity: usize, ratios: &[f64]) -> Self {
        Self::new(
            d,
            n,
            ratios
                .iter()
                .map(|&c| TierConfig::new(multiplicity, c))
                .collect(),
        )
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Implicit population covariance `Σ = U Λ Uᵀ`: the spike columns of `U`
/// and their eigenvalues, on top of an identity noise floor.
#[derive(Debug, Clone)]
pub struct CovarianceSpec {
    d: usize,
    spike_vectors: DMatrix<f64>,
    spike_eigenvalues: Vec<f64>,
}

impl CovarianceSpec {
    pub fn d(&self) -> usize {
        self.d
    }

    /// `d × m` matrix whose columns are `u_1, …, u_m`.
    pub fn spike_vectors(&self) -> &DMatrix<f64> {
        &self.spike_vectors
    }

    pub fn spike_eigenvalues(&self) -> &[f64] {
        &self.spike_eigenvalues
    }

    pub fn noise_eigenvalue(&self) -> f64 {
        NOISE_EIGENVALUE
    }

    /// `I + Σ_j (λ_j − 1) u_j u_jᵀ`, only for `d ≤ DENSE_LIMIT`.
    pub fn dense(&self) -> Result<DMatrix<f64>, ModelError> {
        if self.d > DENSE_LIMIT {
            return Err(ModelError::DenseTooLarge {
                d: self.d,
                limit: DENSE_LIMIT,
            });
        }
        let mut sigma = DMatrix::identity(self.d, self.d);
        for (j, &lambda) in self.spike_eigenvalues.iter().enumerate() {
            let u = self.spike_vectors.column(j);
            sigma.ger(lambda - NOISE_EIGENVALUE, &u, &u, 1.0);
        }
        Ok(sigma)
    }
}

/// A validated spiked covariance model. Immutable after construction.
#[derive(Debug, Clone)]
pub struct SpikeModel {
    d: usize,
    n: usize,
    tiers: Vec<Tier>,
    basis: Basis,
    basis_matrix: Option<Arc<DMatrix<f64>>>,
    mean: Option<Arc<Vec<f64>>>,
    min_spike: f64,
    warnings: Vec<String>,
}

impl SpikeModel {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn tiers(&self) -> &[Tier] {
        &self.tiers
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn min_spike(&self) -> f64 {
        self.min_spike
    }

    /// Non-fatal validation notes (e.g. a large spike count relative to n).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Number of spikes `m`.
    pub fn spike_count(&self) -> usize {
        self.tiers.iter().map(|t| t.multiplicity).sum()
    }

    /// `λ_1 ≥ … ≥ λ_m`.
    pub fn spike_eigenvalues(&self) -> Vec<f64> {
        self.tiers
            .iter()
            .flat_map(|t| std::iter::repeat_n(t.eigenvalue, t.multiplicity))
            .collect()
    }

    /// Population eigenvalue of 0-based index `j`.
    pub fn eigenvalue(&self, j: usize) -> f64 {
        let mut end = 0;
        for tier in &self.tiers {
            end += tier.multiplicity;
            if j < end {
                return tier.eigenvalue;
            }
        }
        NOISE_EIGENVALUE
    }

    /// 0-based tier number of index `j`; noise indices map to `tiers().len()`.
    pub fn tier_of(&self, j: usize) -> usize {
        let mut end = 0;
        for (k, tier) in self.tiers.iter().enumerate() {
            end += tier.multiplicity;
            if j < end {
                return k;
            }
        }
        self.tiers.len()
    }

    /// Dense `U`, or `None` for the identity basis.
    pub fn basis_matrix(&self) -> Option<&DMatrix<f64>> {
        self.basis_matrix.as_deref()
    }

    pub fn is_identity_basis(&self) -> bool {
        self.basis_matrix.is_none()
    }

    /// Population mean `ξ`, or `None` when it is zero.
    pub fn mean(&self) -> Option<&[f64]> {
        self.mean.as_ref().map(|m| m.as_slice())
    }

    /// Copy of this model with a different population mean.
    pub fn with_mean(&self, mean: Option<Vec<f64>>) -> Result<Self, ModelError> {
        if let Some(m) = &mean {
            if m.len() != self.d {
                return Err(ModelError::MeanLength {
                    expected: self.d,
                    got: m.len(),
                });
            }
        }
        let mut out = self.clone();
        out.mean = mean.filter(|m| m.iter().any(|&x| x != 0.0)).map(Arc::new);
        Ok(out)
    }
}

/// Build and validate a model from its config.
pub fn build_model(config: &ModelConfig) -> Result<SpikeModel, ModelError> {
    let basis = match config.basis {
        BasisKind::Identity => Basis::Identity,
        BasisKind::RandomOrthogonal => Basis::RandomOrthogonal {
            seed: config.basis_seed,
        },
    };
    build_model_with_basis(config, basis)
}

/// Like [`build_model`] but with an arbitrary basis, including an explicit one.
pub fn build_model_with_basis(config: &ModelConfig, basis: Basis) -> Result<SpikeModel, ModelError> {
    let (d, n) = (config.d, config.n);
    if d == 0 {
        return Err(ModelError::ZeroDimension);
    }
    if n < 2 {
        return Err(ModelError::SampleTooSmall(n));
    }
    if config.tiers.is_empty() {
        return Err(ModelError::NoTiers);
    }
    let min_spike = config.min_spike;
    if !min_spike.is_finite() || min_spike < NOISE_EIGENVALUE {
        return Err(ModelError::InvalidMinSpike(min_spike));
    }

    let scale = d as f64 / n as f64;
    let mut tiers = Vec::with_capacity(config.tiers.len());
    for (k, tc) in config.tiers.iter().enumerate() {
        if tc.multiplicity == 0 {
            return Err(ModelError::ZeroMultiplicity { tier: k });
        }
        let eigenvalue = match (tc.c, tc.eigenvalue) {
            (Ratio::Finite(c), _) if !(c > 0.0) || !c.is_finite() => {
                return Err(ModelError::NegativeRatio { tier: k, value: c })
            }
            (Ratio::Finite(_), Some(_)) => return Err(ModelError::UnexpectedEigenvalue { tier: k }),
            (Ratio::Finite(c), None) => scale / c,
            (Ratio::Zero | Ratio::Infinity, None) => {
                return Err(ModelError::MissingEigenvalue { tier: k })
            }
            (Ratio::Zero | Ratio::Infinity, Some(lambda)) => lambda,
        };
        if !(eigenvalue > NOISE_EIGENVALUE) {
            return Err(ModelError::EigenvalueAtNoise { tier: k, eigenvalue });
        }
        if eigenvalue < min_spike {
            return Err(ModelError::EigenvalueTooClose {
                tier: k,
                eigenvalue,
                min_spike,
            });
        }
        let effective = scale / eigenvalue;
        match tc.c {
            Ratio::Zero if effective > ZERO_RATIO_PROXY => {
                return Err(ModelError::NotConsistentBoundary {
                    tier: k,
                    ratio: effective,
                    limit: ZERO_RATIO_PROXY,
                })
            }
            Ratio::Infinity if effective < INFINITE_RATIO_PROXY => {
                return Err(ModelError::NotInconsistentBoundary {
                    tier: k,
                    ratio: effective,
                    limit: INFINITE_RATIO_PROXY,
                })
            }
            _ => {}
        }
        if let Some(prev) = tiers.last().map(|t: &Tier| t.eigenvalue) {
            if !(eigenvalue < prev) {
                return Err(ModelError::NonMonotone {
                    tier: k,
                    previous: prev,
                    current: eigenvalue,
                });
            }
        }
        tiers.push(Tier {
            multiplicity: tc.multiplicity,
            ratio: tc.c,
            eigenvalue,
        });
    }

    let m: usize = tiers.iter().map(|t| t.multiplicity).sum();
    let limit = n.min(d);
    if m > limit {
        return Err(ModelError::TooManySpikes { m, limit });
    }
    let mut warnings = Vec::new();
    if 2 * m > limit {
        warnings.push(format!(
            "spike count m = {m} exceeds min(n, d)/2 = {}; finite-sample behaviour may be far from the limits",
            limit / 2
        ));
    }

    let basis_matrix = match &basis {
        Basis::Identity => None,
        Basis::Explicit(u) => {
            if d > DENSE_LIMIT {
                return Err(ModelError::BasisTooLarge {
                    d,
                    limit: DENSE_LIMIT,
                });
            }
            if u.nrows() != d || u.ncols() != d {
                return Err(ModelError::BasisShape {
                    expected: d,
                    rows: u.nrows(),
                    cols: u.ncols(),
                });
            }
            let deviation = orthonormality_deviation(u);
            if deviation > ORTHONORMAL_TOL {
                return Err(ModelError::BasisNotOrthonormal { deviation });
            }
            Some(Arc::new(u.clone()))
        }
        Basis::RandomOrthogonal { seed } => {
            if d > DENSE_LIMIT {
                return Err(ModelError::BasisTooLarge {
                    d,
                    limit: DENSE_LIMIT,
                });
            }
            Some(Arc::new(sampling::random_orthogonal(d, *seed)))
        }
    };
    let mean = match &config.mean {
        MeanConfig::Named(MeanName::Zero) => None,
        MeanConfig::Vector(v) => {
            if v.len() != d {
                return Err(ModelError::MeanLength {
                    expected: d,
                    got: v.len(),
                });
            }
            v.iter().any(|&x| x != 0.0).then(|| Arc::new(v.clone()))
        }
    };

    Ok(SpikeModel {
        d,
        n,
        tiers,
        basis,
        basis_matrix,
        mean,
        min_spike,
        warnings,
    })
}

/// `max |UᵀU − I|`.
pub fn orthonormality_deviation(u: &DMatrix<f64>) -> f64 {
    let mut gram = u.tr_mul(u);
    for i in 0..gram.nrows().min(gram.ncols()) {
        gram[(i, i)] -= 1.0;
    }
    gram.amax()
}

/// Index sets `H_1, …, H_r, H_{r+1}` as 0-based half-open ranges; the last
/// one covers the noise indices `m..d` and may be empty.
pub fn index_sets(model: &SpikeModel) -> Vec<Range<usize>> {
    let mut sets = Vec::with_capacity(model.tiers.len() + 1);
    let mut start = 0;
    for tier in &model.tiers {
        sets.push(start..start + tier.multiplicity);
        start += tier.multiplicity;
    }
    sets.push(start..model.d);
    sets
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Singleton tiers, all with finite nonzero ratio.
    Distinguishable,
    /// Some tier has multiplicity above one; all ratios finite nonzero.
    Tiered,
    /// Some tier at `c = 0` and none at `c = ∞`.
    BoundaryConsistent,
    /// Some tier at `c = ∞`.
    BoundaryStrongInconsistent,
    /// Sample size held fixed while `d` grows.
    Hdlss,
}

/// Limit results that apply to a regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitTheorem {
    /// Per-index eigenvalue ratio `1 + c_j` and cone angle `arccos((1+c_j)^{-1/2})`.
    DistinctSpikes,
    /// Same limits, measured against the tier subspace `S_k`.
    TieredSpikes,
    /// Consistency of `c = 0` tiers: ratio 1, angle 0°.
    ConsistentBoundary,
    /// Strong inconsistency of `c = ∞` tiers: angle 90°.
    StrongInconsistencyBoundary,
    /// Random limits driven by the Wishart-type matrix `W` at fixed n.
    HdlssRandomLimits,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegimeReport {
    pub regime: Regime,
    pub applicable_theorems: Vec<LimitTheorem>,
}

pub fn classify_regime(model: &SpikeModel, n_fixed: bool) -> RegimeReport {
    use LimitTheorem::*;
    if n_fixed {
        return RegimeReport {
            regime: Regime::Hdlss,
            applicable_theorems: vec![HdlssRandomLimits],
        };
    }
    let has_zero = model.tiers.iter().any(|t| t.ratio == Ratio::Zero);
    let has_inf = model.tiers.iter().any(|t| t.ratio == Ratio::Infinity);
    let tiered = model.tiers.iter().any(|t| t.multiplicity > 1);
    let base = if tiered { TieredSpikes } else { DistinctSpikes };

    let (regime, mut theorems) = if has_inf {
        (Regime::BoundaryStrongInconsistent, vec![StrongInconsistencyBoundary])
    } else if has_zero {
        (Regime::BoundaryConsistent, vec![ConsistentBoundary])
    } else if tiered {
        (Regime::Tiered, vec![])
    } else {
        (Regime::Distinguishable, vec![])
    };
    if has_inf && has_zero {
        theorems.push(ConsistentBoundary);
    }
    if model.tiers.iter().any(|t| t.ratio.is_finite_nonzero()) || theorems.is_empty() {
        theorems.insert(0, base);
    }
    RegimeReport {
        regime,
        applicable_theorems: theorems,
    }
}

pub fn population_covariance(model: &SpikeModel) -> CovarianceSpec {
    let m = model.spike_count();
    let spike_vectors = match model.basis_matrix() {
        Some(u) => u.columns(0, m).into_owned(),
        None => DMatrix::from_fn(model.d, m, |i, j| if i == j { 1.0 } else { 0.0 }),
    };
    CovarianceSpec {
        d: model.d,
        spike_vectors,
        spike_eigenvalues: model.spike_eigenvalues(),
    }
}
