//! Theoretical limits of the sample eigenstructure.
//!
//! With `n` growing and `d/(n λ_j) → c_j`, spike index `j` has
//! `λ̂_j / λ_j → 1 + c_j` and its sample eigenvector lies on a cone of angle
//! `arccos((1 + c_j)^{-1/2})` around `u_j` (around the tier subspace `S_k`
//! for tiered spikes). At fixed `n` the limits are random and driven by the
//! eigenvalues of `W = ℂ Z_mᵀ Z_m ℂ`, `ℂ = diag(c_j^{-1/2})`.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::linalg::symmetric_eigen_desc;
use crate::model::{index_sets, Ratio, Regime, RegimeReport, SpikeModel};
use crate::sampling::normal_stream;

/// Keeps limit draws on different ChaCha keys than data replications.
const LIMIT_SEED_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LimitsError {
    #[error("fixed-n regime has random limits; use hdlss_limit_sample")]
    HdlssRegime,
    #[error("tier {tier} has c = {ratio}; fixed-n limits need every c finite and nonzero")]
    BoundaryTier { tier: usize, ratio: Ratio },
    #[error("at least one draw is required")]
    NoDraws,
}

/// Cone angle `arccos((1 + c)^{-1/2})` in degrees; 0° at `c = 0`, 90° at `c = ∞`.
pub fn angle_limit_deg(c: Ratio) -> f64 {
    match c {
        Ratio::Zero => 0.0,
        Ratio::Infinity => 90.0,
        // arccos((1 + c)^{-1/2}) = arctan(√c), better conditioned near 0.
        Ratio::Finite(c) => c.sqrt().atan().to_degrees(),
    }
}

/// Limit of `λ̂_j / λ_j`: `1 + c`, or `∞` at `c = ∞`.
pub fn ratio_limit(c: Ratio) -> f64 {
    1.0 + c.value()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexLimit {
    /// 0-based spike index.
    pub index: usize,
    /// 0-based tier.
    pub tier: usize,
    pub c: Ratio,
    pub ratio_limit: f64,
    pub angle_limit_deg: f64,
    /// The angle limit refers to the tier subspace rather than to `u_j`.
    pub against_subspace: bool,
}

/// Serialized 1-based, with an infinite ratio limit written as `"inf"`.
impl Serialize for IndexLimit {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("IndexLimit", 5)?;
        s.serialize_field("index", &(self.index + 1))?;
        s.serialize_field("tier", &(self.tier + 1))?;
        s.serialize_field("c", &self.c)?;
        if self.ratio_limit.is_finite() {
            s.serialize_field("ratio_limit", &self.ratio_limit)?;
        } else {
            s.serialize_field("ratio_limit", "inf")?;
        }
        s.serialize_field("angle_limit_deg", &self.angle_limit_deg)?;
        s.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseLimits {
    /// Limit of `n λ̂_j / (d λ_j)`.
    pub eigenvalue_scale: f64,
    /// Decay order of `|⟨û_j, u_j⟩|`: `(n/d)^{1/2}`, or `d^{-1/2}` at fixed n.
    pub vector_rate: f64,
    /// Limit of the angle between `û_j` and the noise subspace.
    pub subspace_angle_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitPrediction {
    pub regime: Regime,
    #[serde(rename = "predictions")]
    pub spikes: Vec<IndexLimit>,
    pub noise: Option<NoiseLimits>,
    #[serde(skip)]
    pub tier_map: Vec<Range<usize>>,
}

impl LimitPrediction {
    pub fn spike(&self, index: usize) -> Option<&IndexLimit> {
        self.spikes.iter().find(|s| s.index == index)
    }
}

/// Deterministic limits for the growing-n regimes.
pub fn predict(model: &SpikeModel, regime: &RegimeReport) -> Result<LimitPrediction, LimitsError> {
    if regime.regime == Regime::Hdlss {
        return Err(LimitsError::HdlssRegime);
    }
    let mut spikes = Vec::with_capacity(model.spike_count());
    let mut index = 0;
    for (k, tier) in model.tiers().iter().enumerate() {
        for _ in 0..tier.multiplicity() {
            spikes.push(IndexLimit {
                index,
                tier: k,
                c: tier.ratio(),
                ratio_limit: ratio_limit(tier.ratio()),
                angle_limit_deg: angle_limit_deg(tier.ratio()),
                against_subspace: tier.multiplicity() > 1,
            });
            index += 1;
        }
    }
    Ok(LimitPrediction {
        regime: regime.regime,
        spikes,
        noise: predict_noise(model, false),
        tier_map: index_sets(model),
    })
}

/// Limits for the noise indices `m < j ≤ min(n, d)`; `None` without a noise block.
pub fn predict_noise(model: &SpikeModel, n_fixed: bool) -> Option<NoiseLimits> {
    let (n, d) = (model.n() as f64, model.d() as f64);
    if model.spike_count() >= model.n().min(model.d()) {
        return None;
    }
    let vector_rate = if n_fixed { d.recip().sqrt() } else { (n / d).sqrt() };
    Some(NoiseLimits {
        eigenvalue_scale: 1.0,
        vector_rate,
        subspace_angle_deg: 0.0,
    })
}

/// Draws from the fixed-n random limits.
#[derive(Debug, Clone, PartialEq)]
pub struct HdlssLimitSample {
    n: usize,
    ratios: Vec<f64>,
    /// `[draw][j]`, descending within a draw.
    w_eigenvalues: Vec<Vec<f64>>,
}

impl HdlssLimitSample {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn draws(&self) -> usize {
        self.w_eigenvalues.len()
    }

    pub fn spike_count(&self) -> usize {
        self.ratios.len()
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn w_eigenvalues(&self) -> &[Vec<f64>] {
        &self.w_eigenvalues
    }

    /// `c_j λ_j(W) / n + c_j` per draw.
    pub fn eigenvalue_ratio_draws(&self, j: usize) -> Vec<f64> {
        let (c, n) = (self.ratios[j], self.n as f64);
        self.w_eigenvalues.iter().map(|w| c * w[j] / n + c).collect()
    }

    /// `arccos((1 + n / λ_j(W))^{-1/2})` in degrees per draw.
    pub fn angle_draws_deg(&self, j: usize) -> Vec<f64> {
        let n = self.n as f64;
        self.w_eigenvalues
            .iter()
            .map(|w| (n / w[j]).sqrt().atan().to_degrees())
            .collect()
    }
}

/// The `n × m` standard normal block behind limit draw `draw`.
pub fn limit_normals(n: usize, m: usize, seed: u64, draw: u64) -> DMatrix<f64> {
    let mut rng = normal_stream(seed ^ LIMIT_SEED_SALT, draw);
    DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn hdlss_limit_sample(model: &SpikeModel, draws: usize, seed: u64) -> Result<HdlssLimitSample, LimitsError> {
    if draws == 0 {
        return Err(LimitsError::NoDraws);
    }
    for (k, tier) in model.tiers().iter().enumerate() {
        if !tier.ratio().is_finite_nonzero() {
            return Err(LimitsError::BoundaryTier {
                tier: k,
                ratio: tier.ratio(),
            });
        }
    }
    let n = model.n();
    let ratios: Vec<f64> = model
        .tiers()
        .iter()
        .flat_map(|t| std::iter::repeat_n(t.ratio().value(), t.multiplicity()))
        .collect();
    let scale: Vec<f64> = ratios.iter().map(|c| c.sqrt().recip()).collect();
    let m = ratios.len();

    let one = |draw: usize| -> Vec<f64> {
        let z = limit_normals(n, m, seed, draw as u64);
        let mut w = z.tr_mul(&z);
        for a in 0..m {
            for b in 0..m {
                w[(a, b)] *= scale[a] * scale[b];
            }
        }
        match symmetric_eigen_desc(w) {
            Ok((values, _)) => values.into_iter().map(|v| v.max(0.0)).collect(),
            // An m×m PSD matrix from Gaussian draws; the solver converges.
            Err(e) => unreachable!("eigensolver failed on a {}×{} Wishart draw", e.dim, e.dim),
        }
    };

    #[cfg(feature = "parallel")]
    let w_eigenvalues = {
        use rayon::prelude::*;
        (0..draws).into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let w_eigenvalues = (0..draws).map(one).collect();

    Ok(HdlssLimitSample {
        n,
        ratios,
        w_eigenvalues,
    })
}
