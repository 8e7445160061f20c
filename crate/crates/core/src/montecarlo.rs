//! Seeded replication harness: simulate, measure, aggregate, verify.

use std::fmt;
use std::io::Write;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::eigen::{
    self, angle_report, grouping_sets, orthonormality_error, pairwise_angles, population_scores, score_ratios,
    EigenError, EigenResult, IdentityResiduals, SubspaceGrouping,
};
use crate::limits::{HdlssLimitSample, LimitPrediction};
use crate::model::{build_model, ModelConfig, ModelError, Ratio, SpikeModel};
use crate::sampling::{self, sample_data_owned, sample_z, SamplingError, DEFAULT_MEMORY_BUDGET};
use crate::stats;

pub const DEFAULT_REPS: usize = 100;
pub const DEFAULT_MONITORED_NOISE: usize = 3;
pub const KDE_GRID_POINTS: usize = 512;

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("at least one replication is required")]
    NoReplications,
    #[error("{failed} of {reps} replications failed (first: stream {stream_id}: {message})")]
    TooManyFailures {
        failed: usize,
        reps: usize,
        stream_id: u64,
        message: String,
    },
    #[error("n values must be non-empty and strictly ascending")]
    BadNValues,
    #[error("d_over_n must be positive, got {0}")]
    BadDOverN(f64),
    #[error("largest sweep point n = {n}, d = {d} needs about {needed} bytes, budget is {budget}")]
    MemoryBudget { n: usize, d: usize, needed: usize, budget: usize },
    #[error("summary and prediction disagree on index {index}: {reason}")]
    IndexMisalignment { index: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Eigen(#[from] EigenError),
    #[error(transparent)]
    Kde(#[from] KdeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One measured quantity of one sample index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `λ̂_j / λ_j`.
    EigenvalueRatio,
    /// `n λ̂_j / (d λ_j)`, noise indices only.
    NoiseScale,
    AngleVectorDeg,
    AngleSubspaceDeg,
    /// Median over observations of `|Ŝ_{i,j} / S_{i,j}|`, spike indices only.
    ScoreRatio,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::EigenvalueRatio => "eigenvalue_ratio",
            Metric::NoiseScale => "noise_scale",
            Metric::AngleVectorDeg => "angle_vector_deg",
            Metric::AngleSubspaceDeg => "angle_subspace_deg",
            Metric::ScoreRatio => "score_ratio",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Measurements of sample index `index` (0-based) in one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationRow {
    pub stream_id: u64,
    pub index: usize,
    /// 0-based tier; `tiers.len()` for noise indices.
    pub tier: usize,
    pub eigenvalue_ratio: f64,
    pub angle_vector_deg: f64,
    pub angle_subspace_deg: f64,
    pub noise_scale: Option<f64>,
    pub score_ratio: Option<f64>,
}

impl ReplicationRow {
    pub fn metric(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::EigenvalueRatio => Some(self.eigenvalue_ratio),
            Metric::NoiseScale => self.noise_scale,
            Metric::AngleVectorDeg => Some(self.angle_vector_deg),
            Metric::AngleSubspaceDeg => Some(self.angle_subspace_deg),
            Metric::ScoreRatio => self.score_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub index: usize,
    pub tier: usize,
    pub metric: Metric,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

/// Angles between the within-cone directions of replicated `û_j`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseStats {
    pub index: usize,
    pub pairs: usize,
    pub mean_deg: f64,
    pub std_deg: f64,
}

/// Cheap per-replication residuals: the trace identity and orthonormality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReplicationResiduals {
    pub stream_id: u64,
    pub trace_relative: f64,
    pub orthonormality: f64,
}

impl ReplicationResiduals {
    pub fn max(&self) -> f64 {
        self.trace_relative.max(self.orthonormality)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationFailure {
    pub stream_id: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloSummary {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub reps: usize,
    pub spike_count: usize,
    pub monitored_noise: usize,
    /// Sorted by `(stream_id, index)`.
    pub rows: Vec<ReplicationRow>,
    pub aggregates: Vec<Aggregate>,
    pub pairwise: Vec<PairwiseStats>,
    pub residuals: Vec<ReplicationResiduals>,
    pub failures: Vec<ReplicationFailure>,
}

impl MonteCarloSummary {
    pub fn aggregate(&self, index: usize, metric: Metric) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.index == index && a.metric == metric)
    }

    /// Values of `metric` for `index`, in stream order.
    pub fn values(&self, index: usize, metric: Metric) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.index == index)
            .filter_map(|r| r.metric(metric))
            .collect()
    }

    pub fn pairwise_stats(&self, index: usize) -> Option<&PairwiseStats> {
        self.pairwise.iter().find(|p| p.index == index)
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().map(ReplicationResiduals::max).fold(0.0, f64::max)
    }

    /// Sample indices present in the rows, ascending.
    pub fn indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.rows.iter().map(|r| r.index).collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub monitored_noise: usize,
    pub grouping: SubspaceGrouping,
    pub pairwise: bool,
    pub score_ratios: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            monitored_noise: DEFAULT_MONITORED_NOISE,
            grouping: SubspaceGrouping::Tiers,
            pairwise: true,
            score_ratios: false,
        }
    }
}

struct Replication {
    rows: Vec<ReplicationRow>,
    residuals: ReplicationResiduals,
    cone_directions: Vec<DVector<f64>>,
}

/// Runs `reps` seeded replications on streams `0..reps`.
///
/// Data are centered only when the model carries a mean. A replication that
/// fails is recorded; the run fails when more than 1% of replications do.
pub fn run_replications(
    model: &SpikeModel,
    reps: usize,
    seed: u64,
    options: &RunOptions,
) -> Result<MonteCarloSummary, MonteCarloError> {
    if reps == 0 {
        return Err(MonteCarloError::NoReplications);
    }
    let m = model.spike_count();
    let rank = model.n().min(model.d());
    let monitored_noise = options.monitored_noise.min(rank.saturating_sub(m));
    let indices: Vec<usize> = (0..m + monitored_noise).collect();
    let sets = grouping_sets(model, options.grouping);

    let one = |stream: usize| replicate(model, seed, stream as u64, &indices, &sets, options);

    #[cfg(feature = "parallel")]
    let outcomes: Vec<Result<Replication, MonteCarloError>> = {
        use rayon::prelude::*;
        (0..reps).into_par_iter().map(one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Result<Replication, MonteCarloError>> = (0..reps).map(one).collect();

    let mut rows = Vec::with_capacity(reps * indices.len());
    let mut residuals = Vec::with_capacity(reps);
    let mut failures = Vec::new();
    let mut cones: Vec<Vec<DVector<f64>>> = vec![Vec::new(); m];
    for (stream, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(rep) => {
                rows.extend(rep.rows);
                residuals.push(rep.residuals);
                for (j, v) in rep.cone_directions.into_iter().enumerate() {
                    cones[j].push(v);
                }
            }
            Err(e) => failures.push(ReplicationFailure {
                stream_id: stream as u64,
                message: e.to_string(),
            }),
        }
    }
    if failures.len() * 100 > reps || failures.len() == reps {
        let first = &failures[0];
        return Err(MonteCarloError::TooManyFailures {
            failed: failures.len(),
            reps,
            stream_id: first.stream_id,
            message: first.message.clone(),
        });
    }

    let pairwise = if options.pairwise {
        cones
            .iter()
            .enumerate()
            .filter(|(_, dirs)| dirs.len() >= 2)
            .map(|(j, dirs)| pairwise_stats(j, dirs))
            .collect()
    } else {
        Vec::new()
    };

    let aggregates = recompute_aggregates(&rows);
    Ok(MonteCarloSummary {
        n: model.n(),
        d: model.d(),
        seed,
        reps,
        spike_count: m,
        monitored_noise,
        rows,
        aggregates,
        pairwise,
        residuals,
        failures,
    })
}

fn replicate(
    model: &SpikeModel,
    seed: u64,
    stream_id: u64,
    indices: &[usize],
    sets: &[Range<usize>],
    options: &RunOptions,
) -> Result<Replication, MonteCarloError> {
    let (n, d) = (model.n(), model.d());
    let m = model.spike_count();
    let z = sample_z(n, d, seed, stream_id)?;
    let data = sample_data_owned(model, z)?;
    let data = if model.mean().is_some() {
        sampling::center(&data)?
    } else {
        data
    };
    let sample = eigen::sample_eigen_top(&data, false, Some(indices.len()))?;
    let available: Vec<usize> = indices.iter().copied().filter(|&j| j < sample.pair_count()).collect();
    let report = angle_report(model, &sample, &available, options.grouping);

    let scores = if options.score_ratios && m > 0 {
        let population = population_scores(model, &data)?;
        Some(score_ratios(&sample, &population)?)
    } else {
        None
    };

    let scale = n as f64 / d as f64;
    let mut rows = Vec::with_capacity(available.len());
    for (pos, &j) in available.iter().enumerate() {
        let ratio = sample.eigenvalues()[j] / model.eigenvalue(j);
        rows.push(ReplicationRow {
            stream_id,
            index: j,
            tier: model.tier_of(j),
            eigenvalue_ratio: ratio,
            angle_vector_deg: report.vector_angles[pos],
            angle_subspace_deg: report.subspace_angles[pos],
            noise_scale: (j >= m).then_some(ratio * scale),
            score_ratio: scores.as_ref().filter(|s| j < s.columns()).map(|s| s.median(j)),
        });
    }

    let trace_hat: f64 = sample.eigenvalues().iter().sum();
    let trace = data.observations().norm_squared() / n as f64;
    let residuals = ReplicationResiduals {
        stream_id,
        trace_relative: (trace_hat - trace).abs() / trace,
        orthonormality: orthonormality_error(sample.eigenvectors()).max(orthonormality_error(sample.scores())),
    };

    let cone_directions = if options.pairwise {
        (0..m.min(sample.pair_count()))
            .map(|j| cone_direction(model, &sample, j, sets))
            .collect()
    } else {
        Vec::new()
    };

    Ok(Replication {
        rows,
        residuals,
        cone_directions,
    })
}

/// Unit direction of `û_j` after removing its component in the population
/// subspace containing `j`: where on the cone the sample eigenvector landed.
fn cone_direction(model: &SpikeModel, sample: &EigenResult, j: usize, sets: &[Range<usize>]) -> DVector<f64> {
    let set = sets.iter().find(|s| s.contains(&j)).cloned().unwrap_or(j..j + 1);
    let mut v = sample.eigenvector(j).into_owned();
    match model.basis_matrix() {
        None => v.rows_range_mut(set.clone()).fill(0.0),
        Some(u) => {
            let span = u.columns(set.start, set.len());
            let coef = span.tr_mul(&v);
            v -= span * coef;
        }
    }
    let norm = v.norm();
    if norm > 0.0 {
        v /= norm;
    }
    v
}

fn pairwise_stats(index: usize, dirs: &[DVector<f64>]) -> PairwiseStats {
    let mat = DMatrix::from_columns(dirs);
    let angles = pairwise_angles(&mat);
    let mut values = Vec::with_capacity(dirs.len() * (dirs.len() - 1) / 2);
    for b in 0..dirs.len() {
        for a in 0..b {
            values.push(angles[(a, b)]);
        }
    }
    let values = stats::sorted(&values);
    PairwiseStats {
        index,
        pairs: values.len(),
        mean_deg: stats::mean(&values),
        std_deg: stats::std_dev(&values),
    }
}

/// Per-index statistics of every metric present in `rows`.
///
/// Values are sorted before summation, so the result does not depend on the
/// order in which replications finished.
pub fn recompute_aggregates(rows: &[ReplicationRow]) -> Vec<Aggregate> {
    let mut keys: Vec<(usize, usize)> = rows.iter().map(|r| (r.index, r.tier)).collect();
    keys.sort_unstable();
    keys.dedup();
    let metrics = [
        Metric::EigenvalueRatio,
        Metric::NoiseScale,
        Metric::AngleVectorDeg,
        Metric::AngleSubspaceDeg,
        Metric::ScoreRatio,
    ];
    let mut out = Vec::new();
    for (index, tier) in keys {
        for metric in metrics {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.index == index)
                .filter_map(|r| r.metric(metric))
                .collect();
            if values.is_empty() {
                continue;
            }
            let sorted = stats::sorted(&values);
            out.push(Aggregate {
                index,
                tier,
                metric,
                count: sorted.len(),
                mean: stats::mean(&sorted),
                median: stats::quantile_sorted(&sorted, 0.5),
                std: stats::std_dev(&sorted),
            });
        }
    }
    out
}

/// Mean absolute deviation from the limit angle at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub d: usize,
    pub index: usize,
    pub tier: usize,
    pub lambda: f64,
    pub predicted_deg: f64,
    pub mean_angle_deg: f64,
    pub mean_abs_deviation_deg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    pub summaries: Vec<MonteCarloSummary>,
}

impl ConvergenceTable {
    /// Deviations for spike `index`, in sweep order.
    pub fn deviations(&self, index: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.index == index)
            .map(|r| r.mean_abs_deviation_deg)
            .collect()
    }
}

/// Peak bytes one replication at `(n, d)` holds: the data buffer plus the
/// retained vectors and Gram or covariance matrix.
pub fn replication_bytes(n: usize, d: usize, vectors: usize) -> usize {
    let side = n.min(d);
    8 * (n * d + 2 * side * side + (n + d) * vectors)
}

/// Runs the template at each `n` with `d = round(d_over_n · n)`. Finite
/// ratios are held fixed, so `λ = d_over_n / c` does not change with `n`.
pub fn sweep(
    template: &ModelConfig,
    n_values: &[usize],
    d_over_n: f64,
    reps: usize,
    seed: u64,
    options: &RunOptions,
) -> Result<ConvergenceTable, MonteCarloError> {
    sweep_with_budget(template, n_values, d_over_n, reps, seed, options, DEFAULT_MEMORY_BUDGET)
}

pub fn sweep_with_budget(
    template: &ModelConfig,
    n_values: &[usize],
    d_over_n: f64,
    reps: usize,
    seed: u64,
    options: &RunOptions,
    budget: usize,
) -> Result<ConvergenceTable, MonteCarloError> {
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MonteCarloError::BadNValues);
    }
    if !(d_over_n > 0.0 && d_over_n.is_finite()) {
        return Err(MonteCarloError::BadDOverN(d_over_n));
    }
    let d_of = |n: usize| (d_over_n * n as f64).round() as usize;
    let largest = *n_values.last().expect("non-empty");
    let spikes: usize = template.tiers.iter().map(|t| t.multiplicity).sum();
    let needed = replication_bytes(largest, d_of(largest), spikes + options.monitored_noise) * workers();
    if needed > budget {
        return Err(MonteCarloError::MemoryBudget {
            n: largest,
            d: d_of(largest),
            needed,
            budget,
        });
    }

    let mut table = ConvergenceTable {
        rows: Vec::new(),
        summaries: Vec::new(),
    };
    for &n in n_values {
        let mut config = template.clone();
        config.n = n;
        config.d = d_of(n);
        let model = build_model(&config)?;
        let summary = run_replications(&model, reps, seed, options)?;
        let mut index = 0;
        for (k, tier) in model.tiers().iter().enumerate() {
            let metric = if tier.multiplicity() > 1 {
                Metric::AngleSubspaceDeg
            } else {
                Metric::AngleVectorDeg
            };
            let predicted = crate::limits::angle_limit_deg(tier.ratio());
            for _ in 0..tier.multiplicity() {
                let angles = stats::sorted(&summary.values(index, metric));
                let deviations: Vec<f64> = stats::sorted(&angles.iter().map(|a| (a - predicted).abs()).collect::<Vec<_>>());
                table.rows.push(ConvergenceRow {
                    n,
                    d: config.d,
                    index,
                    tier: k,
                    lambda: tier.eigenvalue(),
                    predicted_deg: predicted,
                    mean_angle_deg: stats::mean(&angles),
                    mean_abs_deviation_deg: stats::mean(&deviations),
                });
                index += 1;
            }
        }
        table.summaries.push(summary);
    }
    Ok(table)
}

fn workers() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads().max(1)
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KdeError {
    #[error("kde needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample {0} is not finite")]
    NonFinite(usize),
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityCurve {
    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Linear interpolation of the density at `x`; 0 outside the grid.
    pub fn at(&self, x: f64) -> f64 {
        let (first, last) = (self.grid[0], self.grid[self.grid.len() - 1]);
        if !(first..=last).contains(&x) {
            return 0.0;
        }
        let pos = self.grid.partition_point(|&g| g < x).max(1);
        let (x0, x1) = (self.grid[pos - 1], self.grid[pos]);
        let t = if x1 > x0 { (x - x0) / (x1 - x0) } else { 0.0 };
        self.density[pos - 1] * (1.0 - t) + self.density[pos] * t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Density {
    Curve(DensityCurve),
    /// All samples equal `at`; no curve is drawn.
    PointMass { at: f64 },
}

/// `0.9 · min(σ̂, IQR / 1.34) · N^{-1/5}`, falling back to whichever spread
/// is nonzero.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let sorted = stats::sorted(samples);
    let sigma = stats::std_dev(&sorted);
    let iqr = (stats::quantile_sorted(&sorted, 0.75) - stats::quantile_sorted(&sorted, 0.25)) / 1.34;
    let spread = if iqr > 0.0 { sigma.min(iqr) } else { sigma };
    0.9 * spread * (samples.len() as f64).powf(-0.2)
}

/// Gaussian kernel density estimate on 512 points over `[min − 3h, max + 3h]`.
pub fn kde(samples: &[f64], bandwidth: Option<f64>) -> Result<Density, KdeError> {
    if samples.len() < 2 {
        return Err(KdeError::TooFewSamples(samples.len()));
    }
    if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
        return Err(KdeError::NonFinite(i));
    }
    if let Some(h) = bandwidth {
        if !(h > 0.0 && h.is_finite()) {
            return Err(KdeError::BadBandwidth(h));
        }
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Ok(Density::PointMass { at: lo });
    }
    let h = bandwidth.unwrap_or_else(|| silverman_bandwidth(samples));
    let (start, end) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (end - start) / (KDE_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| start + step * i as f64).collect();
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density = grid
        .iter()
        .map(|&x| {
            samples
                .iter()
                .map(|&s| {
                    let u = (x - s) / h;
                    (-0.5 * u * u).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect();
    Ok(Density::Curve(DensityCurve {
        grid,
        density,
        bandwidth: h,
    }))
}

/// Acceptance thresholds used by [`verify`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Tolerances {
    /// Absolute, degrees.
    pub angle_deg: f64,
    /// Relative.
    pub eigenvalue_ratio: f64,
    /// Relative, on `n λ̂ / (d λ)` for noise indices.
    pub noise_scale: f64,
    pub pairwise_low_deg: f64,
    pub pairwise_high_deg: f64,
    /// Upper bound on the mean angle of `c = 0` tiers.
    pub consistent_max_deg: f64,
    /// Lower bound on the mean angle of `c = ∞` tiers.
    pub inconsistent_min_deg: f64,
    /// Relative, on the mean score ratio.
    pub score_ratio: f64,
    pub hdlss_mean: f64,
    pub hdlss_variance: f64,
    pub hdlss_angle_deg: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            angle_deg: 2.0,
            eigenvalue_ratio: 0.05,
            noise_scale: 0.05,
            pairwise_low_deg: 88.0,
            pairwise_high_deg: 92.0,
            consistent_max_deg: 10.0,
            inconsistent_min_deg: 84.0,
            score_ratio: 0.02,
            hdlss_mean: 0.02,
            hdlss_variance: 0.15,
            hdlss_angle_deg: 2.0,
        }
    }
}

/// How an observed value is judged against its reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Check {
    Absolute { tol: f64 },
    Relative { tol: f64 },
    Range { low: f64, high: f64 },
    AtMost { bound: f64 },
    AtLeast { bound: f64 },
}

impl Check {
    pub fn passes(self, predicted: f64, observed: f64) -> bool {
        match self {
            Check::Absolute { tol } => (observed - predicted).abs() <= tol,
            Check::Relative { tol } => (observed - predicted).abs() <= tol * predicted.abs(),
            Check::Range { low, high } => (low..=high).contains(&observed),
            Check::AtMost { bound } => observed <= bound,
            Check::AtLeast { bound } => observed >= bound,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Check::Absolute { tol } => write!(f, "+-{tol}"),
            Check::Relative { tol } => write!(f, "+-{}%", tol * 100.0),
            Check::Range { low, high } => write!(f, "[{low},{high}]"),
            Check::AtMost { bound } => write!(f, "<={bound}"),
            Check::AtLeast { bound } => write!(f, ">={bound}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Criterion {
    pub name: String,
    /// 0-based; serialized 1-based like the name.
    #[serde(serialize_with = "one_based")]
    pub index: Option<usize>,
    pub metric: Option<Metric>,
    pub predicted: f64,
    pub observed: f64,
    pub tolerance: Check,
    pub pass: bool,
}

fn one_based<S: serde::Serializer>(index: &Option<usize>, s: S) -> Result<S::Ok, S::Error> {
    index.map(|i| i + 1).serialize(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationReport {
    pub criteria: Vec<Criterion>,
    pub pass: bool,
}

impl VerificationReport {
    fn new(criteria: Vec<Criterion>) -> Self {
        let pass = criteria.iter().all(|c| c.pass);
        Self { criteria, pass }
    }

    pub fn find(&self, index: usize, metric: Metric) -> Option<&Criterion> {
        self.criteria
            .iter()
            .find(|c| c.index == Some(index) && c.metric == Some(metric))
    }
}

/// What a summary is verified against.
#[derive(Debug, Clone, Copy)]
pub enum Reference<'a> {
    Limits(&'a LimitPrediction),
    Hdlss(&'a HdlssLimitSample),
}

pub fn verify(
    summary: &MonteCarloSummary,
    reference: Reference<'_>,
    tolerances: &Tolerances,
) -> Result<VerificationReport, MonteCarloError> {
    match reference {
        Reference::Limits(p) => verify_limits(summary, p, tolerances),
        Reference::Hdlss(s) => verify_hdlss(summary, s, tolerances),
    }
}

fn criterion(name: String, index: usize, metric: Option<Metric>, predicted: f64, observed: f64, check: Check) -> Criterion {
    Criterion {
        name,
        index: Some(index),
        metric,
        predicted,
        observed,
        tolerance: check,
        pass: check.passes(predicted, observed),
    }
}

fn mean_of(summary: &MonteCarloSummary, index: usize, metric: Metric) -> Result<f64, MonteCarloError> {
    summary
        .aggregate(index, metric)
        .map(|a| a.mean)
        .ok_or_else(|| MonteCarloError::IndexMisalignment {
            index,
            reason: format!("no {metric} measurements"),
        })
}

fn verify_limits(
    summary: &MonteCarloSummary,
    prediction: &LimitPrediction,
    tol: &Tolerances,
) -> Result<VerificationReport, MonteCarloError> {
    if prediction.spikes.len() != summary.spike_count {
        return Err(MonteCarloError::IndexMisalignment {
            index: prediction.spikes.len().min(summary.spike_count),
            reason: format!(
                "prediction has {} spikes, summary has {}",
                prediction.spikes.len(),
                summary.spike_count
            ),
        });
    }
    let mut out = Vec::new();
    for limit in &prediction.spikes {
        let j = limit.index;
        let label = j + 1;
        let metric = if limit.against_subspace {
            Metric::AngleSubspaceDeg
        } else {
            Metric::AngleVectorDeg
        };
        let check = match limit.c {
            Ratio::Zero => Check::AtMost {
                bound: tol.consistent_max_deg,
            },
            Ratio::Infinity => Check::AtLeast {
                bound: tol.inconsistent_min_deg,
            },
            Ratio::Finite(_) => Check::Absolute { tol: tol.angle_deg },
        };
        let observed = mean_of(summary, j, metric)?;
        out.push(criterion(format!("{metric} {label}"), j, Some(metric), limit.angle_limit_deg, observed, check));

        if limit.ratio_limit.is_finite() {
            let observed = mean_of(summary, j, Metric::EigenvalueRatio)?;
            out.push(criterion(
                format!("eigenvalue_ratio {label}"),
                j,
                Some(Metric::EigenvalueRatio),
                limit.ratio_limit,
                observed,
                Check::Relative {
                    tol: tol.eigenvalue_ratio,
                },
            ));
        }

        if limit.c.is_finite_nonzero() {
            if let Some(p) = summary.pairwise_stats(j) {
                out.push(criterion(
                    format!("pairwise_angle {label}"),
                    j,
                    None,
                    90.0,
                    p.mean_deg,
                    Check::Range {
                        low: tol.pairwise_low_deg,
                        high: tol.pairwise_high_deg,
                    },
                ));
            }
        }

        if let Some(a) = summary.aggregate(j, Metric::ScoreRatio) {
            out.push(criterion(
                format!("score_ratio {label}"),
                j,
                Some(Metric::ScoreRatio),
                1.0,
                a.mean,
                Check::Relative { tol: tol.score_ratio },
            ));
        }
    }
    if let Some(noise) = prediction.noise {
        for j in summary.spike_count..summary.spike_count + summary.monitored_noise {
            let observed = mean_of(summary, j, Metric::NoiseScale)?;
            out.push(criterion(
                format!("noise_scale {}", j + 1),
                j,
                Some(Metric::NoiseScale),
                noise.eigenvalue_scale,
                observed,
                Check::Relative { tol: tol.noise_scale },
            ));
        }
    }
    Ok(VerificationReport::new(out))
}

fn verify_hdlss(
    summary: &MonteCarloSummary,
    limit: &HdlssLimitSample,
    tol: &Tolerances,
) -> Result<VerificationReport, MonteCarloError> {
    if limit.spike_count() != summary.spike_count || limit.n() != summary.n {
        return Err(MonteCarloError::IndexMisalignment {
            index: 0,
            reason: format!(
                "limit sample has m = {}, n = {}; summary has m = {}, n = {}",
                limit.spike_count(),
                limit.n(),
                summary.spike_count,
                summary.n
            ),
        });
    }
    let mut out = Vec::new();
    for j in 0..summary.spike_count {
        let label = j + 1;
        let observed = stats::sorted(&summary.values(j, Metric::EigenvalueRatio));
        let draws = stats::sorted(&limit.eigenvalue_ratio_draws(j));
        out.push(criterion(
            format!("eigenvalue_ratio_mean {label}"),
            j,
            Some(Metric::EigenvalueRatio),
            stats::mean(&draws),
            stats::mean(&observed),
            Check::Relative { tol: tol.hdlss_mean },
        ));
        out.push(criterion(
            format!("eigenvalue_ratio_variance {label}"),
            j,
            None,
            stats::variance(&draws),
            stats::variance(&observed),
            Check::Relative {
                tol: tol.hdlss_variance,
            },
        ));
        let angles = stats::sorted(&summary.values(j, Metric::AngleVectorDeg));
        let angle_draws = stats::sorted(&limit.angle_draws_deg(j));
        out.push(criterion(
            format!("angle_vector_deg_mean {label}"),
            j,
            Some(Metric::AngleVectorDeg),
            stats::mean(&angle_draws),
            stats::mean(&angles),
            Check::Absolute {
                tol: tol.hdlss_angle_deg,
            },
        ));
    }
    Ok(VerificationReport::new(out))
}

/// One replication on stream 0 with every non-null pair retained.
pub fn identity_check(model: &SpikeModel, seed: u64) -> Result<IdentityResiduals, MonteCarloError> {
    let z = sample_z(model.n(), model.d(), seed, 0)?;
    let data = sampling::sample_data(model, &z)?;
    let sample = eigen::sample_eigen(&data, false)?;
    Ok(eigen::identity_residuals(model, &z, &data, &sample)?)
}

fn float(x: f64) -> String {
    format!("{x}")
}

fn tier_label(tier: usize, spike_tiers: usize) -> String {
    if tier >= spike_tiers {
        "noise".to_string()
    } else {
        (tier + 1).to_string()
    }
}

/// `stream_id,index,tier,eigenvalue_ratio,angle_vector_deg,angle_subspace_deg`
/// with 1-based index and tier.
pub fn write_replications_csv<W: Write>(
    summary: &MonteCarloSummary,
    spike_tiers: usize,
    out: W,
) -> Result<(), MonteCarloError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "stream_id",
        "index",
        "tier",
        "eigenvalue_ratio",
        "angle_vector_deg",
        "angle_subspace_deg",
    ])?;
    for r in &summary.rows {
        w.write_record([
            r.stream_id.to_string(),
            (r.index + 1).to_string(),
            tier_label(r.tier, spike_tiers),
            float(r.eigenvalue_ratio),
            float(r.angle_vector_deg),
            float(r.angle_subspace_deg),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `index,tier,metric,mean,median,std,predicted,tolerance,pass`; the last
/// three columns are empty for metrics without a criterion.
pub fn write_aggregates_csv<W: Write>(
    summary: &MonteCarloSummary,
    report: Option<&VerificationReport>,
    spike_tiers: usize,
    out: W,
) -> Result<(), MonteCarloError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "index",
        "tier",
        "metric",
        "mean",
        "median",
        "std",
        "predicted",
        "tolerance",
        "pass",
    ])?;
    for a in &summary.aggregates {
        let crit = report.and_then(|r| r.find(a.index, a.metric));
        w.write_record([
            (a.index + 1).to_string(),
            tier_label(a.tier, spike_tiers),
            a.metric.to_string(),
            float(a.mean),
            float(a.median),
            float(a.std),
            crit.map(|c| float(c.predicted)).unwrap_or_default(),
            crit.map(|c| c.tolerance.to_string()).unwrap_or_default(),
            crit.map(|c| c.pass.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `index,grid_deg,density`; point masses are written as a single row with
/// an infinite density.
pub fn write_kde_csv<W: Write>(curves: &[(usize, Density)], out: W) -> Result<(), MonteCarloError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "grid_deg", "density"])?;
    for (index, density) in curves {
        match density {
            Density::Curve(c) => {
                for (x, y) in c.grid.iter().zip(&c.density) {
                    w.write_record([(index + 1).to_string(), float(*x), float(*y)])?;
                }
            }
            Density::PointMass { at } => {
                w.write_record([(index + 1).to_string(), float(*at), "inf".to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `index,mean_pairwise_deg,std_pairwise_deg`.
pub fn write_pairwise_csv<W: Write>(summary: &MonteCarloSummary, out: W) -> Result<(), MonteCarloError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "mean_pairwise_deg", "std_pairwise_deg"])?;
    for p in &summary.pairwise {
        w.write_record([(p.index + 1).to_string(), float(p.mean_deg), float(p.std_deg)])?;
    }
    w.flush()?;
    Ok(())
}

/// `n,d,index,tier,lambda,predicted_deg,mean_angle_deg,mean_abs_deviation_deg`.
pub fn write_convergence_csv<W: Write>(table: &ConvergenceTable, out: W) -> Result<(), MonteCarloError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n",
        "d",
        "index",
        "tier",
        "lambda",
        "predicted_deg",
        "mean_angle_deg",
        "mean_abs_deviation_deg",
    ])?;
    for r in &table.rows {
        w.write_record([
            r.n.to_string(),
            r.d.to_string(),
            (r.index + 1).to_string(),
            (r.tier + 1).to_string(),
            float(r.lambda),
            float(r.predicted_deg),
            float(r.mean_angle_deg),
            float(r.mean_abs_deviation_deg),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Column `column` of the rows of a replications CSV whose `index` equals
/// `index` (1-based, as written).
pub fn read_replication_column<R: std::io::Read>(input: R, column: &str, index: usize) -> Result<Vec<f64>, ReadColumnError> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let col = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| ReadColumnError::MissingColumn(column.to_string()))?;
    let idx = headers
        .iter()
        .position(|h| h == "index")
        .ok_or_else(|| ReadColumnError::MissingColumn("index".to_string()))?;
    let mut values = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let parse_err = |field: &str| ReadColumnError::Parse {
            line: line + 2,
            field: field.to_string(),
        };
        let row_index: usize = record[idx].parse().map_err(|_| parse_err("index"))?;
        if row_index == index {
            values.push(record[col].parse().map_err(|_| parse_err(column))?);
        }
    }
    Ok(values)
}

#[derive(Debug, Error)]
pub enum ReadColumnError {
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("line {line}: cannot parse `{field}`")]
    Parse { line: usize, field: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
