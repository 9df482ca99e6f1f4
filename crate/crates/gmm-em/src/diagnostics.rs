//! Measurable quantities from the convergence analysis: per-sample good-event
//! indicators and their failure-rate bound, fixed-point residuals of the EM
//! update, and contraction-rate estimation from fit traces.

use serde::Serialize;

use crate::em::{em_step, default_variance_floor, EmConfig, FitTrace};
use crate::model::{d_m_between, Dataset, GmmSpec};
use crate::synth::{sample_dataset, SeededRng};
use crate::vecmath::{dist2, dot, median, norm2, sub};
use crate::{Error, Result};

/// Exponent of the misclassification bound for a component pair:
/// `beta = ||mu_i - mu_j||^2 / (64 (sigma_i v sigma_j)^2)`.
pub fn beta(spec: &GmmSpec, i: usize, j: usize) -> Result<f64> {
    if i == j {
        return Err(Error::Domain(format!("beta needs two distinct components, got {i} twice")));
    }
    let k = spec.k();
    if i >= k || j >= k {
        return Err(Error::Config(format!("component index out of range: {i}, {j} vs k = {k}")));
    }
    let r2 = dist2(spec.mean(i), spec.mean(j));
    let s = spec.sigma(i).max(spec.sigma(j));
    Ok(r2 / (64.0 * s * s))
}

/// The three per-sample event indicators for a draw attributed to
/// `source_j`, measured against `target_i`.
#[derive(Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub struct GoodEventFlags {
    pub e1: bool,
    pub e2: bool,
    pub e3: bool,
}

impl GoodEventFlags {
    pub fn all_good(&self) -> bool {
        self.e1 && self.e2 && self.e3
    }
}

/// Evaluate the three good-event inequalities for sample `x` from component
/// `source_j` against `target_i`, literally as stated by the analysis:
///
/// - `v = x - mu*_src` and `R = ||mu*_src - mu*_tgt||` use TRUE means;
/// - E1: `<v, mu*_src - mu*_tgt> >= -R^2/5`;
/// - E2: `<v, mu*_tgt - mu_tgt> >= -R^2/64` and
///   `<v, mu*_src - mu_src> <= (sigma*_src/sigma*_tgt)^2 R^2/64`
///   (the deltas are truth minus estimate);
/// - E3: `d (1 - 2 sqrt(beta/d)) <= ||v||^2 / sigma*_src^2
///   <= d (1 + 2 sqrt(beta/d) + 2 beta/d)`.
pub fn good_event_flags(
    x: &[f64],
    source_j: usize,
    target_i: usize,
    estimate: &GmmSpec,
    truth: &GmmSpec,
) -> Result<GoodEventFlags> {
    if estimate.k() != truth.k() || estimate.d() != truth.d() {
        return Err(Error::DimensionMismatch {
            context: "estimate vs. truth shape",
            expected: truth.k(),
            actual: estimate.k(),
        });
    }
    if x.len() != truth.d() {
        return Err(Error::DimensionMismatch {
            context: "sample dimension",
            expected: truth.d(),
            actual: x.len(),
        });
    }
    let b = beta(truth, source_j, target_i)?;
    let d = truth.d() as f64;
    let v = sub(x, truth.mean(source_j));
    let r2 = dist2(truth.mean(source_j), truth.mean(target_i));

    let e1 = dot(&v, &sub(truth.mean(source_j), truth.mean(target_i))) >= -r2 / 5.0;

    let delta_tgt = sub(truth.mean(target_i), estimate.mean(target_i));
    let delta_src = sub(truth.mean(source_j), estimate.mean(source_j));
    let sigma_ratio2 = (truth.sigma(source_j) / truth.sigma(target_i)).powi(2);
    let e2 = dot(&v, &delta_tgt) >= -r2 / 64.0
        && dot(&v, &delta_src) <= sigma_ratio2 * r2 / 64.0;

    let normalized = norm2(&v) / truth.variances()[source_j];
    let spread = 2.0 * (b / d).sqrt();
    let e3 = normalized >= d * (1.0 - spread) && normalized <= d * (1.0 + spread + 2.0 * b / d);

    Ok(GoodEventFlags { e1, e2, e3 })
}

/// Empirical failure rate of the good events for one (source, target) pair,
/// next to the analytic bound `5 exp(-beta)`.
#[derive(Clone, Debug, Serialize)]
pub struct GoodEventReport {
    /// Component the samples were drawn from.
    pub source: usize,
    /// Component the events are measured against.
    pub target: usize,
    pub beta: f64,
    /// `5 exp(-beta)`.
    pub theoretical_bound: f64,
    /// Fraction of source-labeled samples with at least one event failing.
    pub empirical_bad_rate: f64,
    pub n_samples: usize,
    /// Per-sample indicators in dataset order.
    pub flags: Vec<GoodEventFlags>,
}

/// For every source component `j != target_i` with at least one labeled
/// sample, evaluate the good events on all of its samples and report the
/// empirical bad rate against `5 exp(-beta)`. Sources with no samples are
/// omitted.
pub fn bad_event_rate(
    data: &Dataset,
    estimate: &GmmSpec,
    truth: &GmmSpec,
    target_i: usize,
) -> Result<Vec<GoodEventReport>> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::Config("good-event rates need a labeled dataset".into()))?;
    let k = truth.k();
    if target_i >= k {
        return Err(Error::Config(format!("target {target_i} out of range for k = {k}")));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= k) {
        return Err(Error::Parse(format!("label {bad} out of range for k = {k}")));
    }
    let mut reports = Vec::new();
    for source in 0..k {
        if source == target_i {
            continue;
        }
        let sample_idx: Vec<usize> =
            (0..data.n()).filter(|j| labels[*j] == source).collect();
        if sample_idx.is_empty() {
            continue;
        }
        let flags = sample_idx
            .iter()
            .map(|&j| good_event_flags(data.sample(j), source, target_i, estimate, truth))
            .collect::<Result<Vec<_>>>()?;
        let bad = flags.iter().filter(|f| !f.all_good()).count();
        let b = beta(truth, source, target_i)?;
        reports.push(GoodEventReport {
            source,
            target: target_i,
            beta: b,
            theoretical_bound: 5.0 * (-b).exp(),
            empirical_bad_rate: bad as f64 / flags.len() as f64,
            n_samples: flags.len(),
            flags,
        });
    }
    Ok(reports)
}

/// Distribution of the one-step-from-truth error over seeds.
#[derive(Clone, Debug, Serialize)]
pub struct FixedPointSummary {
    /// One residual per seed, in the order the seeds were given.
    pub residuals: Vec<f64>,
    pub median: f64,
    pub max: f64,
}

/// For each seed: draw `n` fresh samples from `truth`, apply a single EM
/// update starting at truth, and measure the matched parameter error. The
/// truth being a fixed point of the idealized update, the residuals are pure
/// finite-sample noise.
pub fn fixed_point_residual(truth: &GmmSpec, n: usize, seeds: &[u64]) -> Result<FixedPointSummary> {
    if n < truth.k() * 100 {
        return Err(Error::Config(format!(
            "{n} samples is too few for a {}-component residual estimate",
            truth.k()
        )));
    }
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed required".into()));
    }
    // Seeds run one after another: each dataset can be large, and the row
    // loops inside the EM update are parallel already.
    let mut residuals = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let data = sample_dataset(truth, n, &mut SeededRng::new(seed, 0))?;
        let cfg = EmConfig::plain(1, f64::INFINITY, default_variance_floor(&data))?;
        let next = em_step(truth, &data, &cfg)?;
        residuals.push(d_m_between(&next, truth)?);
    }
    let max = residuals.iter().cloned().fold(0.0f64, f64::max);
    Ok(FixedPointSummary { median: median(&residuals), max, residuals })
}

/// Per-iteration contraction ratios extracted from a fit trace.
#[derive(Clone, Debug, Serialize)]
pub struct ContractionEstimate {
    /// `D_m(t+1) / D_m(t)` for every t whose error sits clearly above the
    /// plateau (more than 10x).
    pub ratios: Vec<f64>,
    /// Median of the last (up to) three errors: the noise floor the trace
    /// settled into.
    pub plateau: f64,
}

/// Estimate the contraction rate from a truth-referenced trace: the plateau
/// is the median of the final three errors, and ratios are reported only for
/// iterations still at least 10x above it (where contraction, not noise,
/// drives the step).
pub fn contraction_estimate(trace: &FitTrace) -> Result<ContractionEstimate> {
    let d_m = trace.d_m_series();
    if d_m.len() < 2 || d_m.len() != trace.steps.len() {
        return Err(Error::Config(
            "contraction estimation needs a trace with truth-referenced errors at every step"
                .into(),
        ));
    }
    let tail_start = d_m.len().saturating_sub(3);
    let plateau = median(&d_m[tail_start..]);
    let threshold = 10.0 * plateau;
    let ratios = (0..d_m.len() - 1)
        .filter(|&t| d_m[t] > threshold)
        .map(|t| d_m[t + 1] / d_m[t])
        .collect();
    Ok(ContractionEstimate { ratios, plateau })
}
