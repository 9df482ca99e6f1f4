//! The EM iteration for spherical Gaussian mixtures: log-domain
//! responsibilities, closed-form parameter updates, and plain /
//! sample-splitting fit loops with trace recording.
//!
//! Determinism contract: all data-parallel reductions run over fixed-size
//! row chunks whose partial results are combined in chunk order, so outputs
//! are bit-identical for any worker count.

use std::io::Write;

use rayon::prelude::*;

use crate::model::{d_m_between, Dataset, GmmSpec};
use crate::vecmath::dist2;
use crate::{Error, Result};

/// Rows per parallel work unit; fixed so reductions have a stable shape.
const ROW_CHUNK: usize = 4096;

/// Tolerance for the rows-sum-to-one invariant of responsibilities.
const ROW_SUM_TOL: f64 = 1e-10;

/// Posterior component probabilities for each sample (n x k, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    /// Validates shape, entry range, and that every row sums to 1 within 1e-10.
    pub fn new(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 || values.len() != n * k {
            return Err(Error::Config(format!(
                "responsibility buffer of {} entries does not match {n} x {k}",
                values.len()
            )));
        }
        for (j, row) in values.chunks_exact(k).enumerate() {
            if row.iter().any(|w| !(0.0..=1.0).contains(w)) {
                return Err(Error::Domain(format!("row {j} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Domain(format!("row {j} sums to {sum}, expected 1")));
            }
        }
        Ok(Self { n, k, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.k..(j + 1) * self.k]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Which dataset each iteration consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmMode {
    /// Every iteration uses the full dataset.
    Plain,
    /// Iteration t uses the t-th of `batches` disjoint contiguous batches.
    SampleSplit,
}

/// Fit-loop settings. In `SampleSplit` mode `batches` must equal `max_iters`
/// (one fresh batch per iteration).
#[derive(Clone, Copy, Debug)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the successive-estimate change falls to or below this.
    pub tol: f64,
    pub mode: EmMode,
    pub batches: usize,
    pub variance_floor: f64,
}

impl EmConfig {
    pub fn plain(max_iters: usize, tol: f64, variance_floor: f64) -> Result<Self> {
        Self { max_iters, tol, mode: EmMode::Plain, batches: 1, variance_floor }.validated()
    }

    pub fn sample_split(iters: usize, tol: f64, variance_floor: f64) -> Result<Self> {
        Self { max_iters: iters, tol, mode: EmMode::SampleSplit, batches: iters, variance_floor }
            .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("tol {} must be nonnegative", self.tol)));
        }
        if !(self.variance_floor > 0.0) || !self.variance_floor.is_finite() {
            return Err(Error::Config(format!(
                "variance floor {} must be positive and finite",
                self.variance_floor
            )));
        }
        if self.batches == 0 {
            return Err(Error::Config("batches must be >= 1".into()));
        }
        if self.mode == EmMode::SampleSplit && self.batches != self.max_iters {
            return Err(Error::Config(format!(
                "sample-split mode needs batches == max_iters, got {} != {}",
                self.batches, self.max_iters
            )));
        }
        Ok(self)
    }
}

/// `ceil(log2(1/tol)) + 5`, the iteration budget that a linear contraction
/// needs to reach `tol` with headroom; 5 when tol is not a finite sub-1 value.
pub fn default_max_iters(tol: f64) -> usize {
    if tol.is_finite() && tol > 0.0 && tol < 1.0 {
        (1.0 / tol).log2().ceil() as usize + 5
    } else {
        5
    }
}

/// `1e-12` times the dataset's mean squared norm: far below any meaningful
/// variance but positive, so collapse outside the guaranteed basin surfaces
/// as a floored variance instead of NaNs.
pub fn default_variance_floor(data: &Dataset) -> f64 {
    let n = data.n();
    if n == 0 {
        return f64::MIN_POSITIVE;
    }
    let second_moment =
        chunked_sum(n, |j| crate::vecmath::norm2(data.sample(j))) / (n * data.d()) as f64;
    if second_moment > 0.0 {
        1e-12 * second_moment
    } else {
        f64::MIN_POSITIVE
    }
}

/// One recorded iterate: the estimate, its distance to truth when truth is
/// known, and the average log-likelihood on the batch that produced it.
#[derive(Clone, Debug)]
pub struct FitStep {
    pub estimate: GmmSpec,
    pub d_m: Option<f64>,
    pub log_likelihood: f64,
}

/// Every iterate of a fit, starting with the initialization as entry 0.
#[derive(Clone, Debug)]
pub struct FitTrace {
    pub steps: Vec<FitStep>,
    /// True when the successive-change tolerance was reached before the
    /// iteration budget ran out.
    pub converged: bool,
}

impl FitTrace {
    pub fn final_estimate(&self) -> &GmmSpec {
        &self.steps.last().expect("trace always holds the initialization").estimate
    }

    pub fn d_m_series(&self) -> Vec<f64> {
        self.steps.iter().filter_map(|s| s.d_m).collect()
    }

    /// CSV with columns `iter,D_m,loglik,w0..,mu{i}_{c}..,var0..`; `D_m` is
    /// empty when truth was not supplied.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let spec0 = &self.steps[0].estimate;
        let (k, d) = (spec0.k(), spec0.d());
        let mut header = vec!["iter".to_string(), "D_m".to_string(), "loglik".to_string()];
        header.extend((0..k).map(|i| format!("w{i}")));
        for i in 0..k {
            header.extend((0..d).map(move |c| format!("mu{i}_{c}")));
        }
        header.extend((0..k).map(|i| format!("var{i}")));
        w.write_record(&header)?;
        for (t, step) in self.steps.iter().enumerate() {
            let mut rec = vec![
                t.to_string(),
                step.d_m.map(|v| v.to_string()).unwrap_or_default(),
                step.log_likelihood.to_string(),
            ];
            rec.extend(step.estimate.weights().iter().map(|v| v.to_string()));
            for i in 0..k {
                rec.extend(step.estimate.mean(i).iter().map(|v| v.to_string()));
            }
            rec.extend(step.estimate.variances().iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_dims(params: &GmmSpec, data: &Dataset) -> Result<()> {
    if params.d() != data.d() {
        return Err(Error::DimensionMismatch {
            context: "parameter and data dimensions",
            expected: params.d(),
            actual: data.d(),
        });
    }
    Ok(())
}

/// Per-component log of the unnormalized responsibility at `x`:
/// `log pi_i - ||x - mu_i||^2 / (2 sigma_i^2) - (d/2) log sigma_i^2`.
fn log_weights_into(params: &GmmSpec, x: &[f64], out: &mut [f64]) {
    let d = params.d() as f64;
    for i in 0..params.k() {
        let var = params.variances()[i];
        out[i] = params.weights()[i].ln() - dist2(x, params.mean(i)) / (2.0 * var)
            - 0.5 * d * var.ln();
    }
}

/// Normalize one log-weight row in place into probabilities. The exponentials
/// are summed in ascending value order, so the result is independent of
/// component ordering (bit-exact permutation equivariance).
fn normalize_log_row(row: &mut [f64], scratch: &mut Vec<f64>) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut() {
        *v = (*v - max).exp();
    }
    scratch.clear();
    scratch.extend_from_slice(row);
    scratch.sort_by(|a, b| a.partial_cmp(b).expect("exp values are never NaN"));
    let sum: f64 = scratch.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// E-step: posterior over components for every sample, computed in the log
/// domain with per-row max subtraction so any separation scale is safe.
pub fn e_step(params: &GmmSpec, data: &Dataset) -> Result<Responsibilities> {
    check_dims(params, data)?;
    let (n, k) = (data.n(), params.k());
    let mut values = vec![0.0f64; n * k];
    let sample_buf = data.iter_samples().collect::<Vec<_>>();
    values
        .par_chunks_mut(ROW_CHUNK * k)
        .zip(sample_buf.par_chunks(ROW_CHUNK))
        .for_each(|(out_chunk, rows)| {
            let mut scratch = Vec::with_capacity(k);
            for (out, x) in out_chunk.chunks_exact_mut(k).zip(rows) {
                log_weights_into(params, x, out);
                normalize_log_row(out, &mut scratch);
            }
        });
    Responsibilities::new(n, k, values)
}

/// Column sums and weighted coordinate sums for one row range.
struct MStepPartial {
    col_sums: Vec<f64>,
    weighted_sums: Vec<f64>, // k x d, row-major
}

/// M-step: `pi_i = colsum_i / total`, `mu_i = weighted mean`, and
/// `var_i = max(floor, sum_j w_ij ||x_j - mu_i||^2 / (d * colsum_i))` — the
/// variance update uses the freshly updated mean.
pub fn m_step(data: &Dataset, resp: &Responsibilities, variance_floor: f64) -> Result<GmmSpec> {
    let (n, k, d) = (data.n(), resp.k(), data.d());
    if resp.n() != n {
        return Err(Error::DimensionMismatch {
            context: "responsibility and data sample counts",
            expected: n,
            actual: resp.n(),
        });
    }
    if n == 0 {
        return Err(Error::Domain("cannot update parameters from an empty dataset".into()));
    }
    if !(variance_floor > 0.0) {
        return Err(Error::Config(format!("variance floor {variance_floor} must be positive")));
    }

    let sample_buf = data.iter_samples().collect::<Vec<_>>();
    let partials: Vec<MStepPartial> = sample_buf
        .par_chunks(ROW_CHUNK)
        .zip(resp.values().par_chunks(ROW_CHUNK * k))
        .map(|(rows, weights)| {
            let mut p = MStepPartial { col_sums: vec![0.0; k], weighted_sums: vec![0.0; k * d] };
            for (x, w_row) in rows.iter().zip(weights.chunks_exact(k)) {
                for i in 0..k {
                    let w = w_row[i];
                    p.col_sums[i] += w;
                    let dst = &mut p.weighted_sums[i * d..(i + 1) * d];
                    for (acc, xc) in dst.iter_mut().zip(*x) {
                        *acc += w * xc;
                    }
                }
            }
            p
        })
        .collect();

    let mut col_sums = vec![0.0; k];
    let mut weighted_sums = vec![0.0; k * d];
    for p in &partials {
        for i in 0..k {
            col_sums[i] += p.col_sums[i];
        }
        for (acc, v) in weighted_sums.iter_mut().zip(&p.weighted_sums) {
            *acc += v;
        }
    }
    if let Some(i) = col_sums.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::EmptyComponent { component: i });
    }

    // Row sums are 1 by the responsibility invariant, so `total` equals n up
    // to round-off; normalizing by it keeps the weights summing to one.
    let total: f64 = col_sums.iter().sum();
    let weights: Vec<f64> = col_sums.iter().map(|s| s / total).collect();
    let means: Vec<Vec<f64>> = (0..k)
        .map(|i| weighted_sums[i * d..(i + 1) * d].iter().map(|s| s / col_sums[i]).collect())
        .collect();

    let ssq_partials: Vec<Vec<f64>> = sample_buf
        .par_chunks(ROW_CHUNK)
        .zip(resp.values().par_chunks(ROW_CHUNK * k))
        .map(|(rows, w)| {
            let mut ssq = vec![0.0; k];
            for (x, w_row) in rows.iter().zip(w.chunks_exact(k)) {
                for i in 0..k {
                    ssq[i] += w_row[i] * dist2(x, &means[i]);
                }
            }
            ssq
        })
        .collect();
    let mut ssq = vec![0.0; k];
    for p in &ssq_partials {
        for i in 0..k {
            ssq[i] += p[i];
        }
    }
    let variances: Vec<f64> = (0..k)
        .map(|i| (ssq[i] / (d as f64 * col_sums[i])).max(variance_floor))
        .collect();

    GmmSpec::new(d, weights, means, variances)
}

/// One EM update: E-step then M-step with the configured variance floor.
pub fn em_step(params: &GmmSpec, data: &Dataset, cfg: &EmConfig) -> Result<GmmSpec> {
    let resp = e_step(params, data)?;
    m_step(data, &resp, cfg.variance_floor)
}

/// Average log-likelihood `(1/n) sum_j log sum_i pi_i phi(x_j; mu_i, var_i I)`
/// computed in the log domain.
pub fn log_likelihood(params: &GmmSpec, data: &Dataset) -> Result<f64> {
    check_dims(params, data)?;
    let n = data.n();
    if n == 0 {
        return Err(Error::Domain("log-likelihood of an empty dataset".into()));
    }
    let (k, d) = (params.k(), params.d() as f64);
    const LOG_2PI: f64 = 1.8378770664093453; // ln(2*pi)
    let sample_buf = data.iter_samples().collect::<Vec<_>>();
    let total = chunked_sum(n, |j| {
        let x = sample_buf[j];
        let mut row = vec![0.0f64; k];
        for i in 0..k {
            let var = params.variances()[i];
            row[i] = params.weights()[i].ln()
                - dist2(x, params.mean(i)) / (2.0 * var)
                - 0.5 * d * (LOG_2PI + var.ln());
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    });
    Ok(total / n as f64)
}

/// Sum `f(j)` over `j in 0..n` with fixed-chunk parallelism and in-order
/// combination of the partial sums (bit-stable for any worker count).
fn chunked_sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let chunk_starts: Vec<usize> = (0..n).step_by(ROW_CHUNK).collect();
    let partials: Vec<f64> = chunk_starts
        .par_iter()
        .map(|&start| {
            let end = (start + ROW_CHUNK).min(n);
            let mut acc = 0.0;
            for j in start..end {
                acc += f(j);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Worst relative parameter change between successive estimates, with the
/// previous estimate providing the scales (same max-of-three shape as the
/// truth-referenced error metric, but with identity component pairing).
pub fn successive_change(new: &GmmSpec, old: &GmmSpec) -> f64 {
    let sqrt_d = (old.d() as f64).sqrt();
    let mut worst: f64 = 0.0;
    for i in 0..old.k() {
        let mean_term = dist2(new.mean(i), old.mean(i)).sqrt() / old.sigma(i);
        let weight_term = (new.weights()[i] - old.weights()[i]).abs() / old.weights()[i];
        let var_term =
            sqrt_d * (new.variances()[i] - old.variances()[i]).abs() / old.variances()[i];
        worst = worst.max(mean_term).max(weight_term).max(var_term);
    }
    worst
}

/// Run EM from `init`. Plain mode reuses the full dataset each iteration;
/// sample-split mode gives iteration t the t-th of `batches` contiguous
/// batches of `floor(n / batches)` samples (any remainder is unused). The
/// trace records the initialization as entry 0 and every subsequent iterate;
/// iteration stops early once the successive-estimate change is at most
/// `cfg.tol`.
pub fn fit(
    init: &GmmSpec,
    data: &Dataset,
    cfg: &EmConfig,
    truth: Option<&GmmSpec>,
) -> Result<FitTrace> {
    let cfg = cfg.validated()?;
    check_dims(init, data)?;
    if let Some(t) = truth {
        if t.k() != init.k() || t.d() != init.d() {
            return Err(Error::DimensionMismatch {
                context: "truth shape vs. initialization",
                expected: init.k(),
                actual: t.k(),
            });
        }
    }
    let n = data.n();
    let batch_size = match cfg.mode {
        EmMode::Plain => n,
        EmMode::SampleSplit => {
            if n < cfg.batches {
                return Err(Error::Config(format!(
                    "{n} samples cannot fill {} batches",
                    cfg.batches
                )));
            }
            n / cfg.batches
        }
    };
    if batch_size == 0 {
        return Err(Error::Config("empty dataset".into()));
    }

    let batch_for = |t: usize| -> Result<Dataset> {
        match cfg.mode {
            EmMode::Plain => data.slice(0, n),
            EmMode::SampleSplit => data.slice(t * batch_size, (t + 1) * batch_size),
        }
    };

    let record = |estimate: &GmmSpec, batch: &Dataset| -> Result<FitStep> {
        let d_m = truth.map(|t| d_m_between(estimate, t)).transpose()?;
        Ok(FitStep {
            estimate: estimate.clone(),
            d_m,
            log_likelihood: log_likelihood(estimate, batch)?,
        })
    };

    let first_batch = batch_for(0)?;
    let mut steps = vec![record(init, &first_batch)?];
    let mut current = init.clone();
    let mut converged = false;
    for t in 0..cfg.max_iters {
        let batch = batch_for(t)?;
        let next = em_step(&current, &batch, &cfg)?;
        steps.push(record(&next, &batch)?);
        let change = successive_change(&next, &current);
        current = next;
        if change <= cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(FitTrace { steps, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{sample_dataset, SeededRng};

    fn spec1(weights: &[f64], means_1d: &[f64], variances: &[f64]) -> GmmSpec {
        GmmSpec::new(
            1,
            weights.to_vec(),
            means_1d.iter().map(|m| vec![*m]).collect(),
            variances.to_vec(),
        )
        .unwrap()
    }

    const FLOOR: f64 = 1e-12;

    #[test]
    fn e_step_single_component_is_all_ones() {
        let params = spec1(&[1.0], &[3.0], &[2.0]);
        let data = Dataset::new(1, vec![0.0, 1.0, 100.0], None).unwrap();
        let resp = e_step(&params, &data).unwrap();
        assert!(resp.values().iter().all(|w| *w == 1.0));
    }

    #[test]
    fn e_step_midpoint_splits_evenly() {
        let params = spec1(&[0.5, 0.5], &[0.0, 4.0], &[1.0, 1.0]);
        let data = Dataset::new(1, vec![2.0], None).unwrap();
        let resp = e_step(&params, &data).unwrap();
        assert_eq!(resp.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn e_step_matches_density_oracle() {
        // x=1 between means 0 and 4 with unit variances: w0 = 1/(1+e^-4).
        let params = spec1(&[0.5, 0.5], &[0.0, 4.0], &[1.0, 1.0]);
        let data = Dataset::new(1, vec![1.0], None).unwrap();
        let resp = e_step(&params, &data).unwrap();
        let expect = 0.98201379003790844;
        assert!((resp.row(0)[0] - expect).abs() < 1e-15, "got {}", resp.row(0)[0]);
    }

    #[test]
    fn e_step_variance_log_term_decides_at_shared_mean() {
        // Same means, variances 1 and 4, x at the mean: densities scale as
        // var^(-d/2), so the posterior is (1, 1/2)/1.5 = (2/3, 1/3).
        let params = spec1(&[0.5, 0.5], &[0.0, 0.0], &[1.0, 4.0]);
        let data = Dataset::new(1, vec![0.0], None).unwrap();
        let resp = e_step(&params, &data).unwrap();
        assert!((resp.row(0)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((resp.row(0)[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn e_step_survives_huge_separation() {
        let params = spec1(&[0.5, 0.5], &[0.0, 1000.0], &[1.0, 1.0]);
        let data = Dataset::new(1, vec![0.0, 1000.0], None).unwrap();
        let resp = e_step(&params, &data).unwrap();
        // No NaN/overflow; each sample decisively claimed by its component.
        assert!((resp.row(0)[0] - 1.0).abs() < 1e-300);
        assert!((resp.row(1)[1] - 1.0).abs() < 1e-300);
    }

    #[test]
    fn responsibilities_validation_rejects_bad_rows() {
        assert!(Responsibilities::new(1, 2, vec![0.6, 0.6]).is_err());
        assert!(Responsibilities::new(1, 2, vec![1.2, -0.2]).is_err());
        assert!(Responsibilities::new(2, 2, vec![0.5, 0.5]).is_err());
        assert!(Responsibilities::new(1, 2, vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn m_step_hand_computed_single_component() {
        let data = Dataset::new(1, vec![0.0, 2.0], None).unwrap();
        let resp = Responsibilities::new(2, 1, vec![1.0, 1.0]).unwrap();
        let out = m_step(&data, &resp, FLOOR).unwrap();
        assert_eq!(out.weights(), &[1.0]);
        assert_eq!(out.mean(0), &[1.0]);
        assert_eq!(out.variances(), &[1.0]);
    }

    #[test]
    fn m_step_zero_column_is_an_error() {
        let data = Dataset::new(1, vec![0.0, 2.0], None).unwrap();
        let resp = Responsibilities::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let err = m_step(&data, &resp, FLOOR).unwrap_err();
        match err {
            Error::EmptyComponent { component } => assert_eq!(component, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn m_step_applies_variance_floor() {
        let data = Dataset::new(1, vec![5.0, 5.0], None).unwrap();
        let resp = Responsibilities::new(2, 1, vec![1.0, 1.0]).unwrap();
        let out = m_step(&data, &resp, 1e-6).unwrap();
        assert_eq!(out.variances(), &[1e-6]);
    }

    #[test]
    fn single_component_em_is_the_gaussian_mle_exactly() {
        // With k=1 all responsibilities are exactly 1, so one EM step must
        // reproduce a direct MLE computed with the same summation order.
        let truth = GmmSpec::new(3, vec![1.0], vec![vec![1.0, -2.0, 0.5]], vec![2.0]).unwrap();
        let data = sample_dataset(&truth, 1000, &mut SeededRng::new(8, 0)).unwrap();
        let cfg = EmConfig::plain(1, f64::INFINITY, FLOOR).unwrap();
        let out = em_step(&truth, &data, &cfg).unwrap();

        let (n, d) = (data.n(), data.d());
        let mut mean = vec![0.0; d];
        for x in data.iter_samples() {
            for (m, xc) in mean.iter_mut().zip(x) {
                *m += 1.0 * xc;
            }
        }
        let total: f64 = (0..n).map(|_| 1.0).sum();
        for m in mean.iter_mut() {
            *m /= total;
        }
        let mut ssq = 0.0;
        for x in data.iter_samples() {
            ssq += 1.0 * dist2(x, &mean);
        }
        let var = ssq / (d as f64 * total);

        assert_eq!(out.weights(), &[1.0]);
        assert_eq!(out.mean(0), &mean[..]);
        assert_eq!(out.variances(), &[var]);

        // Idempotent thereafter: the MLE is a fixed point of the update.
        let again = em_step(&out, &data, &cfg).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn em_step_is_permutation_equivariant_bitwise() {
        let params = spec1(&[0.3, 0.7], &[0.0, 6.0], &[1.0, 2.5]);
        let swapped = spec1(&[0.7, 0.3], &[6.0, 0.0], &[2.5, 1.0]);
        let data = sample_dataset(&params, 500, &mut SeededRng::new(17, 0)).unwrap();
        let cfg = EmConfig::plain(1, f64::INFINITY, FLOOR).unwrap();
        let a = em_step(&params, &data, &cfg).unwrap();
        let b = em_step(&swapped, &data, &cfg).unwrap();
        assert_eq!(a.weights()[0], b.weights()[1]);
        assert_eq!(a.weights()[1], b.weights()[0]);
        assert_eq!(a.mean(0), b.mean(1));
        assert_eq!(a.mean(1), b.mean(0));
        assert_eq!(a.variances()[0], b.variances()[1]);
        assert_eq!(a.variances()[1], b.variances()[0]);
    }

    #[test]
    fn em_step_is_translation_equivariant() {
        let params = spec1(&[0.4, 0.6], &[0.0, 8.0], &[1.0, 1.5]);
        let data = sample_dataset(&params, 400, &mut SeededRng::new(19, 0)).unwrap();
        let shift = 13.25;
        let shifted_data = Dataset::new(
            1,
            data.iter_samples().map(|x| x[0] + shift).collect(),
            None,
        )
        .unwrap();
        let shifted_params = spec1(&[0.4, 0.6], &[shift, 8.0 + shift], &[1.0, 1.5]);
        let cfg = EmConfig::plain(1, f64::INFINITY, FLOOR).unwrap();
        let a = em_step(&params, &data, &cfg).unwrap();
        let b = em_step(&shifted_params, &shifted_data, &cfg).unwrap();
        for i in 0..2 {
            assert!((a.mean(i)[0] + shift - b.mean(i)[0]).abs() < 1e-9);
            assert!((a.weights()[i] - b.weights()[i]).abs() < 1e-9);
            assert!((a.variances()[i] - b.variances()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn log_likelihood_standard_normal_at_zero() {
        let params = spec1(&[1.0], &[0.0], &[1.0]);
        let data = Dataset::new(1, vec![0.0], None).unwrap();
        let ll = log_likelihood(&params, &data).unwrap();
        assert!((ll - (-0.9189385332046727)).abs() < 1e-15, "got {ll}");
    }

    #[test]
    fn log_likelihood_average_ignores_duplicates() {
        let params = spec1(&[0.5, 0.5], &[0.0, 3.0], &[1.0, 2.0]);
        let single = Dataset::new(1, vec![1.7], None).unwrap();
        let doubled = Dataset::new(1, vec![1.7, 1.7], None).unwrap();
        let a = log_likelihood(&params, &single).unwrap();
        let b = log_likelihood(&params, &doubled).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_shifts_under_joint_scaling() {
        let params = spec1(&[0.5, 0.5], &[0.0, 5.0], &[1.0, 2.0]);
        let data = sample_dataset(&params, 200, &mut SeededRng::new(23, 0)).unwrap();
        let c = 3.0;
        let scaled_params = spec1(&[0.5, 0.5], &[0.0, 5.0 * c], &[c * c, 2.0 * c * c]);
        let scaled_data =
            Dataset::new(1, data.iter_samples().map(|x| c * x[0]).collect(), None).unwrap();
        let a = log_likelihood(&params, &data).unwrap();
        let b = log_likelihood(&scaled_params, &scaled_data).unwrap();
        assert!((b - (a - c.ln())).abs() < 1e-12, "{b} vs {}", a - c.ln());
    }

    #[test]
    fn fit_with_infinite_tol_does_one_update() {
        let truth = spec1(&[0.5, 0.5], &[0.0, 80.0], &[1.0, 1.0]);
        let data = sample_dataset(&truth, 200, &mut SeededRng::new(3, 0)).unwrap();
        let cfg = EmConfig::plain(10, f64::INFINITY, FLOOR).unwrap();
        let trace = fit(&truth, &data, &cfg, Some(&truth)).unwrap();
        assert_eq!(trace.steps.len(), 2);
        assert!(trace.converged);
        assert!(trace.steps.iter().all(|s| s.d_m.is_some()));
    }

    #[test]
    fn fit_exhausts_iterations_when_tol_is_tiny() {
        // Overlapping components keep responsibilities strictly interior, so
        // successive iterates keep moving and a 1e-300 tolerance stays out
        // of reach within the budget.
        let truth = spec1(&[0.5, 0.5], &[0.0, 2.0], &[1.0, 1.0]);
        let data = sample_dataset(&truth, 200, &mut SeededRng::new(3, 1)).unwrap();
        let cfg = EmConfig::plain(3, 1e-300, FLOOR).unwrap();
        let trace = fit(&truth, &data, &cfg, None).unwrap();
        assert_eq!(trace.steps.len(), 4);
        assert!(!trace.converged);
    }

    #[test]
    fn fit_stops_at_an_exact_fixed_point() {
        // At 80-sigma separation every responsibility rounds to exactly 0 or
        // 1, so iteration 1 lands on the per-cluster MLE and iteration 2
        // reproduces it bitwise; even tol = 0 registers that as converged.
        let truth = spec1(&[0.5, 0.5], &[0.0, 80.0], &[1.0, 1.0]);
        let data = sample_dataset(&truth, 200, &mut SeededRng::new(3, 1)).unwrap();
        let cfg = EmConfig::plain(5, 0.0, FLOOR).unwrap();
        let trace = fit(&truth, &data, &cfg, None).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.steps.len(), 3);
    }

    #[test]
    fn sample_split_uses_contiguous_batches() {
        // 5 samples, 2 batches: rows 0-1 then 2-3; row 4 unused. Verify by
        // checking iteration 1's output against a direct em_step on rows 0-1.
        let init = spec1(&[1.0], &[0.0], &[1.0]);
        let data = Dataset::new(1, vec![0.0, 1.0, 10.0, 11.0, 99.0], None).unwrap();
        let cfg = EmConfig::sample_split(2, 1e-300, FLOOR).unwrap();
        let trace = fit(&init, &data, &cfg, None).unwrap();
        let first_batch = data.slice(0, 2).unwrap();
        let direct = em_step(&init, &first_batch, &cfg).unwrap();
        assert_eq!(trace.steps[1].estimate, direct);
        assert!(fit(&init, &data.slice(0, 1).unwrap(), &cfg, None).is_err());
    }

    #[test]
    fn config_validation_catches_contradictions() {
        assert!(EmConfig::plain(0, 1.0, FLOOR).is_err());
        assert!(EmConfig::plain(1, -1.0, FLOOR).is_err());
        assert!(EmConfig::plain(1, f64::NAN, FLOOR).is_err());
        assert!(EmConfig::plain(1, 1.0, 0.0).is_err());
        // tol = 0 is legal: stop only at an exact fixed point.
        assert!(EmConfig::plain(1, 0.0, FLOOR).is_ok());
        let bad = EmConfig {
            max_iters: 3,
            tol: 1.0,
            mode: EmMode::SampleSplit,
            batches: 2,
            variance_floor: FLOOR,
        };
        assert!(bad.validated().is_err());
    }

    #[test]
    fn default_iteration_budget_tracks_tolerance() {
        assert_eq!(default_max_iters(1e-3), 15);
        assert_eq!(default_max_iters(0.5), 6);
        assert_eq!(default_max_iters(f64::INFINITY), 5);
    }

    #[test]
    fn trace_csv_has_documented_schema() {
        let truth = spec1(&[0.5, 0.5], &[0.0, 80.0], &[1.0, 1.0]);
        let data = sample_dataset(&truth, 100, &mut SeededRng::new(31, 0)).unwrap();
        let cfg = EmConfig::plain(2, 1e-300, FLOOR).unwrap();
        let trace = fit(&truth, &data, &cfg, Some(&truth)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iter,D_m,loglik,w0,w1,mu0_0,mu1_0,var0,var1"
        );
        assert_eq!(lines.count(), trace.steps.len());
    }

    #[test]
    fn successive_change_matches_hand_example() {
        let old = spec1(&[0.5, 0.5], &[0.0, 10.0], &[1.0, 1.0]);
        let new = spec1(&[0.45, 0.55], &[0.3, 10.0], &[1.0, 1.0]);
        let c = successive_change(&new, &old);
        assert!((c - 0.3).abs() < 1e-15);
    }
}
