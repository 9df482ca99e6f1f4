//! Mixture parameterizations, separation margins, component matching, and
//! the worst-component normalized error metric.
//!
//! Estimates are compared to ground truth *up to permutation*: an exact
//! minimum-cost assignment pairs estimated components with true components,
//! and all error terms are normalized by the true component's scale.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::min_cost_assignment;
use crate::vecmath::dist;
use crate::{Error, Result};

/// Absolute tolerance for the weights-sum-to-one invariant.
const WEIGHT_SUM_TOL: f64 = 1e-12;

/// A spherical Gaussian mixture: `k` components over `R^d`, component `i`
/// having mixing weight `weights[i]`, mean `means[i]`, and covariance
/// `variances[i] * I_d` (so `variances[i]` is sigma^2, not sigma).
#[derive(Clone, Debug, PartialEq)]
pub struct GmmSpec {
    d: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

impl GmmSpec {
    /// Build a mixture, validating all structural invariants: `k >= 1`,
    /// `d >= 1`, weights positive and summing to 1 within 1e-12, variances
    /// positive, every mean of length `d`.
    pub fn new(
        d: usize,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidSpec("dimension must be >= 1".into()));
        }
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidSpec("at least one component required".into()));
        }
        if means.len() != k || variances.len() != k {
            return Err(Error::InvalidSpec(format!(
                "component count mismatch: {} weights, {} means, {} variances",
                k,
                means.len(),
                variances.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidSpec(format!("weight {w} is not positive and finite")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidSpec(format!("weights sum to {sum}, expected 1")));
        }
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidSpec(format!("variance {v} is not positive and finite")));
        }
        for (i, m) in means.iter().enumerate() {
            if m.len() != d {
                return Err(Error::InvalidSpec(format!(
                    "mean {i} has {} coordinates, expected {d}",
                    m.len()
                )));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidSpec(format!("mean {i} has a non-finite coordinate")));
            }
        }
        Ok(Self { d, weights, means, variances })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn mean(&self, i: usize) -> &[f64] {
        &self.means[i]
    }

    /// Per-component variances sigma_i^2.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Standard deviation sigma_i = sqrt(variances[i]).
    pub fn sigma(&self, i: usize) -> f64 {
        self.variances[i].sqrt()
    }

    /// Serialize to the JSON document
    /// `{"d": int, "components": [{"weight", "mean", "variance"}, ...]}`.
    /// Floats are written with shortest round-trip precision.
    pub fn to_json(&self) -> String {
        let doc = SpecDoc {
            d: self.d,
            components: (0..self.k())
                .map(|i| ComponentDoc {
                    weight: self.weights[i],
                    mean: self.means[i].clone(),
                    variance: self.variances[i],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("spec serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SpecDoc = serde_json::from_str(text)?;
        let mut weights = Vec::with_capacity(doc.components.len());
        let mut means = Vec::with_capacity(doc.components.len());
        let mut variances = Vec::with_capacity(doc.components.len());
        for c in doc.components {
            weights.push(c.weight);
            means.push(c.mean);
            variances.push(c.variance);
        }
        Self::new(doc.d, weights, means, variances)
    }

    pub fn write_json_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn read_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::Parse(format!("{}: {e}", path.as_ref().display()))
        })?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct SpecDoc {
    d: usize,
    components: Vec<ComponentDoc>,
}

#[derive(Serialize, Deserialize)]
struct ComponentDoc {
    weight: f64,
    mean: Vec<f64>,
    variance: f64,
}

/// Sample vectors in `R^d`, optionally carrying ground-truth component
/// labels. Samples are stored row-major in a flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    d: usize,
    samples: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(d: usize, samples: Vec<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidSpec("dataset dimension must be >= 1".into()));
        }
        if samples.len() % d != 0 {
            return Err(Error::InvalidSpec(format!(
                "sample buffer length {} is not a multiple of d = {d}",
                samples.len()
            )));
        }
        let n = samples.len() / d;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::InvalidSpec(format!(
                    "{} labels for {n} samples",
                    l.len()
                )));
            }
        }
        Ok(Self { d, samples, labels })
    }

    pub fn n(&self) -> usize {
        self.samples.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn sample(&self, j: usize) -> &[f64] {
        &self.samples[j * self.d..(j + 1) * self.d]
    }

    pub fn iter_samples(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.samples.chunks_exact(self.d)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// A view of rows `[start, end)` as a new dataset (labels carried over).
    pub fn slice(&self, start: usize, end: usize) -> Result<Dataset> {
        if start > end || end > self.n() {
            return Err(Error::Config(format!(
                "slice [{start}, {end}) out of range for {} samples",
                self.n()
            )));
        }
        Dataset::new(
            self.d,
            self.samples[start * self.d..end * self.d].to_vec(),
            self.labels.as_ref().map(|l| l[start..end].to_vec()),
        )
    }

    /// Write CSV with header `x0,...,x{d-1}[,label]`; floats use shortest
    /// round-trip formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.d).map(|j| format!("x{j}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(self.d + 1);
        for (j, row) in self.iter_samples().enumerate() {
            record.clear();
            record.extend(row.iter().map(|x| x.to_string()));
            if let Some(l) = &self.labels {
                record.push(l[j].to_string());
            }
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse CSV produced by [`Dataset::write_csv`]; the column layout is
    /// recovered from the header row.
    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let mut d = 0;
        let mut has_label = false;
        for (idx, name) in header.iter().enumerate() {
            if name == "label" && idx == header.len() - 1 {
                has_label = true;
            } else if name == format!("x{idx}") {
                d = idx + 1;
            } else {
                return Err(Error::Parse(format!(
                    "unexpected CSV column {idx} named {name:?}; expected \"x{idx}\" or trailing \"label\""
                )));
            }
        }
        if d == 0 {
            return Err(Error::Parse("CSV has no x0..x{d-1} columns".into()));
        }
        let mut samples = Vec::new();
        let mut labels = if has_label { Some(Vec::new()) } else { None };
        for (row_idx, record) in r.records().enumerate() {
            let record = record?;
            let line = row_idx + 2; // header is line 1
            let expected = d + usize::from(has_label);
            if record.len() != expected {
                return Err(Error::Parse(format!(
                    "line {line}: {} fields, expected {expected}",
                    record.len()
                )));
            }
            for field in record.iter().take(d) {
                let x: f64 = field
                    .parse()
                    .map_err(|e| Error::Parse(format!("line {line}: bad float {field:?}: {e}")))?;
                samples.push(x);
            }
            if let Some(l) = &mut labels {
                let field = record.get(d).unwrap();
                let lab: usize = field
                    .parse()
                    .map_err(|e| Error::Parse(format!("line {line}: bad label {field:?}: {e}")))?;
                l.push(lab);
            }
        }
        Dataset::new(d, samples, labels)
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv_file(path: impl AsRef<Path>) -> Result<Dataset> {
        let file = std::fs::File::open(&path).map_err(|e| {
            Error::Parse(format!("{}: {e}", path.as_ref().display()))
        })?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Instance conditioning quantities derived from a mixture.
#[derive(Clone, Debug)]
pub struct DerivedStats {
    /// Minimum mixing weight.
    pub pi_min: f64,
    /// max_i pi_i / min_i pi_i.
    pub rho_pi: f64,
    /// max_i sigma_i / min_i sigma_i (ratio of standard deviations).
    pub rho_sigma: f64,
    /// Symmetric k x k matrix of pairwise mean distances, zero diagonal.
    pub pairwise_distances: Vec<Vec<f64>>,
}

/// Compute pi_min, rho_pi, rho_sigma, and all pairwise mean distances.
pub fn derived_stats(spec: &GmmSpec) -> DerivedStats {
    let k = spec.k();
    let w_min = spec.weights().iter().cloned().fold(f64::INFINITY, f64::min);
    let w_max = spec.weights().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s_min = (0..k).map(|i| spec.sigma(i)).fold(f64::INFINITY, f64::min);
    let s_max = (0..k).map(|i| spec.sigma(i)).fold(f64::NEG_INFINITY, f64::max);
    let mut pairwise = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let r = dist(spec.mean(i), spec.mean(j));
            pairwise[i][j] = r;
            pairwise[j][i] = r;
        }
    }
    DerivedStats {
        pi_min: w_min,
        rho_pi: w_max / w_min,
        rho_sigma: s_max / s_min,
        pairwise_distances: pairwise,
    }
}

/// Outcome of the pairwise separation test.
#[derive(Clone, Copy, Debug)]
pub struct SeparationCheck {
    pub holds: bool,
    /// Minimum over pairs of distance / (scale * sqrt(log k + log(rho_sigma * rho_pi))).
    pub margin: f64,
}

/// Check the separation condition: every pair of means must be at least
/// `c * (sigma_i v sigma_j) * sqrt(log k + log(rho_sigma * rho_pi))` apart.
/// Returns the worst-pair margin; `holds` iff `margin >= c`. A single
/// component is separated by convention (`margin = +inf`).
pub fn check_separation(spec: &GmmSpec, c: f64) -> SeparationCheck {
    let k = spec.k();
    if k == 1 {
        return SeparationCheck { holds: true, margin: f64::INFINITY };
    }
    let stats = derived_stats(spec);
    // k >= 2 makes log k > 0, so the scale term is strictly positive.
    let log_term = ((k as f64).ln() + (stats.rho_sigma * stats.rho_pi).ln()).sqrt();
    let mut margin = f64::INFINITY;
    for i in 0..k {
        for j in (i + 1)..k {
            let scale = spec.sigma(i).max(spec.sigma(j)) * log_term;
            margin = margin.min(stats.pairwise_distances[i][j] / scale);
        }
    }
    SeparationCheck { holds: margin >= c, margin }
}

/// A pairing of estimated components to true components plus the three
/// normalized error terms per true component.
#[derive(Clone, Debug, Serialize)]
pub struct MatchResult {
    /// `permutation[e] = t`: estimated component `e` is paired with true
    /// component `t`. Always a bijection on `[0, k)`.
    pub permutation: Vec<usize>,
    /// `||mu_hat - mu_t*|| / sigma_t*`, indexed by true component.
    pub per_component_mean_err: Vec<f64>,
    /// `|pi_hat - pi_t*| / pi_t*`, indexed by true component.
    pub per_component_weight_err: Vec<f64>,
    /// `sqrt(d) * |sigma_hat^2 - sigma_t*^2| / sigma_t*^2`, indexed by true component.
    pub per_component_var_err: Vec<f64>,
}

/// Pair estimated components with true components by exact minimum-cost
/// assignment on the cost `||mu_hat_e - mu_t*|| / sigma_t*`, then report the
/// per-component error terms under that pairing.
pub fn match_components(estimate: &GmmSpec, truth: &GmmSpec) -> Result<MatchResult> {
    if estimate.k() != truth.k() {
        return Err(Error::DimensionMismatch {
            context: "component counts of estimate and truth",
            expected: truth.k(),
            actual: estimate.k(),
        });
    }
    if estimate.d() != truth.d() {
        return Err(Error::DimensionMismatch {
            context: "dimensions of estimate and truth",
            expected: truth.d(),
            actual: estimate.d(),
        });
    }
    let k = truth.k();
    let cost: Vec<Vec<f64>> = (0..k)
        .map(|e| {
            (0..k)
                .map(|t| dist(estimate.mean(e), truth.mean(t)) / truth.sigma(t))
                .collect()
        })
        .collect();
    let permutation = min_cost_assignment(&cost);

    let sqrt_d = (truth.d() as f64).sqrt();
    let mut mean_err = vec![0.0; k];
    let mut weight_err = vec![0.0; k];
    let mut var_err = vec![0.0; k];
    for e in 0..k {
        let t = permutation[e];
        mean_err[t] = dist(estimate.mean(e), truth.mean(t)) / truth.sigma(t);
        weight_err[t] = (estimate.weights()[e] - truth.weights()[t]).abs() / truth.weights()[t];
        var_err[t] =
            sqrt_d * (estimate.variances()[e] - truth.variances()[t]).abs() / truth.variances()[t];
    }
    Ok(MatchResult {
        permutation,
        per_component_mean_err: mean_err,
        per_component_weight_err: weight_err,
        per_component_var_err: var_err,
    })
}

/// Worst-component normalized error: the max over components of the mean,
/// weight, and (sqrt(d)-scaled) variance error terms under the given match.
pub fn d_m(estimate: &GmmSpec, truth: &GmmSpec, matching: &MatchResult) -> Result<f64> {
    let k = truth.k();
    if estimate.k() != k || matching.permutation.len() != k {
        return Err(Error::DimensionMismatch {
            context: "match result component count",
            expected: k,
            actual: matching.permutation.len(),
        });
    }
    let mut worst: f64 = 0.0;
    for t in 0..k {
        worst = worst
            .max(matching.per_component_mean_err[t])
            .max(matching.per_component_weight_err[t])
            .max(matching.per_component_var_err[t]);
    }
    Ok(worst)
}

/// Match and evaluate in one call.
pub fn d_m_between(estimate: &GmmSpec, truth: &GmmSpec) -> Result<f64> {
    let matching = match_components(estimate, truth)?;
    d_m(estimate, truth, &matching)
}
