//! One-step k-means initialization: nearest-mean clustering, count/mean
//! statistics, and a quantile-based variance estimator driven by the
//! chi-square CDF (implemented in-repo with an explicit accuracy contract).

use rayon::prelude::*;

use crate::model::{Dataset, GmmSpec};
use crate::vecmath::dist2;
use crate::{Error, Result};

/// A hard partition of samples among components. `clusters[i]` lists the
/// member sample indices in dataset order; `cluster_of` is the inverse map.
#[derive(Clone, Debug)]
pub struct ClusterAssignment {
    cluster_of: Vec<usize>,
    clusters: Vec<Vec<usize>>,
}

impl ClusterAssignment {
    pub fn cluster_of(&self) -> &[usize] {
        &self.cluster_of
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }
}

/// Assign every sample to its nearest mean (Euclidean); exact ties go to the
/// lowest component index, so the clusters are a disjoint partition.
pub fn assign_clusters(data: &Dataset, means: &[Vec<f64>]) -> Result<ClusterAssignment> {
    let k = means.len();
    if k == 0 {
        return Err(Error::Config("at least one mean required".into()));
    }
    for m in means {
        if m.len() != data.d() {
            return Err(Error::DimensionMismatch {
                context: "mean vs. data dimension",
                expected: data.d(),
                actual: m.len(),
            });
        }
    }
    let sample_buf: Vec<&[f64]> = data.iter_samples().collect();
    let cluster_of: Vec<usize> = sample_buf
        .par_iter()
        .map(|x| {
            let mut best = 0;
            let mut best_d2 = dist2(x, &means[0]);
            for (i, m) in means.iter().enumerate().skip(1) {
                let d2 = dist2(x, m);
                if d2 < best_d2 {
                    best = i;
                    best_d2 = d2;
                }
            }
            best
        })
        .collect();
    let mut clusters = vec![Vec::new(); k];
    for (j, &i) in cluster_of.iter().enumerate() {
        clusters[i].push(j);
    }
    Ok(ClusterAssignment { cluster_of, clusters })
}

// --- chi-square CDF -------------------------------------------------------

/// Lanczos approximation (g = 7, 9 terms) of log Gamma for x >= 0.5; relative
/// accuracy around 1e-14 in this range.
fn lgamma(x: f64) -> f64 {
    const LANCZOS_G: f64 = 7.0;
    const LANCZOS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    debug_assert!(x >= 0.5, "lgamma used outside its supported range");
    let z = x - 1.0;
    let mut a = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, y) by its power series; valid and
/// fast for y < a + 1.
fn gamma_p_series(a: f64, y: f64) -> f64 {
    let mut ap = a;
    let mut sum = 1.0 / a;
    let mut del = sum;
    for _ in 0..1_000_000 {
        ap += 1.0;
        del *= y / ap;
        sum += del;
        if del.abs() < sum.abs() * 1e-17 {
            break;
        }
    }
    sum * (-y + a * y.ln() - lgamma(a)).exp()
}

/// Regularized upper incomplete gamma Q(a, y) by the Lentz continued
/// fraction; valid and fast for y >= a + 1.
fn gamma_q_continued_fraction(a: f64, y: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let mut b = y + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..1_000_000u64 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-y + a * y.ln() - lgamma(a)).exp() * h
}

/// Chi-square CDF with `dof` degrees of freedom at `x`: the regularized lower
/// incomplete gamma P(dof/2, x/2), via the series for x < dof + 1 and the
/// continued fraction otherwise. Absolute accuracy 1e-10 over dof <= 10^4,
/// x <= 10^6.
pub fn chi_square_cdf(dof: usize, x: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Domain("chi-square needs dof >= 1".into()));
    }
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("chi-square CDF argument {x} must be >= 0")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let a = dof as f64 / 2.0;
    let y = x / 2.0;
    let p = if x < dof as f64 + 1.0 {
        gamma_p_series(a, y)
    } else {
        1.0 - gamma_q_continued_fraction(a, y)
    };
    Ok(p.clamp(0.0, 1.0))
}

/// The quantile rank used by the variance estimator: the chi-square CDF
/// evaluated at its mean, F(d, d).
pub fn alpha_quantile(d: usize) -> Result<f64> {
    chi_square_cdf(d, d as f64)
}

// --- quantile variance estimator -------------------------------------------

/// Estimate a spherical variance from cluster members in their stored order:
/// form the m-1 adjacent squared distances, sort them, take the value at
/// 1-indexed rank `clamp(ceil(alpha_d * m), 1, m-1)`, and divide by 2d.
/// Adjacent differences of same-cluster points are N(0, 2 sigma^2 I), so
/// their squared norm near the chi-square-mean quantile is about 2 d sigma^2.
pub fn estimate_variance_quantile(cluster_samples: &[&[f64]], d: usize) -> Result<f64> {
    let m = cluster_samples.len();
    if m < 2 {
        return Err(Error::ClusterTooSmall { component: 0, size: m });
    }
    let mut gaps: Vec<f64> = cluster_samples
        .windows(2)
        .map(|pair| dist2(pair[0], pair[1]))
        .collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).expect("squared distances are never NaN"));
    let alpha = alpha_quantile(d)?;
    let rank = ((alpha * m as f64).ceil() as usize).clamp(1, m - 1);
    Ok(gaps[rank - 1] / (2.0 * d as f64))
}

/// One step of k-means from the given means: cluster, then read off counts,
/// cluster means, and quantile variances. Every cluster must have at least
/// two members.
pub fn one_step_kmeans(data: &Dataset, init_means: &[Vec<f64>]) -> Result<GmmSpec> {
    let assignment = assign_clusters(data, init_means)?;
    let (n, d, k) = (data.n(), data.d(), init_means.len());
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut variances = Vec::with_capacity(k);
    for (i, members) in assignment.clusters().iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyCluster { component: i });
        }
        if members.len() < 2 {
            return Err(Error::ClusterTooSmall { component: i, size: members.len() });
        }
        weights.push(members.len() as f64 / n as f64);
        let mut mean = vec![0.0; d];
        for &j in members {
            for (acc, x) in mean.iter_mut().zip(data.sample(j)) {
                *acc += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= members.len() as f64;
        }
        means.push(mean);
        let member_samples: Vec<&[f64]> = members.iter().map(|&j| data.sample(j)).collect();
        let var = estimate_variance_quantile(&member_samples, d).map_err(|e| match e {
            Error::ClusterTooSmall { size, .. } => Error::ClusterTooSmall { component: i, size },
            other => other,
        })?;
        variances.push(var);
    }
    GmmSpec::new(d, weights, means, variances)
}
