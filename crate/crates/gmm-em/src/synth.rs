//! Seeded synthetic instance and dataset generation: separated mixtures,
//! labeled samples, and perturbed initializations that stay inside the
//! convergence basin of the estimator.
//!
//! All randomness flows through [`SeededRng`], a counter-based generator with
//! a documented Gaussian transform, so every artifact is bit-reproducible
//! across runs and platforms.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Dataset, GmmSpec};
use crate::vecmath::{dist, norm2};
use crate::{Error, Result};

/// Deterministic random source: ChaCha8 keyed by `seed` with a separate
/// `stream_id`, so independent streams can run in parallel without overlap.
///
/// Scalar conventions (fixed for reproducibility):
/// - uniform in [0,1): top 53 bits of the next 64-bit word, scaled by 2^-53;
/// - normal: Box-Muller on (u1, u2) with u1 mapped to (0,1] as 1-u, radius
///   sqrt(-2 ln u1), angle 2*pi*u2; the sine branch is cached and returned by
///   the next call.
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { inner, spare_normal: None }
    }

    /// Uniform draw in [0, 1) with 53-bit resolution.
    pub fn next_uniform(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64) * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal draw (Box-Muller, cached second branch).
    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.next_uniform(); // in (0, 1], keeps ln finite
        let u2 = self.next_uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn next_normal_vec(&mut self, d: usize) -> Vec<f64> {
        (0..d).map(|_| self.next_normal()).collect()
    }

    /// Uniformly random direction on the unit sphere in R^d.
    pub fn next_unit_vector(&mut self, d: usize) -> Vec<f64> {
        loop {
            let v = self.next_normal_vec(d);
            let n = norm2(&v).sqrt();
            if n > 1e-12 {
                return v.iter().map(|x| x / n).collect();
            }
        }
    }

    /// Random sign in {-1.0, +1.0}.
    pub fn next_sign(&mut self) -> f64 {
        if self.next_uniform() < 0.5 {
            -1.0
        } else {
            1.0
        }
    }

    /// Categorical draw: index `i` with probability `weights[i]`.
    pub fn next_category(&mut self, weights: &[f64]) -> usize {
        let u = self.next_uniform();
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return i;
            }
        }
        weights.len() - 1
    }
}

/// Mixing-weight shapes for generated instances.
#[derive(Clone, Debug)]
pub enum WeightProfile {
    /// All weights 1/k.
    Uniform,
    /// Weight of component i proportional to r^i, then normalized.
    Geometric(f64),
    /// Given weights (length k, positive), normalized to sum to one.
    Explicit(Vec<f64>),
}

impl WeightProfile {
    pub fn weights(&self, k: usize) -> Result<Vec<f64>> {
        let raw: Vec<f64> = match self {
            WeightProfile::Uniform => vec![1.0; k],
            WeightProfile::Geometric(r) => {
                if !(*r > 0.0) || !r.is_finite() {
                    return Err(Error::Config(format!("geometric weight ratio {r} must be positive")));
                }
                (0..k).map(|i| r.powi(i as i32)).collect()
            }
            WeightProfile::Explicit(v) => {
                if v.len() != k {
                    return Err(Error::Config(format!(
                        "{} explicit weights for k = {k}",
                        v.len()
                    )));
                }
                if let Some(w) = v.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
                    return Err(Error::Config(format!("explicit weight {w} must be positive")));
                }
                v.clone()
            }
        };
        let total: f64 = raw.iter().sum();
        Ok(raw.iter().map(|w| w / total).collect())
    }
}

/// Per-component variance shapes for generated instances.
#[derive(Clone, Debug)]
pub enum VarianceProfile {
    /// All variances 1.
    Unit,
    /// Variance of component i equals r^i.
    Geometric(f64),
}

impl VarianceProfile {
    pub fn variances(&self, k: usize) -> Result<Vec<f64>> {
        match self {
            VarianceProfile::Unit => Ok(vec![1.0; k]),
            VarianceProfile::Geometric(r) => {
                if !(*r > 0.0) || !r.is_finite() {
                    return Err(Error::Config(format!(
                        "geometric variance ratio {r} must be positive"
                    )));
                }
                Ok((0..k).map(|i| r.powi(i as i32)).collect())
            }
        }
    }
}

/// Draw `n` labeled samples: for each sample choose component `i` with
/// probability `weights[i]`, then draw `mu_i + sigma_i * z` with `z` standard
/// normal. Labels are kept in the dataset for diagnostics.
pub fn sample_dataset(spec: &GmmSpec, n: usize, rng: &mut SeededRng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    let d = spec.d();
    let mut samples = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let i = rng.next_category(spec.weights());
        let sigma = spec.sigma(i);
        let mean = spec.mean(i);
        for c in 0..d {
            samples.push(mean[c] + sigma * rng.next_normal());
        }
        labels.push(i);
    }
    Dataset::new(d, samples, Some(labels))
}

/// The pairwise separation threshold is `64 * scale`; generated instances
/// target multiples of this constant.
pub const SEPARATION_C: f64 = 64.0;

/// Generate a mixture whose minimum pairwise separation margin is at least
/// `margin_multiple` times the threshold with C = 64: means are drawn as
/// standard normal vectors, then rescaled so the worst pair sits exactly at
/// the requested margin (plus a one-part-in-10^12 cushion for round-off).
pub fn make_separated_spec(
    k: usize,
    d: usize,
    margin_multiple: f64,
    weight_profile: &WeightProfile,
    variance_profile: &VarianceProfile,
    rng: &mut SeededRng,
) -> Result<GmmSpec> {
    if !(margin_multiple >= 1.0) {
        return Err(Error::Config(format!(
            "margin multiple {margin_multiple} must be >= 1"
        )));
    }
    let weights = weight_profile.weights(k)?;
    let variances = variance_profile.variances(k)?;
    let means: Vec<Vec<f64>> = (0..k).map(|_| rng.next_normal_vec(d)).collect();
    if k == 1 {
        return GmmSpec::new(d, weights, means, variances);
    }

    let raw = GmmSpec::new(d, weights.clone(), means.clone(), variances.clone())?;
    let raw_margin = crate::model::check_separation(&raw, SEPARATION_C).margin;
    if !(raw_margin > 0.0) || !raw_margin.is_finite() {
        return Err(Error::Domain(
            "degenerate mean draw: coincident points cannot be rescaled".into(),
        ));
    }
    let target = SEPARATION_C * margin_multiple;
    // Grow the cushion until the margin check passes despite rounding in the
    // rescale; one round is enough in practice.
    let mut cushion = 1.0 + 1e-12;
    for _ in 0..8 {
        let scale = target * cushion / raw_margin;
        let scaled: Vec<Vec<f64>> = means
            .iter()
            .map(|m| m.iter().map(|x| x * scale).collect())
            .collect();
        let spec = GmmSpec::new(d, weights.clone(), scaled, variances.clone())?;
        if crate::model::check_separation(&spec, target).holds {
            return Ok(spec);
        }
        cushion += 1e-9;
    }
    Err(Error::Domain("separation rescale failed to converge".into()))
}

/// Displace the means of a known instance so that each component satisfies
/// the basin conditions used by the local-convergence analysis:
///
/// - mean i moves by `mean_frac` times its basin radius
///   `(sigma_i/16) * min_{j != i} ||mu_i - mu_j|| / (sigma_i v sigma_j)`
///   in a uniformly random direction;
/// - weight i becomes `pi_i * (1 +/- weight_frac * 0.5)` with a random sign,
///   then all weights are renormalized (the sign vector is redrawn, up to 100
///   times, if renormalization pushes any weight outside the factor-2 band
///   `|pi - pi*| <= pi*/2`);
/// - variance i becomes `var_i * (1 +/- var_frac * 0.5/sqrt(d))` with a
///   random sign.
///
/// With all fractions zero the output equals the input exactly (weights skip
/// renormalization in that case).
pub fn perturb_params(
    truth: &GmmSpec,
    mean_frac: f64,
    weight_frac: f64,
    var_frac: f64,
    rng: &mut SeededRng,
) -> Result<GmmSpec> {
    for (name, f) in [("mean_frac", mean_frac), ("weight_frac", weight_frac), ("var_frac", var_frac)]
    {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("{name} = {f} outside [0, 1]")));
        }
    }
    let k = truth.k();
    let d = truth.d();

    // Means: radius from the basin formula; k = 1 has no neighbors, so the
    // mean stays put.
    let mut means = Vec::with_capacity(k);
    for i in 0..k {
        let mut radius = 0.0;
        if k > 1 {
            let mut ratio_min = f64::INFINITY;
            for j in 0..k {
                if j != i {
                    let r = dist(truth.mean(i), truth.mean(j))
                        / truth.sigma(i).max(truth.sigma(j));
                    ratio_min = ratio_min.min(r);
                }
            }
            radius = mean_frac * truth.sigma(i) / 16.0 * ratio_min;
        }
        let dir = rng.next_unit_vector(d);
        means.push(
            truth
                .mean(i)
                .iter()
                .zip(&dir)
                .map(|(m, u)| m + radius * u)
                .collect::<Vec<f64>>(),
        );
    }

    // Variances: independent random signs, magnitude scaled by 1/sqrt(d).
    let var_delta = var_frac * 0.5 / (d as f64).sqrt();
    let variances: Vec<f64> = (0..k)
        .map(|i| truth.variances()[i] * (1.0 + rng.next_sign() * var_delta))
        .collect();

    // Weights: perturb, renormalize, verify the factor-2 band survives
    // renormalization; redraw the sign vector otherwise.
    let weights = if weight_frac == 0.0 {
        truth.weights().to_vec()
    } else {
        let mut accepted = None;
        'attempt: for _ in 0..100 {
            let raw: Vec<f64> = truth
                .weights()
                .iter()
                .map(|w| w * (1.0 + rng.next_sign() * weight_frac * 0.5))
                .collect();
            let total: f64 = raw.iter().sum();
            let cand: Vec<f64> = raw.iter().map(|w| w / total).collect();
            for (w, w_true) in cand.iter().zip(truth.weights()) {
                if (w - w_true).abs() > w_true * 0.5 * (1.0 + 1e-12) {
                    continue 'attempt;
                }
            }
            accepted = Some(cand);
            break;
        }
        accepted.ok_or_else(|| {
            Error::Domain("no weight sign pattern kept the factor-2 band after renormalization".into())
        })?
    };

    GmmSpec::new(d, weights, means, variances)
}

/// Move every mean by exactly `distance` in an independent uniformly random
/// direction. Used to build mean initializers at a prescribed offset from
/// truth (weights and variances are not produced here).
pub fn displace_means(spec: &GmmSpec, distance: f64, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    (0..spec.k())
        .map(|i| {
            let dir = rng.next_unit_vector(spec.d());
            spec.mean(i)
                .iter()
                .zip(&dir)
                .map(|(m, u)| m + distance * u)
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{check_separation, derived_stats};

    fn unit_spec_1d(means: &[f64]) -> GmmSpec {
        let k = means.len();
        GmmSpec::new(
            1,
            vec![1.0 / k as f64; k],
            means.iter().map(|m| vec![*m]).collect(),
            vec![1.0; k],
        )
        .unwrap()
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let mut a = SeededRng::new(7, 0);
        let mut b = SeededRng::new(7, 0);
        let mut c = SeededRng::new(7, 1);
        let xs: Vec<f64> = (0..16).map(|_| a.next_normal()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.next_normal()).collect();
        let zs: Vec<f64> = (0..16).map(|_| c.next_normal()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn normal_draws_have_sane_moments() {
        let mut rng = SeededRng::new(11, 0);
        let n = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let z = rng.next_normal();
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn unit_vectors_have_unit_norm() {
        let mut rng = SeededRng::new(3, 0);
        for d in [1, 2, 7, 33] {
            let v = rng.next_unit_vector(d);
            assert_eq!(v.len(), d);
            assert!((norm2(&v).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_dataset_is_deterministic() {
        let spec = unit_spec_1d(&[0.0, 100.0]);
        let a = sample_dataset(&spec, 50, &mut SeededRng::new(9, 2)).unwrap();
        let b = sample_dataset(&spec, 50, &mut SeededRng::new(9, 2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n(), 50);
        assert!(a.labels().is_some());
    }

    #[test]
    fn sample_dataset_single_sample() {
        let spec = unit_spec_1d(&[0.0]);
        let ds = sample_dataset(&spec, 1, &mut SeededRng::new(1, 0)).unwrap();
        assert_eq!(ds.n(), 1);
        assert_eq!(ds.labels().unwrap().len(), 1);
        assert!(sample_dataset(&spec, 0, &mut SeededRng::new(1, 0)).is_err());
    }

    #[test]
    fn sample_dataset_law_of_large_numbers() {
        let spec = GmmSpec::new(2, vec![1.0], vec![vec![0.0, 0.0]], vec![1.0]).unwrap();
        let n = 1_000_000;
        let ds = sample_dataset(&spec, n, &mut SeededRng::new(5, 0)).unwrap();
        let tol = 4.0 / (n as f64).sqrt();
        for c in 0..2 {
            let mean: f64 = ds.iter_samples().map(|x| x[c]).sum::<f64>() / n as f64;
            assert!(mean.abs() < tol, "coordinate {c} mean {mean}");
        }
        let second: f64 =
            ds.iter_samples().map(norm2).sum::<f64>() / (n as f64 * 2.0);
        assert!((second - 1.0).abs() < 0.01, "second moment {second}");
    }

    #[test]
    fn label_frequencies_match_weights() {
        // Chi-square goodness of fit on label counts, significance 1e-6.
        let spec = GmmSpec::new(
            1,
            vec![0.5, 0.3, 0.2],
            vec![vec![0.0], vec![50.0], vec![-50.0]],
            vec![1.0; 3],
        )
        .unwrap();
        let n = 100_000;
        let ds = sample_dataset(&spec, n, &mut SeededRng::new(42, 0)).unwrap();
        let mut counts = [0usize; 3];
        for l in ds.labels().unwrap() {
            counts[*l] += 1;
        }
        let stat: f64 = counts
            .iter()
            .zip(spec.weights())
            .map(|(c, w)| {
                let expect = w * n as f64;
                (*c as f64 - expect).powi(2) / expect
            })
            .sum();
        let p_upper = 1.0 - crate::kmeans::chi_square_cdf(2, stat).unwrap();
        assert!(p_upper > 1e-6, "chi-square stat {stat} too extreme");
    }

    #[test]
    fn separated_spec_meets_requested_margin() {
        let mut rng = SeededRng::new(13, 0);
        let s2 = make_separated_spec(2, 2, 1.0, &WeightProfile::Uniform, &VarianceProfile::Unit, &mut rng)
            .unwrap();
        assert!(check_separation(&s2, 64.0).holds);

        let s5 = make_separated_spec(
            5,
            3,
            2.0,
            &WeightProfile::Geometric(0.5),
            &VarianceProfile::Geometric(2.0),
            &mut rng,
        )
        .unwrap();
        let check = check_separation(&s5, 128.0);
        assert!(check.holds, "margin {}", check.margin);
        // The rescale puts the worst pair essentially on the target margin.
        assert!(check.margin < 128.0 * (1.0 + 1e-6));
    }

    #[test]
    fn weight_profiles_produce_expected_shapes() {
        assert_eq!(WeightProfile::Uniform.weights(4).unwrap(), vec![0.25; 4]);
        let g = WeightProfile::Geometric(0.5).weights(3).unwrap();
        for (got, want) in g.iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
            assert!((got - want).abs() < 1e-15);
        }
        let e = WeightProfile::Explicit(vec![0.5, 0.3, 0.2]).weights(3).unwrap();
        assert!((e[0] - 0.5).abs() < 1e-15 && (e[1] - 0.3).abs() < 1e-15);
        assert!(WeightProfile::Explicit(vec![0.5]).weights(3).is_err());
        assert!(WeightProfile::Geometric(-1.0).weights(3).is_err());
        assert_eq!(VarianceProfile::Geometric(2.0).variances(3).unwrap(), vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn perturb_zero_fractions_is_identity() {
        let truth = unit_spec_1d(&[0.0, 40.0, -35.0]);
        let out = perturb_params(&truth, 0.0, 0.0, 0.0, &mut SeededRng::new(2, 0)).unwrap();
        assert_eq!(out, truth);
    }

    #[test]
    fn perturb_mean_radius_two_components() {
        // Equal unit sigmas at distance S: basin radius is exactly S/16.
        let s = 32.0;
        let truth = unit_spec_1d(&[0.0, s]);
        let out = perturb_params(&truth, 1.0, 0.0, 0.0, &mut SeededRng::new(4, 0)).unwrap();
        for i in 0..2 {
            let moved = dist(out.mean(i), truth.mean(i));
            assert!((moved - s / 16.0).abs() < 1e-13, "component {i} moved {moved}");
        }
    }

    #[test]
    fn perturb_variance_band_in_d4() {
        let truth = GmmSpec::new(4, vec![1.0], vec![vec![0.0; 4]], vec![1.0]).unwrap();
        for seed in 0..8 {
            let out = perturb_params(&truth, 0.0, 0.0, 1.0, &mut SeededRng::new(seed, 0)).unwrap();
            let v = out.variances()[0];
            assert!(
                (v - 0.75).abs() < 1e-15 || (v - 1.25).abs() < 1e-15,
                "variance {v} not at the 1 +/- 0.25 boundary"
            );
        }
    }

    #[test]
    fn perturb_respects_basin_for_full_fractions() {
        let mut rng = SeededRng::new(21, 0);
        let truth = make_separated_spec(
            4,
            6,
            1.0,
            &WeightProfile::Geometric(0.7),
            &VarianceProfile::Geometric(1.5),
            &mut rng,
        )
        .unwrap();
        let stats = derived_stats(&truth);
        for seed in 0..50 {
            let out = perturb_params(&truth, 1.0, 1.0, 1.0, &mut SeededRng::new(seed, 1)).unwrap();
            for i in 0..truth.k() {
                let mut ratio_min = f64::INFINITY;
                for j in 0..truth.k() {
                    if j != i {
                        let r = stats.pairwise_distances[i][j]
                            / truth.sigma(i).max(truth.sigma(j));
                        ratio_min = ratio_min.min(r);
                    }
                }
                let radius = truth.sigma(i) / 16.0 * ratio_min;
                let moved = dist(out.mean(i), truth.mean(i));
                assert!(moved <= radius * (1.0 + 1e-9), "mean {i}: {moved} > {radius}");

                let w_err = (out.weights()[i] - truth.weights()[i]).abs();
                assert!(w_err <= truth.weights()[i] * 0.5 * (1.0 + 1e-9), "weight {i}");

                let v_err = (out.variances()[i] - truth.variances()[i]).abs();
                let v_band = 0.5 * truth.variances()[i] / (truth.d() as f64).sqrt();
                assert!(v_err <= v_band * (1.0 + 1e-9), "variance {i}");
            }
        }
    }

    #[test]
    fn displace_means_moves_each_mean_exactly() {
        let truth = unit_spec_1d(&[0.0, 50.0, -60.0]);
        let moved = displace_means(&truth, 2.5, &mut SeededRng::new(6, 0));
        for i in 0..3 {
            let r = dist(&moved[i], truth.mean(i));
            assert!((r - 2.5).abs() < 1e-13, "mean {i} moved {r}");
        }
    }

    #[test]
    fn perturb_rejects_bad_fractions() {
        let truth = unit_spec_1d(&[0.0]);
        assert!(perturb_params(&truth, 1.5, 0.0, 0.0, &mut SeededRng::new(0, 0)).is_err());
        assert!(perturb_params(&truth, 0.0, -0.1, 0.0, &mut SeededRng::new(0, 0)).is_err());
    }
}
