//! Reproducible sampling of the Gaussian measure `μ_s` and ensemble statistics.
//!
//! Sample `i` of an ensemble draws from a ChaCha8 stream seeded with the
//! master seed and positioned on stream `i`, so it is a pure function of
//! `(master_seed, i)` whatever order or thread produces it. Coefficients are
//! `c_n = (a_n + i b_n) / ⟨n⟩^s` with `a_n, b_n` independent standard normals,
//! drawn for `n = -N_ambient ..= N_ambient`, real part first.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{japanese_bracket, FourierState, ModelParams};
use crate::stats::pairwise_sum;

/// Identifies the random stream construction; bump when it changes.
pub const RNG_ID: &str = "chacha8-seed_from_u64+set_stream(index)/rand_chacha-0.9/rand_distr-0.5-StandardNormal";

/// Complex Gaussian normalization used throughout: `E|g_n|² = 2`.
pub const GAUSSIAN_CONVENTION: &str = "E|g_n|^2 = 2 (Re, Im unit variance); counterterm = sum |n|^2/<n>^(2s)";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub master_seed: u64,
    pub n_samples: usize,
    pub s: f64,
    #[serde(rename = "N_ambient")]
    pub n_ambient: usize,
}

impl EnsembleSpec {
    pub fn new(master_seed: u64, n_samples: usize, s: f64, n_ambient: usize) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::InvalidParams("n_samples must be at least 1".into()));
        }
        if !s.is_finite() {
            return Err(Error::InvalidParams("s must be finite".into()));
        }
        Ok(EnsembleSpec {
            master_seed,
            n_samples,
            s,
            n_ambient,
        })
    }

    pub fn stream(&self, index: usize) -> Result<ChaCha8Rng> {
        if index >= self.n_samples {
            return Err(Error::IndexOutOfRange {
                index,
                n_samples: self.n_samples,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(index as u64);
        Ok(rng)
    }

    pub fn manifest(&self) -> EnsembleManifest {
        EnsembleManifest {
            master_seed: self.master_seed,
            n_samples: self.n_samples,
            s: self.s,
            n_ambient: self.n_ambient,
            rng_id: RNG_ID.to_string(),
            code_version: crate::CODE_VERSION.to_string(),
            gaussian_convention: GAUSSIAN_CONVENTION.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub master_seed: u64,
    pub n_samples: usize,
    pub s: f64,
    #[serde(rename = "N_ambient")]
    pub n_ambient: usize,
    pub rng_id: String,
    pub code_version: String,
    pub gaussian_convention: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub s: f64,
}

impl CutoffSpec {
    pub fn new(r: f64, n: usize, s: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidParams(format!("cutoff radius must be positive, got {r}")));
        }
        Ok(CutoffSpec { r, n, s })
    }
}

/// The standard complex Gaussians `g_n`, `|n| ≤ N_ambient`, of sample `index`.
pub fn sample_gaussians(spec: &EnsembleSpec, index: usize) -> Result<Vec<Complex64>> {
    let mut rng = spec.stream(index)?;
    Ok((0..2 * spec.n_ambient + 1)
        .map(|_| {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            Complex64::new(re, im)
        })
        .collect())
}

/// Sample `index` of `μ_s` truncated to `|n| ≤ N_ambient`.
pub fn sample_mu_s(spec: &EnsembleSpec, index: usize) -> Result<FourierState> {
    let g = sample_gaussians(spec, index)?;
    let offset = spec.n_ambient as i64;
    let coeffs = g
        .into_iter()
        .enumerate()
        .map(|(i, z)| z / japanese_bracket(i as i64 - offset).powf(spec.s))
        .collect();
    FourierState::from_coeffs(spec.n_ambient, coeffs)
}

fn bump(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

/// Smooth cutoff: 1 on `[-1/2, 1/2]`, 0 outside `(-1, 1)`, `C^∞` in between.
pub fn smooth_cutoff(x: f64) -> f64 {
    let a = x.abs();
    if a <= 0.5 {
        1.0
    } else if a >= 1.0 {
        0.0
    } else {
        let up = bump(2.0 * (1.0 - a));
        let down = bump(2.0 * (a - 0.5));
        up / (up + down)
    }
}

/// `χ(𝓔_N(u) / R)`.
pub fn cutoff_weight(u: &FourierState, cut: &CutoffSpec, p: usize) -> Result<f64> {
    let params = ModelParams::new(p, cut.s, cut.n)?;
    let energy = crate::functionals::renormalized_energy(u, &params)?;
    Ok(smooth_cutoff(energy / cut.r))
}

/// Mean and standard error, optionally weighted (ratio estimator with delta-method error).
///
/// With a single effective sample the standard error is reported as zero.
pub fn ensemble_mean(values: &[f64], weights: Option<&[f64]>) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = values.len() as f64;
    match weights {
        None => {
            let mean = pairwise_sum(values) / n;
            if values.len() == 1 {
                return Ok((mean, 0.0));
            }
            let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
            let var = pairwise_sum(&dev) / (n - 1.0);
            Ok((mean, (var / n).sqrt()))
        }
        Some(w) => {
            if w.len() != values.len() {
                return Err(Error::LengthMismatch(values.len(), w.len()));
            }
            if let Some(i) = w.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(Error::BadWeight(i));
            }
            let total = pairwise_sum(w);
            if total == 0.0 {
                return Err(Error::ZeroWeights);
            }
            let wv: Vec<f64> = values.iter().zip(w).map(|(v, x)| v * x).collect();
            let mean = pairwise_sum(&wv) / total;
            if values.len() == 1 {
                return Ok((mean, 0.0));
            }
            let dev: Vec<f64> = values
                .iter()
                .zip(w)
                .map(|(v, x)| x * x * (v - mean) * (v - mean))
                .collect();
            let var = n / (n - 1.0) * pairwise_sum(&dev) / (total * total);
            Ok((mean, var.sqrt()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn determinism_and_order_independence() {
        let spec = EnsembleSpec::new(42, 100, 1.3, 6).unwrap();
        let a = sample_mu_s(&spec, 17).unwrap();
        let _ = sample_mu_s(&spec, 3).unwrap();
        let b = sample_mu_s(&spec, 17).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_mu_s(&spec, 18).unwrap());
        let reversed: Vec<_> = (0..100).rev().map(|i| sample_mu_s(&spec, i).unwrap()).collect();
        for (i, u) in reversed.iter().rev().enumerate() {
            assert_eq!(*u, sample_mu_s(&spec, i).unwrap());
        }
        assert!(matches!(
            sample_mu_s(&spec, 100),
            Err(Error::IndexOutOfRange { index: 100, .. })
        ));
    }

    #[test]
    fn per_mode_second_moments() {
        let n_samples = 100_000;
        let spec = EnsembleSpec::new(7, n_samples, 1.3, 4).unwrap();
        let mut sums = vec![0.0; 9];
        let mut total = Vec::with_capacity(n_samples);
        for i in 0..n_samples {
            let u = sample_mu_s(&spec, i).unwrap();
            let mut h = 0.0;
            for (n, c) in u.modes() {
                let w = japanese_bracket(n).powf(2.0 * spec.s) * c.norm_sqr();
                sums[(n + 4) as usize] += w;
                h += w;
            }
            total.push(h);
        }
        for s in sums {
            let mean = s / n_samples as f64;
            assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
        }
        let (mean, se) = ensemble_mean(&total, None).unwrap();
        assert!((mean - 18.0).abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn kolmogorov_smirnov_real_parts() {
        let n_samples = 100_000;
        let spec = EnsembleSpec::new(11, n_samples, 1.3, 4).unwrap();
        let mut columns = vec![Vec::with_capacity(n_samples); 9];
        for i in 0..n_samples {
            let g = sample_gaussians(&spec, i).unwrap();
            for (col, z) in columns.iter_mut().zip(g) {
                col.push(z.re);
            }
        }
        let normal = Normal::standard();
        // Asymptotic 1% critical value of the one-sample KS statistic.
        let critical = 1.628 / (n_samples as f64).sqrt();
        for mut col in columns {
            col.sort_by(|a, b| a.total_cmp(b));
            let n = col.len() as f64;
            let d = col
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let f = normal.cdf(x);
                    (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
                })
                .fold(0.0, f64::max);
            assert!(d < critical, "KS statistic {d} ≥ {critical}");
        }
    }

    #[test]
    fn cutoff_shape() {
        assert_eq!(smooth_cutoff(0.3), 1.0);
        assert_eq!(smooth_cutoff(-0.5), 1.0);
        assert_eq!(smooth_cutoff(1.2), 0.0);
        assert_eq!(smooth_cutoff(1.0), 0.0);
        let mid = smooth_cutoff(0.75);
        assert!(mid > 0.0 && mid < 1.0);
        assert!((mid - 0.5).abs() < 1e-15);
        for x in [0.55, 0.6, 0.7, 0.8, 0.95] {
            assert!((smooth_cutoff(x) - (1.0 - smooth_cutoff(1.5 - x))).abs() < 1e-14);
        }
        let mut prev = 1.0;
        for i in 0..=10_000 {
            let x = 1.5 * i as f64 / 10_000.0;
            let y = smooth_cutoff(x);
            assert!(y <= prev + 1e-15);
            assert!(prev - y < 0.01, "jump at {x}");
            assert_eq!(smooth_cutoff(-x), y);
            prev = y;
        }
    }

    #[test]
    fn mean_examples() {
        assert_eq!(ensemble_mean(&[1.0, 1.0, 1.0], None).unwrap(), (1.0, 0.0));
        let (m, se) = ensemble_mean(&[0.0, 2.0], None).unwrap();
        assert_eq!((m, se), (1.0, 1.0));
        assert_eq!(ensemble_mean(&[5.0, 9.0], Some(&[1.0, 0.0])).unwrap(), (5.0, 0.0));
        assert!(matches!(ensemble_mean(&[], None), Err(Error::EmptyInput)));
        assert!(matches!(ensemble_mean(&[1.0], Some(&[0.0])), Err(Error::ZeroWeights)));
        assert!(matches!(
            ensemble_mean(&[1.0, 2.0], Some(&[1.0])),
            Err(Error::LengthMismatch(2, 1))
        ));
        assert!(matches!(
            ensemble_mean(&[1.0, 2.0], Some(&[1.0, -1.0])),
            Err(Error::BadWeight(1))
        ));
        // Unit weights reproduce the unweighted estimator.
        let v = [0.3, 1.7, -2.0, 4.5];
        let (a, sa) = ensemble_mean(&v, None).unwrap();
        let (b, sb) = ensemble_mean(&v, Some(&[1.0; 4])).unwrap();
        assert!((a - b).abs() < 1e-15 && (sa - sb).abs() < 1e-15);
    }

    #[test]
    fn cutoff_weight_of_zero_field() {
        let zero = FourierState::zeros(3);
        let sigma = crate::functionals::counterterm(3, 1.3);
        let cut = CutoffSpec::new(2.0 * sigma + 1.0, 3, 1.3).unwrap();
        assert_eq!(cutoff_weight(&zero, &cut, 5).unwrap(), 1.0);
        let tight = CutoffSpec::new(0.5 * sigma, 3, 1.3).unwrap();
        assert_eq!(cutoff_weight(&zero, &tight, 5).unwrap(), 0.0);
        assert!(CutoffSpec::new(0.0, 3, 1.3).is_err());
    }

    #[test]
    fn manifest_fields() {
        let spec = EnsembleSpec::new(1, 10, 1.5, 8).unwrap();
        let json = serde_json::to_value(spec.manifest()).unwrap();
        for key in ["master_seed", "n_samples", "s", "N_ambient", "rng_id", "code_version"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
