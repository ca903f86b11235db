//! Fourier-side representation of complex fields on the circle `R / 2πZ`.
//!
//! Conventions: integrals are taken against the normalized measure `dx / 2π`
//! and `û(n) = (1/2π) ∫ u e^{-inx} dx`, so Parseval reads `Σ |û(n)|²` and
//! products of fields are plain coefficient convolutions.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::de::{Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeSeq, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_MAGIC: [u8; 4] = *b"NLSS";
pub const STATE_FORMAT_VERSION: u32 = 1;

/// `⟨n⟩ = (1 + n²)^{1/2}`.
#[inline]
pub fn japanese_bracket(n: i64) -> f64 {
    (1.0 + (n as f64) * (n as f64)).sqrt()
}

/// Fourier coefficients `c_n` for `|n| ≤ n_ambient`; everything above is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierState {
    n_ambient: usize,
    coeffs: Vec<Complex64>,
}

impl FourierState {
    pub fn zeros(n_ambient: usize) -> Self {
        FourierState {
            n_ambient,
            coeffs: vec![Complex64::new(0.0, 0.0); 2 * n_ambient + 1],
        }
    }

    /// Builds a state from coefficients ordered `n = -n_ambient ..= n_ambient`.
    pub fn from_coeffs(n_ambient: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != 2 * n_ambient + 1 {
            return Err(Error::Format(format!(
                "expected {} coefficients for N_ambient = {}, got {}",
                2 * n_ambient + 1,
                n_ambient,
                coeffs.len()
            )));
        }
        let state = FourierState { n_ambient, coeffs };
        state.check_finite()?;
        Ok(state)
    }

    /// Builds a state from sparse `(n, c_n)` pairs; later duplicates overwrite earlier ones.
    pub fn from_modes(n_ambient: usize, modes: &[(i64, Complex64)]) -> Result<Self> {
        let mut state = FourierState::zeros(n_ambient);
        for &(n, c) in modes {
            if n.unsigned_abs() as usize > n_ambient {
                return Err(Error::Format(format!(
                    "mode {n} outside ambient cutoff {n_ambient}"
                )));
            }
            state.set(n, c);
        }
        state.check_finite()?;
        Ok(state)
    }

    fn check_finite(&self) -> Result<()> {
        for (n, c) in self.modes() {
            if !(c.re.is_finite() && c.im.is_finite()) {
                return Err(Error::NonFinite(n));
            }
        }
        Ok(())
    }

    pub fn n_ambient(&self) -> usize {
        self.n_ambient
    }

    /// Coefficients ordered `n = -n_ambient ..= n_ambient`.
    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    pub fn get(&self, n: i64) -> Complex64 {
        if n.unsigned_abs() as usize > self.n_ambient {
            Complex64::new(0.0, 0.0)
        } else {
            self.coeffs[(n + self.n_ambient as i64) as usize]
        }
    }

    /// Panics if `|n| > n_ambient`.
    pub fn set(&mut self, n: i64, c: Complex64) {
        assert!(
            n.unsigned_abs() as usize <= self.n_ambient,
            "mode {n} outside ambient cutoff {}",
            self.n_ambient
        );
        let offset = self.n_ambient as i64;
        self.coeffs[(n + offset) as usize] = c;
    }

    pub fn modes(&self) -> impl Iterator<Item = (i64, Complex64)> + '_ {
        let offset = self.n_ambient as i64;
        self.coeffs
            .iter()
            .enumerate()
            .map(move |(i, &c)| (i as i64 - offset, c))
    }

    /// Coefficients `c_{-n}..=c_{n}` as a centered vector (zero-filled past the ambient cutoff).
    pub fn low_modes(&self, n: usize) -> Vec<Complex64> {
        (-(n as i64)..=n as i64).map(|k| self.get(k)).collect()
    }

    /// Same field, re-embedded with a different ambient cutoff (truncating if smaller).
    pub fn with_ambient(&self, n_ambient: usize) -> FourierState {
        let mut out = FourierState::zeros(n_ambient);
        let m = n_ambient.min(self.n_ambient) as i64;
        for n in -m..=m {
            out.set(n, self.get(n));
        }
        out
    }

    pub fn scale(&self, factor: Complex64) -> FourierState {
        FourierState {
            n_ambient: self.n_ambient,
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    /// Coefficients of the conjugate field `x ↦ conj(u(x))`, i.e. `c_n ↦ conj(c_{-n})`.
    pub fn conj_field(&self) -> FourierState {
        FourierState {
            n_ambient: self.n_ambient,
            coeffs: self.coeffs.iter().rev().map(|c| c.conj()).collect(),
        }
    }

    pub fn sub(&self, other: &FourierState) -> Result<FourierState> {
        if self.n_ambient != other.n_ambient {
            return Err(Error::AmbientMismatch(self.n_ambient, other.n_ambient));
        }
        Ok(FourierState {
            n_ambient: self.n_ambient,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn add(&self, other: &FourierState) -> Result<FourierState> {
        if self.n_ambient != other.n_ambient {
            return Err(Error::AmbientMismatch(self.n_ambient, other.n_ambient));
        }
        Ok(FourierState {
            n_ambient: self.n_ambient,
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Largest `|n|` with a nonzero coefficient (0 for the zero field).
    pub fn bandwidth(&self) -> usize {
        self.modes()
            .filter(|(_, c)| c.norm_sqr() > 0.0)
            .map(|(n, _)| n.unsigned_abs() as usize)
            .max()
            .unwrap_or(0)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&STATE_MAGIC)?;
        w.write_all(&STATE_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_ambient as u64).to_le_bytes())?;
        for c in &self.coeffs {
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<FourierState> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if header[..4] != STATE_MAGIC {
            return Err(Error::Format("bad state magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
        if version != STATE_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported state version {version}")));
        }
        let n_ambient = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let mut coeffs = Vec::with_capacity(2 * n_ambient + 1);
        let mut buf = [0u8; 16];
        for _ in 0..2 * n_ambient + 1 {
            r.read_exact(&mut buf)?;
            coeffs.push(Complex64::new(
                f64::from_le_bytes(buf[..8].try_into().unwrap()),
                f64::from_le_bytes(buf[8..].try_into().unwrap()),
            ));
        }
        FourierState::from_coeffs(n_ambient, coeffs)
    }
}

impl Serialize for FourierState {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.coeffs.len()))?;
        for (n, c) in self.modes() {
            seq.serialize_element(&(n, c.re, c.im))?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for FourierState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct TripleVisitor;
        impl<'de> Visitor<'de> for TripleVisitor {
            type Value = FourierState;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an array of [n, re, im] triples")
            }
            fn visit_seq<A: SeqAccess<'de>>(
                self,
                mut seq: A,
            ) -> std::result::Result<FourierState, A::Error> {
                let mut modes = Vec::new();
                while let Some((n, re, im)) = seq.next_element::<(i64, f64, f64)>()? {
                    modes.push((n, Complex64::new(re, im)));
                }
                let n_ambient = modes
                    .iter()
                    .map(|(n, _)| n.unsigned_abs() as usize)
                    .max()
                    .unwrap_or(0);
                FourierState::from_modes(n_ambient, &modes).map_err(serde::de::Error::custom)
            }
        }
        deserializer.deserialize_seq(TripleVisitor)
    }
}

/// Every convention of a run: nonlinearity power, regularities, truncation and integrator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Odd power of the nonlinearity, at least 5.
    pub p: usize,
    /// Regularity of the Gaussian measure.
    pub s: f64,
    /// Regularity of the phase space `H^σ`, strictly below `s - 1/2`.
    pub sigma: f64,
    /// Truncation frequency of the projected nonlinearity.
    pub n: usize,
    pub grid_size: usize,
    /// Initial (adaptive) or fixed step of the time integrator.
    pub dt: f64,
    /// Local tolerance of the adaptive integrator.
    pub tol: f64,
    pub max_steps: usize,
    /// Drops the nonlinearity so the flow is the free Schrödinger group.
    #[serde(default)]
    pub linear_diagnostic: bool,
}

impl ModelParams {
    pub fn new(p: usize, s: f64, n: usize) -> Result<Self> {
        let params = ModelParams {
            p,
            s,
            sigma: default_sigma(s),
            n,
            grid_size: dealiased_grid_size(p, n),
            dt: 1e-3,
            tol: 1e-10,
            max_steps: 20_000_000,
            linear_diagnostic: false,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn linear(mut self) -> Self {
        self.linear_diagnostic = true;
        self
    }

    /// Same conventions with a different truncation (grid re-derived).
    pub fn with_truncation(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.n = n;
        out.grid_size = dealiased_grid_size(self.p, n).max(2);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 5 || self.p % 2 == 0 {
            return Err(Error::InvalidParams(format!(
                "p must be odd and at least 5, got {}",
                self.p
            )));
        }
        if !self.s.is_finite() || !self.sigma.is_finite() {
            return Err(Error::InvalidParams("s and sigma must be finite".into()));
        }
        if self.sigma >= self.s - 0.5 {
            return Err(Error::InvalidParams(format!(
                "sigma = {} must be below s - 1/2 = {}",
                self.sigma,
                self.s - 0.5
            )));
        }
        if self.n < 1 {
            return Err(Error::InvalidParams("truncation N must be at least 1".into()));
        }
        let required = min_grid_size(self.p, self.n);
        if self.grid_size < required {
            return Err(Error::InsufficientGrid {
                grid_size: self.grid_size,
                required,
            });
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidParams("tol must be positive".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParams("dt must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidParams("max_steps must be positive".into()));
        }
        Ok(())
    }
}

pub fn default_sigma(s: f64) -> f64 {
    s - 0.55
}

/// `2pN + 2`: below this the projected nonlinearity is not computed exactly.
pub fn min_grid_size(p: usize, n: usize) -> usize {
    2 * p * n + 2
}

pub fn dealiased_grid_size(p: usize, n: usize) -> usize {
    min_grid_size(p, n).next_power_of_two()
}

/// Uniform-grid synthesis/analysis with cached FFT plans.
#[derive(Clone)]
pub struct SpectralGrid {
    size: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralGrid").field("size", &self.size).finish()
    }
}

impl SpectralGrid {
    pub fn new(size: usize) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(size);
        let inverse = planner.plan_fft_inverse(size);
        let scratch_len = forward
            .get_inplace_scratch_len()
            .max(inverse.get_inplace_scratch_len());
        SpectralGrid {
            size,
            forward,
            inverse,
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Grid values `u(2πj/G)` of the centered coefficient slice `c_{-B..=B}`; needs `2B < G`.
    pub fn synthesize(&mut self, centered: &[Complex64], values: &mut [Complex64]) {
        let b = centered.len() / 2;
        debug_assert!(2 * b < self.size);
        values.fill(Complex64::new(0.0, 0.0));
        for (i, &c) in centered.iter().enumerate() {
            let n = i as i64 - b as i64;
            values[n.rem_euclid(self.size as i64) as usize] = c;
        }
        self.inverse.process_with_scratch(values, &mut self.scratch);
    }

    /// Coefficients `c_{-B..=B}` of the grid values (consumes `values` as workspace).
    pub fn analyze(&mut self, values: &mut [Complex64], centered: &mut [Complex64]) {
        let b = centered.len() / 2;
        self.forward.process_with_scratch(values, &mut self.scratch);
        let inv = 1.0 / self.size as f64;
        for (i, c) in centered.iter_mut().enumerate() {
            let n = i as i64 - b as i64;
            *c = values[n.rem_euclid(self.size as i64) as usize] * inv;
        }
    }
}

/// Exact evaluation of `π_N(|π_N u|^{p-1} π_N u)` on the centered low modes.
#[derive(Clone, Debug)]
pub struct Nonlinearity {
    p: usize,
    n: usize,
    grid: SpectralGrid,
    values: Vec<Complex64>,
}

impl Nonlinearity {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let required = min_grid_size(params.p, params.n);
        if params.grid_size < required {
            return Err(Error::InsufficientGrid {
                grid_size: params.grid_size,
                required,
            });
        }
        Ok(Nonlinearity {
            p: params.p,
            n: params.n,
            grid: SpectralGrid::new(params.grid_size),
            values: vec![Complex64::new(0.0, 0.0); params.grid_size],
        })
    }

    pub fn truncation(&self) -> usize {
        self.n
    }

    /// `low` and `out` hold `2N + 1` centered coefficients.
    pub fn apply(&mut self, low: &[Complex64], out: &mut [Complex64]) {
        debug_assert_eq!(low.len(), 2 * self.n + 1);
        self.grid.synthesize(low, &mut self.values);
        let half = ((self.p - 1) / 2) as i32;
        for w in self.values.iter_mut() {
            *w *= w.norm_sqr().powi(half);
        }
        self.grid.analyze(&mut self.values, out);
    }

    /// `(1/2π) ∫ |π_N u|^{p+1} dx`, exact since the integrand has bandwidth `(p+1)N`.
    pub fn potential_integral(&mut self, low: &[Complex64]) -> f64 {
        self.grid.synthesize(low, &mut self.values);
        let half = ((self.p + 1) / 2) as i32;
        let terms: Vec<f64> = self.values.iter().map(|w| w.norm_sqr().powi(half)).collect();
        crate::stats::pairwise_sum(&terms) / self.values.len() as f64
    }
}

/// Sharp projector `π_N`.
pub fn project(u: &FourierState, n: usize) -> FourierState {
    let mut out = u.clone();
    let offset = u.n_ambient() as i64;
    for (i, c) in out.coeffs_mut().iter_mut().enumerate() {
        if (i as i64 - offset).unsigned_abs() as usize > n {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    out
}

pub fn is_dyadic(l: u64) -> bool {
    l >= 1 && l.is_power_of_two()
}

/// Frequencies of the dyadic block `L`: `|n| ≤ 1` for `L = 1`, `L/2 < |n| ≤ L` otherwise.
pub fn dyadic_block_contains(l: u64, n: i64) -> bool {
    let m = n.unsigned_abs();
    if l == 1 {
        m <= 1
    } else {
        m > l / 2 && m <= l
    }
}

pub fn dyadic_project(u: &FourierState, l: u64) -> Result<FourierState> {
    if !is_dyadic(l) {
        return Err(Error::NotDyadic(l));
    }
    let mut out = FourierState::zeros(u.n_ambient());
    for (n, c) in u.modes() {
        if dyadic_block_contains(l, n) {
            out.set(n, c);
        }
    }
    Ok(out)
}

/// `(Σ ⟨n⟩^{2r} |c_n|²)^{1/2}`.
pub fn sobolev_norm(u: &FourierState, r: f64) -> f64 {
    sobolev_norm_sq(u, r).sqrt()
}

pub fn sobolev_norm_sq(u: &FourierState, r: f64) -> f64 {
    let terms: Vec<f64> = u
        .modes()
        .map(|(n, c)| (1.0 + (n * n) as f64).powf(r) * c.norm_sqr())
        .collect();
    crate::stats::pairwise_sum(&terms)
}

/// Grid size used by [`lebesgue_norm`]: exact for even integer `q`.
pub fn lebesgue_grid_size(bandwidth: usize, q: f64) -> usize {
    let factor = q.ceil().max(2.0) as usize + 1;
    (factor * bandwidth.max(1) + 2).next_power_of_two().max(16)
}

/// `((1/2π) ∫ |u|^q dx)^{1/q}` by averaging over a uniform grid.
pub fn lebesgue_norm(u: &FourierState, q: f64) -> Result<f64> {
    lebesgue_norm_on_grid(u, q, lebesgue_grid_size(u.n_ambient(), q))
}

pub fn lebesgue_norm_on_grid(u: &FourierState, q: f64, grid_size: usize) -> Result<f64> {
    if !(q >= 1.0) {
        return Err(Error::InvalidParams(format!("q must be at least 1, got {q}")));
    }
    if grid_size <= 2 * u.n_ambient() {
        return Err(Error::InsufficientGrid {
            grid_size,
            required: 2 * u.n_ambient() + 1,
        });
    }
    let mut grid = SpectralGrid::new(grid_size);
    let mut values = vec![Complex64::new(0.0, 0.0); grid_size];
    grid.synthesize(u.coeffs(), &mut values);
    let terms: Vec<f64> = values.iter().map(|w| w.norm().powf(q)).collect();
    let mean = crate::stats::pairwise_sum(&terms) / grid_size as f64;
    Ok(mean.powf(1.0 / q))
}

/// Fourier coefficients of `π_N(|π_N u|^{p-1} π_N u)`.
pub fn nonlinearity(u: &FourierState, params: &ModelParams) -> Result<FourierState> {
    let mut op = Nonlinearity::new(params)?;
    let low = u.low_modes(params.n);
    let mut out = vec![Complex64::new(0.0, 0.0); low.len()];
    op.apply(&low, &mut out);
    let mut state = FourierState::zeros(u.n_ambient().max(params.n));
    for (i, c) in out.into_iter().enumerate() {
        state.set(i as i64 - params.n as i64, c);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_state(rng: &mut ChaCha8Rng, n_ambient: usize) -> FourierState {
        let coeffs = (0..2 * n_ambient + 1)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        FourierState::from_coeffs(n_ambient, coeffs).unwrap()
    }

    #[test]
    fn projector_zeroes_high_modes() {
        let u = FourierState::from_modes(5, &[(0, c(1.0, 0.0)), (3, c(5.0, 0.0))]).unwrap();
        let v = project(&u, 2);
        assert_eq!(v.get(0), c(1.0, 0.0));
        assert_eq!(v.get(3), c(0.0, 0.0));
    }

    #[test]
    fn projector_idempotent_and_nested() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let u = random_state(&mut rng, 8);
            assert_eq!(project(&project(&u, 3), 3), project(&u, 3));
            assert_eq!(project(&project(&u, 5), 2), project(&u, 2));
        }
    }

    #[test]
    fn dyadic_blocks() {
        let u = random_state(&mut ChaCha8Rng::seed_from_u64(2), 64);
        let b1 = dyadic_project(&u, 1).unwrap();
        let kept: Vec<i64> = b1.modes().filter(|(_, c)| c.norm() > 0.0).map(|(n, _)| n).collect();
        assert_eq!(kept, vec![-1, 0, 1]);
        let b4 = dyadic_project(&u, 4).unwrap();
        let kept: Vec<i64> = b4.modes().filter(|(_, c)| c.norm() > 0.0).map(|(n, _)| n).collect();
        assert_eq!(kept, vec![-4, -3, 3, 4]);

        let mut sum = FourierState::zeros(64);
        for l in [1u64, 2, 4, 8, 16, 32, 64] {
            sum = sum.add(&dyadic_project(&u, l).unwrap()).unwrap();
        }
        assert_eq!(sum, u);
        assert!(matches!(dyadic_project(&u, 3), Err(Error::NotDyadic(3))));
    }

    #[test]
    fn sobolev_norm_examples() {
        let u = FourierState::from_modes(2, &[(0, c(3.0, 0.0))]).unwrap();
        for r in [-1.0, 0.0, 0.7, 2.0] {
            assert!((sobolev_norm(&u, r) - 3.0).abs() < 1e-15);
        }
        let u = FourierState::from_modes(2, &[(1, c(1.0, 0.0))]).unwrap();
        assert!((sobolev_norm(&u, 1.0) - 2f64.sqrt()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u = random_state(&mut rng, 10);
            let r1 = rng.random_range(-1.0..2.0);
            let r2 = r1 + rng.random_range(0.0..1.0);
            assert!(sobolev_norm(&u, r1) <= sobolev_norm(&u, r2));
        }
    }

    #[test]
    fn lebesgue_norm_examples() {
        let u = FourierState::from_modes(1, &[(0, c(2.0, 0.0))]).unwrap();
        assert!((lebesgue_norm(&u, 6.0).unwrap() - 2.0).abs() < 1e-13);
        let u = FourierState::from_modes(1, &[(0, c(1.0, 0.0)), (1, c(1.0, 0.0))]).unwrap();
        assert!((lebesgue_norm(&u, 2.0).unwrap() - 2f64.sqrt()).abs() < 1e-13);
        assert!(lebesgue_norm(&u, 0.5).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let u = random_state(&mut rng, 12);
            let l2 = lebesgue_norm(&u, 2.0).unwrap();
            let h0 = sobolev_norm(&u, 0.0);
            assert!((l2 - h0).abs() <= 1e-12 * h0);
        }
    }

    #[test]
    fn lebesgue_even_power_is_exact() {
        // ∫|u|^4 = Σ_{a-b+c-d=0} c_a conj(c_b) c_c conj(c_d), evaluated directly.
        let u = random_state(&mut ChaCha8Rng::seed_from_u64(5), 3);
        let mut direct = c(0.0, 0.0);
        for a in -3..=3i64 {
            for b in -3..=3i64 {
                for cc in -3..=3i64 {
                    let d = a - b + cc;
                    direct += u.get(a) * u.get(b).conj() * u.get(cc) * u.get(d).conj();
                }
            }
        }
        let l4 = lebesgue_norm(&u, 4.0).unwrap().powi(4);
        assert!((l4 - direct.re).abs() < 1e-12 * l4);
    }

    #[test]
    fn grid_round_trip() {
        let u = random_state(&mut ChaCha8Rng::seed_from_u64(6), 15);
        let mut grid = SpectralGrid::new(32);
        let mut values = vec![c(0.0, 0.0); 32];
        grid.synthesize(u.coeffs(), &mut values);
        let mut back = vec![c(0.0, 0.0); 31];
        grid.analyze(&mut values, &mut back);
        for (a, b) in back.iter().zip(u.coeffs()) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    fn convolution_oracle(u: &FourierState, p: usize, n: usize) -> Vec<Complex64> {
        // Σ over k_1 - k_2 + k_3 - ... + k_p = m, all |k_j| ≤ n.
        let low = project(u, n);
        let mut acc = vec![c(0.0, 0.0); 2 * n + 1];
        let width = 2 * n + 1;
        let total = width.pow(p as u32);
        for idx in 0..total {
            let mut rest = idx;
            let mut sum = 0i64;
            let mut prod = c(1.0, 0.0);
            for j in 0..p {
                let k = (rest % width) as i64 - n as i64;
                rest /= width;
                if j % 2 == 0 {
                    sum += k;
                    prod *= low.get(k);
                } else {
                    sum -= k;
                    prod *= low.get(k).conj();
                }
            }
            if sum.unsigned_abs() as usize <= n {
                acc[(sum + n as i64) as usize] += prod;
            }
        }
        acc
    }

    #[test]
    fn nonlinearity_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(p, n) in &[(5usize, 1usize), (5, 2), (7, 1), (7, 2)] {
            let params = ModelParams::new(p, 1.3, n).unwrap();
            for _ in 0..5 {
                let u = random_state(&mut rng, n + 2);
                let fast = nonlinearity(&u, &params).unwrap();
                let oracle = convolution_oracle(&u, p, n);
                let scale = oracle.iter().map(|z| z.norm()).fold(0.0, f64::max);
                for (i, z) in oracle.iter().enumerate() {
                    let k = i as i64 - n as i64;
                    assert!((fast.get(k) - z).norm() <= 1e-12 * scale, "p={p} n={n} k={k}");
                }
                assert_eq!(fast.get(n as i64 + 1), c(0.0, 0.0));
            }
        }
    }

    #[test]
    fn nonlinearity_of_constant_and_gauge() {
        let params = ModelParams::new(5, 1.3, 3).unwrap();
        let one = FourierState::from_modes(3, &[(0, c(1.0, 0.0))]).unwrap();
        let out = nonlinearity(&one, &params).unwrap();
        assert!((out.get(0) - c(1.0, 0.0)).norm() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let u = random_state(&mut rng, 3);
            let phase = Complex64::from_polar(1.0, rng.random_range(0.0..6.28));
            let lhs = nonlinearity(&u.scale(phase), &params).unwrap();
            let rhs = nonlinearity(&u, &params).unwrap().scale(phase);
            let scale = sobolev_norm(&rhs, 0.0);
            assert!(sobolev_norm(&lhs.sub(&rhs).unwrap(), 0.0) < 1e-12 * scale);
        }
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(4, 1.3, 2).is_err());
        assert!(ModelParams::new(5, 1.3, 0).is_err());
        let mut p = ModelParams::new(5, 1.3, 4).unwrap();
        assert_eq!(p.grid_size, 64);
        p.grid_size = 40;
        assert!(matches!(p.validate(), Err(Error::InsufficientGrid { required: 42, .. })));
        assert!(ModelParams::new(5, 1.3, 4).unwrap().with_sigma(0.8).validate().is_err());
    }

    #[test]
    fn binary_and_json_formats() {
        let u = random_state(&mut ChaCha8Rng::seed_from_u64(9), 4);
        let mut bytes = Vec::new();
        u.write_binary(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 16 + 9 * 16);
        assert_eq!(&bytes[..4], b"NLSS");
        assert_eq!(FourierState::read_binary(&bytes[..]).unwrap(), u);
        bytes[0] = b'X';
        assert!(FourierState::read_binary(&bytes[..]).is_err());

        let json = serde_json::to_string(&u).unwrap();
        assert!(json.starts_with("[[-4,"));
        let back: FourierState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, u);
    }

    #[test]
    fn non_finite_rejected() {
        let err = FourierState::from_modes(2, &[(1, c(f64::NAN, 0.0))]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(1)));
    }
}
