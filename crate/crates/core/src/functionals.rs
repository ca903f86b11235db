//! Scalar functionals: mass, Hamiltonian, truncated and renormalized energies,
//! the resonant function and symmetrized derivative, the multilinear forms
//! `𝓜`, `𝓣`, `𝓝`, the energy correction, the modified energy and its time
//! derivative, and the transport densities `g` and `f`.
//!
//! The multilinear forms used by the energy correction weight frequencies by
//! `⟨k⟩^{2s}`, the same symbol as the `H^s` norm in the modified energy; this
//! is the pairing under which `d/dt E_{s,N}(Φ^N_t u) = Q_{s,N}(Φ^N_t u)` holds
//! exactly. [`Symbol::Homogeneous`] (`|k|^{2s}`) is what the arithmetic scans use.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow;
use crate::spectral::{japanese_bracket, sobolev_norm_sq, FourierState, ModelParams, Nonlinearity};
use crate::stats::{pairwise_sum, CompensatedSum};

/// Upper bound on `(2N+1)^p` for the multilinear enumerations.
pub const ENUMERATION_BUDGET: f64 = 1e9;

pub fn mass(u: &FourierState) -> f64 {
    let terms: Vec<f64> = u.coeffs().iter().map(|c| c.norm_sqr()).collect();
    pairwise_sum(&terms)
}

/// `½ Σ_{|n|≤N} n² |c_n|²`.
pub fn kinetic(u: &FourierState, n: usize) -> f64 {
    let terms: Vec<f64> = u
        .modes()
        .filter(|(k, _)| k.unsigned_abs() as usize <= n)
        .map(|(k, c)| 0.5 * (k * k) as f64 * c.norm_sqr())
        .collect();
    pairwise_sum(&terms)
}

/// `Σ_{|n|≤N} |n|² / ⟨n⟩^{2s}`: the Gaussian mean of the kinetic term when `E|g_n|² = 2`.
pub fn counterterm(n: usize, s: f64) -> f64 {
    let terms: Vec<f64> = (-(n as i64)..=n as i64)
        .map(|k| (k * k) as f64 / japanese_bracket(k).powf(2.0 * s))
        .collect();
    pairwise_sum(&terms)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub mass: f64,
    pub kinetic: f64,
    pub potential: f64,
    pub counterterm: f64,
    #[serde(rename = "E_N")]
    pub e_n: f64,
    pub renormalized: f64,
}

/// Reusable evaluator for the energies of one set of [`ModelParams`].
#[derive(Clone, Debug)]
pub struct EnergyEvaluator {
    params: ModelParams,
    nonlinearity: Nonlinearity,
    counterterm: f64,
}

impl EnergyEvaluator {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        Ok(EnergyEvaluator {
            params: params.clone(),
            nonlinearity: Nonlinearity::new(params)?,
            counterterm: counterterm(params.n, params.s),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// `(1/(p+1)) ‖π_N u‖_{L^{p+1}}^{p+1}`.
    pub fn potential(&mut self, u: &FourierState) -> f64 {
        let low = u.low_modes(self.params.n);
        self.nonlinearity.potential_integral(&low) / (self.params.p + 1) as f64
    }

    pub fn breakdown(&mut self, u: &FourierState) -> EnergyBreakdown {
        let mass = mass(u);
        let kinetic = kinetic(u, self.params.n);
        let potential = self.potential(u);
        EnergyBreakdown {
            mass,
            kinetic,
            potential,
            counterterm: self.counterterm,
            e_n: mass + kinetic + potential,
            renormalized: mass + (kinetic + potential - self.counterterm).abs(),
        }
    }
}

pub fn hamiltonian(u: &FourierState, params: &ModelParams) -> Result<f64> {
    let b = EnergyEvaluator::new(params)?.breakdown(u);
    Ok(b.kinetic + b.potential)
}

pub fn truncated_energy(u: &FourierState, params: &ModelParams) -> Result<EnergyBreakdown> {
    Ok(EnergyEvaluator::new(params)?.breakdown(u))
}

/// `𝓔_N(u) = M(u) + |H(π_N u) − σ_N|`.
pub fn renormalized_energy(u: &FourierState, params: &ModelParams) -> Result<f64> {
    Ok(truncated_energy(u, params)?.renormalized)
}

/// Frequency weight entering the symmetrized derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Symbol {
    /// `|k|^{2s}`
    Homogeneous,
    /// `⟨k⟩^{2s}`
    Bracket,
}

impl Symbol {
    pub fn weight(self, k: i64, s: f64) -> f64 {
        match self {
            Symbol::Homogeneous => (k.unsigned_abs() as f64).powf(2.0 * s),
            Symbol::Bracket => japanese_bracket(k).powf(2.0 * s),
        }
    }

    /// Weights for `k = 0..=max`.
    pub fn table(self, max: usize, s: f64) -> Vec<f64> {
        (0..=max as i64).map(|k| self.weight(k, s)).collect()
    }
}

/// A `(p+1)`-tuple of frequencies; slot `j` (1-based) carries the sign `(-1)^{j-1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrequencyTuple {
    pub k: Vec<i64>,
}

impl FrequencyTuple {
    pub fn new(k: Vec<i64>) -> Self {
        FrequencyTuple { k }
    }

    pub fn linear_sum(&self) -> i64 {
        self.k
            .iter()
            .enumerate()
            .map(|(j, &k)| if j % 2 == 0 { k } else { -k })
            .sum()
    }

    /// Resonant function `Ω(k) = Σ (-1)^{j-1} k_j²`.
    pub fn omega(&self) -> i64 {
        self.k
            .iter()
            .enumerate()
            .map(|(j, &k)| if j % 2 == 0 { k * k } else { -k * k })
            .sum()
    }

    /// `|k_(1)| ≥ |k_(2)| ≥ ...`.
    pub fn sorted_magnitudes(&self) -> Vec<u64> {
        let mut m: Vec<u64> = self.k.iter().map(|k| k.unsigned_abs()).collect();
        m.sort_unstable_by(|a, b| b.cmp(a));
        m
    }

    /// `|k_(j)|` with 1-based `j`.
    pub fn ordered(&self, j: usize) -> u64 {
        self.sorted_magnitudes()[j - 1]
    }

    /// Symmetrized derivative with the given symbol, evaluated so that tuples
    /// whose odd and even slots carry the same magnitudes give exactly zero.
    pub fn psi_with(&self, symbol: Symbol, s: f64) -> f64 {
        let mut odd: Vec<u64> = self.k.iter().step_by(2).map(|k| k.unsigned_abs()).collect();
        let mut even: Vec<u64> = self.k.iter().skip(1).step_by(2).map(|k| k.unsigned_abs()).collect();
        odd.sort_unstable();
        even.sort_unstable();
        let terms: Vec<f64> = odd
            .iter()
            .zip(&even)
            .map(|(&a, &b)| {
                if a == b {
                    0.0
                } else {
                    symbol.weight(a as i64, s) - symbol.weight(b as i64, s)
                }
            })
            .collect();
        pairwise_sum(&terms)
    }

    /// `ψ_{2s}(k) = Σ (-1)^{j-1} |k_j|^{2s}`.
    pub fn psi(&self, s: f64) -> f64 {
        self.psi_with(Symbol::Homogeneous, s)
    }

    pub fn psi0_with(&self, symbol: Symbol, s: f64) -> f64 {
        if self.omega() == 0 {
            self.psi_with(symbol, s)
        } else {
            0.0
        }
    }

    pub fn psi1_with(&self, symbol: Symbol, s: f64) -> f64 {
        let om = self.omega();
        if om == 0 {
            0.0
        } else {
            self.psi_with(symbol, s) / om as f64
        }
    }
}

pub fn psi_2s(k: &FrequencyTuple, s: f64) -> f64 {
    k.psi(s)
}

pub fn omega(k: &FrequencyTuple) -> i64 {
    k.omega()
}

/// `Ψ⁽⁰⁾ = 1_{Ω=0} ψ_{2s}`.
#[allow(non_snake_case)]
pub fn Psi0(k: &FrequencyTuple, s: f64) -> f64 {
    k.psi0_with(Symbol::Homogeneous, s)
}

/// `Ψ⁽¹⁾ = 1_{Ω≠0} ψ_{2s} / Ω`.
#[allow(non_snake_case)]
pub fn Psi1(k: &FrequencyTuple, s: f64) -> f64 {
    k.psi1_with(Symbol::Homogeneous, s)
}

/// Sums `Σ_{k_1 - k_2 + ... - k_{p+1} = 0, |k_j| ≤ N}` of the three multilinear forms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MultilinearValues {
    /// `𝓜`: resonant part, multiplier `Ψ⁽⁰⁾`.
    pub resonant: Complex64,
    /// `𝓣`: non-resonant part, multiplier `Ψ⁽¹⁾`.
    pub nonresonant: Complex64,
    /// `𝓝`: `𝓣` with the projected nonlinearity in the first slot.
    pub nonlinear: Complex64,
}

#[derive(Clone, Copy, Default)]
struct ComplexAcc {
    re: CompensatedSum,
    im: CompensatedSum,
}

impl ComplexAcc {
    #[inline]
    fn add(&mut self, z: Complex64) {
        self.re.add(z.re);
        self.im.add(z.im);
    }
    fn merge(&mut self, other: &ComplexAcc) {
        self.re.merge(&other.re);
        self.im.merge(&other.im);
    }
    fn value(&self) -> Complex64 {
        Complex64::new(self.re.value(), self.im.value())
    }
}

#[derive(Clone, Copy, Default)]
struct Accumulators {
    resonant: ComplexAcc,
    nonresonant: ComplexAcc,
    nonlinear: ComplexAcc,
}

impl Accumulators {
    fn merge(&mut self, other: &Accumulators) {
        self.resonant.merge(&other.resonant);
        self.nonresonant.merge(&other.nonresonant);
        self.nonlinear.merge(&other.nonlinear);
    }
}

pub fn check_enumeration_budget(p: usize, n: usize) -> Result<()> {
    let count = ((2 * n + 1) as f64).powi(p as i32);
    if count > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudget {
            count,
            limit: ENUMERATION_BUDGET,
        });
    }
    Ok(())
}

/// Enumeration engine: free slots `2..=p+1`, slot 1 solved from the linear constraint.
struct Enumerator<'a> {
    n: i64,
    slots: &'a [&'a [Complex64]],
    first_alt: Option<&'a [Complex64]>,
    weights: &'a [f64],
    symbol: Symbol,
    s: f64,
    k: Vec<i64>,
}

impl Enumerator<'_> {
    fn value(&self, slot: usize, k: i64) -> Complex64 {
        let z = self.slots[slot][(k + self.n) as usize];
        if slot % 2 == 0 {
            z
        } else {
            z.conj()
        }
    }

    /// `slot` is 0-based; slots `1..=p` are enumerated in order.
    fn descend(&mut self, slot: usize, lin: i64, psi: f64, om: i64, prod: Complex64, acc: &mut Accumulators) {
        let last = self.slots.len();
        if slot == last {
            let k1 = -lin;
            if k1.abs() > self.n {
                return;
            }
            let om = om + k1 * k1;
            let a1 = self.slots[0][(k1 + self.n) as usize];
            if om == 0 {
                self.k[0] = k1;
                let psi = FrequencyTuple { k: self.k.clone() }.psi_with(self.symbol, self.s);
                if psi != 0.0 {
                    acc.resonant.add(a1 * prod * psi);
                }
            } else {
                let psi = psi + self.weights[k1.unsigned_abs() as usize];
                if psi == 0.0 {
                    return;
                }
                let m = psi / om as f64;
                acc.nonresonant.add(a1 * prod * m);
                if let Some(g) = self.first_alt {
                    acc.nonlinear.add(g[(k1 + self.n) as usize] * prod * m);
                }
            }
            return;
        }
        let even = slot % 2 == 1; // 1-based slot number slot+1 is even
        for k in -self.n..=self.n {
            let z = self.value(slot, k);
            if z == Complex64::new(0.0, 0.0) {
                continue;
            }
            let w = self.weights[k.unsigned_abs() as usize];
            self.k[slot] = k;
            if even {
                self.descend(slot + 1, lin - k, psi - w, om - k * k, prod * z, acc);
            } else {
                self.descend(slot + 1, lin + k, psi + w, om + k * k, prod * z, acc);
            }
        }
    }
}

/// Evaluates the forms on arbitrary (already projected, centered) slot arrays.
fn enumerate_forms(
    n: usize,
    s: f64,
    symbol: Symbol,
    slots: &[&[Complex64]],
    first_alt: Option<&[Complex64]>,
) -> MultilinearValues {
    let weights = symbol.table(n, s);
    let ni = n as i64;
    // Parallel over the slot-2 frequency; merged in index order.
    let partials: Vec<Accumulators> = (-ni..=ni)
        .into_par_iter()
        .map(|k2| {
            let mut acc = Accumulators::default();
            let z = slots[1][(k2 + ni) as usize].conj();
            if z == Complex64::new(0.0, 0.0) {
                return acc;
            }
            let mut e = Enumerator {
                n: ni,
                slots,
                first_alt,
                weights: &weights,
                symbol,
                s,
                k: vec![0; slots.len()],
            };
            e.k[1] = k2;
            let w = weights[k2.unsigned_abs() as usize];
            e.descend(2, -k2, -w, -k2 * k2, z, &mut acc);
            acc
        })
        .collect();
    let mut total = Accumulators::default();
    for part in &partials {
        total.merge(part);
    }
    MultilinearValues {
        resonant: total.resonant.value(),
        nonresonant: total.nonresonant.value(),
        nonlinear: total.nonlinear.value(),
    }
}

/// Diagonal `𝓜_{s,N}(u)`, `𝓣_{s,N}(u)`, `𝓝_{s,N}(u)` in one enumeration pass.
pub fn multilinear_forms(u: &FourierState, params: &ModelParams, symbol: Symbol) -> Result<MultilinearValues> {
    check_enumeration_budget(params.p, params.n)?;
    let low = u.low_modes(params.n);
    let mut g = vec![Complex64::new(0.0, 0.0); low.len()];
    Nonlinearity::new(params)?.apply(&low, &mut g);
    let slots: Vec<&[Complex64]> = vec![&low; params.p + 1];
    Ok(enumerate_forms(params.n, params.s, symbol, &slots, Some(&g)))
}

pub fn multilinear_t(u: &FourierState, params: &ModelParams) -> Result<Complex64> {
    Ok(multilinear_forms(u, params, Symbol::Bracket)?.nonresonant)
}

pub fn multilinear_m(u: &FourierState, params: &ModelParams) -> Result<Complex64> {
    Ok(multilinear_forms(u, params, Symbol::Bracket)?.resonant)
}

pub fn multilinear_n(u: &FourierState, params: &ModelParams) -> Result<Complex64> {
    Ok(multilinear_forms(u, params, Symbol::Bracket)?.nonlinear)
}

/// Off-diagonal `(𝓜_{s,N}, 𝓣_{s,N})(u_1, ..., u_{p+1})`; small truncations only (`N ≤ 2`).
pub fn multilinear_offdiagonal(
    slots: &[FourierState],
    p: usize,
    s: f64,
    n: usize,
    symbol: Symbol,
) -> Result<(Complex64, Complex64)> {
    if n > 2 {
        return Err(Error::InvalidParams(
            "off-diagonal multilinear forms are limited to N ≤ 2".into(),
        ));
    }
    if slots.len() != p + 1 {
        return Err(Error::InvalidParams(format!(
            "expected {} slots, got {}",
            p + 1,
            slots.len()
        )));
    }
    let lows: Vec<Vec<Complex64>> = slots.iter().map(|u| u.low_modes(n)).collect();
    let refs: Vec<&[Complex64]> = lows.iter().map(|v| v.as_slice()).collect();
    let v = enumerate_forms(n, s, symbol, &refs, None);
    Ok((v.resonant, v.nonresonant))
}

/// Energy correction, modified energy and its derivative for one set of parameters.
#[derive(Clone, Debug)]
pub struct NormalForm {
    params: ModelParams,
    nonlinearity: Nonlinearity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalFormValues {
    pub forms: MultilinearValues,
    /// `R_{s,N}`
    pub correction: f64,
    /// `E_{s,N}`
    pub modified_energy: f64,
    /// `Q_{s,N}`
    pub derivative: f64,
}

impl NormalForm {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        check_enumeration_budget(params.p, params.n)?;
        Ok(NormalForm {
            params: params.clone(),
            nonlinearity: Nonlinearity::new(params)?,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    fn forms(&mut self, u: &FourierState, with_nonlinear: bool) -> MultilinearValues {
        let n = self.params.n;
        let low = u.low_modes(n);
        let slots: Vec<&[Complex64]> = vec![&low; self.params.p + 1];
        if with_nonlinear {
            let mut g = vec![Complex64::new(0.0, 0.0); low.len()];
            self.nonlinearity.apply(&low, &mut g);
            enumerate_forms(n, self.params.s, Symbol::Bracket, &slots, Some(&g))
        } else {
            enumerate_forms(n, self.params.s, Symbol::Bracket, &slots, None)
        }
    }

    /// `½ ‖π_N u‖²_{H^s}`.
    pub fn quadratic(&self, u: &FourierState) -> f64 {
        0.5 * sobolev_norm_sq(&crate::spectral::project(u, self.params.n), self.params.s)
    }

    /// `R_{s,N}(u) = Re 𝓣_{s,N}(u) / (p+1)`.
    pub fn correction(&mut self, u: &FourierState) -> f64 {
        self.forms(u, false).nonresonant.re / (self.params.p + 1) as f64
    }

    pub fn modified_energy(&mut self, u: &FourierState) -> f64 {
        self.quadratic(u) + self.correction(u)
    }

    pub fn evaluate(&mut self, u: &FourierState) -> NormalFormValues {
        let forms = self.forms(u, true);
        let p1 = (self.params.p + 1) as f64;
        let correction = forms.nonresonant.re / p1;
        NormalFormValues {
            forms,
            correction,
            modified_energy: self.quadratic(u) + correction,
            derivative: -forms.resonant.im / p1 + forms.nonlinear.im,
        }
    }
}

/// Frequency multiset of one slot parity with its permutation count.
#[derive(Clone, Debug)]
struct HalfTuple {
    idx: Vec<usize>,
    multiplicity: f64,
    linear: i64,
    square: i64,
    weight: f64,
}

fn half_tuples(n: usize, q: usize, weights: &[f64]) -> Vec<HalfTuple> {
    fn rec(n: usize, q: usize, start: usize, cur: &mut Vec<usize>, weights: &[f64], out: &mut Vec<HalfTuple>) {
        if cur.len() == q {
            let mut multiplicity: f64 = (1..=q).map(|j| j as f64).product();
            let mut run = 1usize;
            for j in 1..=q {
                if j < q && cur[j] == cur[j - 1] {
                    run += 1;
                } else {
                    multiplicity /= (1..=run).map(|r| r as f64).product::<f64>();
                    run = 1;
                }
            }
            let ks: Vec<i64> = cur.iter().map(|&i| i as i64 - n as i64).collect();
            out.push(HalfTuple {
                idx: cur.clone(),
                multiplicity,
                linear: ks.iter().sum(),
                square: ks.iter().map(|k| k * k).sum(),
                weight: ks.iter().map(|k| weights[k.unsigned_abs() as usize]).sum(),
            });
            return;
        }
        for i in start..=2 * n {
            cur.push(i);
            rec(n, q, i, cur, weights, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, q, 0, &mut Vec::with_capacity(q), weights, &mut out);
    out
}

/// `R_{s,N}` tabulated once per parameter set.
///
/// Products of `u` over each slot-parity multiset are formed once per call and
/// paired through a precomputed list of non-resonant couplings, so repeated
/// evaluation costs far less than a fresh enumeration of all `(p+1)`-tuples.
#[derive(Clone, Debug)]
pub struct CorrectionTable {
    n: usize,
    p: usize,
    s: f64,
    halves: Vec<Vec<usize>>,
    pairs: Vec<(u32, u32, f64)>,
}

impl CorrectionTable {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        check_enumeration_budget(params.p, params.n)?;
        let q = params.p.div_ceil(2);
        let weights = Symbol::Bracket.table(params.n, params.s);
        let halves = half_tuples(params.n, q, &weights);
        let mut by_sum: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
        for (i, h) in halves.iter().enumerate() {
            by_sum.entry(h.linear).or_default().push(i);
        }
        let mut pairs = Vec::new();
        for group in by_sum.values() {
            for &a in group {
                for &b in group {
                    let (ha, hb) = (&halves[a], &halves[b]);
                    let om = ha.square - hb.square;
                    let psi = ha.weight - hb.weight;
                    if om != 0 && psi != 0.0 {
                        pairs.push((a as u32, b as u32, ha.multiplicity * hb.multiplicity * psi / om as f64));
                    }
                }
            }
        }
        Ok(CorrectionTable {
            n: params.n,
            p: params.p,
            s: params.s,
            halves: halves.into_iter().map(|h| h.idx).collect(),
            pairs,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `R_{s,N}(u)`.
    pub fn evaluate(&self, u: &FourierState) -> f64 {
        let low = u.low_modes(self.n);
        let prod = |idx: &[usize]| idx.iter().fold(Complex64::new(1.0, 0.0), |acc, &i| acc * low[i]);
        let a: Vec<Complex64> = self.halves.iter().map(|i| prod(i)).collect();
        let b: Vec<Complex64> = a.iter().map(|z| z.conj()).collect();
        let mut acc = CompensatedSum::new();
        for &(i, j, m) in &self.pairs {
            acc.add(m * (a[i as usize] * b[j as usize]).re);
        }
        acc.value() / (self.p + 1) as f64
    }

    /// `E_{s,N}(u) = ½‖π_N u‖²_{H^s} + R_{s,N}(u)`.
    pub fn modified_energy(&self, u: &FourierState) -> f64 {
        0.5 * sobolev_norm_sq(&crate::spectral::project(u, self.n), self.s) + self.evaluate(u)
    }
}

pub fn energy_correction(u: &FourierState, params: &ModelParams) -> Result<f64> {
    Ok(NormalForm::new(params)?.correction(u))
}

pub fn modified_energy(u: &FourierState, params: &ModelParams) -> Result<f64> {
    Ok(NormalForm::new(params)?.modified_energy(u))
}

pub fn modified_energy_derivative(u: &FourierState, params: &ModelParams) -> Result<f64> {
    Ok(NormalForm::new(params)?.evaluate(u).derivative)
}

/// Comparison of a Richardson-extrapolated central difference of `E_{s,N}` along the flow with `Q_{s,N}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub finite_difference: f64,
    pub derivative: f64,
    pub relative_error: f64,
    pub step: f64,
}

/// Steps `h = 10^{-3}, 10^{-4}, ...` until two consecutive extrapolations agree to `1e-9`
/// relative (at most four levels); the last estimate is compared with `Q_{s,N}(u)`.
pub fn normal_form_identity_check(u: &FourierState, params: &ModelParams) -> Result<IdentityCheck> {
    let mut evolver = flow::Evolver::new(params)?;
    let mut nf = NormalForm::new(params)?;
    let derivative = nf.evaluate(u).derivative;
    let mut central = |h: f64| -> Result<f64> {
        let a = evolver.evolve(u, h)?;
        let b = evolver.evolve(u, -h)?;
        Ok((nf.modified_energy(&a) - nf.modified_energy(&b)) / (2.0 * h))
    };
    let mut h = 1e-3;
    let mut prev: Option<f64> = None;
    let mut estimate = f64::NAN;
    for _ in 0..4 {
        estimate = (4.0 * central(h / 2.0)? - central(h)?) / 3.0;
        if let Some(p) = prev {
            if (estimate - p).abs() <= 1e-9 * estimate.abs() {
                break;
            }
        }
        prev = Some(estimate);
        h /= 10.0;
    }
    Ok(IdentityCheck {
        finite_difference: estimate,
        derivative,
        relative_error: (estimate - derivative).abs() / derivative.abs(),
        step: h,
    })
}

/// `log g_{s,N,t}(u) = -½(‖π_N Φ^N_{-t} u‖²_{H^s} - ‖π_N u‖²_{H^s})`.
pub fn log_density_g(u: &FourierState, t: f64, params: &ModelParams) -> Result<f64> {
    let back = flow::evolve(u, -t, params)?;
    Ok(log_density_g_from(u, &back, params))
}

/// `log g` given the backward-evolved state `Φ^N_{-t} u`.
pub fn log_density_g_from(u: &FourierState, back: &FourierState, params: &ModelParams) -> f64 {
    let n = params.n;
    let proj = |v: &FourierState| sobolev_norm_sq(&crate::spectral::project(v, n), params.s);
    -0.5 * (proj(back) - proj(u))
}

pub fn density_g(u: &FourierState, t: f64, params: &ModelParams) -> Result<f64> {
    Ok(log_density_g(u, t, params)?.exp())
}

/// `log f_{s,N,t}(u) = -(E_{s,N}(Φ^N_{-t} u) - E_{s,N}(u))`.
pub fn log_density_f(u: &FourierState, t: f64, params: &ModelParams) -> Result<f64> {
    let back = flow::evolve(u, -t, params)?;
    let mut nf = NormalForm::new(params)?;
    Ok(-(nf.modified_energy(&back) - nf.modified_energy(u)))
}

pub fn density_f(u: &FourierState, t: f64, params: &ModelParams) -> Result<f64> {
    Ok(log_density_f(u, t, params)?.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_state(rng: &mut ChaCha8Rng, n_ambient: usize, amp: f64) -> FourierState {
        let coeffs = (0..2 * n_ambient + 1)
            .map(|_| c(rng.random_range(-amp..amp), rng.random_range(-amp..amp)))
            .collect();
        FourierState::from_coeffs(n_ambient, coeffs).unwrap()
    }

    #[test]
    fn constant_field_energies() {
        let params = ModelParams::new(5, 1.3, 3).unwrap();
        let one = FourierState::from_modes(3, &[(0, c(1.0, 0.0))]).unwrap();
        let b = truncated_energy(&one, &params).unwrap();
        assert!((b.mass - 1.0).abs() < 1e-15);
        assert!((b.kinetic + b.potential - 1.0 / 6.0).abs() < 1e-14);
        assert!((b.e_n - 7.0 / 6.0).abs() < 1e-14);
        assert!((b.e_n - b.mass - b.kinetic - b.potential).abs() < 1e-15);

        let zero = truncated_energy(&FourierState::zeros(3), &params).unwrap();
        assert_eq!((zero.mass, zero.kinetic, zero.potential, zero.e_n), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(zero.counterterm, counterterm(3, 1.3));
        assert_eq!(zero.renormalized, zero.counterterm);
    }

    #[test]
    fn counterterm_values() {
        assert_eq!(counterterm(0, 1.3), 0.0);
        assert!((counterterm(1, 1.5) - 2.0 / 2f64.powf(1.5)).abs() < 1e-15);
        assert!((counterterm(1, 1.5) - 0.707_106_8).abs() < 1e-7);
    }

    #[test]
    fn renormalized_dominates_mass() {
        let params = ModelParams::new(5, 1.3, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let u = random_state(&mut rng, 6, 1.0);
            assert!(renormalized_energy(&u, &params).unwrap() >= mass(&u));
        }
    }

    #[test]
    fn tuple_examples() {
        let pairing = FrequencyTuple::new(vec![3, 3, -2, 2, 1, -1]);
        assert_eq!(pairing.linear_sum(), 1 - 1 - 2 - 2 + 3 - 3 + 2);
        let pairing = FrequencyTuple::new(vec![3, 3, 2, 2, 1, 1]);
        assert_eq!(pairing.linear_sum(), 0);
        assert_eq!(pairing.omega(), 0);
        assert_eq!(pairing.psi(1.3), 0.0);

        let k = FrequencyTuple::new(vec![2, 1, 0, 1, 0, 0]);
        assert_eq!(k.linear_sum(), 0);
        assert_eq!(k.omega(), 2);
        assert!((k.psi(1.5) - 6.0).abs() < 1e-13);
        assert!((Psi1(&k, 1.5) - 3.0).abs() < 1e-13);
        assert_eq!(Psi0(&k, 1.5), 0.0);
        assert_eq!(k.sorted_magnitudes(), vec![2, 1, 1, 0, 0, 0]);
        assert_eq!(k.ordered(3), 1);

        // Swapping odd and even slot groups negates ψ and Ω.
        let swapped = FrequencyTuple::new(vec![1, 2, 1, 0, 0, 0]);
        assert_eq!(swapped.omega(), -2);
        assert!((swapped.psi(1.5) + 6.0).abs() < 1e-13);
        assert!((Psi1(&swapped, 1.5) - 3.0).abs() < 1e-13);
    }

    #[test]
    fn forms_vanish_on_constant() {
        let params = ModelParams::new(5, 1.3, 2).unwrap();
        let one = FourierState::from_modes(2, &[(0, c(1.0, 0.0))]).unwrap();
        let v = multilinear_forms(&one, &params, Symbol::Bracket).unwrap();
        assert_eq!(v.resonant, c(0.0, 0.0));
        assert_eq!(v.nonresonant, c(0.0, 0.0));
        assert_eq!(v.nonlinear, c(0.0, 0.0));
        let mut nf = NormalForm::new(&params).unwrap();
        let vals = nf.evaluate(&one);
        assert_eq!(vals.correction, 0.0);
        assert!((vals.modified_energy - 0.5).abs() < 1e-15);
        assert_eq!(vals.derivative, 0.0);
    }

    #[test]
    fn homogeneity_and_gauge() {
        let params = ModelParams::new(5, 1.3, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_state(&mut rng, 2, 1.0);
        let t1 = multilinear_t(&u, &params).unwrap();
        let t2 = multilinear_t(&u.scale(c(2.0, 0.0)), &params).unwrap();
        assert!((t2 - t1 * 64.0).norm() <= 1e-10 * t2.norm());

        let phase = Complex64::from_polar(1.0, 0.7);
        let r1 = energy_correction(&u, &params).unwrap();
        let r2 = energy_correction(&u.scale(phase), &params).unwrap();
        assert!((r1 - r2).abs() <= 1e-12 * r1.abs().max(1.0));
    }

    #[test]
    fn permutation_invariance_offdiagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let slots: Vec<FourierState> = (0..6).map(|_| random_state(&mut rng, 2, 1.0)).collect();
        let (m0, t0) = multilinear_offdiagonal(&slots, 5, 1.3, 2, Symbol::Bracket).unwrap();
        // Permute odd slots (0, 2, 4) and even slots (1, 3, 5) independently.
        for (odd, even) in [([2, 4, 0], [1, 3, 5]), ([0, 2, 4], [5, 1, 3]), ([4, 0, 2], [3, 5, 1])] {
            let mut perm = slots.clone();
            for i in 0..3 {
                perm[2 * i] = slots[odd[i]].clone();
                perm[2 * i + 1] = slots[even[i]].clone();
            }
            let (m, t) = multilinear_offdiagonal(&perm, 5, 1.3, 2, Symbol::Bracket).unwrap();
            assert!((m - m0).norm() <= 1e-12 * m0.norm().max(1.0));
            assert!((t - t0).norm() <= 1e-12 * t0.norm());
        }
        assert!(multilinear_offdiagonal(&slots, 5, 1.3, 3, Symbol::Bracket).is_err());
    }

    #[test]
    fn diagonal_matches_offdiagonal() {
        let params = ModelParams::new(5, 1.5, 2).unwrap();
        let u = random_state(&mut ChaCha8Rng::seed_from_u64(4), 2, 1.0);
        let d = multilinear_forms(&u, &params, Symbol::Bracket).unwrap();
        let slots = vec![u.clone(); 6];
        let (m, t) = multilinear_offdiagonal(&slots, 5, 1.5, 2, Symbol::Bracket).unwrap();
        assert!((d.resonant - m).norm() <= 1e-12 * m.norm().max(1.0));
        assert!((d.nonresonant - t).norm() <= 1e-12 * t.norm());
    }

    #[test]
    fn budget_guard() {
        assert!(check_enumeration_budget(5, 30).is_ok());
        assert!(matches!(
            check_enumeration_budget(9, 20),
            Err(Error::EnumerationBudget { .. })
        ));
    }

    #[test]
    fn correction_table_matches_enumeration() {
        for (p, n, s) in [(5, 3, 1.3), (5, 4, 1.5), (7, 2, 1.4)] {
            let params = ModelParams::new(p, s, n).unwrap();
            let table = CorrectionTable::new(&params).unwrap();
            let mut nf = NormalForm::new(&params).unwrap();
            for seed in 0..4 {
                let u = random_state(&mut ChaCha8Rng::seed_from_u64(seed), n, 1.0);
                let a = table.evaluate(&u);
                let b = nf.correction(&u);
                assert!((a - b).abs() <= 1e-11 * b.abs().max(1.0), "{p} {n}: {a} vs {b}");
                let e = table.modified_energy(&u);
                assert!((e - nf.modified_energy(&u)).abs() <= 1e-11 * e.abs().max(1.0));
            }
        }
    }
}
