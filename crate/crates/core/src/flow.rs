//! Time integration of the truncated equation
//! `i ∂_t u + ∂_x² u = π_N(|π_N u|^{p-1} π_N u)`.
//!
//! The reference integrator works in the interaction picture
//! `v_k(t) = e^{i k² t} c_k(t)`, which removes the linear stiffness, and steps
//! the low modes `|k| ≤ N` with the Dormand–Prince 8(5,3) pair. Modes above the
//! truncation only rotate, `c_k(t) = e^{-i k² t} c_k(0)`, and are set exactly.
//! Step control is per unit step: the embedded error estimate is held below
//! `tol · |h| · ‖v‖`, so the global error stays near `tol` per unit time.

use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::EnergyEvaluator;
use crate::spectral::{sobolev_norm, FourierState, ModelParams, Nonlinearity};
use crate::tableau;

/// Picard contraction window: the truncated Duhamel map contracts for
/// `δ ≤ PICARD_C1 · ‖u₀‖_{H^σ}^{1-p}` (half the smallest window observed by
/// [`calibrate_picard_window`] over 100 unit-norm `μ_s` draws at `p = 5`,
/// `s = 1.3`, `σ = 0.75`, `N = 4`, master seed 2024).
pub const PICARD_C1: f64 = 0.1378;

const SAFETY: f64 = 0.9;
const LOCAL_FRACTION: f64 = 1.0;
pub const DESIGN_ORDER: f64 = 8.0;

/// Integrator for `Φ^N_t` with reusable buffers.
#[derive(Clone, Debug)]
pub struct Evolver {
    params: ModelParams,
    nonlinearity: Nonlinearity,
    energy: EnergyEvaluator,
    stages: Vec<Vec<Complex64>>,
    work: Vec<Complex64>,
    low: Vec<Complex64>,
    out: Vec<Complex64>,
    phase: Vec<Complex64>,
    rhs_evaluations: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
}

impl Evolver {
    pub fn new(params: &ModelParams) -> Result<Self> {
        params.validate()?;
        let m = 2 * params.n + 1;
        Ok(Evolver {
            params: params.clone(),
            nonlinearity: Nonlinearity::new(params)?,
            energy: EnergyEvaluator::new(params)?,
            stages: vec![vec![Complex64::new(0.0, 0.0); m]; tableau::STAGES + 1],
            work: vec![Complex64::new(0.0, 0.0); m],
            low: vec![Complex64::new(0.0, 0.0); m],
            out: vec![Complex64::new(0.0, 0.0); m],
            phase: vec![Complex64::new(0.0, 0.0); params.n + 1],
            rhs_evaluations: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn rhs_evaluations(&self) -> u64 {
        self.rhs_evaluations
    }

    /// `dv/dτ = -i e^{iτk²} F(e^{-iτk²} v)` into `stages[stage]`, reading `self.work`.
    fn rhs_into(&mut self, tau: f64, stage: usize) {
        self.rhs_evaluations += 1;
        let n = self.params.n as i64;
        if self.params.linear_diagnostic {
            self.stages[stage].fill(Complex64::new(0.0, 0.0));
            return;
        }
        for k in 0..=n {
            self.phase[k as usize] = Complex64::from_polar(1.0, (k * k) as f64 * tau);
        }
        for (i, (dst, &v)) in self.low.iter_mut().zip(&self.work).enumerate() {
            let k = (i as i64 - n).unsigned_abs() as usize;
            *dst = v * self.phase[k].conj();
        }
        self.nonlinearity.apply(&self.low, &mut self.out);
        for (i, (dst, &g)) in self.stages[stage].iter_mut().zip(&self.out).enumerate() {
            let k = (i as i64 - n).unsigned_abs() as usize;
            *dst = Complex64::new(g.im, -g.re) * self.phase[k];
        }
    }

    /// One DOP853 step from `(tau, v)`; `stages[0]` must hold `f(tau, v)`.
    /// Leaves the new state in `self.work`, its derivative in `stages[12]`, and
    /// returns the combined fifth/third-order error estimate.
    fn step(&mut self, tau: f64, v: &[Complex64], h: f64) -> f64 {
        for s in 1..=tableau::STAGES {
            for i in 0..v.len() {
                let mut acc = Complex64::new(0.0, 0.0);
                for (j, a) in tableau::A[s][..s].iter().enumerate() {
                    if *a != 0.0 {
                        acc += self.stages[j][i] * a;
                    }
                }
                self.work[i] = v[i] + acc * h;
            }
            self.rhs_into(tau + tableau::C[s] * h, s);
        }
        let (mut e5, mut e3) = (0.0, 0.0);
        for i in 0..v.len() {
            let mut a5 = Complex64::new(0.0, 0.0);
            let mut a3 = Complex64::new(0.0, 0.0);
            for j in 0..=tableau::STAGES {
                a5 += self.stages[j][i] * tableau::E5[j];
                a3 += self.stages[j][i] * tableau::E3[j];
            }
            e5 += a5.norm_sqr();
            e3 += a3.norm_sqr();
        }
        if e5 == 0.0 && e3 == 0.0 {
            return 0.0;
        }
        h.abs() * e5 / (e5 + 0.01 * e3).sqrt()
    }

    /// Adaptive integration of the interaction-picture low modes from `t0` to `t1`.
    fn integrate_low(&mut self, v: &mut [Complex64], t0: f64, t1: f64, stats: &mut StepStats) -> Result<()> {
        let span = t1 - t0;
        if span == 0.0 || self.params.linear_diagnostic {
            return Ok(());
        }
        let dir = span.signum();
        let tol = self.params.tol * LOCAL_FRACTION;
        let exponent = -1.0 / (DESIGN_ORDER - 1.0);
        let mut h = self.params.dt.min(span.abs()) * dir;
        let mut tau = t0;
        self.work.copy_from_slice(v);
        self.rhs_into(tau, 0);
        let min_step = 1e-14 * t0.abs().max(t1.abs()).max(1.0);
        while (t1 - tau) * dir > 0.0 {
            if stats.accepted + stats.rejected >= self.params.max_steps {
                return Err(Error::StepBudget(self.params.max_steps));
            }
            if (tau + h - t1) * dir > 0.0 {
                h = t1 - tau;
            }
            let err = self.step(tau, v, h);
            let scale: f64 = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt().max(1e-300);
            let ratio = err / (tol * h.abs() * scale);
            if ratio <= 1.0 {
                tau = if (tau + h - t1) * dir >= 0.0 { t1 } else { tau + h };
                v.copy_from_slice(&self.work);
                self.stages.swap(0, tableau::STAGES);
                stats.accepted += 1;
                let grow = if ratio == 0.0 { 5.0 } else { (SAFETY * ratio.powf(exponent)).min(5.0) };
                h *= grow;
            } else {
                stats.rejected += 1;
                if ratio.is_finite() {
                    h *= (SAFETY * ratio.powf(exponent)).max(0.2);
                } else {
                    h *= 0.1;
                }
                // stages[0] still holds f(tau, v).
            }
            if h.abs() < min_step && (t1 - tau) * dir > min_step {
                return Err(Error::StepUnderflow { t: tau, h: h.abs() });
            }
        }
        Ok(())
    }


    fn to_interaction(&self, u: &FourierState, tau: f64) -> Vec<Complex64> {
        let n = self.params.n as i64;
        (-n..=n)
            .map(|k| u.get(k) * Complex64::from_polar(1.0, (k * k) as f64 * tau))
            .collect()
    }

    fn from_interaction(&self, u0: &FourierState, v: &[Complex64], tau: f64) -> FourierState {
        let n = self.params.n as i64;
        let ambient = u0.n_ambient().max(self.params.n);
        let mut out = FourierState::zeros(ambient);
        for k in -(ambient as i64)..=ambient as i64 {
            let rot = Complex64::from_polar(1.0, -((k * k) as f64) * tau);
            let c = if k.abs() <= n {
                v[(k + n) as usize] * rot
            } else {
                u0.get(k) * rot
            };
            out.set(k, c);
        }
        out
    }

    /// `Φ^N_t u₀` without the conservation check.
    pub fn evolve_unchecked(&mut self, u0: &FourierState, t: f64) -> Result<(FourierState, StepStats)> {
        let mut stats = StepStats::default();
        if t == 0.0 {
            return Ok((u0.clone(), stats));
        }
        if !t.is_finite() {
            return Err(Error::InvalidParams(format!("time must be finite, got {t}")));
        }
        let mut v = self.to_interaction(u0, 0.0);
        self.integrate_low(&mut v, 0.0, t, &mut stats)?;
        Ok((self.from_interaction(u0, &v, t), stats))
    }

    /// `Φ^N_t u₀`; fails if mass or `E_N` drift beyond `10 · tol`.
    pub fn evolve(&mut self, u0: &FourierState, t: f64) -> Result<FourierState> {
        let (u, _) = self.evolve_unchecked(u0, t)?;
        if t != 0.0 {
            self.check_drift(u0, &u)?;
        }
        Ok(u)
    }

    pub fn check_drift(&mut self, u0: &FourierState, u: &FourierState) -> Result<()> {
        let bound = 10.0 * self.params.tol;
        let (dm, de) = self.drifts(u0, u);
        if dm > bound {
            return Err(Error::AccuracyBudget {
                quantity: "mass",
                drift: dm,
                bound,
            });
        }
        if de > bound {
            return Err(Error::AccuracyBudget {
                quantity: "E_N",
                drift: de,
                bound,
            });
        }
        Ok(())
    }

    /// Relative mass drift and `|ΔE_N| / (1 + |E_N|)`.
    pub fn drifts(&mut self, u0: &FourierState, u: &FourierState) -> (f64, f64) {
        let b0 = self.energy.breakdown(u0);
        let b1 = self.energy.breakdown(u);
        let dm = if b0.mass > 0.0 {
            (b1.mass - b0.mass).abs() / b0.mass
        } else {
            b1.mass
        };
        // The linear flow conserves the kinetic part only.
        let (e0, e1) = if self.params.linear_diagnostic {
            (b0.kinetic, b1.kinetic)
        } else {
            (b0.e_n, b1.e_n)
        };
        let de = (e1 - e0).abs() / (1.0 + e0.abs());
        (dm, de)
    }

    /// States at each of `times` (same sign, increasing in magnitude), integrated as one trajectory.
    pub fn evolve_checkpoints(&mut self, u0: &FourierState, times: &[f64]) -> Result<Vec<FourierState>> {
        let mut out = Vec::with_capacity(times.len());
        let mut v = self.to_interaction(u0, 0.0);
        let mut tau: f64 = 0.0;
        let mut stats = StepStats::default();
        for &t in times {
            if t.abs() < tau.abs() || (t != 0.0 && tau != 0.0 && t.signum() != tau.signum()) {
                return Err(Error::InvalidParams("checkpoint times must move away from 0 monotonically".into()));
            }
            self.integrate_low(&mut v, tau, t, &mut stats)?;
            tau = t;
            let state = self.from_interaction(u0, &v, tau);
            if t != 0.0 {
                self.check_drift(u0, &state)?;
            }
            out.push(state);
        }
        Ok(out)
    }

    /// Fixed-step DOP853 (eighth-order weights), for convergence-order studies.
    pub fn evolve_fixed(&mut self, u0: &FourierState, t: f64, steps: usize) -> FourierState {
        let mut v = self.to_interaction(u0, 0.0);
        if !self.params.linear_diagnostic && steps > 0 {
            let h = t / steps as f64;
            self.work.copy_from_slice(&v);
            self.rhs_into(0.0, 0);
            for i in 0..steps {
                self.step(h * i as f64, &v, h);
                v.copy_from_slice(&self.work);
                self.stages.swap(0, tableau::STAGES);
            }
        }
        self.from_interaction(u0, &v, t)
    }
}

/// `Φ^N_t u₀` with the adaptive interaction-picture integrator.
pub fn evolve(u0: &FourierState, t: f64, params: &ModelParams) -> Result<FourierState> {
    Evolver::new(params)?.evolve(u0, t)
}

/// `‖Φ^N_{-t}(Φ^N_t u₀) - u₀‖_{H^σ}`.
pub fn roundtrip_defect(u0: &FourierState, t: f64, params: &ModelParams) -> Result<f64> {
    let mut ev = Evolver::new(params)?;
    let forward = ev.evolve(u0, t)?;
    let back = ev.evolve(&forward, -t)?;
    let back = back.with_ambient(u0.n_ambient());
    Ok(sobolev_norm(&back.sub(u0)?, params.sigma))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<FourierState>,
    pub mass: Vec<f64>,
    #[serde(rename = "E_N")]
    pub e_n: Vec<f64>,
    pub renormalized: Vec<f64>,
    pub sobolev_sigma: Vec<f64>,
    pub drift_m: f64,
    pub drift_en: f64,
    /// Absolute drift of `𝓔_N` relative to `1 + |𝓔_N(u₀)|`.
    pub drift_renormalized: f64,
}

impl TrajectoryRecord {
    /// CSV sidecar: `time,mass,E_N,H_sigma_norm`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "time,mass,E_N,H_sigma_norm")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{:.17e},{:.17e},{:.17e},{:.17e}",
                self.times[i], self.mass[i], self.e_n[i], self.sobolev_sigma[i]
            )?;
        }
        Ok(())
    }

    /// Checkpoint states concatenated in the binary state format.
    pub fn write_states<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.states {
            s.write_binary(&mut w)?;
        }
        Ok(())
    }
}

/// Integrates over `[0, T]` and records uniform checkpoints with conservation drifts.
pub fn conservation_report(
    u0: &FourierState,
    t_final: f64,
    checkpoints: usize,
    params: &ModelParams,
) -> Result<TrajectoryRecord> {
    if checkpoints < 2 {
        return Err(Error::InvalidParams("need at least 2 checkpoints".into()));
    }
    let times: Vec<f64> = (0..checkpoints)
        .map(|i| t_final * i as f64 / (checkpoints - 1) as f64)
        .collect();
    let mut ev = Evolver::new(params)?;
    let states = ev.evolve_checkpoints(u0, &times)?;
    let mut energy = EnergyEvaluator::new(params)?;
    let breakdowns: Vec<_> = states.iter().map(|s| energy.breakdown(s)).collect();
    let mass: Vec<f64> = breakdowns.iter().map(|b| b.mass).collect();
    let e_n: Vec<f64> = breakdowns.iter().map(|b| b.e_n).collect();
    let renormalized: Vec<f64> = breakdowns.iter().map(|b| b.renormalized).collect();
    let sobolev_sigma = states.iter().map(|s| sobolev_norm(s, params.sigma)).collect();
    let rel = |xs: &[f64], denom: f64| xs.iter().map(|x| (x - xs[0]).abs() / denom).fold(0.0, f64::max);
    let drift_m = rel(&mass, mass[0].max(f64::MIN_POSITIVE));
    let drift_en = rel(&e_n, e_n[0].abs().max(f64::MIN_POSITIVE));
    let drift_renormalized = rel(&renormalized, 1.0 + renormalized[0].abs());
    Ok(TrajectoryRecord {
        times,
        states,
        mass,
        e_n,
        renormalized,
        sobolev_sigma,
        drift_m,
        drift_en,
        drift_renormalized,
    })
}

/// Gauss–Legendre nodes and weights on `[0, 1]`, 8 points.
fn gauss_legendre_unit() -> ([f64; 8], [f64; 8]) {
    const X: [f64; 4] = [
        0.183_434_642_495_649_8,
        0.525_532_409_916_329,
        0.796_666_477_413_626_7,
        0.960_289_856_497_536_3,
    ];
    const W: [f64; 4] = [
        0.362_683_783_378_362,
        0.313_706_645_877_887_3,
        0.222_381_034_453_374_5,
        0.101_228_536_290_376_3,
    ];
    let mut nodes = [0.0; 8];
    let mut weights = [0.0; 8];
    for i in 0..4 {
        nodes[3 - i] = 0.5 * (1.0 - X[i]);
        nodes[4 + i] = 0.5 * (1.0 + X[i]);
        weights[3 - i] = 0.5 * W[i];
        weights[4 + i] = 0.5 * W[i];
    }
    (nodes, weights)
}

fn lagrange(nodes: &[f64; 8], l: usize, x: f64) -> f64 {
    nodes
        .iter()
        .enumerate()
        .filter(|(m, _)| *m != l)
        .map(|(_, &xm)| (x - xm) / (nodes[l] - xm))
        .product()
}

/// `S[i][l] = ∫_0^{x_i} L_l(x) dx` for the Gauss–Legendre Lagrange basis.
fn partial_integration_matrix(nodes: &[f64; 8], weights: &[f64; 8]) -> [[f64; 8]; 8] {
    let mut s = [[0.0; 8]; 8];
    for i in 0..8 {
        for l in 0..8 {
            s[i][l] = nodes[i]
                * (0..8)
                    .map(|q| weights[q] * lagrange(nodes, l, nodes[i] * nodes[q]))
                    .sum::<f64>();
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PicardReport {
    pub state: FourierState,
    /// Successive sup-in-time `H^σ` distances between Picard iterates.
    pub distances: Vec<f64>,
    /// Geometric-mean ratio of successive distances.
    pub contraction_ratio: f64,
    pub subintervals: usize,
    pub refinement_defect: f64,
}

struct PicardSolver {
    params: ModelParams,
    nonlinearity: Nonlinearity,
    nodes: [f64; 8],
    weights: [f64; 8],
    partial: [[f64; 8]; 8],
}

impl PicardSolver {
    fn rhs(&mut self, tau: f64, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.params.n as i64;
        if self.params.linear_diagnostic {
            return vec![Complex64::new(0.0, 0.0); v.len()];
        }
        let low: Vec<Complex64> = v
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let k = i as i64 - n;
                z * Complex64::from_polar(1.0, -((k * k) as f64) * tau)
            })
            .collect();
        let mut g = vec![Complex64::new(0.0, 0.0); v.len()];
        self.nonlinearity.apply(&low, &mut g);
        g.iter()
            .enumerate()
            .map(|(i, z)| {
                let k = i as i64 - n;
                Complex64::new(z.im, -z.re) * Complex64::from_polar(1.0, (k * k) as f64 * tau)
            })
            .collect()
    }

    fn sigma_dist(&self, a: &[Complex64], b: &[Complex64]) -> f64 {
        let n = self.params.n as i64;
        a.iter()
            .zip(b)
            .enumerate()
            .map(|(i, (x, y))| {
                let k = i as i64 - n;
                (1.0 + (k * k) as f64).powf(self.params.sigma) * (x - y).norm_sqr()
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Picard iteration of the Duhamel map on `m` subintervals of `[0, δ]`.
    fn solve(&mut self, v0: &[Complex64], delta: f64, m: usize, max_iter: usize, scale: f64)
        -> Result<(Vec<Complex64>, Vec<f64>)> {
        let h = delta / m as f64;
        let len = v0.len();
        let mut iterate: Vec<Vec<Complex64>> = vec![v0.to_vec(); m * 8];
        let mut end = v0.to_vec();
        let mut distances = Vec::new();
        for iteration in 0..max_iter {
            let f: Vec<Vec<Complex64>> = (0..m * 8)
                .map(|idx| {
                    let tau = h * ((idx / 8) as f64 + self.nodes[idx % 8]);
                    self.rhs(tau, &iterate[idx])
                })
                .collect();
            let mut next = vec![vec![Complex64::new(0.0, 0.0); len]; m * 8];
            let mut start = v0.to_vec();
            for j in 0..m {
                for i in 0..8 {
                    for c in 0..len {
                        let mut acc = start[c];
                        for l in 0..8 {
                            acc += f[j * 8 + l][c] * (h * self.partial[i][l]);
                        }
                        next[j * 8 + i][c] = acc;
                    }
                }
                for c in 0..len {
                    for l in 0..8 {
                        start[c] += f[j * 8 + l][c] * (h * self.weights[l]);
                    }
                }
            }
            let mut dist = self.sigma_dist(&start, &end);
            for (a, b) in next.iter().zip(&iterate) {
                dist = dist.max(self.sigma_dist(a, b));
            }
            distances.push(dist);
            iterate = next;
            end = start;
            if dist < 1e-12 * scale {
                return Ok((end, distances));
            }
            let k = distances.len();
            if k >= 4 && distances[k - 1] > distances[k - 2] && distances[k - 2] > distances[k - 3] {
                return Err(Error::NonContraction {
                    iteration,
                    ratio: distances[k - 1] / distances[k - 2],
                });
            }
            if !dist.is_finite() {
                return Err(Error::NonContraction {
                    iteration,
                    ratio: f64::INFINITY,
                });
            }
        }
        let k = distances.len();
        let ratio = if k >= 2 { distances[k - 1] / distances[k - 2] } else { f64::NAN };
        Err(Error::NonContraction {
            iteration: max_iter,
            ratio,
        })
    }
}

/// Picard iteration of the truncated Duhamel map on `[0, δ]` with diagnostics.
///
/// Each subinterval carries an 8-point Gauss–Legendre rule; the subinterval
/// count doubles until two consecutive levels agree at the endpoint.
pub fn picard_local_report(
    u0: &FourierState,
    delta: f64,
    params: &ModelParams,
    max_iter: usize,
) -> Result<PicardReport> {
    params.validate()?;
    let norm = sobolev_norm(u0, params.sigma);
    let window = PICARD_C1 * norm.powi(1 - params.p as i32);
    if delta.abs() > window * (1.0 + 1e-12) {
        return Err(Error::InvalidParams(format!(
            "delta = {delta} exceeds the contraction window {window:e}"
        )));
    }
    let (nodes, weights) = gauss_legendre_unit();
    let mut solver = PicardSolver {
        params: params.clone(),
        nonlinearity: Nonlinearity::new(params)?,
        partial: partial_integration_matrix(&nodes, &weights),
        nodes,
        weights,
    };
    let n = params.n as i64;
    let v0: Vec<Complex64> = (-n..=n).map(|k| u0.get(k)).collect();
    let scale = norm.max(1.0);
    let mut m = 1;
    let (mut coarse, mut distances) = solver.solve(&v0, delta, m, max_iter, scale)?;
    let mut defect = f64::INFINITY;
    for _ in 0..10 {
        let (fine, d) = solver.solve(&v0, delta, 2 * m, max_iter, scale)?;
        defect = solver.sigma_dist(&fine, &coarse);
        coarse = fine;
        distances = d;
        m *= 2;
        if defect <= 1e-12 * scale {
            break;
        }
    }
    if defect > 1e-12 * scale {
        return Err(Error::QuadratureRefinement(defect));
    }
    let ambient = u0.n_ambient().max(params.n);
    let mut state = FourierState::zeros(ambient);
    for k in -(ambient as i64)..=ambient as i64 {
        let rot = Complex64::from_polar(1.0, -((k * k) as f64) * delta);
        let c = if k.abs() <= n { coarse[(k + n) as usize] } else { u0.get(k) };
        state.set(k, c * rot);
    }
    let positive: Vec<f64> = distances.iter().copied().filter(|d| *d > 0.0).collect();
    let contraction_ratio = if positive.len() >= 3 {
        // Skip the first distance, which measures the distance from the constant initial guess.
        let first = positive[1];
        let last = positive[positive.len() - 1];
        (last / first).powf(1.0 / (positive.len() - 2) as f64)
    } else {
        0.0
    };
    Ok(PicardReport {
        state,
        distances,
        contraction_ratio,
        subintervals: m,
        refinement_defect: defect,
    })
}

pub fn picard_local(u0: &FourierState, delta: f64, params: &ModelParams, max_iter: usize) -> Result<FourierState> {
    Ok(picard_local_report(u0, delta, params, max_iter)?.state)
}

/// `Φ^N_t u₀` by composing Picard steps, each of half the contraction window.
pub fn picard_evolve(u0: &FourierState, t: f64, params: &ModelParams) -> Result<FourierState> {
    let mut u = u0.clone();
    let mut elapsed = 0.0;
    let dir = t.signum();
    while elapsed < t.abs() {
        let norm = sobolev_norm(&u, params.sigma).max(1e-300);
        let window = 0.5 * PICARD_C1 * norm.powi(1 - params.p as i32);
        let step = window.min(t.abs() - elapsed);
        u = picard_local(&u, dir * step, params, 200)?;
        elapsed += step;
    }
    Ok(u)
}

/// Largest `δ ‖u₀‖^{p-1}` (on a doubling grid refined by bisection) for which the
/// Picard iteration contracts, minimized over `trials` unit-norm `μ_s` draws, then halved.
pub fn calibrate_picard_window(params: &ModelParams, trials: usize, seed: u64) -> Result<f64> {
    let spec = crate::sampler::EnsembleSpec::new(seed, trials, params.s, params.n)?;
    let (nodes, weights) = gauss_legendre_unit();
    let mut solver = PicardSolver {
        params: params.clone(),
        nonlinearity: Nonlinearity::new(params)?,
        partial: partial_integration_matrix(&nodes, &weights),
        nodes,
        weights,
    };
    let n = params.n as i64;
    let mut worst = f64::INFINITY;
    for i in 0..trials {
        let u = crate::sampler::sample_mu_s(&spec, i)?;
        let u = u.scale(Complex64::new(1.0 / sobolev_norm(&u, params.sigma), 0.0));
        let v0: Vec<Complex64> = (-n..=n).map(|k| u.get(k)).collect();
        let contracts = |solver: &mut PicardSolver, d: f64| solver.solve(&v0, d, 4, 400, 1.0).is_ok();
        let (mut lo, mut hi) = (0.0, 0.01);
        while contracts(&mut solver, hi) && hi < 100.0 {
            lo = hi;
            hi *= 2.0;
        }
        for _ in 0..20 {
            let mid = 0.5 * (lo + hi);
            if contracts(&mut solver, mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        worst = worst.min(lo);
    }
    Ok(0.5 * worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{sample_mu_s, EnsembleSpec};

    fn unit_sample(params: &ModelParams, seed: u64, index: usize) -> FourierState {
        let spec = EnsembleSpec::new(seed, index + 1, params.s, params.n).unwrap();
        let u = sample_mu_s(&spec, index).unwrap();
        u.scale(Complex64::new(1.0 / sobolev_norm(&u, params.sigma), 0.0))
    }

    #[test]
    fn zero_time_is_identity() {
        let params = ModelParams::new(5, 1.3, 4).unwrap();
        let u = unit_sample(&params, 1, 0);
        assert_eq!(evolve(&u, 0.0, &params).unwrap(), u);
    }

    #[test]
    fn high_modes_are_free() {
        let params = ModelParams::new(5, 1.3, 4).unwrap();
        let mut u = unit_sample(&params, 2, 0).with_ambient(6);
        u.set(5, Complex64::new(1.0, 0.0));
        u.set(-6, Complex64::new(0.3, -0.2));
        let t = 0.7;
        let out = evolve(&u, t, &params).unwrap();
        let expected = Complex64::from_polar(1.0, -25.0 * t);
        assert!((out.get(5) - expected).norm() < 1e-12);
        assert!((out.get(-6).norm() - u.get(-6).norm()).abs() < 1e-15);
    }

    #[test]
    fn conservation_at_tight_tolerance() {
        let params = ModelParams::new(5, 1.3, 8).unwrap().with_tol(1e-10);
        let u = sample_mu_s(&EnsembleSpec::new(3, 1, 1.3, 8).unwrap(), 0).unwrap();
        let rec = conservation_report(&u, 1.0, 5, &params).unwrap();
        assert!(rec.drift_m <= 1e-9, "mass drift {}", rec.drift_m);
        assert!(rec.drift_en <= 1e-8, "energy drift {}", rec.drift_en);
        let mut csv = Vec::new();
        rec.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 6);
    }

    #[test]
    fn time_reversal_and_gauge() {
        let params = ModelParams::new(5, 1.3, 4).unwrap();
        let u = unit_sample(&params, 4, 0);
        let a = evolve(&u, 0.4, &params).unwrap().conj_field();
        let b = evolve(&u.conj_field(), -0.4, &params).unwrap();
        assert!(sobolev_norm(&a.sub(&b).unwrap(), params.sigma) < 1e-8);

        let phase = Complex64::from_polar(1.0, 1.1);
        let a = evolve(&u.scale(phase), 0.4, &params).unwrap();
        let b = evolve(&u, 0.4, &params).unwrap().scale(phase);
        assert!(sobolev_norm(&a.sub(&b).unwrap(), params.sigma) < 1e-9);
    }

    #[test]
    fn roundtrip_is_small() {
        let params = ModelParams::new(5, 1.3, 4).unwrap().with_tol(1e-10);
        let u = unit_sample(&params, 5, 0);
        assert_eq!(roundtrip_defect(&u, 0.0, &params).unwrap(), 0.0);
        assert!(roundtrip_defect(&u, 1.0, &params).unwrap() <= 1e-8);
    }

    #[test]
    fn linear_mode_is_unitary() {
        let params = ModelParams::new(5, 1.3, 4).unwrap().linear();
        let u = unit_sample(&params, 6, 0);
        let out = evolve(&u, 2.3, &params).unwrap();
        for (n, c) in out.modes() {
            let expected = u.get(n) * Complex64::from_polar(1.0, -((n * n) as f64) * 2.3);
            assert!((c - expected).norm() < 1e-13);
        }
    }

    #[test]
    fn picard_zero_data() {
        let params = ModelParams::new(5, 1.3, 4).unwrap();
        let zero = FourierState::zeros(4);
        assert_eq!(picard_local(&zero, 0.5, &params, 50).unwrap(), zero);
    }

    #[test]
    fn picard_contracts_and_matches_adaptive() {
        let params = ModelParams::new(5, 1.3, 4).unwrap().with_tol(1e-12);
        let u = unit_sample(&params, 7, 0);
        let delta = PICARD_C1 / 2.0;
        let report = picard_local_report(&u, delta, &params, 200).unwrap();
        assert!(report.contraction_ratio < 1.0, "{:?}", report.distances);
        let adaptive = evolve(&u, delta, &params).unwrap();
        let diff = sobolev_norm(&report.state.sub(&adaptive).unwrap(), params.sigma);
        assert!(diff < 1e-8, "{diff}");
        assert!(picard_local(&u, 10.0 * PICARD_C1, &params, 50).is_err());
    }

    #[test]
    fn checkpoints_agree_with_single_calls() {
        let params = ModelParams::new(5, 1.3, 4).unwrap().with_tol(1e-10);
        let u = unit_sample(&params, 8, 0);
        let mut ev = Evolver::new(&params).unwrap();
        let states = ev.evolve_checkpoints(&u, &[0.1, 0.3]).unwrap();
        let direct = ev.evolve(&u, 0.3).unwrap();
        assert!(sobolev_norm(&states[1].sub(&direct).unwrap(), params.sigma) < 1e-9);
        assert!(ev.evolve_checkpoints(&u, &[0.3, 0.1]).is_err());
    }

    #[test]
    fn step_budget_is_enforced() {
        let mut params = ModelParams::new(5, 1.3, 4).unwrap().with_tol(1e-12);
        params.max_steps = 3;
        let u = unit_sample(&params, 9, 0);
        assert!(matches!(evolve(&u, 1.0, &params), Err(Error::StepBudget(3))));
    }
}
