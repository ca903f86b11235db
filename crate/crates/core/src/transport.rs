//! Monte Carlo experiments on the truncated flow: transport identities for the
//! plain, cutoff and weighted Gaussian measures, flow tail probabilities,
//! Sobolev-norm growth, convergence of the renormalized energies and moments
//! of the quadratic Gaussian chaos.
//!
//! Every experiment maps sample indices to per-sample records in parallel and
//! reduces them in index order, so reports do not depend on the thread count.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Evolver;
use crate::functionals::{log_density_g_from, mass, CorrectionTable, EnergyEvaluator};
use crate::sampler::{ensemble_mean, sample_gaussians, sample_mu_s, smooth_cutoff, CutoffSpec, EnsembleManifest, EnsembleSpec};
use crate::spectral::{japanese_bracket, project, sobolev_norm, sobolev_norm_sq, FourierState, ModelParams};
use crate::stats::{linear_fit, pairwise_sum, quantile};

/// Checkpoints per unit time for trajectory suprema.
pub const CHECKPOINTS_PER_UNIT: f64 = 64.0;
/// Tail points with fewer hits than this are censored.
pub const MIN_TAIL_HITS: usize = 10;
/// Largest admissible log-log slope of the chaos moment ratios.
pub const CHAOS_SLOPE_BOUND: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Observable {
    /// `exp(-‖π_N u‖²_{H^σ})`
    ExpSobolev,
    /// `cos(Re c_1)`
    CosFirstMode,
    /// `min(M(π_N u), 10)`
    CappedMass,
}

impl Observable {
    pub const ALL: [Observable; 3] = [Observable::ExpSobolev, Observable::CosFirstMode, Observable::CappedMass];

    pub fn id(self) -> &'static str {
        match self {
            Observable::ExpSobolev => "exp_neg_hsigma_sq",
            Observable::CosFirstMode => "cos_re_c1",
            Observable::CappedMass => "capped_mass",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        Observable::ALL
            .into_iter()
            .find(|o| o.id() == id)
            .ok_or_else(|| Error::InvalidParams(format!("unknown observable '{id}'")))
    }

    pub fn evaluate(self, u: &FourierState, params: &ModelParams) -> f64 {
        match self {
            Observable::ExpSobolev => (-sobolev_norm_sq(&project(u, params.n), params.sigma)).exp(),
            Observable::CosFirstMode => u.get(1).re.cos(),
            Observable::CappedMass => mass(&project(u, params.n)).min(10.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportMode {
    /// Weight 1, density `g`.
    Plain,
    /// Weight `χ_R∘𝓔_N`, density `g`.
    Cutoff,
    /// Weight `χ_R∘𝓔_N · e^{-R_{s,N}}`, density `f`.
    Weighted,
}

impl TransportMode {
    pub const ALL: [TransportMode; 3] = [TransportMode::Plain, TransportMode::Cutoff, TransportMode::Weighted];

    pub fn id(self) -> &'static str {
        match self {
            TransportMode::Plain => "plain",
            TransportMode::Cutoff => "cutoff",
            TransportMode::Weighted => "weighted",
        }
    }

    pub fn from_id(id: &str) -> Result<Self> {
        TransportMode::ALL
            .into_iter()
            .find(|m| m.id() == id)
            .ok_or_else(|| Error::InvalidParams(format!("unknown transport mode '{id}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportReport {
    pub observable_id: String,
    pub mode: TransportMode,
    pub t: f64,
    pub lhs_mean: f64,
    pub lhs_se: f64,
    pub rhs_mean: f64,
    pub rhs_se: f64,
    pub z_score: f64,
    pub n_samples: usize,
    pub params: ModelParams,
    pub cutoff: Option<CutoffSpec>,
}

/// `|lhs - rhs| / √(lhs_se² + rhs_se²)`, zero when the two estimates coincide.
pub fn z_score(lhs: f64, lhs_se: f64, rhs: f64, rhs_se: f64) -> f64 {
    let diff = (lhs - rhs).abs();
    if diff == 0.0 {
        return 0.0;
    }
    let se = lhs_se.hypot(rhs_se);
    if se == 0.0 {
        f64::INFINITY
    } else {
        diff / se
    }
}

/// Per-sample values at one time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportRow {
    pub t: f64,
    pub log_g: f64,
    pub log_f: Option<f64>,
    pub psi_u: Vec<f64>,
    pub psi_flow: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportSample {
    pub index: usize,
    pub renormalized_energy: f64,
    pub cutoff_weight: f64,
    pub correction: Option<f64>,
    pub rows: Vec<TransportRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportBattery {
    pub ensemble: EnsembleManifest,
    pub params: ModelParams,
    pub cutoff: Option<CutoffSpec>,
    pub times: Vec<f64>,
    pub observables: Vec<String>,
    pub reports: Vec<TransportReport>,
    pub max_z: f64,
    #[serde(skip)]
    pub samples: Vec<TransportSample>,
}

impl TransportBattery {
    /// One line per (sample, time).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "index,t,renormalized_energy,cutoff_weight,correction,log_g,log_f")?;
        for o in &self.observables {
            write!(w, ",psi_u_{o}")?;
        }
        for o in &self.observables {
            write!(w, ",psi_flow_{o}")?;
        }
        writeln!(w)?;
        for s in &self.samples {
            for r in &s.rows {
                write!(
                    w,
                    "{},{},{},{},{},{},{}",
                    s.index,
                    r.t,
                    s.renormalized_energy,
                    s.cutoff_weight,
                    opt(s.correction),
                    r.log_g,
                    opt(r.log_f)
                )?;
                for v in r.psi_u.iter().chain(&r.psi_flow) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn check_ensemble(params: &ModelParams, spec: &EnsembleSpec) -> Result<()> {
    params.validate()?;
    if spec.n_ambient != params.n {
        return Err(Error::InvalidParams(format!(
            "transport experiments need N_ambient = N ({} vs {})",
            spec.n_ambient, params.n
        )));
    }
    if spec.s != params.s {
        return Err(Error::InvalidParams(format!(
            "ensemble regularity {} differs from model regularity {}",
            spec.s, params.s
        )));
    }
    Ok(())
}

fn check_cutoff(params: &ModelParams, cut: &CutoffSpec) -> Result<()> {
    if cut.n != params.n || cut.s != params.s {
        return Err(Error::InvalidParams(
            "cutoff truncation and regularity must match the model parameters".into(),
        ));
    }
    Ok(())
}

/// Sorted distinct nonzero magnitudes of `times`.
fn magnitudes(times: &[f64]) -> Result<Vec<f64>> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidParams("times must be finite".into()));
    }
    let mut m: Vec<f64> = times.iter().map(|t| t.abs()).filter(|t| *t > 0.0).collect();
    m.sort_by(f64::total_cmp);
    m.dedup();
    Ok(m)
}

/// Twice the ensemble median of `𝓔_N`.
pub fn default_cutoff_radius(params: &ModelParams, spec: &EnsembleSpec) -> Result<f64> {
    let energies: Vec<f64> = (0..spec.n_samples)
        .into_par_iter()
        .map_init(
            || EnergyEvaluator::new(params),
            |ev, i| {
                let ev = ev.as_mut().map_err(|e| Error::InvalidParams(e.to_string()))?;
                Ok(ev.breakdown(&sample_mu_s(spec, i)?).renormalized)
            },
        )
        .collect::<Result<_>>()?;
    Ok(2.0 * quantile(&energies, 0.5))
}

struct TransportWorker {
    evolver: Evolver,
    energy: EnergyEvaluator,
}

#[allow(clippy::too_many_arguments)]
fn transport_sample(
    worker: &mut TransportWorker,
    index: usize,
    params: &ModelParams,
    spec: &EnsembleSpec,
    times: &[f64],
    mags: &[f64],
    observables: &[Observable],
    cut: Option<&CutoffSpec>,
    table: Option<&CorrectionTable>,
) -> Result<TransportSample> {
    let u = sample_mu_s(spec, index)?;
    let neg: Vec<f64> = mags.iter().map(|t| -t).collect();
    let fwd = worker.evolver.evolve_checkpoints(&u, mags)?;
    let bwd = worker.evolver.evolve_checkpoints(&u, &neg)?;
    let energy = worker.energy.breakdown(&u).renormalized;
    let cutoff_weight = cut.map_or(1.0, |c| smooth_cutoff(energy / c.r));
    let e_u = table.map(|tb| tb.modified_energy(&u));
    let psi_u: Vec<f64> = observables.iter().map(|o| o.evaluate(&u, params)).collect();
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        let (phi, back) = if t == 0.0 {
            (&u, &u)
        } else {
            let k = mags.iter().position(|m| *m == t.abs()).expect("magnitude listed");
            if t > 0.0 {
                (&fwd[k], &bwd[k])
            } else {
                (&bwd[k], &fwd[k])
            }
        };
        let log_f = match (table, e_u) {
            (Some(tb), Some(e)) => Some(-(tb.modified_energy(back) - e)),
            _ => None,
        };
        rows.push(TransportRow {
            t,
            log_g: log_density_g_from(&u, back, params),
            log_f,
            psi_u: psi_u.clone(),
            psi_flow: observables.iter().map(|o| o.evaluate(phi, params)).collect(),
        });
    }
    Ok(TransportSample {
        index,
        renormalized_energy: energy,
        cutoff_weight,
        correction: table.map(|tb| tb.evaluate(&u)),
        rows,
    })
}

fn finite_mean(values: &[f64], what: &str) -> Result<(f64, f64)> {
    let (m, se) = ensemble_mean(values, None)?;
    if !(m.is_finite() && se.is_finite()) {
        return Err(Error::StatisticOverflow(what.to_string()));
    }
    Ok((m, se))
}

/// Transport identities for every (mode, time, observable) from one shared set of trajectories.
///
/// `cut` is required by the cutoff and weighted modes. Reports are ordered by
/// mode, then time, then observable.
pub fn transport_battery(
    params: &ModelParams,
    times: &[f64],
    observables: &[Observable],
    modes: &[TransportMode],
    spec: &EnsembleSpec,
    cut: Option<&CutoffSpec>,
) -> Result<TransportBattery> {
    check_ensemble(params, spec)?;
    if observables.is_empty() || modes.is_empty() || times.is_empty() {
        return Err(Error::InvalidParams("empty observable, mode or time list".into()));
    }
    let needs_cut = modes.iter().any(|m| *m != TransportMode::Plain);
    match cut {
        Some(c) => check_cutoff(params, c)?,
        None if needs_cut => {
            return Err(Error::InvalidParams("cutoff and weighted modes need a cutoff".into()))
        }
        None => {}
    }
    let mags = magnitudes(times)?;
    let table = if modes.contains(&TransportMode::Weighted) {
        Some(CorrectionTable::new(params)?)
    } else {
        None
    };
    let samples: Vec<TransportSample> = (0..spec.n_samples)
        .into_par_iter()
        .map_init(
            || -> Result<TransportWorker> {
                Ok(TransportWorker {
                    evolver: Evolver::new(params)?,
                    energy: EnergyEvaluator::new(params)?,
                })
            },
            |worker, i| {
                let worker = worker.as_mut().map_err(|e| Error::InvalidParams(e.to_string()))?;
                transport_sample(worker, i, params, spec, times, &mags, observables, cut, table.as_ref())
            },
        )
        .collect::<Result<_>>()?;

    let mut reports = Vec::new();
    for &mode in modes {
        let weights: Vec<f64> = samples
            .iter()
            .map(|s| match mode {
                TransportMode::Plain => 1.0,
                TransportMode::Cutoff => s.cutoff_weight,
                TransportMode::Weighted if s.cutoff_weight == 0.0 => 0.0,
                TransportMode::Weighted => s.cutoff_weight * (-s.correction.unwrap_or(0.0)).exp(),
            })
            .collect();
        for (ti, &t) in times.iter().enumerate() {
            let density: Vec<f64> = samples
                .iter()
                .map(|s| {
                    let r = &s.rows[ti];
                    match mode {
                        TransportMode::Weighted => r.log_f.unwrap_or(0.0).exp(),
                        _ => r.log_g.exp(),
                    }
                })
                .collect();
            for (oi, obs) in observables.iter().enumerate() {
                let lhs: Vec<f64> = samples
                    .iter()
                    .zip(&weights)
                    .map(|(s, w)| w * s.rows[ti].psi_flow[oi])
                    .collect();
                let rhs: Vec<f64> = samples
                    .iter()
                    .zip(&weights)
                    .zip(&density)
                    .map(|((s, w), d)| if *w == 0.0 { 0.0 } else { w * s.rows[ti].psi_u[oi] * d })
                    .collect();
                let what = format!("{} {} t={t}", mode.id(), obs.id());
                let (lhs_mean, lhs_se) = finite_mean(&lhs, &what)?;
                let (rhs_mean, rhs_se) = finite_mean(&rhs, &what)?;
                reports.push(TransportReport {
                    observable_id: obs.id().to_string(),
                    mode,
                    t,
                    lhs_mean,
                    lhs_se,
                    rhs_mean,
                    rhs_se,
                    z_score: z_score(lhs_mean, lhs_se, rhs_mean, rhs_se),
                    n_samples: spec.n_samples,
                    params: params.clone(),
                    cutoff: if mode == TransportMode::Plain { None } else { cut.cloned() },
                });
            }
        }
    }
    let max_z = reports.iter().map(|r| r.z_score).fold(0.0, f64::max);
    Ok(TransportBattery {
        ensemble: spec.manifest(),
        params: params.clone(),
        cutoff: cut.cloned(),
        times: times.to_vec(),
        observables: observables.iter().map(|o| o.id().to_string()).collect(),
        reports,
        max_z,
        samples,
    })
}

/// Transport identity at one time in one mode: plain without `cut`, cutoff with
/// `cut`, weighted with `cut` and `weighted`.
pub fn transport_test(
    params: &ModelParams,
    t: f64,
    observables: &[Observable],
    spec: &EnsembleSpec,
    cut: Option<&CutoffSpec>,
    weighted: bool,
) -> Result<Vec<TransportReport>> {
    let mode = match (cut, weighted) {
        (None, false) => TransportMode::Plain,
        (Some(_), false) => TransportMode::Cutoff,
        (Some(_), true) => TransportMode::Weighted,
        (None, true) => return Err(Error::InvalidParams("the weighted mode needs a cutoff".into())),
    };
    Ok(transport_battery(params, &[t], observables, &[mode], spec, cut)?.reports)
}

/// Uniform grid `T/n, 2T/n, ..., T` with spacing at most `1/64`.
pub fn checkpoint_grid(t_final: f64) -> Vec<f64> {
    let n = ((CHECKPOINTS_PER_UNIT * t_final.abs()).ceil() as usize).max(1);
    (1..=n).map(|j| t_final * j as f64 / n as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailSample {
    pub index: usize,
    pub sup_norm: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    #[serde(rename = "M")]
    pub m: f64,
    pub probability: f64,
    pub se: f64,
    pub log_probability: Option<f64>,
    pub log_se: Option<f64>,
    pub hits: usize,
    pub censored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailReport {
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(rename = "M_grid")]
    pub m_grid: Vec<f64>,
    pub points: Vec<TailPoint>,
    /// Fit of `log P` against `M²` over uncensored points.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    pub fit_points: usize,
    pub n_samples: usize,
    pub params: ModelParams,
    pub cutoff: Option<CutoffSpec>,
    pub ensemble: EnsembleManifest,
    #[serde(skip)]
    pub samples: Vec<TailSample>,
}

impl TailReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "index,sup_norm,weight")?;
        for s in &self.samples {
            writeln!(w, "{},{},{}", s.index, s.sup_norm, s.weight)?;
        }
        Ok(())
    }
}

/// Per-sample `sup_{|t| ≤ T} ‖Φ^N_t u‖_{H^σ}` on the checkpoint grid, with cutoff weights.
pub fn tail_samples(
    params: &ModelParams,
    t_final: f64,
    spec: &EnsembleSpec,
    cut: Option<&CutoffSpec>,
) -> Result<Vec<TailSample>> {
    params.validate()?;
    if !(t_final.is_finite() && t_final >= 0.0) {
        return Err(Error::InvalidParams("T must be finite and nonnegative".into()));
    }
    if let Some(c) = cut {
        check_cutoff(params, c)?;
    }
    let grid = if t_final > 0.0 { checkpoint_grid(t_final) } else { Vec::new() };
    let neg: Vec<f64> = grid.iter().map(|t| -t).collect();
    (0..spec.n_samples)
        .into_par_iter()
        .map_init(
            || -> Result<(Evolver, EnergyEvaluator)> { Ok((Evolver::new(params)?, EnergyEvaluator::new(params)?)) },
            |w, index| {
                let (evolver, energy) = w.as_mut().map_err(|e| Error::InvalidParams(e.to_string()))?;
                let u = sample_mu_s(spec, index)?;
                let weight = cut.map_or(1.0, |c| smooth_cutoff(energy.breakdown(&u).renormalized / c.r));
                let mut sup = sobolev_norm(&u, params.sigma);
                if weight > 0.0 && !grid.is_empty() {
                    for v in evolver.evolve_checkpoints(&u, &grid)?.iter().chain(&evolver.evolve_checkpoints(&u, &neg)?) {
                        sup = sup.max(sobolev_norm(v, params.sigma));
                    }
                }
                Ok(TailSample { index, sup_norm: sup, weight })
            },
        )
        .collect()
}

/// `n_points` thresholds at sup-norm quantiles of the weighted-in samples, from the
/// median up to where about `4·MIN_TAIL_HITS` samples remain above.
pub fn default_tail_grid(samples: &[TailSample], n_points: usize) -> Vec<f64> {
    let sups: Vec<f64> = samples.iter().filter(|s| s.weight > 0.0).map(|s| s.sup_norm).collect();
    if sups.is_empty() || n_points == 0 {
        return Vec::new();
    }
    let top = (1.0 - 4.0 * MIN_TAIL_HITS as f64 / sups.len() as f64).max(0.5);
    let mut grid: Vec<f64> = (0..n_points)
        .map(|j| {
            let q = if n_points == 1 { 0.5 } else { 0.5 + (top - 0.5) * j as f64 / (n_points - 1) as f64 };
            quantile(&sups, q)
        })
        .collect();
    grid.dedup();
    grid
}

pub fn tail_report(
    samples: Vec<TailSample>,
    m_grid: &[f64],
    params: &ModelParams,
    t_final: f64,
    spec: &EnsembleSpec,
    cut: Option<&CutoffSpec>,
) -> Result<TailReport> {
    if m_grid.is_empty() || m_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParams("M_grid must be nonempty and strictly increasing".into()));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut points = Vec::with_capacity(m_grid.len());
    for &m in m_grid {
        let ind: Vec<f64> = samples
            .iter()
            .map(|s| if s.sup_norm > m { s.weight } else { 0.0 })
            .collect();
        let hits = samples.iter().filter(|s| s.sup_norm > m && s.weight > 0.0).count();
        let (probability, se) = ensemble_mean(&ind, None)?;
        let censored = hits < MIN_TAIL_HITS;
        let (log_probability, log_se) = if censored || probability <= 0.0 {
            (None, None)
        } else {
            (Some(probability.ln()), Some(se / probability))
        };
        points.push(TailPoint { m, probability, se, log_probability, log_se, hits, censored });
    }
    let (x, y): (Vec<f64>, Vec<f64>) = points
        .iter()
        .filter_map(|p| p.log_probability.map(|l| (p.m * p.m, l)))
        .unzip();
    let fit = linear_fit(&x, &y);
    Ok(TailReport {
        t_final,
        m_grid: m_grid.to_vec(),
        points,
        slope: fit.map(|f| f.slope),
        intercept: fit.map(|f| f.intercept),
        r_squared: fit.map(|f| f.r_squared),
        fit_points: x.len(),
        n_samples: samples.len(),
        params: params.clone(),
        cutoff: cut.cloned(),
        ensemble: spec.manifest(),
        samples,
    })
}

/// Cutoff-weighted probability that the trajectory sup norm on `[-T, T]` exceeds each `M`.
pub fn tail_experiment(
    params: &ModelParams,
    t_final: f64,
    m_grid: &[f64],
    spec: &EnsembleSpec,
    cut: Option<&CutoffSpec>,
) -> Result<TailReport> {
    let samples = tail_samples(params, t_final, spec, cut)?;
    tail_report(samples, m_grid, params, t_final, spec, cut)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthRecord {
    pub index: usize,
    /// `sup_{0 ≤ t ≤ T_k} ‖Φ^N_t u‖_{H^σ}` for each `T_k`.
    pub sup_norms: Vec<f64>,
    /// Slope of `log sup` against `log(1 + T_k)`.
    pub exponent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthReport {
    pub t_checkpoints: Vec<f64>,
    pub exponent_median: f64,
    pub exponent_q25: f64,
    pub exponent_q75: f64,
    pub exponent_min: f64,
    pub exponent_max: f64,
    pub all_finite: bool,
    pub n_samples: usize,
    pub params: ModelParams,
    pub ensemble: EnsembleManifest,
    pub records: Vec<GrowthRecord>,
}

impl GrowthReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "index,exponent")?;
        for t in &self.t_checkpoints {
            write!(w, ",sup_T{t}")?;
        }
        writeln!(w)?;
        for r in &self.records {
            write!(w, "{},{}", r.index, r.exponent)?;
            for v in &r.sup_norms {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Running `H^σ` sup norms at each checkpoint time and the fitted growth exponent per sample.
pub fn growth_experiment(params: &ModelParams, t_checkpoints: &[f64], spec: &EnsembleSpec) -> Result<GrowthReport> {
    params.validate()?;
    if t_checkpoints.len() < 2 || t_checkpoints.windows(2).any(|w| w[1] <= w[0]) || t_checkpoints[0] <= 0.0 {
        return Err(Error::InvalidParams(
            "T_checkpoints must hold at least two positive increasing times".into(),
        ));
    }
    let t_max = *t_checkpoints.last().unwrap();
    let mut grid = checkpoint_grid(t_max);
    grid.extend_from_slice(t_checkpoints);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let logt: Vec<f64> = t_checkpoints.iter().map(|t| t.ln_1p()).collect();
    let records: Vec<GrowthRecord> = (0..spec.n_samples)
        .into_par_iter()
        .map_init(
            || Evolver::new(params),
            |ev, index| {
                let ev = ev.as_mut().map_err(|e| Error::InvalidParams(e.to_string()))?;
                let u = sample_mu_s(spec, index)?;
                let states = ev.evolve_checkpoints(&u, &grid)?;
                let mut sup = sobolev_norm(&u, params.sigma);
                let mut sup_norms = Vec::with_capacity(t_checkpoints.len());
                let mut next = 0;
                for (t, v) in grid.iter().zip(&states) {
                    sup = sup.max(sobolev_norm(v, params.sigma));
                    if next < t_checkpoints.len() && *t == t_checkpoints[next] {
                        sup_norms.push(sup);
                        next += 1;
                    }
                }
                let y: Vec<f64> = sup_norms.iter().map(|s| s.ln()).collect();
                let exponent = linear_fit(&logt, &y).map_or(f64::NAN, |f| f.slope);
                Ok(GrowthRecord { index, sup_norms, exponent })
            },
        )
        .collect::<Result<_>>()?;
    let exps: Vec<f64> = records.iter().map(|r| r.exponent).collect();
    Ok(GrowthReport {
        t_checkpoints: t_checkpoints.to_vec(),
        exponent_median: quantile(&exps, 0.5),
        exponent_q25: quantile(&exps, 0.25),
        exponent_q75: quantile(&exps, 0.75),
        exponent_min: exps.iter().copied().fold(f64::INFINITY, f64::min),
        exponent_max: exps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        all_finite: exps.iter().all(|e| e.is_finite()),
        n_samples: spec.n_samples,
        params: params.clone(),
        ensemble: spec.manifest(),
        records,
    })
}

/// `(Σ_{N<|n|≤M} ⟨n⟩^{4(1-s)})^{1/2}`.
pub fn energy_tail_sum(s: f64, n: usize, m: usize) -> f64 {
    let terms: Vec<f64> = (n + 1..=m)
        .map(|k| 2.0 * japanese_bracket(k as i64).powf(4.0 * (1.0 - s)))
        .collect();
    pairwise_sum(&terms).sqrt()
}

/// Standard deviation of `½ Σ_{N<|n|≤M} (n²/⟨n⟩^{2s})(|g_n|² − 2)` with `Var|g_n|² = 4`.
pub fn kinetic_oracle_sd(s: f64, n: usize, m: usize) -> f64 {
    let terms: Vec<f64> = (n + 1..=m)
        .map(|k| {
            let w = (k * k) as f64 / japanese_bracket(k as i64).powf(2.0 * s);
            2.0 * 0.25 * w * w * 4.0
        })
        .collect();
    pairwise_sum(&terms).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    #[serde(rename = "N")]
    pub n: usize,
    /// `‖𝓔_{M_ref} − 𝓔_N‖_{L^q}`
    pub distance: f64,
    pub tail_sum: f64,
    /// `L²` norm of the kinetic part of the difference.
    pub kinetic_distance: f64,
    pub kinetic_oracle: f64,
    pub kinetic_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConvergenceReport {
    pub p: usize,
    pub s: f64,
    pub q: f64,
    #[serde(rename = "M_ref")]
    pub m_ref: usize,
    pub n_samples: usize,
    pub rows: Vec<ConvergenceRow>,
    /// Distances strictly decrease along the rows.
    pub monotone: bool,
    pub ensemble: EnsembleManifest,
    #[serde(skip)]
    pub samples: Vec<Vec<f64>>,
}

impl EnergyConvergenceReport {
    /// Per sample: `𝓔_N` for each row, then `𝓔_{M_ref}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "index")?;
        for r in &self.rows {
            write!(w, ",E_{}", r.n)?;
        }
        writeln!(w, ",E_{}", self.m_ref)?;
        for (i, vals) in self.samples.iter().enumerate() {
            write!(w, "{i}")?;
            for v in vals {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Monte Carlo `L^q(μ_s)` distances between renormalized energies at `N` and at `M_ref`.
///
/// Samples live on `|n| ≤ N_ambient`, which must be at least `M_ref`.
pub fn energy_convergence_experiment(
    p: usize,
    s: f64,
    q: f64,
    n_list: &[usize],
    m_ref: usize,
    spec: &EnsembleSpec,
) -> Result<EnergyConvergenceReport> {
    if !(s > 1.25 && s <= 1.5) {
        return Err(Error::InvalidParams(format!("s must lie in (5/4, 3/2], got {s}")));
    }
    if !(q >= 1.0 && q.is_finite()) {
        return Err(Error::InvalidParams(format!("q must be at least 1, got {q}")));
    }
    if n_list.is_empty() || n_list.iter().any(|&n| n > m_ref) {
        return Err(Error::InvalidParams("N_list must be nonempty with entries at most M_ref".into()));
    }
    if spec.n_ambient < m_ref || spec.s != s {
        return Err(Error::InvalidParams("ensemble must have N_ambient ≥ M_ref and matching s".into()));
    }
    let mut all: Vec<ModelParams> = n_list
        .iter()
        .map(|&n| ModelParams::new(p, s, n))
        .collect::<Result<_>>()?;
    all.push(ModelParams::new(p, s, m_ref)?);
    // Per sample: (renormalized energies, kinetic-minus-counterterm parts), row order then M_ref.
    let per_sample: Vec<(Vec<f64>, Vec<f64>)> = (0..spec.n_samples)
        .into_par_iter()
        .map_init(
            || all.iter().map(EnergyEvaluator::new).collect::<Result<Vec<_>>>(),
            |evs, index| {
                let evs = evs.as_mut().map_err(|e| Error::InvalidParams(e.to_string()))?;
                let u = sample_mu_s(spec, index)?;
                let mut energies = Vec::with_capacity(evs.len());
                let mut kinetic = Vec::with_capacity(evs.len());
                for ev in evs.iter_mut() {
                    let b = ev.breakdown(&u);
                    energies.push(b.renormalized);
                    kinetic.push(b.kinetic - b.counterterm);
                }
                Ok((energies, kinetic))
            },
        )
        .collect::<Result<_>>()?;
    let last = n_list.len();
    let mut rows = Vec::with_capacity(last);
    for (j, &n) in n_list.iter().enumerate() {
        let dq: Vec<f64> = per_sample.iter().map(|(e, _)| (e[last] - e[j]).abs().powf(q)).collect();
        let dk: Vec<f64> = per_sample
            .iter()
            .map(|(_, k)| (k[last] - k[j]).powi(2))
            .collect();
        let distance = (pairwise_sum(&dq) / dq.len() as f64).powf(1.0 / q);
        let kinetic_distance = (pairwise_sum(&dk) / dk.len() as f64).sqrt();
        let kinetic_oracle = kinetic_oracle_sd(s, n, m_ref);
        rows.push(ConvergenceRow {
            n,
            distance,
            tail_sum: energy_tail_sum(s, n, m_ref),
            kinetic_distance,
            kinetic_oracle,
            kinetic_ratio: (kinetic_oracle > 0.0).then(|| kinetic_distance / kinetic_oracle),
        });
    }
    let monotone = rows.windows(2).all(|w| w[1].distance < w[0].distance);
    Ok(EnergyConvergenceReport {
        p,
        s,
        q,
        m_ref,
        n_samples: spec.n_samples,
        rows,
        monotone,
        ensemble: spec.manifest(),
        samples: per_sample.into_iter().map(|(e, _)| e).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosReport {
    pub s: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub q_list: Vec<f64>,
    /// `‖S‖_{L^q}` for each `q`.
    pub norms: Vec<f64>,
    /// `‖S‖_{L^q} / ‖S‖_{L²}`.
    pub ratios: Vec<f64>,
    /// Fit of `log ratio` against `log q`.
    pub slope: f64,
    pub r_squared: f64,
    pub slope_bound: f64,
    pub passed: bool,
    pub n_samples: usize,
    pub ensemble: EnsembleManifest,
}

fn lq_norm(values: &[f64], q: f64) -> f64 {
    let terms: Vec<f64> = values.iter().map(|v| v.abs().powf(q)).collect();
    (pairwise_sum(&terms) / values.len() as f64).powf(1.0 / q)
}

/// Moment growth of the quadratic chaos `S = Σ_{|n|≤N} (n²/⟨n⟩^{2s})(|g_n|² − 2)`.
pub fn chaos_moment_check(s: f64, n: usize, q_list: &[f64], spec: &EnsembleSpec) -> Result<ChaosReport> {
    if q_list.len() < 2 || q_list.iter().any(|q| !(2.0..=12.0).contains(q)) {
        return Err(Error::InvalidParams("q_list needs at least two values in [2, 12]".into()));
    }
    if spec.n_ambient < n {
        return Err(Error::InvalidParams("ensemble N_ambient must be at least N".into()));
    }
    let offset = spec.n_ambient as i64;
    let w: Vec<f64> = (-(n as i64)..=n as i64)
        .map(|k| (k * k) as f64 / japanese_bracket(k).powf(2.0 * s))
        .collect();
    let values: Vec<f64> = (0..spec.n_samples)
        .into_par_iter()
        .map(|index| {
            let g = sample_gaussians(spec, index)?;
            let terms: Vec<f64> = (-(n as i64)..=n as i64)
                .zip(&w)
                .map(|(k, wk)| wk * (g[(k + offset) as usize].norm_sqr() - 2.0))
                .collect();
            Ok(pairwise_sum(&terms))
        })
        .collect::<Result<_>>()?;
    let l2 = lq_norm(&values, 2.0);
    let norms: Vec<f64> = q_list.iter().map(|&q| lq_norm(&values, q)).collect();
    let ratios: Vec<f64> = norms.iter().map(|v| v / l2).collect();
    let x: Vec<f64> = q_list.iter().map(|q| q.ln()).collect();
    let y: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
    let fit = linear_fit(&x, &y).ok_or_else(|| Error::InvalidParams("q_list needs two distinct values".into()))?;
    Ok(ChaosReport {
        s,
        n,
        q_list: q_list.to_vec(),
        norms,
        ratios,
        slope: fit.slope,
        r_squared: fit.r_squared,
        slope_bound: CHAOS_SLOPE_BOUND,
        passed: fit.slope <= CHAOS_SLOPE_BOUND,
        n_samples: spec.n_samples,
        ensemble: spec.manifest(),
    })
}
