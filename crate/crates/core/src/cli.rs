//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 validation or configuration error, 3 theorem-check
//! violation (resonance scans), 4 numerical-accuracy failure.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{load_config, Provenance, RunConfig};
use crate::error::{Error, Result};
use crate::flow::{conservation_report, TrajectoryRecord};
use crate::functionals::{normal_form_identity_check, EnergyEvaluator, IdentityCheck};
use crate::resonance::{
    default_dyad_families, dyadic_estimate_scan, omega_lower_bound_scan, psi_upper_bound_scan, remark_scan,
    threshold_equivalence_scan, ScanReport,
};
use crate::sampler::{sample_mu_s, smooth_cutoff, CutoffSpec, EnsembleSpec};
use crate::spectral::{dealiased_grid_size, sobolev_norm, FourierState, ModelParams};
use crate::transport::{
    chaos_moment_check, default_cutoff_radius, default_tail_grid, energy_convergence_experiment,
    growth_experiment, tail_report, tail_samples, transport_battery, z_score, Observable, TransportMode,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Relative tolerance of the normal-form identity check.
pub const NORMAL_FORM_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "nlslab", version, about = "Spectral lab for the truncated generalized NLS on the torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw samples of the Gaussian measure.
    Sample(Flags),
    /// Integrate one initial datum and record a trajectory.
    Evolve(Flags),
    /// Conservation drifts over an ensemble.
    Conserve(Flags),
    /// Finite-difference check of dE/dt = Q along the flow.
    NormalForm(Flags),
    /// Transport identities for plain, cutoff and weighted measures.
    Transport(Flags),
    /// Tail probabilities of trajectory sup norms.
    Tail(Flags),
    /// L^q convergence of the renormalized energies.
    EnergyConvergence(Flags),
    /// Sobolev-norm growth exponents.
    Growth(Flags),
    /// Resonance scans (exit 3 on a counterexample).
    Resonance(Flags),
    /// Dyadic multilinear estimate scan.
    Dyadic(Flags),
    /// Moment ratios of the quadratic Gaussian chaos.
    Chaos(Flags),
    /// Quick consistency checks.
    Selftest(Flags),
}

impl Command {
    fn parts(&self) -> (&'static str, &Flags) {
        match self {
            Command::Sample(f) => ("sample", f),
            Command::Evolve(f) => ("evolve", f),
            Command::Conserve(f) => ("conserve", f),
            Command::NormalForm(f) => ("normal-form", f),
            Command::Transport(f) => ("transport", f),
            Command::Tail(f) => ("tail", f),
            Command::EnergyConvergence(f) => ("energy-convergence", f),
            Command::Growth(f) => ("growth", f),
            Command::Resonance(f) => ("resonance", f),
            Command::Dyadic(f) => ("dyadic", f),
            Command::Chaos(f) => ("chaos", f),
            Command::Selftest(f) => ("selftest", f),
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
struct Flags {
    /// Configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long = "N")]
    n: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    linear_diagnostic: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long = "N-ambient")]
    n_ambient: Option<usize>,
    #[arg(long = "R")]
    cutoff_radius: Option<f64>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    cutoff: Option<bool>,
    #[arg(long = "out")]
    output_dir: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    emit_json: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    emit_csv: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    emit_binary: Option<bool>,
    /// Worker threads (default: machine parallelism).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    input: Option<String>,
    #[arg(long = "T")]
    t_final: Option<f64>,
    #[arg(long)]
    checkpoints: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    times: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    observables: Option<Vec<String>>,
    #[arg(long = "M-grid", value_delimiter = ',')]
    m_grid: Option<Vec<f64>>,
    #[arg(long = "N-list", value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long = "M-ref")]
    m_ref: Option<usize>,
    #[arg(long)]
    q: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    q_list: Option<Vec<f64>>,
    #[arg(long = "T-checkpoints", value_delimiter = ',')]
    t_checkpoints: Option<Vec<f64>>,
    #[arg(long = "K")]
    k: Option<i64>,
    #[arg(long, value_delimiter = ',')]
    scans: Option<Vec<String>>,
    #[arg(long)]
    max_dyad: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    permutations: Option<usize>,
}

impl Flags {
    fn to_config(&self) -> RunConfig {
        let f = self.clone();
        RunConfig {
            command: None,
            p: f.p,
            s: f.s,
            sigma: f.sigma,
            n: f.n,
            grid_size: f.grid_size,
            dt: f.dt,
            tol: f.tol,
            max_steps: f.max_steps,
            linear_diagnostic: f.linear_diagnostic,
            seed: f.seed,
            samples: f.samples,
            n_ambient: f.n_ambient,
            cutoff_radius: f.cutoff_radius,
            cutoff: f.cutoff,
            output_dir: f.output_dir,
            emit_json: f.emit_json,
            emit_csv: f.emit_csv,
            emit_binary: f.emit_binary,
            threads: f.threads,
            input: f.input,
            t_final: f.t_final,
            checkpoints: f.checkpoints,
            times: f.times,
            modes: f.modes,
            observables: f.observables,
            m_grid: f.m_grid,
            n_list: f.n_list,
            m_ref: f.m_ref,
            q: f.q,
            q_list: f.q_list,
            t_checkpoints: f.t_checkpoints,
            k: f.k,
            scans: f.scans,
            max_dyad: f.max_dyad,
            trials: f.trials,
            permutations: f.permutations,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (name, flags) = cli.command.parts();
    let config = match effective_config(name, flags) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_VALIDATION;
        }
    };
    let result = match config.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| execute(name, &config)),
            Err(e) => Err(Error::InvalidParams(format!("thread pool: {e}"))),
        },
        None => execute(name, &config),
    };
    match result {
        Ok(false) => EXIT_OK,
        Ok(true) => EXIT_VIOLATION,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_VALIDATION
            }
        }
    }
}

fn effective_config(name: &str, flags: &Flags) -> Result<RunConfig> {
    let mut config = match &flags.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(c) = &config.command {
        if c != name {
            return Err(Error::Config(format!("config is for command `{c}`, not `{name}`")));
        }
    }
    config.merge(&flags.to_config());
    config.command = Some(name.to_string());
    Ok(config)
}

/// Artifact writer: every JSON output embeds the provenance block.
struct Output {
    dir: PathBuf,
    stem: String,
    json: bool,
    csv: bool,
    binary: bool,
    provenance: Provenance,
}

impl Output {
    fn new(name: &str, config: &RunConfig, binary_default: bool) -> Result<Self> {
        let dir = PathBuf::from(config.output_dir.clone().unwrap_or_else(|| ".".into()));
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::InvalidParams(format!("output directory {}: {e}", dir.display())))?;
        Ok(Output {
            dir,
            stem: name.replace('-', "_"),
            json: config.emit_json.unwrap_or(true),
            csv: config.emit_csv.unwrap_or(true),
            binary: config.emit_binary.unwrap_or(binary_default),
            provenance: Provenance::new(config),
        })
    }

    fn create(&self, ext: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(format!("{}.{ext}", self.stem));
        let file = File::create(&path).map_err(|e| Error::InvalidParams(format!("{}: {e}", path.display())))?;
        Ok(BufWriter::new(file))
    }

    fn json<T: Serialize>(&self, report: &T) -> Result<()> {
        if self.json {
            let mut w = self.create("json")?;
            serde_json::to_writer_pretty(&mut w, &json!({"provenance": self.provenance, "report": report}))?;
            writeln!(w)?;
            w.flush()?;
        }
        Ok(())
    }

    fn csv(&self, body: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
        if self.csv {
            let mut w = self.create("csv")?;
            body(&mut w)?;
            w.flush()?;
        }
        Ok(())
    }

    fn binary(&self, states: &[FourierState]) -> Result<()> {
        if self.binary {
            let mut w = self.create("bin")?;
            for s in states {
                s.write_binary(&mut w)?;
            }
            w.flush()?;
        }
        Ok(())
    }
}

/// Runs one command; `Ok(true)` flags a theorem-check violation.
fn execute(name: &str, config: &RunConfig) -> Result<bool> {
    match name {
        "sample" => cmd_sample(config),
        "evolve" => cmd_evolve(config),
        "conserve" => cmd_conserve(config),
        "normal-form" => cmd_normal_form(config),
        "transport" => cmd_transport(config),
        "tail" => cmd_tail(config),
        "energy-convergence" => cmd_energy_convergence(config),
        "growth" => cmd_growth(config),
        "resonance" => cmd_resonance(config),
        "dyadic" => cmd_dyadic(config),
        "chaos" => cmd_chaos(config),
        "selftest" => cmd_selftest(),
        other => Err(Error::InvalidParams(format!("unknown command {other}"))),
    }
}

fn resolve_cutoff(config: &RunConfig, params: &ModelParams, spec: &EnsembleSpec) -> Result<CutoffSpec> {
    match config.explicit_cutoff(params)? {
        Some(c) => Ok(c),
        None => CutoffSpec::new(default_cutoff_radius(params, spec)?, params.n, params.s),
    }
}

fn cmd_sample(config: &RunConfig) -> Result<bool> {
    let params = config.model_params(8)?;
    let spec = config.ensemble(10, params.n)?;
    let out = Output::new("sample", config, true)?;
    let states: Vec<FourierState> = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| sample_mu_s(&spec, i))
        .collect::<Result<_>>()?;
    let mut ev = EnergyEvaluator::new(&params)?;
    let rows: Vec<(f64, f64, f64)> = states
        .iter()
        .map(|u| {
            let b = ev.breakdown(u);
            (b.mass, sobolev_norm(u, params.sigma), b.renormalized)
        })
        .collect();
    out.json(&json!({
        "ensemble": spec.manifest(),
        "params": params,
        "n_samples": spec.n_samples,
        "mean_mass": rows.iter().map(|r| r.0).sum::<f64>() / rows.len() as f64,
        "mean_renormalized_energy": rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64,
    }))?;
    out.csv(|w| {
        writeln!(w, "index,mass,H_sigma_norm,renormalized_energy")?;
        for (i, r) in rows.iter().enumerate() {
            writeln!(w, "{i},{},{},{}", r.0, r.1, r.2)?;
        }
        Ok(())
    })?;
    out.binary(&states)?;
    Ok(false)
}

fn cmd_evolve(config: &RunConfig) -> Result<bool> {
    let params = config.model_params(8)?;
    let u0 = match &config.input {
        Some(path) => {
            let file = File::open(path).map_err(|e| Error::InvalidParams(format!("{path}: {e}")))?;
            FourierState::read_binary(std::io::BufReader::new(file))?
        }
        None => sample_mu_s(&config.ensemble(1, params.n)?, 0)?,
    };
    let t_final = config.t_final.unwrap_or(1.0);
    let record = conservation_report(&u0, t_final, config.checkpoints.unwrap_or(17), &params)?;
    let out = Output::new("evolve", config, true)?;
    out.json(&json!({
        "params": params,
        "T": t_final,
        "times": record.times,
        "drift_m": record.drift_m,
        "drift_en": record.drift_en,
        "drift_renormalized": record.drift_renormalized,
        "final_state": record.states.last(),
    }))?;
    out.csv(|w| record.write_csv(w))?;
    if out.binary {
        let mut w = out.create("bin")?;
        record.write_states(&mut w)?;
        w.flush()?;
    }
    Ok(false)
}

fn cmd_conserve(config: &RunConfig) -> Result<bool> {
    let params = config.model_params(8)?;
    let spec = config.ensemble(10, params.n)?;
    let t_final = config.t_final.unwrap_or(1.0);
    let checkpoints = config.checkpoints.unwrap_or(9);
    let records: Vec<TrajectoryRecord> = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| conservation_report(&sample_mu_s(&spec, i)?, t_final, checkpoints, &params))
        .collect::<Result<_>>()?;
    let max = |f: fn(&TrajectoryRecord) -> f64| records.iter().map(f).fold(0.0, f64::max);
    let out = Output::new("conserve", config, false)?;
    out.json(&json!({
        "ensemble": spec.manifest(),
        "params": params,
        "T": t_final,
        "max_drift_m": max(|r| r.drift_m),
        "max_drift_en": max(|r| r.drift_en),
        "max_drift_renormalized": max(|r| r.drift_renormalized),
        "drifts": records.iter().map(|r| [r.drift_m, r.drift_en, r.drift_renormalized]).collect::<Vec<_>>(),
    }))?;
    out.csv(|w| {
        writeln!(w, "index,drift_m,drift_en,drift_renormalized")?;
        for (i, r) in records.iter().enumerate() {
            writeln!(w, "{i},{},{},{}", r.drift_m, r.drift_en, r.drift_renormalized)?;
        }
        Ok(())
    })?;
    Ok(false)
}

fn cmd_normal_form(config: &RunConfig) -> Result<bool> {
    let mut params = config.model_params(4)?;
    if config.tol.is_none() {
        params.tol = 1e-13;
    }
    let spec = config.ensemble(20, params.n)?;
    let checks: Vec<IdentityCheck> = (0..spec.n_samples)
        .into_par_iter()
        .map(|i| normal_form_identity_check(&sample_mu_s(&spec, i)?, &params))
        .collect::<Result<_>>()?;
    let worst = checks.iter().map(|c| c.relative_error).fold(0.0, f64::max);
    let out = Output::new("normal-form", config, false)?;
    out.json(&json!({
        "ensemble": spec.manifest(),
        "params": params,
        "max_relative_error": worst,
        "tolerance": NORMAL_FORM_TOLERANCE,
        "checks": checks,
    }))?;
    out.csv(|w| {
        writeln!(w, "index,finite_difference,Q,relative_error,step")?;
        for (i, c) in checks.iter().enumerate() {
            writeln!(w, "{i},{},{},{},{}", c.finite_difference, c.derivative, c.relative_error, c.step)?;
        }
        Ok(())
    })?;
    if !(worst <= NORMAL_FORM_TOLERANCE) {
        return Err(Error::AccuracyBudget {
            quantity: "normal-form identity",
            drift: worst,
            bound: NORMAL_FORM_TOLERANCE,
        });
    }
    Ok(false)
}

fn cmd_transport(config: &RunConfig) -> Result<bool> {
    let params = config.model_params(4)?;
    let spec = config.ensemble(1000, params.n)?;
    let times = config.times.clone().unwrap_or_else(|| vec![0.0, 0.25, 0.5]);
    let modes: Vec<TransportMode> = match &config.modes {
        Some(m) => m.iter().map(|id| TransportMode::from_id(id)).collect::<Result<_>>()?,
        None => TransportMode::ALL.to_vec(),
    };
    let observables: Vec<Observable> = match &config.observables {
        Some(o) => o.iter().map(|id| Observable::from_id(id)).collect::<Result<_>>()?,
        None => Observable::ALL.to_vec(),
    };
    let cut = if modes.iter().any(|m| *m != TransportMode::Plain) {
        Some(resolve_cutoff(config, &params, &spec)?)
    } else {
        None
    };
    let battery = transport_battery(&params, &times, &observables, &modes, &spec, cut.as_ref())?;
    for r in &battery.reports {
        println!(
            "{:<9} t={:<6} {:<18} lhs={:.6e} rhs={:.6e} z={:.3}",
            r.mode.id(),
            r.t,
            r.observable_id,
            r.lhs_mean,
            r.rhs_mean,
            r.z_score
        );
    }
    let out = Output::new("transport", config, false)?;
    out.json(&battery)?;
    out.csv(|w| battery.write_csv(w))?;
    Ok(false)
}

fn cmd_tail(config: &RunConfig) -> Result<bool> {
    let params = config.model_params(8)?;
    let spec = config.ensemble(1000, params.n)?;
    let t_final = config.t_final.unwrap_or(1.0);
    let cut = if config.cutoff.unwrap_or(true) {
        Some(resolve_cutoff(config, &params, &spec)?)
    } else {
        None
    };
    let samples = tail_samples(&params, t_final, &spec, cut.as_ref())?;
    let grid = match &config.m_grid {
        Some(g) => g.clone(),
        None => default_tail_grid(&samples, 10),
    };
    let report = tail_report(samples, &grid, &params, t_final, &spec, cut.as_ref())?;
    let out = Output::new("tail", config, false)?;
    out.json(&report)?;
    out.csv(|w| report.write_csv(w))?;
    Ok(false)
}

fn cmd_energy_convergence(config: &RunConfig) -> Result<bool> {
    let m_ref = config.m_ref.unwrap_or(64);
    let spec = config.ensemble(10_000, m_ref)?;
    let n_list = config.n_list.clone().unwrap_or_else(|| vec![4, 8, 16, 32]);
    let report = energy_convergence_experiment(
        config.p.unwrap_or(5),
        config.s.unwrap_or(1.3),
        config.q.unwrap_or(2.0),
        &n_list,
        m_ref,
        &spec,
    )?;
    let out = Output::new("energy-convergence", config, false)?;
    out.json(&report)?;
    out.csv(|w| report.write_csv(w))?;
    Ok(false)
}

fn cmd_growth(config: &RunConfig) -> Result<bool> {
    let params = config.model_params(16)?;
    let spec = config.ensemble(100, params.n)?;
    let t = config.t_checkpoints.clone().unwrap_or_else(|| vec![1.0, 2.0, 4.0, 8.0]);
    let report = growth_experiment(&params, &t, &spec)?;
    let out = Output::new("growth", config, false)?;
    out.json(&report)?;
    out.csv(|w| report.write_csv(w))?;
    Ok(false)
}

fn cmd_chaos(config: &RunConfig) -> Result<bool> {
    let n = config.n.unwrap_or(16);
    let spec = config.ensemble(100_000, n)?;
    let q_list = config.q_list.clone().unwrap_or_else(|| vec![2.0, 4.0, 6.0, 8.0, 10.0, 12.0]);
    let report = chaos_moment_check(config.s.unwrap_or(1.3), n, &q_list, &spec)?;
    let out = Output::new("chaos", config, false)?;
    out.json(&report)?;
    out.csv(|w| {
        writeln!(w, "q,norm,ratio")?;
        for ((q, v), r) in report.q_list.iter().zip(&report.norms).zip(&report.ratios) {
            writeln!(w, "{q},{v},{r}")?;
        }
        Ok(())
    })?;
    Ok(false)
}

fn write_scans(name: &str, config: &RunConfig, reports: &[ScanReport]) -> Result<()> {
    for r in reports {
        println!("{}", r.table());
    }
    let out = Output::new(name, config, false)?;
    out.json(&reports)?;
    out.csv(|w| {
        writeln!(w, "scan_id,extremal_value,witness,tuples_checked,violated")?;
        for r in reports {
            let witness = r
                .witness
                .as_ref()
                .map(|t| t.k.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "))
                .unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", r.scan_id, r.extremal_value, witness, r.tuples_checked, r.violated)?;
        }
        Ok(())
    })
}

/// Omega and remark scans by default; `psi` and `threshold` on request. Only the
/// omega, remark and threshold scans are theorem checks.
fn cmd_resonance(config: &RunConfig) -> Result<bool> {
    let p = config.p.unwrap_or(5);
    let k = config.k.unwrap_or(20);
    let scans = config.scans.clone().unwrap_or_else(|| vec!["omega".into(), "remark".into()]);
    let mut reports = Vec::new();
    let mut violation = false;
    for scan in &scans {
        let (report, theorem) = match scan.as_str() {
            "omega" => (omega_lower_bound_scan(p, k)?, true),
            "remark" => (remark_scan(p, k)?, true),
            "psi" => (psi_upper_bound_scan(p, config.s.unwrap_or(1.3), k)?, false),
            "threshold" => {
                let grid: Vec<f64> = (1..=1000).map(|i| 1.0 + 0.5 * i as f64 / 1000.0).collect();
                (threshold_equivalence_scan(p, &grid)?, true)
            }
            other => return Err(Error::InvalidParams(format!("unknown scan '{other}'"))),
        };
        violation |= theorem && report.violated;
        reports.push(report);
    }
    write_scans("resonance", config, &reports)?;
    Ok(violation)
}

/// Constant-boundedness check: the `violated` flag is reported but does not change the exit code.
fn cmd_dyadic(config: &RunConfig) -> Result<bool> {
    let p = config.p.unwrap_or(5);
    let families = default_dyad_families(p, config.max_dyad.unwrap_or(16));
    let report = dyadic_estimate_scan(
        p,
        config.s.unwrap_or(1.3),
        &families,
        config.trials.unwrap_or(50),
        config.permutations.unwrap_or(10),
        config.seed.unwrap_or(0),
    )?;
    write_scans("dyadic", config, std::slice::from_ref(&report))?;
    Ok(false)
}

fn cmd_selftest() -> Result<bool> {
    let mut failures = 0;
    let mut check = |name: &str, ok: Result<bool>| {
        let ok = matches!(ok, Ok(true));
        println!("{} {name}", if ok { "ok  " } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };
    check("dealiased grid for p=5, N=4 is 64", Ok(dealiased_grid_size(5, 4) == 64));
    check("cutoff equals 1 at 0 and 0 at 1", Ok(smooth_cutoff(0.0) == 1.0 && smooth_cutoff(1.0) == 0.0));
    check("identical estimates have z-score 0", Ok(z_score(0.5, 0.0, 0.5, 0.0) == 0.0));
    check(
        "threshold s_5",
        crate::resonance::sp_threshold(5).map(|s| (s - 1.2807764).abs() < 1e-6),
    );
    check("zero-time evolution is the identity", (|| {
        let params = ModelParams::new(5, 1.3, 4)?;
        let u = sample_mu_s(&EnsembleSpec::new(1, 1, 1.3, 4)?, 0)?;
        Ok(crate::flow::evolve(&u, 0.0, &params)? == u)
    })());
    check("zero-time transport z-scores vanish", (|| {
        let params = ModelParams::new(5, 1.3, 4)?.with_tol(1e-8);
        let spec = EnsembleSpec::new(1, 16, 1.3, 4)?;
        let cut = CutoffSpec::new(default_cutoff_radius(&params, &spec)?, 4, 1.3)?;
        let b = transport_battery(&params, &[0.0], &Observable::ALL, &TransportMode::ALL, &spec, Some(&cut))?;
        Ok(b.reports.iter().all(|r| r.z_score == 0.0))
    })());
    check("energy distance at N = M_ref is 0", (|| {
        let spec = EnsembleSpec::new(1, 8, 1.3, 8)?;
        let r = energy_convergence_experiment(5, 1.3, 2.0, &[8], 8, &spec)?;
        Ok(r.rows[0].distance == 0.0)
    })());
    check("chaos moment ratio at q = 2 is 1", (|| {
        let spec = EnsembleSpec::new(1, 64, 1.3, 4)?;
        Ok(chaos_moment_check(1.3, 4, &[2.0, 4.0], &spec)?.ratios[0] == 1.0)
    })());
    check("linear flow has unit density", (|| {
        let params = ModelParams::new(5, 1.3, 4)?.linear();
        let spec = EnsembleSpec::new(1, 8, 1.3, 4)?;
        let b = transport_battery(&params, &[0.5], &Observable::ALL, &[TransportMode::Plain], &spec, None)?;
        Ok(b.samples.iter().all(|s| s.rows[0].log_g.abs() <= 1e-10))
    })());
    if failures > 0 {
        return Err(Error::SelfTest(failures));
    }
    Ok(false)
}
