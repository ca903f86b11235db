//! Exhaustive and randomized checks of the arithmetic lemmas behind the normal
//! form: the `s_p` threshold, the lower bound on the resonant function, the
//! bounds on `ψ_{2s}`, the `Ω = 0` separation remark, and the dyadic estimates.
//!
//! Constants reported here are empirical extremals over the scanned domain,
//! not the optimal constants.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::functionals::{FrequencyTuple, ENUMERATION_BUDGET};
use crate::spectral::{dyadic_block_contains, is_dyadic};
use crate::stats::linear_fit;

pub const EXTREMAL_LABEL: &str = "empirical extremal over scan domain";
/// Width of the band around the boundary excluded from the threshold comparison.
pub const BOUNDARY_BAND: f64 = 1e-12;
/// Largest enumeration per dyadic assignment.
pub const DYADIC_BUDGET: f64 = 5e6;
const MAX_SLOTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub scan_id: String,
    pub parameters: BTreeMap<String, Value>,
    pub extremal_value: f64,
    pub witness: Option<FrequencyTuple>,
    pub tuples_checked: u64,
    pub violated: bool,
    pub label: String,
    #[serde(default)]
    pub details: Value,
}

impl ScanReport {
    fn new(scan_id: &str, parameters: Value) -> Self {
        let parameters = match parameters {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        ScanReport {
            scan_id: scan_id.to_string(),
            parameters,
            extremal_value: f64::NAN,
            witness: None,
            tuples_checked: 0,
            violated: false,
            label: EXTREMAL_LABEL.to_string(),
            details: Value::Null,
        }
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "scan            {}", self.scan_id);
        for (k, v) in &self.parameters {
            let _ = writeln!(out, "  {k:<14}{v}");
        }
        let _ = writeln!(out, "extremal value  {:.6e}  ({})", self.extremal_value, self.label);
        if let Some(w) = &self.witness {
            let _ = writeln!(out, "witness         {:?}", w.k);
        }
        let _ = writeln!(out, "tuples checked  {}", self.tuples_checked);
        let _ = writeln!(out, "violated        {}", self.violated);
        out
    }
}

/// `s_p = 3/2 - p/4 (1 - √(1 - 8/p²))`.
pub fn sp_threshold(p: usize) -> Result<f64> {
    if p < 5 || p % 2 == 0 {
        return Err(Error::InvalidParams(format!("p must be an odd integer ≥ 5, got {p}")));
    }
    let p = p as f64;
    Ok(1.5 - p / 4.0 * (1.0 - (1.0 - 8.0 / (p * p)).sqrt()))
}

/// `(3 - 2s)(2s + p - 3)`.
pub fn threshold_polynomial(p: usize, s: f64) -> f64 {
    (3.0 - 2.0 * s) * (2.0 * s + p as f64 - 3.0)
}

/// Checks `(3-2s)(2s+p-3) < 2 ⟺ s > s_p` on each grid point outside the boundary band.
pub fn threshold_equivalence_scan(p: usize, s_grid: &[f64]) -> Result<ScanReport> {
    let sp = sp_threshold(p)?;
    if s_grid.is_empty() || s_grid.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::InvalidParams("s grid must be nonempty and in (0, ∞)".into()));
    }
    let mut report = ScanReport::new(
        "threshold_equivalence",
        json!({"p": p, "grid_points": s_grid.len(), "s_min": s_grid.iter().cloned().fold(f64::INFINITY, f64::min),
               "s_max": s_grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max)}),
    );
    let mut excluded = 0u64;
    let mut disagreements = Vec::new();
    // Extremal value: smallest distance of a checked point to the threshold.
    let mut closest = f64::INFINITY;
    for &s in s_grid {
        let poly = threshold_polynomial(p, s);
        if (s - sp).abs() < BOUNDARY_BAND || (poly - 2.0).abs() < BOUNDARY_BAND {
            excluded += 1;
            continue;
        }
        report.tuples_checked += 1;
        closest = closest.min((s - sp).abs());
        if (poly < 2.0) != (s > sp) {
            disagreements.push(s);
        }
    }
    report.extremal_value = closest;
    report.violated = !disagreements.is_empty();
    report.details = json!({"s_p": sp, "excluded_boundary_points": excluded, "disagreements": disagreements});
    Ok(report)
}

pub fn check_scan_budget(p: usize, k: i64) -> Result<()> {
    let count = ((2 * k + 1) as f64).powi(p as i32);
    if count > ENUMERATION_BUDGET {
        return Err(Error::EnumerationBudget {
            count,
            limit: ENUMERATION_BUDGET,
        });
    }
    Ok(())
}

/// Best value seen so far, ties broken by the lexicographically smallest tuple.
#[derive(Clone, Debug)]
struct Extremum {
    value: f64,
    witness: Option<Vec<i64>>,
    maximize: bool,
}

impl Extremum {
    fn min() -> Self {
        Extremum {
            value: f64::INFINITY,
            witness: None,
            maximize: false,
        }
    }

    fn max() -> Self {
        Extremum {
            value: f64::NEG_INFINITY,
            witness: None,
            maximize: true,
        }
    }

    fn better(&self, value: f64) -> bool {
        if self.maximize {
            value >= self.value
        } else {
            value <= self.value
        }
    }

    #[inline]
    fn offer(&mut self, value: f64, k: &[i64]) {
        if self.better(value) {
            let strictly = if self.maximize { value > self.value } else { value < self.value };
            if strictly || self.witness.as_deref().map_or(true, |w| k < w) {
                self.value = value;
                self.witness = Some(k.to_vec());
            }
        }
    }

    fn merge(&mut self, other: &Extremum) {
        if let Some(w) = &other.witness {
            self.offer(other.value, w);
        }
    }

    fn found(&self) -> bool {
        self.witness.is_some()
    }

    fn tuple(&self) -> Option<FrequencyTuple> {
        self.witness.clone().map(FrequencyTuple::new)
    }
}

trait TupleVisitor: Clone + Send + Sync {
    fn visit(&mut self, k: &[i64], omega: i64, psi: f64, mags: &[u64]);
    fn merge(&mut self, other: &Self);
}

/// Walks all `(k_1, ..., k_{p+1}) ∈ [-K, K]^{p+1}` with `Σ (-1)^{j-1} k_j = 0`,
/// solving `k_1` from the other slots. With `prune = Some(m)`, branches with more
/// than three slots of magnitude above `m` are skipped.
struct Walker<'a> {
    slots: usize,
    k_max: i64,
    weights: &'a [f64],
    prune: Option<u64>,
}

impl Walker<'_> {
    fn run<V: TupleVisitor>(&self, proto: &V) -> V {
        let parts: Vec<V> = (-self.k_max..=self.k_max)
            .into_par_iter()
            .map(|k2| {
                let mut v = proto.clone();
                let mut k = [0i64; MAX_SLOTS];
                k[1] = k2;
                let w = self.weights[k2.unsigned_abs() as usize];
                let large = usize::from(self.prune.is_some_and(|m| k2.unsigned_abs() > m));
                self.descend(2, &mut k, -k2, -k2 * k2, -w, large, &mut v);
                v
            })
            .collect();
        let mut out = proto.clone();
        for part in &parts {
            out.merge(part);
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn descend<V: TupleVisitor>(&self, slot: usize, k: &mut [i64; MAX_SLOTS], lin: i64, om: i64, psi: f64, large: usize, v: &mut V) {
        if slot == self.slots {
            let k1 = -lin;
            if k1.abs() > self.k_max {
                return;
            }
            k[0] = k1;
            let omega = om + k1 * k1;
            let psi = psi + self.weights[k1.unsigned_abs() as usize];
            let mut mags = [0u64; MAX_SLOTS];
            for j in 0..self.slots {
                mags[j] = k[j].unsigned_abs();
            }
            let mags = &mut mags[..self.slots];
            mags.sort_unstable_by(|a, b| b.cmp(a));
            v.visit(&k[..self.slots], omega, psi, mags);
            return;
        }
        let sign = if slot % 2 == 0 { 1 } else { -1 };
        for kj in -self.k_max..=self.k_max {
            let big = self.prune.is_some_and(|m| kj.unsigned_abs() > m);
            let large = large + usize::from(big);
            if large > 3 {
                continue;
            }
            k[slot] = kj;
            let w = self.weights[kj.unsigned_abs() as usize];
            self.descend(
                slot + 1,
                k,
                lin + sign * kj,
                om + sign * kj * kj,
                psi + sign as f64 * w,
                large,
                v,
            );
        }
    }
}

#[derive(Clone)]
struct OmegaVisitor {
    p: u64,
    checked: u64,
    min: Extremum,
}

impl TupleVisitor for OmegaVisitor {
    #[inline]
    fn visit(&mut self, k: &[i64], omega: i64, _psi: f64, mags: &[u64]) {
        let (k1, k3, k4) = (mags[0], mags[2], mags[3]);
        if k1 == 0 || k3 == 0 || 10 * self.p * k4 > k3 {
            return;
        }
        self.checked += 1;
        self.min.offer(omega.unsigned_abs() as f64 / (k1 * k3) as f64, k);
    }

    fn merge(&mut self, other: &Self) {
        self.checked += other.checked;
        self.min.merge(&other.min);
    }
}

/// Minimum of `|Ω| / (|k_(1)| |k_(3)|)` over nonzero tuples with zero linear sum,
/// `k_(3) ≠ 0` and `|k_(4)| ≤ |k_(3)| / (10p)`.
pub fn omega_lower_bound_scan(p: usize, k_max: i64) -> Result<ScanReport> {
    validate_scan(p, k_max)?;
    let weights = vec![0.0; k_max as usize + 1];
    let walker = Walker {
        slots: p + 1,
        k_max,
        weights: &weights,
        // k_(4) ≤ k_(3)/(10p) ≤ K/(10p): at most three slots can exceed that.
        prune: Some(k_max as u64 / (10 * p as u64)),
    };
    let v = walker.run(&OmegaVisitor {
        p: p as u64,
        checked: 0,
        min: Extremum::min(),
    });
    let mut report = ScanReport::new("omega_lower_bound", json!({"p": p, "K": k_max}));
    report.tuples_checked = v.checked;
    report.extremal_value = if v.min.found() { v.min.value } else { f64::NAN };
    report.witness = v.min.tuple();
    report.violated = v.min.found() && v.min.value <= 0.0;
    report.details = json!({"c_p_estimate": report.extremal_value});
    Ok(report)
}

#[derive(Clone)]
struct RemarkVisitor {
    p: u64,
    checked: u64,
    counterexamples: u64,
    // Smallest 10p|k_(4)| / |k_(3)|; the remark says it always exceeds 1.
    min: Extremum,
}

impl TupleVisitor for RemarkVisitor {
    #[inline]
    fn visit(&mut self, k: &[i64], omega: i64, _psi: f64, mags: &[u64]) {
        if omega != 0 || mags[2] == 0 {
            return;
        }
        self.checked += 1;
        let (k3, k4) = (mags[2], mags[3]);
        if k3 >= 10 * self.p * k4 {
            self.counterexamples += 1;
        }
        self.min.offer((10 * self.p * k4) as f64 / k3 as f64, k);
    }

    fn merge(&mut self, other: &Self) {
        self.checked += other.checked;
        self.counterexamples += other.counterexamples;
        self.min.merge(&other.min);
    }
}

/// Checks `Ω = 0`, zero linear sum, `k_(3) ≠ 0` ⇒ `|k_(3)| < 10p |k_(4)|` exhaustively.
pub fn remark_scan(p: usize, k_max: i64) -> Result<ScanReport> {
    validate_scan(p, k_max)?;
    let weights = vec![0.0; k_max as usize + 1];
    let walker = Walker {
        slots: p + 1,
        k_max,
        weights: &weights,
        prune: None,
    };
    let v = walker.run(&RemarkVisitor {
        p: p as u64,
        checked: 0,
        counterexamples: 0,
        min: Extremum::min(),
    });
    let mut report = ScanReport::new("omega_zero_remark", json!({"p": p, "K": k_max}));
    report.tuples_checked = v.checked;
    report.extremal_value = if v.min.found() { v.min.value } else { f64::NAN };
    report.witness = v.min.tuple();
    report.violated = v.counterexamples > 0;
    report.details = json!({
        "counterexamples": v.counterexamples,
        "extremal_quantity": "min 10p|k_(4)| / |k_(3)| over resonant tuples",
    });
    Ok(report)
}

#[derive(Clone)]
struct PsiVisitor {
    half: u64,
    s: f64,
    checked: u64,
    // [full K, K/2] for each of the three bounds.
    main: [Extremum; 2],
    resonant: [Extremum; 2],
    nonresonant: [Extremum; 2],
}

impl PsiVisitor {
    fn new(half: u64, s: f64) -> Self {
        PsiVisitor {
            half,
            s,
            checked: 0,
            main: [Extremum::max(), Extremum::max()],
            resonant: [Extremum::max(), Extremum::max()],
            nonresonant: [Extremum::max(), Extremum::max()],
        }
    }
}

impl TupleVisitor for PsiVisitor {
    #[inline]
    fn visit(&mut self, k: &[i64], omega: i64, psi: f64, mags: &[u64]) {
        let (k1, k3) = (mags[0], mags[2]);
        if k1 == 0 {
            return;
        }
        self.checked += 1;
        let lead = (k1 as f64).powf(2.0 * (self.s - 1.0));
        let k3sq = (k3 * k3) as f64;
        let abs_om = omega.unsigned_abs() as f64;
        let apsi = psi.abs();
        let in_half = k1 <= self.half;
        let denom = lead * (abs_om + k3sq);
        if denom > 0.0 {
            let r = apsi / denom;
            self.main[0].offer(r, k);
            if in_half {
                self.main[1].offer(r, k);
            }
        }
        if omega == 0 {
            if k3 != 0 {
                let r = apsi / (lead * k3sq);
                self.resonant[0].offer(r, k);
                if in_half {
                    self.resonant[1].offer(r, k);
                }
            }
        } else {
            let r = (apsi / abs_om) / (lead * (1.0 + k3sq / abs_om));
            self.nonresonant[0].offer(r, k);
            if in_half {
                self.nonresonant[1].offer(r, k);
            }
        }
    }

    fn merge(&mut self, other: &Self) {
        self.checked += other.checked;
        for i in 0..2 {
            self.main[i].merge(&other.main[i]);
            self.resonant[i].merge(&other.resonant[i]);
            self.nonresonant[i].merge(&other.nonresonant[i]);
        }
    }
}

/// Growth factor allowed between the `K/2` and `K` maxima of a bounded ratio.
pub const PSI_STABILITY: f64 = 1.25;

/// Maxima of the three `ψ_{2s}` bound ratios over tuples with zero linear sum and
/// `k_(1) ≠ 0`, for `K` and `K/2` in one pass; violated when the main ratio grows
/// by more than [`PSI_STABILITY`] between them.
pub fn psi_upper_bound_scan(p: usize, s: f64, k_max: i64) -> Result<ScanReport> {
    validate_scan(p, k_max)?;
    if !(s > 1.0) {
        return Err(Error::InvalidParams(format!("s must exceed 1, got {s}")));
    }
    let weights: Vec<f64> = (0..=k_max).map(|k| (k as f64).powf(2.0 * s)).collect();
    let walker = Walker {
        slots: p + 1,
        k_max,
        weights: &weights,
        prune: None,
    };
    let half = (k_max / 2) as u64;
    let v = walker.run(&PsiVisitor::new(half, s));
    let value = |e: &Extremum| if e.found() { e.value } else { f64::NAN };
    let growth = |pair: &[Extremum; 2]| {
        let (full, half) = (value(&pair[0]), value(&pair[1]));
        if half > 0.0 {
            full / half
        } else {
            f64::NAN
        }
    };
    let mut report = ScanReport::new("psi_upper_bound", json!({"p": p, "s": s, "K": k_max, "K_half": half}));
    report.tuples_checked = v.checked;
    report.extremal_value = value(&v.main[0]);
    report.witness = v.main[0].tuple();
    let main_growth = growth(&v.main);
    report.violated = !(main_growth <= PSI_STABILITY);
    let entry = |pair: &[Extremum; 2]| {
        json!({
            "max_K": value(&pair[0]),
            "max_K_half": value(&pair[1]),
            "growth": growth(pair),
            "stable": growth(pair) <= PSI_STABILITY,
            "witness_K": pair[0].witness,
        })
    };
    report.details = json!({
        "general": entry(&v.main),
        "resonant": entry(&v.resonant),
        "nonresonant": entry(&v.nonresonant),
    });
    Ok(report)
}

fn validate_scan(p: usize, k_max: i64) -> Result<()> {
    if p < 3 || p % 2 == 0 || p + 1 > MAX_SLOTS {
        return Err(Error::InvalidParams(format!("p must be odd in [3, {}], got {p}", MAX_SLOTS - 1)));
    }
    if k_max < 1 {
        return Err(Error::InvalidParams(format!("K must be ≥ 1, got {k_max}")));
    }
    check_scan_budget(p, k_max)
}

/// Number of tuples in `[-K, K]^{p+1}` with zero alternating sum, by direct iteration.
pub fn count_linear_tuples_naive(p: usize, k_max: i64, mut keep: impl FnMut(&FrequencyTuple) -> bool) -> u64 {
    let slots = p + 1;
    let width = (2 * k_max + 1) as u64;
    let total = width.pow(slots as u32);
    let mut count = 0;
    let mut k = vec![0i64; slots];
    for code in 0..total {
        let mut c = code;
        for slot in k.iter_mut() {
            *slot = (c % width) as i64 - k_max;
            c /= width;
        }
        let t = FrequencyTuple::new(k.clone());
        if t.linear_sum() == 0 && keep(&t) {
            count += 1;
        }
    }
    count
}

// Dyadic estimates.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    General,
    Refined,
}

/// `N_(4) ≤ N_(3) / (10p)` selects the refined estimate.
pub fn dyadic_regime(p: usize, dyads: &[u64]) -> Regime {
    let mut sorted = dyads.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    if sorted.len() >= 4 && 10 * p as u64 * sorted[3] <= sorted[2] {
        Regime::Refined
    } else {
        Regime::General
    }
}

/// Right side of the dyadic estimate (unit constant, `ε = 0`) for the given regime.
pub fn dyadic_rhs(s: f64, dyads: &[u64], regime: Regime) -> f64 {
    let mut sorted: Vec<f64> = dyads.iter().map(|&n| n as f64).collect();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let lead = sorted[0].powf(2.0 * (s - 1.0));
    match regime {
        Regime::General => {
            let tail: f64 = sorted.iter().skip(6).product();
            lead * sorted[2] * sorted[2] * tail.sqrt()
        }
        Regime::Refined => {
            let tail: f64 = sorted.iter().skip(2).product();
            lead * tail.sqrt()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadFamily {
    pub name: String,
    pub members: Vec<Vec<u64>>,
}

/// Families whose leading dyad grows through `1, 2, ..., max_dyad`.
pub fn default_dyad_families(p: usize, max_dyad: u64) -> Vec<DyadFamily> {
    let slots = p + 1;
    let scales: Vec<u64> = std::iter::successors(Some(1u64), |l| Some(l * 2))
        .take_while(|l| *l <= max_dyad)
        .collect();
    let shape = |name: &str, f: &dyn Fn(u64) -> Vec<u64>| DyadFamily {
        name: name.to_string(),
        members: scales.iter().map(|&l| f(l)).collect(),
    };
    let lead = |l: u64, high: usize| -> Vec<u64> { (0..slots).map(|j| if j < high { l } else { 1 }).collect() };
    vec![
        shape("two_high", &|l| lead(l, 2)),
        shape("three_high", &|l| lead(l, 3)),
        shape("four_high", &|l| lead(l, 4)),
        shape("pyramid", &|l| (0..slots).map(|j| (l >> j.saturating_sub(1)).max(1)).collect()),
        shape("flat", &|l| vec![l; slots]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadicRow {
    pub family: String,
    pub permutation: usize,
    pub dyads: Vec<u64>,
    pub regime: Regime,
    pub n1: u64,
    pub lhs_resonant: f64,
    pub lhs_nonresonant: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub tuples: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadicSlope {
    pub family: String,
    pub permutation: usize,
    pub regime: Regime,
    pub points: usize,
    pub slope: f64,
}

/// Largest tolerated slope of the per-`N_(1)` maximal ratio against `N_(1)`, log-log.
pub const DYADIC_SLOPE_LIMIT: f64 = 0.1;

/// Evaluates `Σ |Ψ_{2s}| Π |f_j(k_j)|` over each dyadic assignment with flat and
/// `trials` random nonnegative unit-norm block sequences, divided by the matching
/// right side. Every family is scanned in its given slot order and under
/// `permutations` random slot orders; slopes are fitted per family, order and regime.
pub fn dyadic_estimate_scan(
    p: usize,
    s: f64,
    families: &[DyadFamily],
    trials: usize,
    permutations: usize,
    seed: u64,
) -> Result<ScanReport> {
    if p < 3 || p % 2 == 0 || p + 1 > MAX_SLOTS {
        return Err(Error::InvalidParams(format!("p must be odd in [3, {}], got {p}", MAX_SLOTS - 1)));
    }
    if !(s > 1.0) {
        return Err(Error::InvalidParams(format!("s must exceed 1, got {s}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut orders: Vec<Vec<usize>> = vec![(0..=p).collect()];
    for _ in 0..permutations {
        let mut perm: Vec<usize> = (0..=p).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        orders.push(perm);
    }
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut total = 0u64;
    for (fi, family) in families.iter().enumerate() {
        for (oi, order) in orders.iter().enumerate() {
            for (mi, member) in family.members.iter().enumerate() {
                if member.len() != p + 1 || member.iter().any(|&n| !is_dyadic(n)) {
                    return Err(Error::InvalidParams(format!("bad dyad tuple {member:?}")));
                }
                let dyads: Vec<u64> = order.iter().map(|&j| member[j]).collect();
                let stream = ((fi * orders.len() + oi) * 1024 + mi) as u64;
                match dyadic_row(p, s, &dyads, trials, seed, stream)? {
                    Some(mut row) => {
                        row.family = family.name.clone();
                        row.permutation = oi;
                        total += row.tuples;
                        rows.push(row);
                    }
                    None => skipped.push(dyads),
                }
            }
        }
    }
    let mut slopes = Vec::new();
    for family in families {
        for oi in 0..orders.len() {
            for regime in [Regime::General, Regime::Refined] {
                let pts: Vec<&DyadicRow> = rows
                    .iter()
                    .filter(|r| r.family == family.name && r.permutation == oi && r.regime == regime && r.ratio > 0.0)
                    .collect();
                let mut n1: Vec<u64> = pts.iter().map(|r| r.n1).collect();
                n1.dedup();
                if n1.len() < 3 {
                    continue;
                }
                let x: Vec<f64> = pts.iter().map(|r| (r.n1 as f64).ln()).collect();
                let y: Vec<f64> = pts.iter().map(|r| r.ratio.ln()).collect();
                if let Some(fit) = linear_fit(&x, &y) {
                    slopes.push(DyadicSlope {
                        family: family.name.clone(),
                        permutation: oi,
                        regime,
                        points: pts.len(),
                        slope: fit.slope,
                    });
                }
            }
        }
    }
    let mut report = ScanReport::new(
        "dyadic_estimate",
        json!({"p": p, "s": s, "trials": trials, "permutations": permutations, "seed": seed,
               "families": families.iter().map(|f| f.name.clone()).collect::<Vec<_>>()}),
    );
    report.tuples_checked = total;
    let best = rows.iter().filter(|r| r.ratio.is_finite()).max_by(|a, b| a.ratio.total_cmp(&b.ratio));
    report.extremal_value = best.map_or(f64::NAN, |r| r.ratio);
    let max_slope = slopes.iter().map(|s| s.slope).fold(f64::NEG_INFINITY, f64::max);
    // Headline slope: largest ratio at each N_(1), fitted against N_(1).
    let mut envelope: BTreeMap<u64, f64> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.ratio.is_finite() && r.ratio > 0.0) {
        let e = envelope.entry(r.n1).or_insert(0.0);
        *e = e.max(r.ratio);
    }
    let ex: Vec<f64> = envelope.keys().map(|&n| (n as f64).ln()).collect();
    let ey: Vec<f64> = envelope.values().map(|r| r.ln()).collect();
    let envelope_slope = linear_fit(&ex, &ey).map_or(f64::NAN, |f| f.slope);
    report.violated = !(envelope_slope <= DYADIC_SLOPE_LIMIT);
    report.details = json!({
        "max_ratio_dyads": best.map(|r| r.dyads.clone()),
        "slope": envelope_slope,
        "envelope": envelope.iter().map(|(n, r)| json!({"N1": n, "max_ratio": r})).collect::<Vec<_>>(),
        "max_family_slope": max_slope,
        "slope_limit": DYADIC_SLOPE_LIMIT,
        "slopes": slopes,
        "rows": rows,
        "skipped_over_budget": skipped,
    });
    Ok(report)
}

fn block(n: u64) -> Vec<i64> {
    (-(n as i64)..=n as i64).filter(|&k| dyadic_block_contains(n, k)).collect()
}

/// One dyadic assignment; `None` when the enumeration exceeds [`DYADIC_BUDGET`].
fn dyadic_row(p: usize, s: f64, dyads: &[u64], trials: usize, seed: u64, stream: u64) -> Result<Option<DyadicRow>> {
    let slots = p + 1;
    let blocks: Vec<Vec<i64>> = dyads.iter().map(|&n| block(n)).collect();
    // Solve for the slot with the largest block.
    let solved = (0..slots).max_by_key(|&j| (blocks[j].len(), usize::MAX - j)).unwrap_or(0);
    let cost: f64 = (0..slots).filter(|&j| j != solved).map(|j| blocks[j].len() as f64).product();
    if cost > DYADIC_BUDGET {
        return Ok(None);
    }
    // Test sequences: index 0 is flat, the rest are random nonnegative, all unit ℓ² norm per slot.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let n_seq = trials + 1;
    let mut seqs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(slots);
    for b in &blocks {
        let mut per_slot = Vec::with_capacity(n_seq);
        per_slot.push(vec![1.0 / (b.len() as f64).sqrt(); b.len()]);
        for _ in 0..trials {
            let mut f: Vec<f64> = (0..b.len()).map(|_| rng.random::<f64>()).collect();
            let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            f.iter_mut().for_each(|x| *x /= norm);
            per_slot.push(f);
        }
        seqs.push(per_slot);
    }
    let lookup = |j: usize, k: i64| -> Option<usize> { blocks[j].binary_search(&k).ok() };
    let weights: Vec<f64> = {
        let max = *dyads.iter().max().unwrap_or(&1) as usize;
        (0..=max).map(|k| (k as f64).powf(2.0 * s)).collect()
    };
    let others: Vec<usize> = (0..slots).filter(|&j| j != solved).collect();
    let sign = |j: usize| if j % 2 == 0 { 1i64 } else { -1 };
    let mut lhs0 = vec![0.0; n_seq];
    let mut lhs1 = vec![0.0; n_seq];
    let mut idx = vec![0usize; slots];
    let mut k = vec![0i64; slots];
    let mut tuples = 0u64;
    loop {
        // Current assignment of the free slots.
        let mut lin = 0i64;
        for &j in &others {
            k[j] = blocks[j][idx[j]];
            lin += sign(j) * k[j];
        }
        let ks = -sign(solved) * lin;
        if let Some(pos) = lookup(solved, ks) {
            k[solved] = ks;
            idx[solved] = pos;
            tuples += 1;
            let t = FrequencyTuple::new(k.clone());
            let omega = t.omega();
            let psi = {
                let mut acc = 0.0;
                for (j, &kj) in k.iter().enumerate() {
                    acc += sign(j) as f64 * weights[kj.unsigned_abs() as usize];
                }
                acc
            };
            let (w0, w1) = if omega == 0 {
                (t.psi(s).abs(), 0.0)
            } else {
                (0.0, (psi / omega as f64).abs())
            };
            if w0 != 0.0 || w1 != 0.0 {
                for q in 0..n_seq {
                    let mut prod = 1.0;
                    for j in 0..slots {
                        prod *= seqs[j][q][idx[j]];
                    }
                    lhs0[q] += w0 * prod;
                    lhs1[q] += w1 * prod;
                }
            }
        }
        // Odometer over the free slots.
        let mut carry = true;
        for &j in &others {
            if !carry {
                break;
            }
            idx[j] += 1;
            if idx[j] == blocks[j].len() {
                idx[j] = 0;
            } else {
                carry = false;
            }
        }
        if carry {
            break;
        }
    }
    let regime = dyadic_regime(p, dyads);
    let rhs = dyadic_rhs(s, dyads, regime);
    let l0 = lhs0.iter().cloned().fold(0.0, f64::max);
    let l1 = lhs1.iter().cloned().fold(0.0, f64::max);
    let lhs = l0.max(l1);
    Ok(Some(DyadicRow {
        family: String::new(),
        permutation: 0,
        dyads: dyads.to_vec(),
        regime,
        n1: *dyads.iter().max().unwrap_or(&1),
        lhs_resonant: l0,
        lhs_nonresonant: l1,
        rhs,
        ratio: if lhs > 0.0 { lhs / rhs } else { f64::NAN },
        tuples,
    }))
}
