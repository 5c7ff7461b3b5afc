//! Group-level estimation of the CEV elasticity β and per-firm scales δ_i.
//!
//! Two estimators share one panel type:
//!
//! - fixed effects: OLS of ln σ_A on ln V_A with firm intercepts, from the
//!   log-linear relation ln σ_A = ln δ_i + (β − 1) ln V_A;
//! - equivalent volatility: least squares in log-vol space between the
//!   observed σ_A and the Hagan-Woodward equivalent volatility, with a
//!   golden-section search on β and per-firm Newton solves for ln δ_i.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cev::{
    cev_dd, cev_default_probability, CevParams, DefaultDistanceRecord, GridSettings, ModelTag,
};
use crate::error::{domain, require_positive, Error, Result};
use crate::market_model::Group;
use crate::quarter::Quarter;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelEntry {
    pub firm_id: String,
    pub quarter: Quarter,
    pub asset_value: f64,
    pub asset_vol: f64,
    pub default_point: f64,
    pub rate: f64,
    pub horizon: f64,
}

/// Firm-quarter asset observations of one group, sorted by (firm, quarter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetPanel {
    group: Group,
    entries: Vec<PanelEntry>,
}

impl AssetPanel {
    /// Validates positivity and that every firm has at least two quarters.
    pub fn new(group: Group, mut entries: Vec<PanelEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(domain("asset panel is empty"));
        }
        for e in &entries {
            if !(e.asset_value.is_finite()
                && e.asset_value > 0.0
                && e.asset_vol.is_finite()
                && e.asset_vol > 0.0)
            {
                return Err(domain(format!(
                    "firm {} {}: asset value and volatility must be positive",
                    e.firm_id, e.quarter
                )));
            }
            if !(e.default_point.is_finite()
                && e.default_point >= 0.0
                && e.rate.is_finite()
                && e.horizon > 0.0)
            {
                return Err(domain(format!(
                    "firm {} {}: invalid debt, rate or horizon",
                    e.firm_id, e.quarter
                )));
            }
        }
        entries.sort_by(|a, b| a.firm_id.cmp(&b.firm_id).then(a.quarter.cmp(&b.quarter)));
        for w in entries.windows(2) {
            if w[0].firm_id == w[1].firm_id && w[0].quarter == w[1].quarter {
                return Err(domain(format!(
                    "duplicate entry for firm {} {}",
                    w[0].firm_id, w[0].quarter
                )));
            }
        }
        let panel = Self { group, entries };
        for (firm, rows) in panel.by_firm() {
            if rows.len() < 2 {
                return Err(domain(format!(
                    "firm {firm} has a single quarter; fixed effects are unidentified"
                )));
            }
        }
        Ok(panel)
    }

    pub fn group(&self) -> Group {
        self.group
    }

    pub fn entries(&self) -> &[PanelEntry] {
        &self.entries
    }

    pub fn firms(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.firm_id.as_str()).collect();
        set.into_iter().collect()
    }

    pub fn quarters(&self) -> Vec<Quarter> {
        let set: BTreeSet<Quarter> = self.entries.iter().map(|e| e.quarter).collect();
        set.into_iter().collect()
    }

    /// Contiguous per-firm slices, in firm order.
    pub fn by_firm(&self) -> Vec<(&str, &[PanelEntry])> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.entries.len() {
            if i == self.entries.len() || self.entries[i].firm_id != self.entries[start].firm_id {
                out.push((
                    self.entries[start].firm_id.as_str(),
                    &self.entries[start..i],
                ));
                start = i;
            }
        }
        out
    }

    /// Sub-panel restricted to quarters in [first, last]; firms left with
    /// fewer than two quarters are dropped.
    pub fn window(&self, first: Quarter, last: Quarter) -> Result<Self> {
        let kept: Vec<PanelEntry> = self
            .by_firm()
            .into_iter()
            .flat_map(|(_, rows)| {
                let inside: Vec<PanelEntry> = rows
                    .iter()
                    .filter(|e| e.quarter >= first && e.quarter <= last)
                    .cloned()
                    .collect();
                if inside.len() >= 2 {
                    inside
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self::new(self.group, kept)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FitMethod {
    FixedEffects,
    EquivalentVol,
}

impl FitMethod {
    pub fn model_tag(self) -> ModelTag {
        match self {
            FitMethod::FixedEffects => ModelTag::CevKmvFE,
            FitMethod::EquivalentVol => ModelTag::CevKmvEV,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FitMethod::FixedEffects => "FixedEffects",
            FitMethod::EquivalentVol => "EquivalentVol",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CevGroupFit {
    pub group: Group,
    pub beta: f64,
    pub deltas: BTreeMap<String, f64>,
    pub method: FitMethod,
    pub sse: f64,
    pub n_obs: usize,
    /// Equivalent-vol calibration only: (β, objective) of the best point
    /// after each outer iteration.
    pub trace: Vec<(f64, f64)>,
}

impl CevGroupFit {
    pub fn params(&self, firm_id: &str) -> Result<CevParams> {
        let delta = self
            .deltas
            .get(firm_id)
            .ok_or_else(|| domain(format!("fit has no scale for firm {firm_id}")))?;
        CevParams::new(*delta, self.beta)
    }
}

/// Fixed-effects OLS:
///
/// ```text
/// β̂ = 1 + Σ (ln V − mean_i ln V)(ln σ − mean_i ln σ) / Σ (ln V − mean_i ln V)²
/// ln δ̂_i = mean_i ln σ − (β̂ − 1) mean_i ln V
/// ```
///
/// Firms without within variation of ln V add nothing to either sum but
/// still receive a scale.
pub fn fit_fixed_effects(panel: &AssetPanel) -> Result<CevGroupFit> {
    let firms = panel.by_firm();
    let mut moments = Vec::with_capacity(firms.len());
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (firm, rows) in &firms {
        let n = rows.len() as f64;
        let mx = rows.iter().map(|e| e.asset_value.ln()).sum::<f64>() / n;
        let my = rows.iter().map(|e| e.asset_vol.ln()).sum::<f64>() / n;
        for e in rows.iter() {
            let dx = e.asset_value.ln() - mx;
            sxy += dx * (e.asset_vol.ln() - my);
            sxx += dx * dx;
        }
        moments.push((*firm, mx, my));
    }
    if !(sxx > 0.0) {
        return Err(Error::NoWithinVariation);
    }
    let slope = sxy / sxx;
    let beta = 1.0 + slope;
    let mut deltas = BTreeMap::new();
    let mut sse = 0.0;
    for ((firm, mx, my), (_, rows)) in moments.iter().zip(&firms) {
        let ln_delta = my - slope * mx;
        for e in rows.iter() {
            let r = e.asset_vol.ln() - ln_delta - slope * e.asset_value.ln();
            sse += r * r;
        }
        deltas.insert(firm.to_string(), ln_delta.exp());
    }
    Ok(CevGroupFit {
        group: panel.group(),
        beta,
        deltas,
        method: FitMethod::FixedEffects,
        sse,
        n_obs: panel.entries().len(),
        trace: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub beta_range: (f64, f64),
    /// Width of the final golden-section bracket on β.
    pub beta_tolerance: f64,
    /// Step tolerance of the inner ln δ_i solves.
    pub delta_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            beta_range: (0.2, 2.0),
            beta_tolerance: 1e-4,
            delta_tolerance: 1e-8,
            max_iterations: 200,
        }
    }
}

/// Per-observation constants of ln σ_B as a function of y = ln δ at fixed β:
///
/// ```text
/// ln σ_B = y − (1−β) ln f + ln(1 + A + B e^{2y})
/// A = (1−β)(2+β) ((F−K)/f)² / 24,   B = (1−β)² T / (24 f^{2−2β})
/// ```
struct Term {
    target: f64,
    offset: f64,
    a: f64,
    b: f64,
}

fn firm_terms(rows: &[PanelEntry], beta: f64) -> Vec<Term> {
    let p = 1.0 - beta;
    rows.iter()
        .map(|e| {
            let forward = (e.rate * e.horizon).exp() * e.asset_value;
            let strike = e.default_point;
            let f = 0.5 * (forward + strike);
            let m = (forward - strike) / f;
            Term {
                target: e.asset_vol.ln(),
                offset: -p * f.ln(),
                a: p * (2.0 + beta) * m * m / 24.0,
                b: p * p * e.horizon / (24.0 * f.powf(2.0 * p)),
            }
        })
        .collect()
}

fn firm_objective(terms: &[Term], y: f64) -> f64 {
    let e2y = (2.0 * y).exp();
    terms
        .iter()
        .map(|t| {
            let inner = 1.0 + t.a + t.b * e2y;
            if inner <= 0.0 {
                return f64::INFINITY;
            }
            let r = t.target - (y + t.offset + inner.ln());
            r * r
        })
        .sum()
}

/// Minimizes one firm's squared log-vol residuals over y = ln δ by Newton's
/// method (Gauss-Newton where the Hessian is not positive).
fn solve_firm(terms: &[Term], tolerance: f64, max_iterations: usize) -> Result<(f64, f64)> {
    // start from the fit without the convexity term, which is linear in y
    let mut y = terms
        .iter()
        .map(|t| t.target - t.offset - (1.0 + t.a).max(1e-12).ln())
        .sum::<f64>()
        / terms.len() as f64;
    let mut objective = firm_objective(terms, y);
    for _ in 0..max_iterations {
        let e2y = (2.0 * y).exp();
        let (mut grad, mut hess, mut gauss) = (0.0, 0.0, 0.0);
        for t in terms {
            let inner = 1.0 + t.a + t.b * e2y;
            let r = t.target - (y + t.offset + inner.ln());
            let h1 = 1.0 + 2.0 * t.b * e2y / inner;
            let h2 = 4.0 * t.b * e2y * (1.0 + t.a) / (inner * inner);
            grad -= r * h1;
            hess += h1 * h1 - r * h2;
            gauss += h1 * h1;
        }
        let curvature = if hess > 0.0 { hess } else { gauss };
        let mut step = -grad / curvature;
        let mut trial = firm_objective(terms, y + step);
        let mut halvings = 0;
        while !(trial <= objective) && halvings < 60 {
            step *= 0.5;
            trial = firm_objective(terms, y + step);
            halvings += 1;
        }
        if trial <= objective {
            y += step;
            objective = trial;
        }
        if step.abs() < tolerance {
            return Ok((y, objective));
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iterations,
        residual: objective,
    })
}

struct Profile {
    objective: f64,
    ln_deltas: Vec<f64>,
}

fn profile(
    firms: &[(&str, &[PanelEntry])],
    beta: f64,
    settings: &CalibrationSettings,
) -> Result<Profile> {
    let solved: Vec<(f64, f64)> = firms
        .par_iter()
        .map(|(_, rows)| {
            solve_firm(
                &firm_terms(rows, beta),
                settings.delta_tolerance,
                settings.max_iterations,
            )
        })
        .collect::<Result<_>>()?;
    Ok(Profile {
        objective: solved.iter().map(|s| s.1).sum(),
        ln_deltas: solved.iter().map(|s| s.0).collect(),
    })
}

/// Equivalent-volatility calibration: minimizes
///
/// ```text
/// Σ_{i,t} [ln σ_A(i,t) − ln σ_B(V_A(i,t), D(i,t), r, T; δ_i, β)]²
/// ```
///
/// by golden-section search on β within `settings.beta_range` and, at each
/// trial β, independent Newton solves for every ln δ_i.
///
/// Fails with `CalibrationDiverged` when the minimum sits at an end of the
/// search range.
pub fn fit_equivalent_vol(
    panel: &AssetPanel,
    settings: &CalibrationSettings,
) -> Result<CevGroupFit> {
    let (lo, hi) = settings.beta_range;
    if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi) {
        return Err(domain(format!(
            "beta range ({lo}, {hi}) must be a finite interval in (0, inf)"
        )));
    }
    if !(settings.beta_tolerance > 0.0 && settings.delta_tolerance > 0.0) {
        return Err(domain("calibration tolerances must be positive"));
    }
    let firms = panel.by_firm();
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;

    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = profile(&firms, c, settings)?;
    let mut fd = profile(&firms, d, settings)?;
    let mut trace = Vec::new();
    let mut iterations = 0;
    while b - a > settings.beta_tolerance {
        if fc.objective <= fd.objective {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = profile(&firms, c, settings)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = profile(&firms, d, settings)?;
        }
        let best = if fc.objective <= fd.objective {
            (c, fc.objective)
        } else {
            (d, fd.objective)
        };
        trace.push(best);
        iterations += 1;
        if iterations > settings.max_iterations {
            return Err(Error::NoConvergence {
                iterations,
                residual: b - a,
            });
        }
    }
    let (beta, best) = if fc.objective <= fd.objective {
        (c, fc)
    } else {
        (d, fd)
    };
    debug!(
        "{}: equivalent-vol beta {beta:.6} after {iterations} outer iterations",
        panel.group()
    );
    if beta - lo <= settings.beta_tolerance || hi - beta <= settings.beta_tolerance {
        return Err(Error::CalibrationDiverged {
            beta,
            lower: lo,
            upper: hi,
        });
    }
    let deltas = firms
        .iter()
        .zip(&best.ln_deltas)
        .map(|((firm, _), y)| (firm.to_string(), y.exp()))
        .collect();
    Ok(CevGroupFit {
        group: panel.group(),
        beta,
        deltas,
        method: FitMethod::EquivalentVol,
        sse: best.objective,
        n_obs: panel.entries().len(),
        trace,
    })
}

/// Per-firm scales at a given β, by either estimator's inner step. Unlike
/// the β estimators this needs only one quarter per firm, so it takes plain
/// entries rather than an [`AssetPanel`].
pub fn fit_scales_at_beta(
    group: Group,
    entries: &[PanelEntry],
    beta: f64,
    method: FitMethod,
    settings: &CalibrationSettings,
) -> Result<CevGroupFit> {
    require_positive("beta", beta)?;
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| a.firm_id.cmp(&b.firm_id).then(a.quarter.cmp(&b.quarter)));
    let mut firms: Vec<(&str, &[PanelEntry])> = Vec::new();
    let mut start = 0;
    while start < sorted.len() {
        let id = sorted[start].firm_id.as_str();
        let len = sorted[start..]
            .iter()
            .take_while(|e| e.firm_id == id)
            .count();
        firms.push((id, &sorted[start..start + len]));
        start += len;
    }
    if firms.is_empty() {
        return Err(domain("no entries to fit"));
    }
    let ln_deltas: Vec<(f64, f64)> = match method {
        FitMethod::FixedEffects => firms
            .iter()
            .map(|(_, rows)| {
                let slope = beta - 1.0;
                let n = rows.len() as f64;
                let y = rows
                    .iter()
                    .map(|e| e.asset_vol.ln() - slope * e.asset_value.ln())
                    .sum::<f64>()
                    / n;
                let sse = rows
                    .iter()
                    .map(|e| (e.asset_vol.ln() - y - slope * e.asset_value.ln()).powi(2))
                    .sum();
                (y, sse)
            })
            .collect(),
        FitMethod::EquivalentVol => firms
            .par_iter()
            .map(|(_, rows)| {
                solve_firm(
                    &firm_terms(rows, beta),
                    settings.delta_tolerance,
                    settings.max_iterations,
                )
            })
            .collect::<Result<_>>()?,
    };
    Ok(CevGroupFit {
        group,
        beta,
        deltas: firms
            .iter()
            .zip(&ln_deltas)
            .map(|((f, _), (y, _))| (f.to_string(), y.exp()))
            .collect(),
        method,
        sse: ln_deltas.iter().map(|(_, sse)| sse).sum(),
        n_obs: sorted.len(),
        trace: Vec::new(),
    })
}

/// Equivalent-vol objective at a fixed β with every ln δ_i profiled out.
pub fn equivalent_vol_objective(
    panel: &AssetPanel,
    beta: f64,
    settings: &CalibrationSettings,
) -> Result<f64> {
    Ok(profile(&panel.by_firm(), beta, settings)?.objective)
}

/// CEV default probability and distance for one panel entry.
pub fn dd_entry(
    entry: &PanelEntry,
    group: Group,
    fit: &CevGroupFit,
    settings: &GridSettings,
) -> Result<DefaultDistanceRecord> {
    let params = fit.params(&entry.firm_id)?;
    let grid = settings.grid_for(
        entry.asset_value,
        entry.default_point,
        entry.rate,
        entry.horizon,
        params,
    );
    let probability = cev_default_probability(
        entry.asset_value,
        params,
        entry.default_point,
        entry.rate,
        entry.horizon,
        &grid,
    )?;
    Ok(DefaultDistanceRecord {
        firm_id: entry.firm_id.clone(),
        quarter: entry.quarter,
        group,
        model: fit.method.model_tag(),
        probability,
        distance: cev_dd(probability),
    })
}

/// Per-entry results, in panel order, without stopping at the first failure.
pub fn dd_entries(
    panel: &AssetPanel,
    fit: &CevGroupFit,
    settings: &GridSettings,
) -> Vec<Result<DefaultDistanceRecord>> {
    panel
        .entries()
        .par_iter()
        .map(|e| dd_entry(e, panel.group(), fit, settings))
        .collect()
}

/// CEV distances to default for every panel entry under `fit`.
pub fn dd_panel(
    panel: &AssetPanel,
    fit: &CevGroupFit,
    settings: &GridSettings,
) -> Result<Vec<DefaultDistanceRecord>> {
    dd_entries(panel, fit, settings).into_iter().collect()
}
