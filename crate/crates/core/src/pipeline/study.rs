use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cev::{DefaultDistanceRecord, ModelTag};
use crate::error::{Error, Result};
use crate::estimation::{
    dd_entry, fit_equivalent_vol, fit_fixed_effects, fit_scales_at_beta, AssetPanel, CevGroupFit,
    FitMethod, PanelEntry,
};
use crate::market_model::{classical_dd, invert_kmv, AssetSolution, FirmQuarterObservation, Group};
use crate::normal;
use crate::quarter::Quarter;
use crate::stats_tests::{gamma_mle, GammaFit, TestReport};

use super::config::{Estimator, FitScope, RunConfig};
use super::inputs::{as_of_date, default_point, estimate_equity_vol, fill_missing, RawInputs};

/// Largest fraction of a group's eligible firm-quarters that may fail in
/// any one model before the run aborts.
pub const EXCLUSION_LIMIT: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExclusionReason {
    /// Fewer than 250 daily returns before the as-of date. A filter.
    InsufficientHistory,
    /// The KMV inversion failed; excluded from every model.
    InversionFailed,
    /// Fewer than two usable quarters in the fit window. A filter.
    TooFewQuarters,
    /// The PDE grid check failed for this model.
    GridTooCoarse,
    /// Any other failure of the CEV probability for this model.
    ProbabilityFailed,
}

impl ExclusionReason {
    /// Failures count toward [`EXCLUSION_LIMIT`]; filters do not.
    pub fn is_failure(self) -> bool {
        !matches!(
            self,
            ExclusionReason::InsufficientHistory | ExclusionReason::TooFewQuarters
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub firm_id: String,
    pub quarter: Quarter,
    pub group: Group,
    /// `None` when the firm-quarter is excluded from every model.
    pub model: Option<ModelTag>,
    pub reason: ExclusionReason,
    pub detail: String,
}

/// Provenance of a nearest-neighbour fill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FillRecord {
    pub firm_id: String,
    pub quarter: Quarter,
    pub field: String,
    pub source: Quarter,
}

/// One inverted firm-quarter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub observation: FirmQuarterObservation,
    pub as_of: chrono::NaiveDate,
    pub solution: AssetSolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    /// Quarter whose distances use this fit; `None` for a pooled fit.
    pub for_quarter: Option<Quarter>,
    pub first: Quarter,
    pub last: Quarter,
    pub fit: CevGroupFit,
}

/// Distance-to-default statistics for one model, quarter and group over the
/// finite positive distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub model: ModelTag,
    pub quarter: Quarter,
    pub group: Group,
    pub n: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub gamma: Option<GammaFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: ModelTag,
    pub report: TestReport,
}

/// Everything a study produces. Report files are views of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyBundle {
    pub config: RunConfig,
    pub quarters: Vec<Quarter>,
    pub models: Vec<ModelTag>,
    /// Firm-quarters in the input, per group.
    pub input_counts: BTreeMap<Group, usize>,
    pub fills: Vec<FillRecord>,
    pub observations: Vec<ObservationRecord>,
    pub fits: Vec<FitRecord>,
    pub records: Vec<DefaultDistanceRecord>,
    pub exclusions: Vec<Exclusion>,
    pub summaries: Vec<GroupSummary>,
    pub reports: Vec<ModelReport>,
}

impl StudyBundle {
    pub fn records_for(&self, model: ModelTag) -> impl Iterator<Item = &DefaultDistanceRecord> {
        self.records.iter().filter(move |r| r.model == model)
    }

    pub fn summary(
        &self,
        model: ModelTag,
        quarter: Quarter,
        group: Group,
    ) -> Option<&GroupSummary> {
        self.summaries
            .iter()
            .find(|s| s.model == model && s.quarter == quarter && s.group == group)
    }

    pub fn report(&self, model: ModelTag, quarter: Quarter) -> Option<&TestReport> {
        self.reports
            .iter()
            .find(|r| r.model == model && r.report.quarter == quarter)
            .map(|r| &r.report)
    }
}

/// Distances entering the gamma fits and both tests.
pub fn usable_distance(distance: f64) -> bool {
    distance.is_finite() && distance > 0.0
}

struct Prepared {
    fills: Vec<FillRecord>,
    observations: Vec<(FirmQuarterObservation, chrono::NaiveDate)>,
    exclusions: Vec<Exclusion>,
}

fn prepare(inputs: &RawInputs, config: &RunConfig) -> Result<Prepared> {
    let mut fills = Vec::new();
    let mut observations = Vec::new();
    let mut exclusions = Vec::new();
    let mut start = 0;
    let rows = &inputs.fundamentals;
    while start < rows.len() {
        let firm = &rows[start].firm_id;
        let end = start
            + rows[start..]
                .iter()
                .take_while(|r| &r.firm_id == firm)
                .count();
        let firm_rows = &rows[start..end];
        start = end;

        let field = |name: &str, get: fn(&super::inputs::FundamentalRow) -> Option<f64>| {
            let series: Vec<_> = firm_rows.iter().map(|r| (r.quarter, get(r))).collect();
            fill_missing(&series, firm, name)
        };
        let equity = field("equity_value", |r| r.equity_value)?;
        let std_debt = field("std_debt", |r| r.std_debt)?;
        let ltd_debt = field("ltd_debt", |r| r.ltd_debt)?;
        for (name, filled) in [
            ("equity_value", &equity),
            ("std_debt", &std_debt),
            ("ltd_debt", &ltd_debt),
        ] {
            fills.extend(
                filled
                    .iter()
                    .filter(|f| f.was_filled())
                    .map(|f| FillRecord {
                        firm_id: firm.clone(),
                        quarter: f.quarter,
                        field: name.to_string(),
                        source: f.source,
                    }),
            );
        }

        let returns = inputs
            .daily_returns
            .get(firm)
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        for (i, row) in firm_rows.iter().enumerate() {
            let rate = *inputs
                .rates
                .get(&row.quarter)
                .ok_or_else(|| Error::Domain(format!("no rate for quarter {}", row.quarter)))?;
            let history = as_of_date(returns, row.quarter)
                .ok_or(Error::InsufficientHistory {
                    available: 0,
                    required: super::inputs::VOL_WINDOW,
                })
                .and_then(|as_of| estimate_equity_vol(returns, as_of).map(|vol| (as_of, vol)));
            match history {
                Ok((as_of, equity_vol)) => observations.push((
                    FirmQuarterObservation {
                        firm_id: firm.clone(),
                        quarter: row.quarter,
                        equity_value: equity[i].value,
                        equity_vol,
                        default_point: default_point(std_debt[i].value, ltd_debt[i].value),
                        rate,
                        horizon: config.horizon,
                        group: row.group,
                    },
                    as_of,
                )),
                Err(e @ Error::InsufficientHistory { .. }) => exclusions.push(Exclusion {
                    firm_id: firm.clone(),
                    quarter: row.quarter,
                    group: row.group,
                    model: None,
                    reason: ExclusionReason::InsufficientHistory,
                    detail: e.to_string(),
                }),
                Err(e) => return Err(e),
            }
        }
    }
    Ok(Prepared {
        fills,
        observations,
        exclusions,
    })
}

fn classical_record(
    obs: &FirmQuarterObservation,
    solution: &AssetSolution,
) -> Result<DefaultDistanceRecord> {
    let distance = if solution.degenerate {
        f64::INFINITY
    } else {
        classical_dd(solution, obs)?
    };
    Ok(DefaultDistanceRecord {
        firm_id: obs.firm_id.clone(),
        quarter: obs.quarter,
        group: obs.group,
        model: ModelTag::ClassicalKMV,
        probability: normal::cdf(-distance),
        distance,
    })
}

/// Fit windows: one pooled window, or an expanding window per quarter.
fn fit_windows(quarters: &[Quarter], scope: FitScope) -> Vec<(Option<Quarter>, Quarter, Quarter)> {
    let first = quarters[0];
    let last = *quarters.last().expect("non-empty");
    match scope {
        FitScope::Pooled => vec![(None, first, last)],
        FitScope::PerQuarter => quarters
            .iter()
            .map(|&q| (Some(q), first, q.max(*quarters.get(1).unwrap_or(&q))))
            .collect(),
    }
}

fn fit(method: FitMethod, panel: &AssetPanel, config: &RunConfig) -> Result<CevGroupFit> {
    match method {
        FitMethod::FixedEffects => fit_fixed_effects(panel),
        FitMethod::EquivalentVol => fit_equivalent_vol(panel, &config.calibration),
    }
}

/// Runs both models and every configured estimator over all quarters.
pub fn run_study(inputs: &RawInputs, config: &RunConfig) -> Result<StudyBundle> {
    config.validate()?;
    let quarters: Vec<Quarter> = inputs
        .fundamentals
        .iter()
        .map(|r| r.quarter)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if quarters.is_empty() {
        return Err(Error::Domain("no fundamentals rows".into()));
    }
    let mut input_counts = BTreeMap::new();
    for row in &inputs.fundamentals {
        *input_counts.entry(row.group).or_insert(0) += 1;
    }
    let methods: Vec<FitMethod> = match config.estimator {
        Estimator::FixedEffects => vec![FitMethod::FixedEffects],
        Estimator::EquivalentVol => vec![FitMethod::EquivalentVol],
        Estimator::Both => vec![FitMethod::FixedEffects, FitMethod::EquivalentVol],
    };
    let mut models = vec![ModelTag::ClassicalKMV];
    models.extend(methods.iter().map(|m| m.model_tag()));

    let Prepared {
        fills,
        observations,
        mut exclusions,
    } = prepare(inputs, config)?;
    info!(
        "{} firm-quarters with a full volatility window",
        observations.len()
    );

    let solved: Vec<Result<AssetSolution>> = observations
        .par_iter()
        .map(|(obs, _)| invert_kmv(obs))
        .collect();
    let mut kept = Vec::with_capacity(observations.len());
    for ((obs, as_of), solution) in observations.into_iter().zip(solved) {
        match solution {
            Ok(solution) => kept.push(ObservationRecord {
                observation: obs,
                as_of,
                solution,
            }),
            Err(e) => {
                warn!("{} {}: inversion failed: {e}", obs.firm_id, obs.quarter);
                exclusions.push(Exclusion {
                    firm_id: obs.firm_id,
                    quarter: obs.quarter,
                    group: obs.group,
                    model: None,
                    reason: ExclusionReason::InversionFailed,
                    detail: e.to_string(),
                });
            }
        }
    }

    let mut records = kept
        .iter()
        .map(|r| classical_record(&r.observation, &r.solution))
        .collect::<Result<Vec<_>>>()?;

    let mut fits = Vec::new();
    for &group in &Group::ALL {
        let members: Vec<&ObservationRecord> = kept
            .iter()
            .filter(|r| r.observation.group == group)
            .collect();
        if members.is_empty() {
            continue;
        }
        let panel_entry = |r: &ObservationRecord| PanelEntry {
            firm_id: r.observation.firm_id.clone(),
            quarter: r.observation.quarter,
            asset_value: r.solution.asset_value,
            asset_vol: r.solution.asset_vol,
            default_point: r.observation.default_point,
            rate: r.observation.rate,
            horizon: r.observation.horizon,
        };
        for &method in &methods {
            let model = method.model_tag();
            for (for_quarter, first, last) in fit_windows(&quarters, config.fit_scope) {
                // Firm-quarters whose distances come from this fit.
                let targets: Vec<&ObservationRecord> = members
                    .iter()
                    .copied()
                    .filter(|r| for_quarter.is_none_or(|q| r.observation.quarter == q))
                    .collect();
                let mut per_firm: BTreeMap<&str, Vec<PanelEntry>> = BTreeMap::new();
                for r in members.iter().filter(|r| {
                    let q = r.observation.quarter;
                    first <= q && q <= last && !r.solution.degenerate
                }) {
                    per_firm
                        .entry(&r.observation.firm_id)
                        .or_default()
                        .push(panel_entry(r));
                }
                if config.fixed_beta.is_none() {
                    per_firm.retain(|_, v| v.len() >= 2);
                }
                let entries: Vec<PanelEntry> = per_firm.values().flatten().cloned().collect();
                let group_fit = if entries.is_empty() {
                    None
                } else {
                    let f = match config.fixed_beta {
                        Some(beta) => {
                            fit_scales_at_beta(group, &entries, beta, method, &config.calibration)?
                        }
                        None => fit(method, &AssetPanel::new(group, entries)?, config)?,
                    };
                    info!(
                        "{group} {} [{first}, {last}]: beta = {:.4}",
                        method.label(),
                        f.beta
                    );
                    fits.push(FitRecord {
                        for_quarter,
                        first,
                        last,
                        fit: f.clone(),
                    });
                    Some(f)
                };

                let results: Vec<std::result::Result<DefaultDistanceRecord, Exclusion>> = targets
                    .par_iter()
                    .map(|r| {
                        let obs = &r.observation;
                        let exclusion = |reason, detail: String| Exclusion {
                            firm_id: obs.firm_id.clone(),
                            quarter: obs.quarter,
                            group,
                            model: Some(model),
                            reason,
                            detail,
                        };
                        if r.solution.degenerate {
                            return Ok(DefaultDistanceRecord {
                                firm_id: obs.firm_id.clone(),
                                quarter: obs.quarter,
                                group,
                                model,
                                probability: 0.0,
                                distance: f64::INFINITY,
                            });
                        }
                        let Some(f) = group_fit
                            .as_ref()
                            .filter(|f| f.deltas.contains_key(&obs.firm_id))
                        else {
                            return Err(exclusion(
                                ExclusionReason::TooFewQuarters,
                                format!("fewer than two usable quarters in [{first}, {last}]"),
                            ));
                        };
                        dd_entry(&panel_entry(r), group, f, &config.grid).map_err(|e| {
                            let reason = match e {
                                Error::GridTooCoarse { .. } => ExclusionReason::GridTooCoarse,
                                _ => ExclusionReason::ProbabilityFailed,
                            };
                            exclusion(reason, e.to_string())
                        })
                    })
                    .collect();
                for result in results {
                    match result {
                        Ok(record) => records.push(record),
                        Err(exclusion) => {
                            if exclusion.reason.is_failure() {
                                warn!(
                                    "{} {} {}: {}",
                                    exclusion.firm_id,
                                    exclusion.quarter,
                                    model.label(),
                                    exclusion.detail
                                );
                            }
                            exclusions.push(exclusion);
                        }
                    }
                }
            }
        }
    }

    check_exclusion_limit(&exclusions, &models, &input_counts)?;

    records.sort_by(|a, b| {
        (a.model, a.quarter, a.group, &a.firm_id).cmp(&(b.model, b.quarter, b.group, &b.firm_id))
    });
    exclusions.sort_by(|a, b| {
        (a.model, a.quarter, a.group, &a.firm_id, a.reason)
            .cmp(&(b.model, b.quarter, b.group, &b.firm_id, b.reason))
    });
    let (summaries, reports) = summarize(&records, &models, &quarters);

    Ok(StudyBundle {
        // where the bundle lands is not part of the result
        config: RunConfig {
            output_dir: PathBuf::new(),
            ..config.clone()
        },
        quarters,
        models,
        input_counts,
        fills,
        observations: kept,
        fits,
        records,
        exclusions,
        summaries,
        reports,
    })
}

/// Aborts when failures in any model exceed the limit within a group. The
/// denominator is the group's firm-quarters that passed the history filter.
fn check_exclusion_limit(
    exclusions: &[Exclusion],
    models: &[ModelTag],
    input_counts: &BTreeMap<Group, usize>,
) -> Result<()> {
    for (&group, &count) in input_counts {
        let filtered = exclusions
            .iter()
            .filter(|e| e.group == group && e.reason == ExclusionReason::InsufficientHistory)
            .count();
        let eligible = count - filtered;
        for &model in models {
            let failed = exclusions
                .iter()
                .filter(|e| {
                    e.group == group && e.reason.is_failure() && e.model.is_none_or(|m| m == model)
                })
                .count();
            if failed as f64 > EXCLUSION_LIMIT * eligible as f64 {
                return Err(Error::ExclusionThreshold {
                    group: format!("{group} ({})", model.label()),
                    excluded: failed,
                    total: eligible,
                });
            }
        }
    }
    Ok(())
}

fn mean_std(sample: &[f64]) -> (Option<f64>, Option<f64>) {
    if sample.is_empty() {
        return (None, None);
    }
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let std = (sample.len() > 1)
        .then(|| (sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

fn summarize(
    records: &[DefaultDistanceRecord],
    models: &[ModelTag],
    quarters: &[Quarter],
) -> (Vec<GroupSummary>, Vec<ModelReport>) {
    let mut samples: BTreeMap<(ModelTag, Quarter, Group), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| usable_distance(r.distance)) {
        samples
            .entry((r.model, r.quarter, r.group))
            .or_default()
            .push(r.distance);
    }
    let empty = Vec::new();
    let mut summaries = Vec::new();
    let mut reports = Vec::new();
    for &model in models {
        for &quarter in quarters {
            for &group in &Group::ALL {
                let sample = samples.get(&(model, quarter, group)).unwrap_or(&empty);
                let (mean, std) = mean_std(sample);
                summaries.push(GroupSummary {
                    model,
                    quarter,
                    group,
                    n: sample.len(),
                    mean,
                    std,
                    gamma: gamma_mle(sample).ok(),
                });
            }
            let st = samples.get(&(model, quarter, Group::St)).unwrap_or(&empty);
            let nst = samples
                .get(&(model, quarter, Group::NonSt))
                .unwrap_or(&empty);
            match TestReport::compute(quarter, st, nst) {
                Ok(report) => reports.push(ModelReport { model, report }),
                Err(e) => warn!("{} {quarter}: no test report: {e}", model.label()),
            }
        }
    }
    (summaries, reports)
}
