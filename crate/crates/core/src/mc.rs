//! Monte-Carlo simulation of GBM and CEV asset paths.
//!
//! Paths are generated in fixed-size blocks; block `b` draws from a ChaCha8
//! stream seeded with the run seed and stream id `b`, and block results are
//! reduced in block order. Results are therefore bit-identical for a given
//! seed regardless of the number of worker threads.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cev::{equivalent_vol_unchecked, CevParams};
use crate::error::{domain, require_finite, require_positive, Result};
use crate::estimation::{AssetPanel, PanelEntry};
use crate::market_model::{bsm_call, Group};
use crate::pipeline::{FundamentalRow, RawInputs};
use crate::quarter::Quarter;

/// Paths per block.
const BLOCK: usize = 4096;

/// Default Euler step density: one step per trading day.
pub const STEPS_PER_YEAR: usize = 250;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Dynamics {
    Gbm { sigma: f64 },
    Cev { delta: f64, beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub dynamics: Dynamics,
    pub v0: f64,
    pub rate: f64,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
}

impl SimSpec {
    /// Spec with the default step density of 250 steps per year.
    pub fn new(
        dynamics: Dynamics,
        v0: f64,
        rate: f64,
        horizon: f64,
        paths: usize,
        seed: u64,
    ) -> Self {
        let steps = ((horizon * STEPS_PER_YEAR as f64).round() as usize).max(1);
        Self {
            dynamics,
            v0,
            rate,
            horizon,
            steps,
            paths,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        require_positive("v0", self.v0)?;
        require_finite("rate", self.rate)?;
        require_positive("horizon", self.horizon)?;
        if self.steps == 0 || self.paths == 0 {
            return Err(domain("steps and paths must be at least 1"));
        }
        match self.dynamics {
            Dynamics::Gbm { sigma } => {
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err(domain("GBM sigma must be finite and >= 0"));
                }
            }
            Dynamics::Cev { delta, beta } => {
                CevParams::new(delta, beta)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefaultEstimate {
    /// Fraction of paths with V(T) < D.
    pub estimate: f64,
    pub std_error: f64,
    /// Fraction of CEV paths absorbed at zero.
    pub absorbed: f64,
    /// Sample mean of e^{-rT} V(T) and its standard error.
    pub discounted_mean: f64,
    pub discounted_mean_se: f64,
}

#[derive(Default, Clone, Copy)]
struct BlockStats {
    below: u64,
    absorbed: u64,
    sum: f64,
    sum_sq: f64,
}

fn block_rng(seed: u64, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block);
    rng
}

fn simulate_block(spec: &SimSpec, default_point: f64, block: usize, paths: usize) -> BlockStats {
    let mut rng = block_rng(spec.seed, block as u64);
    let dt = spec.horizon / spec.steps as f64;
    let sqrt_dt = dt.sqrt();
    let discount = (-spec.rate * spec.horizon).exp();
    let mut stats = BlockStats::default();
    for _ in 0..paths {
        let mut v = spec.v0;
        let mut absorbed = false;
        match spec.dynamics {
            Dynamics::Gbm { sigma } => {
                let drift = (spec.rate - 0.5 * sigma * sigma) * dt;
                let shock = sigma * sqrt_dt;
                for _ in 0..spec.steps {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v *= (drift + shock * z).exp();
                }
            }
            Dynamics::Cev { delta, beta } => {
                let shock = delta * sqrt_dt;
                for step in 0..spec.steps {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v += spec.rate * v * dt + shock * v.powf(beta) * z;
                    if v <= 0.0 {
                        v = 0.0;
                        absorbed = true;
                        // keep the stream aligned with unabsorbed paths
                        for _ in (step + 1)..spec.steps {
                            let _: f64 = StandardNormal.sample(&mut rng);
                        }
                        break;
                    }
                }
            }
        }
        if v < default_point {
            stats.below += 1;
        }
        if absorbed {
            stats.absorbed += 1;
        }
        let pv = discount * v;
        stats.sum += pv;
        stats.sum_sq += pv * pv;
    }
    stats
}

/// Estimates P(V(T) < D) by simulation.
///
/// GBM paths use the exact lognormal step; CEV paths use Euler-Maruyama on
/// the level with absorption at zero (absorbed paths count as defaults).
pub fn simulate_default_prob(spec: &SimSpec, default_point: f64) -> Result<DefaultEstimate> {
    spec.validate()?;
    require_finite("default_point", default_point)?;
    let blocks = spec.paths.div_ceil(BLOCK);
    let stats: Vec<BlockStats> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let paths = BLOCK.min(spec.paths - b * BLOCK);
            simulate_block(spec, default_point, b, paths)
        })
        .collect();
    let total = stats
        .iter()
        .fold(BlockStats::default(), |acc, s| BlockStats {
            below: acc.below + s.below,
            absorbed: acc.absorbed + s.absorbed,
            sum: acc.sum + s.sum,
            sum_sq: acc.sum_sq + s.sum_sq,
        });
    let n = spec.paths as f64;
    let p = total.below as f64 / n;
    let mean = total.sum / n;
    let var = (total.sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok(DefaultEstimate {
        estimate: p,
        std_error: (p * (1.0 - p) / n).sqrt(),
        absorbed: total.absorbed as f64 / n,
        discounted_mean: mean,
        discounted_mean_se: (var / n).sqrt(),
    })
}

/// How the synthetic asset volatility relates to the planted CEV law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VolLaw {
    /// σ_A = δ V^{β-1}: the local volatility at the current asset level.
    Local,
    /// σ_A = Hagan-Woodward equivalent volatility for strike D and the
    /// configured horizon.
    Equivalent,
}

/// One group of synthetic firms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group: Group,
    pub beta: f64,
    /// Median initial asset value across firms.
    pub asset_median: f64,
    /// Cross-sectional standard deviation of ln initial asset value.
    pub asset_dispersion: f64,
    /// Range of local volatility at the initial asset level.
    pub local_vol: (f64, f64),
    /// Range of default point over initial asset value.
    pub leverage: (f64, f64),
    pub rate: f64,
    pub horizon: f64,
    pub vol_law: VolLaw,
}

impl GroupSpec {
    fn validate(&self) -> Result<()> {
        require_positive("beta", self.beta)?;
        require_positive("asset_median", self.asset_median)?;
        require_finite("asset_dispersion", self.asset_dispersion)?;
        require_positive("local_vol lower", self.local_vol.0)?;
        require_positive("leverage lower", self.leverage.0)?;
        require_positive("horizon", self.horizon)?;
        if self.local_vol.1 < self.local_vol.0 || self.leverage.1 < self.leverage.0 {
            return Err(domain("ranges must be ordered (low, high)"));
        }
        Ok(())
    }
}

fn uniform_in(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Generates one asset panel per group spec.
///
/// Each firm draws an initial asset value, a leverage (fixed default point)
/// and a volatility scale δ_i; its asset value then follows the planted CEV
/// law at quarterly steps. Observed asset volatilities follow `vol_law`
/// times independent log-normal noise with standard deviation `noise`.
pub fn simulate_panel(
    specs: &[GroupSpec],
    firms: usize,
    quarters: usize,
    start: Quarter,
    noise: f64,
    seed: u64,
) -> Result<Vec<AssetPanel>> {
    if firms == 0 || quarters < 2 {
        return Err(domain("need at least one firm and two quarters"));
    }
    require_finite("noise", noise)?;
    let step = 0.25;
    specs
        .iter()
        .enumerate()
        .map(|(g, spec)| {
            spec.validate()?;
            let mut rng = block_rng(seed, g as u64);
            let mut entries = Vec::with_capacity(firms * quarters);
            for i in 0..firms {
                let firm_id = format!("{}{:04}", spec.group.label(), i + 1);
                let z: f64 = StandardNormal.sample(&mut rng);
                let v_init = spec.asset_median * (spec.asset_dispersion * z).exp();
                let vol0 = uniform_in(&mut rng, spec.local_vol);
                let params = CevParams::from_local_vol(vol0, v_init, spec.beta)?;
                let default_point = uniform_in(&mut rng, spec.leverage) * v_init;
                let mut v = v_init;
                let mut quarter = start;
                for _ in 0..quarters {
                    let clean = match spec.vol_law {
                        VolLaw::Local => params.local_vol(v),
                        VolLaw::Equivalent => {
                            let forward = (spec.rate * spec.horizon).exp() * v;
                            let f = 0.5 * (forward + default_point);
                            equivalent_vol_unchecked(
                                forward,
                                default_point,
                                f,
                                spec.horizon,
                                params.delta,
                                params.beta,
                            )
                        }
                    };
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    entries.push(PanelEntry {
                        firm_id: firm_id.clone(),
                        quarter,
                        asset_value: v,
                        asset_vol: clean * (noise * eps).exp(),
                        default_point,
                        rate: spec.rate,
                        horizon: spec.horizon,
                    });
                    let local = params.local_vol(v);
                    let w: f64 = StandardNormal.sample(&mut rng);
                    v *= ((spec.rate - 0.5 * local * local) * step + local * step.sqrt() * w).exp();
                    quarter = quarter.next();
                }
            }
            AssetPanel::new(spec.group, entries)
        })
        .collect()
}

/// One group of a synthetic daily study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyGroupSpec {
    pub group: Group,
    pub firms: usize,
    pub beta: f64,
    /// Median initial asset value across firms.
    pub asset_median: f64,
    /// Cross-sectional standard deviation of ln initial asset value.
    pub asset_dispersion: f64,
    /// Range of local volatility at the initial asset level.
    pub local_vol: (f64, f64),
    /// Range of default point over initial asset value.
    pub leverage: (f64, f64),
}

/// A synthetic study in the raw-input format: daily returns, quarterly
/// fundamentals and rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub groups: Vec<StudyGroupSpec>,
    /// First reported quarter; one year of returns precedes it.
    pub start: Quarter,
    pub quarters: usize,
    pub rate: f64,
    pub horizon: f64,
    /// Probability that each debt field of a fundamentals row is blank.
    pub missing: f64,
}

impl StudySpec {
    /// Two groups at the scale of the listed-firm summary statistics: ST
    /// equity near 3.8 billion with default point near 4.9 billion and
    /// equity volatility near 0.48; NonST near 19.6, 28.4 billion and 0.41.
    pub fn two_group(
        beta_st: f64,
        beta_non_st: f64,
        firms: (usize, usize),
        quarters: usize,
    ) -> Self {
        Self {
            groups: vec![
                StudyGroupSpec {
                    group: Group::St,
                    firms: firms.0,
                    beta: beta_st,
                    asset_median: 6.8e9,
                    asset_dispersion: 0.5,
                    local_vol: (0.12, 0.22),
                    leverage: (0.40, 0.70),
                },
                StudyGroupSpec {
                    group: Group::NonSt,
                    firms: firms.1,
                    beta: beta_non_st,
                    asset_median: 40.0e9,
                    asset_dispersion: 0.5,
                    local_vol: (0.10, 0.18),
                    leverage: (0.50, 0.78),
                },
            ],
            start: Quarter::new(2019, 1).expect("valid quarter"),
            quarters,
            rate: 0.03,
            horizon: 1.0,
            missing: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.quarters == 0 || self.groups.is_empty() {
            return Err(domain("need at least one group and one quarter"));
        }
        require_finite("rate", self.rate)?;
        require_positive("horizon", self.horizon)?;
        if !(0.0..1.0).contains(&self.missing) {
            return Err(domain("missing probability must lie in [0, 1)"));
        }
        for g in &self.groups {
            require_positive("beta", g.beta)?;
            require_positive("asset_median", g.asset_median)?;
            require_finite("asset_dispersion", g.asset_dispersion)?;
            require_positive("local_vol lower", g.local_vol.0)?;
            require_positive("leverage lower", g.leverage.0)?;
            if g.local_vol.1 < g.local_vol.0 || g.leverage.1 < g.leverage.0 {
                return Err(domain("ranges must be ordered (low, high)"));
            }
        }
        Ok(())
    }
}

/// Weekdays from `first` through `last`.
pub fn business_days(first: NaiveDate, last: NaiveDate) -> Vec<NaiveDate> {
    first
        .iter_days()
        .take_while(|d| *d <= last)
        .filter(|d| d.weekday().number_from_monday() <= 5)
        .collect()
}

/// Generates raw study inputs. Each firm's asset value follows the planted
/// CEV law at daily steps; equity is the Black-Scholes-Merton call on assets
/// at the current local volatility, and returns are simple daily returns of
/// equity. Fundamentals are written at each quarter's last business day,
/// with the default point split into short- and long-term debt.
pub fn simulate_raw_inputs(spec: &StudySpec, seed: u64) -> Result<RawInputs> {
    spec.validate()?;
    let quarters: Vec<Quarter> = std::iter::successors(Some(spec.start), |q| Some(q.next()))
        .take(spec.quarters)
        .collect();
    let last_quarter = *quarters.last().expect("at least one quarter");
    let first_day = spec.start.end_date() - chrono::Months::new(15);
    let days = business_days(first_day, last_quarter.end_date());
    let quarter_ends: Vec<usize> = quarters
        .iter()
        .map(|q| days.partition_point(|d| *d <= q.end_date()) - 1)
        .collect();

    let firms: Vec<(usize, StudyGroupSpec)> = spec
        .groups
        .iter()
        .flat_map(|g| (0..g.firms).map(move |i| (i, *g)))
        .collect();
    let dt = 1.0 / STEPS_PER_YEAR as f64;
    type FirmSeries = (String, Vec<(NaiveDate, f64)>, Vec<FundamentalRow>);
    let simulated: Vec<Result<FirmSeries>> = firms
        .par_iter()
        .enumerate()
        .map(|(stream, &(i, g))| {
            let mut rng = block_rng(seed, stream as u64);
            let firm_id = format!("{}{:04}", g.group.label(), i + 1);
            let z: f64 = StandardNormal.sample(&mut rng);
            let mut v = g.asset_median * (g.asset_dispersion * z).exp();
            let params = CevParams::from_local_vol(uniform_in(&mut rng, g.local_vol), v, g.beta)?;
            let default_point = uniform_in(&mut rng, g.leverage) * v;
            let short_share = uniform_in(&mut rng, (0.3, 0.7));
            let std_debt = short_share * default_point;
            let ltd_debt = 2.0 * (1.0 - short_share) * default_point;

            let mut equity = Vec::with_capacity(days.len());
            for _ in 0..days.len() {
                let local = params.local_vol(v);
                equity.push(bsm_call(v, default_point, spec.rate, local, spec.horizon)?);
                let w: f64 = StandardNormal.sample(&mut rng);
                v *= ((spec.rate - 0.5 * local * local) * dt + local * dt.sqrt() * w).exp();
            }
            let returns: Vec<(NaiveDate, f64)> = (1..days.len())
                .map(|k| (days[k], equity[k] / equity[k - 1] - 1.0))
                .collect();
            let rows = quarters
                .iter()
                .zip(&quarter_ends)
                .map(|(&quarter, &day)| {
                    let mut blank = || spec.missing > 0.0 && rng.random::<f64>() < spec.missing;
                    let std_debt = (!blank()).then_some(std_debt);
                    let ltd_debt = (!blank()).then_some(ltd_debt);
                    FundamentalRow {
                        firm_id: firm_id.clone(),
                        quarter,
                        equity_value: Some(equity[day]),
                        std_debt,
                        ltd_debt,
                        group: g.group,
                    }
                })
                .collect();
            Ok((firm_id, returns, rows))
        })
        .collect();

    let mut daily_returns = BTreeMap::new();
    let mut fundamentals = Vec::new();
    for result in simulated {
        let (firm_id, returns, rows) = result?;
        daily_returns.insert(firm_id, returns);
        fundamentals.extend(rows);
    }
    let rates = quarters.iter().map(|q| (*q, spec.rate)).collect();
    RawInputs::new(daily_returns, fundamentals, rates)
}
