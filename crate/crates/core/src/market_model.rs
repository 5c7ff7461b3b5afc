//! Black-Scholes-Merton machinery and the classical KMV inversion.
//!
//! Equity is a European call on the firm's assets struck at the default
//! point. Given the observed equity value and equity volatility, the pair
//! (asset value, asset volatility) is recovered by solving the two equations
//!
//! ```text
//! V_E = V_A N(d1) - e^{-rT} D N(d2)
//! σ_E = σ_A (V_A / V_E) N(d1)
//! ```
//!
//! with a damped Newton iteration in (ln V_A, ln σ_A).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, require_finite, require_non_negative, require_positive, Error, Result};
use crate::normal;
use crate::quarter::Quarter;

/// Credit group of a listed firm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Under special treatment: the high-risk group.
    #[serde(rename = "ST")]
    St,
    #[serde(rename = "NonST")]
    NonSt,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::St, Group::NonSt];

    pub fn label(self) -> &'static str {
        match self {
            Group::St => "ST",
            Group::NonSt => "NonST",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s
            .trim()
            .to_ascii_uppercase()
            .replace([' ', '_', '-'], "")
            .as_str()
        {
            "ST" => Ok(Group::St),
            "NONST" | "NST" => Ok(Group::NonSt),
            other => Err(domain(format!("unknown group label `{other}`"))),
        }
    }
}

/// One firm-quarter of observed equity data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirmQuarterObservation {
    pub firm_id: String,
    pub quarter: Quarter,
    /// Market value of equity, V_E.
    pub equity_value: f64,
    /// Annualized equity volatility, σ_E.
    pub equity_vol: f64,
    pub default_point: f64,
    /// Continuously compounded annual risk-free rate.
    pub rate: f64,
    /// Horizon in years.
    pub horizon: f64,
    pub group: Group,
}

impl FirmQuarterObservation {
    pub fn validate(&self) -> Result<()> {
        require_positive("equity_value", self.equity_value)?;
        require_positive("equity_vol", self.equity_vol)?;
        require_positive("horizon", self.horizon)?;
        require_non_negative("default_point", self.default_point)?;
        require_finite("rate", self.rate)
    }
}

/// Asset value and asset volatility recovered from equity data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssetSolution {
    pub asset_value: f64,
    pub asset_vol: f64,
    /// Max-norm of the relative residuals of the two KMV equations.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Set when the default point is zero: assets equal equity exactly and
    /// the distance to default is infinite.
    pub degenerate: bool,
}

/// Solver controls for [`invert_kmv_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionSettings {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for InversionSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 100,
        }
    }
}

/// (d1, d2) of the Black-Scholes-Merton formula with spot `asset_value` and
/// strike `default_point`.
pub fn d1_d2(
    asset_value: f64,
    default_point: f64,
    rate: f64,
    vol: f64,
    horizon: f64,
) -> (f64, f64) {
    let sd = vol * horizon.sqrt();
    let d2 = ((asset_value / default_point).ln() + (rate - 0.5 * vol * vol) * horizon) / sd;
    (d2 + sd, d2)
}

fn check_bsm_inputs(
    asset_value: f64,
    default_point: f64,
    rate: f64,
    vol: f64,
    horizon: f64,
) -> Result<()> {
    require_positive("asset_value", asset_value)?;
    require_non_negative("default_point", default_point)?;
    require_finite("rate", rate)?;
    require_non_negative("vol", vol)?;
    require_positive("horizon", horizon)
}

/// European call value V_A N(d1) - e^{-rT} D N(d2).
pub fn bsm_call(
    asset_value: f64,
    default_point: f64,
    rate: f64,
    vol: f64,
    horizon: f64,
) -> Result<f64> {
    check_bsm_inputs(asset_value, default_point, rate, vol, horizon)?;
    Ok(call_unchecked(
        asset_value,
        default_point,
        rate,
        vol,
        horizon,
    ))
}

/// European put value e^{-rT} D N(-d2) - V_A N(-d1).
pub fn bsm_put(
    asset_value: f64,
    default_point: f64,
    rate: f64,
    vol: f64,
    horizon: f64,
) -> Result<f64> {
    check_bsm_inputs(asset_value, default_point, rate, vol, horizon)?;
    let discounted = default_point * (-rate * horizon).exp();
    if default_point == 0.0 {
        return Ok(0.0);
    }
    if vol == 0.0 {
        return Ok((discounted - asset_value).max(0.0));
    }
    let (d1, d2) = d1_d2(asset_value, default_point, rate, vol, horizon);
    Ok((discounted * normal::cdf(-d2) - asset_value * normal::cdf(-d1)).max(0.0))
}

fn call_unchecked(asset_value: f64, default_point: f64, rate: f64, vol: f64, horizon: f64) -> f64 {
    if default_point == 0.0 {
        return asset_value;
    }
    let discounted = default_point * (-rate * horizon).exp();
    if vol == 0.0 {
        return (asset_value - discounted).max(0.0);
    }
    let (d1, d2) = d1_d2(asset_value, default_point, rate, vol, horizon);
    let value = asset_value * normal::cdf(d1) - discounted * normal::cdf(d2);
    value.clamp((asset_value - discounted).max(0.0), asset_value)
}

/// Equity volatility implied by asset volatility: σ_A (V_A / V_E) N(d1).
pub fn kmv_equity_vol(asset_value: f64, equity_value: f64, asset_vol: f64, d1: f64) -> Result<f64> {
    require_positive("equity_value", equity_value)?;
    require_non_negative("asset_value", asset_value)?;
    require_non_negative("asset_vol", asset_vol)?;
    if d1.is_nan() {
        return Err(domain("d1 is NaN"));
    }
    Ok(asset_vol * asset_value / equity_value * normal::cdf(d1))
}

/// Forward KMV map: equity value and equity volatility generated by a firm
/// with the given asset value and asset volatility.
pub fn forward_equity(
    asset_value: f64,
    asset_vol: f64,
    default_point: f64,
    rate: f64,
    horizon: f64,
) -> Result<(f64, f64)> {
    let equity = bsm_call(asset_value, default_point, rate, asset_vol, horizon)?;
    if equity <= 0.0 {
        return Err(domain("equity value underflows to zero for these inputs"));
    }
    let d1 = if default_point == 0.0 {
        f64::INFINITY
    } else {
        d1_d2(asset_value, default_point, rate, asset_vol, horizon).0
    };
    let vol = kmv_equity_vol(asset_value, equity, asset_vol, d1)?;
    Ok((equity, vol))
}

/// Recovers (V_A, σ_A) from an observation with the default solver settings.
pub fn invert_kmv(obs: &FirmQuarterObservation) -> Result<AssetSolution> {
    invert_kmv_with(obs, &InversionSettings::default())
}

struct KmvSystem {
    equity: f64,
    equity_vol: f64,
    default_point: f64,
    rate: f64,
    horizon: f64,
}

impl KmvSystem {
    /// Relative residuals and their Jacobian w.r.t. (ln V_A, ln σ_A).
    fn eval(&self, ln_v: f64, ln_s: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let v = ln_v.exp();
        let s = ln_s.exp();
        let sqrt_t = self.horizon.sqrt();
        let (d1, d2) = d1_d2(v, self.default_point, self.rate, s, self.horizon);
        let n1 = normal::cdf(d1);
        let phi1 = normal::pdf(d1);
        let call = call_unchecked(v, self.default_point, self.rate, s, self.horizon);
        let target_g = self.equity_vol * self.equity;
        let g = s * v * n1;

        let r = [call / self.equity - 1.0, g / target_g - 1.0];
        let j = [
            [v * n1 / self.equity, s * v * phi1 * sqrt_t / self.equity],
            [
                (g + v * phi1 / sqrt_t) / target_g,
                (g - s * v * phi1 * d2) / target_g,
            ],
        ];
        (r, j)
    }

    fn residual(&self, ln_v: f64, ln_s: f64) -> f64 {
        let (r, _) = self.eval(ln_v, ln_s);
        r[0].abs().max(r[1].abs())
    }

    /// Asset value reproducing the equity price at a fixed asset vol.
    fn asset_for_vol(&self, vol: f64) -> f64 {
        let mut lo = self.equity;
        let mut hi = self.equity + self.default_point * (-self.rate * self.horizon).exp();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if call_unchecked(mid, self.default_point, self.rate, vol, self.horizon) > self.equity {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// Nested bisection: inner solve on V_A for the equity price, outer on
    /// ln σ_A for the equity volatility.
    fn bisect(&self) -> (f64, f64) {
        let gap = |ln_s: f64| {
            let s = ln_s.exp();
            let v = self.asset_for_vol(s);
            let (d1, _) = d1_d2(v, self.default_point, self.rate, s, self.horizon);
            s * v * normal::cdf(d1) / self.equity - self.equity_vol
        };
        let mut lo = (self.equity_vol * 1e-6).ln();
        let mut hi = self.equity_vol.ln();
        while gap(hi) < 0.0 && hi < 10.0 {
            hi += std::f64::consts::LN_2;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if gap(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let ln_s = 0.5 * (lo + hi);
        (self.asset_for_vol(ln_s.exp()).ln(), ln_s)
    }

    fn newton_step(&self, ln_v: f64, ln_s: f64) -> Option<[f64; 2]> {
        let (r, j) = self.eval(ln_v, ln_s);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if !det.is_finite() || det.abs() < 1e-300 {
            return None;
        }
        let dv = -(j[1][1] * r[0] - j[0][1] * r[1]) / det;
        let ds = -(-j[1][0] * r[0] + j[0][0] * r[1]) / det;
        // cap each move at a factor of e^2
        let scale = (2.0 / dv.abs().max(ds.abs())).min(1.0);
        Some([dv * scale, ds * scale])
    }
}

/// Recovers (V_A, σ_A) from an observation.
///
/// Damped Newton on (ln V_A, ln σ_A) from V_A = V_E + D e^{-rT},
/// σ_A = σ_E V_E / V_A; if a step cannot reduce the residual the solver
/// restarts from a nested-bisection estimate.
pub fn invert_kmv_with(
    obs: &FirmQuarterObservation,
    settings: &InversionSettings,
) -> Result<AssetSolution> {
    obs.validate()?;
    if obs.default_point == 0.0 {
        return Ok(AssetSolution {
            asset_value: obs.equity_value,
            asset_vol: obs.equity_vol,
            residual_norm: 0.0,
            iterations: 0,
            degenerate: true,
        });
    }
    let sys = KmvSystem {
        equity: obs.equity_value,
        equity_vol: obs.equity_vol,
        default_point: obs.default_point,
        rate: obs.rate,
        horizon: obs.horizon,
    };

    let v0 = obs.equity_value + obs.default_point * (-obs.rate * obs.horizon).exp();
    let mut x = [v0.ln(), (obs.equity_vol * obs.equity_value / v0).ln()];
    let mut res = sys.residual(x[0], x[1]);
    let mut fell_back = false;
    let mut iterations = 0;

    while iterations < settings.max_iterations {
        if res < settings.tolerance {
            // one polishing step for parameter accuracy
            if let Some(step) = sys.newton_step(x[0], x[1]) {
                let cand = [x[0] + step[0], x[1] + step[1]];
                let cand_res = sys.residual(cand[0], cand[1]);
                if cand_res <= res {
                    x = cand;
                    res = cand_res;
                }
            }
            break;
        }
        iterations += 1;
        let accepted = sys.newton_step(x[0], x[1]).and_then(|step| {
            let mut lambda = 1.0;
            for _ in 0..40 {
                let cand = [x[0] + lambda * step[0], x[1] + lambda * step[1]];
                let cand_res = sys.residual(cand[0], cand[1]);
                if cand_res.is_finite() && cand_res < res {
                    return Some((cand, cand_res));
                }
                lambda *= 0.5;
            }
            None
        });
        match accepted {
            Some((cand, cand_res)) => {
                x = cand;
                res = cand_res;
            }
            None if !fell_back => {
                fell_back = true;
                let (lv, ls) = sys.bisect();
                x = [lv, ls];
                res = sys.residual(lv, ls);
            }
            None => break,
        }
    }

    if !(res < settings.tolerance) {
        return Err(Error::NoConvergence {
            iterations,
            residual: res,
        });
    }
    Ok(AssetSolution {
        asset_value: x[0].exp(),
        asset_vol: x[1].exp(),
        residual_norm: res,
        iterations,
        degenerate: false,
    })
}

/// Classical distance to default
/// d2 = [ln(V_A/D) + (r - σ_A²/2) T] / (σ_A √T).
///
/// A zero default point yields `f64::INFINITY`.
pub fn classical_dd(solution: &AssetSolution, obs: &FirmQuarterObservation) -> Result<f64> {
    distance_to_default(
        solution.asset_value,
        solution.asset_vol,
        obs.default_point,
        obs.rate,
        obs.horizon,
    )
}

/// d2 from raw inputs; see [`classical_dd`].
pub fn distance_to_default(
    asset_value: f64,
    asset_vol: f64,
    default_point: f64,
    rate: f64,
    horizon: f64,
) -> Result<f64> {
    require_positive("asset_value", asset_value)?;
    require_positive("asset_vol", asset_vol)?;
    require_non_negative("default_point", default_point)?;
    require_finite("rate", rate)?;
    require_positive("horizon", horizon)?;
    if default_point == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(d1_d2(asset_value, default_point, rate, asset_vol, horizon).1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptionKind {
    Call,
    Put,
}

/// Black-Scholes implied volatility by safeguarded Newton on a bracket.
pub fn implied_vol(
    kind: OptionKind,
    price: f64,
    spot: f64,
    strike: f64,
    rate: f64,
    horizon: f64,
) -> Result<f64> {
    require_positive("spot", spot)?;
    require_positive("strike", strike)?;
    require_positive("horizon", horizon)?;
    let pricer = |s: f64| match kind {
        OptionKind::Call => call_unchecked(spot, strike, rate, s, horizon),
        OptionKind::Put => bsm_put(spot, strike, rate, s, horizon).unwrap_or(f64::NAN),
    };
    let intrinsic = pricer(0.0);
    let upper_bound = match kind {
        OptionKind::Call => spot,
        OptionKind::Put => strike * (-rate * horizon).exp(),
    };
    if !(price > intrinsic && price < upper_bound) {
        return Err(domain(format!(
            "option price {price} outside the no-arbitrage band ({intrinsic}, {upper_bound})"
        )));
    }
    let (mut lo, mut hi) = (1e-8, 1.0);
    while pricer(hi) < price {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(domain("implied volatility above 1000"));
        }
    }
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let diff = pricer(s) - price;
        if diff.abs() <= 1e-15 * price {
            break;
        }
        if diff > 0.0 {
            hi = s;
        } else {
            lo = s;
        }
        let (d1, _) = d1_d2(spot, strike, rate, s, horizon);
        let vega = spot * normal::pdf(d1) * horizon.sqrt();
        let newton = s - diff / vega;
        s = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (hi - lo) < 1e-15 * s {
            break;
        }
    }
    Ok(s)
}
