//! Default probabilities under constant elasticity of variance dynamics
//!
//! ```text
//! dV = r V dt + δ V^β dB
//! ```
//!
//! The probability P(V(T) < D) solves a backward Kolmogorov equation with
//! indicator terminal data; it is computed by finite differences and turned
//! into a distance to default through the normal quantile.

mod pde;

use serde::{Deserialize, Serialize};

use crate::error::{domain, require_finite, require_positive, Error, Result};
use crate::market_model::{Group, OptionKind};
use crate::normal;
use crate::quarter::Quarter;

use pde::{Nodes, Problem};

/// CEV diffusion parameters: local volatility δ V^{β-1}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CevParams {
    pub delta: f64,
    pub beta: f64,
}

impl CevParams {
    pub fn new(delta: f64, beta: f64) -> Result<Self> {
        let p = Self { delta, beta };
        p.validate()?;
        Ok(p)
    }

    /// Parameters whose local volatility at `level` equals `vol`.
    pub fn from_local_vol(vol: f64, level: f64, beta: f64) -> Result<Self> {
        require_positive("vol", vol)?;
        require_positive("level", level)?;
        Self::new(vol * level.powf(1.0 - beta), beta)
    }

    pub fn validate(&self) -> Result<()> {
        require_positive("delta", self.delta)?;
        require_positive("beta", self.beta)
    }

    pub fn local_vol(&self, level: f64) -> f64 {
        self.delta * level.powf(self.beta - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    CrankNicolson,
}

/// Resolution and acceptance settings for the PDE solver, independent of a
/// particular firm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub num_space: usize,
    pub num_time: usize,
    pub rannacher_steps: usize,
    /// Maximum change of the solution under grid doubling.
    pub tolerance: f64,
    /// Solve again on the doubled grid and fail with `GridTooCoarse` when the
    /// two solutions differ by more than `tolerance`.
    pub check_convergence: bool,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            num_space: 800,
            num_time: 400,
            rannacher_steps: 2,
            tolerance: 1e-4,
            check_convergence: true,
        }
    }
}

impl GridSettings {
    /// Domain for one firm: [0, x_max] with x_max the larger of
    /// 4·max(V0, D e^{rT}) and the level a unit-diffusion (Lamperti)
    /// distance of `FAR_FIELD_SDS`·√T above V0, so that paths started at V0
    /// rarely feel the artificial upper boundary.
    pub fn grid_for(
        &self,
        asset_value: f64,
        default_point: f64,
        rate: f64,
        horizon: f64,
        params: CevParams,
    ) -> PdeGrid {
        let floor = (4.0 * asset_value).max(4.0 * default_point * (rate * horizon).exp());
        let x_max = floor.max(far_field_level(asset_value, rate, horizon, params));
        PdeGrid {
            x_min: 0.0,
            x_max,
            num_space: self.num_space,
            num_time: self.num_time,
            scheme: Scheme::CrankNicolson,
            rannacher_steps: self.rannacher_steps,
            tolerance: self.tolerance,
            check_convergence: self.check_convergence,
        }
    }
}

const FAR_FIELD_SDS: f64 = 7.0;
// Upper cap on x_max / V0 when β > 1 makes the Lamperti distance to
// infinity finite.
const FAR_FIELD_CAP: f64 = 1e6;

fn far_field_level(v0: f64, rate: f64, horizon: f64, params: CevParams) -> f64 {
    let reach = FAR_FIELD_SDS * horizon.sqrt();
    let growth = (rate.max(0.0) * horizon).exp();
    let CevParams { delta, beta } = params;
    let level = if (beta - 1.0).abs() < 1e-12 {
        v0 * (reach * delta).min(FAR_FIELD_CAP.ln()).exp()
    } else {
        // z(x) = x^{1-β} / (δ (1-β)) has unit diffusion coefficient
        let p = 1.0 - beta;
        let target = v0.powf(p) + reach * delta * p;
        if target > 0.0 {
            target.powf(1.0 / p).min(v0 * FAR_FIELD_CAP)
        } else {
            v0 * FAR_FIELD_CAP
        }
    };
    level * growth
}

/// A resolved finite-difference grid for one solve.
///
/// Nodes are clustered around the default point with a sinh stretching,
/// and the default point is placed halfway (in the stretched coordinate)
/// between two nodes; `x_max` is enlarged slightly when needed for that.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub num_space: usize,
    pub num_time: usize,
    pub scheme: Scheme,
    pub rannacher_steps: usize,
    pub tolerance: f64,
    pub check_convergence: bool,
}

impl PdeGrid {
    fn validate(&self, asset_value: f64, default_point: f64) -> Result<()> {
        if self.num_space < 3 || self.num_time < 1 {
            return Err(domain("grid needs at least 3 space nodes and 1 time step"));
        }
        if self.x_min != 0.0 {
            return Err(domain("the CEV grid is anchored at x_min = 0"));
        }
        if !(self.x_min < default_point && default_point < self.x_max) {
            return Err(domain(format!(
                "default point {default_point} outside grid ({}, {})",
                self.x_min, self.x_max
            )));
        }
        if !(self.x_min < asset_value && asset_value < self.x_max) {
            return Err(domain(format!(
                "asset value {asset_value} outside grid ({}, {})",
                self.x_min, self.x_max
            )));
        }
        Ok(())
    }
}

/// Which model produced a distance-to-default record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelTag {
    ClassicalKMV,
    CevKmvFE,
    CevKmvEV,
}

impl ModelTag {
    pub fn label(self) -> &'static str {
        match self {
            ModelTag::ClassicalKMV => "ClassicalKMV",
            ModelTag::CevKmvFE => "CevKmvFE",
            ModelTag::CevKmvEV => "CevKmvEV",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefaultDistanceRecord {
    pub firm_id: String,
    pub quarter: Quarter,
    pub group: Group,
    pub model: ModelTag,
    pub probability: f64,
    /// −N⁻¹(probability); `+inf` when the probability is zero.
    #[serde(with = "crate::float_serde")]
    pub distance: f64,
}

/// Solves the default-probability problem in units of the default point.
#[allow(clippy::too_many_arguments)]
fn probability_on(
    num_space: usize,
    num_time: usize,
    rannacher_steps: usize,
    y_max: f64,
    y0: f64,
    nu: f64,
    beta: f64,
    rate: f64,
    horizon: f64,
) -> f64 {
    // resolution scale: local vol at the default point over the horizon
    let width = (0.5 * nu * horizon.sqrt()).clamp(0.01, 1.0);
    let nodes = Nodes::stretched(num_space, y_max, 1.0, width);
    let payoff = |y: f64| if y < 1.0 { 1.0 } else { 0.0 };
    let one = |_: f64| 1.0;
    let zero = |_: f64| 0.0;
    let problem = Problem {
        rate,
        discount: 0.0,
        vol_scale: nu,
        beta,
        horizon,
        payoff: &payoff,
        lower: &one,
        upper: &zero,
    };
    let u = pde::solve(&problem, &nodes, num_time, rannacher_steps);
    nodes.interpolate(&u, y0).clamp(0.0, 1.0)
}

/// P(V(T) < D) under CEV dynamics with drift r, by Crank-Nicolson.
///
/// With `grid.check_convergence` the problem is also solved on the grid with
/// doubled space and time resolution; the refined value is returned, and
/// `GridTooCoarse` is raised if the two differ by more than the tolerance.
pub fn cev_default_probability(
    asset_value: f64,
    params: CevParams,
    default_point: f64,
    rate: f64,
    horizon: f64,
    grid: &PdeGrid,
) -> Result<f64> {
    require_positive("asset_value", asset_value)?;
    require_positive("default_point", default_point)?;
    require_finite("rate", rate)?;
    require_positive("horizon", horizon)?;
    params.validate()?;
    grid.validate(asset_value, default_point)?;

    let y0 = asset_value / default_point;
    let y_max = grid.x_max / default_point;
    // δ x^β with x = D y  =>  (δ D^{β-1}) y^β
    let nu = params.delta * default_point.powf(params.beta - 1.0);
    let solve_on = |n: usize, m: usize| {
        probability_on(
            n,
            m,
            grid.rannacher_steps,
            y_max,
            y0,
            nu,
            params.beta,
            rate,
            horizon,
        )
    };
    let coarse = solve_on(grid.num_space, grid.num_time);
    if !grid.check_convergence {
        return Ok(coarse);
    }
    let fine = solve_on(2 * grid.num_space, 2 * grid.num_time);
    let change = (fine - coarse).abs();
    if change > grid.tolerance {
        return Err(Error::GridTooCoarse {
            change,
            tolerance: grid.tolerance,
        });
    }
    Ok(fine)
}

/// Distance to default from a default probability: −N⁻¹(p).
///
/// Maps p = 0 to `+inf` and p = 1 to `-inf`.
pub fn cev_dd(probability: f64) -> f64 {
    -normal::quantile(probability)
}

/// Hagan-Woodward equivalent Black volatility of a CEV process, truncated
/// after the two leading correction terms:
///
/// ```text
/// σ_B = δ / f^{1-β} · { 1 + (1-β)(2+β)(F-K)² / (24 f²) + (1-β)² δ² T / (24 f^{2-2β}) }
/// ```
///
/// with forward F = e^{rT} V_A, strike K = D and f = (F + K) / 2.
pub fn hagan_woodward_vol(
    asset_value: f64,
    default_point: f64,
    rate: f64,
    horizon: f64,
    params: CevParams,
) -> Result<f64> {
    require_positive("asset_value", asset_value)?;
    require_positive("default_point", default_point)?;
    require_finite("rate", rate)?;
    require_positive("horizon", horizon)?;
    params.validate()?;
    let forward = (rate * horizon).exp() * asset_value;
    let f = 0.5 * (forward + default_point);
    if !(f > 0.0) {
        return Err(domain("mean of forward and strike must be positive"));
    }
    Ok(equivalent_vol_unchecked(
        forward,
        default_point,
        f,
        horizon,
        params.delta,
        params.beta,
    ))
}

#[inline]
pub(crate) fn equivalent_vol_unchecked(
    forward: f64,
    strike: f64,
    f: f64,
    horizon: f64,
    delta: f64,
    beta: f64,
) -> f64 {
    let one_minus = 1.0 - beta;
    let leading = delta / f.powf(one_minus);
    let moneyness = (forward - strike) / f;
    let skew = one_minus * (2.0 + beta) * moneyness * moneyness / 24.0;
    let convexity =
        one_minus * one_minus * delta * delta * horizon / (24.0 * f.powf(2.0 * one_minus));
    leading * (1.0 + skew + convexity)
}

/// European option value under CEV dynamics by the same finite-difference
/// scheme, discounting at the drift rate.
pub fn cev_option_price(
    kind: OptionKind,
    spot: f64,
    strike: f64,
    rate: f64,
    horizon: f64,
    params: CevParams,
    settings: &GridSettings,
) -> Result<f64> {
    require_positive("spot", spot)?;
    require_positive("strike", strike)?;
    require_finite("rate", rate)?;
    require_positive("horizon", horizon)?;
    params.validate()?;
    let grid = settings.grid_for(spot, strike, rate, horizon, params);
    let solve_on = |n: usize, m: usize| {
        let y_max = grid.x_max / strike;
        let nu = params.delta * strike.powf(params.beta - 1.0);
        let width = (0.5 * nu * horizon.sqrt()).clamp(0.01, 1.0);
        let nodes = Nodes::stretched(n, y_max, 1.0, width);
        let y_top = nodes.y_max();
        let call_payoff = |y: f64| (y - 1.0).max(0.0);
        let put_payoff = |y: f64| (1.0 - y).max(0.0);
        let zero = |_: f64| 0.0;
        let call_upper = move |tau: f64| y_top - (-rate * tau).exp();
        let put_lower = move |tau: f64| (-rate * tau).exp();
        let problem = match kind {
            OptionKind::Call => Problem {
                rate,
                discount: rate,
                vol_scale: nu,
                beta: params.beta,
                horizon,
                payoff: &call_payoff,
                lower: &zero,
                upper: &call_upper,
            },
            OptionKind::Put => Problem {
                rate,
                discount: rate,
                vol_scale: nu,
                beta: params.beta,
                horizon,
                payoff: &put_payoff,
                lower: &put_lower,
                upper: &zero,
            },
        };
        let u = pde::solve(&problem, &nodes, m, grid.rannacher_steps);
        strike * nodes.interpolate(&u, spot / strike).max(0.0)
    };
    let coarse = solve_on(grid.num_space, grid.num_time);
    if !grid.check_convergence {
        return Ok(coarse);
    }
    let fine = solve_on(2 * grid.num_space, 2 * grid.num_time);
    let change = (fine - coarse).abs() / strike;
    if change > grid.tolerance {
        return Err(Error::GridTooCoarse {
            change,
            tolerance: grid.tolerance,
        });
    }
    Ok(fine)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_model::{distance_to_default, implied_vol};

    fn gbm_probability(v: f64, s: f64, d: f64, r: f64, t: f64) -> f64 {
        normal::cdf(-distance_to_default(v, s, d, r, t).unwrap())
    }

    fn probability(
        v: f64,
        params: CevParams,
        d: f64,
        r: f64,
        t: f64,
        settings: GridSettings,
    ) -> Result<f64> {
        let grid = settings.grid_for(v, d, r, t, params);
        cev_default_probability(v, params, d, r, t, &grid)
    }

    #[test]
    fn unit_beta_matches_lognormal_cdf() {
        for &(ratio, s, t) in &[
            (1.05, 0.1, 0.25),
            (1.5, 0.3, 1.0),
            (3.0, 0.8, 2.0),
            (10.0, 0.8, 2.0),
        ] {
            let (d, r) = (80.0, 0.03);
            let p = probability(
                ratio * d,
                CevParams::new(s, 1.0).unwrap(),
                d,
                r,
                t,
                GridSettings::default(),
            )
            .unwrap();
            let exact = gbm_probability(ratio * d, s, d, r, t);
            assert!(
                (p - exact).abs() < 1e-4,
                "ratio {ratio} s {s} t {t}: {p} vs {exact}"
            );
        }
    }

    #[test]
    fn unit_beta_distance_matches_d2() {
        let (v, s, d, r, t) = (150.0, 0.25, 80.0, 0.03, 1.0);
        let p = probability(
            v,
            CevParams::new(s, 1.0).unwrap(),
            d,
            r,
            t,
            GridSettings::default(),
        )
        .unwrap();
        let d2 = distance_to_default(v, s, d, r, t).unwrap();
        assert!((cev_dd(p) - d2).abs() < 1e-3);
    }

    #[test]
    fn tiny_scale_far_from_default_is_negligible() {
        let params = CevParams::from_local_vol(1e-3, 100.0, 0.7).unwrap();
        let p = probability(100.0, params, 10.0, 0.03, 1.0, GridSettings::default()).unwrap();
        assert!(p < 1e-8, "{p}");
    }

    #[test]
    fn monotone_in_asset_value_and_default_point() {
        let settings = GridSettings::default();
        for &beta in &[0.6, 1.3] {
            let params = CevParams::from_local_vol(0.3, 100.0, beta).unwrap();
            let base = probability(100.0, params, 80.0, 0.03, 1.0, settings).unwrap();
            let richer = probability(110.0, params, 80.0, 0.03, 1.0, settings).unwrap();
            let more_debt = probability(100.0, params, 88.0, 0.03, 1.0, settings).unwrap();
            assert!((0.0..=1.0).contains(&base));
            assert!(richer <= base && more_debt >= base, "beta {beta}");
        }
    }

    #[test]
    fn lower_beta_fattens_the_left_tail() {
        // same local vol at V0: with beta < 1 volatility rises as assets fall
        let settings = GridSettings::default();
        let p = |beta: f64| {
            let params = CevParams::from_local_vol(0.3, 100.0, beta).unwrap();
            probability(100.0, params, 60.0, 0.03, 1.0, settings).unwrap()
        };
        assert!(p(0.6) > p(1.0) && p(1.0) > p(1.4));
    }

    #[test]
    fn grid_changes_shrink_under_refinement() {
        let params = CevParams::from_local_vol(0.3, 100.0, 0.7).unwrap();
        let values: Vec<f64> = [200, 400, 800, 1600]
            .iter()
            .map(|&n| {
                let settings = GridSettings {
                    num_space: n,
                    num_time: n / 2,
                    check_convergence: false,
                    ..GridSettings::default()
                };
                probability(100.0, params, 80.0, 0.03, 1.0, settings).unwrap()
            })
            .collect();
        let changes: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        assert!(changes.windows(2).all(|c| c[1] < c[0]), "{changes:?}");
        // second order: each doubling cuts the change by about four
        for c in changes.windows(2) {
            let ratio = c[0] / c[1];
            assert!(ratio > 2.5 && ratio < 6.5, "{changes:?}");
        }
    }

    #[test]
    fn coarse_grid_is_reported() {
        let settings = GridSettings {
            num_space: 12,
            num_time: 2,
            rannacher_steps: 0,
            tolerance: 1e-6,
            check_convergence: true,
        };
        let params = CevParams::from_local_vol(0.3, 100.0, 0.7).unwrap();
        let err = probability(100.0, params, 80.0, 0.03, 1.0, settings).unwrap_err();
        assert!(matches!(err, Error::GridTooCoarse { .. }));
    }

    #[test]
    fn rejects_inputs_outside_the_grid() {
        let params = CevParams::new(0.3, 1.0).unwrap();
        let mut grid = GridSettings::default().grid_for(100.0, 80.0, 0.03, 1.0, params);
        grid.x_max = 90.0;
        assert!(cev_default_probability(100.0, params, 80.0, 0.03, 1.0, &grid).is_err());
        assert!(CevParams::new(0.0, 1.0).is_err());
        assert!(CevParams::new(0.3, -1.0).is_err());
    }

    #[test]
    fn distance_transform() {
        assert_eq!(cev_dd(0.5), 0.0);
        assert!((cev_dd(normal::cdf(-2.0)) - 2.0).abs() < 1e-12);
        assert_eq!(cev_dd(0.0), f64::INFINITY);
        assert_eq!(cev_dd(1.0), f64::NEG_INFINITY);
        let mut d = -6.0f64;
        while d <= 6.0 {
            // for d < 0 the probability sits above 1/2 and is stored to an
            // absolute ulp, which the quantile amplifies by 1 / pdf(d)
            let tol = 1e-9f64.max(2.0 * f64::EPSILON / normal::pdf(d));
            assert!((cev_dd(normal::cdf(-d)) - d).abs() < tol, "d={d}");
            d += 0.125;
        }
    }

    #[test]
    fn equivalent_vol_at_unit_beta_is_the_scale() {
        let params = CevParams::new(0.3, 1.0).unwrap();
        for &(v, d, t) in &[(100.0, 80.0, 1.0), (50.0, 400.0, 0.25), (1e9, 3e9, 2.0)] {
            assert_eq!(hagan_woodward_vol(v, d, 0.03, t, params).unwrap(), 0.3);
        }
    }

    #[test]
    fn equivalent_vol_at_the_money() {
        let (v, r, t) = (100.0f64, 0.03f64, 1.0f64);
        let k = v * (r * t).exp();
        let params = CevParams::new(2.0, 0.8).unwrap();
        let f: f64 = k;
        let expected = 2.0 / f.powf(0.2) * (1.0 + 0.04 * 4.0 * t / (24.0 * f.powf(0.4)));
        let hw = hagan_woodward_vol(v, k, r, t, params).unwrap();
        assert!((hw / expected - 1.0).abs() < 1e-14);
    }

    fn pde_implied_vol(v: f64, k: f64, r: f64, t: f64, params: CevParams) -> f64 {
        let kind = if k < v * (r * t).exp() {
            OptionKind::Put
        } else {
            OptionKind::Call
        };
        let price = cev_option_price(kind, v, k, r, t, params, &GridSettings::default()).unwrap();
        implied_vol(kind, price, v, k, r, t).unwrap()
    }

    #[test]
    fn equivalent_vol_matches_pde_implied_vol() {
        let params = CevParams::new(2.0, 0.8).unwrap();
        let hw = hagan_woodward_vol(100.0, 80.0, 0.03, 1.0, params).unwrap();
        let iv = pde_implied_vol(100.0, 80.0, 0.03, 1.0, params);
        assert!((hw / iv - 1.0).abs() < 0.01, "{hw} vs {iv}");
    }

    #[test]
    fn equivalent_vol_ignores_drift_in_the_scale() {
        // the expansion treats the forward as driftless; under drift r the
        // forward's scale grows like e^{r (T - t)(1 - β)}, a relative bias of
        // about (1 - β) r T / 2
        let (v, k, t) = (100.0, 100.0, 2.0);
        let params = CevParams::from_local_vol(0.3, 100.0, 0.6).unwrap();
        let r0 = hagan_woodward_vol(v, k, 0.0, t, params).unwrap()
            / pde_implied_vol(v, k, 0.0, t, params);
        assert!((r0 - 1.0).abs() < 2e-3, "{r0}");
        let r = 0.03;
        let k = v * (r * t).exp();
        let biased =
            hagan_woodward_vol(v, k, r, t, params).unwrap() / pde_implied_vol(v, k, r, t, params);
        assert!(
            (biased - (1.0 - 0.4 * r * t / 2.0)).abs() < 2e-3,
            "{biased}"
        );
    }

    #[test]
    fn option_prices_satisfy_parity_at_unit_beta() {
        let params = CevParams::new(0.3, 1.0).unwrap();
        let settings = GridSettings::default();
        let call =
            cev_option_price(OptionKind::Call, 100.0, 90.0, 0.03, 1.0, params, &settings).unwrap();
        let exact = crate::market_model::bsm_call(100.0, 90.0, 0.03, 0.3, 1.0).unwrap();
        assert!((call - exact).abs() < 1e-3, "{call} vs {exact}");
    }
}
