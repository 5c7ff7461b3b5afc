use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cev::GridSettings;
use crate::error::{Error, Result};
use crate::estimation::CalibrationSettings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    FixedEffects,
    EquivalentVol,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitScope {
    /// One fit per group over all quarters.
    Pooled,
    /// One fit per group and quarter, over all quarters up to that one
    /// (the first quarter shares the fit of the second).
    PerQuarter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingPolicy {
    NearestNeighbor,
}

macro_rules! keyword_enum {
    ($ty:ty, $($text:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($text => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }

        impl $ty {
            pub fn keyword(self) -> &'static str {
                $(if self == $variant { return $text; })+
                unreachable!()
            }
        }
    };
}

keyword_enum!(Estimator, "fixed_effects" => Estimator::FixedEffects, "equivalent_vol" => Estimator::EquivalentVol, "both" => Estimator::Both);
keyword_enum!(FitScope, "pooled" => FitScope::Pooled, "per_quarter" => FitScope::PerQuarter);
keyword_enum!(MissingPolicy, "nearest_neighbor" => MissingPolicy::NearestNeighbor);

/// Study configuration. Text form is one `key = value` per line; `#` starts
/// a comment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub horizon: f64,
    pub calibration: CalibrationSettings,
    pub grid: GridSettings,
    pub estimator: Estimator,
    pub fit_scope: FitScope,
    pub missing_policy: MissingPolicy,
    /// Holds β at this value and fits only the per-firm scales.
    pub fixed_beta: Option<f64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            calibration: CalibrationSettings::default(),
            grid: GridSettings::default(),
            estimator: Estimator::Both,
            fit_scope: FitScope::Pooled,
            missing_policy: MissingPolicy::NearestNeighbor,
            fixed_beta: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (number, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", number + 1))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "horizon" => self.horizon = parse_value(key, value)?,
            "beta_min" => self.calibration.beta_range.0 = parse_value(key, value)?,
            "beta_max" => self.calibration.beta_range.1 = parse_value(key, value)?,
            "beta_tolerance" => self.calibration.beta_tolerance = parse_value(key, value)?,
            "delta_tolerance" => self.calibration.delta_tolerance = parse_value(key, value)?,
            "max_iterations" => self.calibration.max_iterations = parse_value(key, value)?,
            "grid.num_space" => self.grid.num_space = parse_value(key, value)?,
            "grid.num_time" => self.grid.num_time = parse_value(key, value)?,
            "grid.rannacher_steps" => self.grid.rannacher_steps = parse_value(key, value)?,
            "grid.tolerance" => self.grid.tolerance = parse_value(key, value)?,
            "grid.check_convergence" => self.grid.check_convergence = parse_value(key, value)?,
            "estimator" => self.estimator = value.parse()?,
            "fit_scope" => self.fit_scope = value.parse()?,
            "missing_policy" => self.missing_policy = value.parse()?,
            "fixed_beta" => {
                self.fixed_beta = match value {
                    "none" | "" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "output_dir" => self.output_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        let (lo, hi) = self.calibration.beta_range;
        if !(lo > 0.0 && lo < 1.0 && hi > 1.0 && hi.is_finite()) {
            return bad("beta range must be a finite interval in (0, inf) containing 1");
        }
        if !(self.calibration.beta_tolerance > 0.0 && self.calibration.delta_tolerance > 0.0) {
            return bad("calibration tolerances must be positive");
        }
        if self.fixed_beta.is_some_and(|b| !(b.is_finite() && b > 0.0)) {
            return bad("fixed_beta must be positive");
        }
        if self.grid.num_space < 3 || self.grid.num_time < 1 {
            return bad("grid needs at least 3 space nodes and 1 time step");
        }
        if !(self.grid.tolerance > 0.0) {
            return bad("grid tolerance must be positive");
        }
        Ok(())
    }

    /// Text form accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let c = &self.calibration;
        let g = &self.grid;
        let _ = writeln!(s, "horizon = {}", self.horizon);
        let _ = writeln!(s, "beta_min = {}", c.beta_range.0);
        let _ = writeln!(s, "beta_max = {}", c.beta_range.1);
        let _ = writeln!(s, "beta_tolerance = {}", c.beta_tolerance);
        let _ = writeln!(s, "delta_tolerance = {}", c.delta_tolerance);
        let _ = writeln!(s, "max_iterations = {}", c.max_iterations);
        let _ = writeln!(s, "grid.num_space = {}", g.num_space);
        let _ = writeln!(s, "grid.num_time = {}", g.num_time);
        let _ = writeln!(s, "grid.rannacher_steps = {}", g.rannacher_steps);
        let _ = writeln!(s, "grid.tolerance = {}", g.tolerance);
        let _ = writeln!(s, "grid.check_convergence = {}", g.check_convergence);
        let _ = writeln!(s, "estimator = {}", self.estimator.keyword());
        let _ = writeln!(s, "fit_scope = {}", self.fit_scope.keyword());
        let _ = writeln!(s, "missing_policy = {}", self.missing_policy.keyword());
        match self.fixed_beta {
            Some(b) => writeln!(s, "fixed_beta = {b}").ok(),
            None => writeln!(s, "fixed_beta = none").ok(),
        };
        if !self.output_dir.as_os_str().is_empty() {
            let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_defaults() {
        let text = "# study\nhorizon = 1\nbeta_min=0.3\n grid.num_space = 400 # coarser\nestimator = fixed_effects\nfit_scope = per_quarter\noutput_dir = /tmp/x\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.calibration.beta_range, (0.3, 2.0));
        assert_eq!(c.grid.num_space, 400);
        assert_eq!(c.estimator, Estimator::FixedEffects);
        assert_eq!(c.fit_scope, FitScope::PerQuarter);
        assert_eq!(c.output_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.grid.check_convergence = false;
        c.calibration.beta_range = (0.25, 1.75);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        c.fixed_beta = Some(1.0);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(matches!(
            RunConfig::parse("colour = red"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::parse("horizon = -1").is_err());
        assert!(RunConfig::parse("beta_min = 1.2").is_err());
        assert!(RunConfig::parse("estimator = magic").is_err());
        assert!(RunConfig::parse("just a line").is_err());
        assert!(RunConfig::parse("fixed_beta = 0").is_err());
    }
}
