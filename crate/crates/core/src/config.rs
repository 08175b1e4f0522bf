//! Scenario configuration: one JSON document, unknown keys rejected.

use crate::error::{Error, Result};
use crate::geometry::{GraphFamily, MapSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Version of the config schema and of every JSON report written.
pub const SCHEMA_VERSION: u32 = 1;

/// One scenario. Fields other than `name` and `domain` have defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub name: String,
    pub domain: GraphFamily,
    #[serde(default = "identity")]
    pub map: MapSpec,
    /// Strictly increasing.
    #[serde(default = "eps_sweep")]
    pub eps_sweep: Vec<f64>,
    /// A power of two ≥ 64.
    #[serde(default = "grid_n")]
    pub grid_n: usize,
    /// Half-width of the truncation box.
    #[serde(default = "half_width")]
    pub r: f64,
    #[serde(default = "p_list")]
    pub p_list: Vec<f64>,
    /// Carleson box radii, centers at `0, ±R/4, ±R/2`.
    #[serde(default = "radii")]
    pub radii: Vec<f64>,
    /// Boundary ball radii for the reverse-Hölder averages.
    #[serde(default = "ball_radii")]
    pub ball_radii: Vec<f64>,
    #[serde(default = "inversion_targets")]
    pub inversion_targets: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

fn schema_version() -> u32 {
    SCHEMA_VERSION
}
fn identity() -> MapSpec {
    MapSpec::Identity
}
fn eps_sweep() -> Vec<f64> {
    vec![0.0]
}
fn grid_n() -> usize {
    256
}
fn half_width() -> f64 {
    2.0
}
fn p_list() -> Vec<f64> {
    vec![1.5, 2.0, 4.0]
}
fn radii() -> Vec<f64> {
    vec![0.25, 0.5, 1.0]
}
fn ball_radii() -> Vec<f64> {
    vec![0.25, 0.5]
}
fn inversion_targets() -> usize {
    100
}

impl Scenario {
    /// Defaults for everything but the domain.
    pub fn new(name: &str, domain: GraphFamily) -> Self {
        Scenario {
            schema_version: SCHEMA_VERSION,
            name: name.into(),
            domain,
            map: identity(),
            eps_sweep: eps_sweep(),
            grid_n: grid_n(),
            r: half_width(),
            p_list: p_list(),
            radii: radii(),
            ball_radii: ball_radii(),
            inversion_targets: inversion_targets(),
            output_dir: None,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("scenario name {:?} must be a non-empty path component", self.name));
        }
        if self.grid_n < 64 || !self.grid_n.is_power_of_two() {
            return bad(format!("grid_n must be a power of two ≥ 64, got {}", self.grid_n));
        }
        if self.eps_sweep.is_empty() || self.eps_sweep.windows(2).any(|w| !(w[0] < w[1])) {
            return bad(format!("eps_sweep must be non-empty and strictly increasing, got {:?}", self.eps_sweep));
        }
        if self.eps_sweep.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return bad("eps values must be finite and ≥ 0".into());
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return bad(format!("r must be positive, got {}", self.r));
        }
        if self.p_list.is_empty() || self.p_list.iter().any(|p| !(*p > 1.0 && p.is_finite())) {
            return bad(format!("p values must lie in (1, ∞), got {:?}", self.p_list));
        }
        if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > 0.0 && *r <= 0.5 * self.r)) {
            return bad(format!("radii must lie in (0, R/2], got {:?}", self.radii));
        }
        if self.ball_radii.is_empty() || self.ball_radii.iter().any(|r| !(*r > 0.0)) {
            return bad(format!("ball_radii must be positive, got {:?}", self.ball_radii));
        }
        Ok(())
    }

    /// `output_dir/name`, with `output_dir` from the scenario, else
    /// `$COVLAB_OUT`, else `./out`.
    pub fn run_dir(&self) -> PathBuf {
        let root = self
            .output_dir
            .clone()
            .or_else(|| std::env::var_os("COVLAB_OUT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        root.join(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let s = Scenario::from_json(r#"{"name": "a", "domain": {"family": "cone", "lip": 1.0}}"#).unwrap();
        assert_eq!(s, Scenario::new("a", GraphFamily::Cone { lip: 1.0 }));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = Scenario::from_json(r#"{"name": "a", "domain": {"family": "flat"}, "gridn": 128}"#).unwrap_err();
        assert!(e.to_string().contains("gridn"), "{e}");
        let e = Scenario::from_json(r#"{"name": "a", "domain": {"family": "cone", "lip": 1, "amp": 2}}"#).unwrap_err();
        assert!(e.to_string().contains("amp"), "{e}");
    }

    #[test]
    fn validation() {
        let base = r#"{"name": "a", "domain": {"family": "flat"}, "#;
        for bad in [r#""grid_n": 100}"#, r#""eps_sweep": [0.02, 0.01]}"#, r#""p_list": [1.0]}"#, r#""radii": [1.5]}"#] {
            assert!(matches!(Scenario::from_json(&format!("{base}{bad}")), Err(Error::InvalidInput(_))), "{bad}");
        }
    }

    #[test]
    fn round_trip() {
        let mut s = Scenario::new("b", GraphFamily::Sine { amp: 0.3, freq: 2.0 });
        s.map = MapSpec::Shear;
        s.eps_sweep = vec![0.01, 0.02];
        let back = Scenario::from_json(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
