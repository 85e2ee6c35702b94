//! TOML model files.
//!
//! ```toml
//! [coefficients]
//! hurst = 0.75
//! eta0 = 0.0
//! b = { kind = "constant", value = 0.0 }
//! sigma = { kind = "constant", value = 1.0 }
//!
//! [delays]
//! delta = { kind = "constant", value = 0.25 }
//! zeta = { kind = "constant", value = 0.0 }
//! k = 0.25
//! l = 1.0
//!
//! [driver]
//! lipschitz = 1.0
//! form = { kind = "linear", anticipated_y = 1.0 }
//!
//! [terminal]
//! g = { kind = "linear", intercept = 0.0, slope = 1.0 }
//! h = { kind = "constant", value = 1.0 }
//! degree = 1
//!
//! [grid]
//! horizon = 1.0
//! n_steps = 500      # steps on [0, T+K]
//! n_space = 401      # or: dx = 0.005
//! ```
//!
//! Optional `[run]` (seed, paths, solver tolerances) and `[compare]` (the two
//! drivers/terminals and the middle data of a comparison) sections complete it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CoefficientSet, DelaySpec, DriverSpec, ModelSpec, TerminalData};
use crate::solver::{SolverParams, SpaceParams, SpaceResolution};

fn default_span() -> f64 {
    6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    /// Steps on `[0, T+K]`.
    pub n_steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_space: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
    #[serde(default = "default_span")]
    pub x_span: f64,
}

impl GridConfig {
    pub fn space(&self) -> Result<SpaceParams> {
        let resolution = match (self.n_space, self.dx) {
            (Some(n), None) => SpaceResolution::Nodes(n),
            (None, Some(dx)) => SpaceResolution::Step(dx),
            (None, None) => SpaceParams::default().resolution,
            (Some(_), Some(_)) => return Err(Error::Config("[grid] takes n_space or dx, not both".into())),
        };
        Ok(SpaceParams { span: self.x_span, resolution })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

/// Data of a comparison: models 1 and 2 share everything but driver and terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub driver1: DriverSpec,
    pub driver2: DriverSpec,
    pub driver_bar: DriverSpec,
    pub terminal1: TerminalData,
    pub terminal2: TerminalData,
    pub terminal_bar: TerminalData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub coefficients: CoefficientSet,
    pub delays: DelaySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<DriverSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal: Option<TerminalData>,
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSection>,
}

impl ModelFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        file.check()?;
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn check(&self) -> Result<()> {
        let g = &self.grid;
        if !(g.horizon > 0.0) || g.n_steps == 0 || !(g.x_span > 0.0) {
            return Err(Error::Config("grid horizon, n_steps and x_span must be positive".into()));
        }
        if g.n_space.is_some_and(|n| n < 4) || g.dx.is_some_and(|d| !(d > 0.0)) {
            return Err(Error::Config("n_space must be at least 4 and dx positive".into()));
        }
        if let Some(run) = &self.run {
            if run.n_paths == Some(0) || run.max_iter == Some(0) || run.tol.is_some_and(|t| !(t > 0.0)) {
                return Err(Error::Config("[run] values must be positive".into()));
            }
            if run.beta.is_some_and(|b| !(b > 1.0)) {
                return Err(Error::Config("beta must exceed 1".into()));
            }
        }
        if self.driver.is_none() != self.terminal.is_none() {
            return Err(Error::Config("[driver] and [terminal] go together".into()));
        }
        if self.driver.is_none() && self.compare.is_none() {
            return Err(Error::Config("need [driver] and [terminal], or a [compare] section".into()));
        }
        self.grid.space()?;
        Ok(())
    }

    fn assemble(&self, driver: &DriverSpec, terminal: &TerminalData) -> ModelSpec {
        ModelSpec {
            coefficients: self.coefficients.clone(),
            delays: self.delays.clone(),
            driver: driver.clone(),
            terminal: terminal.clone(),
            horizon: self.grid.horizon,
        }
    }

    /// The single model of the file.
    pub fn model(&self) -> Result<ModelSpec> {
        match (&self.driver, &self.terminal) {
            (Some(d), Some(t)) => Ok(self.assemble(d, t)),
            _ => Err(Error::Config("file has no [driver]/[terminal] model".into())),
        }
    }

    /// Models 1 and 2 of a comparison file.
    pub fn compare_models(&self) -> Result<(ModelSpec, ModelSpec, &CompareSection)> {
        let c = self.compare.as_ref().ok_or_else(|| Error::Config("file has no [compare] section".into()))?;
        Ok((self.assemble(&c.driver1, &c.terminal1), self.assemble(&c.driver2, &c.terminal2), c))
    }

    /// Solver parameters from `[grid]` and `[run]`, defaults elsewhere.
    pub fn solver_params(&self) -> Result<SolverParams> {
        let mut p = SolverParams { space: self.grid.space()?, ..SolverParams::default() };
        if let Some(run) = &self.run {
            p.tol = run.tol.unwrap_or(p.tol);
            p.max_iter = run.max_iter.unwrap_or(p.max_iter);
            p.beta = run.beta.unwrap_or(p.beta);
        }
        Ok(p)
    }
}
