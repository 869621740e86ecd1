//! JSON model configuration with strict parsing.

use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::ProcessSpec;
use crate::error::{Result, SweepError};
use crate::geometry::SweepingSet;
use crate::models::{builtin_car, builtin_crowd, AnalyticSolution, CarVariant, CrowdCase};
use crate::transcription::{CostSpec, RunningGrad, SolverOptions};

pub const DEFAULT_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    BuiltinCar,
    BuiltinCrowd,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_tol() -> f64 {
    1e-6
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { tol: default_tol() }
    }
}

/// Point and direction for the `coderiv` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoderivQuery {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub a: Vec<f64>,
    pub w: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ConstraintForm {
    /// `A y + b >= 0`.
    Affine { a: Vec<Vec<f64>>, b: Vec<f64> },
    /// `|y_1 - y_2| >= contact` for two planar points.
    DiskSeparation { contact: f64 },
    /// `radius^2 - |y - center|^2 >= 0`.
    Ball { center: Vec<f64>, radius: f64 },
}

/// `f(x, a) = fx x + fa a + c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DynamicsForm {
    Linear {
        fx: Vec<Vec<f64>>,
        fa: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<Vec<f64>>,
    },
}

/// `phi = weight |x - target|^2 / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalCostForm {
    Quadratic {
        weight: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<Vec<f64>>,
    },
}

/// `ell = control_weight |a|^2 / 2 + state_weight |x|^2 / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RunningCostForm {
    Quadratic {
        control_weight: f64,
        #[serde(default)]
        state_weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomModel {
    pub n: usize,
    pub d: usize,
    pub constraints: ConstraintForm,
    pub dynamics: DynamicsForm,
    pub terminal_cost: TerminalCostForm,
    pub running_cost: RunningCostForm,
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
    /// Initial `u` used for simulation and as the solver start.
    pub u0: Vec<f64>,
    #[serde(default = "one")]
    pub lipschitz_k: f64,
    #[serde(default = "one")]
    pub growth_m: f64,
    #[serde(default = "one")]
    pub rho: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<CarVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case: Option<CrowdCase>,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coderiv: Option<CoderivQuery>,
}

fn default_k() -> usize {
    DEFAULT_K
}

/// First line of `text` mentioning the JSON key `key`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn config_err(text: &str, field: &str, message: impl Into<String>) -> SweepError {
    let key = field.rsplit('.').next().unwrap_or(field);
    SweepError::Config { field: field.to_string(), line: line_of(text, key), message: message.into() }
}

/// Field path from a serde message such as "unknown field `foo`" or
/// "missing field `bar`".
fn field_from_message(msg: &str) -> String {
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "<document>".to_string()
}

impl ModelConfig {
    pub fn builtin_car(variant: CarVariant) -> Self {
        ModelConfig {
            model: ModelKind::BuiltinCar,
            variant: Some(variant),
            case: None,
            k: DEFAULT_K,
            solver: SolverOptions::default(),
            check: CheckConfig::default(),
            custom: None,
            coderiv: None,
        }
    }

    pub fn builtin_crowd(case: CrowdCase) -> Self {
        ModelConfig {
            model: ModelKind::BuiltinCrowd,
            variant: None,
            case: Some(case),
            ..Self::builtin_car(CarVariant::Standard)
        }
    }

    /// Parses and validates a configuration document.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg: ModelConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let line = if e.line() > 0 { Some(e.line()) } else { None };
            SweepError::Config { field: field_from_message(&msg), line, message: msg }
        })?;
        cfg.fill_defaults();
        cfg.validate_with(text)?;
        Ok(cfg)
    }

    fn fill_defaults(&mut self) {
        match self.model {
            ModelKind::BuiltinCar => {
                self.variant.get_or_insert(CarVariant::Standard);
            }
            ModelKind::BuiltinCrowd => {
                self.case.get_or_insert(CrowdCase::Contact);
            }
            ModelKind::Custom => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with("")
    }

    fn validate_with(&self, text: &str) -> Result<()> {
        let err = |field: &str, msg: &str| config_err(text, field, msg);
        if self.k < 2 {
            return Err(err("k", "must be at least 2"));
        }
        self.solver.validate().map_err(|e| err("solver", &e.to_string()))?;
        if !(self.check.tol > 0.0) {
            return Err(err("check.tol", "must be positive"));
        }
        match self.model {
            ModelKind::BuiltinCar | ModelKind::BuiltinCrowd => {
                if self.custom.is_some() {
                    return Err(err("custom", "builtin models do not accept model overrides"));
                }
                if self.model == ModelKind::BuiltinCar && self.case.is_some() {
                    return Err(err("case", "only the crowd model has cases"));
                }
                if self.model == ModelKind::BuiltinCrowd && self.variant.is_some() {
                    return Err(err("variant", "only the car model has variants"));
                }
            }
            ModelKind::Custom => {
                let Some(c) = &self.custom else {
                    return Err(err("custom", "custom models need a `custom` section"));
                };
                if self.variant.is_some() || self.case.is_some() {
                    return Err(err("model", "variant and case apply to builtin models only"));
                }
                c.validate(text)?;
            }
        }
        if let Some(q) = &self.coderiv {
            let (n, d) = self.dims();
            if q.x.len() != n || q.u.len() != n || q.w.len() != n || q.y.len() != n || q.a.len() != d {
                return Err(err("coderiv", "query vectors do not match the model dimensions"));
            }
        }
        Ok(())
    }

    /// State and control dimensions.
    pub fn dims(&self) -> (usize, usize) {
        match self.model {
            ModelKind::BuiltinCar => (1, 1),
            ModelKind::BuiltinCrowd => (4, 2),
            ModelKind::Custom => self.custom.as_ref().map(|c| (c.n, c.d)).unwrap_or((0, 0)),
        }
    }

    pub fn to_canonical_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Builds the process, cost and (for builtins) the analytic solution.
    pub fn build(&self) -> Result<Setup> {
        self.validate()?;
        match self.model {
            ModelKind::BuiltinCar => {
                let m = builtin_car(self.variant.unwrap_or_default())?;
                let u0 = (m.analytic.u)(0.0);
                Ok(Setup { name: m.name, spec: m.spec, cost: m.cost, analytic: Some(m.analytic), u0 })
            }
            ModelKind::BuiltinCrowd => {
                let m = builtin_crowd(self.case.unwrap_or_default())?;
                let u0 = (m.analytic.u)(0.0);
                Ok(Setup { name: m.name, spec: m.spec, cost: m.cost, analytic: Some(m.analytic), u0 })
            }
            ModelKind::Custom => self.custom.as_ref().expect("validated").build(),
        }
    }
}

/// Reads and parses a configuration file.
pub fn parse_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| SweepError::Config {
        field: "<file>".into(),
        line: None,
        message: format!("{}: {e}", path.display()),
    })?;
    ModelConfig::parse_str(&text)
}

fn matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Option<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl CustomModel {
    fn validate(&self, text: &str) -> Result<()> {
        let err = |field: &str, msg: &str| config_err(text, &format!("custom.{field}"), msg);
        let (n, d) = (self.n, self.d);
        if n == 0 {
            return Err(err("n", "must be positive"));
        }
        if d == 0 {
            return Err(err("d", "must be positive"));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if self.x0.len() != n || !finite(&self.x0) {
            return Err(err("x0", "needs n finite entries"));
        }
        if self.u0.len() != n || !finite(&self.u0) {
            return Err(err("u0", "needs n finite entries"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(err("horizon", "must be positive"));
        }
        if !(self.r1 > 0.0) {
            return Err(err("r1", "must be positive"));
        }
        if !(self.r2 >= self.r1) || !self.r2.is_finite() {
            return Err(err("r2", "must be finite and at least r1"));
        }
        if !(self.lipschitz_k > 0.0) {
            return Err(err("lipschitz_k", "must be positive"));
        }
        if !(self.growth_m > 0.0) {
            return Err(err("growth_m", "must be positive"));
        }
        if !(self.rho > 0.0) {
            return Err(err("rho", "must be positive"));
        }
        match &self.constraints {
            ConstraintForm::Affine { a, b } => {
                if a.is_empty() || matrix(a, a.len(), n).is_none() || b.len() != a.len() {
                    return Err(err("constraints", "affine form needs an m x n matrix `a` and m offsets `b`"));
                }
                if a.iter().any(|r| r.iter().all(|v| *v == 0.0)) {
                    return Err(err("constraints", "affine rows must be nonzero"));
                }
            }
            ConstraintForm::DiskSeparation { contact } => {
                if n != 4 {
                    return Err(err("constraints", "disk separation needs n = 4"));
                }
                if !(*contact > 0.0) {
                    return Err(err("constraints", "contact must be positive"));
                }
            }
            ConstraintForm::Ball { center, radius } => {
                if center.len() != n || !(*radius > 0.0) {
                    return Err(err("constraints", "ball needs an n-vector center and a positive radius"));
                }
            }
        }
        let DynamicsForm::Linear { fx, fa, c } = &self.dynamics;
        if matrix(fx, n, n).is_none() {
            return Err(err("dynamics", "fx must be n x n"));
        }
        if matrix(fa, n, d).is_none() {
            return Err(err("dynamics", "fa must be n x d"));
        }
        if c.as_ref().is_some_and(|c| c.len() != n) {
            return Err(err("dynamics", "c must have n entries"));
        }
        let TerminalCostForm::Quadratic { weight, target } = &self.terminal_cost;
        if !(*weight >= 0.0) || target.as_ref().is_some_and(|t| t.len() != n) {
            return Err(err("terminal_cost", "weight must be nonnegative and target an n-vector"));
        }
        let RunningCostForm::Quadratic { control_weight, state_weight } = &self.running_cost;
        if !(*control_weight >= 0.0) || !(*state_weight >= 0.0) {
            return Err(err("running_cost", "weights must be nonnegative"));
        }
        Ok(())
    }

    fn build(&self) -> Result<Setup> {
        let (n, d) = (self.n, self.d);
        let set = match &self.constraints {
            ConstraintForm::Affine { a, b } => SweepingSet::affine(
                matrix(a, a.len(), n).expect("validated"),
                DVector::from_column_slice(b),
                1.0,
                self.rho,
            )?,
            ConstraintForm::DiskSeparation { contact } => SweepingSet::two_disks(*contact, self.rho)?,
            ConstraintForm::Ball { center, radius } => {
                SweepingSet::ball(DVector::from_column_slice(center), *radius, self.rho)?
            }
        };
        let DynamicsForm::Linear { fx, fa, c } = &self.dynamics;
        let fx = matrix(fx, n, n).expect("validated");
        let fa = matrix(fa, n, d).expect("validated");
        let c = c.as_ref().map(|c| DVector::from_column_slice(c)).unwrap_or_else(|| DVector::zeros(n));
        let (fx1, fa1, fx2, fa2) = (fx.clone(), fa.clone(), fx, fa);
        let spec = ProcessSpec::new(
            set,
            Arc::new(move |x, a| &fx1 * x + &fa1 * a + &c),
            Arc::new(move |_, _| fx2.clone()),
            Arc::new(move |_, _| fa2.clone()),
            d,
            self.horizon,
            DVector::from_column_slice(&self.x0),
            self.r1,
            self.r2,
            self.lipschitz_k,
            self.growth_m,
        )?;
        let TerminalCostForm::Quadratic { weight, target } = &self.terminal_cost;
        let (w, target) =
            (*weight, target.as_ref().map(|t| DVector::from_column_slice(t)).unwrap_or_else(|| DVector::zeros(n)));
        let t2 = target.clone();
        let RunningCostForm::Quadratic { control_weight: cw, state_weight: sw } = self.running_cost;
        let cost = CostSpec::new(
            Arc::new(move |x| 0.5 * w * (x - &target).norm_squared()),
            Arc::new(move |r| 0.5 * cw * r.a.norm_squared() + 0.5 * sw * r.x.norm_squared()),
        )
        .with_gradients(
            Arc::new(move |x| (x - &t2) * w),
            Arc::new(move |r| RunningGrad {
                x: r.x * sw,
                u: DVector::zeros(r.u.len()),
                a: r.a * cw,
                xdot: DVector::zeros(r.xdot.len()),
                udot: DVector::zeros(r.udot.len()),
                adot: DVector::zeros(r.adot.len()),
            }),
        );
        Ok(Setup { name: "custom".into(), spec, cost, analytic: None, u0: DVector::from_column_slice(&self.u0) })
    }
}

/// Everything a command needs to run.
#[derive(Debug, Clone)]
pub struct Setup {
    pub name: String,
    pub spec: ProcessSpec,
    pub cost: CostSpec,
    pub analytic: Option<AnalyticSolution>,
    pub u0: DVector<f64>,
}
