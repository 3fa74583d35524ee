//! State-dependent infection rates and the quantities derived from them.
//!
//! A [`RateModel`] is one of a handful of parametric families
//! β(x, y) built from a polynomial profile b(x). Paired with a recovery rate
//! it becomes a [`ModelInstance`], which knows its reproduction number
//! R(x, y) = β(x, y)·x/γ and the minimal freezing control ρ = (R − 1)/R.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::EpidemicState;
use crate::error::{Error, Result};

/// Default grid resolution for [`ModelInstance::check_assumption1`].
pub const DEFAULT_ASSUMPTION_GRID: usize = 200;

/// Step used by [`PartialsMode::FiniteDifference`] when none is given.
pub const DEFAULT_FD_STEP: f64 = 1e-6;

/// Polynomial profile b(x) = c₀ + c₁x + c₂x² + …
///
/// Parses from `constant(c)`, `affine(c0, c1)`, `polynomial(c0, c1, ...)`
/// or a bare number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileRepr", into = "String")]
pub struct Polynomial {
    coeffs: Vec<f64>,
}

impl Polynomial {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::InvalidParameter(
                "polynomial needs at least one coefficient".into(),
            ));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("polynomial coefficients must be finite".into()));
        }
        Ok(Self { coeffs })
    }

    pub fn constant(c: f64) -> Self {
        Self { coeffs: vec![c] }
    }

    pub fn affine(intercept: f64, slope: f64) -> Self {
        Self {
            coeffs: vec![intercept, slope],
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        self.coeffs
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (i, c)| acc * x + i as f64 * c)
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let body = self.coeffs.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ");
        match self.coeffs.len() {
            1 => write!(f, "constant({body})"),
            2 => write!(f, "affine({body})"),
            _ => write!(f, "polynomial({body})"),
        }
    }
}

impl From<Polynomial> for String {
    fn from(p: Polynomial) -> String {
        p.to_string()
    }
}

impl FromStr for Polynomial {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(c) = s.parse::<f64>() {
            return Ok(Self::constant(c));
        }
        let (head, rest) = s
            .split_once('(')
            .ok_or_else(|| Error::Parse(format!("expected `name(args)` profile, got `{s}`")))?;
        let args = rest
            .strip_suffix(')')
            .ok_or_else(|| Error::Parse(format!("unterminated profile `{s}`")))?;
        let values = args
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|e| Error::Parse(format!("`{a}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        match (head.trim(), values.len()) {
            ("constant", 1) | ("affine", 2) => Self::new(values),
            ("polynomial", n) if n >= 1 => Self::new(values),
            (name, n) => Err(Error::Parse(format!("unknown profile `{name}` with {n} arguments"))),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ProfileRepr {
    Number(f64),
    Text(String),
}

impl TryFrom<ProfileRepr> for Polynomial {
    type Error = Error;

    fn try_from(r: ProfileRepr) -> Result<Self> {
        match r {
            ProfileRepr::Number(c) => Ok(Self::constant(c)),
            ProfileRepr::Text(s) => s.parse(),
        }
    }
}

/// The parametric families of infection rates.
#[derive(Debug, Clone, PartialEq)]
pub enum RateFamily {
    /// β ≡ b (classical SIR).
    Constant(f64),
    /// β = b(x) / (1 + a·y).
    Saturating { b: Polynomial, a: f64 },
    /// β = b(x) · (1 − a·y).
    LinearDamped { b: Polynomial, a: f64 },
    /// β = b(x) · y. Increasing in y, so it never satisfies the monotonicity assumption.
    InfectedProportional { b: Polynomial },
}

/// How the partial derivatives of β are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartialsMode {
    Analytic,
    /// Central differences with step `eta`, clamped to stay inside S.
    FiniteDifference {
        eta: f64,
    },
}

/// An infection rate β(x, y) together with its partials.
#[derive(Debug, Clone, PartialEq)]
pub struct RateModel {
    name: String,
    family: RateFamily,
    partials: PartialsMode,
}

impl RateModel {
    fn checked(name: &str, family: RateFamily) -> Result<Self> {
        let model = Self {
            name: name.to_string(),
            family,
            partials: PartialsMode::Analytic,
        };
        // Positivity is only required away from the x = 0 edge, where every
        // profile of the form b(x) = c·x legitimately vanishes.
        if !model.admits_zero_rate() {
            let n = 50;
            for i in 1..=n {
                for j in 0..n {
                    let x = i as f64 / n as f64;
                    let y = j as f64 / n as f64 * (1.0 - x);
                    let b = model.beta(x, y);
                    if !(b > 0.0) {
                        return Err(Error::InvalidParameter(format!(
                            "{name}: beta({x}, {y}) = {b} is not positive"
                        )));
                    }
                }
            }
        }
        Ok(model)
    }

    /// Classical SIR: β ≡ b.
    pub fn constant(b: f64) -> Result<Self> {
        Self::checked("constant", RateFamily::Constant(b))
    }

    /// β = b(x)/(1 + a·y).
    pub fn saturating(b: Polynomial, a: f64) -> Result<Self> {
        if !(a > -1.0) {
            return Err(Error::InvalidParameter(format!("saturating: a = {a} must exceed -1")));
        }
        Self::checked("saturating", RateFamily::Saturating { b, a })
    }

    /// β = b(x)·(1 − a·y).
    pub fn linear_damped(b: Polynomial, a: f64) -> Result<Self> {
        if !(a <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "linear_damped: a = {a} must be at most 1"
            )));
        }
        Self::checked("linear_damped", RateFamily::LinearDamped { b, a })
    }

    /// β = 0.35·x·(1 − y).
    pub fn fig1() -> Self {
        Self::checked(
            "fig1",
            RateFamily::LinearDamped {
                b: Polynomial::new(vec![0.0, 0.35]).unwrap(),
                a: 1.0,
            },
        )
        .expect("built-in model is valid")
    }

    /// β = (x + 2)/10 · (1 − 0.5·y).
    pub fn fig2() -> Self {
        Self::checked(
            "fig2",
            RateFamily::LinearDamped {
                b: Polynomial::affine(0.2, 0.1),
                a: 0.5,
            },
        )
        .expect("built-in model is valid")
    }

    /// β = (1 − 0.7·x)·y.
    ///
    /// Vanishes on y = 0; admitted with [`RateModel::admits_zero_rate`] set.
    pub fn counterexample() -> Self {
        Self::checked(
            "counterexample",
            RateFamily::InfectedProportional {
                b: Polynomial::affine(1.0, -0.7),
            },
        )
        .expect("built-in model is valid")
    }

    /// Switches the partials to central finite differences with step `eta`.
    pub fn with_finite_difference(mut self, eta: f64) -> Self {
        self.partials = PartialsMode::FiniteDifference { eta };
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn family(&self) -> &RateFamily {
        &self.family
    }

    pub fn partials_mode(&self) -> PartialsMode {
        self.partials
    }

    /// Warning flag: β is allowed to vanish inside S (only the y-proportional family).
    pub fn admits_zero_rate(&self) -> bool {
        matches!(self.family, RateFamily::InfectedProportional { .. })
    }

    #[inline]
    pub fn beta(&self, x: f64, y: f64) -> f64 {
        match &self.family {
            RateFamily::Constant(b) => *b,
            RateFamily::Saturating { b, a } => b.eval(x) / (1.0 + a * y),
            RateFamily::LinearDamped { b, a } => b.eval(x) * (1.0 - a * y),
            RateFamily::InfectedProportional { b } => b.eval(x) * y,
        }
    }

    pub fn beta_x(&self, x: f64, y: f64) -> f64 {
        match self.partials {
            PartialsMode::Analytic => match &self.family {
                RateFamily::Constant(_) => 0.0,
                RateFamily::Saturating { b, a } => b.derivative(x) / (1.0 + a * y),
                RateFamily::LinearDamped { b, a } => b.derivative(x) * (1.0 - a * y),
                RateFamily::InfectedProportional { b } => b.derivative(x) * y,
            },
            PartialsMode::FiniteDifference { eta } => {
                let lo = (x - eta).max(0.0);
                let hi = (x + eta).min((1.0 - y).max(0.0));
                if hi <= lo {
                    return 0.0;
                }
                (self.beta(hi, y) - self.beta(lo, y)) / (hi - lo)
            }
        }
    }

    pub fn beta_y(&self, x: f64, y: f64) -> f64 {
        match self.partials {
            PartialsMode::Analytic => match &self.family {
                RateFamily::Constant(_) => 0.0,
                RateFamily::Saturating { b, a } => -a * b.eval(x) / (1.0 + a * y).powi(2),
                RateFamily::LinearDamped { b, a } => -a * b.eval(x),
                RateFamily::InfectedProportional { b } => b.eval(x),
            },
            PartialsMode::FiniteDifference { eta } => {
                let lo = (y - eta).max(0.0);
                let hi = (y + eta).min((1.0 - x).max(0.0));
                if hi <= lo {
                    return 0.0;
                }
                (self.beta(x, hi) - self.beta(x, lo)) / (hi - lo)
            }
        }
    }
}

/// Config-file description of a rate model.
///
/// ```toml
/// kind = "linear_damped"
/// b = "affine(0.2, 0.1)"
/// a = 0.5
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Constant { b: f64 },
    Saturating { b: Polynomial, a: f64 },
    LinearDamped { b: Polynomial, a: f64 },
    Fig1,
    Fig2,
    Counterexample,
}

impl ModelSpec {
    pub fn build(&self) -> Result<RateModel> {
        match self {
            ModelSpec::Constant { b } => RateModel::constant(*b),
            ModelSpec::Saturating { b, a } => RateModel::saturating(b.clone(), *a),
            ModelSpec::LinearDamped { b, a } => RateModel::linear_damped(b.clone(), *a),
            ModelSpec::Fig1 => Ok(RateModel::fig1()),
            ModelSpec::Fig2 => Ok(RateModel::fig2()),
            ModelSpec::Counterexample => Ok(RateModel::counterexample()),
        }
    }
}

/// A rate model paired with a recovery rate γ > 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInstance {
    pub rate: RateModel,
    gamma: f64,
}

/// Result of sampling the monotonicity assumption on a grid over S.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub grid_resolution: usize,
    /// Minimum of x·β_x + β over the grid.
    pub min_growth: f64,
    /// Maximum of β_y over the grid.
    pub max_beta_y: f64,
    pub satisfied: bool,
    pub violations: Vec<EpidemicState>,
}

impl ModelInstance {
    pub fn new(rate: RateModel, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!("gamma = {gamma} must be positive")));
        }
        Ok(Self { rate, gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub fn beta(&self, x: f64, y: f64) -> f64 {
        self.rate.beta(x, y)
    }

    /// R(x, y) = β(x, y)·x/γ.
    #[inline]
    pub fn reproduction_number(&self, s: EpidemicState) -> f64 {
        self.r(s.x, s.y)
    }

    #[inline]
    pub(crate) fn r(&self, x: f64, y: f64) -> f64 {
        self.rate.beta(x, y) * x / self.gamma
    }

    /// ρ(x, y) = 1 − γ/(x·β(x, y)) = (R − 1)/R.
    pub fn rho(&self, s: EpidemicState) -> Result<f64> {
        let denom = s.x * self.rate.beta(s.x, s.y);
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Domain(format!(
                "rho undefined at ({}, {}): x·beta = {denom}",
                s.x, s.y
            )));
        }
        Ok(1.0 - self.gamma / denom)
    }

    /// ρ without the domain check; callers guarantee x·β > 0.
    #[inline]
    pub(crate) fn rho_unchecked(&self, x: f64, y: f64) -> f64 {
        1.0 - self.gamma / (x * self.rate.beta(x, y))
    }

    /// β(1, 0) > γ, i.e. the epidemic can grow at all.
    pub fn check_rmax_condition(&self) -> bool {
        self.rate.beta(1.0, 0.0) > self.gamma
    }

    /// Samples x·β_x + β > 0 and β_y ≤ 0 on the cell centres of an n×n grid
    /// over the unit square, keeping the points that lie in S.
    pub fn check_assumption1(&self, n: usize) -> Result<AssumptionReport> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "grid resolution {n} must be at least 2"
            )));
        }
        let mut min_growth = f64::INFINITY;
        let mut max_beta_y = f64::NEG_INFINITY;
        let mut violations = Vec::new();
        for i in 0..n {
            let x = (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let y = (j as f64 + 0.5) / n as f64;
                if x + y > 1.0 {
                    continue;
                }
                let growth = x * self.rate.beta_x(x, y) + self.rate.beta(x, y);
                let by = self.rate.beta_y(x, y);
                min_growth = min_growth.min(growth);
                max_beta_y = max_beta_y.max(by);
                if !(growth > 0.0 && by <= 0.0) {
                    violations.push(EpidemicState { x, y });
                }
            }
        }
        let satisfied = min_growth > 0.0 && max_beta_y <= 0.0;
        Ok(AssumptionReport {
            grid_resolution: n,
            min_growth,
            max_beta_y,
            satisfied,
            violations,
        })
    }
}
