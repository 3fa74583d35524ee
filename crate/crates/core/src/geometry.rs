//! Phase-plane geometry of the uncontrolled model for a fixed threshold ȳ.
//!
//! * ỹ: the unique y with R(1 − y, y) = 1.
//! * κ(y): the R = 1 curve, x = κ(y) for y ∈ [0, ỹ]; x̄ = κ(ȳ).
//! * λ(y): the backward orbit through (x̄, ȳ), on [ŷ, ȳ]. States to its right
//!   (D⁺) breach the threshold without intervention; the rest (D⁻) never do.
//! * h(x, y): abscissa at which the uncontrolled orbit from a D⁺ state first
//!   reaches y = ȳ. It is constant along orbits.

use std::io::{self, Write};

use serde::Serialize;

use crate::dynamics::{
    simulate_backward, simulate_final, ControlSignal, EndReason, EpidemicState, EventKind, IntegratorConfig, Stop,
};
use crate::error::{Error, Result};
use crate::numeric::{bisect, fmt12};
use crate::rate::{ModelInstance, DEFAULT_ASSUMPTION_GRID};

/// Root tolerance for ỹ and κ.
pub const ROOT_TOL: f64 = 1e-12;

/// A state with y above ȳ by more than this is `AboveThreshold`.
pub const THRESHOLD_TOL: f64 = 1e-9;

/// States within this distance to the left of λ count as D⁻.
pub const SEPARATRIX_TIE_TOL: f64 = 1e-12;

/// Lower end of the sampled λ when the separatrix limits to an equilibrium.
pub const LAMBDA_FLOOR: f64 = 1e-6;

/// Finite-difference step for the partials of h.
pub const H_FD_STEP: f64 = 1e-5;

const KAPPA_SAMPLES: usize = 1001;
const LAMBDA_MIN_SAMPLES: usize = 1000;
const LAMBDA_ARC_SPACING: f64 = 1e-4;
const LAMBDA_TIP_BAND: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RegionLabel {
    DMinus,
    DPlus,
    AboveThreshold,
    Trivial,
}

impl RegionLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegionLabel::DMinus => "DMinus",
            RegionLabel::DPlus => "DPlus",
            RegionLabel::AboveThreshold => "AboveThreshold",
            RegionLabel::Trivial => "Trivial",
        }
    }
}

/// ỹ: root of y ↦ R(1 − y, y) − 1 on (0, 1).
pub fn compute_tilde_y(m: &ModelInstance) -> Result<f64> {
    if !m.check_rmax_condition() {
        return Err(Error::PreconditionViolated(format!(
            "beta(1, 0) = {} does not exceed gamma = {}",
            m.beta(1.0, 0.0),
            m.gamma()
        )));
    }
    bisect(0.0, 1.0, ROOT_TOL, 200, |y| m.r(1.0 - y, y) - 1.0)
}

/// κ(y): the x ∈ [0, 1 − y] with R(x, y) = 1, for y ∈ [0, ỹ].
pub fn kappa(m: &ModelInstance, y: f64) -> Result<f64> {
    let tilde_y = compute_tilde_y(m)?;
    kappa_within(m, tilde_y, y)
}

fn kappa_within(m: &ModelInstance, tilde_y: f64, y: f64) -> Result<f64> {
    if !(y >= 0.0 && y <= tilde_y + ROOT_TOL) {
        return Err(Error::PreconditionViolated(format!(
            "kappa({y}) outside [0, {tilde_y}]"
        )));
    }
    let y = y.min(tilde_y);
    let hi = 1.0 - y;
    let f = |x: f64| m.r(x, y) - 1.0;
    let f_hi = f(hi);
    if f_hi <= 0.0 {
        // y = ỹ up to rounding.
        return Ok(hi);
    }
    bisect(0.0, hi, ROOT_TOL, 200, f)
}

/// Precomputed geometry for one model and threshold. Immutable once built.
#[derive(Debug, Clone)]
pub struct GeometryCache {
    model: ModelInstance,
    ybar: f64,
    cfg: IntegratorConfig,
    tilde_y: Option<f64>,
    xbar: Option<f64>,
    yhat: f64,
    kappa_samples: Vec<(f64, f64)>,
    /// (y, λ(y)) in increasing y.
    lambda_samples: Vec<(f64, f64)>,
    trivial_regime: bool,
    assumption1: bool,
    lambda_extrapolated: bool,
}

impl GeometryCache {
    /// Builds the cache, falling back to the trivial regime when β(1, 0) ≤ γ
    /// or ȳ > ỹ.
    pub fn new(m: &ModelInstance, ybar: f64, cfg: &IntegratorConfig) -> Result<Self> {
        if !(ybar > 0.0 && ybar <= 1.0) {
            return Err(Error::InvalidParameter(format!("threshold {ybar} must lie in (0, 1]")));
        }
        let assumption1 = m.check_assumption1(DEFAULT_ASSUMPTION_GRID)?.satisfied;
        let tilde_y = compute_tilde_y(m).ok();
        let trivial = match tilde_y {
            None => true,
            Some(ty) => ybar > ty,
        };
        if trivial {
            let kappa_samples = tilde_y.map(|ty| sample_kappa(m, ty)).transpose()?.unwrap_or_default();
            return Ok(Self {
                model: m.clone(),
                ybar,
                cfg: cfg.clone(),
                tilde_y,
                xbar: None,
                yhat: 0.0,
                kappa_samples,
                lambda_samples: Vec::new(),
                trivial_regime: true,
                assumption1,
                lambda_extrapolated: false,
            });
        }
        compute_separatrix(m, ybar, cfg)
    }

    pub fn model(&self) -> &ModelInstance {
        &self.model
    }

    pub fn ybar(&self) -> f64 {
        self.ybar
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.cfg
    }

    pub fn tilde_y(&self) -> Option<f64> {
        self.tilde_y
    }

    pub fn xbar(&self) -> Option<f64> {
        self.xbar
    }

    pub fn yhat(&self) -> f64 {
        self.yhat
    }

    pub fn is_trivial(&self) -> bool {
        self.trivial_regime
    }

    /// Whether the model passed the grid-sampled monotonicity check.
    pub fn assumption1(&self) -> bool {
        self.assumption1
    }

    /// Set when λ below [`LAMBDA_FLOOR`] is extrapolated (ŷ = 0).
    pub fn lambda_extrapolated(&self) -> bool {
        self.lambda_extrapolated
    }

    pub fn kappa_samples(&self) -> &[(f64, f64)] {
        &self.kappa_samples
    }

    pub fn lambda_samples(&self) -> &[(f64, f64)] {
        &self.lambda_samples
    }

    pub fn kappa(&self, y: f64) -> Result<f64> {
        let ty = self
            .tilde_y
            .ok_or_else(|| Error::PreconditionViolated("kappa undefined: beta(1, 0) <= gamma".into()))?;
        kappa_within(&self.model, ty, y)
    }

    /// λ(y) by linear interpolation, for y ∈ [ŷ, ȳ]. Constant extrapolation
    /// below the lowest sample when ŷ = 0.
    pub fn lambda(&self, y: f64) -> Option<f64> {
        let samples = &self.lambda_samples;
        let (y_lo, x_lo) = *samples.first()?;
        let (y_hi, x_hi) = *samples.last()?;
        if y > y_hi || y < self.yhat {
            return None;
        }
        if y == y_hi {
            return Some(x_hi);
        }
        if y <= y_lo {
            return Some(x_lo);
        }
        let i = samples.partition_point(|&(ys, _)| ys <= y);
        let (ya, xa) = samples[i - 1];
        let (yb, xb) = samples[i];
        if yb == ya {
            return Some(xa.max(xb));
        }
        Some(xa + (xb - xa) * (y - ya) / (yb - ya))
    }

    pub fn classify(&self, s: EpidemicState) -> RegionLabel {
        if self.trivial_regime {
            return RegionLabel::Trivial;
        }
        if s.y > self.ybar + THRESHOLD_TOL {
            return RegionLabel::AboveThreshold;
        }
        if s.y <= 0.0 {
            return RegionLabel::DMinus;
        }
        match self.lambda(s.y.min(self.ybar)) {
            Some(l) if s.x > l + SEPARATRIX_TIE_TOL => RegionLabel::DPlus,
            _ => RegionLabel::DMinus,
        }
    }

    /// (h, T): abscissa and time at which the uncontrolled orbit from a D⁺
    /// state reaches y = ȳ.
    pub fn hitting_abscissa_h(&self, s: EpidemicState) -> Result<(f64, f64)> {
        let label = self.classify(s);
        if label != RegionLabel::DPlus {
            return Err(Error::PreconditionViolated(format!(
                "h defined on D+ only; ({}, {}) is {}",
                s.x,
                s.y,
                label.as_str()
            )));
        }
        if s.y >= self.ybar - ROOT_TOL {
            return Ok((s.x, 0.0));
        }
        let cfg = self.cfg.with_threshold(self.ybar);
        let (t, end, _) = simulate_final(
            &self.model,
            &ControlSignal::Zero,
            s,
            &cfg,
            Stop::OnEvent(EventKind::ThresholdHit),
        )?;
        Ok((end.x, t))
    }

    pub fn h(&self, s: EpidemicState) -> Result<f64> {
        Ok(self.hitting_abscissa_h(s)?.0)
    }

    /// Four-point stencil around `s` used for differencing scalar fields on
    /// D⁺: central with step [`H_FD_STEP`], shortened on the sides bounded by
    /// y = ȳ and x + y = 1.
    pub fn difference_stencil(&self, s: EpidemicState) -> Result<Stencil> {
        if self.classify(s) != RegionLabel::DPlus {
            return Err(Error::PreconditionViolated(format!("({}, {}) is not in D+", s.x, s.y)));
        }
        let d = H_FD_STEP;
        let stencil = Stencil {
            x_lo: EpidemicState { x: s.x - d, y: s.y },
            x_hi: EpidemicState {
                x: (s.x + d).min(1.0 - s.y),
                y: s.y,
            },
            y_lo: EpidemicState { x: s.x, y: s.y - d },
            y_hi: EpidemicState {
                x: s.x,
                y: (s.y + d).min(self.ybar).min(1.0 - s.x),
            },
        };
        for p in [stencil.x_lo, stencil.x_hi, stencil.y_lo, stencil.y_hi] {
            if self.classify(p) != RegionLabel::DPlus {
                return Err(Error::PreconditionViolated(format!(
                    "({}, {}) too close to the boundary of D+ for differencing",
                    s.x, s.y
                )));
            }
        }
        Ok(stencil)
    }

    /// (h_x, h_y) by finite differences on [`GeometryCache::difference_stencil`].
    pub fn h_partials(&self, s: EpidemicState) -> Result<(f64, f64)> {
        self.difference_stencil(s)?.gradient(|p| self.h(p))
    }

    /// CSV `y,kappa,lambda` on a shared uniform y-grid over [0, max(ỹ, ȳ)];
    /// cells are left empty where a curve is undefined.
    pub fn write_curves_csv<W: Write>(&self, points: usize, mut w: W) -> io::Result<()> {
        writeln!(w, "y,kappa,lambda")?;
        let top = self
            .tilde_y
            .unwrap_or(0.0)
            .max(if self.trivial_regime { 0.0 } else { self.ybar });
        let n = points.max(2);
        for i in 0..n {
            let y = top * i as f64 / (n - 1) as f64;
            let k = self.tilde_y.filter(|&ty| y <= ty).and_then(|_| self.kappa(y).ok());
            let l = if self.trivial_regime { None } else { self.lambda(y) };
            let cell = |v: Option<f64>| v.map(fmt12).unwrap_or_default();
            writeln!(w, "{},{},{}", fmt12(y), cell(k), cell(l))?;
        }
        Ok(())
    }
}

/// Offset points for a two-axis difference quotient.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub x_lo: EpidemicState,
    pub x_hi: EpidemicState,
    pub y_lo: EpidemicState,
    pub y_hi: EpidemicState,
}

impl Stencil {
    pub fn gradient<F>(&self, mut f: F) -> Result<(f64, f64)>
    where
        F: FnMut(EpidemicState) -> Result<f64>,
    {
        let fx = (f(self.x_hi)? - f(self.x_lo)?) / (self.x_hi.x - self.x_lo.x);
        let fy = (f(self.y_hi)? - f(self.y_lo)?) / (self.y_hi.y - self.y_lo.y);
        Ok((fx, fy))
    }
}

fn sample_kappa(m: &ModelInstance, tilde_y: f64) -> Result<Vec<(f64, f64)>> {
    (0..KAPPA_SAMPLES)
        .map(|i| {
            let y = tilde_y * i as f64 / (KAPPA_SAMPLES - 1) as f64;
            kappa_within(m, tilde_y, y).map(|k| (y, k))
        })
        .collect()
}

/// Traces the separatrix λ by integrating the backward dynamics from (x̄, ȳ).
pub fn compute_separatrix(m: &ModelInstance, ybar: f64, cfg: &IntegratorConfig) -> Result<GeometryCache> {
    if !(ybar > 0.0 && ybar <= 1.0) {
        return Err(Error::InvalidParameter(format!("threshold {ybar} must lie in (0, 1]")));
    }
    let tilde_y = compute_tilde_y(m)?;
    if ybar > tilde_y {
        return Err(Error::PreconditionViolated(format!(
            "trivial regime: threshold {ybar} exceeds the R = 1 apex {tilde_y}"
        )));
    }
    let xbar = kappa_within(m, tilde_y, ybar)?;
    let back = simulate_backward(m, EpidemicState { x: xbar, y: ybar }, cfg)?;
    let hit_boundary = back.end == Some(EndReason::Event(EventKind::BoundaryExit));
    let yhat = if hit_boundary { back.last_state().y } else { 0.0 };
    let floor = if hit_boundary { yhat } else { LAMBDA_FLOOR };

    // The orbit leaves (x̄, ȳ) horizontally, so keep every sample in a thin
    // band under ȳ and thin by arc length elsewhere.
    let n = back.states.len();
    let spacing = (LAMBDA_ARC_SPACING).min(path_length(&back.states) / LAMBDA_MIN_SAMPLES as f64);
    let mut kept: Vec<(f64, f64)> = Vec::new();
    let mut last = back.states[0];
    kept.push((last.y, last.x));
    for (k, s) in back.states.iter().enumerate().skip(1) {
        if s.y < floor {
            break;
        }
        let is_last = k + 1 == n;
        let in_tip = ybar - s.y < LAMBDA_TIP_BAND;
        if is_last || in_tip || (s.x - last.x).abs() + (s.y - last.y).abs() >= spacing {
            kept.push((s.y, s.x));
            last = *s;
        }
    }
    kept.reverse();
    // Strictly increasing y.
    kept.dedup_by(|b, a| b.0 <= a.0);

    Ok(GeometryCache {
        model: m.clone(),
        ybar,
        cfg: cfg.clone(),
        tilde_y: Some(tilde_y),
        xbar: Some(xbar),
        yhat,
        kappa_samples: sample_kappa(m, tilde_y)?,
        lambda_samples: kept,
        trivial_regime: false,
        assumption1: m.check_assumption1(DEFAULT_ASSUMPTION_GRID)?.satisfied,
        lambda_extrapolated: !hit_boundary,
    })
}

fn path_length(states: &[EpidemicState]) -> f64 {
    states
        .windows(2)
        .map(|w| (w[1].x - w[0].x).abs() + (w[1].y - w[0].y).abs())
        .sum()
}
