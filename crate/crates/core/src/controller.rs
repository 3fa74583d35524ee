//! The filling-the-box policy and its value function.
//!
//! The policy leaves the epidemic alone until y reaches the threshold, then
//! holds y at the threshold with u = ρ(x, ȳ) until R(x, ȳ) = 1, and lets the
//! infection decay from there. On the threshold x falls at the constant rate
//! γȳ, so the ride is integrated in closed form.

use serde::Serialize;

use crate::dynamics::{
    cost_j, simulate_from, ControlSignal, EndReason, EpidemicState, Event, EventKind, IntegratorConfig,
    PiecewiseConstant, Stop, Trajectory,
};
use crate::error::{Error, Result};
use crate::geometry::{GeometryCache, RegionLabel, THRESHOLD_TOL};
use crate::numeric::{bisect, simpson};
use crate::rate::ModelInstance;

/// Panels used for the value-function quadrature.
pub const VALUE_PANELS: usize = 1000;

/// A run is feasible when max y stays below the threshold plus this.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// States this close below the threshold are treated as on it.
const ON_THRESHOLD: f64 = 1e-12;

/// Downward scan step when locating the release abscissa.
const RELEASE_SCAN: f64 = 1e-3;

/// Panels per ride interval when averaging ρ into an open-loop value.
const RIDE_AVERAGE_PANELS: usize = 8;

/// How a filling-the-box run was classified at its start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// The threshold lies above every reachable peak; no control is needed.
    Trivial,
    /// The start is in D⁻ and never breaches the threshold uncontrolled.
    DMinus,
    /// The start is in D⁺; the box is filled.
    DPlus,
    /// The monotonicity assumption fails, so no region is certified and the
    /// policy is run as stated.
    Unverified,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Trivial => "trivial",
            Regime::DMinus => "d_minus",
            Regime::DPlus => "d_plus",
            Regime::Unverified => "unverified",
        }
    }
}

/// μ(x, y): zero below the threshold, [ρ(x, ȳ)]₊ on it.
pub fn mu(g: &GeometryCache, s: EpidemicState) -> Result<f64> {
    let ybar = g.ybar();
    if s.y > ybar + THRESHOLD_TOL {
        return Err(Error::PreconditionViolated(format!(
            "y = {} is above the threshold {ybar}",
            s.y
        )));
    }
    if ybar - s.y > THRESHOLD_TOL {
        return Ok(0.0);
    }
    let m = g.model();
    if s.x * m.beta(s.x, ybar) <= 0.0 {
        return Ok(0.0);
    }
    Ok(m.rho_unchecked(s.x, ybar).max(0.0))
}

/// Output of [`run_filling_the_box`].
#[derive(Debug, Clone)]
pub struct FillingTheBoxRun {
    pub regime: Regime,
    pub threshold: f64,
    /// Time the threshold is reached, if it is.
    pub t0: Option<f64>,
    /// Release time, where R(x, ȳ) = 1.
    pub t1: Option<f64>,
    /// Abscissa on arrival at the threshold.
    pub h0: Option<f64>,
    /// Abscissa at release.
    pub xbar: Option<f64>,
    pub trajectory: Trajectory,
    /// The applied control as an open-loop signal (interval averages of ρ on the ride).
    pub control: ControlSignal,
    pub cost: f64,
}

/// Compact description of a run for JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    #[serde(rename = "T0")]
    pub t0: Option<f64>,
    #[serde(rename = "T1")]
    pub t1: Option<f64>,
    pub h0: Option<f64>,
    pub xbar: Option<f64>,
    pub cost: f64,
    pub feasible: bool,
    pub regime: Regime,
    pub threshold: f64,
    pub max_y: f64,
}

impl FillingTheBoxRun {
    pub fn feasible(&self) -> bool {
        self.trajectory.max_y() <= self.threshold + FEASIBILITY_TOL
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            t0: self.t0,
            t1: self.t1,
            h0: self.h0,
            xbar: self.xbar,
            cost: self.cost,
            feasible: self.feasible(),
            regime: self.regime,
            threshold: self.threshold,
            max_y: self.trajectory.max_y(),
        }
    }
}

/// Runs the filling-the-box policy from `s0` until the infection is extinct.
pub fn run_filling_the_box(g: &GeometryCache, s0: EpidemicState, cfg: &IntegratorConfig) -> Result<FillingTheBoxRun> {
    let ybar = g.ybar();
    if s0.y > ybar + THRESHOLD_TOL {
        return Err(Error::InfeasibleStart { y0: s0.y, ybar });
    }
    let regime = if !g.assumption1() {
        Regime::Unverified
    } else {
        match g.classify(s0) {
            RegionLabel::Trivial => Regime::Trivial,
            RegionLabel::DPlus => Regime::DPlus,
            _ => Regime::DMinus,
        }
    };
    if matches!(regime, Regime::Trivial | Regime::DMinus) {
        let cfg = cfg.with_threshold(ybar);
        let trajectory = simulate_from(g.model(), &ControlSignal::Zero, s0, 0.0, &cfg, Stop::Extinction)?;
        let cost = cost_j(&trajectory)?;
        return Ok(FillingTheBoxRun {
            regime,
            threshold: ybar,
            t0: None,
            t1: None,
            h0: None,
            xbar: None,
            trajectory,
            control: ControlSignal::Zero,
            cost,
        });
    }
    let mut run = filling_the_box_at_level(g.model(), ybar, s0, cfg)?;
    run.regime = regime;
    Ok(run)
}

/// The same three-phase policy with the box lid at an arbitrary `level`,
/// without consulting any precomputed geometry.
pub fn filling_the_box_at_level(
    m: &ModelInstance,
    level: f64,
    s0: EpidemicState,
    cfg: &IntegratorConfig,
) -> Result<FillingTheBoxRun> {
    filling_the_box_from(m, level, s0, 0.0, cfg)
}

/// As [`filling_the_box_at_level`], with the clock starting at `t_start`.
pub fn filling_the_box_from(
    m: &ModelInstance,
    level: f64,
    s0: EpidemicState,
    t_start: f64,
    cfg: &IntegratorConfig,
) -> Result<FillingTheBoxRun> {
    three_phase(m, level, s0, t_start, cfg, true)
}

/// The control of [`filling_the_box_from`] alone; the final decay is not simulated.
pub(crate) fn filling_the_box_signal(
    m: &ModelInstance,
    level: f64,
    s0: EpidemicState,
    t_start: f64,
    cfg: &IntegratorConfig,
) -> Result<ControlSignal> {
    Ok(three_phase(m, level, s0, t_start, cfg, false)?.control)
}

fn three_phase(
    m: &ModelInstance,
    level: f64,
    s0: EpidemicState,
    t_start: f64,
    cfg: &IntegratorConfig,
    decay: bool,
) -> Result<FillingTheBoxRun> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::InvalidParameter(format!("level {level} must lie in (0, 1]")));
    }
    if s0.y > level + THRESHOLD_TOL {
        return Err(Error::InfeasibleStart { y0: s0.y, ybar: level });
    }
    let cfg = cfg.with_threshold(level);
    let mut run = FillingTheBoxRun {
        regime: Regime::Unverified,
        threshold: level,
        t0: None,
        t1: None,
        h0: None,
        xbar: None,
        trajectory: Trajectory::default(),
        control: ControlSignal::Zero,
        cost: 0.0,
    };

    // Phase 1: free spread.
    let (t0, arrival) = if s0.y >= level - ON_THRESHOLD {
        (t_start, EpidemicState { x: s0.x, y: level })
    } else {
        let free = simulate_from(m, &ControlSignal::Zero, s0, t_start, &cfg, Stop::ThresholdOrExtinction)?;
        if free.end != Some(EndReason::Event(EventKind::ThresholdHit)) {
            run.cost = if decay { cost_j(&free)? } else { f64::NAN };
            run.trajectory = free;
            return Ok(run);
        }
        let t0 = free.last_time();
        let x = free.last_state().x;
        run.trajectory = free;
        (t0, EpidemicState { x, y: level })
    };
    let h0 = arrival.x;
    run.t0 = Some(t0);
    run.h0 = Some(h0);

    // Phase 2: ride the threshold.
    let release = release_abscissa(m, level, h0)?;
    let rate = m.gamma() * level;
    let t1 = t0 + (h0 - release) / rate;
    run.xbar = Some(release);
    run.t1 = Some(t1);

    let mut open_loop: Option<PiecewiseConstant> = None;
    let ride_end = if t1 > t0 {
        let rho = |x: f64| {
            if x * m.beta(x, level) > 0.0 {
                m.rho_unchecked(x, level).max(0.0)
            } else {
                0.0
            }
        };
        let x_at = |t: f64| (h0 - rate * (t - t0)).max(release);
        let dt = cfg.step;
        let n = ((t1 - t0) / dt).floor() as usize;
        let mut times: Vec<f64> = (0..=n).map(|k| t0 + k as f64 * dt).collect();
        if t1 - times[n] > 1e-9 * dt {
            times.push(t1);
        } else {
            times[n] = t1;
        }

        let mut ride = Trajectory::default();
        let last = times.len() - 1;
        for (k, &t) in times.iter().enumerate() {
            let x = if k == last { release } else { x_at(t) };
            let u = rho(x);
            let left = if k == 0 { 0.0 } else { u };
            let right = if k == last { 0.0 } else { u };
            ride.push(t, EpidemicState { x, y: level }, left, right);
        }
        ride.events.push(Event {
            time: t1,
            kind: EventKind::REqualsOne,
            state: ride.last_state(),
        });

        let mut values: Vec<f64> = times
            .windows(2)
            .map(|w| {
                let avg = simpson(w[0], w[1], RIDE_AVERAGE_PANELS, |t| rho(x_at(t))) / (w[1] - w[0]);
                avg.clamp(0.0, 1.0)
            })
            .collect();
        values.push(0.0);
        open_loop = Some(PiecewiseConstant::new(times, values)?);

        run.trajectory.append(ride);
        EpidemicState { x: release, y: level }
    } else {
        if run.trajectory.is_empty() {
            run.trajectory.push(t0, arrival, 0.0, 0.0);
        }
        arrival
    };

    if let Some(p) = open_loop {
        run.control = ControlSignal::OpenLoop(p);
    }
    if !decay {
        run.cost = f64::NAN;
        return Ok(run);
    }

    // Phase 3: free decay.
    let mut decay = simulate_from(m, &ControlSignal::Zero, ride_end, t1, &cfg, Stop::Extinction)?;
    // The release itself sits on R = 1; drop the duplicate the watcher may report.
    decay
        .events
        .retain(|e| !(e.kind == EventKind::REqualsOne && (e.time - t1).abs() <= 10.0 * cfg.step));
    run.trajectory.append(decay);
    run.cost = cost_j(&run.trajectory)?;
    Ok(run)
}

/// Largest x ≤ `h0` with R(x, level) = 1, found by a downward scan and bisection.
/// Returns `h0` itself when R(h0, level) ≤ 1 and 0 if R stays above 1.
pub fn release_abscissa(m: &ModelInstance, level: f64, h0: f64) -> Result<f64> {
    let f = |x: f64| m.r(x, level) - 1.0;
    if f(h0) <= 0.0 {
        return Ok(h0);
    }
    let mut hi = h0;
    loop {
        let lo = (hi - RELEASE_SCAN).max(0.0);
        if f(lo) <= 0.0 {
            return bisect(lo, hi, 1e-14, 200, f);
        }
        if lo == 0.0 {
            return Ok(0.0);
        }
        hi = lo;
    }
}

/// A value-function evaluation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ValueQuery {
    pub state: EpidemicState,
    pub value: f64,
    pub region: RegionLabel,
}

/// V(x, y) = (1/(γȳ))·∫_{x̄}^{h(x, y)} ρ(s, ȳ) ds on D⁺, and 0 on D⁻.
pub fn value_function(g: &GeometryCache, s: EpidemicState) -> Result<ValueQuery> {
    let region = g.classify(s);
    let value = match region {
        RegionLabel::AboveThreshold => {
            return Err(Error::PreconditionViolated(format!(
                "V is defined below the threshold; y = {} > {}",
                s.y,
                g.ybar()
            )))
        }
        RegionLabel::Trivial | RegionLabel::DMinus => 0.0,
        RegionLabel::DPlus => value_at_abscissa(g, g.h(s)?, VALUE_PANELS)?,
    };
    Ok(ValueQuery {
        state: s,
        value,
        region,
    })
}

/// (1/(γȳ))·∫_{x̄}^{h} ρ(s, ȳ) ds with `panels` Simpson panels.
pub fn value_at_abscissa(g: &GeometryCache, h: f64, panels: usize) -> Result<f64> {
    let xbar = g
        .xbar()
        .ok_or_else(|| Error::PreconditionViolated("no release abscissa in the trivial regime".into()))?;
    let (m, ybar) = (g.model(), g.ybar());
    if h <= xbar {
        return Ok(0.0);
    }
    let integral = simpson(xbar, h, panels, |x| m.rho_unchecked(x, ybar));
    Ok(integral / (m.gamma() * ybar))
}

/// The gradient of V computed two ways.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct VPartials {
    /// ρ(h, ȳ)/(γȳ) · (h_x, h_y).
    pub analytic: (f64, f64),
    /// Central differences of V itself.
    pub finite_difference: (f64, f64),
}

pub fn v_partials(g: &GeometryCache, s: EpidemicState) -> Result<VPartials> {
    let stencil = g.difference_stencil(s)?;
    let (hx, hy) = stencil.gradient(|p| g.h(p))?;
    let h = g.h(s)?;
    let (m, ybar) = (g.model(), g.ybar());
    let c = m.rho_unchecked(h, ybar) / (m.gamma() * ybar);
    let finite_difference = stencil.gradient(|p| Ok(value_function(g, p)?.value))?;
    Ok(VPartials {
        analytic: (c * hx, c * hy),
        finite_difference,
    })
}
