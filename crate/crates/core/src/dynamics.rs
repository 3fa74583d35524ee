//! Fixed-step RK4 integration of the controlled and uncontrolled dynamics
//!
//! ```text
//! ẋ = −(1 − u)·γ·R(x, y)·y
//! ẏ =  γ·((1 − u)·R(x, y) − 1)·y
//! ```
//!
//! with bisection-refined event detection, plus the time-reversed
//! uncontrolled system used to trace separatrices.

use std::fmt;
use std::io::{self, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::fmt12;
use crate::rate::ModelInstance;

/// Slack allowed on the simplex constraints.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A forward step is rejected when its raw result leaves S by more than this.
pub const STEP_REJECT_TOL: f64 = 1e-6;

/// Feedback values may overshoot [0, 1] by this much before being an error.
pub const CONTROL_SLACK: f64 = 1e-12;

/// A point (x, y) of the state space S = {x, y ≥ 0, x + y ≤ 1}.
///
/// The recovered fraction is implicit: z = 1 − x − y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpidemicState {
    pub x: f64,
    pub y: f64,
}

impl EpidemicState {
    /// Builds a state, checking membership in S up to [`SIMPLEX_TOL`].
    pub fn new(x: f64, y: f64) -> Result<Self> {
        let s = Self { x, y };
        if !s.in_simplex(SIMPLEX_TOL) {
            return Err(Error::Domain(format!("({x}, {y}) is not in the state space")));
        }
        Ok(s)
    }

    pub fn in_simplex(&self, tol: f64) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.x >= -tol && self.y >= -tol && self.x + self.y <= 1.0 + tol
    }

    pub fn recovered(&self) -> f64 {
        1.0 - self.x - self.y
    }
}

/// Integration parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    /// Base time step.
    pub step: f64,
    /// Events are refined until the event function is below this in magnitude.
    pub event_bisection_tol: f64,
    /// y below which the infection is declared extinct.
    pub extinction_eps: f64,
    /// Horizon cap.
    pub max_time: f64,
    /// Level watched by the threshold-hit event, if any.
    pub threshold: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            event_bisection_tol: 1e-10,
            extinction_eps: 1e-8,
            max_time: 1e4,
            threshold: None,
        }
    }
}

impl IntegratorConfig {
    pub fn with_threshold(&self, ybar: f64) -> Self {
        Self {
            threshold: Some(ybar),
            ..self.clone()
        }
    }

    pub fn with_step(&self, step: f64) -> Self {
        Self { step, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step", self.step),
            ("event_bisection_tol", self.event_bisection_tol),
            ("extinction_eps", self.extinction_eps),
            ("max_time", self.max_time),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be positive")));
            }
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::InvalidParameter(format!("threshold {t} must lie in (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Right-continuous piecewise-constant control: `values[i]` applies on
/// `[breakpoints[i], breakpoints[i + 1])`, the last value forever after and
/// zero before the first breakpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseConstant {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl PiecewiseConstant {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.len() != values.len() || breakpoints.is_empty() {
            return Err(Error::InvalidControl(format!(
                "{} breakpoints for {} values",
                breakpoints.len(),
                values.len()
            )));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) || !breakpoints[0].is_finite() {
            return Err(Error::InvalidControl("breakpoints must be strictly increasing".into()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidControl(format!("control value {v} outside [0, 1]")));
        }
        Ok(Self { breakpoints, values })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at(&self, t: f64) -> f64 {
        match self.breakpoints.partition_point(|&b| b <= t) {
            0 => 0.0,
            i => self.values[i - 1],
        }
    }

    /// First breakpoint strictly after `t`.
    pub fn next_breakpoint(&self, t: f64) -> Option<f64> {
        let i = self.breakpoints.partition_point(|&b| b <= t);
        self.breakpoints.get(i).copied()
    }

    pub fn last_breakpoint(&self) -> f64 {
        *self.breakpoints.last().expect("non-empty")
    }

    /// ∫₀^∞ u dt, or `None` if the tail value is nonzero.
    pub fn total(&self) -> Option<f64> {
        if *self.values.last().expect("non-empty") != 0.0 {
            return None;
        }
        Some(
            self.breakpoints
                .windows(2)
                .zip(&self.values)
                .map(|(w, v)| (w[1] - w[0]) * v)
                .sum(),
        )
    }
}

/// A state-feedback rule u = π(x, y).
#[derive(Clone)]
pub struct FeedbackPolicy(Arc<dyn Fn(EpidemicState) -> f64 + Send + Sync>);

impl FeedbackPolicy {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(EpidemicState) -> f64 + Send + Sync + 'static,
    {
        Self(Arc::new(f))
    }

    /// Evaluates the policy; values outside [0, 1] beyond [`CONTROL_SLACK`] are an error.
    pub fn eval(&self, s: EpidemicState) -> Result<f64> {
        let u = (self.0)(s);
        if !(-CONTROL_SLACK..=1.0 + CONTROL_SLACK).contains(&u) {
            return Err(Error::InvalidControl(format!(
                "feedback returned {u} at ({}, {})",
                s.x, s.y
            )));
        }
        Ok(u.clamp(0.0, 1.0))
    }
}

impl fmt::Debug for FeedbackPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FeedbackPolicy(..)")
    }
}

/// A control signal u(t) ∈ [0, 1].
#[derive(Debug, Clone)]
pub enum ControlSignal {
    Zero,
    OpenLoop(PiecewiseConstant),
    Feedback(FeedbackPolicy),
}

impl ControlSignal {
    fn value(&self, t: f64, s: EpidemicState) -> Result<f64> {
        match self {
            ControlSignal::Zero => Ok(0.0),
            ControlSignal::OpenLoop(p) => Ok(p.value_at(t)),
            ControlSignal::Feedback(p) => p.eval(s),
        }
    }
}

/// Reads a control signal at non-decreasing times, walking the breakpoints
/// instead of searching them.
struct ControlReader<'a> {
    control: &'a ControlSignal,
    /// Number of breakpoints ≤ the last time read.
    idx: usize,
}

impl<'a> ControlReader<'a> {
    fn new(control: &'a ControlSignal, t: f64) -> Self {
        let idx = match control {
            ControlSignal::OpenLoop(p) => p.breakpoints.partition_point(|&b| b <= t),
            _ => 0,
        };
        Self { control, idx }
    }

    #[inline]
    fn seek(&mut self, t: f64) {
        if let ControlSignal::OpenLoop(p) = self.control {
            while self.idx < p.breakpoints.len() && p.breakpoints[self.idx] <= t {
                self.idx += 1;
            }
        }
    }

    #[inline]
    fn value(&mut self, t: f64, s: EpidemicState) -> Result<f64> {
        match self.control {
            ControlSignal::OpenLoop(p) => {
                self.seek(t);
                Ok(if self.idx == 0 { 0.0 } else { p.values[self.idx - 1] })
            }
            other => other.value(t, s),
        }
    }

    #[inline]
    fn next_breakpoint(&mut self, t: f64) -> Option<f64> {
        match self.control {
            ControlSignal::OpenLoop(p) => {
                self.seek(t);
                p.breakpoints.get(self.idx).copied()
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// y crossed the configured threshold upwards.
    ThresholdHit,
    /// R(x, y) crossed 1 in either direction.
    REqualsOne,
    /// x + y crossed 1 upwards (backward integration only).
    BoundaryExit,
    /// y dropped below the extinction level.
    InfectionExtinct,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::ThresholdHit => "threshold_hit",
            EventKind::REqualsOne => "R_equals_one",
            EventKind::BoundaryExit => "boundary_exit",
            EventKind::InfectionExtinct => "infection_extinct",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub state: EpidemicState,
}

/// When a simulation ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stop {
    AtTime(f64),
    OnEvent(EventKind),
    Extinction,
    /// Backward runs: leave S through x + y = 1, or go extinct.
    ExitOrExtinction,
    /// Reach the configured threshold, or go extinct first.
    ThresholdOrExtinction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    ReachedTime,
    Event(EventKind),
}

/// Time-sampled solution.
///
/// `controls[k]` is the value applied from `times[k]` on (right-continuous);
/// `left_limits[k]` is the value held on the interval ending at `times[k]`.
/// The two differ only where the control jumps.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<EpidemicState>,
    pub controls: Vec<f64>,
    pub left_limits: Vec<f64>,
    pub events: Vec<Event>,
    pub end: Option<EndReason>,
    /// Whether the control is known to be identically zero after the last sample.
    pub tail_control_zero: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last_state(&self) -> EpidemicState {
        *self.states.last().expect("non-empty trajectory")
    }

    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("non-empty trajectory")
    }

    pub fn max_y(&self) -> f64 {
        self.states.iter().map(|s| s.y).fold(f64::NEG_INFINITY, f64::max)
    }

    /// State at time `t` by linear interpolation between samples.
    pub fn state_at(&self, t: f64) -> Option<EpidemicState> {
        let (&first, &last) = (self.times.first()?, self.times.last()?);
        if t < first || t > last {
            return None;
        }
        let i = self.times.partition_point(|&ti| ti <= t);
        if i == self.len() {
            return Some(self.last_state());
        }
        let (ta, tb) = (self.times[i - 1], self.times[i]);
        let (a, b) = (self.states[i - 1], self.states[i]);
        let w = if tb > ta { (t - ta) / (tb - ta) } else { 0.0 };
        Some(EpidemicState {
            x: a.x + w * (b.x - a.x),
            y: a.y + w * (b.y - a.y),
        })
    }

    pub(crate) fn push(&mut self, t: f64, s: EpidemicState, left: f64, right: f64) {
        self.times.push(t);
        self.states.push(s);
        self.left_limits.push(left);
        self.controls.push(right);
    }

    /// Appends `other`, whose first sample coincides with our last one.
    pub fn append(&mut self, other: Trajectory) {
        if self.is_empty() {
            *self = other;
            return;
        }
        let mut other = other;
        if let Some(last) = self.controls.last_mut() {
            *last = other.controls[0];
        }
        self.times.extend(other.times.drain(1..));
        self.states.extend(other.states.drain(1..));
        self.controls.extend(other.controls.drain(1..));
        self.left_limits.extend(other.left_limits.drain(1..));
        self.events.append(&mut other.events);
        self.end = other.end;
        self.tail_control_zero = other.tail_control_zero;
    }

    /// Writes `t,x,y,u,R` rows for every `every`-th sample (first, last and
    /// event samples are always kept), followed by `# event,<time>,<kind>` lines.
    pub fn write_csv<W: Write>(&self, model: &ModelInstance, every: usize, mut w: W) -> io::Result<()> {
        let every = every.max(1);
        writeln!(w, "t,x,y,u,R")?;
        let mut ev = self.events.iter().map(|e| e.time).peekable();
        let last = self.len().saturating_sub(1);
        for k in 0..self.len() {
            let t = self.times[k];
            let mut keep = k % every == 0 || k == last;
            while let Some(&te) = ev.peek() {
                if te < t {
                    ev.next();
                } else {
                    if te == t {
                        keep = true;
                    }
                    break;
                }
            }
            if keep {
                let s = self.states[k];
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    fmt12(t),
                    fmt12(s.x),
                    fmt12(s.y),
                    fmt12(self.controls[k]),
                    fmt12(model.reproduction_number(s))
                )?;
            }
        }
        for e in &self.events {
            writeln!(w, "# event,{},{}", fmt12(e.time), e.kind.as_str())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Forward,
    Backward,
}

#[inline]
fn rhs(m: &ModelInstance, dir: Direction, x: f64, y: f64, u: f64) -> (f64, f64) {
    let flow = (1.0 - u) * m.beta(x, y) * x * y;
    let (dx, dy) = (-flow, flow - m.gamma() * y);
    match dir {
        Direction::Forward => (dx, dy),
        Direction::Backward => (-dx, -dy),
    }
}

#[inline]
fn rk4(m: &ModelInstance, dir: Direction, s: EpidemicState, u: f64, dt: f64) -> EpidemicState {
    let (k1x, k1y) = rhs(m, dir, s.x, s.y, u);
    let (k2x, k2y) = rhs(m, dir, s.x + 0.5 * dt * k1x, s.y + 0.5 * dt * k1y, u);
    let (k3x, k3y) = rhs(m, dir, s.x + 0.5 * dt * k2x, s.y + 0.5 * dt * k2y, u);
    let (k4x, k4y) = rhs(m, dir, s.x + dt * k3x, s.y + dt * k3y, u);
    EpidemicState {
        x: s.x + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
        y: s.y + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y),
    }
}

fn simplex_excess(s: EpidemicState) -> f64 {
    (-s.x).max(-s.y).max(s.x + s.y - 1.0).max(0.0)
}

fn project(s: EpidemicState) -> EpidemicState {
    let x = s.x.max(0.0);
    let y = s.y.max(0.0);
    let over = x + y - 1.0;
    if over > 0.0 {
        EpidemicState {
            x: (x - over).max(0.0),
            y,
        }
    } else {
        EpidemicState { x, y }
    }
}

/// One classical RK4 step with u held constant, clamped back onto S.
pub fn step(m: &ModelInstance, s: EpidemicState, u: f64, dt: f64) -> Result<EpidemicState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt = {dt} must be positive")));
    }
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidControl(format!("u = {u} outside [0, 1]")));
    }
    if !s.in_simplex(SIMPLEX_TOL) {
        return Err(Error::Domain(format!("({}, {}) is not in the state space", s.x, s.y)));
    }
    let next = rk4(m, Direction::Forward, s, u, dt);
    let excess = simplex_excess(next);
    if excess > STEP_REJECT_TOL || !next.x.is_finite() || !next.y.is_finite() {
        return Err(Error::StepRejected { excess });
    }
    Ok(project(next))
}

/// Event functions, arranged so that the watched crossing is from negative to
/// non-negative (R = 1 is watched both ways).
struct Watch {
    threshold: Option<f64>,
    extinction_eps: f64,
    dir: Direction,
}

const KINDS: [EventKind; 4] = [
    EventKind::ThresholdHit,
    EventKind::REqualsOne,
    EventKind::BoundaryExit,
    EventKind::InfectionExtinct,
];

impl Watch {
    #[inline]
    fn eval(&self, m: &ModelInstance, s: EpidemicState) -> [f64; 4] {
        [
            self.threshold.map_or(f64::NAN, |yb| s.y - yb),
            m.r(s.x, s.y) - 1.0,
            if self.dir == Direction::Backward {
                s.x + s.y - 1.0
            } else {
                f64::NAN
            },
            self.extinction_eps - s.y,
        ]
    }

    #[inline]
    fn crossed(kind: usize, before: f64, after: f64) -> bool {
        match KINDS[kind] {
            EventKind::REqualsOne => (before < 0.0 && after >= 0.0) || (before > 0.0 && after <= 0.0),
            _ => before < 0.0 && after >= 0.0,
        }
    }
}

struct RunOutput {
    trajectory: Trajectory,
    final_time: f64,
    final_state: EpidemicState,
    max_y: f64,
    /// ∫ u dt over the run.
    cost: f64,
}

/// Core loop shared by every public integration entry point.
#[allow(clippy::too_many_arguments)]
fn integrate(
    m: &ModelInstance,
    control: &ControlSignal,
    s0: EpidemicState,
    t0: f64,
    cfg: &IntegratorConfig,
    stop: Stop,
    dir: Direction,
    record: bool,
) -> Result<RunOutput> {
    cfg.validate()?;
    if !s0.in_simplex(SIMPLEX_TOL) {
        return Err(Error::Domain(format!("initial state ({}, {}) is not in S", s0.x, s0.y)));
    }
    if let Stop::AtTime(t_end) = stop {
        if !(t_end >= t0) {
            return Err(Error::InvalidParameter(format!(
                "stop time {t_end} precedes start {t0}"
            )));
        }
        if t_end > cfg.max_time {
            return Err(Error::HorizonExceeded { max_time: cfg.max_time });
        }
    }
    if matches!(
        stop,
        Stop::OnEvent(EventKind::ThresholdHit) | Stop::ThresholdOrExtinction
    ) && cfg.threshold.is_none()
    {
        return Err(Error::InvalidParameter("threshold-hit stop needs a threshold".into()));
    }

    let watch = Watch {
        threshold: cfg.threshold,
        extinction_eps: cfg.extinction_eps,
        dir,
    };
    let mut traj = Trajectory::default();
    let mut t = t0;
    let mut s = s0;
    let mut reader = ControlReader::new(control, t);
    let mut u = reader.value(t, s)?;
    if record {
        traj.push(t, s, u, u);
    }

    let is_stop = |kind: EventKind| match stop {
        Stop::OnEvent(k) => k == kind,
        Stop::Extinction => kind == EventKind::InfectionExtinct,
        Stop::ExitOrExtinction => {
            matches!(kind, EventKind::BoundaryExit | EventKind::InfectionExtinct)
        }
        Stop::ThresholdOrExtinction => {
            matches!(kind, EventKind::ThresholdHit | EventKind::InfectionExtinct)
        }
        Stop::AtTime(_) => false,
    };

    // Already extinct at the start.
    if s.y < cfg.extinction_eps && is_stop(EventKind::InfectionExtinct) {
        traj.events.push(Event {
            time: t,
            kind: EventKind::InfectionExtinct,
            state: s,
        });
        traj.end = Some(EndReason::Event(EventKind::InfectionExtinct));
        traj.tail_control_zero = tail_zero(control, t, u);
        return Ok(RunOutput {
            trajectory: traj,
            final_time: t,
            final_state: s,
            max_y: s.y,
            cost: 0.0,
        });
    }

    let time_cap = match stop {
        Stop::AtTime(t_end) => t_end,
        _ => cfg.max_time,
    };
    let snap = 1e-9 * cfg.step;
    let mut g_prev = watch.eval(m, s);
    let mut max_y = s.y;
    let mut cost = 0.0;

    loop {
        if t >= time_cap - snap {
            if let Stop::AtTime(_) = stop {
                traj.end = Some(EndReason::ReachedTime);
                traj.tail_control_zero = tail_zero(control, t, u);
                return Ok(RunOutput {
                    trajectory: traj,
                    final_time: t,
                    final_state: s,
                    max_y,
                    cost,
                });
            }
            return Err(Error::HorizonExceeded { max_time: cfg.max_time });
        }
        let mut t_next = t + cfg.step;
        if let Some(b) = reader.next_breakpoint(t) {
            if b <= t_next + snap {
                t_next = b;
            }
        }
        if t_next >= time_cap - snap {
            t_next = time_cap;
        }
        let dt = t_next - t;

        let raw = rk4(m, dir, s, u, dt);
        if dir == Direction::Forward {
            let excess = simplex_excess(raw);
            if excess > STEP_REJECT_TOL || !raw.x.is_finite() || !raw.y.is_finite() {
                return Err(Error::StepRejected { excess });
            }
        }
        let next = if dir == Direction::Forward { project(raw) } else { raw };
        let g_next = watch.eval(m, next);

        // Earliest crossing inside the step, if any.
        let mut first: Option<(f64, EpidemicState, usize)> = None;
        for k in 0..KINDS.len() {
            if !Watch::crossed(k, g_prev[k], g_next[k]) {
                continue;
            }
            let (tau, at) = refine(m, dir, &watch, k, s, u, dt, g_prev[k], cfg.event_bisection_tol);
            if first.is_none_or(|(best, _, _)| tau < best) {
                first = Some((tau, at, k));
            }
        }

        if let Some((tau, at, k)) = first {
            let kind = KINDS[k];
            cost += u * tau;
            t += tau;
            s = at;
            max_y = max_y.max(s.y);
            traj.events.push(Event {
                time: t,
                kind,
                state: s,
            });
            g_prev = watch.eval(m, s);
            let held = u;
            if is_stop(kind) {
                if record {
                    traj.push(t, s, held, held);
                }
                traj.end = Some(EndReason::Event(kind));
                traj.tail_control_zero = tail_zero(control, t, held);
                return Ok(RunOutput {
                    trajectory: traj,
                    final_time: t,
                    final_state: s,
                    max_y,
                    cost,
                });
            }
            u = reader.value(t, s)?;
            if record {
                traj.push(t, s, held, u);
            }
            continue;
        }

        cost += u * dt;
        t = t_next;
        s = next;
        max_y = max_y.max(s.y);
        g_prev = g_next;
        let held = u;
        u = reader.value(t, s)?;
        if record {
            traj.push(t, s, held, u);
        }
    }
}

/// Locates the crossing of event `k` inside a step by bisection on the
/// sub-step length, returning the first sub-step whose state is on the far
/// side of the crossing with |g| ≤ `tol` (plus a final secant polish).
#[allow(clippy::too_many_arguments)]
fn refine(
    m: &ModelInstance,
    dir: Direction,
    watch: &Watch,
    k: usize,
    s: EpidemicState,
    u: f64,
    dt: f64,
    g_start: f64,
    tol: f64,
) -> (f64, EpidemicState) {
    let eval = |tau: f64| {
        let p = rk4(m, dir, s, u, tau);
        (watch.eval(m, p)[k], p)
    };
    let before_side = g_start.signum();
    let (mut lo, mut g_lo) = (0.0, g_start);
    let (mut hi, (mut g_hi, mut p_hi)) = (dt, eval(dt));
    for _ in 0..200 {
        if g_hi.abs() <= tol || hi - lo <= f64::EPSILON * dt {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let (g_mid, p_mid) = eval(mid);
        if g_mid.signum() == before_side && g_mid != 0.0 {
            lo = mid;
            g_lo = g_mid;
        } else {
            hi = mid;
            g_hi = g_mid;
            p_hi = p_mid;
        }
    }
    if g_hi != 0.0 && g_hi != g_lo {
        let tau = lo - g_lo * (hi - lo) / (g_hi - g_lo);
        if tau > lo && tau < hi {
            let (g_s, p_s) = eval(tau);
            let crossed = g_s == 0.0 || g_s.signum() != before_side;
            if crossed && g_s.abs() <= g_hi.abs() {
                return (tau, p_s);
            }
        }
    }
    (hi, p_hi)
}

fn tail_zero(control: &ControlSignal, t: f64, current: f64) -> bool {
    match control {
        ControlSignal::Zero => true,
        ControlSignal::OpenLoop(p) => {
            let later = p.breakpoints().partition_point(|&b| b <= t);
            current == 0.0 && p.values()[later..].iter().all(|&v| v == 0.0)
        }
        ControlSignal::Feedback(_) => false,
    }
}

/// Integrates the controlled system forward from `s0` at t = 0.
pub fn simulate(
    m: &ModelInstance,
    control: &ControlSignal,
    s0: EpidemicState,
    cfg: &IntegratorConfig,
    stop: Stop,
) -> Result<Trajectory> {
    simulate_from(m, control, s0, 0.0, cfg, stop)
}

/// As [`simulate`], starting the clock at `t0` (open-loop signals are read in absolute time).
pub fn simulate_from(
    m: &ModelInstance,
    control: &ControlSignal,
    s0: EpidemicState,
    t0: f64,
    cfg: &IntegratorConfig,
    stop: Stop,
) -> Result<Trajectory> {
    let mut out = integrate(m, control, s0, t0, cfg, stop, Direction::Forward, true)?;
    if let (ControlSignal::Feedback(_), Some(EndReason::Event(EventKind::InfectionExtinct))) =
        (control, out.trajectory.end)
    {
        // A feedback tail is certified only once the infection is gone and
        // the policy has switched off.
        out.trajectory.tail_control_zero = *out.trajectory.controls.last().unwrap() == 0.0;
    }
    Ok(out.trajectory)
}

/// Final state and events of a forward run, without recording samples.
pub fn simulate_final(
    m: &ModelInstance,
    control: &ControlSignal,
    s0: EpidemicState,
    cfg: &IntegratorConfig,
    stop: Stop,
) -> Result<(f64, EpidemicState, Vec<Event>)> {
    simulate_final_from(m, control, s0, 0.0, cfg, stop)
}

/// As [`simulate_final`], starting the clock at `t0`.
pub fn simulate_final_from(
    m: &ModelInstance,
    control: &ControlSignal,
    s0: EpidemicState,
    t0: f64,
    cfg: &IntegratorConfig,
    stop: Stop,
) -> Result<(f64, EpidemicState, Vec<Event>)> {
    let out = integrate(m, control, s0, t0, cfg, stop, Direction::Forward, false)?;
    Ok((out.final_time, out.final_state, out.trajectory.events))
}

/// Sampled peak and cost of a forward run that is not recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunStats {
    pub final_time: f64,
    pub final_state: EpidemicState,
    pub max_y: f64,
    /// J over the run, if the control is known to vanish afterwards.
    pub cost: Option<f64>,
}

/// Forward run reduced to [`RunStats`]; the cost matches [`cost_j`] on the
/// recorded run.
pub fn simulate_stats(
    m: &ModelInstance,
    control: &ControlSignal,
    s0: EpidemicState,
    cfg: &IntegratorConfig,
    stop: Stop,
) -> Result<RunStats> {
    let out = integrate(m, control, s0, 0.0, cfg, stop, Direction::Forward, false)?;
    Ok(RunStats {
        final_time: out.final_time,
        final_state: out.final_state,
        max_y: out.max_y,
        cost: out.trajectory.tail_control_zero.then_some(out.cost),
    })
}

/// Integrates the time-reversed uncontrolled system until it leaves S through
/// x + y = 1 or the infection drops below the extinction level.
///
/// Times in the returned trajectory are elapsed backward time (increasing).
pub fn simulate_backward(m: &ModelInstance, s0: EpidemicState, cfg: &IntegratorConfig) -> Result<Trajectory> {
    simulate_backward_until(m, s0, cfg, Stop::ExitOrExtinction)
}

pub fn simulate_backward_until(
    m: &ModelInstance,
    s0: EpidemicState,
    cfg: &IntegratorConfig,
    stop: Stop,
) -> Result<Trajectory> {
    Ok(integrate(m, &ControlSignal::Zero, s0, 0.0, cfg, stop, Direction::Backward, true)?.trajectory)
}

/// J(u) = ∫ u dt over the trajectory (trapezoidal, exact at jumps).
pub fn cost_j(traj: &Trajectory) -> Result<f64> {
    if !traj.tail_control_zero {
        return Err(Error::IncompleteTrajectory);
    }
    Ok(traj
        .times
        .windows(2)
        .enumerate()
        .map(|(k, w)| 0.5 * (traj.controls[k] + traj.left_limits[k + 1]) * (w[1] - w[0]))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rate::RateModel;

    fn fig1() -> ModelInstance {
        ModelInstance::new(RateModel::fig1(), 0.05).unwrap()
    }

    fn sir(b: f64, g: f64) -> ModelInstance {
        ModelInstance::new(RateModel::constant(b).unwrap(), g).unwrap()
    }

    #[test]
    fn step_equilibrium_and_full_control() {
        let m = fig1();
        let s = EpidemicState::new(0.6, 0.0).unwrap();
        assert_eq!(step(&m, s, 0.3, 0.5).unwrap(), s);

        let s = EpidemicState::new(0.6, 0.2).unwrap();
        let dt = 0.01;
        let next = step(&m, s, 1.0, dt).unwrap();
        assert_eq!(next.x, 0.6);
        assert!((next.y - 0.2 * (-0.05 * dt).exp()).abs() < 1e-14);
    }

    #[test]
    fn step_halving_oracle() {
        let m = fig1();
        let s = EpidemicState::new(0.9, 0.05).unwrap();
        let full = step(&m, s, 0.0, 1e-3).unwrap();
        let half = step(&m, step(&m, s, 0.0, 5e-4).unwrap(), 0.0, 5e-4).unwrap();
        assert!((full.x - half.x).abs() < 1e-12 && (full.y - half.y).abs() < 1e-12);
    }

    #[test]
    fn step_rejects_huge_steps_and_bad_input() {
        let m = sir(5.0, 0.1);
        let s = EpidemicState::new(0.5, 0.5).unwrap();
        assert!(matches!(step(&m, s, 0.0, 50.0), Err(Error::StepRejected { .. })));
        assert!(step(&m, s, 1.5, 0.1).is_err());
        assert!(step(&m, s, 0.0, 0.0).is_err());
    }

    #[test]
    fn classical_sir_runs_to_extinction_and_conserves() {
        let m = sir(0.3, 0.1);
        let s0 = EpidemicState::new(0.99, 0.01).unwrap();
        let traj = simulate(
            &m,
            &ControlSignal::Zero,
            s0,
            &IntegratorConfig::default(),
            Stop::Extinction,
        )
        .unwrap();
        assert!(traj.last_state().y < 1e-8);
        assert!(traj.states.windows(2).all(|w| w[1].x <= w[0].x + 1e-12));
        let q = |s: &EpidemicState| s.x + s.y - (0.1 / 0.3) * s.x.ln();
        let q0 = q(&s0);
        let drift = traj.states.iter().map(|s| (q(s) - q0).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-7, "drift {drift}");
        assert_eq!(traj.end, Some(EndReason::Event(EventKind::InfectionExtinct)));
        assert_eq!(cost_j(&traj).unwrap(), 0.0);
    }

    #[test]
    fn fig1_uncontrolled_infection_is_unimodal() {
        let m = fig1();
        let s0 = EpidemicState::new(0.99, 0.01).unwrap();
        let traj = simulate(
            &m,
            &ControlSignal::Zero,
            s0,
            &IntegratorConfig::default(),
            Stop::Extinction,
        )
        .unwrap();
        let ys: Vec<f64> = traj.states.iter().map(|s| s.y).collect();
        let interior_maxima = ys.windows(3).filter(|w| w[1] > w[0] && w[1] >= w[2]).count();
        assert_eq!(interior_maxima, 1);
        let crossings = traj.events.iter().filter(|e| e.kind == EventKind::REqualsOne).count();
        assert_eq!(crossings, 1);
    }

    #[test]
    fn backward_from_unit_reproduction() {
        let m = fig1();
        // R(x, 0.2) = 1 at x = sqrt(1/5.6).
        let s0 = EpidemicState::new((1.0f64 / 5.6).sqrt(), 0.2).unwrap();
        let traj = simulate_backward(&m, s0, &IntegratorConfig::default()).unwrap();
        assert!(traj
            .states
            .windows(2)
            .skip(1)
            .all(|w| w[1].y < w[0].y && w[1].x > w[0].x));
    }

    #[test]
    fn backward_forward_round_trip() {
        let m = fig1();
        let s0 = EpidemicState::new(0.5, 0.2).unwrap();
        let cfg = IntegratorConfig::default();
        let back = simulate_backward_until(&m, s0, &cfg, Stop::AtTime(5.0)).unwrap();
        let there = back.last_state();
        let fwd = simulate(&m, &ControlSignal::Zero, there, &cfg, Stop::AtTime(5.0)).unwrap();
        let home = fwd.last_state();
        assert!((home.x - s0.x).abs() < 1e-6 && (home.y - s0.y).abs() < 1e-6);
    }

    #[test]
    fn open_loop_is_right_continuous_and_cost_is_exact() {
        let p = PiecewiseConstant::new(vec![0.0, 10.0], vec![0.5, 0.0]).unwrap();
        assert_eq!(p.value_at(10.0), 0.0);
        assert_eq!(p.value_at(9.999), 0.5);
        assert_eq!(p.value_at(-1.0), 0.0);
        assert_eq!(p.total(), Some(5.0));

        let m = fig1();
        let s0 = EpidemicState::new(0.99, 0.01).unwrap();
        let traj = simulate(
            &m,
            &ControlSignal::OpenLoop(p),
            s0,
            &IntegratorConfig::default(),
            Stop::AtTime(20.0),
        )
        .unwrap();
        assert!(traj.times.contains(&10.0));
        assert!((cost_j(&traj).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn cost_requires_certified_tail() {
        let p = PiecewiseConstant::new(vec![0.0], vec![0.2]).unwrap();
        let m = fig1();
        let s0 = EpidemicState::new(0.99, 0.01).unwrap();
        let traj = simulate(
            &m,
            &ControlSignal::OpenLoop(p),
            s0,
            &IntegratorConfig::default(),
            Stop::AtTime(1.0),
        )
        .unwrap();
        assert_eq!(cost_j(&traj), Err(Error::IncompleteTrajectory));
    }

    #[test]
    fn invalid_open_loop_rejected() {
        assert!(PiecewiseConstant::new(vec![0.0, 0.0], vec![0.1, 0.2]).is_err());
        assert!(PiecewiseConstant::new(vec![0.0], vec![1.2]).is_err());
        assert!(PiecewiseConstant::new(vec![0.0, 1.0], vec![0.1]).is_err());
    }

    #[test]
    fn feedback_out_of_range_is_an_error() {
        let m = fig1();
        let s0 = EpidemicState::new(0.9, 0.05).unwrap();
        let bad = ControlSignal::Feedback(FeedbackPolicy::new(|_| 1.5));
        assert!(matches!(
            simulate(&m, &bad, s0, &IntegratorConfig::default(), Stop::AtTime(1.0)),
            Err(Error::InvalidControl(_))
        ));
        let slack = ControlSignal::Feedback(FeedbackPolicy::new(|_| 1.0 + 1e-13));
        assert!(simulate(&m, &slack, s0, &IntegratorConfig::default(), Stop::AtTime(0.01)).is_ok());
    }

    #[test]
    fn threshold_event_is_refined() {
        let m = fig1();
        let s0 = EpidemicState::new(0.99, 0.01).unwrap();
        let cfg = IntegratorConfig::default().with_threshold(0.2);
        let traj = simulate(
            &m,
            &ControlSignal::Zero,
            s0,
            &cfg,
            Stop::OnEvent(EventKind::ThresholdHit),
        )
        .unwrap();
        let e = traj.events.last().unwrap();
        assert_eq!(e.kind, EventKind::ThresholdHit);
        assert!((e.state.y - 0.2).abs() <= 1e-10);
        assert_eq!(traj.last_time(), e.time);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn horizon_exceeded() {
        let m = fig1();
        let s0 = EpidemicState::new(0.99, 0.01).unwrap();
        let cfg = IntegratorConfig {
            max_time: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            simulate(&m, &ControlSignal::Zero, s0, &cfg, Stop::Extinction),
            Err(Error::HorizonExceeded { .. })
        ));
    }

    #[test]
    fn csv_layout() {
        let m = fig1();
        let s0 = EpidemicState::new(0.99, 0.01).unwrap();
        let cfg = IntegratorConfig::default().with_threshold(0.2);
        let traj = simulate(
            &m,
            &ControlSignal::Zero,
            s0,
            &cfg,
            Stop::OnEvent(EventKind::ThresholdHit),
        )
        .unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&m, 1000, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("t,x,y,u,R"));
        assert!(text.lines().last().unwrap().starts_with("# event,"));
        assert!(text.contains(",threshold_hit"));
    }
}
