use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use epictrl_core::controller::FEASIBILITY_TOL;
use epictrl_core::geometry::THRESHOLD_TOL;
use epictrl_core::numeric::fmt12;
use epictrl_core::verification::{
    alternative_signals, compare_thresholds, default_families, verify_scenario, CheckResult, VerificationSummary,
};
use epictrl_core::{
    cost_j, filling_the_box_at_level, run_filling_the_box, simulate, value_function, ControlSignal, EpidemicState,
    Error, GeometryCache, IntegratorConfig, ModelInstance, PiecewiseConstant, Regime, RunSummary, Stop, Trajectory,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigError, ScenarioConfig};
use crate::output::{write_json, write_with};

/// Default integrator step for `value-map` grid orbits.
pub const VALUE_MAP_STEP: f64 = 1e-2;

/// `value-map` asked for V where every start needs no control; exit code 3.
#[derive(Debug)]
pub struct TrivialRegime;

impl fmt::Display for TrivialRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("trivial regime: the threshold is never binding, V is identically 0")
    }
}

impl std::error::Error for TrivialRegime {}

#[derive(Debug, Clone)]
pub enum ControlChoice {
    Zero,
    FillingTheBox,
    File(PathBuf),
}

impl ControlChoice {
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "zero" => Ok(Self::Zero),
            "ftb" => Ok(Self::FillingTheBox),
            _ => match s.strip_prefix("file:") {
                Some(p) if !p.is_empty() => Ok(Self::File(PathBuf::from(p))),
                _ => Err(format!("expected zero, ftb or file:<path>, got `{s}`")),
            },
        }
    }

    fn label(&self) -> String {
        match self {
            Self::Zero => "zero".into(),
            Self::FillingTheBox => "ftb".into(),
            Self::File(p) => format!("file:{}", p.display()),
        }
    }
}

/// Reads right-continuous `t_start,u` rows; a header line and `#` comments
/// are skipped.
pub fn parse_open_loop(text: &str) -> std::result::Result<PiecewiseConstant, String> {
    let mut breakpoints = Vec::new();
    let mut values = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("t_start")) {
            continue;
        }
        let (t, u) = line
            .split_once(',')
            .ok_or_else(|| format!("line {}: expected `t_start,u`", n + 1))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("line {}: `{}`: {e}", n + 1, s.trim()))
        };
        breakpoints.push(parse(t)?);
        values.push(parse(u)?);
    }
    PiecewiseConstant::new(breakpoints, values).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct EventRow {
    time: f64,
    kind: &'static str,
}

#[derive(Serialize)]
struct TrajectorySummary {
    control: String,
    cost: Option<f64>,
    feasible: bool,
    max_y: f64,
    final_time: f64,
    final_state: EpidemicState,
    events: Vec<EventRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    filling_the_box: Option<RunSummary>,
}

impl TrajectorySummary {
    fn new(control: String, tr: &Trajectory, cost: Option<f64>, ybar: f64) -> Self {
        Self {
            control,
            cost,
            feasible: tr.max_y() <= ybar + FEASIBILITY_TOL,
            max_y: tr.max_y(),
            final_time: tr.last_time(),
            final_state: tr.last_state(),
            events: tr
                .events
                .iter()
                .map(|e| EventRow {
                    time: e.time,
                    kind: e.kind.as_str(),
                })
                .collect(),
            filling_the_box: None,
        }
    }
}

#[derive(Serialize)]
struct GeometrySummary {
    assumption1: bool,
    trivial: bool,
    tilde_y: Option<f64>,
    xbar: Option<f64>,
    yhat: f64,
}

impl GeometrySummary {
    fn new(g: &GeometryCache) -> Self {
        Self {
            assumption1: g.assumption1(),
            trivial: g.is_trivial(),
            tilde_y: g.tilde_y(),
            xbar: g.xbar(),
            yhat: g.yhat(),
        }
    }
}

#[derive(Serialize)]
struct LevelCost {
    ybar: f64,
    cost: f64,
    feasible: bool,
    file: String,
}

#[derive(Serialize)]
struct SimulateSummary {
    scenario: String,
    model: String,
    gamma: f64,
    start: EpidemicState,
    ybar: f64,
    geometry: GeometrySummary,
    uncontrolled: TrajectorySummary,
    controlled: TrajectorySummary,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    thresholds: Vec<LevelCost>,
}

fn build(cfg: &ScenarioConfig, integrator: &IntegratorConfig) -> Result<(ModelInstance, GeometryCache)> {
    let m = cfg.instance()?;
    let g = GeometryCache::new(&m, cfg.ybar, integrator).context("building the separatrix")?;
    Ok((m, g))
}

fn write_trajectory(path: &Path, m: &ModelInstance, tr: &Trajectory, every: usize) -> Result<()> {
    write_with(path, |w| tr.write_csv(m, every, w))
}

pub fn cmd_simulate(cfg: &ScenarioConfig, control: &ControlChoice, out: Option<PathBuf>) -> Result<()> {
    let (m, g) = build(cfg, &cfg.integrator)?;
    let s0 = cfg.start();
    if s0.y > cfg.ybar + THRESHOLD_TOL {
        return Err(Error::InfeasibleStart {
            y0: s0.y,
            ybar: cfg.ybar,
        }
        .into());
    }
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let every = cfg.output.every;
    let icfg = cfg.integrator.with_threshold(cfg.ybar);

    let free = simulate(&m, &ControlSignal::Zero, s0, &icfg, Stop::Extinction)?;
    write_trajectory(&dir.join("uncontrolled.csv"), &m, &free, every)?;
    let uncontrolled = TrajectorySummary::new("zero".into(), &free, Some(0.0), cfg.ybar);

    let controlled = match control {
        ControlChoice::Zero => {
            write_trajectory(&dir.join("controlled.csv"), &m, &free, every)?;
            TrajectorySummary::new(control.label(), &free, Some(0.0), cfg.ybar)
        }
        ControlChoice::FillingTheBox => {
            let run = run_filling_the_box(&g, s0, &cfg.integrator)?;
            write_trajectory(&dir.join("controlled.csv"), &m, &run.trajectory, every)?;
            let mut s = TrajectorySummary::new(control.label(), &run.trajectory, Some(run.cost), cfg.ybar);
            s.filling_the_box = Some(run.summary());
            s
        }
        ControlChoice::File(path) => {
            let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            let signal = parse_open_loop(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
            let tr = simulate(&m, &ControlSignal::OpenLoop(signal), s0, &icfg, Stop::Extinction)?;
            write_trajectory(&dir.join("controlled.csv"), &m, &tr, every)?;
            TrajectorySummary::new(control.label(), &tr, cost_j(&tr).ok(), cfg.ybar)
        }
    };

    let mut thresholds = Vec::new();
    for &level in &cfg.thresholds {
        let run = filling_the_box_at_level(&m, level, s0, &cfg.integrator)?;
        let file = format!("controlled_ybar_{}.csv", fmt12(level));
        write_trajectory(&dir.join(&file), &m, &run.trajectory, every)?;
        thresholds.push(LevelCost {
            ybar: level,
            cost: run.cost,
            feasible: run.feasible(),
            file,
        });
    }

    if let Some(pp) = &cfg.phase_portrait {
        write_with(&dir.join("curves.csv"), |w| {
            g.write_curves_csv(cfg.output.curve_points, w)
        })?;
        let free_cfg = IntegratorConfig {
            threshold: None,
            ..cfg.integrator.clone()
        };
        let n = pp.orbits;
        let mut starts = Vec::with_capacity(2 * n);
        for j in 1..=n {
            let y = j as f64 / (n + 1) as f64;
            starts.push(EpidemicState { x: 1.0 - y, y });
        }
        for j in 1..=n {
            starts.push(EpidemicState {
                x: (1.0 - pp.row) * j as f64 / (n + 1) as f64,
                y: pp.row,
            });
        }
        let orbits: Vec<Trajectory> = starts
            .par_iter()
            .map(|&s| simulate(&m, &ControlSignal::Zero, s, &free_cfg, Stop::Extinction))
            .collect::<epictrl_core::Result<_>>()?;
        write_with(&dir.join("orbits.csv"), |w| {
            writeln!(w, "orbit,t,x,y")?;
            for (i, tr) in orbits.iter().enumerate() {
                let last = tr.len() - 1;
                for k in (0..tr.len()).filter(|&k| k % every == 0 || k == last) {
                    let s = tr.states[k];
                    writeln!(w, "{i},{},{},{}", fmt12(tr.times[k]), fmt12(s.x), fmt12(s.y))?;
                }
            }
            Ok(())
        })?;
    }

    let summary = SimulateSummary {
        scenario: cfg.name.clone(),
        model: m.rate.name().to_string(),
        gamma: m.gamma(),
        start: s0,
        ybar: cfg.ybar,
        geometry: GeometrySummary::new(&g),
        uncontrolled,
        controlled,
        thresholds,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!("wrote {}", dir.display());
    Ok(())
}

pub struct VerifyOptions {
    pub alts: usize,
    pub seed: u64,
    pub tol_opt: f64,
    pub json: Option<PathBuf>,
    pub dump_alternatives: Option<PathBuf>,
}

#[derive(Serialize)]
struct ThresholdComparison {
    levels: Vec<f64>,
    costs: Vec<f64>,
    /// A higher lid costs more than a lower one.
    ordering_violated: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    scenario: String,
    model: String,
    gamma: f64,
    start: EpidemicState,
    ybar: f64,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    summary: Option<VerificationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    thresholds: Option<ThresholdComparison>,
    passed: bool,
}

fn compare_levels(
    m: &ModelInstance,
    s0: EpidemicState,
    levels: &[f64],
    cfg: &IntegratorConfig,
) -> Result<ThresholdComparison> {
    let mut levels = levels.to_vec();
    levels.sort_by(f64::total_cmp);
    let costs = compare_thresholds(m, s0, &levels, cfg)?;
    let ordering_violated = costs.windows(2).any(|w| w[1] > w[0] + FEASIBILITY_TOL);
    Ok(ThresholdComparison {
        levels,
        costs,
        ordering_violated,
    })
}

fn print_table(rows: &[CheckResult]) {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
    println!("{:width$}  {:6}  DETAIL", "CHECK", "RESULT");
    for r in rows {
        let result = match (r.passed, r.heuristic) {
            (true, false) => "PASS",
            (false, false) => "FAIL",
            (true, true) => "PASS*",
            (false, true) => "WARN*",
        };
        println!("{:width$}  {:6}  {}", r.name, result, r.detail);
    }
    if rows.iter().any(|r| r.heuristic) {
        println!("(* heuristic evidence, not counted in the verdict)");
    }
}

/// Returns whether every verdict passed.
pub fn cmd_verify(cfg: &ScenarioConfig, opts: &VerifyOptions) -> Result<bool> {
    let (m, g) = build(cfg, &cfg.integrator)?;
    let s0 = cfg.start();
    println!(
        "scenario {}: model {}, gamma = {}, ybar = {}, start = ({}, {})",
        cfg.name,
        m.rate.name(),
        fmt12(m.gamma()),
        fmt12(cfg.ybar),
        fmt12(s0.x),
        fmt12(s0.y)
    );
    let mut report = VerifyReport {
        scenario: cfg.name.clone(),
        model: m.rate.name().to_string(),
        gamma: m.gamma(),
        start: s0,
        ybar: cfg.ybar,
        seed: opts.seed,
        summary: None,
        thresholds: None,
        passed: false,
    };

    if !g.assumption1() {
        // Outside the theory there are no verdicts; the threshold comparison
        // is reported as evidence.
        println!("regime: {}", Regime::Unverified.as_str());
        let a1 = m.check_assumption1(epictrl_core::rate::DEFAULT_ASSUMPTION_GRID)?;
        println!(
            "assumption1 fails: min(x*beta_x + beta) = {}, max(beta_y) = {}",
            fmt12(a1.min_growth),
            fmt12(a1.max_beta_y)
        );
        if cfg.thresholds.len() < 2 {
            println!("no threshold comparison configured; nothing to verify");
        } else {
            let cmp = compare_levels(&m, s0, &cfg.thresholds, &cfg.integrator)?;
            for (l, c) in cmp.levels.iter().zip(&cmp.costs) {
                println!("  ybar = {:<8} cost = {}", fmt12(*l), fmt12(*c));
            }
            println!("ordering_violated = {}", cmp.ordering_violated);
            report.thresholds = Some(cmp);
        }
        report.passed = cfg.thresholds.len() >= 2;
    } else {
        let families = default_families(opts.seed, opts.alts);
        if let Some(dir) = &opts.dump_alternatives {
            dump_alternatives(dir, &m, &g, s0, &families, &cfg.integrator, cfg.output.every)?;
        }
        let mut summary = verify_scenario(&g, s0, &families, &cfg.integrator, opts.tol_opt)?;
        if cfg.thresholds.len() >= 2 {
            let cmp = compare_levels(&m, s0, &cfg.thresholds, &cfg.integrator)?;
            summary.checks.push(CheckResult {
                name: "threshold_ordering".into(),
                passed: !cmp.ordering_violated,
                heuristic: false,
                detail: format!(
                    "costs {} at levels {}",
                    cmp.costs.iter().map(|c| fmt12(*c)).collect::<Vec<_>>().join(", "),
                    cmp.levels.iter().map(|l| fmt12(*l)).collect::<Vec<_>>().join(", ")
                ),
            });
            summary.passed &= !cmp.ordering_violated;
            report.thresholds = Some(cmp);
        }
        println!("regime: {}", summary.regime.as_str());
        print_table(&summary.checks);
        report.passed = summary.passed;
        report.summary = Some(summary);
    }
    println!("verdict: {}", if report.passed { "PASS" } else { "FAIL" });
    if let Some(path) = &opts.json {
        write_json(path, &report)?;
    }
    Ok(report.passed)
}

fn dump_alternatives(
    dir: &Path,
    m: &ModelInstance,
    g: &GeometryCache,
    s0: EpidemicState,
    families: &[epictrl_core::verification::AlternativePolicyFamily],
    integrator: &IntegratorConfig,
    every: usize,
) -> Result<()> {
    if g.classify(s0) != epictrl_core::RegionLabel::DPlus {
        return Ok(());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let icfg = integrator.with_threshold(g.ybar());
    let signals = alternative_signals(g, s0, families, integrator)?;
    let mut index = String::from("index,descriptor,file\n");
    for (i, (descriptor, signal)) in signals.iter().enumerate() {
        let Ok(signal) = signal else { continue };
        let tr = simulate(m, &ControlSignal::OpenLoop(signal.clone()), s0, &icfg, Stop::Extinction);
        if let Ok(tr) = tr {
            let file = format!("alt_{i:04}.csv");
            write_trajectory(&dir.join(&file), m, &tr, every)?;
            index.push_str(&format!("{i},\"{descriptor}\",{file}\n"));
        }
    }
    fs::write(dir.join("index.csv"), index).with_context(|| format!("writing {}", dir.display()))
}

/// The `x,y,region,V` grid: x = i/N, y = ȳ·j/N, cells with x + y > 1 omitted.
pub fn value_map_csv(g: &GeometryCache, resolution: usize) -> Result<String> {
    let n = resolution.max(1);
    let ybar = g.ybar();
    let rows: Vec<String> = (0..=n)
        .into_par_iter()
        .map(|j| {
            let y = ybar * j as f64 / n as f64;
            let mut row = String::new();
            for i in 0..=n {
                let x = i as f64 / n as f64;
                if x + y > 1.0 + 1e-12 {
                    break;
                }
                let q = value_function(g, EpidemicState { x, y })?;
                row.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt12(x),
                    fmt12(y),
                    q.region.as_str(),
                    fmt12(q.value)
                ));
            }
            Ok(row)
        })
        .collect::<epictrl_core::Result<_>>()?;
    Ok(std::iter::once("x,y,region,V\n".to_string()).chain(rows).collect())
}

pub fn cmd_value_map(cfg: &ScenarioConfig, resolution: usize, step: f64, out: Option<PathBuf>) -> Result<()> {
    if step.is_nan() || step <= 0.0 {
        return Err(ConfigError(format!("--step {step} must be positive")).into());
    }
    let (_, g) = build(cfg, &cfg.integrator.with_step(step))?;
    if g.is_trivial() {
        return Err(TrivialRegime.into());
    }
    let csv = value_map_csv(&g, resolution)?;
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("value_map.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::output::to_json;

    #[test]
    fn control_choice_parsing() {
        assert!(matches!(ControlChoice::parse("zero"), Ok(ControlChoice::Zero)));
        assert!(matches!(ControlChoice::parse("ftb"), Ok(ControlChoice::FillingTheBox)));
        assert!(matches!(ControlChoice::parse("file:u.csv"), Ok(ControlChoice::File(p)) if p == Path::new("u.csv")));
        assert!(ControlChoice::parse("file:").is_err());
        assert!(ControlChoice::parse("bang").is_err());
    }

    #[test]
    fn open_loop_rows() {
        let p = parse_open_loop("t_start,u\n0,0\n# lockdown\n10,0.5\n20,0\n").unwrap();
        assert_eq!(p.breakpoints(), &[0.0, 10.0, 20.0]);
        assert_eq!(p.value_at(10.0), 0.5);
        assert!(parse_open_loop("0,0\n5\n").is_err());
        assert!(parse_open_loop("0,1.5\n").is_err());
        assert!(parse_open_loop("").is_err());
    }

    #[test]
    fn summary_json_has_twelve_digits() {
        let e = EventRow {
            time: 2.0 / 3.0,
            kind: "threshold_hit",
        };
        assert!(to_json(&e).unwrap().contains("0.666666666667"));
    }
}
