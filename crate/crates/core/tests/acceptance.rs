//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use epictrl_core::dynamics::{simulate_final, step};
use epictrl_core::rate::{Polynomial, DEFAULT_ASSUMPTION_GRID};
use epictrl_core::verification::{
    default_families, derivative_check, run_counterexample, sweep_families, COUNTEREXAMPLE_COSTS, DEFAULT_SAMPLES,
    DEFAULT_SEED, TOL_OPT,
};
use epictrl_core::{
    run_filling_the_box, simulate, value_function, ControlSignal, EpidemicState, EventKind, GeometryCache,
    IntegratorConfig, ModelInstance, RateModel, RegionLabel, Stop,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn model(rate: RateModel, gamma: f64) -> ModelInstance {
    ModelInstance::new(rate, gamma).expect("valid model")
}

fn fig1() -> ModelInstance {
    model(RateModel::fig1(), 0.05)
}

fn fig2() -> ModelInstance {
    model(RateModel::fig2(), 0.05)
}

fn classical(b: f64, gamma: f64) -> ModelInstance {
    model(RateModel::constant(b).unwrap(), gamma)
}

fn saturating() -> ModelInstance {
    model(RateModel::saturating(Polynomial::constant(0.3), 1.0).unwrap(), 0.05)
}

fn cache(m: &ModelInstance, ybar: f64) -> GeometryCache {
    GeometryCache::new(m, ybar, &IntegratorConfig::default()).expect("geometry")
}

/// Uniform state in D⁺ at least `margin` to the right of λ and at least
/// `margin` below the threshold.
fn random_d_plus(g: &GeometryCache, rng: &mut ChaCha8Rng, margin: f64) -> EpidemicState {
    loop {
        let y = rng.gen_range(1e-3..g.ybar() - margin);
        let x = rng.gen_range(0.0..1.0 - y);
        let s = EpidemicState { x, y };
        let shifted = EpidemicState { x: x - margin, y };
        if g.classify(s) == RegionLabel::DPlus && g.classify(shifted) == RegionLabel::DPlus {
            return s;
        }
    }
}

fn counterexample() -> Outcome {
    let start = Instant::now();
    let r = run_counterexample().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let rel = |c: f64, r: f64| ((c - r) / r).abs();
    ensure(rel(r.cost_low, COUNTEREXAMPLE_COSTS[0]) <= 0.05, || {
        format!("cost(0.11) = {}", r.cost_low)
    })?;
    ensure(rel(r.cost_high, COUNTEREXAMPLE_COSTS[1]) <= 0.05, || {
        format!("cost(0.154) = {}", r.cost_high)
    })?;
    ensure(r.cost_high > r.cost_low, || "ordering not reproduced".into())?;
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "gamma = {}: cost(0.11) = {:.3}, cost(0.154) = {:.3}, {:.2?}",
        r.gamma, r.cost_low, r.cost_high, elapsed
    ))
}

fn fig1_box() -> Outcome {
    let start = Instant::now();
    let m = fig1();
    let cfg = IntegratorConfig::default();
    let g = cache(&m, 0.2);
    let run = run_filling_the_box(&g, EpidemicState { x: 0.99, y: 0.01 }, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (t0, t1) = (run.t0.ok_or("no T0")?, run.t1.ok_or("no T1")?);
    let tr = &run.trajectory;
    let mut flat_dev: f64 = 0.0;
    let mut after_t1 = Vec::new();
    for k in 0..tr.len() {
        let (t, s) = (tr.times[k], tr.states[k]);
        if t < t0 {
            ensure(tr.controls[k] == 0.0, || {
                format!("control {} before T0 at t = {t}", tr.controls[k])
            })?;
        } else if t <= t1 {
            flat_dev = flat_dev.max((s.y - 0.2).abs());
        } else {
            ensure(tr.controls[k] == 0.0, || {
                format!("control {} after T1 at t = {t}", tr.controls[k])
            })?;
            after_t1.push(s.y);
        }
    }
    ensure(flat_dev < 1e-6, || format!("flat segment deviation {flat_dev:.3e}"))?;
    let k0 = tr.times.iter().position(|&t| t == t0).ok_or("no sample at T0")?;
    ensure(tr.left_limits[k0] == 0.0 && tr.controls[k0] > 0.0, || {
        "no jump at T0".into()
    })?;
    let k1 = tr.times.iter().position(|&t| t == t1).ok_or("no sample at T1")?;
    ensure(tr.controls[k1] == 0.0, || "control not released at T1".into())?;
    let r1 = m.reproduction_number(EpidemicState {
        x: tr.states[k1].x,
        y: 0.2,
    });
    ensure((r1 - 1.0).abs() < 1e-6, || format!("R at release = {r1}"))?;
    ensure(after_t1.windows(2).all(|w| w[1] < w[0]), || {
        "y not strictly decreasing after T1".into()
    })?;
    ensure(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "T0 = {t0:.4}, T1 = {t1:.4}, flat deviation {flat_dev:.1e}, |R(T1) - 1| = {:.1e}, {elapsed:.2?}",
        (r1 - 1.0).abs()
    ))
}

fn cost_value_identity() -> Outcome {
    let cfg = IntegratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for (name, m) in [("fig1", fig1()), ("fig2", fig2())] {
        let g = cache(&m, 0.2);
        for _ in 0..10 {
            let s = random_d_plus(&g, &mut rng, 1e-3);
            let run = run_filling_the_box(&g, s, &cfg).map_err(|e| e.to_string())?;
            let v = value_function(&g, s).map_err(|e| e.to_string())?.value;
            let d = (run.cost - v).abs();
            worst = worst.max(d);
            ensure(d <= 1e-4, || format!("{name} at {s:?}: J = {}, V = {v}", run.cost))?;
        }
    }
    Ok(format!("20 starts, max |J - V| = {worst:.2e}"))
}

fn optimality_sweep() -> Outcome {
    let cfg = IntegratorConfig::default();
    let s0 = EpidemicState { x: 0.99, y: 0.01 };
    let scenarios = [
        ("fig1", fig1(), 0.2),
        ("fig2", fig2(), 0.2),
        ("classical(0.3,0.1)", classical(0.3, 0.1), 0.2),
        ("classical(0.25,0.05)", classical(0.25, 0.05), 0.15),
        ("saturating(0.3,1)", saturating(), 0.15),
    ];
    let mut lines = Vec::new();
    for (name, m, ybar) in scenarios {
        ensure(m.check_assumption1(DEFAULT_ASSUMPTION_GRID).unwrap().satisfied, || {
            format!("{name} fails the assumption")
        })?;
        let g = cache(&m, ybar);
        let fams = default_families(DEFAULT_SEED, DEFAULT_SAMPLES);
        let r = sweep_families(&g, s0, &fams, &cfg, TOL_OPT).map_err(|e| e.to_string())?;
        ensure(r.feasible_count >= 200, || {
            format!("{name}: only {} feasible alternatives", r.feasible_count)
        })?;
        let min = r.min_feasible_j.ok_or("no feasible alternative")?;
        ensure(r.verdict && min >= r.j_star - TOL_OPT, || {
            format!("{name}: J* = {}, min feasible J = {min}", r.j_star)
        })?;
        lines.push(format!(
            "{name}: J* = {:.4}, min J = {:.4} ({} feasible)",
            r.j_star, min, r.feasible_count
        ));
    }
    Ok(lines.join("; "))
}

fn h_invariance() -> Outcome {
    // Orbit points come from a finer grid than the one h integrates on.
    let cfg = IntegratorConfig::default().with_step(2.5e-4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let models = [
        ("fig1", fig1(), 0.2),
        ("fig2", fig2(), 0.2),
        ("classical", classical(0.3, 0.1), 0.2),
        ("saturating", saturating(), 0.15),
    ];
    for (name, m, ybar) in models {
        let g = cache(&m, ybar);
        for _ in 0..20 {
            let s = random_d_plus(&g, &mut rng, 1e-3);
            let (h0, t_hit) = g.hitting_abscissa_h(s).map_err(|e| e.to_string())?;
            for f in [0.25, 0.5, 0.75] {
                let (_, p, _) = simulate_final(&m, &ControlSignal::Zero, s, &cfg, Stop::AtTime(f * t_hit))
                    .map_err(|e| e.to_string())?;
                if g.classify(p) != RegionLabel::DPlus {
                    continue;
                }
                let d = (g.h(p).map_err(|e| e.to_string())? - h0).abs();
                worst = worst.max(d);
                ensure(d < 1e-6, || format!("{name} from {s:?}: deviation {d:.3e}"))?;
            }
        }
    }
    Ok(format!("80 starts, max orbit deviation {worst:.2e}"))
}

/// Classical SIR: x + y − (γ/b)·ln x is conserved, so h solves
/// h + ȳ − (γ/b)·ln h = x + y − (γ/b)·ln x on (γ/b, x].
fn classical_oracles() -> Outcome {
    let (b, gamma, ybar) = (0.3, 0.1, 0.2);
    let m = classical(b, gamma);
    let g = cache(&m, ybar);
    let c = gamma / b;
    let xbar = c;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst_h, mut worst_v): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let s = random_d_plus(&g, &mut rng, 1e-3);
        let invariant = s.x + s.y - c * s.x.ln();
        let f = |h: f64| h + ybar - c * h.ln() - invariant;
        let (mut lo, mut hi) = (xbar, s.x);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            // f is increasing on [x̄, x], negative at x̄ and equal to ȳ − y at x.
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let h_oracle = 0.5 * (lo + hi);
        let v_oracle = ((h_oracle - xbar) - c * (h_oracle / xbar).ln()) / (gamma * ybar);
        let h = g.h(s).map_err(|e| e.to_string())?;
        let v = value_function(&g, s).map_err(|e| e.to_string())?.value;
        worst_h = worst_h.max((h - h_oracle).abs());
        worst_v = worst_v.max((v - v_oracle).abs());
        ensure((h - h_oracle).abs() <= 1e-7, || {
            format!("h at {s:?}: {h} vs {h_oracle}")
        })?;
        ensure((v - v_oracle).abs() <= 1e-6, || {
            format!("V at {s:?}: {v} vs {v_oracle}")
        })?;
    }
    Ok(format!(
        "50 starts, max |h - oracle| = {worst_h:.2e}, max |V - oracle| = {worst_v:.2e}"
    ))
}

fn derivative_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut interior = 0;
    let mut on_threshold = 0;
    let (mut worst_identity, mut worst_vx, mut worst_rel): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for m in [fig1(), fig2()] {
        let g = cache(&m, 0.2);
        let mut accepted = 0;
        while accepted < 50 {
            let s = random_d_plus(&g, &mut rng, 2e-2);
            let Ok(d) = derivative_check(&g, s) else { continue };
            accepted += 1;
            interior += 1;
            worst_identity = worst_identity.max(d.identity_residual.abs());
            worst_vx = worst_vx.max(d.v_x_residual);
            ensure(d.identity_residual.abs() <= 1e-4, || {
                format!("h_x R - h_y (R-1) = {:.3e} at {s:?}", d.identity_residual)
            })?;
            ensure(d.h_y >= 0.0 && d.h_y <= d.h_y_bound + 1e-4, || {
                format!("h_y = {} (bound {}) at {s:?}", d.h_y, d.h_y_bound)
            })?;
            ensure(d.v_y >= 0.0 && d.v_y <= d.v_y_bound + 1e-4, || {
                format!("V_y = {} (bound {}) at {s:?}", d.v_y, d.v_y_bound)
            })?;
        }
        // V_y on the threshold line equals 1/(γȳ).
        let xbar = g.xbar().unwrap();
        for i in 0..50 {
            let x = xbar + 0.05 + (1.0 - 0.2 - xbar - 0.06) * i as f64 / 49.0;
            let s = EpidemicState { x, y: 0.2 };
            let d = derivative_check(&g, s).map_err(|e| e.to_string())?;
            let rel = (d.v_y - d.v_y_bound).abs() / d.v_y_bound;
            worst_rel = worst_rel.max(rel);
            ensure(rel <= 1e-3, || {
                format!("V_y(x, ybar) = {} vs {} at x = {x}", d.v_y, d.v_y_bound)
            })?;
            on_threshold += 1;
        }
    }
    Ok(format!(
        "{interior} interior + {on_threshold} threshold points; max identity residual {worst_identity:.1e}, \
         max V_y rel. error on the threshold {worst_rel:.1e}, max |V_x - rho V_y| {worst_vx:.1e}"
    ))
}

/// Random Assumption-1 model with γ ∈ [0.05, 0.2].
fn random_model(rng: &mut ChaCha8Rng) -> ModelInstance {
    loop {
        let gamma = rng.gen_range(0.05..0.2);
        let rate = match rng.gen_range(0..5) {
            0 => RateModel::constant(rng.gen_range(0.1..1.0)).unwrap(),
            1 => RateModel::saturating(Polynomial::constant(rng.gen_range(0.1..1.0)), rng.gen_range(0.0..3.0)).unwrap(),
            2 => RateModel::linear_damped(
                Polynomial::affine(rng.gen_range(0.05..0.5), rng.gen_range(0.0..0.5)),
                rng.gen_range(0.0..1.0),
            )
            .unwrap(),
            3 => RateModel::fig1(),
            _ => RateModel::fig2(),
        };
        let m = model(rate, gamma);
        if m.check_assumption1(50).unwrap().satisfied {
            return m;
        }
    }
}

fn unimodality() -> Outcome {
    let cfg = IntegratorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut grew = 0;
    for draw in 0..100 {
        let m = random_model(&mut rng);
        let y0 = rng.gen_range(1e-4..0.3);
        let x0 = rng.gen_range(0.0..1.0 - y0);
        let s0 = EpidemicState { x: x0, y: y0 };
        let tr = simulate(&m, &ControlSignal::Zero, s0, &cfg, Stop::Extinction)
            .map_err(|e| format!("draw {draw} ({}, {s0:?}): {e}", m.rate.name()))?;
        let mut changes = 0;
        let mut prev_sign = 0i8;
        for s in &tr.states {
            let ydot = m.gamma() * (m.reproduction_number(*s) - 1.0) * s.y;
            let sign = if ydot > 0.0 {
                1
            } else if ydot < 0.0 {
                -1
            } else {
                0
            };
            if sign != 0 {
                if prev_sign != 0 && sign != prev_sign {
                    changes += 1;
                    ensure(prev_sign == 1, || {
                        format!("draw {draw}: y turned from decreasing to increasing")
                    })?;
                }
                prev_sign = sign;
            }
        }
        if changes == 1 {
            grew += 1;
        }
        ensure(changes <= 1, || format!("draw {draw}: {changes} sign changes of dy/dt"))?;
        ensure(tr.states.windows(2).all(|w| w[1].x <= w[0].x), || {
            format!("draw {draw}: x increased")
        })?;
        ensure(tr.states.iter().all(|s| s.in_simplex(1e-9)), || {
            format!("draw {draw}: left the simplex")
        })?;
        ensure(tr.last_state().y < 1e-8 && tr.last_time() <= cfg.max_time, || {
            format!("draw {draw}: not extinct")
        })?;
        ensure(tr.events.iter().any(|e| e.kind == EventKind::InfectionExtinct), || {
            format!("draw {draw}: no extinction")
        })?;
    }
    Ok(format!("100 draws ({grew} with an interior peak)"))
}

fn rk4_order() -> Outcome {
    let run = |m: &ModelInstance, s0: EpidemicState, u: f64, dt: f64, t_end: f64| -> EpidemicState {
        let n = (t_end / dt).round() as usize;
        (0..n).fold(s0, |s, _| step(m, s, u, dt).expect("step"))
    };
    let scenarios = [
        ("fig1", fig1(), EpidemicState { x: 0.9, y: 0.05 }, 0.0),
        (
            "classical",
            classical(0.3, 0.1),
            EpidemicState { x: 0.95, y: 0.05 },
            0.0,
        ),
        ("fig2 under u = 0.3", fig2(), EpidemicState { x: 0.8, y: 0.1 }, 0.3),
    ];
    let mut parts = Vec::new();
    for (name, m, s0, u) in scenarios {
        let t_end = 40.0;
        let reference = run(&m, s0, u, 1e-3, t_end);
        let err = |dt: f64| {
            let s = run(&m, s0, u, dt, t_end);
            (s.x - reference.x).hypot(s.y - reference.y)
        };
        let (e1, e2) = (err(1.0), err(0.5));
        let ratio = e1 / e2;
        ensure(ratio >= 14.0, || {
            format!("{name}: error ratio {ratio:.2} ({e1:.3e} / {e2:.3e})")
        })?;
        parts.push(format!("{name} {ratio:.2}"));
    }
    Ok(format!("step-halving error ratios: {}", parts.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("counterexample reproduction", counterexample),
        ("fig1 filling-the-box shape", fig1_box),
        ("cost-value identity", cost_value_identity),
        ("optimality sweep", optimality_sweep),
        ("h orbit invariance", h_invariance),
        ("classical SIR oracles", classical_oracles),
        ("derivative identities and bounds", derivative_identities),
        ("unimodality and well-posedness", unimodality),
        ("RK4 order", rk4_order),
    ];
    // Free arguments select criteria by number or name substring, like libtest filters.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |i: usize, name: &str| {
        filters.is_empty()
            || filters
                .iter()
                .any(|f| *f == (i + 1).to_string() || name.contains(f.as_str()))
    };
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !selected(i, name) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
