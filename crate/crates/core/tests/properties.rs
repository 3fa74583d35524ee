use epictrl_core::numeric::fmt12;
use epictrl_core::rate::Polynomial;
use epictrl_core::{
    simulate, value_function, ControlSignal, EpidemicState, GeometryCache, IntegratorConfig, ModelInstance,
    PiecewiseConstant, RateModel, RegionLabel, Stop,
};
use proptest::prelude::*;

fn assumption1_model(kind: u8, b: f64, a: f64, gamma: f64) -> ModelInstance {
    let rate = match kind % 4 {
        0 => RateModel::constant(b).unwrap(),
        1 => RateModel::saturating(Polynomial::constant(b), 2.0 * a).unwrap(),
        2 => RateModel::fig1(),
        _ => RateModel::fig2(),
    };
    ModelInstance::new(rate, gamma).unwrap()
}

fn state() -> impl Strategy<Value = EpidemicState> {
    (0.0..1.0f64, 0.0..1.0f64).prop_map(|(p, q)| {
        let y = q * 0.6;
        EpidemicState { x: p * (1.0 - y), y }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constant_control_keeps_state_in_simplex(
        kind in 0u8..4, b in 0.1..1.0f64, a in 0.0..1.0f64, gamma in 0.05..0.2f64,
        s0 in state(), u in 0.0..1.0f64,
    ) {
        let m = assumption1_model(kind, b, a, gamma);
        let cfg = IntegratorConfig::default().with_step(1e-2);
        let control = ControlSignal::OpenLoop(PiecewiseConstant::new(vec![0.0], vec![u]).unwrap());
        let tr = simulate(&m, &control, s0, &cfg, Stop::AtTime(40.0)).unwrap();
        for w in tr.states.windows(2) {
            prop_assert!(w[1].in_simplex(1e-9));
            prop_assert!(w[1].x <= w[0].x);
            // z = 1 − x − y never decreases.
            prop_assert!(w[1].recovered() >= w[0].recovered() - 1e-12);
        }
    }

    #[test]
    fn rho_is_relative_excess_of_r(kind in 0u8..4, b in 0.1..1.0f64, a in 0.0..1.0f64, s in state()) {
        prop_assume!(s.x > 1e-3);
        let m = assumption1_model(kind, b, a, 0.1);
        let r = m.reproduction_number(s);
        let rho = m.rho(s).unwrap();
        prop_assert!((rho - (r - 1.0) / r).abs() <= 1e-12 * (1.0 + rho.abs()));
    }

    #[test]
    fn r_monotone_for_assumption1_models(
        kind in 0u8..4, b in 0.1..1.0f64, a in 0.0..1.0f64, s in state(), d in 1e-4..0.1f64,
    ) {
        let m = assumption1_model(kind, b, a, 0.1);
        let right = EpidemicState { x: s.x + d, y: s.y };
        let up = EpidemicState { x: s.x, y: s.y + d };
        if right.in_simplex(0.0) {
            prop_assert!(m.reproduction_number(right) > m.reproduction_number(s));
        }
        if up.in_simplex(0.0) {
            prop_assert!(m.reproduction_number(up) <= m.reproduction_number(s));
        }
    }

    #[test]
    fn open_loop_is_right_continuous(mut values in prop::collection::vec(0.0..1.0f64, 1..10)) {
        values.push(0.0);
        let bps: Vec<f64> = (0..values.len()).map(|i| i as f64 * 0.5).collect();
        let p = PiecewiseConstant::new(bps.clone(), values.clone()).unwrap();
        for (b, v) in bps.iter().zip(&values) {
            prop_assert_eq!(p.value_at(*b), *v);
        }
        prop_assert_eq!(p.value_at(-1.0), 0.0);
    }

    #[test]
    fn fmt12_round_trips(v in prop::num::f64::NORMAL) {
        let back: f64 = fmt12(v).parse().unwrap();
        prop_assert!((back - v).abs() <= 1e-11 * v.abs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn value_increases_with_susceptibles(y in 0.01..0.19f64, p in 0.0..1.0f64) {
        let m = ModelInstance::new(RateModel::fig1(), 0.05).unwrap();
        let g = GeometryCache::new(&m, 0.2, &IntegratorConfig::default()).unwrap();
        let lambda = g.lambda(y).unwrap();
        let x = lambda + 1e-3 + p * (1.0 - y - lambda - 2e-3);
        let s = EpidemicState { x, y };
        prop_assume!(g.classify(s) == RegionLabel::DPlus);
        let v = value_function(&g, s).unwrap().value;
        let v_right = value_function(&g, EpidemicState { x: x + 1e-3, y }).unwrap().value;
        prop_assert!(v > 0.0);
        prop_assert!(v_right >= v);
    }
}
