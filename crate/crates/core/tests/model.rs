use laa_core::attack::AttackConfig;
use laa_core::dynamics::{detect_breach, equilibrium_state, integrate, rhs_no_attack, SimOptions, SwingDynamics};
use laa_core::grid::{equilibrium_from, equilibrium_residual, load_case, parse_case, serialize_case, GridModel};
use proptest::prelude::*;
use std::sync::LazyLock;

static FAST: LazyLock<GridModel> = LazyLock::new(|| case("ieee39-a"));

fn case(name: &str) -> GridModel {
    load_case(format!("{}/cases/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn fast_attack(m: &GridModel) -> AttackConfig {
    AttackConfig::none(m, m.gen_buses().to_vec()).unwrap().with_gain(m, 19, 33, 18.0).unwrap().with_step(m, 19, 0.1).unwrap()
}

#[test]
fn bundled_cases_round_trip() {
    for name in ["ieee39-a", "ieee39-b", "ieee6"] {
        let m = case(name);
        assert_eq!(parse_case(&serialize_case(&m)).unwrap(), m, "{name}");
    }
}

#[test]
fn equilibrium_residual_is_tiny_and_newton_reconverges() {
    let m = case("ieee39-a");
    let x = equilibrium_state(&m).unwrap();
    let delta = &x[..m.n_buses()];
    let r = equilibrium_residual(&m, delta).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(r <= 1e-10, "residual {r}");
    // deterministic ±1e-3 rad perturbation
    let guess: Vec<f64> = delta.iter().enumerate().map(|(i, d)| d + 1e-3 * ((i as f64 * 1.7).sin())).collect();
    let again = equilibrium_from(&m, &guess).unwrap();
    let diff = again.iter().zip(delta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-8, "moved {diff}");
}

#[test]
fn no_attack_equilibrium_holds_for_a_minute() {
    for name in ["ieee39-a", "ieee39-b"] {
        let m = case(name);
        let x0 = equilibrium_state(&m).unwrap();
        let none = AttackConfig::none(&m, m.gen_buses().to_vec()).unwrap();
        let out = integrate(&m, &none, &x0, 0.0, 60.0, &SimOptions { sample_rate_hz: None, record_interval: 0.1, ..SimOptions::default() }).unwrap();
        let g = m.n_gens();
        let worst = (0..out.trajectory.len()).flat_map(|k| (0..g).map(move |j| (k, j))).map(|(k, j)| out.trajectory.omega(k, j).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-8, "{name}: max |ω| {worst}");
    }
}

#[test]
fn fast_case_breaches_first() {
    let a = case("ieee39-a");
    let b = case("ieee39-b");
    let breach = |m: &GridModel, k: f64, t1: f64| {
        let atk = AttackConfig::none(m, m.gen_buses().to_vec()).unwrap().with_gain(m, 19, 33, k).unwrap().with_step(m, 19, 0.1).unwrap();
        let opts = SimOptions { stop_after_breach: Some(0.1), ..SimOptions::default() };
        let out = integrate(m, &atk, &equilibrium_state(m).unwrap(), 0.0, t1, &opts).unwrap();
        detect_breach(&out.trajectory, m.max_freq_dev_hz())
    };
    let fast = breach(&a, 18.0, 30.0).expect("fast case breaches");
    assert!((5.0..=30.0).contains(&fast.time), "fast breach at {}", fast.time);
    let slow = breach(&b, 25.0, 60.0).map(|b| b.time).unwrap_or(f64::INFINITY);
    assert!(slow > fast.time, "slow {slow} vs fast {}", fast.time);
}

#[test]
fn load_bus_rates_are_the_rhs_at_stored_points() {
    let m = case("ieee39-a");
    let atk = fast_attack(&m);
    let out = integrate(&m, &atk, &equilibrium_state(&m).unwrap(), 0.0, 5.0, &SimOptions::default()).unwrap();
    let dynamics = SwingDynamics::new(&m, &atk).unwrap();
    for k in (0..out.trajectory.len()).step_by(97) {
        let t = out.trajectory.times()[k];
        let f = dynamics.rhs_vec(t, out.trajectory.state(k));
        for &l in m.load_buses() {
            assert_eq!(out.trajectory.deriv(k)[l - 1], f[l - 1]);
        }
    }
}

fn random_state(m: &GridModel) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.8f64..0.8, m.state_dim())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_attack_rhs_equals_plain_swing_equations(x in random_state(&FAST)) {
        let m = &*FAST;
        let none = AttackConfig::none(m, m.gen_buses().to_vec()).unwrap();
        let got = SwingDynamics::new(m, &none).unwrap().rhs_vec(1.0, &x);
        let mut want = vec![0.0; x.len()];
        rhs_no_attack(m, &x, &mut want);
        prop_assert_eq!(got, want);
    }

    #[test]
    fn attack_injection_is_affine(
        x in random_state(&FAST),
        k1 in 0.0f64..20.0, k2 in 0.0f64..20.0, e1 in -0.2f64..0.2, e2 in -0.2f64..0.2,
        v1 in 0usize..29, v2 in 0usize..29, s1 in 0usize..10, s2 in 0usize..10,
    ) {
        let m = &*FAST;
        let sensing = m.gen_buses().to_vec();
        let loads = m.load_buses();
        let a1 = AttackConfig::none(m, sensing.clone()).unwrap().with_gain(m, loads[v1], sensing[s1], k1).unwrap().with_step(m, loads[v1], e1).unwrap();
        let a2 = AttackConfig::none(m, sensing.clone()).unwrap().with_gain(m, loads[v2], sensing[s2], k2).unwrap().with_step(m, loads[v2], e2).unwrap();
        let none = AttackConfig::none(m, sensing).unwrap();
        let both = a1.combined(&a2).unwrap();
        let f = |a: &AttackConfig| SwingDynamics::new(m, a).unwrap().rhs_vec(0.5, &x);
        let (f0, f1, f2, f12) = (f(&none), f(&a1), f(&a2), f(&both));
        for i in 0..x.len() {
            let lhs = f12[i] - f0[i];
            let rhs = (f1[i] - f0[i]) + (f2[i] - f0[i]);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "component {}: {} vs {}", i, lhs, rhs);
        }
    }
}
