use laa_core::attack::AttackConfig;
use laa_core::dynamics::{equilibrium_state, integrate, SimOptions};
use laa_core::estimate::{EstimateResult, EstimatorKind};
use laa_core::grid::{load_case, GridModel};
use laa_core::pinn::{identify, train_staged, PinnConfig, PinnProblem};
use laa_core::pmu::{add_noise, sample, MeasurementSet, NoiseSpec};
use laa_core::sr::{assemble, identify_all, identify_bus, information_pattern, lasso, least_squares, LassoOptions, SrOptions};
use laa_core::ukf::{min_eigenvalue, UkfConfig, UkfFilter, UkfMode};
use nalgebra::DMatrix;
use proptest::prelude::*;
use std::sync::LazyLock;

fn case(name: &str) -> GridModel {
    load_case(format!("{}/cases/{name}.json", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

static FAST: LazyLock<GridModel> = LazyLock::new(|| case("ieee39-a"));

fn single(m: &GridModel, victim: usize, sensing: usize, k: f64) -> AttackConfig {
    AttackConfig::none(m, m.gen_buses().to_vec()).unwrap().with_gain(m, victim, sensing, k).unwrap().with_step(m, victim, 0.1).unwrap()
}

fn measure(m: &GridModel, a: &AttackConfig, t1: f64, rate: f64) -> MeasurementSet {
    let opts = SimOptions { sample_rate_hz: Some(rate), ..SimOptions::default() };
    let out = integrate(m, a, &equilibrium_state(m).unwrap(), 0.0, t1, &opts).unwrap();
    sample(&out.trajectory, rate, 0.0, t1).unwrap()
}

static FAST_CLEAN: LazyLock<(AttackConfig, MeasurementSet)> = LazyLock::new(|| {
    let a = single(&FAST, 19, 33, 18.0);
    let ms = measure(&FAST, &a, 15.0, 50.0);
    (a, ms)
});

fn tiny_lambda() -> SrOptions {
    SrOptions { lasso: LassoOptions { lambda: 1e-6, ..LassoOptions::default() }, ..SrOptions::default() }
}

#[test]
fn noiseless_sr_recovers_the_attack_and_matches_least_squares() {
    let (truth, ms) = &*FAST_CLEAN;
    let out = identify_all(&FAST, ms, truth, &tiny_lambda()).unwrap();
    let r = &out.result;
    assert!((r.gain(19, 33).unwrap() - 18.0).abs() <= 1e-3);
    assert!((r.steps[FAST.load_index(19).unwrap()] - 0.1).abs() <= 1e-3);
    assert!(r.max_false_gain() <= 1e-3, "false gain {}", r.max_false_gain());
    for (bus, est) in &out.per_bus {
        let sys = assemble(&FAST, ms, *bus, truth.sensing_buses()).unwrap();
        let ls = least_squares(&sys.design, &sys.response).unwrap();
        let est = est.as_ref().unwrap();
        for (a, b) in est.coef.iter().zip(ls.iter()) {
            assert!((a - b).abs() <= 1e-6, "bus {bus}: {a} vs {b}");
        }
    }
}

#[test]
fn decentralized_rows_are_bit_identical() {
    let (truth, ms) = &*FAST_CLEAN;
    let noisy = add_noise(ms, NoiseSpec::gaussian(0.01), 3).unwrap();
    let opts = SrOptions::default();
    let all = identify_all(&FAST, &noisy, truth, &opts).unwrap();
    for (r, &bus) in FAST.load_buses().iter().enumerate() {
        let local = noisy.restricted_to(&information_pattern(&FAST, bus, truth.sensing_buses()));
        let alone = identify_bus(&FAST, &local, bus, truth.sensing_buses(), &opts).unwrap();
        let s = truth.sensing_buses().len();
        for c in 0..s {
            assert_eq!(all.result.gains[(r, c)].to_bits(), alone.coef[c].to_bits(), "bus {bus}");
        }
        assert_eq!(all.result.steps[r].to_bits(), alone.coef[s].to_bits());
    }
}

#[test]
fn support_shrinks_along_the_lambda_path() {
    let (truth, ms) = &*FAST_CLEAN;
    let systems: Vec<_> = FAST.load_buses().iter().map(|&b| assemble(&FAST, ms, b, truth.sensing_buses()).unwrap()).collect();
    let mut last = usize::MAX;
    for i in 0..10 {
        let lambda = 10f64.powf(-4.0 + 4.0 * i as f64 / 9.0);
        let opts = LassoOptions { lambda, ..LassoOptions::default() };
        let nnz: usize = systems.iter().map(|s| lasso(s, &opts).unwrap().coef.iter().filter(|v| **v != 0.0).count()).sum();
        assert!(nnz <= last, "λ={lambda}: {nnz} nonzeros after {last}");
        last = nnz;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn noiseless_sr_recovers_random_sparse_attacks(
        entries in prop::collection::vec((0usize..29, 0usize..10, 1.0f64..6.0), 1..5),
        steps in prop::collection::vec((0usize..29, -0.1f64..0.1), 0..3),
    ) {
        let m = &*FAST;
        let mut a = AttackConfig::none(m, m.gen_buses().to_vec()).unwrap();
        for &(v, s, k) in &entries {
            a = a.with_gain(m, m.load_buses()[v], m.gen_buses()[s], k).unwrap();
        }
        for &(v, e) in &steps {
            a = a.with_step(m, m.load_buses()[v], e).unwrap();
        }
        let ms = measure(m, &a, 5.0, 50.0);
        let r = identify_all(m, &ms, &a, &tiny_lambda()).unwrap().result;
        let err = (&r.gains - a.gains()).amax();
        prop_assert!(err <= 1e-4, "gain error {}", err);
        for (x, y) in r.steps.iter().zip(a.static_step()) {
            prop_assert!((x - y).abs() <= 1e-4);
        }
    }

    #[test]
    fn eta2_is_the_plain_sum_of_squares(est in prop::collection::vec(-30.0f64..30.0, 290)) {
        let m = &*FAST;
        let truth = single(m, 19, 33, 18.0);
        let k = DMatrix::from_row_slice(29, 10, &est);
        let r = EstimateResult::new(EstimatorKind::Sr, m, &truth, k.clone(), vec![0.0; 29]).unwrap();
        let mut sum = 0.0;
        for i in 0..29 {
            for j in 0..10 {
                sum += (truth.gains()[(i, j)] - k[(i, j)]).powi(2);
            }
        }
        prop_assert!((r.eta2 - sum).abs() <= 1e-12 * sum.max(1.0));
        let mut again = r.clone();
        again.recompute_metrics().unwrap();
        prop_assert_eq!(again.eta1, r.eta1);
    }
}

fn frame(m: &GridModel, ms: &MeasurementSet, k: usize) -> Vec<f64> {
    let mut z: Vec<f64> = ms.angles().row(k).iter().copied().collect();
    z.extend(m.gen_buses().iter().map(|&b| ms.freq(k, b)));
    z
}

#[test]
fn ukf_covariance_stays_symmetric_psd() {
    let m = case("ieee39-b");
    let a = single(&m, 19, 33, 25.0);
    let ms = add_noise(&measure(&m, &a, 20.0, 50.0), NoiseSpec::gaussian(0.01), 5).unwrap();
    let mut f = UkfFilter::new(&m, a.sensing_buses(), UkfConfig::default(), &frame(&m, &ms, 0), 1e-4).unwrap();
    for k in 1..ms.slots() {
        f.step(&frame(&m, &ms, k), ms.period()).unwrap();
        let p = f.covariance();
        assert_eq!(p, &p.transpose(), "asymmetric at step {k}");
        let lo = min_eigenvalue(p);
        assert!(lo >= -1e-9, "step {k}: min eigenvalue {lo}");
    }
}

#[test]
fn ukf_gain_variance_settles_with_clean_measurements() {
    let m = case("ieee39-b");
    let a = single(&m, 19, 33, 25.0);
    let ms = measure(&m, &a, 40.0, 50.0);
    let cfg = UkfConfig { mode: UkfMode::Row { victim: 19 }, meas_var: Some(1e-8), ..UkfConfig::default() };
    let walk = cfg.param_walk;
    let mut f = UkfFilter::new(&m, a.sensing_buses(), cfg, &frame(&m, &ms, 0), 1e-8).unwrap();
    let idx = (0..f.n_params()).find(|&i| f.param_label(i) == "K_19_33").unwrap() + f.physical_dim();
    let mut var = Vec::new();
    for k in 1..ms.slots() {
        f.step(&frame(&m, &ms, k), ms.period()).unwrap();
        var.push(f.covariance()[(idx, idx)]);
    }
    // each prediction adds the parameter random walk; allow exactly that
    let slack = walk * 1.0001;
    for w in var[var.len() / 2..].windows(2) {
        assert!(w[1] <= w[0] + slack, "variance rose {} -> {}", w[0], w[1]);
    }
}

fn small_pinn() -> PinnConfig {
    PinnConfig { hidden: vec![12, 12], ..PinnConfig::default() }
}

#[test]
fn pinn_loss_gradient_matches_finite_differences() {
    let m = case("ieee6");
    let a = single(&m, 5, 2, 3.0);
    let ms = add_noise(&measure(&m, &a, 4.0, 10.0), NoiseSpec::gaussian(0.01), 1).unwrap();
    for (pw, alpha) in [(0.0, 0.0), (1.0, 0.0), (1.0, 1e-2)] {
        let cfg = PinnConfig { physics_weight: pw, alpha, ..small_pinn() };
        let mut p = PinnProblem::new(&m, &ms, a.sensing_buses(), cfg).unwrap();
        let mut gains = DMatrix::from_element(3, 3, 0.4);
        gains[(1, 1)] = 2.5;
        p.set_attack(gains, DMatrix::from_row_slice(1, 3, &[0.02, -0.05, 0.1])).unwrap();
        let theta = p.theta();
        let mut grad = vec![0.0; theta.len()];
        p.evaluate(&theta, Some(&mut grad));
        let np = theta.len();
        // every attack coordinate plus a spread of network weights
        let picks: Vec<usize> = (0..np).filter(|i| i % 17 == 0 || *i >= np - 12).collect();
        for i in picks {
            let h = 1e-6 * theta[i].abs().max(1.0);
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[i] += h;
            dn[i] -= h;
            let fd = (p.evaluate(&up, None).total() - p.evaluate(&dn, None).total()) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel <= 1e-5, "pw={pw} α={alpha} θ[{i}]: ad {} fd {fd} rel {rel}", grad[i]);
        }
    }
}

#[test]
fn pinn_agrees_with_sr_on_a_clean_small_grid() {
    let m = case("ieee6");
    // one sensing bus: the three generators swing coherently, so with all of
    // them sensed only the row sum of the gains is identifiable
    let a = AttackConfig::none(&m, vec![2]).unwrap().with_gain(&m, 5, 2, 10.0).unwrap().with_step(&m, 5, 0.1).unwrap();
    let ms = measure(&m, &a, 8.0, 25.0);
    let sr = identify_all(&m, &ms, &a, &tiny_lambda()).unwrap().result;
    let (pinn, report) = identify(&m, &ms, &a, PinnConfig { hidden: vec![20, 20], ..PinnConfig::default() }, None).unwrap();
    let (k_sr, k_nn) = (sr.gain(5, 2).unwrap(), pinn.gain(5, 2).unwrap());
    assert!((k_nn - k_sr).abs() <= 0.05 * k_sr.abs(), "pinn {k_nn} vs sr {k_sr}");
    assert!(report.final_losses.total() < 0.01 * report.initial.total(), "loss {:?} from {:?}", report.final_losses, report.initial);
}

#[test]
fn pinn_finds_no_attack_in_quiet_data() {
    let m = case("ieee6");
    // a small disturbance so the channels are not constant
    let mut x0 = equilibrium_state(&m).unwrap();
    x0[m.n_buses()] += 0.05;
    let calm = AttackConfig::none(&m, m.gen_buses().to_vec()).unwrap();
    let out = integrate(&m, &calm, &x0, 0.0, 8.0, &SimOptions { sample_rate_hz: Some(25.0), ..SimOptions::default() }).unwrap();
    let ms = sample(&out.trajectory, 25.0, 0.0, 8.0).unwrap();
    let cfg = PinnConfig { hidden: vec![20, 20], alpha: 1e-3, ..PinnConfig::default() };
    let mut p = PinnProblem::new(&m, &ms, calm.sensing_buses(), cfg).unwrap();
    train_staged(&mut p).unwrap();
    assert!(p.gains().amax() <= 0.1, "gains {}", p.gains());
    assert!(p.steps().amax() <= 0.01, "steps {}", p.steps());
}
