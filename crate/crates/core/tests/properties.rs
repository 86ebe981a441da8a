use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qoc_codesign::harness::{
    dump, parse_config, random_gate_set, ExperimentConfig, OptimizerConfig, TaskSpec,
};
use qoc_codesign::hwmodel::{forward_chain, HardwareModel, V_MAX, V_MIN};
use qoc_codesign::ppo::reward_fn;
use qoc_codesign::qsim::{gate_fidelity, Backend, PhysicalConstants, QuantumTask, Simulator};
use qoc_codesign::sade_adam::{crossover, mutate};
use qoc_codesign::schedule::ControlSchedule;

fn hw(n: usize, dynamic: bool) -> HardwareModel {
    let mut h = HardwareModel::default();
    h.imperfections.dynamic = dynamic;
    h.resolve(n).unwrap();
    h
}

fn volts(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(V_MIN..=V_MAX, len)
}

fn gates() -> impl Strategy<Value = Vec<String>> {
    any::<u64>().prop_map(|s| random_gate_set(3, 3, s).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn propagator_is_unitary(v in volts(3 * 2 * 5), g in gates(), dynamic in any::<bool>()) {
        let task = QuantumTask { gate_strings: g, gate_time_us: 0.1, t_steps: 20 };
        let sim = Simulator::new(&hw(3, dynamic), &task, &PhysicalConstants::default())
            .unwrap()
            .with_backend(Backend::Dense);
        let s = ControlSchedule::from_vec(3, 5, v).unwrap();
        prop_assert!(sim.propagate(&s).unwrap().u_final.unitarity_defect() <= 1e-10);
    }

    #[test]
    fn fidelity_ignores_global_phase(v in volts(3 * 2 * 4), g in gates(), phi in 0.0..std::f64::consts::TAU) {
        let task = QuantumTask { gate_strings: g, gate_time_us: 0.1, t_steps: 20 };
        let sim = Simulator::new(&hw(3, false), &task, &PhysicalConstants::default())
            .unwrap()
            .with_backend(Backend::Dense);
        let u = sim.propagate(&ControlSchedule::from_vec(3, 4, v).unwrap()).unwrap().u_final;
        let f = gate_fidelity(&u, &sim.target);
        let f_rot = gate_fidelity(&u.scale(Complex64::from_polar(1.0, phi)), &sim.target);
        prop_assert!((f - f_rot).abs() <= 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&f));
    }

    #[test]
    fn backends_agree(v in volts(3 * 2 * 5), g in gates(), dynamic in any::<bool>()) {
        let task = QuantumTask { gate_strings: g, gate_time_us: 0.1, t_steps: 20 };
        let sim = Simulator::new(&hw(3, dynamic), &task, &PhysicalConstants::default()).unwrap();
        let s = ControlSchedule::from_vec(3, 5, v).unwrap();
        let fact = sim.fidelity(&s).unwrap();
        let dense = sim.clone().with_backend(Backend::Dense).fidelity(&s).unwrap();
        prop_assert!((fact - dense).abs() <= 1e-10);
    }

    #[test]
    fn chain_is_linear_in_input(
        v in volts(3 * 2 * 2),
        re in prop::collection::vec(-1.0f64..1.0, 12),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let h = hw(3, true);
        let s = ControlSchedule::from_vec(3, 2, v).unwrap();
        let a: Vec<Complex64> = (0..3).map(|i| Complex64::new(re[i], re[i + 3])).collect();
        let b: Vec<Complex64> = (0..3).map(|i| Complex64::new(re[i + 6], re[i + 9])).collect();
        let mix: Vec<Complex64> = a.iter().zip(&b).map(|(x, y)| x * alpha + y * beta).collect();
        let (ea, eb, em) = (
            forward_chain(&s, &h, &a, 4).unwrap(),
            forward_chain(&s, &h, &b, 4).unwrap(),
            forward_chain(&s, &h, &mix, 4).unwrap(),
        );
        for k in 0..4 {
            for j in 0..3 {
                prop_assert!((em[k][j] - (ea[k][j] * alpha + eb[k][j] * beta)).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn wide_pitch_removes_crosstalk(v in volts(3 * 2 * 2)) {
        let mut far = HardwareModel::default();
        far.geometry.d0 = 50.0;
        far.resolve(3).unwrap();
        let mut none = far.clone();
        none.crosstalk = false;
        let task = QuantumTask::new(&["X", "Y", "H"]);
        let pc = PhysicalConstants::default();
        let s = ControlSchedule::from_vec(3, 2, v).unwrap();
        let a = Simulator::new(&far, &task, &pc).unwrap().fields(&s).unwrap();
        let b = Simulator::new(&none, &task, &pc).unwrap().fields(&s).unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            prop_assert!((x - y).norm() <= 1e-12);
        }
    }

    #[test]
    fn sade_operators_stay_in_bounds(
        a in volts(24), b in volts(24), c in volts(24), parent in volts(24),
        mu in 0.1f64..0.9, cr in 0.1f64..0.9, seed in any::<u64>(),
    ) {
        let m = mutate(&a, &b, &c, mu);
        let child = crossover(&parent, &m, cr, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(m.iter().chain(&child).all(|x| (V_MIN..=V_MAX).contains(x)));
        prop_assert!(child.iter().zip(&parent).zip(&m).all(|((c, p), m)| c == p || c == m));
    }

    #[test]
    fn schedule_clamp_and_resample(v in prop::collection::vec(-40.0f64..40.0, 2 * 2 * 10), n_new in 1usize..40) {
        let mut s = ControlSchedule::from_vec(2, 10, v).unwrap();
        s.clamp_to_bounds();
        prop_assert!(s.within_bounds());
        let r = s.resample(n_new);
        prop_assert!(r.within_bounds());
        prop_assert_eq!(s.resample(10), s);
    }

    #[test]
    fn reward_is_affine_in_delta(f in 0.0f64..1.0, d in -1.0f64..1.0, a in 0.0f64..5.0, b in 0.0f64..50.0, p in 1.0f64..3.0) {
        let base = reward_fn(f, 0.0, a, b, p);
        prop_assert!((reward_fn(f, d, a, b, p) - base - b * d).abs() <= 1e-12);
        prop_assert!((base - a * f.powf(p)).abs() <= 1e-12);
    }

    #[test]
    fn config_round_trips(
        d0 in 0.1f64..8.0,
        seeds in prop::collection::vec(any::<u64>(), 1..6),
        gate_seed in any::<u64>(),
        method in prop::sample::select(vec!["sade_adam", "ppo", "e2e"]),
    ) {
        let mut cfg = ExperimentConfig::new(
            "prop",
            TaskSpec::random(2, 3, gate_seed),
            OptimizerConfig::from_method(method).unwrap(),
        );
        cfg.hardware.geometry.d0 = d0;
        cfg.seeds = seeds;
        cfg.resolve().unwrap();
        let text = dump(&cfg).unwrap();
        let again = parse_config(&text).unwrap();
        prop_assert_eq!(&again, &cfg);
        prop_assert_eq!(dump(&again).unwrap(), text);
    }
}
